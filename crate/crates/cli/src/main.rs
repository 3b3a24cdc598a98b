//! Thin sequential driver over the library: run experiments, score
//! transcript sources, convert subject-level CSVs, and emit fine-tune or
//! plot files. Exit codes: 0 success, 1 usage, 2 runtime failure.

mod snapshot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crowds_core::engine::{run_experiment, TranscriptSet, TranscriptStore};
use crowds_core::humandata::{
    export_finetune_pairs, ingest_human_csv, reconstruct_feedback, ColumnMap,
};
use crowds_core::metrics::{
    full_report, per_question_csv, per_round_csv, render_text_table, to_json, ErrorTable,
    RoundErrorPoint,
};
use crowds_core::model::{
    BackendConfig, CassetteMode, Condition, ExperimentConfig, LlmParams, Party, PersonaDetail,
    QuestionBank, RawConfig, ReplayParams, SyntheticParams, Topology,
};

#[derive(Parser)]
#[command(
    name = "crowds",
    version,
    about = "Multi-round group estimation experiments over homogeneous agent networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its transcript store
    Run(RunArgs),
    /// Score a transcript source and write report files
    Metrics(MetricsArgs),
    /// Convert a subject-level CSV into a transcript snapshot
    Ingest(IngestArgs),
    /// Emit chat-pair training files from a transcript source
    ExportFinetune(ExportArgs),
    /// Emit per-round error curves as CSV, optionally with an SVG chart
    PlotData(PlotArgs),
    /// Check a config file and print its normalized form
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Ring,
    Random4Regular,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetailArg {
    Simple,
    Detailed,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartyArg {
    Dem,
    Rep,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConditionArg {
    Social,
    Control,
}

/// Backend choice on the command line; llm settings beyond the default
/// local endpoint come from the config file.
#[derive(Clone)]
enum BackendSpec {
    Synthetic,
    Replay(PathBuf),
    Llm,
}

fn parse_backend(s: &str) -> Result<BackendSpec, String> {
    match s {
        "synthetic" => Ok(BackendSpec::Synthetic),
        "llm" => Ok(BackendSpec::Llm),
        other => match other.strip_prefix("replay:") {
            Some(dir) if !dir.is_empty() => Ok(BackendSpec::Replay(PathBuf::from(dir))),
            _ => Err(format!(
                "expected 'synthetic', 'llm', or 'replay:<store dir>', got {other:?}"
            )),
        },
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML); flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// synthetic, llm, or replay:<store dir>
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendSpec>,
    /// Master seed; all randomness derives from it
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated question ids, e.g. '3' or '1,2,5'
    #[arg(long, value_delimiter = ',')]
    questions: Option<Vec<u8>>,
    #[arg(long)]
    runs_social: Option<u32>,
    #[arg(long)]
    runs_control: Option<u32>,
    /// Agents per group
    #[arg(long, visible_alias = "n")]
    n_agents: Option<u32>,
    #[arg(long, value_enum)]
    topology: Option<TopologyArg>,
    #[arg(long, value_enum)]
    persona_detail: Option<DetailArg>,
    /// Ask for step-by-step reasoning before the final answer line
    #[arg(long, overrides_with = "no_cot")]
    cot: bool,
    #[arg(long, overrides_with = "cot")]
    no_cot: bool,
    /// Prepend fixed partisan belief sentences to round-1 prompts
    #[arg(long, overrides_with = "no_induced_bias")]
    induced_bias: bool,
    #[arg(long, overrides_with = "induced_bias")]
    no_induced_bias: bool,
    /// Output directory; defaults to crowds-<config hash>-<timestamp>
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Transcript store directory or snapshot JSON file
    source: PathBuf,
    /// Report directory; defaults to <source>/reports
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    /// Subject-level CSV with a header row
    csv: PathBuf,
    /// Snapshot file to write; defaults to <csv stem>.snapshot.json
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rename an input column, e.g. --column subject=participant_id
    #[arg(long = "column", value_name = "FIELD=NAME")]
    columns: Vec<String>,
    /// Keep stored feedback slots empty instead of recomputing peer averages
    #[arg(long)]
    no_reconstruct: bool,
}

#[derive(Args)]
struct ExportArgs {
    /// Transcript store directory or snapshot JSON file
    source: PathBuf,
    /// Restrict to one party (default: both)
    #[arg(long, value_enum)]
    party: Option<PartyArg>,
    /// Restrict to one condition (default: both)
    #[arg(long, value_enum)]
    condition: Option<ConditionArg>,
    /// Comma-separated question ids; defaults to the 5,6,7,8 training split
    #[arg(long, value_delimiter = ',')]
    questions: Option<Vec<u8>>,
    /// Output directory; defaults to <source>/finetune
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Transcript store directory or snapshot JSON file
    source: PathBuf,
    /// Output directory; defaults to <source>/reports
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a static line chart
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct ValidateArgs {
    /// Experiment config file (TOML)
    config: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Ingest(args) => cmd_ingest(args),
        Command::ExportFinetune(args) => cmd_export_finetune(args),
        Command::PlotData(args) => cmd_plot_data(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_raw_config(path: Option<&Path>) -> anyhow::Result<RawConfig> {
    match path {
        None => Ok(RawConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RawConfig::from_toml(&text)
                .with_context(|| format!("parsing config {}", path.display()))
        }
    }
}

fn merged_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut raw = load_raw_config(args.config.as_deref())?;
    if let Some(backend) = &args.backend {
        raw.backend = Some(match backend {
            BackendSpec::Synthetic => match raw.backend {
                // keep file-supplied synthetic parameters
                Some(BackendConfig::Synthetic(params)) => BackendConfig::Synthetic(params),
                _ => BackendConfig::Synthetic(SyntheticParams::default()),
            },
            BackendSpec::Replay(source) => BackendConfig::Replay(ReplayParams {
                source: source.clone(),
            }),
            BackendSpec::Llm => match raw.backend {
                Some(BackendConfig::Llm(params)) => BackendConfig::Llm(params),
                _ => BackendConfig::Llm(LlmParams::default()),
            },
        });
    }
    if let Some(seed) = args.seed {
        raw.seed = Some(seed);
    }
    if let Some(questions) = &args.questions {
        raw.questions = Some(questions.clone());
    }
    if let Some(runs) = args.runs_social {
        raw.runs_social = Some(runs);
    }
    if let Some(runs) = args.runs_control {
        raw.runs_control = Some(runs);
    }
    if let Some(n) = args.n_agents {
        raw.n_agents = Some(n);
    }
    if let Some(topology) = args.topology {
        raw.topology = Some(match topology {
            TopologyArg::Ring => Topology::Ring,
            TopologyArg::Random4Regular => Topology::Random4Regular,
        });
    }
    if let Some(detail) = args.persona_detail {
        raw.persona_detail = Some(match detail {
            DetailArg::Simple => PersonaDetail::Simple,
            DetailArg::Detailed => PersonaDetail::Detailed,
        });
    }
    if args.cot || args.no_cot {
        raw.cot = Some(args.cot);
    }
    if args.induced_bias || args.no_induced_bias {
        raw.induced_bias = Some(args.induced_bias);
    }
    raw.validate().context("invalid configuration")
}

/// A live llm run needs its key before any request goes out; replay from a
/// cassette does not.
fn check_api_key(config: &ExperimentConfig) -> anyhow::Result<()> {
    if let BackendConfig::Llm(params) = &config.backend {
        if params.cassette_mode != CassetteMode::Replay
            && std::env::var(&params.api_key_env).is_err()
        {
            bail!(
                "llm backend needs an API key: set the {} environment variable",
                params.api_key_env
            );
        }
    }
    Ok(())
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let config = merged_config(&args)?;
    check_api_key(&config)?;
    let out = args.out.unwrap_or_else(|| {
        PathBuf::from(format!(
            "crowds-{}-{}",
            &config.content_hash()[..12],
            now_ms()
        ))
    });

    let started = Instant::now();
    let set = run_experiment(&config, &out)
        .with_context(|| format!("running into {}", out.display()))?;
    let elapsed = started.elapsed();

    let aborted: Vec<String> = set
        .runs
        .iter()
        .filter_map(|r| {
            r.aborted
                .as_ref()
                .map(|m| format!("  {} {} run {}: {m}", r.party, r.condition, r.run))
        })
        .collect();
    let (store, _) = TranscriptStore::open(&out)?;
    println!("store:    {}", out.display());
    println!("records:  {}", set.total_records());
    println!("checksum: {}", store.checksum()?);
    println!("elapsed:  {:.2?}", elapsed);
    if aborted.is_empty() {
        println!("failures: none");
    } else {
        println!("failures: {} aborted runs", aborted.len());
        for line in &aborted {
            println!("{line}");
        }
    }
    Ok(())
}

/// Accept either layout: a store directory or a snapshot file.
fn load_source(path: &Path) -> anyhow::Result<TranscriptSet> {
    if path.is_dir() {
        TranscriptSet::from_store(path)
            .with_context(|| format!("loading store {}", path.display()))
    } else {
        snapshot::load(path)
    }
}

fn report_dir(source: &Path, out: Option<PathBuf>, default_sub: &str) -> PathBuf {
    out.unwrap_or_else(|| {
        if source.is_dir() {
            source.join(default_sub)
        } else {
            let stem = source
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "source".into());
            source
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(format!("{stem}-{default_sub}"))
        }
    })
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_metrics(args: MetricsArgs) -> anyhow::Result<()> {
    let set = load_source(&args.source)?;
    let report = full_report(&set, &QuestionBank::bundled()).context("scoring transcripts")?;
    let dir = report_dir(&args.source, args.out, "reports");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    write_file(&dir.join("report.txt"), &render_text_table(&report))?;
    write_file(&dir.join("report.json"), &to_json(&report))?;
    write_file(&dir.join("per_round.csv"), &per_round_csv(&report))?;
    write_file(&dir.join("per_question.csv"), &per_question_csv(&report))?;

    print!("{}", render_text_table(&report));
    println!();
    println!("reports written to {}", dir.display());
    Ok(())
}

fn parse_column_overrides(pairs: &[String]) -> anyhow::Result<ColumnMap> {
    let mut map = ColumnMap::default();
    for pair in pairs {
        let Some((field, name)) = pair.split_once('=') else {
            bail!("bad --column {pair:?}; expected FIELD=NAME");
        };
        let slot = match field {
            "subject" => &mut map.subject,
            "party" => &mut map.party,
            "condition" => &mut map.condition,
            "group" => &mut map.group,
            "question" => &mut map.question,
            "round" => &mut map.round,
            "estimate" => &mut map.estimate,
            "neighbors" => &mut map.neighbors,
            other => bail!(
                "unknown column field {other:?}; expected one of subject, party, condition, \
                 group, question, round, estimate, neighbors"
            ),
        };
        *slot = name.to_string();
    }
    Ok(map)
}

fn cmd_ingest(args: IngestArgs) -> anyhow::Result<()> {
    let map = parse_column_overrides(&args.columns)?;
    let bank = QuestionBank::bundled();
    let outcome = ingest_human_csv(&args.csv, &map, &bank)
        .with_context(|| format!("ingesting {}", args.csv.display()))?;
    let mut set = outcome.set;
    let report = outcome.report;

    println!("rows:       {}", report.rows_read);
    println!("records:    {}", report.records);
    println!("groups:     {}", report.group_counts.len());
    println!("dropped:    {}", report.dropped.len());
    for issue in report.dropped.iter().take(10) {
        println!("  line {}: {}", issue.line, issue.message);
    }
    println!("flagged:    {}", report.flagged.len());
    for issue in report.flagged.iter().take(10) {
        println!("  line {}: {}", issue.line, issue.message);
    }
    println!("incomplete: {}", report.incomplete.len());

    if !args.no_reconstruct {
        let fill = reconstruct_feedback(&mut set).context("reconstructing feedback")?;
        println!(
            "feedback:   {} filled ({} partial, {} empty)",
            fill.filled, fill.partial, fill.empty
        );
    }

    let out = args.out.unwrap_or_else(|| {
        let stem = args
            .csv
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ingested".into());
        args.csv
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(format!("{stem}.snapshot.json"))
    });
    snapshot::save(&set, &out)?;
    println!("snapshot:   {}", out.display());
    Ok(())
}

fn cmd_export_finetune(args: ExportArgs) -> anyhow::Result<()> {
    let set = load_source(&args.source)?;
    let bank = QuestionBank::bundled();
    let dir = report_dir(&args.source, args.out, "finetune");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let parties: Vec<Party> = match args.party {
        Some(PartyArg::Dem) => vec![Party::Dem],
        Some(PartyArg::Rep) => vec![Party::Rep],
        None => Party::ALL.to_vec(),
    };
    let conditions: Vec<Condition> = match args.condition {
        Some(ConditionArg::Social) => vec![Condition::Social],
        Some(ConditionArg::Control) => vec![Condition::Control],
        None => Condition::ALL.to_vec(),
    };

    for &party in &parties {
        for &condition in &conditions {
            let export =
                export_finetune_pairs(&set, &bank, party, condition, args.questions.as_deref())
                    .with_context(|| format!("exporting {party} {condition}"))?;
            let path = dir.join(format!("finetune_{party}_{condition}.jsonl"));
            let mut text = String::new();
            for pair in &export.pairs {
                let line = serde_json::json!({ "messages": pair.messages() });
                text.push_str(&line.to_string());
                text.push('\n');
            }
            write_file(&path, &text)?;
            println!(
                "{}: {} pairs, {} trajectories excluded",
                path.display(),
                export.pairs.len(),
                export.excluded.len()
            );
        }
    }
    Ok(())
}

/// Minimal static chart: one polyline per condition over rounds.
fn curve_svg(curve: &[RoundErrorPoint]) -> String {
    let (w, h, ml, mb, mt, mr) = (640.0f64, 400.0f64, 60.0, 40.0, 20.0, 20.0);
    let points: Vec<(Condition, u32, f64)> = curve
        .iter()
        .map(|p| (p.condition, p.round, p.error))
        .collect();
    let max_round = points.iter().map(|p| p.1).max().unwrap_or(1).max(2);
    let max_err = points.iter().map(|p| p.2).fold(1.0f64, f64::max) * 1.1;
    let x = |round: u32| ml + (f64::from(round) - 1.0) / (f64::from(max_round) - 1.0) * (w - ml - mr);
    let y = |err: f64| h - mb - err / max_err * (h - mb - mt);

    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    svg.push_str(&format!(
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - mb,
        w - mr,
        h - mb
    ));
    svg.push_str(&format!(
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        h - mb
    ));
    for round in 1..=max_round {
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" text-anchor="middle">{round}</text>"#,
            x(round),
            h - mb + 16.0
        ));
    }
    for tick in 0..=4 {
        let err = max_err * f64::from(tick) / 4.0;
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" text-anchor="end">{err:.0}</text>"#,
            ml - 6.0,
            y(err) + 4.0
        ));
    }
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" text-anchor="middle">round</text>"#,
        (ml + w - mr) / 2.0,
        h - 6.0
    ));
    for (condition, color, dash) in [
        (Condition::Social, "#1f77b4", "none"),
        (Condition::Control, "#d62728", "6,4"),
    ] {
        let series: Vec<String> = (1..=max_round)
            .filter_map(|round| {
                points
                    .iter()
                    .find(|p| p.0 == condition && p.1 == round)
                    .map(|p| format!("{:.2},{:.2}", x(round), y(p.2)))
            })
            .collect();
        if series.is_empty() {
            continue;
        }
        svg.push_str(&format!(
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2" stroke-dasharray="{dash}"/>"#,
            series.join(" ")
        ));
        svg.push_str(&format!(
            r#"<text x="{}" y="{}" fill="{color}">{condition}</text>"#,
            w - mr - 70.0,
            mt + if condition == Condition::Social { 14.0 } else { 30.0 }
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn cmd_plot_data(args: PlotArgs) -> anyhow::Result<()> {
    let set = load_source(&args.source)?;
    // Not full_report: curves stay available for single-party and
    // single-condition sources where the bias columns are undefined.
    let table =
        ErrorTable::from_set(&set, &QuestionBank::bundled()).context("scoring transcripts")?;
    let mut curve = Vec::new();
    for condition in Condition::ALL {
        for round in 1..=table.rounds() {
            if let Some(error) = table.avg_error(condition, round, None) {
                curve.push(RoundErrorPoint {
                    condition,
                    round,
                    error,
                });
            }
        }
    }

    let dir = report_dir(&args.source, args.out, "reports");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut csv = String::from("condition,round,avg_error\n");
    for point in &curve {
        csv.push_str(&format!(
            "{},{},{}\n",
            point.condition, point.round, point.error
        ));
    }
    let csv_path = dir.join("per_round.csv");
    write_file(&csv_path, &csv)?;
    println!("curves: {}", csv_path.display());
    if args.svg {
        let svg_path = dir.join("per_round.svg");
        write_file(&svg_path, &curve_svg(&curve))?;
        println!("chart:  {}", svg_path.display());
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> anyhow::Result<()> {
    let raw = load_raw_config(Some(&args.config))?;
    let config = raw.validate().context("invalid configuration")?;
    println!(
        "{}",
        serde_json::to_string_pretty(&config).expect("config serializes")
    );
    println!("hash: {}", config.content_hash());
    Ok(())
}
