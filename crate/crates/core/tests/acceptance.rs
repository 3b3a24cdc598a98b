//! Acceptance gate: ten checks covering metric correctness against a naive
//! oracle, published-value arithmetic, synthetic-backend dynamics, the
//! extreme-response filter, prompt stability, feedback bookkeeping,
//! determinism, fine-tune export, and the offline contract for the live
//! backend. One test per check; each prints a PASS line with its evidence.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read as _, Write as _};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crowds_core::engine::{run_experiment, run_in_memory, Provenance, RunTranscript, TranscriptSet};
use crowds_core::humandata::{
    export_finetune_pairs, ingest_human_csv, reconstruct_feedback, ColumnMap,
};
use crowds_core::metrics::{
    full_report, overall_bias, wisdom_effect, ErrorTable, MetricsReport,
};
use crowds_core::model::{
    BackendConfig, CassetteMode, Condition, EstimateRecord, ExperimentConfig, LlmParams, Party,
    QuestionBank, RawConfig, ReplayParams, SyntheticParams,
};

// ---------------------------------------------------------------------------
// Naive metrics oracle: every quantity recomputed with plain loops straight
// from its definition, sharing no code with the metrics module.

type Slot = (Party, Condition, u32, u8);

struct NaiveRow {
    delta_social: Option<f64>,
    delta_control: Option<f64>,
    s_minus_c: Option<f64>,
    bias_social: Option<f64>,
    bias_control: Option<f64>,
    bias_avg: Option<f64>,
}

struct NaiveReport {
    row: NaiveRow,
    extreme_pct: f64,
    missing_pct: f64,
    total: usize,
    extreme: usize,
    missing: usize,
    undefined_slots: usize,
    per_round: BTreeMap<(Condition, u32), f64>,
    per_question: BTreeMap<u8, (NaiveRow, f64, BTreeMap<(Condition, u32), f64>)>,
}

/// The published per-question realistic ranges, written out by id.
fn published_extreme(id: u8, truth: f64, v: f64) -> bool {
    match id {
        1..=4 => v > 10.0 * truth || v < 0.0,
        5 => v < 0.0 || v > 100.0,
        6 => v < -1000.0 || v > 1000.0,
        7 => v > 1000.0,
        8 => v < 0.0 || v > 1_000_000.0,
        _ => panic!("unknown question {id}"),
    }
}

fn naive_report(set: &TranscriptSet, bank: &QuestionBank) -> NaiveReport {
    let rounds = set.config.rounds as usize;
    let mut buckets: BTreeMap<Slot, Vec<Vec<f64>>> = BTreeMap::new();
    let mut total = 0usize;
    let mut extreme = 0usize;
    let mut missing = 0usize;
    let mut q_counts: BTreeMap<u8, (usize, usize)> = BTreeMap::new();

    for rec in set.records() {
        let q = bank.get(rec.question).unwrap();
        total += 1;
        let qc = q_counts.entry(rec.question).or_insert((0, 0));
        qc.0 += 1;
        let slot = buckets
            .entry((rec.party, rec.condition, rec.run, rec.question))
            .or_insert_with(|| vec![Vec::new(); rounds]);
        match rec.value.filter(|v| v.is_finite()) {
            None => {
                missing += 1;
                qc.1 += 1;
            }
            Some(v) if published_extreme(q.id, q.truth, v) => {
                extreme += 1;
                qc.1 += 1;
            }
            Some(v) => slot[(rec.round - 1) as usize].push(v),
        }
    }

    let mut errors: BTreeMap<Slot, Vec<Option<f64>>> = BTreeMap::new();
    let mut undefined = 0usize;
    for (slot, per_round) in &buckets {
        let truth = bank.get(slot.3).unwrap().truth;
        let eps: Vec<Option<f64>> = per_round
            .iter()
            .map(|vals| {
                if vals.is_empty() {
                    undefined += 1;
                    None
                } else {
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    Some((mean - truth).abs() / truth.abs() * 100.0)
                }
            })
            .collect();
        errors.insert(*slot, eps);
    }

    let questions: Vec<u8> = q_counts.keys().copied().collect();
    let mut per_question = BTreeMap::new();
    for &q in &questions {
        let (qt, qx) = q_counts[&q];
        let pct = if qt == 0 {
            0.0
        } else {
            100.0 * qx as f64 / qt as f64
        };
        per_question.insert(
            q,
            (
                naive_row(&errors, bank, &questions, rounds, Some(q)),
                pct,
                naive_curve(&errors, rounds, Some(q)),
            ),
        );
    }
    NaiveReport {
        row: naive_row(&errors, bank, &questions, rounds, None),
        extreme_pct: if total == 0 {
            0.0
        } else {
            100.0 * (extreme + missing) as f64 / total as f64
        },
        missing_pct: if total == 0 {
            0.0
        } else {
            100.0 * missing as f64 / total as f64
        },
        total,
        extreme,
        missing,
        undefined_slots: undefined,
        per_round: naive_curve(&errors, rounds, None),
        per_question,
    }
}

fn naive_row(
    errors: &BTreeMap<Slot, Vec<Option<f64>>>,
    bank: &QuestionBank,
    questions: &[u8],
    rounds: usize,
    filter: Option<u8>,
) -> NaiveRow {
    let delta = |condition: Condition| -> Option<f64> {
        let mut vals = Vec::new();
        for (slot, eps) in errors {
            if slot.1 != condition || filter.is_some_and(|q| slot.3 != q) {
                continue;
            }
            if let (Some(first), Some(last)) = (eps[0], eps[rounds - 1]) {
                vals.push(last - first);
            }
        }
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let bias = |condition: Condition| -> Option<f64> {
        let mut rep_runs = BTreeSet::new();
        let mut dem_runs = BTreeSet::new();
        for slot in errors.keys() {
            if slot.1 != condition || filter.is_some_and(|q| slot.3 != q) {
                continue;
            }
            match slot.0 {
                Party::Rep => rep_runs.insert(slot.2),
                Party::Dem => dem_runs.insert(slot.2),
            };
        }
        if rep_runs.is_empty() || dem_runs.is_empty() {
            return None;
        }
        let qs: Vec<u8> = match filter {
            Some(q) => vec![q],
            None => questions.to_vec(),
        };
        let mut sum = 0.0;
        let mut tuples = 0u64;
        for t in 0..rounds {
            for &q in &qs {
                let sign = f64::from(bank.get(q).unwrap().bias_sign);
                for &rr in &rep_runs {
                    let Some(re) = errors.get(&(Party::Rep, condition, rr, q)).and_then(|e| e[t])
                    else {
                        continue;
                    };
                    for &dr in &dem_runs {
                        let Some(de) =
                            errors.get(&(Party::Dem, condition, dr, q)).and_then(|e| e[t])
                        else {
                            continue;
                        };
                        sum += (re - de) * sign;
                        tuples += 1;
                    }
                }
            }
        }
        if tuples == 0 {
            None
        } else {
            Some(sum / tuples as f64)
        }
    };
    let delta_social = delta(Condition::Social);
    let delta_control = delta(Condition::Control);
    let bias_social = bias(Condition::Social);
    let bias_control = bias(Condition::Control);
    NaiveRow {
        delta_social,
        delta_control,
        s_minus_c: delta_social.zip(delta_control).map(|(s, c)| s - c),
        bias_social,
        bias_control,
        bias_avg: bias_social.zip(bias_control).map(|(s, c)| (s + c) / 2.0),
    }
}

fn naive_curve(
    errors: &BTreeMap<Slot, Vec<Option<f64>>>,
    rounds: usize,
    filter: Option<u8>,
) -> BTreeMap<(Condition, u32), f64> {
    let mut out = BTreeMap::new();
    for condition in Condition::ALL {
        for t in 0..rounds {
            let vals: Vec<f64> = errors
                .iter()
                .filter(|(slot, _)| {
                    slot.1 == condition && !filter.is_some_and(|q| slot.3 != q)
                })
                .filter_map(|(_, eps)| eps[t])
                .collect();
            if !vals.is_empty() {
                out.insert(
                    (condition, (t + 1) as u32),
                    vals.iter().sum::<f64>() / vals.len() as f64,
                );
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Random transcript sets exercising every exclusion and undefined-slot path.

fn sane_value(id: u8, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = match id {
        1 => (50.0, 2000.0),
        2 => (10.0, 600.0),
        3 => (0.5, 45.0),
        4 => (1.0, 140.0),
        5 => (1.0, 99.0),
        6 => (-900.0, 900.0),
        7 => (-800.0, 900.0),
        8 => (100.0, 900_000.0),
        _ => unreachable!(),
    };
    rng.random_range(lo..hi)
}

fn extreme_value(id: u8) -> f64 {
    match id {
        1 => -3.0,
        2 => 700.0,
        3 => 55.0,
        4 => 200.0,
        5 => 130.0,
        6 => 1500.0,
        7 => 1200.0,
        8 => 2_000_000.0,
        _ => unreachable!(),
    }
}

fn record(
    agent: u32,
    party: Party,
    condition: Condition,
    run: u32,
    round: u32,
    question: u8,
    value: Option<f64>,
) -> EstimateRecord {
    EstimateRecord {
        agent,
        party,
        condition,
        run,
        round,
        question,
        value,
        raw_text: value.map(|v| format!("My Final Answer: {v}")).unwrap_or_default(),
        feedback_shown: None,
        feedback_imputed: false,
        extreme: false,
        source_id: None,
    }
}

fn set_from_runs(config: ExperimentConfig, runs: Vec<RunTranscript>, bank: &QuestionBank) -> TranscriptSet {
    TranscriptSet {
        question_checksum: bank.checksum(),
        runs,
        provenance: Provenance {
            backend: "generated".into(),
            seed: config.seed,
            started_unix_ms: 0,
            finished_unix_ms: 0,
        },
        config,
    }
}

fn random_set(tag: u64, bank: &QuestionBank) -> TranscriptSet {
    let mut rng = ChaCha8Rng::seed_from_u64(tag);
    let n = rng.random_range(3..=35u32);
    let runs_social = rng.random_range(1..=12u32);
    let runs_control = rng.random_range(1..=4u32);
    let mut all: Vec<u8> = (1..=8).collect();
    all.shuffle(&mut rng);
    let mut questions: Vec<u8> = all[..rng.random_range(1..=8usize)].to_vec();
    questions.sort_unstable();

    let config = RawConfig {
        questions: Some(questions.clone()),
        n_agents: Some(n),
        degree: Some(2),
        runs_social: Some(runs_social),
        runs_control: Some(runs_control),
        seed: Some(tag),
        ..RawConfig::default()
    }
    .validate()
    .unwrap();

    let mut runs = Vec::new();
    for party in Party::ALL {
        for condition in Condition::ALL {
            let count = match condition {
                Condition::Social => runs_social,
                Condition::Control => runs_control,
            };
            for run in 1..=count {
                let mut records = Vec::new();
                for &q in &questions {
                    for round in 1..=3u32 {
                        // occasionally exclude a whole round to force an
                        // undefined slot
                        let wipe = rng.random_bool(0.04);
                        for agent in 1..=n {
                            let roll: f64 = rng.random();
                            let value = if wipe {
                                if roll < 0.5 {
                                    None
                                } else {
                                    Some(extreme_value(q))
                                }
                            } else if roll < 0.05 {
                                None
                            } else if roll < 0.12 {
                                Some(extreme_value(q))
                            } else {
                                Some(sane_value(q, &mut rng))
                            };
                            records.push(record(agent, party, condition, run, round, q, value));
                        }
                    }
                }
                runs.push(RunTranscript {
                    party,
                    condition,
                    run,
                    network: None,
                    records,
                    aborted: None,
                });
            }
        }
    }
    set_from_runs(config, runs, bank)
}

// ---------------------------------------------------------------------------
// Comparison helpers.

fn assert_opt_close(label: &str, tag: u64, got: Option<f64>, want: Option<f64>, max_dev: &mut f64) {
    match (got, want) {
        (None, None) => {}
        (Some(g), Some(w)) => {
            let dev = (g - w).abs();
            if dev > *max_dev {
                *max_dev = dev;
            }
            assert!(
                dev <= 1e-9,
                "{label} mismatch on set {tag}: {g} vs oracle {w}"
            );
        }
        _ => panic!("{label} definedness mismatch on set {tag}: {got:?} vs oracle {want:?}"),
    }
}

fn compare_reports(tag: u64, report: &MetricsReport, oracle: &NaiveReport, max_dev: &mut f64) {
    let rows = [
        ("delta_eps_social", report.row.delta_eps_social, oracle.row.delta_social),
        ("delta_eps_control", report.row.delta_eps_control, oracle.row.delta_control),
        ("delta_eps_s_minus_c", report.row.delta_eps_s_minus_c, oracle.row.s_minus_c),
        ("bias_social", report.row.bias_social, oracle.row.bias_social),
        ("bias_control", report.row.bias_control, oracle.row.bias_control),
        ("bias_avg", report.row.bias_avg, oracle.row.bias_avg),
    ];
    for (label, got, want) in rows {
        assert_opt_close(label, tag, got, want, max_dev);
    }
    assert_opt_close("extreme_pct", tag, Some(report.extreme_pct), Some(oracle.extreme_pct), max_dev);
    assert_opt_close("missing_pct", tag, Some(report.missing_pct), Some(oracle.missing_pct), max_dev);
    assert_eq!(report.total_records, oracle.total, "total on set {tag}");
    assert_eq!(report.extreme_records, oracle.extreme, "extreme on set {tag}");
    assert_eq!(report.missing_records, oracle.missing, "missing on set {tag}");
    assert_eq!(report.undefined_slots, oracle.undefined_slots, "undefined slots on set {tag}");

    let rounds = 3u32;
    let mut impl_points = 0;
    for condition in Condition::ALL {
        for round in 1..=rounds {
            let got = report.per_round(condition, round);
            let want = oracle.per_round.get(&(condition, round)).copied();
            assert_opt_close("per_round_error", tag, got, want, max_dev);
            if got.is_some() {
                impl_points += 1;
            }
        }
    }
    assert_eq!(impl_points, report.per_round_error.len(), "stray per-round points on set {tag}");

    assert_eq!(
        report.per_question.len(),
        oracle.per_question.len(),
        "per-question coverage on set {tag}"
    );
    for bd in &report.per_question {
        let (orow, opct, ocurve) = oracle
            .per_question
            .get(&bd.question)
            .unwrap_or_else(|| panic!("oracle lacks question {} on set {tag}", bd.question));
        let rows = [
            ("q delta_eps_social", bd.row.delta_eps_social, orow.delta_social),
            ("q delta_eps_control", bd.row.delta_eps_control, orow.delta_control),
            ("q delta_eps_s_minus_c", bd.row.delta_eps_s_minus_c, orow.s_minus_c),
            ("q bias_social", bd.row.bias_social, orow.bias_social),
            ("q bias_control", bd.row.bias_control, orow.bias_control),
            ("q bias_avg", bd.row.bias_avg, orow.bias_avg),
        ];
        for (label, got, want) in rows {
            assert_opt_close(label, tag, got, want, max_dev);
        }
        assert_opt_close("q extreme_pct", tag, Some(bd.extreme_pct), Some(*opct), max_dev);
        for condition in Condition::ALL {
            for round in 1..=rounds {
                let got = bd
                    .per_round_error
                    .iter()
                    .find(|p| p.condition == condition && p.round == round)
                    .map(|p| p.error);
                let want = ocurve.get(&(condition, round)).copied();
                assert_opt_close("q per_round_error", tag, got, want, max_dev);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// The ten checks.

#[test]
fn a01_metrics_match_naive_oracle_on_random_sets() {
    let bank = QuestionBank::bundled();
    let start = Instant::now();
    let mut max_dev = 0.0f64;
    let sets = 110;
    for i in 0..sets {
        let tag = 1000 + i;
        let set = random_set(tag, &bank);
        let report = full_report(&set, &bank).unwrap();
        let oracle = naive_report(&set, &bank);
        compare_reports(tag, &report, &oracle, &mut max_dev);
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 30.0,
        "oracle sweep took {elapsed:?}, budget 30s"
    );
    println!(
        "PASS 1/10 every report field matches the naive oracle on {sets} random sets \
         (max deviation {max_dev:.2e}, {elapsed:.2?})"
    );
}

#[test]
fn a02_published_row_arithmetic_reconstructs() {
    let checks: [(&str, f64, f64); 4] = [
        ("social -26.12 control 9.39", wisdom_effect(-26.12, 9.39), -35.51),
        ("social -7.86 control -2.00", wisdom_effect(-7.86, -2.00), -5.86),
        ("bias 1.23 / 0.98", overall_bias(1.23, 0.98), 1.11),
        ("bias 3.21 / 5.41", overall_bias(3.21, 5.41), 4.31),
    ];
    for (label, got, want) in checks {
        assert!(
            (got - want).abs() <= 0.01,
            "{label}: got {got}, want {want} within 0.01"
        );
    }
    println!("PASS 2/10 combined-column arithmetic matches all four published row pairs within 0.01");
}

#[test]
fn a03_synthetic_social_improves_while_control_holds() {
    let start = Instant::now();
    let seeds = 20u64;
    let mut social_sum = 0.0;
    let mut control_sum = 0.0;
    for seed in 1..=seeds {
        let config = RawConfig {
            seed: Some(seed),
            ..RawConfig::default()
        }
        .validate()
        .unwrap();
        let set = run_in_memory(&config).unwrap();
        let report = full_report(&set, &QuestionBank::bundled()).unwrap();
        social_sum += report.row.delta_eps_social.expect("social delta defined");
        control_sum += report.row.delta_eps_control.expect("control delta defined");
    }
    let social = social_sum / seeds as f64;
    let control = control_sum / seeds as f64;
    let elapsed = start.elapsed();
    assert!(social < 0.0, "mean social reduction {social} not negative");
    assert!(
        social.abs() >= 5.0,
        "mean social reduction {social} smaller than 5 points"
    );
    assert!(
        control.abs() < 1.0,
        "mean control reduction {control} not near zero"
    );
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "synthetic sweep took {elapsed:?}, budget 10s"
    );
    println!(
        "PASS 3/10 synthetic backend over {seeds} seeds: social {social:.2}, \
         control {control:.2} ({elapsed:.2?})"
    );
}

#[test]
fn a04_synthetic_bias_is_positive_and_antisymmetric() {
    let params = SyntheticParams {
        bias_magnitude: 0.5,
        common_bias: 0.2,
        ..SyntheticParams::default()
    };
    let config = RawConfig {
        backend: Some(BackendConfig::Synthetic(params)),
        runs_social: Some(4),
        runs_control: Some(4),
        seed: Some(17),
        ..RawConfig::default()
    }
    .validate()
    .unwrap();
    let bank = QuestionBank::bundled();
    let set = run_in_memory(&config).unwrap();
    let report = full_report(&set, &bank).unwrap();
    let bias_social = report.row.bias_social.unwrap();
    let bias_control = report.row.bias_control.unwrap();
    assert!(bias_social > 0.0, "social bias {bias_social} not positive");
    assert!(bias_control > 0.0, "control bias {bias_control} not positive");

    let mut swapped = set.clone();
    for run in &mut swapped.runs {
        run.party = run.party.other();
        for rec in &mut run.records {
            rec.party = rec.party.other();
        }
    }
    let mirrored = full_report(&swapped, &bank).unwrap();
    for (label, a, b) in [
        ("bias_social", bias_social, mirrored.row.bias_social.unwrap()),
        ("bias_control", bias_control, mirrored.row.bias_control.unwrap()),
        ("bias_avg", report.row.bias_avg.unwrap(), mirrored.row.bias_avg.unwrap()),
    ] {
        assert!(
            (a + b).abs() <= 1e-9,
            "{label} not antisymmetric under party swap: {a} vs {b}"
        );
    }
    println!(
        "PASS 4/10 with bias magnitude 0.5 the partisan bias is positive \
         (social {bias_social:.2}, control {bias_control:.2}) and negates under party swap"
    );
}

#[test]
fn a05_extreme_filter_is_exact_and_leaves_errors_unchanged() {
    let bank = QuestionBank::bundled();
    let sane = |agent: u32, round: u32| 10.0 + f64::from((agent * 7 + round * 3) % 30);
    let mut crafted = Vec::new();
    let mut clean = Vec::new();
    for round in 1..=3u32 {
        for agent in 1..=35u32 {
            let value = match (agent, round) {
                (1, 1) => 120.0, // outside the 0..100 range
                (2, 2) => -5.0,  // below the lower bound
                _ => sane(agent, round),
            };
            let rec = record(agent, Party::Dem, Condition::Social, 1, round, 5, Some(value));
            if !matches!((agent, round), (1, 1) | (2, 2)) {
                clean.push(rec.clone());
            }
            crafted.push(rec);
        }
    }
    assert_eq!(crafted.len(), 105);

    let table = ErrorTable::build(crafted.iter(), &bank, 3).unwrap();
    let exact = 100.0 * 2.0 / 105.0;
    assert!(
        (table.extreme_percent() - exact).abs() <= 1e-9,
        "extreme percent {} vs {exact}",
        table.extreme_percent()
    );
    assert_eq!(format!("{:.4}", table.extreme_percent()), "1.9048");
    assert_eq!(table.extreme_records(), 2);
    assert_eq!(table.missing_records(), 0);

    let reference = ErrorTable::build(clean.iter(), &bank, 3).unwrap();
    for round in 1..=3u32 {
        let with_filter = table.avg_error(Condition::Social, round, None).unwrap();
        let without_extremes = reference.avg_error(Condition::Social, round, None).unwrap();
        assert_eq!(
            with_filter, without_extremes,
            "round {round} error shifted by excluded records"
        );
    }
    println!(
        "PASS 5/10 crafted 105-record set: extreme share {:.4}% and errors identical to the \
         hand-cleaned set",
        table.extreme_percent()
    );
}

#[test]
fn a06_round_prompts_match_golden_corpus() {
    use crowds_core::model::{Persona, PersonaDetail};
    use crowds_core::prompting::render_prompt;

    let bank = QuestionBank::bundled();
    let question = bank.get(3).unwrap();
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/prompts");
    let detailed = Persona {
        name: "Charles Matthews".into(),
        party: Party::Rep,
        detail: PersonaDetail::Detailed,
        leaning: Some("Lean Republican".into()),
        age: Some(38),
        gender: Some("Male".into()),
        ethnicity: Some("African American".into()),
        education: Some("Bachelor's degree in Business Administration".into()),
        occupation: Some("Small business owner".into()),
        background: "Charles was born and raised in Atlanta, Georgia.".into(),
        source: Default::default(),
        induced_bias: Default::default(),
    };
    let simple = Persona::simple(Party::Dem, 1);

    let mut checked = 0;
    for round in 1..=3u32 {
        for condition in [Condition::Social, Condition::Control] {
            for persona in [&detailed, &simple] {
                for cot in [true, false] {
                    let feedback = match (condition, round) {
                        (Condition::Social, 2) => Some(5.5),
                        (Condition::Social, 3) => Some(6.0),
                        _ => None,
                    };
                    let bundle =
                        render_prompt(round, persona, question, condition, cot, false, feedback)
                            .unwrap();
                    let name = format!(
                        "r{round}_{}_{}_{}.txt",
                        if condition == Condition::Social { "social" } else { "control" },
                        if persona.detail == PersonaDetail::Detailed { "detailed" } else { "simple" },
                        if cot { "cot" } else { "nocot" },
                    );
                    let golden = std::fs::read_to_string(dir.join(&name)).unwrap();
                    assert_eq!(bundle.text, golden, "prompt drifted from golden {name}");
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 24);
    println!("PASS 6/10 all 24 rendered prompts byte-match their golden files");
}

#[test]
fn a07_stored_feedback_equals_recomputed_peer_average() {
    let config = RawConfig {
        seed: Some(11),
        ..RawConfig::default()
    }
    .validate()
    .unwrap();
    let set = run_in_memory(&config).unwrap();
    let mut audited = 0u64;
    for run in &set.runs {
        let mut by_slot: BTreeMap<(u8, u32, u32), Option<f64>> = BTreeMap::new();
        for rec in &run.records {
            by_slot.insert((rec.question, rec.round, rec.agent), rec.value);
        }
        for rec in &run.records {
            match (run.condition, rec.round) {
                (Condition::Control, _) | (Condition::Social, 1) => {
                    assert_eq!(rec.feedback_shown, None, "spurious feedback in {rec:?}")
                }
                (Condition::Social, round) => {
                    let network = run.network.as_ref().expect("social run has a network");
                    let neighbors = network.neighbors(rec.agent - 1);
                    let mut sum = 0.0;
                    for &j in neighbors {
                        sum += by_slot[&(rec.question, round - 1, j + 1)]
                            .expect("synthetic estimates never go missing");
                    }
                    let expected = sum / neighbors.len() as f64;
                    assert!(!rec.feedback_imputed, "imputation flagged in a full round");
                    assert_eq!(
                        rec.feedback_shown,
                        Some(expected),
                        "feedback drifted for agent {} round {round} q{}",
                        rec.agent,
                        rec.question
                    );
                    audited += 1;
                }
            }
        }
    }
    // 2 parties x 12 social runs x 8 questions x 2 rounds x 35 agents
    assert_eq!(audited, 2 * 12 * 8 * 2 * 35);
    println!("PASS 7/10 all {audited} shown feedback values equal the recomputed peer averages exactly");
}

fn store_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "runs", "networks"] {
        let d = if sub.is_empty() { dir.to_path_buf() } else { dir.join(sub) };
        if !d.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&d).unwrap() {
            let entry = entry.unwrap();
            if entry.file_type().unwrap().is_file() {
                let name = entry.file_name().into_string().unwrap();
                let rel = if sub.is_empty() { name } else { format!("{sub}/{name}") };
                out.insert(rel, std::fs::read(entry.path()).unwrap());
            }
        }
    }
    out
}

#[test]
fn a08_same_seed_stores_are_byte_identical_and_replay_reproduces() {
    let config = RawConfig {
        runs_social: Some(2),
        runs_control: Some(1),
        seed: Some(5),
        ..RawConfig::default()
    }
    .validate()
    .unwrap();

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_experiment(&config, dir_a.path()).unwrap();
    run_experiment(&config, dir_b.path()).unwrap();
    let files_a = store_files(dir_a.path());
    let files_b = store_files(dir_b.path());
    assert_eq!(
        files_a.keys().collect::<Vec<_>>(),
        files_b.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &files_a {
        assert_eq!(bytes, &files_b[name], "store file {name} differs between identical runs");
    }

    let replay_config = RawConfig {
        runs_social: Some(2),
        runs_control: Some(1),
        seed: Some(5),
        backend: Some(BackendConfig::Replay(ReplayParams {
            source: dir_a.path().to_path_buf(),
        })),
        ..RawConfig::default()
    }
    .validate()
    .unwrap();
    let dir_c = tempfile::tempdir().unwrap();
    run_experiment(&replay_config, dir_c.path()).unwrap();
    let files_c = store_files(dir_c.path());
    let mut transcripts = 0;
    for (name, bytes) in &files_a {
        if name.starts_with("runs/") || name.starts_with("networks/") {
            assert_eq!(bytes, &files_c[name], "replay changed {name}");
            transcripts += 1;
        }
    }
    assert!(transcripts > 0);
    println!(
        "PASS 8/10 same-seed stores byte-identical ({} files) and replay reproduced all \
         {transcripts} transcript files",
        files_a.len()
    );
}

#[test]
fn a09_finetune_export_yields_complete_audited_pairs() {
    let bank = QuestionBank::bundled();
    let n = 35u32;
    let value = |agent: u32, round: u32| 5.0 + f64::from((agent * 7 + round * 13) % 50) * 0.5;
    let wrap = |x: i64| -> u32 { (x - 1).rem_euclid(i64::from(n)) as u32 + 1 };
    let neighbors =
        |i: u32| -> Vec<u32> {
            let i = i64::from(i);
            let mut out: Vec<u32> = [i - 2, i - 1, i + 1, i + 2].iter().map(|&x| wrap(x)).collect();
            out.sort_unstable();
            out
        };

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("human.csv");
    let mut text = String::from("subject,party,condition,group,question,round,estimate,neighbors\n");
    for agent in 1..=n {
        for round in 1..=3u32 {
            let nb = neighbors(agent)
                .iter()
                .map(|j| j.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            text.push_str(&format!(
                "{agent},Democrat,Social,1,5,{round},{},{nb}\n",
                value(agent, round)
            ));
        }
    }
    std::fs::write(&csv_path, text).unwrap();

    let outcome = ingest_human_csv(&csv_path, &ColumnMap::default(), &bank).unwrap();
    assert!(outcome.report.dropped.is_empty(), "{:?}", outcome.report.dropped);
    assert!(outcome.report.incomplete.is_empty());
    let mut set = outcome.set;
    let fill = reconstruct_feedback(&mut set).unwrap();
    assert_eq!(fill.filled, 70); // 35 agents x rounds 2 and 3
    assert_eq!(fill.partial, 0);
    assert_eq!(fill.empty, 0);

    let export = export_finetune_pairs(&set, &bank, Party::Dem, Condition::Social, None).unwrap();
    assert!(export.excluded.is_empty());
    assert_eq!(export.pairs.len(), 105);

    let mut by_round = BTreeMap::new();
    for pair in &export.pairs {
        *by_round.entry(pair.round).or_insert(0u32) += 1;
        let users = pair.context.iter().filter(|m| m.role == "user").count();
        let assistants = pair.context.iter().filter(|m| m.role == "assistant").count();
        assert_eq!(users, pair.round as usize, "context prompts for round {}", pair.round);
        assert_eq!(assistants, pair.round as usize - 1);
        assert_eq!(pair.context.last().unwrap().role, "user");

        let agent: u32 = pair.subject.parse().unwrap();
        assert_eq!(pair.target, format!("My Final Answer: {}", value(agent, pair.round)));
        if pair.round >= 2 {
            let expected: f64 = neighbors(agent)
                .iter()
                .map(|&j| value(j, pair.round - 1))
                .sum::<f64>()
                / 4.0;
            let sentence = format!("Their average answer: {expected}");
            let last_prompt = &pair.context.last().unwrap().content;
            assert!(
                last_prompt.contains(&sentence),
                "round {} prompt for subject {} lacks {sentence:?}",
                pair.round,
                pair.subject
            );
        }
    }
    assert_eq!(by_round, BTreeMap::from([(1, 35), (2, 35), (3, 35)]));
    println!(
        "PASS 9/10 35-subject export: 105 pairs, context sizes 1/2/3, every shown average \
         matches the hand-computed neighbor mean"
    );
}

/// Minimal chat-completion endpoint: answers every request with the same
/// body. Runs until the test binary exits.
fn serve_constant(content: &str) -> String {
    let body = serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}}]
    })
    .to_string();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            let total = loop {
                let Ok(read) = stream.read(&mut chunk) else { break None };
                if read == 0 {
                    break None;
                }
                buf.extend_from_slice(&chunk[..read]);
                if let Some(head_end) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    let head = String::from_utf8_lossy(&buf[..head_end]);
                    let length: usize = head
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:")
                            .map(|v| v.trim().parse().unwrap()))
                        .unwrap_or(0);
                    break Some(head_end + 4 + length);
                }
            };
            let Some(total) = total else { continue };
            while buf.len() < total {
                let Ok(read) = stream.read(&mut chunk) else { break };
                if read == 0 {
                    break;
                }
                buf.extend_from_slice(&chunk[..read]);
            }
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            let _ = stream.write_all(response.as_bytes());
        }
    });
    format!("http://{addr}/v1/chat/completions")
}

#[test]
fn a10_live_backend_contract_is_cassette_replay_plus_stated_limits() {
    // The live-endpoint rows depend on a hosted model snapshot, so they are
    // accepted through the offline record/replay contract: a recorded session
    // must reproduce the exact same store with the endpoint unreachable.
    std::env::set_var("ACCEPTANCE_FAKE_KEY", "key-for-recording-only");
    let endpoint = serve_constant("My Reasoning: close to five.\nMy Final Answer: 5.1");
    let cassette_dir = tempfile::tempdir().unwrap();
    let cassette = cassette_dir.path().join("session.jsonl");

    let llm = |endpoint: String, mode: CassetteMode| LlmParams {
        endpoint,
        model: "test-model".into(),
        api_key_env: "ACCEPTANCE_FAKE_KEY".into(),
        max_retries: 0,
        backoff_ms: 1,
        min_request_interval_ms: 0,
        timeout_secs: 10,
        cassette: Some(cassette.clone()),
        cassette_mode: mode,
    };
    let base = RawConfig {
        questions: Some(vec![3]),
        n_agents: Some(5),
        degree: Some(2),
        runs_social: Some(1),
        runs_control: Some(1),
        persona_detail: Some(crowds_core::model::PersonaDetail::Simple),
        seed: Some(42),
        ..RawConfig::default()
    };

    let mut recording = base.clone();
    recording.backend = Some(BackendConfig::Llm(llm(endpoint, CassetteMode::Record)));
    let dir_live = tempfile::tempdir().unwrap();
    let live = run_experiment(&recording.validate().unwrap(), dir_live.path()).unwrap();
    assert!(live.runs.iter().all(|r| r.aborted.is_none()));

    let mut offline = base;
    offline.backend = Some(BackendConfig::Llm(llm(
        "http://127.0.0.1:9/unreachable".into(),
        CassetteMode::Replay,
    )));
    let dir_replay = tempfile::tempdir().unwrap();
    run_experiment(&offline.validate().unwrap(), dir_replay.path()).unwrap();

    let files_live = store_files(dir_live.path());
    let files_replay = store_files(dir_replay.path());
    let mut compared = 0;
    for (name, bytes) in &files_live {
        if name.starts_with("runs/") || name.starts_with("networks/") {
            assert_eq!(bytes, &files_replay[name], "cassette replay changed {name}");
            compared += 1;
        }
    }
    assert!(compared > 0);

    // The limits themselves must be stated where users will read them.
    let readme_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let readme = std::fs::read_to_string(&readme_path).expect("workspace README exists");
    for needle in ["hosted model snapshot", "cassette", "-35.51", "10.73"] {
        assert!(
            readme.contains(needle),
            "README lacks the reproducibility statement piece {needle:?}"
        );
    }

    // Benchmark-row check runs only when the public dataset is supplied.
    match std::env::var("BECKER_2019_CSV") {
        Ok(path) => {
            let bank = QuestionBank::bundled();
            let outcome = ingest_human_csv(Path::new(&path), &ColumnMap::default(), &bank).unwrap();
            let mut set = outcome.set;
            reconstruct_feedback(&mut set).unwrap();
            let report = full_report(&set, &bank).unwrap();
            let wisdom = report.row.delta_eps_s_minus_c.unwrap();
            let bias = report.row.bias_avg.unwrap();
            assert!((wisdom - -35.51).abs() <= 0.02, "human wisdom effect {wisdom}");
            assert!((bias - 10.73).abs() <= 0.02, "human overall bias {bias}");
            println!(
                "PASS 10/10 cassette replay byte-identical ({compared} files); human benchmark \
                 row reproduced: {wisdom:.2} / {bias:.2}"
            );
        }
        Err(_) => {
            println!(
                "PASS 10/10 cassette replay byte-identical ({compared} files); statement present; \
                 human benchmark check skipped (set BECKER_2019_CSV to run it)"
            );
        }
    }
}
