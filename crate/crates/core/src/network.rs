//! Interaction graphs: circulant ring lattices and seeded random regular
//! graphs, plus the peer-average feedback rule.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::Topology;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network: need n > k, got n={n} k={k}")]
    DegreeTooLarge { n: u32, k: u32 },
    #[error("network: ring lattice needs even degree, got {0}")]
    OddRingDegree(u32),
    #[error("network: random regular graph needs n*k even, got n={n} k={k}")]
    OddStubCount { n: u32, k: u32 },
    #[error("network: imported topology cannot be constructed, only ingested")]
    ImportedNotConstructible,
    #[error("network: pairing failed to produce a simple connected graph after {0} attempts")]
    PairingExhausted(u32),
    #[error("network: node {i} has no value for peer averaging")]
    MissingNeighborValue { i: u32 },
    #[error("network: imported adjacency invalid at {i} -> {j} (self-loop, out of range, or one-way)")]
    BadImport { i: u32, j: u32 },
}

/// Undirected k-regular interaction graph over nodes `0..n`.
///
/// Immutable after construction. Adjacency sets are sorted; every node has
/// exactly `degree` neighbors, edges are symmetric, there are no self-loops,
/// and the graph is connected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    n: u32,
    degree: u32,
    topology: Topology,
    seed: u64,
    adjacency: Vec<BTreeSet<u32>>,
}

impl Network {
    /// Build a degree-`k` graph over `n` nodes. Deterministic for fixed
    /// `(topology, seed)`; the seed is unused for the ring lattice.
    pub fn build(n: u32, k: u32, topology: Topology, seed: u64) -> Result<Network, NetworkError> {
        if k < 1 || k >= n {
            return Err(NetworkError::DegreeTooLarge { n, k });
        }
        let adjacency = match topology {
            Topology::Ring => {
                if k % 2 != 0 {
                    return Err(NetworkError::OddRingDegree(k));
                }
                ring_adjacency(n, k)
            }
            Topology::Random4Regular => {
                if (n as u64 * k as u64) % 2 != 0 {
                    return Err(NetworkError::OddStubCount { n, k });
                }
                random_regular_adjacency(n, k, seed)?
            }
            Topology::Imported => return Err(NetworkError::ImportedNotConstructible),
        };
        let net = Network {
            n,
            degree: k,
            topology,
            seed,
            adjacency,
        };
        debug_assert!(net.check_invariants());
        Ok(net)
    }

    /// Wrap an externally supplied adjacency (ingested human data). Symmetry
    /// and self-loop freedom are enforced; regularity and connectivity are
    /// whatever the source had.
    pub fn from_imported(adjacency: Vec<BTreeSet<u32>>) -> Result<Network, NetworkError> {
        let n = adjacency.len() as u32;
        for (i, nbrs) in adjacency.iter().enumerate() {
            let i = i as u32;
            for &j in nbrs {
                if j == i || j >= n || !adjacency[j as usize].contains(&i) {
                    return Err(NetworkError::BadImport { i, j });
                }
            }
        }
        let degree = adjacency.first().map_or(0, |s| s.len() as u32);
        Ok(Network {
            n,
            degree,
            topology: Topology::Imported,
            seed: 0,
            adjacency,
        })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn neighbors(&self, i: u32) -> &BTreeSet<u32> {
        &self.adjacency[i as usize]
    }

    /// Mean of `i`'s neighbors' previous-round values; `i`'s own value is
    /// never included. Errors on the first neighbor without a value, leaving
    /// the missing-value policy to the caller.
    pub fn peer_average<S: Scalar>(
        &self,
        prev_round: &dyn Fn(u32) -> Option<S>,
        i: u32,
    ) -> Result<S, NetworkError> {
        let nbrs = self.neighbors(i);
        let mut sum = S::zero();
        for &j in nbrs {
            let v = prev_round(j).ok_or(NetworkError::MissingNeighborValue { i: j })?;
            sum = sum + v;
        }
        Ok(sum / crate::scalar::cast(nbrs.len() as f64))
    }

    /// Like [`Network::peer_average`], but averages over the neighbors that
    /// do have values and reports how many were skipped. Returns `None` when
    /// no neighbor has a value.
    pub fn peer_average_present<S: Scalar>(
        &self,
        prev_round: &dyn Fn(u32) -> Option<S>,
        i: u32,
    ) -> Option<(S, usize)> {
        let nbrs = self.neighbors(i);
        let values: Vec<S> = nbrs.iter().filter_map(|&j| prev_round(j)).collect();
        let skipped = nbrs.len() - values.len();
        crate::scalar::mean(&values).map(|m| (m, skipped))
    }

    /// Edge list, one `i j` pair per line with i < j, sorted. Stable across
    /// runs for a fixed graph; used for the on-disk audit dump.
    pub fn edge_list(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            for &j in &self.adjacency[i as usize] {
                if i < j {
                    writeln!(out, "{i} {j}").expect("string write");
                }
            }
        }
        out
    }

    fn check_invariants(&self) -> bool {
        self.adjacency.len() == self.n as usize
            && self.adjacency.iter().enumerate().all(|(i, nbrs)| {
                nbrs.len() == self.degree as usize
                    && !nbrs.contains(&(i as u32))
                    && nbrs.iter().all(|&j| self.adjacency[j as usize].contains(&(i as u32)))
            })
            && is_connected(&self.adjacency)
    }
}

fn ring_adjacency(n: u32, k: u32) -> Vec<BTreeSet<u32>> {
    let hops = k / 2;
    (0..n)
        .map(|i| {
            let mut nbrs = BTreeSet::new();
            for h in 1..=hops {
                nbrs.insert((i + h) % n);
                nbrs.insert((i + n - h) % n);
            }
            nbrs
        })
        .collect()
}

/// Pairing (configuration) model: shuffle n*k stubs, pair consecutively,
/// retry the whole draw on a self-loop, parallel edge, or disconnection.
fn random_regular_adjacency(n: u32, k: u32, seed: u64) -> Result<Vec<BTreeSet<u32>>, NetworkError> {
    const MAX_ATTEMPTS: u32 = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stubs: Vec<u32> = (0..n).flat_map(|i| std::iter::repeat(i).take(k as usize)).collect();
    'attempt: for _ in 0..MAX_ATTEMPTS {
        stubs.shuffle(&mut rng);
        let mut adjacency = vec![BTreeSet::new(); n as usize];
        for pair in stubs.chunks_exact(2) {
            let (a, b) = (pair[0], pair[1]);
            if a == b || adjacency[a as usize].contains(&b) {
                continue 'attempt;
            }
            adjacency[a as usize].insert(b);
            adjacency[b as usize].insert(a);
        }
        if is_connected(&adjacency) {
            return Ok(adjacency);
        }
    }
    Err(NetworkError::PairingExhausted(MAX_ATTEMPTS))
}

fn is_connected(adjacency: &[BTreeSet<u32>]) -> bool {
    if adjacency.is_empty() {
        return true;
    }
    let mut seen = vec![false; adjacency.len()];
    let mut stack = vec![0u32];
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = stack.pop() {
        for &j in &adjacency[i as usize] {
            if !seen[j as usize] {
                seen[j as usize] = true;
                count += 1;
                stack.push(j);
            }
        }
    }
    count == adjacency.len()
}
