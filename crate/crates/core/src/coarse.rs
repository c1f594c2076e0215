//! Field-based block partitions, block magnetizations and lumped rates.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::ExactChain;
use crate::model::{FieldEnvironment, SpinConfig};

/// Partition of the sites by which interval their field falls in.
#[derive(Clone, Debug)]
pub struct Partition {
    edges: Vec<f64>,
    block_of: Arc<[u32]>,
    sizes: Vec<usize>,
    rho: Vec<f64>,
    hbar: Vec<f64>,
    htilde: Vec<f64>,
    spread: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PartitionDoc {
    n: usize,
    interval_edges: Vec<f64>,
    block_assignment: Vec<u32>,
    rho: Vec<f64>,
    hbar: Vec<f64>,
}

/// Equal-width intervals over the field support, `n` blocks.
pub fn build_partition(env: &FieldEnvironment, n: usize) -> Result<Partition> {
    if n == 0 {
        return Err(Error::Config("number of blocks must be at least 1".into()));
    }
    let (lo, hi) = env.support();
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::Config(format!("empty field support [{lo}, {hi}]")));
    }
    let width = (hi - lo) / n as f64;
    let mut edges: Vec<f64> = (0..=n).map(|l| lo + width * l as f64).collect();
    edges[n] = hi;
    let block_of: Vec<u32> = env
        .fields()
        .iter()
        .map(|h| {
            if width > 0.0 {
                (((h - lo) / width).floor() as i64).clamp(0, n as i64 - 1) as u32
            } else {
                0
            }
        })
        .collect();
    Partition::assemble(env, block_of, n, edges)
}

impl Partition {
    /// Partition with an explicit site-to-block map.
    pub fn from_assignment(env: &FieldEnvironment, block_of: Vec<u32>, n: usize) -> Result<Self> {
        if block_of.len() != env.n_sites() {
            return Err(Error::Contract("block map length differs from N".into()));
        }
        if block_of.iter().any(|b| *b as usize >= n) {
            return Err(Error::Contract("block index out of range".into()));
        }
        Self::assemble(env, block_of, n, Vec::new())
    }

    /// Every site its own block.
    pub fn singletons(env: &FieldEnvironment) -> Self {
        let n = env.n_sites();
        Self::from_assignment(env, (0..n as u32).collect(), n).expect("valid singleton map")
    }

    fn assemble(env: &FieldEnvironment, block_of: Vec<u32>, n: usize, edges: Vec<f64>) -> Result<Self> {
        let n_sites = env.n_sites();
        let mut sizes = vec![0usize; n];
        let mut sums = vec![0.0f64; n];
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for (x, b) in block_of.iter().enumerate() {
            let b = *b as usize;
            let h = env.field(x);
            sizes[b] += 1;
            sums[b] += h;
            lo[b] = lo[b].min(h);
            hi[b] = hi[b].max(h);
        }
        let hbar: Vec<f64> =
            sizes.iter().zip(&sums).map(|(s, t)| if *s > 0 { t / *s as f64 } else { 0.0 }).collect();
        let htilde = block_of.iter().enumerate().map(|(x, b)| env.field(x) - hbar[*b as usize]).collect();
        let rho = sizes.iter().map(|s| *s as f64 / n_sites as f64).collect();
        let spread = (0..n).map(|b| if sizes[b] > 0 { hi[b] - lo[b] } else { 0.0 }).collect();
        Ok(Self { edges, block_of: block_of.into(), sizes, rho, hbar, htilde, spread })
    }

    /// Split every interval in half. Each new block lies inside an old one.
    pub fn refine(&self, env: &FieldEnvironment) -> Result<Self> {
        if self.edges.is_empty() {
            return Err(Error::Contract("only interval partitions can be refined".into()));
        }
        let n = self.n_blocks();
        let mut edges = Vec::with_capacity(2 * n + 1);
        for l in 0..n {
            edges.push(self.edges[l]);
            edges.push(0.5 * (self.edges[l] + self.edges[l + 1]));
        }
        edges.push(self.edges[n]);
        let block_of = (0..env.n_sites())
            .map(|x| {
                let old = self.block_of[x] as usize;
                let upper = env.field(x) >= edges[2 * old + 1] && edges[2 * old + 1] < edges[2 * old + 2];
                (2 * old + upper as usize) as u32
            })
            .collect();
        Self::assemble(env, block_of, 2 * n, edges)
    }

    pub fn n_blocks(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_sites(&self) -> usize {
        self.block_of.len()
    }

    pub fn block_map(&self) -> &Arc<[u32]> {
        &self.block_of
    }

    pub fn block_of(&self, x: usize) -> usize {
        self.block_of[x] as usize
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn hbar(&self) -> &[f64] {
        &self.hbar
    }

    pub fn htilde(&self) -> &[f64] {
        &self.htilde
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn members(&self, block: usize) -> Vec<usize> {
        (0..self.n_sites()).filter(|x| self.block_of[*x] as usize == block).collect()
    }

    /// Largest within-block field spread.
    pub fn max_spread(&self) -> f64 {
        self.spread.iter().fold(0.0, |a, b| a.max(*b))
    }

    /// Large-N stand-in for the lumping error: β times the largest
    /// within-block field spread.
    pub fn eps_surrogate(&self, beta: f64) -> f64 {
        beta * self.max_spread()
    }

    pub fn spin_config(&self, spins: Vec<i8>) -> Result<SpinConfig> {
        SpinConfig::new(spins, self.block_of.clone(), self.n_blocks())
    }

    pub fn all_up(&self) -> SpinConfig {
        SpinConfig::all_up(self.block_of.clone(), self.n_blocks())
    }

    pub fn to_json(&self) -> String {
        let doc = PartitionDoc {
            n: self.n_blocks(),
            interval_edges: self.edges.clone(),
            block_assignment: self.block_of.to_vec(),
            rho: self.rho.clone(),
            hbar: self.hbar.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("partition serializes")
    }
}

/// Block magnetization vector, stored as exact integer block sums.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MesoState {
    sums: Vec<i64>,
    n_sites: usize,
}

impl MesoState {
    pub fn new(sums: Vec<i64>, n_sites: usize) -> Self {
        Self { sums, n_sites }
    }

    /// Validates that every coordinate lies on the grid of `partition`.
    pub fn on_grid(sums: Vec<i64>, partition: &Partition) -> Result<Self> {
        if sums.len() != partition.n_blocks() {
            return Err(Error::Contract("meso state has the wrong number of blocks".into()));
        }
        for (s, size) in sums.iter().zip(partition.sizes()) {
            let size = *size as i64;
            if s.abs() > size || (s - size).rem_euclid(2) != 0 {
                return Err(Error::Domain(format!("block sum {s} is not on the grid of a block of size {size}")));
            }
        }
        Ok(Self::new(sums, partition.n_sites()))
    }

    /// Grid point of `partition` nearest to the coordinates `m`, blockwise.
    pub fn nearest(m: &[f64], partition: &Partition) -> Result<Self> {
        if m.len() != partition.n_blocks() {
            return Err(Error::Contract("meso state has the wrong number of blocks".into()));
        }
        let n = partition.n_sites() as f64;
        let sums = m
            .iter()
            .zip(partition.sizes())
            .map(|(c, size)| {
                let size = *size as i64;
                // sums are size - 2k for k in 0..=size
                let k = ((size as f64 - c * n) / 2.0).round().clamp(0.0, size as f64) as i64;
                size - 2 * k
            })
            .collect();
        Ok(Self::new(sums, partition.n_sites()))
    }

    pub fn sums(&self) -> &[i64] {
        &self.sums
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_blocks(&self) -> usize {
        self.sums.len()
    }

    /// `m_l = (block sum) / N`.
    pub fn coords(&self) -> Vec<f64> {
        self.sums.iter().map(|s| *s as f64 / self.n_sites as f64).collect()
    }

    pub fn total(&self) -> f64 {
        self.sums.iter().sum::<i64>() as f64 / self.n_sites as f64
    }

    /// `m ± (2/N) e_block`, if it stays on the grid.
    pub fn step(&self, block: usize, up: bool, partition: &Partition) -> Option<Self> {
        let mut sums = self.sums.clone();
        sums[block] += if up { 2 } else { -2 };
        (sums[block].abs() <= partition.sizes()[block] as i64).then(|| Self::new(sums, self.n_sites))
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.sums.iter().zip(&other.sums).map(|(a, b)| (a - b).abs()).sum::<i64>() as f64 / self.n_sites as f64
    }

    /// Render as `m_1;m_2;...` for CSV output.
    pub fn to_field(&self) -> String {
        self.coords().iter().map(|c| format!("{c:.16e}")).collect::<Vec<_>>().join(";")
    }
}

pub fn meso_map(sigma: &SpinConfig, partition: &Partition) -> Result<MesoState> {
    if sigma.n_sites() != partition.n_sites() || sigma.block_sums().len() != partition.n_blocks() {
        return Err(Error::Contract("configuration and partition disagree".into()));
    }
    Ok(MesoState::new(sigma.block_sums().to_vec(), sigma.n_sites()))
}

/// Exact lumped chain `r_N(m, m')` and `Q_n(m)` obtained by enumeration.
#[derive(Clone, Debug)]
pub struct LumpedChain {
    q: Vec<f64>,
    rates: HashMap<(usize, usize), f64>,
}

impl LumpedChain {
    pub fn from_chain(chain: &ExactChain) -> Self {
        let n_slices = chain.n_slices();
        let mut q = vec![0.0; n_slices];
        let mut flux: HashMap<(usize, usize), f64> = HashMap::new();
        for s in 0..chain.n_states() {
            let m = chain.slice_of(s);
            let mu = chain.mu(s);
            q[m] += mu;
            *flux.entry((m, m)).or_default() += mu * chain.hold(s);
            for x in 0..chain.n_sites() {
                let t = s ^ (1 << x);
                *flux.entry((m, chain.slice_of(t))).or_default() += mu * chain.rate(s, x);
            }
        }
        let rates = flux.into_iter().map(|((a, b), f)| ((a, b), f / q[a])).collect();
        Self { q, rates }
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates.get(&(from, to)).copied().unwrap_or(0.0)
    }

    pub fn rates(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.rates.iter().map(|(k, v)| (*k, *v))
    }
}

/// `r_N(m, m')` by exact summation over the two slices.
pub fn lumped_rates_exact(chain: &ExactChain, from: &MesoState, to: &MesoState) -> Result<f64> {
    let a = chain
        .slice_id(from)
        .ok_or_else(|| Error::Domain("source meso state has an empty slice".into()))?;
    let b = match chain.slice_id(to) {
        Some(b) => b,
        None => return Ok(0.0),
    };
    let mut q = 0.0;
    let mut flux = 0.0;
    for &s in chain.slice_members(a) {
        let s = s as usize;
        let mu = chain.mu(s);
        q += mu;
        if a == b {
            flux += mu * chain.hold(s);
        }
        for x in 0..chain.n_sites() {
            if chain.slice_of(s ^ (1 << x)) == b {
                flux += mu * chain.rate(s, x);
            }
        }
    }
    if q <= 0.0 {
        return Err(Error::Domain("slice has zero equilibrium mass".into()));
    }
    Ok(flux / q)
}

/// Block-mean-field surrogate for the move `m -> m ± (2/N) e_block`.
pub fn lumped_rates_approx(partition: &Partition, m: &MesoState, block: usize, up: bool, beta: f64) -> f64 {
    let n = partition.n_sites() as f64;
    let size = partition.sizes()[block] as i64;
    let s = m.sums()[block];
    // up-moves turn a minus spin, down-moves a plus spin
    let movable = if up { (size - s) / 2 } else { (size + s) / 2 };
    if movable <= 0 {
        return 0.0;
    }
    let t = (beta * (m.total() + partition.hbar()[block])).tanh();
    movable as f64 / n * 0.5 * if up { 1.0 + t } else { 1.0 - t }
}

/// Largest relative deviation of microscopic one-step rates from the lumped
/// rates: over configurations `σ` and reachable slices `m'`,
/// `|p(σ, σ') · k(σ, m') / r_N(m, m') - 1|` where `k(σ, m')` counts the
/// configurations of slice `m'` reachable from `σ` in one step.
pub fn a1_certificate(chain: &ExactChain) -> f64 {
    let lumped = LumpedChain::from_chain(chain);
    let n = chain.n_sites();
    let mut worst = 0.0f64;
    let mut targets: Vec<usize> = Vec::with_capacity(n);
    for s in 0..chain.n_states() {
        let m = chain.slice_of(s);
        let hold = chain.hold(s);
        let r = lumped.rate(m, m);
        if r > 0.0 {
            worst = worst.max((hold / r - 1.0).abs());
        }
        targets.clear();
        targets.extend((0..n).map(|x| chain.slice_of(s ^ (1 << x))));
        for x in 0..n {
            let target = targets[x];
            let reachable = targets.iter().filter(|t| **t == target).count();
            let r = lumped.rate(m, target);
            if r > 0.0 {
                worst = worst.max((chain.rate(s, x) * reachable as f64 / r - 1.0).abs());
            }
        }
    }
    worst
}
