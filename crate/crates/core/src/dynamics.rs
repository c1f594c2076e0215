//! Single-spin-flip heat-bath dynamics and hitting times of mesoscopic sets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarse::{MesoState, Partition};
use crate::error::{Error, Result};
use crate::model::{HeatBath, SpinConfig};
use crate::rng::{Stream, StreamFactory};

/// Default step budget.
pub const DEFAULT_CAP: u64 = 10_000_000_000;

const SLACK: f64 = 1e-12;

/// Mesoscopic target set. Membership depends only on the block magnetizations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    /// One slice `S[m]`, given by its integer block sums.
    Slice { sums: Vec<i64> },
    /// `{m : coeffs · m >= threshold}` (or `<=` when `below`).
    HalfSpace { coeffs: Vec<f64>, threshold: f64, below: bool },
    /// `{m : ||m - center||_1 <= radius}`.
    Ball { center: Vec<f64>, radius: f64 },
}

impl Target {
    pub fn slice(m: &MesoState) -> Self {
        Target::Slice { sums: m.sums().to_vec() }
    }

    /// Total magnetization at most `threshold`.
    pub fn total_below(n_blocks: usize, threshold: f64) -> Self {
        Target::HalfSpace { coeffs: vec![1.0; n_blocks], threshold, below: true }
    }

    /// Total magnetization at least `threshold`.
    pub fn total_above(n_blocks: usize, threshold: f64) -> Self {
        Target::HalfSpace { coeffs: vec![1.0; n_blocks], threshold, below: false }
    }

    #[inline]
    pub fn contains_sums(&self, sums: &[i64], n_sites: usize) -> bool {
        let n = n_sites as f64;
        match self {
            Target::Slice { sums: s } => s.as_slice() == sums,
            Target::HalfSpace { coeffs, threshold, below } => {
                let v: f64 = coeffs.iter().zip(sums).map(|(c, s)| c * *s as f64).sum::<f64>() / n;
                if *below {
                    v <= threshold + SLACK
                } else {
                    v >= threshold - SLACK
                }
            }
            Target::Ball { center, radius } => {
                let d: f64 = center.iter().zip(sums).map(|(c, s)| (*s as f64 / n - c).abs()).sum();
                d <= radius + SLACK
            }
        }
    }

    pub fn contains(&self, m: &MesoState) -> bool {
        self.contains_sums(m.sums(), m.n_sites())
    }

    fn check(&self, n_blocks: usize) -> Result<()> {
        let len = match self {
            Target::Slice { sums } => sums.len(),
            Target::HalfSpace { coeffs, .. } => coeffs.len(),
            Target::Ball { center, radius } => {
                if !(*radius >= 0.0) {
                    return Err(Error::Config(format!("ball radius {radius} is negative")));
                }
                center.len()
            }
        };
        if len != n_blocks {
            return Err(Error::Config(format!("target has {len} coordinates, partition has {n_blocks} blocks")));
        }
        Ok(())
    }
}

/// Targets plus a step budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingSpec {
    pub targets: Vec<Target>,
    pub cap: u64,
}

impl StoppingSpec {
    pub fn new(targets: Vec<Target>, cap: u64) -> Result<Self> {
        if cap == 0 {
            return Err(Error::Config("step cap must be at least 1".into()));
        }
        Ok(Self { targets, cap })
    }

    pub fn single(target: Target, cap: u64) -> Result<Self> {
        Self::new(vec![target], cap)
    }

    pub fn validate(&self, partition: &Partition) -> Result<()> {
        self.targets.iter().try_for_each(|t| t.check(partition.n_blocks()))
    }

    /// Index of the first target containing the block sums.
    #[inline]
    pub fn hit(&self, sums: &[i64], n_sites: usize) -> Option<usize> {
        self.targets.iter().position(|t| t.contains_sums(sums, n_sites))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HittingRecord {
    pub hit_index: Option<usize>,
    pub time: u64,
    pub final_state: SpinConfig,
    pub truncated: bool,
}

/// One heat-bath update. Consumes exactly two words: the site, then the
/// uniform deciding the new spin. Returns the updated site.
#[inline]
pub fn step(sigma: &mut SpinConfig, kernel: &HeatBath, rng: &mut Stream) -> usize {
    let x = rng.index(sigma.n_sites());
    let u = rng.uniform();
    let value = if u < kernel.p_plus(sigma, x) { 1 } else { -1 };
    sigma.set(x, value);
    x
}

/// Runs until a target is entered at some `t > 0` or the cap is reached.
pub fn run_until_hit(sigma0: &SpinConfig, spec: &StoppingSpec, kernel: &HeatBath, rng: &mut Stream) -> HittingRecord {
    let mut sigma = sigma0.clone();
    let n = sigma.n_sites();
    for t in 1..=spec.cap {
        step(&mut sigma, kernel, rng);
        if let Some(i) = spec.hit(sigma.block_sums(), n) {
            return HittingRecord { hit_index: Some(i), time: t, final_state: sigma, truncated: false };
        }
    }
    HittingRecord { hit_index: None, time: spec.cap, final_state: sigma, truncated: true }
}

/// Independent trajectories `first..first+count` from one start. Trajectory
/// `i` always uses stream `(seed, i)`, so output does not depend on the
/// number of workers.
pub fn run_ensemble(
    sigma0: &SpinConfig,
    spec: &StoppingSpec,
    kernel: &HeatBath,
    streams: &StreamFactory,
    first: u64,
    count: u64,
) -> Vec<HittingRecord> {
    (first..first + count)
        .into_par_iter()
        .map(|i| run_until_hit(sigma0, spec, kernel, &mut streams.trajectory(i)))
        .collect()
}

/// Uniform sample from the slice `S[m]`: in each block a uniformly random
/// subset of the right size is set up.
pub fn sample_on_slice(partition: &Partition, m: &MesoState, rng: &mut Stream) -> Result<SpinConfig> {
    let m = MesoState::on_grid(m.sums().to_vec(), partition)?;
    let mut spins = vec![-1i8; partition.n_sites()];
    for block in 0..partition.n_blocks() {
        let mut members = partition.members(block);
        let ups = ((partition.sizes()[block] as i64 + m.sums()[block]) / 2) as usize;
        // partial Fisher-Yates
        for k in 0..ups {
            let j = k + rng.index(members.len() - k);
            members.swap(k, j);
            spins[members[k]] = 1;
        }
    }
    partition.spin_config(spins)
}
