//! Random-field Curie-Weiss model: fields, spins, energy and the heat-bath
//! single-site update.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Domain, StreamFactory};

/// Law of the i.i.d. random fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistSpec {
    Uniform { low: f64, high: f64 },
    Gaussian { mean: f64, std: f64 },
    Discrete { values: Vec<f64>, weights: Vec<f64> },
    /// A fixed field vector, used verbatim (length must equal N).
    Explicit { h: Vec<f64> },
}

impl DistSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        match self {
            DistSpec::Uniform { low, high } => {
                if !(low.is_finite() && high.is_finite() && low <= high) {
                    return bad("uniform field law needs finite low <= high");
                }
            }
            DistSpec::Gaussian { mean, std } => {
                if !(mean.is_finite() && std.is_finite() && *std >= 0.0) {
                    return bad("gaussian field law needs finite mean and std >= 0");
                }
            }
            DistSpec::Discrete { values, weights } => {
                if values.is_empty() {
                    return bad("discrete field law has empty support");
                }
                if values.len() != weights.len() {
                    return bad("discrete field law: values and weights differ in length");
                }
                if values.iter().any(|v| !v.is_finite())
                    || weights.iter().any(|w| !w.is_finite() || *w < 0.0)
                {
                    return bad("discrete field law: non-finite value or negative weight");
                }
                if weights.iter().sum::<f64>() <= 0.0 {
                    return bad("discrete field law: weights sum to zero");
                }
            }
            DistSpec::Explicit { h } => {
                if h.is_empty() || h.iter().any(|v| !v.is_finite()) {
                    return bad("explicit fields must be a non-empty list of finite numbers");
                }
            }
        }
        Ok(())
    }
}

/// Quenched random fields `h_1..h_N` together with the law that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEnvironment {
    h: Vec<f64>,
    dist: DistSpec,
    seed: u64,
    support: (f64, f64),
}

/// JSON document `{N, seed, dist_spec, h}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldEnvironmentDoc {
    #[serde(rename = "N")]
    n: usize,
    seed: u64,
    dist_spec: DistSpec,
    h: Vec<f64>,
}

impl FieldEnvironment {
    pub fn n_sites(&self) -> usize {
        self.h.len()
    }

    pub fn fields(&self) -> &[f64] {
        &self.h
    }

    pub fn field(&self, x: usize) -> f64 {
        self.h[x]
    }

    pub fn dist(&self) -> &DistSpec {
        &self.dist
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Interval `I` containing every field value.
    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn max_abs_field(&self) -> f64 {
        self.h.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Fixed fields, mainly for tests and hand-made examples.
    pub fn from_fields(h: Vec<f64>) -> Result<Self> {
        let dist = DistSpec::Explicit { h: h.clone() };
        dist.validate()?;
        let support = realized_range(&h);
        Ok(Self { h, dist, seed: 0, support })
    }

    pub fn to_json(&self) -> String {
        let doc = FieldEnvironmentDoc {
            n: self.h.len(),
            seed: self.seed,
            dist_spec: self.dist.clone(),
            h: self.h.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("field environment serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FieldEnvironmentDoc =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("field environment: {e}")))?;
        doc.dist_spec.validate()?;
        if doc.h.len() != doc.n || doc.n == 0 {
            return Err(Error::Config(format!(
                "field environment declares N = {} but lists {} fields",
                doc.n,
                doc.h.len()
            )));
        }
        let support = support_of(&doc.dist_spec, &doc.h);
        if doc.h.iter().any(|v| *v < support.0 || *v > support.1) {
            return Err(Error::Config("field value outside the support of its law".into()));
        }
        Ok(Self { h: doc.h, dist: doc.dist_spec, seed: doc.seed, support })
    }
}

fn realized_range(h: &[f64]) -> (f64, f64) {
    h.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
}

fn support_of(dist: &DistSpec, h: &[f64]) -> (f64, f64) {
    match dist {
        DistSpec::Uniform { low, high } => (*low, *high),
        DistSpec::Discrete { values, weights } => values
            .iter()
            .zip(weights)
            .filter(|(_, w)| **w > 0.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (v, _)| (lo.min(*v), hi.max(*v))),
        // unbounded law: use the realized range
        DistSpec::Gaussian { .. } | DistSpec::Explicit { .. } => realized_range(h),
    }
}

/// Draw `n` i.i.d. fields from `dist`, deterministically in `seed`.
pub fn sample_fields(dist: &DistSpec, n: usize, seed: u64) -> Result<FieldEnvironment> {
    if n == 0 {
        return Err(Error::Config("N must be at least 1".into()));
    }
    dist.validate()?;
    let mut rng = StreamFactory::new(seed).stream(Domain::Fields, 0, 0);
    let h: Vec<f64> = match dist {
        DistSpec::Uniform { low, high } => (0..n).map(|_| low + (high - low) * rng.uniform()).collect(),
        DistSpec::Gaussian { mean, std } => {
            let normal = Normal::new(*mean, *std).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        }
        DistSpec::Discrete { values, weights } => {
            let total: f64 = weights.iter().sum();
            let mut cumulative = Vec::with_capacity(weights.len());
            let mut acc = 0.0;
            for w in weights {
                acc += w / total;
                cumulative.push(acc);
            }
            (0..n)
                .map(|_| {
                    let u = rng.uniform();
                    let k = cumulative.iter().position(|c| u < *c).unwrap_or(values.len() - 1);
                    // zero-weight entries can never be selected
                    let k = (k..values.len()).find(|&j| weights[j] > 0.0).unwrap_or(k);
                    values[k]
                })
                .collect()
        }
        DistSpec::Explicit { h } => {
            if h.len() != n {
                return Err(Error::Config(format!("explicit fields have length {} but N = {n}", h.len())));
            }
            h.clone()
        }
    };
    let support = support_of(dist, &h);
    Ok(FieldEnvironment { h, dist: dist.clone(), seed, support })
}

/// Inverse temperature and the configured bound on single-site update
/// probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: f64,
    pub alpha_cap: f64,
}

impl ModelParams {
    pub const DEFAULT_ALPHA_CAP: f64 = 0.9999;

    pub fn new(beta: f64) -> Result<Self> {
        Self::with_alpha_cap(beta, Self::DEFAULT_ALPHA_CAP)
    }

    pub fn with_alpha_cap(beta: f64, alpha_cap: f64) -> Result<Self> {
        let p = Self { beta, alpha_cap };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if !(0.5..1.0).contains(&self.alpha_cap) {
            return Err(Error::Config(format!("alpha_cap must lie in [1/2, 1), got {}", self.alpha_cap)));
        }
        Ok(())
    }
}

/// Spin configuration with incrementally maintained block and total sums.
#[derive(Clone, Debug)]
pub struct SpinConfig {
    spins: Vec<i8>,
    block_of: Arc<[u32]>,
    block_sums: Vec<i64>,
    total: i64,
}

impl PartialEq for SpinConfig {
    fn eq(&self, other: &Self) -> bool {
        self.spins == other.spins
    }
}

impl Eq for SpinConfig {}

impl SpinConfig {
    /// `block_of[x]` is the block index of site `x`; `n_blocks` bounds it.
    pub fn new(spins: Vec<i8>, block_of: Arc<[u32]>, n_blocks: usize) -> Result<Self> {
        if spins.len() != block_of.len() {
            return Err(Error::Contract(format!(
                "{} spins but block map covers {} sites",
                spins.len(),
                block_of.len()
            )));
        }
        if spins.iter().any(|s| *s != 1 && *s != -1) {
            return Err(Error::Contract("spins must be +1 or -1".into()));
        }
        if block_of.iter().any(|b| *b as usize >= n_blocks) {
            return Err(Error::Contract("block index out of range".into()));
        }
        let mut block_sums = vec![0i64; n_blocks];
        for (s, b) in spins.iter().zip(block_of.iter()) {
            block_sums[*b as usize] += *s as i64;
        }
        let total = block_sums.iter().sum();
        Ok(Self { spins, block_of, block_sums, total })
    }

    /// All sites in one block.
    pub fn single_block(spins: Vec<i8>) -> Result<Self> {
        let map: Arc<[u32]> = vec![0u32; spins.len()].into();
        Self::new(spins, map, 1)
    }

    pub fn all_up(block_of: Arc<[u32]>, n_blocks: usize) -> Self {
        Self::new(vec![1; block_of.len()], block_of, n_blocks).expect("valid block map")
    }

    /// Configuration from the low `n` bits of `bits` (bit set = spin up).
    pub fn from_bits(bits: u64, block_of: Arc<[u32]>, n_blocks: usize) -> Self {
        let spins = (0..block_of.len()).map(|x| if bits >> x & 1 == 1 { 1 } else { -1 }).collect();
        Self::new(spins, block_of, n_blocks).expect("valid block map")
    }

    pub fn to_bits(&self) -> u64 {
        self.spins
            .iter()
            .enumerate()
            .fold(0u64, |acc, (x, s)| if *s > 0 { acc | 1 << x } else { acc })
    }

    pub fn n_sites(&self) -> usize {
        self.spins.len()
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    #[inline]
    pub fn spin(&self, x: usize) -> i8 {
        self.spins[x]
    }

    pub fn block_map(&self) -> &Arc<[u32]> {
        &self.block_of
    }

    #[inline]
    pub fn block_of(&self, x: usize) -> usize {
        self.block_of[x] as usize
    }

    pub fn block_sums(&self) -> &[i64] {
        &self.block_sums
    }

    #[inline]
    pub fn total_sum(&self) -> i64 {
        self.total
    }

    /// Total magnetization `m_N = total / N`.
    pub fn magnetization(&self) -> f64 {
        self.total as f64 / self.spins.len() as f64
    }

    #[inline]
    pub fn set(&mut self, x: usize, value: i8) {
        let old = self.spins[x];
        if old != value {
            let delta = (value - old) as i64;
            self.spins[x] = value;
            self.block_sums[self.block_of[x] as usize] += delta;
            self.total += delta;
        }
    }

    pub fn flip(&mut self, x: usize) {
        self.set(x, -self.spins[x]);
    }

    /// Copy with site `x` flipped (`σ^(x)`).
    pub fn flipped(&self, x: usize) -> Self {
        let mut c = self.clone();
        c.flip(x);
        c
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.spins.iter().zip(&other.spins).filter(|(a, b)| a != b).count()
    }

    /// Recompute the cached sums and compare.
    pub fn caches_consistent(&self) -> bool {
        let mut sums = vec![0i64; self.block_sums.len()];
        for (s, b) in self.spins.iter().zip(self.block_of.iter()) {
            sums[*b as usize] += *s as i64;
        }
        sums == self.block_sums && self.total == sums.iter().sum::<i64>()
    }
}

fn check_size(sigma: &SpinConfig, env: &FieldEnvironment) -> Result<()> {
    if sigma.n_sites() != env.n_sites() {
        return Err(Error::Contract(format!(
            "configuration has {} sites, environment {}",
            sigma.n_sites(),
            env.n_sites()
        )));
    }
    Ok(())
}

/// `H_N(σ) = -(N/2) m_N(σ)^2 - Σ_i h_i σ_i`.
pub fn hamiltonian(sigma: &SpinConfig, env: &FieldEnvironment) -> Result<f64> {
    check_size(sigma, env)?;
    let n = sigma.n_sites() as f64;
    let m = sigma.total_sum() as f64 / n;
    let field: f64 = sigma.spins().iter().zip(env.fields()).map(|(s, h)| *s as f64 * h).sum();
    Ok(-0.5 * n * m * m - field)
}

/// Unnormalized log Gibbs weight `-β H_N(σ)`.
pub fn log_gibbs_weight(sigma: &SpinConfig, env: &FieldEnvironment, params: &ModelParams) -> Result<f64> {
    Ok(-params.beta * hamiltonian(sigma, env)?)
}

/// Heat-bath probability of setting a spin to +1 in local field `g`.
#[inline]
pub fn heat_bath_plus(beta: f64, g: f64) -> f64 {
    0.5 * (1.0 + (beta * g).tanh())
}

/// Local field at `x`, excluding the self pair: `(1/N) Σ_{j≠x} σ_j + h_x`.
#[inline]
pub fn local_field(sigma: &SpinConfig, x: usize, env: &FieldEnvironment) -> f64 {
    (sigma.total_sum() - sigma.spin(x) as i64) as f64 / sigma.n_sites() as f64 + env.field(x)
}

/// `(p_plus, p_minus)` for resampling site `x`.
pub fn flip_prob(
    sigma: &SpinConfig,
    x: usize,
    env: &FieldEnvironment,
    params: &ModelParams,
) -> Result<(f64, f64)> {
    check_size(sigma, env)?;
    if x >= sigma.n_sites() {
        return Err(Error::Contract(format!("site {x} out of range")));
    }
    let plus = heat_bath_plus(params.beta, local_field(sigma, x, env));
    let minus = 1.0 - plus;
    let worst = plus.max(minus);
    if worst > params.alpha_cap {
        return Err(Error::AlphaBound { p: worst, cap: params.alpha_cap });
    }
    Ok((plus, minus))
}

/// Heat-bath kernel for a fixed environment.
///
/// The update probability depends only on the site and on the sum of the
/// other spins, so for moderate N it is tabulated once. Table entries are
/// computed with [`heat_bath_plus`] and are bit-identical to direct
/// evaluation.
#[derive(Clone, Debug)]
pub struct HeatBath {
    env: Arc<FieldEnvironment>,
    params: ModelParams,
    table: Option<Vec<f64>>,
}

const TABLE_LIMIT: usize = 1 << 22;

impl HeatBath {
    /// Checks the α-bound for all configurations via
    /// `p <= (1 + tanh(β (1 + max|h|))) / 2`.
    pub fn new(env: Arc<FieldEnvironment>, params: ModelParams) -> Result<Self> {
        params.validate()?;
        let bound = heat_bath_plus(params.beta, 1.0 + env.max_abs_field());
        if bound > params.alpha_cap {
            return Err(Error::AlphaBound { p: bound, cap: params.alpha_cap });
        }
        let n = env.n_sites();
        let table = (n * n <= TABLE_LIMIT).then(|| {
            let mut t = Vec::with_capacity(n * n);
            for x in 0..n {
                for k in 0..n {
                    let others = 2 * k as i64 - (n as i64 - 1);
                    t.push(heat_bath_plus(params.beta, others as f64 / n as f64 + env.field(x)));
                }
            }
            t
        });
        Ok(Self { env, params, table })
    }

    pub fn env(&self) -> &Arc<FieldEnvironment> {
        &self.env
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn n_sites(&self) -> usize {
        self.env.n_sites()
    }

    /// `p_x^+` given the sum of all spins other than `x`.
    #[inline]
    pub fn p_plus_others(&self, x: usize, others: i64) -> f64 {
        let n = self.env.n_sites();
        match &self.table {
            Some(t) => {
                let k = ((others + n as i64 - 1) / 2) as usize;
                t[x * n + k]
            }
            None => heat_bath_plus(self.params.beta, others as f64 / n as f64 + self.env.field(x)),
        }
    }

    #[inline]
    pub fn p_plus(&self, sigma: &SpinConfig, x: usize) -> f64 {
        self.p_plus_others(x, sigma.total_sum() - sigma.spin(x) as i64)
    }

    /// Probability of setting site `x` to `value`.
    #[inline]
    pub fn p_to(&self, sigma: &SpinConfig, x: usize, value: i8) -> f64 {
        let p = self.p_plus(sigma, x);
        if value > 0 {
            p
        } else {
            1.0 - p
        }
    }

    /// One-step probability `P(σ, σ^(x)) = p_x^{-σ_x}(σ) / N`.
    #[inline]
    pub fn flip_rate(&self, sigma: &SpinConfig, x: usize) -> f64 {
        self.p_to(sigma, x, -sigma.spin(x)) / self.n_sites() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(spins: &[i8]) -> SpinConfig {
        SpinConfig::single_block(spins.to_vec()).unwrap()
    }

    #[test]
    fn degenerate_law_gives_zero_fields() {
        let dist = DistSpec::Discrete { values: vec![0.0], weights: vec![1.0] };
        let env = sample_fields(&dist, 8, 1).unwrap();
        assert_eq!(env.fields(), &[0.0; 8]);
    }

    #[test]
    fn sampling_is_deterministic_in_seed() {
        let dist = DistSpec::Uniform { low: -1.0, high: 1.0 };
        let a = sample_fields(&dist, 4, 7).unwrap();
        let b = sample_fields(&dist, 4, 7).unwrap();
        assert_eq!(a.fields(), b.fields());
        assert!(a.fields().iter().all(|h| (-1.0..=1.0).contains(h)));
        let c = sample_fields(&dist, 4, 8).unwrap();
        assert_ne!(a.fields(), c.fields());
    }

    #[test]
    fn empty_discrete_law_is_rejected() {
        let dist = DistSpec::Discrete { values: vec![], weights: vec![] };
        assert!(matches!(sample_fields(&dist, 3, 0), Err(Error::Config(_))));
        let dist = DistSpec::Uniform { low: 1.0, high: 0.0 };
        assert!(sample_fields(&dist, 3, 0).is_err());
    }

    #[test]
    fn symmetric_discrete_mean_obeys_clt_bound() {
        // mean within 4ε/√N of zero, rerun over 100 seeds
        let eps = 0.25;
        let n = 10_000;
        let dist = DistSpec::Discrete { values: vec![-eps, eps], weights: vec![1.0, 1.0] };
        let bound = 4.0 * eps / (n as f64).sqrt();
        let mut outside = 0;
        for seed in 0..100 {
            let env = sample_fields(&dist, n, seed).unwrap();
            let mean = env.fields().iter().sum::<f64>() / n as f64;
            if mean.abs() > bound {
                outside += 1;
            }
        }
        // a 4-sigma excursion has probability 6e-5 per seed
        assert_eq!(outside, 0);
        let env = sample_fields(&dist, n, 3).unwrap();
        let mean = env.fields().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() <= bound);
    }

    #[test]
    fn hamiltonian_hand_value() {
        let env = FieldEnvironment::from_fields(vec![0.1, -0.2, 0.3]).unwrap();
        let e = hamiltonian(&cfg(&[1, 1, -1]), &env).unwrap();
        let expected = -1.5 * (1.0f64 / 3.0).powi(2) - (0.1 - 0.2 - 0.3);
        assert!((e - expected).abs() < 1e-15);
        assert!((e - 0.233_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_all_up_zero_field() {
        for n in [1usize, 4, 9] {
            let env = FieldEnvironment::from_fields(vec![0.0; n]).unwrap();
            let e = hamiltonian(&cfg(&vec![1; n]), &env).unwrap();
            assert!((e + n as f64 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn size_mismatch_is_a_contract_violation() {
        let env = FieldEnvironment::from_fields(vec![0.0; 3]).unwrap();
        assert!(matches!(hamiltonian(&cfg(&[1, 1]), &env), Err(Error::Contract(_))));
    }

    #[test]
    fn flip_prob_examples() {
        let params = ModelParams::new(0.0).unwrap();
        let env = FieldEnvironment::from_fields(vec![0.3, -0.7]).unwrap();
        assert_eq!(flip_prob(&cfg(&[1, 1]), 0, &env, &params).unwrap(), (0.5, 0.5));

        // balanced local field at β = 3
        let params = ModelParams::with_alpha_cap(3.0, 0.99999).unwrap();
        let env = FieldEnvironment::from_fields(vec![0.0, 0.4, -0.2]).unwrap();
        let (p, q) = flip_prob(&cfg(&[1, 1, -1]), 0, &env, &params).unwrap();
        assert_eq!((p, q), (0.5, 0.5));

        let params = ModelParams::new(1.0).unwrap();
        let env = FieldEnvironment::from_fields(vec![0.0, 0.0]).unwrap();
        let (p, q) = flip_prob(&cfg(&[1, -1]), 0, &env, &params).unwrap();
        assert!((p - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((p + q - 1.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_bound_violation_is_reported() {
        let params = ModelParams::with_alpha_cap(5.0, 0.9).unwrap();
        let env = FieldEnvironment::from_fields(vec![0.0; 4]).unwrap();
        assert!(matches!(flip_prob(&cfg(&[1, 1, 1, 1]), 0, &env, &params), Err(Error::AlphaBound { .. })));
        assert!(matches!(HeatBath::new(Arc::new(env), params), Err(Error::AlphaBound { .. })));
        assert!(ModelParams::with_alpha_cap(1.0, 1.0).is_err());
        assert!(ModelParams::with_alpha_cap(1.0, 0.4).is_err());
    }

    #[test]
    fn log_weight_examples() {
        let env = FieldEnvironment::from_fields(vec![0.0; 4]).unwrap();
        let w = log_gibbs_weight(&cfg(&[1; 4]), &env, &ModelParams::new(1.0).unwrap()).unwrap();
        assert!((w - 2.0).abs() < 1e-15);
        let env = FieldEnvironment::from_fields(vec![0.2, -0.1, 0.4, 0.0]).unwrap();
        let w = log_gibbs_weight(&cfg(&[1, -1, 1, 1]), &env, &ModelParams::new(0.0).unwrap()).unwrap();
        assert_eq!(w, 0.0);
    }

    fn enumerate(n: usize) -> impl Iterator<Item = SpinConfig> {
        (0..1u64 << n).map(move |b| SpinConfig::from_bits(b, vec![0u32; n].into(), 1))
    }

    #[test]
    fn detailed_balance_by_enumeration() {
        let dist = DistSpec::Uniform { low: -0.8, high: 0.8 };
        for (n, beta) in [(1usize, 0.7), (5, 1.3), (10, 2.0)] {
            let env = sample_fields(&dist, n, 11).unwrap();
            let params = ModelParams::new(beta).unwrap();
            for sigma in enumerate(n) {
                let w = log_gibbs_weight(&sigma, &env, &params).unwrap();
                for x in 0..n {
                    let tau = sigma.flipped(x);
                    let wt = log_gibbs_weight(&tau, &env, &params).unwrap();
                    let (pp, pm) = flip_prob(&sigma, x, &env, &params).unwrap();
                    let (tp, tm) = flip_prob(&tau, x, &env, &params).unwrap();
                    let (forward, backward) = if sigma.spin(x) > 0 { (pm, tp) } else { (pp, tm) };
                    let lhs = w.exp() * forward / n as f64;
                    let rhs = wt.exp() * backward / n as f64;
                    assert!(((lhs - rhs) / rhs).abs() < 1e-12, "n={n} x={x}");
                }
            }
        }
    }

    #[test]
    fn a2_same_block_sums_same_rates() {
        // blocks of a 3-way partition; equal block sums and equal spin at x
        let n = 9;
        let env = sample_fields(&DistSpec::Uniform { low: -1.0, high: 1.0 }, n, 5).unwrap();
        let params = ModelParams::new(1.1).unwrap();
        let map: Arc<[u32]> = (0..n as u32).map(|x| x % 3).collect::<Vec<_>>().into();
        let configs: Vec<SpinConfig> =
            (0..1u64 << n).map(|b| SpinConfig::from_bits(b, map.clone(), 3)).collect();
        for a in configs.iter().step_by(7) {
            for b in configs.iter().filter(|b| b.block_sums() == a.block_sums()) {
                for x in 0..n {
                    if a.spin(x) == b.spin(x) {
                        assert_eq!(flip_prob(a, x, &env, &params).unwrap(), flip_prob(b, x, &env, &params).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn table_matches_direct_evaluation() {
        let env = Arc::new(sample_fields(&DistSpec::Gaussian { mean: 0.0, std: 0.3 }, 7, 2).unwrap());
        let params = ModelParams::new(1.7).unwrap();
        let kernel = HeatBath::new(env.clone(), params).unwrap();
        for sigma in enumerate(7) {
            for x in 0..7 {
                let (p, _) = flip_prob(&sigma, x, &env, &params).unwrap();
                assert_eq!(kernel.p_plus(&sigma, x), p);
            }
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let env = sample_fields(&DistSpec::Gaussian { mean: 0.1, std: 1.0 / 3.0 }, 25, 99).unwrap();
        let back = FieldEnvironment::from_json(&env.to_json()).unwrap();
        assert_eq!(back, env);
        for (a, b) in env.fields().iter().zip(back.fields()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(env.to_json().contains("\"N\": 25"));
    }

    proptest! {
        #[test]
        fn incremental_sums_match_recomputation(
            init in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 1..40),
            moves in proptest::collection::vec((0usize..40, prop_oneof![Just(1i8), Just(-1i8)]), 0..200),
        ) {
            let n = init.len();
            let map: Arc<[u32]> = (0..n as u32).map(|x| x % 4).collect::<Vec<_>>().into();
            let mut s = SpinConfig::new(init, map, 4).unwrap();
            for (x, v) in moves {
                s.set(x % n, v);
                prop_assert!(s.caches_consistent());
            }
            let sizes: Vec<i64> = (0..4).map(|b| (0..n).filter(|x| x % 4 == b).count() as i64).collect();
            for (sum, size) in s.block_sums().iter().zip(sizes) {
                prop_assert!(sum.abs() <= size);
                prop_assert_eq!((sum - size).rem_euclid(2), 0);
            }
        }

        #[test]
        fn update_probabilities_monotone_in_field(beta in 0.0f64..4.0, g1 in -2.0f64..2.0, g2 in -2.0f64..2.0) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let (a, b) = (heat_bath_plus(beta, lo), heat_bath_plus(beta, hi));
            prop_assert!(a <= b);
            prop_assert!(a > 0.0 && b < 1.0);
        }

        #[test]
        fn spin_flip_symmetry_zero_field(bits in 0u64..1024) {
            let env = FieldEnvironment::from_fields(vec![0.0; 10]).unwrap();
            let s = SpinConfig::from_bits(bits, vec![0u32; 10].into(), 1);
            let t = SpinConfig::from_bits(!bits & 1023, vec![0u32; 10].into(), 1);
            prop_assert_eq!(hamiltonian(&s, &env).unwrap(), hamiltonian(&t, &env).unwrap());
        }
    }
}
