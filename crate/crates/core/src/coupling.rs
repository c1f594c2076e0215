//! Coupled chains: the block-preserving LLP pairing, the coin-augmented
//! coupling attempt and the cycle decomposition of a hitting time.
//!
//! Randomness layout for trajectory `i`, cycle `k`:
//! the η-chain reads `(EtaChain, i, k)` with exactly two words per step, so
//! its path is the plain chain of [`crate::dynamics::step`] on that stream;
//! coins, the choice of `y` and the residual draws read `(Coins, i, k)`;
//! the fresh η start reads `(SliceSample, i, k)`; σ's private updates read
//! `(SigmaPrivate, i, 0)` for the whole run.

use serde::{Deserialize, Serialize};

use crate::coarse::{MesoState, Partition};
use crate::dynamics::{sample_on_slice, step, StoppingSpec, Target};
use crate::error::{Error, Result};
use crate::model::{HeatBath, SpinConfig};
use crate::rng::{Domain, Stream, StreamFactory};

/// Slack on the residual probabilities before a ν violation is declared.
const RESIDUAL_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    /// Horizon exponent: attempts last `ceil(N^κ)` steps.
    pub kappa: f64,
    /// Number of coins per attempt is `ceil(c2 N)`.
    pub c2: f64,
    /// Probability of a zero coin.
    pub nu: f64,
}

impl CouplingParams {
    pub fn new(kappa: f64, c2: f64, nu: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
        }
        if !(c2 > 0.0) || !c2.is_finite() {
            return Err(Error::Config(format!("c2 must be positive, got {c2}")));
        }
        if !(0.0..1.0).contains(&nu) {
            return Err(Error::Config(format!("nu must lie in [0, 1), got {nu}")));
        }
        Ok(Self { kappa, c2, nu })
    }

    /// Defaults κ = 3, c2 = 4 with the given ν.
    pub fn with_nu(nu: f64) -> Result<Self> {
        Self::new(3.0, 4.0, nu)
    }

    pub fn horizon(&self, n_sites: usize) -> u64 {
        (n_sites as f64).powf(self.kappa).ceil() as u64
    }

    pub fn n_coins(&self, n_sites: usize) -> usize {
        (self.c2 * n_sites as f64).ceil() as usize
    }
}

/// `M` i.i.d. coins with `P[V = 1] = 1 - ν`, drawn up front.
#[derive(Clone, Debug, PartialEq)]
pub struct CoinStack {
    coins: Vec<bool>,
    nu: f64,
    consumed: usize,
}

impl CoinStack {
    pub fn draw(m: usize, nu: f64, rng: &mut Stream) -> Self {
        let coins = (0..m).map(|_| rng.uniform() >= nu).collect();
        Self { coins, nu, consumed: 0 }
    }

    pub fn from_values(coins: Vec<bool>, nu: f64) -> Self {
        Self { coins, nu, consumed: 0 }
    }

    pub fn len(&self) -> usize {
        self.coins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coins.is_empty()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn exhausted(&self) -> bool {
        self.consumed == self.coins.len()
    }

    /// Event 𝒜: every coin, used or not, shows 1.
    pub fn all_ones(&self) -> bool {
        self.coins.iter().all(|v| *v)
    }

    fn take(&mut self) -> bool {
        let v = self.coins[self.consumed];
        self.consumed += 1;
        v
    }
}

fn check_pair(sigma: &SpinConfig, eta: &SpinConfig) -> Result<()> {
    if sigma.n_sites() != eta.n_sites() || sigma.block_map() != eta.block_map() {
        return Err(Error::Contract("the two chains live on different partitions".into()));
    }
    if sigma.block_sums() != eta.block_sums() {
        return Err(Error::Contract("the two chains have different block magnetizations".into()));
    }
    Ok(())
}

/// Sites `z` in block `k` with `σ_z ≠ η_z` and `η_z ≠ target`.
fn candidates(sigma: &SpinConfig, eta: &SpinConfig, block: usize, target: i8) -> Vec<usize> {
    (0..sigma.n_sites())
        .filter(|z| sigma.block_of(*z) == block && sigma.spin(*z) != eta.spin(*z) && eta.spin(*z) != target)
        .collect()
}

/// One step of the block-preserving pairing without coins. Valid as a
/// coupling when the field is constant inside blocks. The η update reads
/// two words from `rng`; the choice of `y` reads one more when needed.
pub fn llp_step(sigma: &mut SpinConfig, eta: &mut SpinConfig, kernel: &HeatBath, rng: &mut Stream) -> Result<()> {
    check_pair(sigma, eta)?;
    let before = eta.clone();
    let i = step(eta, kernel, rng);
    if sigma.spin(i) == before.spin(i) {
        sigma.set(i, eta.spin(i));
        return Ok(());
    }
    let ys = candidates(sigma, &before, sigma.block_of(i), before.spin(i));
    if ys.is_empty() {
        return Err(Error::Contract("no partner site in the block".into()));
    }
    let y = ys[rng.index(ys.len())];
    sigma.set(y, eta.spin(i));
    Ok(())
}

/// Coupled pair driven by the coin-augmented protocol.
#[derive(Clone, Debug)]
pub struct CouplingAttempt<'a> {
    kernel: &'a HeatBath,
    sigma: SpinConfig,
    eta: SpinConfig,
    eta0: Vec<i8>,
    coins: CoinStack,
    chi: bool,
    first_flip: Vec<Option<u64>>,
    unflipped: usize,
    s_max: Option<u64>,
    n_count: u64,
    t: u64,
    horizon: u64,
    merged_at: Option<u64>,
}

impl<'a> CouplingAttempt<'a> {
    pub fn new(sigma0: SpinConfig, eta0: SpinConfig, coins: CoinStack, horizon: u64, kernel: &'a HeatBath) -> Result<Self> {
        check_pair(&sigma0, &eta0)?;
        if sigma0.n_sites() != kernel.n_sites() {
            return Err(Error::Contract("configuration and kernel disagree on N".into()));
        }
        let n = sigma0.n_sites();
        let merged_at = (sigma0 == eta0).then_some(0);
        Ok(Self {
            kernel,
            eta0: eta0.spins().to_vec(),
            sigma: sigma0,
            eta: eta0,
            coins,
            chi: false,
            first_flip: vec![None; n],
            unflipped: n,
            s_max: None,
            n_count: 0,
            t: 0,
            horizon,
            merged_at,
        })
    }

    pub fn sigma(&self) -> &SpinConfig {
        &self.sigma
    }

    pub fn eta(&self) -> &SpinConfig {
        &self.eta
    }

    /// Steps taken so far.
    pub fn time(&self) -> u64 {
        self.t
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn chi(&self) -> bool {
        self.chi
    }

    pub fn coins(&self) -> &CoinStack {
        &self.coins
    }

    /// `S`, once every site of η has flipped.
    pub fn s_max(&self) -> Option<u64> {
        self.s_max
    }

    /// `𝓝`, counted up to `S` (or up to now if `S` is not reached).
    pub fn n_count(&self) -> u64 {
        self.n_count
    }

    pub fn merged(&self) -> bool {
        self.sigma == self.eta
    }

    /// Whether the next σ update follows η. The LLP branch runs while no
    /// zero coin has shown and coins remain; once the chains agree they
    /// keep moving together, also after the last coin and after the horizon.
    fn follows(&self) -> bool {
        if self.merged() {
            return !self.chi || self.t >= self.horizon;
        }
        self.t < self.horizon && !self.chi && !self.coins.exhausted()
    }

    /// One step. `eta_rng` drives η (two words), `coin_rng` the partner
    /// choice and residual draws, `sigma_rng` σ's independent updates.
    pub fn step(&mut self, eta_rng: &mut Stream, coin_rng: &mut Stream, sigma_rng: &mut Stream) -> Result<()> {
        let follows = self.follows();
        let before = self.eta.clone();
        let i = step(&mut self.eta, self.kernel, eta_rng);
        let new = self.eta.spin(i);
        if self.first_flip[i].is_none() {
            if self.unflipped > 0 {
                self.n_count += 1;
            }
            if new != self.eta0[i] {
                self.first_flip[i] = Some(self.t);
                self.unflipped -= 1;
                if self.unflipped == 0 {
                    self.s_max = Some(self.t);
                }
            }
        }

        if follows {
            if self.sigma.spin(i) == before.spin(i) {
                self.sigma.set(i, new);
            } else {
                let ys = candidates(&self.sigma, &before, self.sigma.block_of(i), before.spin(i));
                if ys.is_empty() {
                    return Err(Error::Contract("no partner site in the block".into()));
                }
                let y = ys[coin_rng.index(ys.len())];
                if self.coins.take() {
                    self.sigma.set(y, new);
                } else {
                    let nu = self.coins.nu();
                    let q = self.kernel.p_to(&before, i, new);
                    let r = self.kernel.p_to(&self.sigma, y, new);
                    // (q∧r - (1-ν)q) / (νq) without the cancellation at small ν
                    let keep = if r >= q { 1.0 } else { 1.0 - (q - r) / (nu * q) };
                    if !(-RESIDUAL_SLACK..=1.0 + RESIDUAL_SLACK).contains(&keep) {
                        return Err(Error::NuViolation { value: keep, nu });
                    }
                    let value = if coin_rng.uniform() < keep { new } else { -new };
                    self.sigma.set(y, value);
                    self.chi = true;
                }
            }
            let coupled_branch = !self.chi;
            if coupled_branch && self.sigma.block_sums() != self.eta.block_sums() {
                return Err(Error::Contract("block magnetizations separated under the pairing".into()));
            }
        } else {
            step(&mut self.sigma, self.kernel, sigma_rng);
        }
        self.t += 1;
        if self.merged_at.is_none() && self.merged() {
            self.merged_at = Some(self.t);
        }
        Ok(())
    }

    /// `{S < N^κ} ∩ {𝓝 ≤ M}` (or `𝓝 < M` when `strict`).
    pub fn flip_event(&self, strict: bool) -> bool {
        let m = self.coins.len() as u64;
        let count_ok = if strict { self.n_count < m } else { self.n_count <= m };
        matches!(self.s_max, Some(s) if s < self.horizon) && count_ok
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttemptOutcome {
    /// 𝒜 ∩ ℬ.
    pub success: bool,
    pub event_a: bool,
    pub event_b: bool,
    /// First entrance of η into B within the horizon.
    pub tau_b_eta: Option<u64>,
    /// First entrance of σ into B within the horizon.
    pub tau_b_sigma: Option<u64>,
    /// σ at `tau_b_sigma`.
    pub sigma_at_hit: Option<SpinConfig>,
    pub merged_state: Option<SpinConfig>,
    pub sigma_final: SpinConfig,
    pub eta_final: SpinConfig,
    pub s_max: Option<u64>,
    pub n_count: u64,
    pub coins_used: usize,
    pub horizon: u64,
}

/// Streams of one attempt.
pub struct AttemptStreams<'s> {
    pub eta: &'s mut Stream,
    pub coins: &'s mut Stream,
    pub sigma: &'s mut Stream,
}

/// Runs the coin-augmented coupling for `N^κ` steps and evaluates 𝒜 and ℬ.
pub fn basic_coupling_attempt(
    sigma0: &SpinConfig,
    eta0: &SpinConfig,
    coins: CoinStack,
    horizon: u64,
    b: &StoppingSpec,
    kernel: &HeatBath,
    rng: AttemptStreams<'_>,
) -> Result<AttemptOutcome> {
    let event_a = coins.all_ones();
    let mut att = CouplingAttempt::new(sigma0.clone(), eta0.clone(), coins, horizon, kernel)?;
    let n = sigma0.n_sites();
    let mut tau_eta = None;
    let mut tau_sigma = None;
    let mut sigma_at_hit = None;
    while att.time() < horizon {
        att.step(rng.eta, rng.coins, rng.sigma)?;
        let t = att.time();
        if tau_eta.is_none() && b.hit(att.eta().block_sums(), n).is_some() {
            tau_eta = Some(t);
        }
        if tau_sigma.is_none() && b.hit(att.sigma().block_sums(), n).is_some() {
            tau_sigma = Some(t);
            sigma_at_hit = Some(att.sigma().clone());
        }
    }
    // τ_B^η ≥ N^κ
    let eta_stays = tau_eta.is_none_or(|t| t >= horizon);
    let event_b = eta_stays && att.flip_event(false);
    let success = event_a && event_b;
    if success && !att.merged() {
        return Err(Error::Contract("successful attempt ended with distinct chains".into()));
    }
    Ok(AttemptOutcome {
        success,
        event_a,
        event_b,
        tau_b_eta: tau_eta,
        tau_b_sigma: tau_sigma,
        sigma_at_hit,
        merged_state: att.merged().then(|| att.sigma().clone()),
        sigma_final: att.sigma().clone(),
        eta_final: att.eta().clone(),
        s_max: att.s_max(),
        n_count: att.n_count(),
        coins_used: att.coins().consumed(),
        horizon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Coupled,
    SigmaHitB,
    Truncated,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Coupled => "coupled",
            Termination::SigmaHitB => "sigma_hit_B",
            Termination::Truncated => "truncated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleRecord {
    /// Time at which the attempt started.
    pub start: u64,
    pub event_a: bool,
    pub event_b: bool,
    /// `Δ < τ_B^σ`; `None` after a successful attempt.
    pub event_d: Option<bool>,
    pub coins_used: usize,
    pub s_max: Option<u64>,
    pub n_count: u64,
}

impl CycleRecord {
    pub fn success(&self) -> bool {
        self.event_a && self.event_b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CycleTrace {
    /// Wait before the first attempt when the start is off the anchor
    /// slice: `(duration, hit B first)`.
    pub pre_entry: Option<(u64, bool)>,
    pub cycles: Vec<CycleRecord>,
    pub termination: Termination,
    pub tau_b: u64,
    pub success_cycle: Option<usize>,
    /// Law of the fresh η start on the anchor slice.
    pub eta_restart: &'static str,
}

impl CycleTrace {
    pub fn coins_consumed(&self) -> usize {
        self.cycles.iter().map(|c| c.coins_used).sum()
    }

    /// Number of indicator terms of the disjoint decomposition that equal 1
    /// on this run: the pre-entry failure term, the success terms
    /// `𝟙_{𝒜^k ℬ^k} Π_{l<k} 𝟙_{𝒟^l}(1 - 𝟙_{𝒜^l ℬ^l})` and the failure terms
    /// `(1 - 𝟙_{𝒟^k})(1 - 𝟙_{𝒜^k ℬ^k}) Π_{l<k} ...`.
    pub fn decomposition_terms(&self) -> usize {
        let mut fired = 0;
        let mut prefix = true;
        if let Some((_, hit)) = self.pre_entry {
            if hit {
                fired += 1;
                prefix = false;
            }
        }
        for c in &self.cycles {
            let ab = c.success();
            let d = c.event_d.unwrap_or(false);
            if prefix && ab {
                fired += 1;
            }
            if prefix && !ab && !d {
                fired += 1;
            }
            prefix = prefix && !ab && d;
        }
        fired
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleResult {
    pub tau_b: u64,
    pub final_state: SpinConfig,
    pub trace: CycleTrace,
}

/// Inputs shared by every cycle run of an ensemble.
pub struct CycleSetup<'a> {
    pub kernel: &'a HeatBath,
    pub partition: &'a Partition,
    pub anchor: &'a MesoState,
    pub b: &'a StoppingSpec,
    pub params: CouplingParams,
    pub cap_cycles: usize,
}

impl CycleSetup<'_> {
    fn validate(&self) -> Result<()> {
        self.b.validate(self.partition)?;
        let anchor = MesoState::on_grid(self.anchor.sums().to_vec(), self.partition)?;
        if self.b.hit(anchor.sums(), anchor.n_sites()).is_some() {
            return Err(Error::Config("the anchor slice lies in B".into()));
        }
        Ok(())
    }
}

/// Hitting time of B for σ started at `sigma0`, generated through the cycle
/// decomposition. The step budget is `b.cap`.
pub fn cycle_run(sigma0: &SpinConfig, setup: &CycleSetup<'_>, streams: &StreamFactory, index: u64) -> Result<CycleResult> {
    setup.validate()?;
    let n = sigma0.n_sites();
    let b = setup.b;
    let cap = b.cap;
    let anchor = Target::slice(setup.anchor);
    let horizon = setup.params.horizon(n);
    let m = setup.params.n_coins(n);
    let mut private = streams.stream(Domain::SigmaPrivate, index, 0);
    let mut sigma = sigma0.clone();
    let mut clock = 0u64;
    let mut trace = CycleTrace {
        pre_entry: None,
        cycles: Vec::new(),
        termination: Termination::Truncated,
        tau_b: cap,
        success_cycle: None,
        eta_restart: "uniform_on_slice",
    };
    let finish = |trace: &mut CycleTrace, term: Termination, tau: u64, state: SpinConfig| {
        trace.termination = term;
        trace.tau_b = tau;
        Ok(CycleResult { tau_b: tau, final_state: state, trace: trace.clone() })
    };

    if !anchor.contains_sums(sigma.block_sums(), n) {
        loop {
            if clock >= cap {
                return finish(&mut trace, Termination::Truncated, cap, sigma);
            }
            step(&mut sigma, setup.kernel, &mut private);
            clock += 1;
            if b.hit(sigma.block_sums(), n).is_some() {
                trace.pre_entry = Some((clock, true));
                return finish(&mut trace, Termination::SigmaHitB, clock, sigma);
            }
            if anchor.contains_sums(sigma.block_sums(), n) {
                trace.pre_entry = Some((clock, false));
                break;
            }
        }
    }

    for k in 0..setup.cap_cycles {
        if clock.saturating_add(horizon) > cap {
            return finish(&mut trace, Termination::Truncated, cap, sigma);
        }
        let kk = k as u64;
        let eta0 = sample_on_slice(setup.partition, setup.anchor, &mut streams.stream(Domain::SliceSample, index, kk))?;
        let mut coin_rng = streams.stream(Domain::Coins, index, kk);
        let coins = CoinStack::draw(m, setup.params.nu, &mut coin_rng);
        let mut eta_rng = streams.stream(Domain::EtaChain, index, kk);
        let start = clock;
        let out = basic_coupling_attempt(
            &sigma,
            &eta0,
            coins,
            horizon,
            b,
            setup.kernel,
            AttemptStreams { eta: &mut eta_rng, coins: &mut coin_rng, sigma: &mut private },
        )?;
        let mut record = CycleRecord {
            start,
            event_a: out.event_a,
            event_b: out.event_b,
            event_d: None,
            coins_used: out.coins_used,
            s_max: out.s_max,
            n_count: out.n_count,
        };

        if out.success {
            if out.tau_b_sigma.is_some_and(|t| t < horizon) {
                return Err(Error::Contract("σ reached B during a successful attempt".into()));
            }
            trace.cycles.push(record);
            trace.success_cycle = Some(k);
            // τ_B^{k,η}: the merged pair keeps following η's stream
            let mut eta = out.eta_final;
            let tau_eta = match out.tau_b_eta {
                Some(t) => t,
                None => {
                    let mut t = horizon;
                    loop {
                        if start + t >= cap {
                            return finish(&mut trace, Termination::Truncated, cap, eta);
                        }
                        step(&mut eta, setup.kernel, &mut eta_rng);
                        t += 1;
                        if b.hit(eta.block_sums(), n).is_some() {
                            break t;
                        }
                    }
                }
            };
            return finish(&mut trace, Termination::Coupled, start + tau_eta, eta);
        }

        if let (Some(t), Some(state)) = (out.tau_b_sigma, out.sigma_at_hit) {
            record.event_d = Some(false);
            trace.cycles.push(record);
            return finish(&mut trace, Termination::SigmaHitB, start + t, state);
        }
        sigma = out.sigma_final;
        clock = start + horizon;
        // Δ = min{t > N^κ : σ(t) on the anchor slice}, raced against τ_B^σ
        loop {
            if clock >= cap {
                trace.cycles.push(record);
                return finish(&mut trace, Termination::Truncated, cap, sigma);
            }
            step(&mut sigma, setup.kernel, &mut private);
            clock += 1;
            if b.hit(sigma.block_sums(), n).is_some() {
                record.event_d = Some(false);
                trace.cycles.push(record);
                return finish(&mut trace, Termination::SigmaHitB, clock, sigma);
            }
            if anchor.contains_sums(sigma.block_sums(), n) {
                record.event_d = Some(true);
                trace.cycles.push(record);
                break;
            }
        }
    }
    finish(&mut trace, Termination::Truncated, clock, sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ProbeOutcome {
    /// η reaches `A ∪ B_δ` within twice the budget.
    pub hit: bool,
    /// `𝒜 ∩ ℬ'` and σ reaches `A ∪ B_δ` within the budget, with
    /// `ℬ' = {S < N^κ} ∩ {𝓝 < M}`. Implies `hit`.
    pub certified: bool,
    pub eta_time: Option<u64>,
    pub sigma_time: Option<u64>,
}

/// Coupling probe of the local hitting time bound. η starts at `eta0` in
/// `A_δ \ A`, σ uniformly on the same slice, and the pair runs under the
/// coin-augmented coupling; after a merge both follow η.
pub fn local_coupling_time_probe(
    eta0: &SpinConfig,
    a: &Target,
    a_delta: &Target,
    budget: u64,
    params: CouplingParams,
    kernel: &HeatBath,
    partition: &Partition,
    streams: &StreamFactory,
    index: u64,
) -> Result<ProbeOutcome> {
    let n = eta0.n_sites();
    if budget == 0 {
        return Err(Error::Config("probe budget must be at least 1".into()));
    }
    let slice = MesoState::new(eta0.block_sums().to_vec(), n);
    let target = |s: &SpinConfig| a.contains_sums(s.block_sums(), n) || !a_delta.contains_sums(s.block_sums(), n);
    let sigma0 = sample_on_slice(partition, &slice, &mut streams.stream(Domain::SliceSample, index, 0))?;
    let mut coin_rng = streams.stream(Domain::Coins, index, 0);
    let coins = CoinStack::draw(params.n_coins(n), params.nu, &mut coin_rng);
    let event_a = coins.all_ones();
    let mut eta_rng = streams.stream(Domain::EtaChain, index, 0);
    let mut private = streams.stream(Domain::SigmaPrivate, index, 0);
    let horizon = params.horizon(n);
    let mut att = CouplingAttempt::new(sigma0, eta0.clone(), coins, horizon, kernel)?;
    let mut eta_time = None;
    let mut sigma_time = None;
    let limit = horizon.max(budget.saturating_mul(2));
    while att.time() < limit {
        let flips_known = att.s_max().is_some() || att.time() >= horizon;
        if flips_known && eta_time.is_some() && (sigma_time.is_some() || att.time() >= budget) {
            break;
        }
        att.step(&mut eta_rng, &mut coin_rng, &mut private)?;
        let t = att.time();
        if eta_time.is_none() && target(att.eta()) {
            eta_time = Some(t);
        }
        if sigma_time.is_none() && target(att.sigma()) {
            sigma_time = Some(t);
        }
    }
    let hit = eta_time.is_some_and(|t| t <= 2 * budget);
    let certified = event_a && att.flip_event(true) && sigma_time.is_some_and(|t| t <= budget);
    if certified && !hit {
        return Err(Error::Contract("certified probe without an η hit".into()));
    }
    Ok(ProbeOutcome { hit, certified, eta_time, sigma_time })
}
