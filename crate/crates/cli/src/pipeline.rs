//! Subcommand pipelines. Each reads the shared [`Context`] and writes its
//! tables into the artifact directory.

use std::sync::Arc;

use rayon::prelude::*;
use rfcw::coarse::{a1_certificate, build_partition, MesoState, Partition};
use rfcw::coupling::{cycle_run, CouplingParams, CycleResult, CycleSetup};
use rfcw::dynamics::{run_ensemble, sample_on_slice, HittingRecord, StoppingSpec, Target};
use rfcw::exact::{ExactChain, WellSets};
use rfcw::landscape::{kramers_exponent, well_pair, FreeEnergySurface, WellPair};
use rfcw::model::{sample_fields, FieldEnvironment, HeatBath, ModelParams, SpinConfig};
use rfcw::rng::{Domain, StreamFactory};
use rfcw::stats::{
    exponential_law_test, flatness_test, laplace_flatness, survival_table, EnsembleResult, Verdict,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{BDefinition, ExperimentConfig, Format, StartRule};
use crate::output::{float, plot_script, Artifacts, Csv};
use crate::CliError;

/// Sizes up to which ε is computed on the enumerated chain.
const EXACT_EPS_MAX_N: usize = 16;
const ALPHA: f64 = 0.01;
const LAMBDA_GRID: [f64; 3] = [0.5, 1.0, 2.0];

pub enum Status {
    Done,
    Inconclusive(String),
}

pub struct Context {
    pub config: ExperimentConfig,
    pub env: FieldEnvironment,
    pub partition: Partition,
    pub kernel: HeatBath,
    pub streams: StreamFactory,
    /// Values derived from the configuration, echoed into the manifest.
    pub resolved: serde_json::Map<String, Value>,
}

impl Context {
    pub fn new(config: ExperimentConfig) -> Result<Self, CliError> {
        let m = &config.model;
        let env = sample_fields(&m.fields, m.n, m.seed)?;
        let partition = build_partition(&env, config.coarse.n)?;
        let (lo, hi) = env.support();
        let c = config.coarse.c.unwrap_or(hi - lo);
        let widest = partition.edges().windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        if widest > c / config.coarse.n as f64 + 1e-12 {
            return Err(CliError::Config(format!(
                "coarse.c = {c}: an interval of width {widest} exceeds C/n = {}",
                c / config.coarse.n as f64
            )));
        }
        let kernel = HeatBath::new(Arc::new(env.clone()), ModelParams::new(m.beta)?)?;
        let mut resolved = serde_json::Map::new();
        resolved.insert("seed".into(), json!(m.seed));
        resolved.insert("coarse_c".into(), json!(c));
        resolved.insert("block_sizes".into(), json!(partition.sizes()));
        Ok(Self { streams: StreamFactory::new(m.seed), config, env, partition, kernel, resolved })
    }

    fn n(&self) -> usize {
        self.config.model.n
    }

    fn surface(&self) -> Result<FreeEnergySurface, CliError> {
        Ok(FreeEnergySurface::new(&self.env, &self.partition, self.config.model.beta)?)
    }

    fn wells(&self) -> Result<WellPair, CliError> {
        Ok(well_pair(&self.surface()?.find_critical_points()?)?)
    }

    fn needs_wells(&self) -> bool {
        !matches!(self.config.targets.start, StartRule::Explicit { .. })
            || matches!(self.config.targets.b, BDefinition::StableSlice | BDefinition::StableBall { .. })
    }

    /// Start slice and the target set B.
    fn targets(&mut self) -> Result<(MesoState, StoppingSpec), CliError> {
        let wells = if self.needs_wells() { Some(self.wells()?) } else { None };
        let start = match &self.config.targets.start {
            StartRule::Metastable => MesoState::nearest(&wells.as_ref().expect("wells").metastable.m_star, &self.partition)?,
            StartRule::Stable => MesoState::nearest(&wells.as_ref().expect("wells").stable.m_star, &self.partition)?,
            StartRule::Explicit { m } => MesoState::nearest(m, &self.partition)?,
        };
        let stable = || MesoState::nearest(&wells.as_ref().expect("wells").stable.m_star, &self.partition);
        let target = match self.config.targets.b {
            BDefinition::StableSlice => Target::slice(&stable()?),
            BDefinition::StableBall { radius } => Target::Ball { center: stable()?.coords(), radius },
            BDefinition::TotalBelow { threshold } => Target::total_below(self.partition.n_blocks(), threshold),
            BDefinition::TotalAbove { threshold } => Target::total_above(self.partition.n_blocks(), threshold),
        };
        let spec = StoppingSpec::single(target, self.config.dynamics.cap)?;
        spec.validate(&self.partition)?;
        if spec.hit(start.sums(), self.n()).is_some() {
            return Err(CliError::Config("the start slice lies in B".into()));
        }
        self.resolved.insert("start_slice".into(), json!(start.sums()));
        self.resolved.insert("b".into(), serde_json::to_value(&spec.targets[0]).expect("target serializes"));
        Ok((start, spec))
    }

    fn start_config(&self, slice: &MesoState, index: u64) -> Result<SpinConfig, CliError> {
        Ok(sample_on_slice(&self.partition, slice, &mut self.streams.stream(Domain::Auxiliary, index, 0))?)
    }

    /// ν from the override, else `3ε` with ε from the enumerated chain for
    /// small N and `β · max block spread` above.
    fn coupling_params(&mut self) -> Result<CouplingParams, CliError> {
        let c = &self.config.coupling;
        let (nu, source, eps) = match c.nu_override {
            Some(nu) => (nu, "override", None),
            None => {
                let (eps, source) = if self.n() <= EXACT_EPS_MAX_N {
                    let chain = ExactChain::build(self.kernel.clone(), self.partition.clone())?;
                    (a1_certificate(&chain), "exact_rate_ratio")
                } else {
                    (self.partition.eps_surrogate(self.config.model.beta), "beta_times_block_spread")
                };
                if 3.0 * eps >= 1.0 {
                    return Err(CliError::Config(format!(
                        "default nu = 3 eps = {} is not below 1; refine the partition or set coupling.nu_override",
                        3.0 * eps
                    )));
                }
                (3.0 * eps, source, Some(eps))
            }
        };
        self.resolved.insert("nu".into(), json!(nu));
        self.resolved.insert("nu_source".into(), json!(source));
        if let Some(eps) = eps {
            self.resolved.insert("epsilon".into(), json!(eps));
        }
        Ok(CouplingParams::new(c.kappa, c.c2, nu)?)
    }
}

fn spins_field(s: &SpinConfig) -> String {
    s.spins().iter().map(|v| if *v > 0 { '+' } else { '-' }).collect()
}

pub fn landscape(ctx: &mut Context, out: &mut Artifacts) -> Result<Status, CliError> {
    let surface = ctx.surface()?;
    let points = surface.find_critical_points()?;
    let mut summary = json!({ "critical_points": points });
    match well_pair(&points) {
        Ok(wells) => {
            let exponent = kramers_exponent(&wells.metastable, &wells.saddle, &surface)?;
            summary["well_pair"] = json!(wells);
            summary["kramers_exponent"] = json!(exponent);
        }
        Err(e) => summary["well_pair_error"] = json!(e.to_string()),
    }
    if ctx.config.wants(Format::Json) {
        out.write_json("landscape.json", &summary)?;
        out.write("partition.json", ctx.partition.to_json().as_bytes())?;
    }
    if ctx.config.wants(Format::Csv) {
        let mut csv = Csv::new(&["m", "free_energy"]);
        for i in 1..400 {
            let m = -1.0 + i as f64 / 200.0;
            if let Ok(f) = surface.free_energy(&surface.lift(m)) {
                csv.row(&[float(m), float(f)]);
            }
        }
        out.write("landscape.csv", &csv.into_bytes())?;
        out.write("plot.gp", plot_script(false, true).as_bytes())?;
    }
    Ok(Status::Done)
}

fn hitting_csv(records: &[HittingRecord], seed: u64, start: &str) -> Vec<u8> {
    let mut csv = Csv::new(&["trajectory_id", "seed", "time", "hit_index", "truncated", "start_meso_state"]);
    for (i, r) in records.iter().enumerate() {
        csv.row(&[
            i.to_string(),
            seed.to_string(),
            r.time.to_string(),
            r.hit_index.map(|h| h.to_string()).unwrap_or_default(),
            r.truncated.to_string(),
            start.to_string(),
        ]);
    }
    csv.into_bytes()
}

#[derive(Serialize)]
struct EnsembleSummary {
    trajectories: usize,
    completed: usize,
    truncated: usize,
    mean: Option<f64>,
    standard_error: Option<f64>,
    ks_statistic: Option<f64>,
    start_config: String,
}

fn summarize(records: &[HittingRecord], start: &SpinConfig) -> Result<(EnsembleSummary, Option<EnsembleResult>), CliError> {
    let completed = records.iter().filter(|r| !r.truncated).count();
    let ensemble = if completed >= 2 { Some(EnsembleResult::from_records(records, spins_field(start))?) } else { None };
    Ok((
        EnsembleSummary {
            trajectories: records.len(),
            completed,
            truncated: records.len() - completed,
            mean: ensemble.as_ref().map(|e| e.mean),
            standard_error: ensemble.as_ref().map(|e| e.standard_error),
            ks_statistic: ensemble.as_ref().map(|e| e.ks_statistic),
            start_config: spins_field(start),
        },
        ensemble,
    ))
}

pub fn simulate(ctx: &mut Context, out: &mut Artifacts) -> Result<Status, CliError> {
    let (slice, spec) = ctx.targets()?;
    let start = ctx.start_config(&slice, 0)?;
    let records = run_ensemble(&start, &spec, &ctx.kernel, &ctx.streams, 0, ctx.config.dynamics.trajectories);
    if ctx.config.wants(Format::Csv) {
        out.write("hitting_times.csv", &hitting_csv(&records, ctx.config.model.seed, &slice.to_field()))?;
    }
    if ctx.config.wants(Format::Json) {
        out.write_json("simulate.json", &summarize(&records, &start)?.0)?;
    }
    Ok(Status::Done)
}

pub fn expfit(ctx: &mut Context, out: &mut Artifacts) -> Result<Status, CliError> {
    let (slice, spec) = ctx.targets()?;
    let start = ctx.start_config(&slice, 0)?;
    let records = run_ensemble(&start, &spec, &ctx.kernel, &ctx.streams, 0, ctx.config.dynamics.trajectories);
    let samples: Vec<f64> = records.iter().filter(|r| !r.truncated).map(|r| r.time as f64).collect();
    let report = exponential_law_test(&samples, records.len() - samples.len(), ALPHA)?;
    if ctx.config.wants(Format::Csv) {
        out.write("hitting_times.csv", &hitting_csv(&records, ctx.config.model.seed, &slice.to_field()))?;
        let mut csv = Csv::new(&["t_over_mean", "empirical_survival", "exp_survival"]);
        for (t, s, e) in survival_table(&samples) {
            csv.row(&[float(t), float(s), float(e)]);
        }
        out.write("survival.csv", &csv.into_bytes())?;
        out.write("plot.gp", plot_script(true, false).as_bytes())?;
    }
    if ctx.config.wants(Format::Json) {
        out.write_json("expfit.json", &json!({ "ensemble": summarize(&records, &start)?.0, "test": report }))?;
    }
    println!(
        "KS distance {:.4} (critical {:.4}, widened {:.4}): {:?}",
        report.ks_statistic, report.critical, report.widened, report.verdict
    );
    Ok(match report.verdict {
        Verdict::Inconclusive => Status::Inconclusive("KS distance between the critical value and twice it, or too many truncations".into()),
        _ => Status::Done,
    })
}

pub fn flatness(ctx: &mut Context, out: &mut Artifacts) -> Result<Status, CliError> {
    let (slice, spec) = ctx.targets()?;
    let starts: Vec<SpinConfig> =
        (0..ctx.config.dynamics.starts as u64).map(|j| ctx.start_config(&slice, j)).collect::<Result<_, _>>()?;
    let paired = ctx.config.dynamics.paired;
    let (report, ensembles) =
        flatness_test(&starts, &spec, &ctx.kernel, &ctx.streams, ctx.config.dynamics.trajectories, paired)?;
    let laplace = laplace_flatness(&ensembles, &LAMBDA_GRID)?;
    if ctx.config.wants(Format::Csv) {
        let mut csv = Csv::new(&["start_id", "start_config", "mean", "standard_error", "completed", "truncated"]);
        for (j, (s, e)) in starts.iter().zip(&ensembles).enumerate() {
            csv.row(&[
                j.to_string(),
                spins_field(s),
                float(e.mean),
                float(e.standard_error),
                e.count().to_string(),
                e.truncation_count.to_string(),
            ]);
        }
        out.write("flatness.csv", &csv.into_bytes())?;
    }
    if ctx.config.wants(Format::Json) {
        out.write_json("flatness.json", &json!({ "flatness": report, "laplace": laplace }))?;
    }
    println!("max pairwise deviation {:.4e} (se {:.2e})", report.max_deviation, report.deviation_se);
    Ok(if report.inconclusive {
        Status::Inconclusive(format!("truncation rate {:.3} above 1%", report.truncation_rate))
    } else {
        Status::Done
    })
}

#[derive(Serialize)]
struct EventRate {
    occurred: usize,
    cycles: usize,
    probability: Option<f64>,
}

fn rate(occurred: usize, cycles: usize) -> EventRate {
    EventRate { occurred, cycles, probability: (cycles > 0).then(|| occurred as f64 / cycles as f64) }
}

pub fn couple(ctx: &mut Context, out: &mut Artifacts) -> Result<Status, CliError> {
    let (slice, spec) = ctx.targets()?;
    let params = ctx.coupling_params()?;
    let start = ctx.start_config(&slice, 0)?;
    let setup = CycleSetup {
        kernel: &ctx.kernel,
        partition: &ctx.partition,
        anchor: &slice,
        b: &spec,
        params,
        cap_cycles: ctx.config.coupling.cap_cycles,
    };
    let runs: Vec<CycleResult> = (0..ctx.config.dynamics.trajectories)
        .into_par_iter()
        .map(|i| cycle_run(&start, &setup, &ctx.streams, i))
        .collect::<Result<_, _>>()?;
    let cycles = runs.iter().flat_map(|r| r.trace.cycles.iter());
    let (mut a, mut b, mut d, mut d_total, mut total) = (0, 0, 0, 0, 0);
    for c in cycles {
        total += 1;
        a += c.event_a as usize;
        b += c.event_b as usize;
        if let Some(v) = c.event_d {
            d_total += 1;
            d += v as usize;
        }
    }
    if ctx.config.wants(Format::Csv) {
        let mut csv =
            Csv::new(&["trajectory_id", "tau_B", "cycles_used", "success_cycle", "coins_consumed_total", "termination"]);
        for (i, r) in runs.iter().enumerate() {
            csv.row(&[
                i.to_string(),
                r.tau_b.to_string(),
                r.trace.cycles.len().to_string(),
                r.trace.success_cycle.map(|k| k.to_string()).unwrap_or_default(),
                r.trace.coins_consumed().to_string(),
                r.trace.termination.as_str().to_string(),
            ]);
        }
        out.write("couple.csv", &csv.into_bytes())?;
    }
    let truncated = runs.iter().filter(|r| r.trace.termination.as_str() == "truncated").count();
    if ctx.config.wants(Format::Json) {
        let taus: Vec<f64> = runs.iter().map(|r| r.tau_b as f64).collect();
        let mean = (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64);
        out.write_json(
            "couple.json",
            &json!({
                "trajectories": runs.len(),
                "truncated": truncated,
                "mean_tau_B": mean,
                "event_A": rate(a, total),
                "event_B": rate(b, total),
                "event_D": rate(d, d_total),
                "horizon": params.horizon(ctx.n()),
                "coins_per_attempt": params.n_coins(ctx.n()),
                "eta_restart": "uniform_on_slice",
            }),
        )?;
    }
    Ok(Status::Done)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Check {
    Green,
    Renewal,
    Uphill,
    Downhill,
    Recurrence,
    All,
}

#[derive(Serialize)]
struct CheckResult {
    value: f64,
    tolerance: Option<f64>,
    pass: bool,
    detail: Value,
}

fn check(value: f64, tolerance: f64, detail: Value) -> CheckResult {
    CheckResult { value, tolerance: Some(tolerance), pass: value <= tolerance, detail }
}

pub fn exact(ctx: &mut Context, out: &mut Artifacts, which: Check) -> Result<Status, CliError> {
    let chain = ExactChain::build(ctx.kernel.clone(), ctx.partition.clone())?;
    let wells = ctx.wells()?;
    let sets = WellSets::build(&chain, &wells.metastable.m_star, &wells.stable.m_star, ctx.config.targets.delta)?;
    ctx.resolved.insert("a_slice".into(), json!(sets.a_slice.sums()));
    ctx.resolved.insert("b_slice".into(), json!(sets.b_slice.sums()));
    let on = |c: Check| which == Check::All || which == c;
    let mut results = serde_json::Map::new();
    let mut put = |name: &str, r: CheckResult| {
        results.insert(name.into(), serde_json::to_value(r).expect("check serializes"));
    };
    put("row_sums", check(chain.row_sum_defect(), 1e-12, Value::Null));
    put("reversibility", check(chain.reversibility_defect(), 1e-12, Value::Null));
    if on(Check::Green) {
        let mut worst = 0.0f64;
        for x in sets.a.states() {
            let r = chain.green_function_check(x, &sets.b)?;
            worst = worst.max(r.max_residual).max(r.reversibility_residual);
        }
        put("green", check(worst, 1e-9, Value::Null));
        let r = chain.mean_hitting_identity(&sets.a, &sets.b)?;
        put("mean_hitting", check(r.residual.max(r.sum_identity_residual), 1e-10, json!({ "lhs": r.lhs, "rhs": r.rhs, "cap": r.cap })));
    }
    if on(Check::Renewal) {
        let mut worst = 0.0f64;
        let mut detail = Vec::new();
        for lambda in LAMBDA_GRID {
            let r = chain.renewal_check(&sets.a, &sets.b, lambda, 1.0)?;
            worst = worst.max(r.residual);
            detail.push(json!({ "lambda": lambda, "lhs": r.lhs, "rhs": r.rhs, "c_lambda": r.c_lambda }));
        }
        put("renewal", check(worst, 1e-10, json!(detail)));
    }
    if on(Check::Uphill) {
        let r = chain.uphill_identities(&sets.a, &sets.b)?;
        put("uphill", check(r.max_residual(), 1e-9, json!({ "uphill_ratio": r.uphill_ratio })));
    }
    if on(Check::Downhill) {
        let r = chain.h_transform_downhill(&sets.a, &sets.b, &sets.a_delta)?;
        // the comparison becomes an identity once μ^h(B_δ) is added to the right side
        put(
            "downhill",
            check(
                r.completed_residual,
                1e-10,
                json!({ "lhs": r.lhs, "rhs": r.rhs, "exterior_mass": r.exterior_mass, "literal_inequality_holds": r.holds }),
            ),
        );
    }
    if on(Check::Recurrence) {
        let p = chain.local_recurrence_probe(&sets.a_delta, &sets.b)?;
        put("recurrence", CheckResult { value: p, tolerance: None, pass: (0.0..=1.0).contains(&p), detail: Value::Null });
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|(_, v)| v["pass"] == json!(false))
        .map(|(k, _)| k.clone())
        .collect();
    out.write_json("exact_checks.json", &results)?;
    for (k, v) in &results {
        println!("{k:<14} {:.3e} {}", v["value"].as_f64().unwrap_or(f64::NAN), if v["pass"] == json!(true) { "ok" } else { "FAIL" });
    }
    if failed.is_empty() {
        Ok(Status::Done)
    } else {
        Err(CliError::Core(rfcw::Error::Numerical(format!("checks above tolerance: {}", failed.join(", ")))))
    }
}
