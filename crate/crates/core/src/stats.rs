//! Ensemble estimates and hypothesis tests on hitting times.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::dynamics::{run_until_hit, HittingRecord, StoppingSpec};
use crate::error::{Error, Result};
use crate::model::{HeatBath, SpinConfig};
use crate::rng::{Domain, StreamFactory};

/// Truncated fraction above which a verdict is inconclusive.
pub const MAX_TRUNCATION_RATE: f64 = 0.01;

/// Hitting-time sample with its summary statistics. Truncated runs are
/// counted but excluded from the sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleResult {
    pub samples: Vec<f64>,
    pub start_spec: String,
    pub mean: f64,
    pub variance: f64,
    pub standard_error: f64,
    /// KS distance of `τ / mean` to Exp(1).
    pub ks_statistic: f64,
    pub truncation_count: usize,
}

impl EnsembleResult {
    pub fn from_times(samples: Vec<f64>, truncation_count: usize, start_spec: impl Into<String>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Domain("an ensemble needs at least two completed runs".into()));
        }
        let (mean, variance) = mean_var(&samples);
        let ks_statistic = ks_exp1(&samples)?;
        Ok(Self {
            standard_error: (variance / samples.len() as f64).sqrt(),
            samples,
            start_spec: start_spec.into(),
            mean,
            variance,
            ks_statistic,
            truncation_count,
        })
    }

    pub fn from_records(records: &[HittingRecord], start_spec: impl Into<String>) -> Result<Self> {
        let samples: Vec<f64> = records.iter().filter(|r| !r.truncated).map(|r| r.time as f64).collect();
        Self::from_times(samples, records.iter().filter(|r| r.truncated).count(), start_spec)
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn truncation_rate(&self) -> f64 {
        self.truncation_count as f64 / (self.truncation_count + self.samples.len()) as f64
    }
}

/// Mean and unbiased variance.
pub fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 { x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Exact KS distance between the empirical law of `x` and `cdf`.
pub fn ks_distance<F: Fn(f64) -> f64>(x: &[f64], cdf: F) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Domain("empty sample".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite sample value".into()));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, v) in sorted.iter().enumerate() {
        let f = cdf(*v);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d)
}

/// KS distance of `x / mean(x)` to `1 - e^{-t}`.
pub fn ks_exp1(x: &[f64]) -> Result<f64> {
    let (mean, _) = mean_var(x);
    if !(mean > 0.0) {
        return Err(Error::Domain("sample mean must be positive".into()));
    }
    let scaled: Vec<f64> = x.iter().map(|v| v / mean).collect();
    ks_distance(&scaled, |t| if t <= 0.0 { 0.0 } else { -(-t).exp_m1() })
}

/// Asymptotic one-sample KS critical value `c(α) = sqrt(-ln(α/2)/2)`.
pub fn ks_critical(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

/// Kolmogorov tail `Q_KS(λ) = 2 Σ (-1)^{j-1} e^{-2 j² λ²}`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let term = sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TwoSampleKs {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sample KS test with the effective-size corrected Kolmogorov tail.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<TwoSampleKs> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Domain("empty sample".into()));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n1 - j as f64 / n2).abs());
    }
    let ne = (n1 * n2 / (n1 + n2)).sqrt();
    let p = kolmogorov_q((ne + 0.12 + 0.11 / ne) * d);
    Ok(TwoSampleKs { statistic: d, p_value: p })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Cells after pooling those with expected count below 5.
    pub cells: usize,
}

/// Pearson goodness of fit of counts to cell probabilities.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> Result<ChiSquare> {
    if observed.len() != probs.len() || observed.is_empty() {
        return Err(Error::Contract("observed counts and probabilities differ in length".into()));
    }
    let total: u64 = observed.iter().sum();
    let mass: f64 = probs.iter().sum();
    if total == 0 || (mass - 1.0).abs() > 1e-9 || probs.iter().any(|p| *p < 0.0) {
        return Err(Error::Domain("need positive counts and a probability vector".into()));
    }
    let n = total as f64;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    for (o, p) in observed.iter().zip(probs) {
        if n * p >= 5.0 {
            cells.push((*o as f64, n * p));
        } else {
            pooled.0 += *o as f64;
            pooled.1 += n * p;
        }
    }
    if pooled.1 > 0.0 || pooled.0 > 0.0 {
        if pooled.1 == 0.0 {
            // counts where the model puts no mass
            return Ok(ChiSquare { statistic: f64::INFINITY, dof: cells.len(), p_value: 0.0, cells: cells.len() + 1 });
        }
        cells.push(pooled);
    }
    if cells.len() < 2 {
        return Err(Error::Degenerate("fewer than two cells after pooling".into()));
    }
    let statistic: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = cells.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(ChiSquare { statistic, dof, p_value: dist.sf(statistic), cells: cells.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Inconclusive,
    Reject,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpLawReport {
    pub n: usize,
    pub ks_statistic: f64,
    pub alpha: f64,
    /// `c(α)/√n`.
    pub critical: f64,
    /// Twice the critical value, allowed for the plug-in mean.
    pub widened: f64,
    pub verdict: Verdict,
    pub truncated: usize,
    pub note: &'static str,
}

/// KS test of `τ / mean` against Exp(1). Below the critical value passes,
/// between it and twice it is inconclusive, beyond is a rejection.
pub fn exponential_law_test(samples: &[f64], truncated: usize, alpha: f64) -> Result<ExpLawReport> {
    if samples.len() < 100 {
        return Err(Error::Domain(format!("need at least 100 samples, got {}", samples.len())));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("level {alpha} outside (0, 1)")));
    }
    let d = ks_exp1(samples)?;
    let n = samples.len();
    let critical = ks_critical(alpha) / (n as f64).sqrt();
    let widened = 2.0 * critical;
    let rate = truncated as f64 / (n + truncated) as f64;
    let verdict = if d > widened {
        Verdict::Reject
    } else if d > critical || rate > MAX_TRUNCATION_RATE {
        Verdict::Inconclusive
    } else {
        Verdict::Pass
    };
    Ok(ExpLawReport {
        n,
        ks_statistic: d,
        alpha,
        critical,
        widened,
        verdict,
        truncated,
        note: "normalized by the sample mean; a global KS check at fixed N, not the pointwise limit",
    })
}

/// `(t, empirical survival, e^{-t})` at the sorted normalized sample points.
pub fn survival_table(samples: &[f64]) -> Vec<(f64, f64, f64)> {
    let (mean, _) = mean_var(samples);
    let mut t: Vec<f64> = samples.iter().map(|v| v / mean).collect();
    t.sort_by(f64::total_cmp);
    let n = t.len() as f64;
    t.iter().enumerate().map(|(i, v)| (*v, 1.0 - (i + 1) as f64 / n, (-v).exp())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlatnessReport {
    pub means: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// `max_{i,j} |mean_i / mean_j - 1|`.
    pub max_deviation: f64,
    pub argmax: (usize, usize),
    /// Delta-method standard error of the maximizing ratio.
    pub deviation_se: f64,
    /// Every pairwise difference of means lies within 3 standard errors.
    pub within_3se: bool,
    pub paired: bool,
    pub truncation_rate: f64,
    pub inconclusive: bool,
}

/// Pairwise mean-ratio comparison. With `paired`, sample `k` of every
/// ensemble must come from the same random numbers and covariances enter
/// the standard errors.
pub fn flatness_from_ensembles(ensembles: &[EnsembleResult], paired: bool) -> Result<FlatnessReport> {
    if ensembles.len() < 2 {
        return Err(Error::Domain("flatness needs at least two starts".into()));
    }
    if paired && ensembles.iter().any(|e| e.count() != ensembles[0].count() || e.truncation_count > 0) {
        return Err(Error::Domain("paired comparison needs equal, untruncated ensembles".into()));
    }
    let means: Vec<f64> = ensembles.iter().map(|e| e.mean).collect();
    let ses: Vec<f64> = ensembles.iter().map(|e| e.standard_error).collect();
    let cov = |i: usize, j: usize| -> f64 {
        if !paired {
            return 0.0;
        }
        let (a, b) = (&ensembles[i], &ensembles[j]);
        let n = a.count() as f64;
        a.samples.iter().zip(&b.samples).map(|(x, y)| (x - a.mean) * (y - b.mean)).sum::<f64>() / (n - 1.0) / n
    };
    let mut best = (0, 1);
    let mut max_dev = -1.0f64;
    let mut within = true;
    for i in 0..means.len() {
        for j in 0..means.len() {
            if i == j {
                continue;
            }
            let dev = (means[i] / means[j] - 1.0).abs();
            if dev > max_dev {
                max_dev = dev;
                best = (i, j);
            }
            if i < j {
                let se = (ses[i].powi(2) + ses[j].powi(2) - 2.0 * cov(i, j)).max(0.0).sqrt();
                if (means[i] - means[j]).abs() > 3.0 * se {
                    within = false;
                }
            }
        }
    }
    let (i, j) = best;
    let r = means[i] / means[j];
    let rel_var = (ses[i] / means[i]).powi(2) + (ses[j] / means[j]).powi(2) - 2.0 * cov(i, j) / (means[i] * means[j]);
    let truncated: usize = ensembles.iter().map(|e| e.truncation_count).sum();
    let total: usize = ensembles.iter().map(|e| e.truncation_count + e.count()).sum();
    let truncation_rate = truncated as f64 / total as f64;
    Ok(FlatnessReport {
        means,
        standard_errors: ses,
        max_deviation: max_dev,
        argmax: best,
        deviation_se: r * rel_var.max(0.0).sqrt(),
        within_3se: within,
        paired,
        truncation_rate,
        inconclusive: truncation_rate > MAX_TRUNCATION_RATE,
    })
}

/// Runs one ensemble per start and compares the means. Unpaired runs use
/// streams `(Trajectory, s * count + k)`; paired runs reuse `(Trajectory, k)`
/// for every start.
pub fn flatness_test(
    starts: &[SpinConfig],
    b: &StoppingSpec,
    kernel: &HeatBath,
    streams: &StreamFactory,
    count: u64,
    paired: bool,
) -> Result<(FlatnessReport, Vec<EnsembleResult>)> {
    let ensembles = starts
        .iter()
        .enumerate()
        .map(|(s, start)| {
            let offset = if paired { 0 } else { s as u64 * count };
            let records: Vec<HittingRecord> = (offset..offset + count)
                .into_par_iter()
                .map(|k| run_until_hit(start, b, kernel, &mut streams.trajectory(k)))
                .collect();
            EnsembleResult::from_records(&records, format!("start {s}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((flatness_from_ensembles(&ensembles, paired)?, ensembles))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_se: f64,
}

/// Ordinary least squares of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<Regression> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::Domain("need at least three paired points".into()));
    }
    let (mx, _) = mean_var(x);
    let (my, _) = mean_var(y);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all abscissae coincide".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_se = (sse / (x.len() as f64 - 2.0) / sxx).sqrt();
    Ok(Regression { slope, intercept, r_squared, slope_se })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KramersReport {
    pub regression: Regression,
    pub exponent: f64,
    pub relative_error: f64,
}

/// Regresses `log(mean τ) - log N` on `N` and compares the slope to the
/// landscape exponent.
pub fn kramers_regression(sizes: &[usize], means: &[f64], exponent: f64) -> Result<KramersReport> {
    if sizes.len() < 4 {
        return Err(Error::Domain("need at least four system sizes".into()));
    }
    if means.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::Domain("mean hitting times must be positive".into()));
    }
    let x: Vec<f64> = sizes.iter().map(|n| *n as f64).collect();
    let y: Vec<f64> = sizes.iter().zip(means).map(|(n, m)| m.ln() - (*n as f64).ln()).collect();
    let regression = ols(&x, &y)?;
    let relative_error = (regression.slope / exponent - 1.0).abs();
    Ok(KramersReport { regression, exponent, relative_error })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LaplaceFlatness {
    pub lambdas: Vec<f64>,
    /// `transforms[s][l]`: mean of `e^{-λ_l τ / T}` over start `s`.
    pub transforms: Vec<Vec<f64>>,
    pub standard_errors: Vec<Vec<f64>>,
    pub pooled_mean: f64,
    pub max_deviation: f64,
}

/// Empirical Laplace transforms on a λ grid with `T` the pooled mean.
pub fn laplace_flatness(ensembles: &[EnsembleResult], lambdas: &[f64]) -> Result<LaplaceFlatness> {
    if ensembles.len() < 2 {
        return Err(Error::Domain("need at least two starts".into()));
    }
    if lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Domain("lambda must be nonnegative".into()));
    }
    let total: usize = ensembles.iter().map(|e| e.count()).sum();
    let pooled_mean = ensembles.iter().flat_map(|e| e.samples.iter()).sum::<f64>() / total as f64;
    let mut transforms = Vec::new();
    let mut ses = Vec::new();
    for e in ensembles {
        let (mut row, mut se_row) = (Vec::new(), Vec::new());
        for l in lambdas {
            let v: Vec<f64> = e.samples.iter().map(|t| (-l * t / pooled_mean).exp()).collect();
            let (m, var) = mean_var(&v);
            row.push(m);
            se_row.push((var / v.len() as f64).sqrt());
        }
        transforms.push(row);
        ses.push(se_row);
    }
    let mut max_deviation = 0.0f64;
    for l in 0..lambdas.len() {
        for a in &transforms {
            for b in &transforms {
                max_deviation = max_deviation.max((a[l] / b[l] - 1.0).abs());
            }
        }
    }
    Ok(LaplaceFlatness { lambdas: lambdas.to_vec(), transforms, standard_errors: ses, pooled_mean, max_deviation })
}

/// Mean and standard deviation of the bootstrap distribution of the mean.
pub fn bootstrap_mean(samples: &[f64], reps: usize, streams: &StreamFactory) -> Result<(f64, f64)> {
    if samples.is_empty() || reps < 2 {
        return Err(Error::Domain("need samples and at least two replicates".into()));
    }
    let means: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = streams.stream(Domain::Auxiliary, r, 0);
            (0..samples.len()).map(|_| samples[rng.random_range(0..samples.len())]).sum::<f64>() / samples.len() as f64
        })
        .collect();
    let (m, v) = mean_var(&means);
    Ok((m, v.sqrt()))
}
