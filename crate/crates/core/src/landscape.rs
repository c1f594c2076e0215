//! Mesoscopic free energy, its critical points and the Kramers exponent.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::coarse::{MesoState, Partition};
use crate::error::{Error, Result};
use crate::model::FieldEnvironment;

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 100;
const SCAN_POINTS: usize = 20_001;

/// Per-block cumulant `Λ(t) = mean log cosh(t + β h̃_i)`.
#[derive(Clone, Debug)]
struct Block {
    shifts: Vec<f64>,
    rho: f64,
    hbar: f64,
    fields: Vec<f64>,
}

#[inline]
fn log_cosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

#[inline]
fn sech2(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    4.0 * e / ((1.0 + e) * (1.0 + e))
}

impl Block {
    fn lambda(&self, t: f64) -> f64 {
        self.shifts.iter().map(|a| log_cosh(t + a)).sum::<f64>() / self.shifts.len() as f64
    }

    fn d1(&self, t: f64) -> f64 {
        self.shifts.iter().map(|a| (t + a).tanh()).sum::<f64>() / self.shifts.len() as f64
    }

    fn d2(&self, t: f64) -> f64 {
        self.shifts.iter().map(|a| sech2(t + a)).sum::<f64>() / self.shifts.len() as f64
    }

    /// `t` with `Λ'(t) = y`: safeguarded Newton inside a bracket, bisection
    /// when Newton leaves it or stalls.
    fn invert(&self, y: f64) -> Result<f64> {
        if !(y.abs() < 1.0) {
            return Err(Error::Domain(format!("block magnetization {y} outside (-1, 1)")));
        }
        let amax = self.shifts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let amin = self.shifts.iter().cloned().fold(f64::INFINITY, f64::min);
        let centre = y.atanh();
        let mut lo = centre - amax - 1e-9;
        let mut hi = centre - amin + 1e-9;
        let mut t = centre.clamp(lo, hi);
        for _ in 0..NEWTON_MAX_ITER {
            let f = self.d1(t) - y;
            if f == 0.0 {
                return Ok(t);
            }
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let step = f / self.d2(t);
            let next = t - step;
            let next = if next > lo && next < hi && step.is_finite() { next } else { 0.5 * (lo + hi) };
            if (next - t).abs() <= 1e-14 * (1.0 + t.abs()) {
                return Ok(next);
            }
            t = next;
        }
        // bisection fallback
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.d1(mid) > y {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
                break;
            }
        }
        let t = 0.5 * (lo + hi);
        if (self.d1(t) - y).abs() > NEWTON_TOL {
            return Err(Error::Numerical(format!("Legendre inversion failed at y = {y}")));
        }
        Ok(t)
    }

    /// `I(y) = t y - Λ(t)` at `Λ'(t) = y`.
    fn rate(&self, y: f64) -> Result<f64> {
        let t = self.invert(y)?;
        Ok(t * y - self.lambda(t))
    }
}

/// Free energy `F_{β,N}` over block magnetizations.
#[derive(Clone, Debug)]
pub struct FreeEnergySurface {
    beta: f64,
    n_sites: usize,
    blocks: Vec<Option<Block>>,
    fields: Vec<f64>,
}

/// Minimum or index-one saddle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalKind {
    Minimum,
    Saddle,
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalPoint {
    pub m_star: Vec<f64>,
    pub total_mag: f64,
    pub kind: CriticalKind,
    pub free_energy: f64,
    pub hessian_signature: usize,
    pub gradient_norm: f64,
}

impl FreeEnergySurface {
    /// The cumulant of block `ℓ` uses the centred fields `h̃_i = h_i - h̄_ℓ`.
    pub fn new(env: &FieldEnvironment, partition: &Partition, beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        if partition.n_sites() != env.n_sites() {
            return Err(Error::Contract("partition and environment disagree on N".into()));
        }
        let blocks = (0..partition.n_blocks())
            .map(|l| {
                let members = partition.members(l);
                (!members.is_empty()).then(|| Block {
                    shifts: members.iter().map(|x| beta * partition.htilde()[*x]).collect(),
                    rho: partition.rho()[l],
                    hbar: partition.hbar()[l],
                    fields: members.iter().map(|x| env.field(*x)).collect(),
                })
            })
            .collect();
        Ok(Self { beta, n_sites: env.n_sites(), blocks, fields: env.fields().to_vec() })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.blocks.len() {
            return Err(Error::Contract(format!("expected {} coordinates, got {}", self.blocks.len(), x.len())));
        }
        Ok(())
    }

    /// `Λ_ℓ(t)`; `None` for empty blocks.
    pub fn cumulant(&self, block: usize, t: f64) -> Option<f64> {
        self.blocks[block].as_ref().map(|b| b.lambda(t))
    }

    pub fn cumulant_d1(&self, block: usize, t: f64) -> Option<f64> {
        self.blocks[block].as_ref().map(|b| b.d1(t))
    }

    /// `I_{N,ℓ}(y)`.
    pub fn rate_function(&self, block: usize, y: f64) -> Result<f64> {
        match &self.blocks[block] {
            Some(b) => b.rate(y),
            None => Err(Error::Domain(format!("block {block} is empty"))),
        }
    }

    /// `I''_{N,ℓ}(y) = 1 / Λ''(t(y))`.
    pub fn rate_d2(&self, block: usize, y: f64) -> Result<f64> {
        match &self.blocks[block] {
            Some(b) => Ok(1.0 / b.d2(b.invert(y)?)),
            None => Err(Error::Domain(format!("block {block} is empty"))),
        }
    }

    pub fn free_energy(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        let total: f64 = x.iter().sum();
        let mut f = -0.5 * total * total;
        for (b, xl) in self.blocks.iter().zip(x) {
            if let Some(b) = b {
                f += -xl * b.hbar + b.rho * b.rate(xl / b.rho)? / self.beta;
            }
        }
        Ok(f)
    }

    /// `∂F/∂x_ℓ = -Σx - h̄_ℓ + t_ℓ(x_ℓ/ρ_ℓ)/β`; zero for empty blocks.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let total: f64 = x.iter().sum();
        self.blocks
            .iter()
            .zip(x)
            .map(|(b, xl)| match b {
                Some(b) => Ok(-total - b.hbar + b.invert(xl / b.rho)? / self.beta),
                None => Ok(0.0),
            })
            .collect()
    }

    /// Hessian `-1 + δ_{ℓk} I''_ℓ / (β ρ_ℓ)` over the nonempty blocks.
    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_len(x)?;
        let live: Vec<usize> = (0..self.blocks.len()).filter(|l| self.blocks[*l].is_some()).collect();
        let mut h = DMatrix::from_element(live.len(), live.len(), -1.0);
        for (i, l) in live.iter().enumerate() {
            let b = self.blocks[*l].as_ref().expect("live block");
            h[(i, i)] += 1.0 / (b.d2(b.invert(x[*l] / b.rho)?) * self.beta * b.rho);
        }
        Ok(h)
    }

    /// `G(m) = (1/N) Σ tanh(β(m + h_i)) - m`.
    pub fn reduction(&self, m: f64) -> f64 {
        self.fields.iter().map(|h| (self.beta * (m + h)).tanh()).sum::<f64>() / self.n_sites as f64 - m
    }

    pub fn reduction_d1(&self, m: f64) -> f64 {
        self.beta * self.fields.iter().map(|h| sech2(self.beta * (m + h))).sum::<f64>() / self.n_sites as f64 - 1.0
    }

    /// Block coordinates `x_ℓ = (1/N) Σ_{i∈Λ_ℓ} tanh(β(m + h_i))`.
    pub fn lift(&self, m: f64) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| match b {
                Some(b) => b.fields.iter().map(|h| (self.beta * (m + h)).tanh()).sum::<f64>() / self.n_sites as f64,
                None => 0.0,
            })
            .collect()
    }

    /// `d/dm F(x(m)) = -G(m) (1 + G'(m))` along the lifted curve.
    pub fn reduced_slope(&self, m: f64) -> f64 {
        -self.reduction(m) * (1.0 + self.reduction_d1(m))
    }

    /// Roots of `G` by a grid scan with bisection refinement, lifted to block
    /// coordinates and classified.
    pub fn find_critical_points(&self) -> Result<Vec<CriticalPoint>> {
        let grid: Vec<f64> = (0..SCAN_POINTS).map(|i| -1.0 + 2.0 * i as f64 / (SCAN_POINTS - 1) as f64).collect();
        let values: Vec<f64> = grid.iter().map(|m| self.reduction(*m)).collect();
        let mut roots = Vec::new();
        for i in 0..SCAN_POINTS - 1 {
            let (a, b) = (values[i], values[i + 1]);
            if a == 0.0 {
                roots.push(grid[i]);
            } else if a * b < 0.0 {
                roots.push(self.bisect(grid[i], grid[i + 1]));
            }
        }
        if values[SCAN_POINTS - 1] == 0.0 {
            roots.push(1.0);
        }
        let mut out = Vec::new();
        for m in roots {
            let slope = self.reduction_d1(m);
            if slope == 0.0 {
                continue;
            }
            let x = self.lift(m);
            let hess = self.hessian(&x)?;
            let signature = SymmetricEigen::new(hess).eigenvalues.iter().filter(|e| **e < 0.0).count();
            let kind = if slope < 0.0 { CriticalKind::Minimum } else { CriticalKind::Saddle };
            let expected = if kind == CriticalKind::Minimum { 0 } else { 1 };
            if signature != expected {
                return Err(Error::Numerical(format!(
                    "critical point at m = {m}: reduction says {kind:?}, Hessian has {signature} negative eigenvalues"
                )));
            }
            let gradient_norm = self.gradient(&x)?.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            out.push(CriticalPoint {
                free_energy: self.free_energy(&x)?,
                total_mag: x.iter().sum(),
                m_star: x,
                kind,
                hessian_signature: signature,
                gradient_norm,
            });
        }
        Ok(out)
    }

    fn bisect(&self, mut lo: f64, mut hi: f64) -> f64 {
        let f_lo = self.reduction(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let f = self.reduction(mid);
            if f == 0.0 {
                return mid;
            }
            if (f > 0.0) == (f_lo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 4.0 * f64::EPSILON {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// `log` of the sharp lumped-measure asymptotics, up to `log Z`:
    /// `Σ_ℓ ½ log(I''_ℓ(x_ℓ/ρ_ℓ) / (ρ_ℓ N π / 2)) - N β F(x)`.
    pub fn lumped_measure_asymptotic(&self, m: &MesoState) -> Result<f64> {
        let x = m.coords();
        self.check_len(&x)?;
        let n = self.n_sites as f64;
        let mut out = -n * self.beta * self.free_energy_checked(&x)?;
        for (b, xl) in self.blocks.iter().zip(&x) {
            if let Some(b) = b {
                let i2 = 1.0 / b.d2(b.invert(xl / b.rho)?);
                out += 0.5 * (i2 / (b.rho * n * std::f64::consts::FRAC_PI_2)).ln();
            }
        }
        Ok(out)
    }

    fn free_energy_checked(&self, x: &[f64]) -> Result<f64> {
        for (b, xl) in self.blocks.iter().zip(x) {
            match b {
                Some(b) if xl.abs() >= b.rho => {
                    return Err(Error::Domain(format!("coordinate {xl} on the boundary of [-{0}, {0}]", b.rho)))
                }
                None if *xl != 0.0 => return Err(Error::Domain("nonzero coordinate in an empty block".into())),
                _ => {}
            }
        }
        self.free_energy(x)
    }
}

/// `β [F(z*) - F(m*)]`.
pub fn kramers_exponent(minimum: &CriticalPoint, saddle: &CriticalPoint, surface: &FreeEnergySurface) -> Result<f64> {
    let fz = surface.free_energy(&saddle.m_star)?;
    let fm = surface.free_energy(&minimum.m_star)?;
    if fz <= fm {
        return Err(Error::LandscapeOrdering { saddle: fz, minimum: fm });
    }
    Ok(surface.beta() * (fz - fm))
}

/// Metastable minimum, target minima and the minimax saddle between them.
#[derive(Clone, Debug, Serialize)]
pub struct WellPair {
    pub metastable: CriticalPoint,
    pub stable: CriticalPoint,
    pub saddle: CriticalPoint,
}

/// Picks the shallowest well as metastable and the adjacent saddle toward
/// the nearest deeper well. For equal depths the well with the larger total
/// magnetization is taken as the start.
pub fn well_pair(points: &[CriticalPoint]) -> Result<WellPair> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.total_mag.total_cmp(&b.total_mag));
    let minima: Vec<usize> = (0..sorted.len()).filter(|i| sorted[*i].kind == CriticalKind::Minimum).collect();
    if minima.len() < 2 {
        return Err(Error::Degenerate("the landscape has a single well".into()));
    }
    let f = |i: usize| sorted[i].free_energy;
    let has_deeper = |m: usize| minima.iter().any(|o| *o != m && f(*o) <= f(m) + 1e-12);
    let m = minima
        .iter()
        .cloned()
        .filter(|m| has_deeper(*m))
        .max_by(|a, b| f(*a).total_cmp(&f(*b)).then(sorted[*a].total_mag.total_cmp(&sorted[*b].total_mag)))
        .ok_or_else(|| Error::Degenerate("no well has a deeper neighbour".into()))?;
    // lower of the highest barriers toward the deeper wells
    let mut options = Vec::new();
    for &o in minima.iter().filter(|o| **o != m && f(**o) <= f(m) + 1e-12) {
        let (lo, hi) = if o < m { (o, m) } else { (m, o) };
        let top = (lo + 1..hi)
            .filter(|k| sorted[*k].kind == CriticalKind::Saddle)
            .max_by(|a, b| f(*a).total_cmp(&f(*b)));
        if let Some(s) = top {
            options.push((o, s));
        }
    }
    let (o, s) = options
        .into_iter()
        .min_by(|a, b| f(a.1).total_cmp(&f(b.1)))
        .ok_or_else(|| Error::Degenerate("no saddle separates the wells".into()))?;
    Ok(WellPair { metastable: sorted[m].clone(), stable: sorted[o].clone(), saddle: sorted[s].clone() })
}
