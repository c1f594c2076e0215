//! Exhaustive small-system computations.
//!
//! States are bit patterns (bit `x` set means spin `x` is up). Transition
//! probabilities are read from the heat-bath table on the fly, so the kernel
//! is never stored. All hitting times use the `τ_C = min{t > 0}` convention:
//! quantities started inside a boundary set are obtained by one explicit step
//! into the solution of the corresponding Dirichlet problem.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::coarse::{MesoState, Partition};
use crate::error::{Error, Result};
use crate::model::{HeatBath, SpinConfig};

/// Largest system that is enumerated.
pub const MAX_SITES: usize = 20;
/// Largest interior handled by the dense solver.
pub const DENSE_LIMIT: usize = 4096;

const CG_TOL: f64 = 1e-13;
const POWER_TOL: f64 = 1e-14;
const POWER_MAX_ITER: usize = 100_000;

/// Interiors up to this size go to the dense solver under [`Solver::Auto`].
pub const AUTO_DENSE: usize = 1100;

/// Linear solver used for Dirichlet problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Solver {
    /// Dense LU for small interiors, conjugate gradients otherwise. The CG
    /// stopping rule is normwise, so solution entries many orders of
    /// magnitude below the largest one only get absolute accuracy.
    #[default]
    Auto,
    /// Jacobi-preconditioned conjugate gradients in the reversible inner product.
    Cg,
    /// Dense LU factorisation.
    Dense,
}

/// Sparse reversible transition structure.
pub trait Kernel {
    fn n_states(&self) -> usize;
    /// Reversible weight of a state (need not be normalised).
    fn weight(&self, s: usize) -> f64;
    /// Calls `f(t, P(s, t))` for every `t` reachable in one step, holding included.
    fn row<F: FnMut(usize, f64)>(&self, s: usize, f: F);
}

/// Set of microscopic states.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateSet {
    mask: Vec<bool>,
    len: usize,
}

impl StateSet {
    pub fn empty(n_states: usize) -> Self {
        Self { mask: vec![false; n_states], len: 0 }
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        let len = mask.iter().filter(|b| **b).count();
        Self { mask, len }
    }

    pub fn from_states(n_states: usize, states: &[usize]) -> Self {
        let mut mask = vec![false; n_states];
        for s in states {
            mask[*s] = true;
        }
        Self::from_mask(mask)
    }

    #[inline]
    pub fn contains(&self, s: usize) -> bool {
        self.mask[s]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn states(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|s| self.mask[*s]).collect()
    }

    pub fn complement(&self) -> Self {
        Self::from_mask(self.mask.iter().map(|b| !b).collect())
    }

    pub fn union(&self, other: &Self) -> Self {
        Self::from_mask(self.mask.iter().zip(&other.mask).map(|(a, b)| *a || *b).collect())
    }

    pub fn minus(&self, other: &Self) -> Self {
        Self::from_mask(self.mask.iter().zip(&other.mask).map(|(a, b)| *a && !*b).collect())
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        !self.mask.iter().zip(&other.mask).any(|(a, b)| *a && *b)
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.mask.iter().zip(&other.mask).all(|(a, b)| !*a || *b)
    }

    /// Image under the global spin flip.
    pub fn flipped(&self, n_sites: usize) -> Self {
        let full = (1usize << n_sites) - 1;
        let mut mask = vec![false; self.mask.len()];
        for s in self.states() {
            mask[s ^ full] = true;
        }
        Self::from_mask(mask)
    }
}

/// Enumerated chain with normalised Gibbs measure and slice index.
#[derive(Clone, Debug)]
pub struct ExactChain {
    kernel: HeatBath,
    partition: Partition,
    n_sites: usize,
    mu: Vec<f64>,
    slice_of: Vec<u32>,
    slices: Vec<MesoState>,
    lookup: HashMap<Vec<i64>, usize>,
    members: Vec<Vec<u32>>,
    solver: Solver,
}

impl Kernel for ExactChain {
    fn n_states(&self) -> usize {
        self.mu.len()
    }

    fn weight(&self, s: usize) -> f64 {
        self.mu[s]
    }

    #[inline]
    fn row<F: FnMut(usize, f64)>(&self, s: usize, mut f: F) {
        let n = self.n_sites;
        let inv = 1.0 / n as f64;
        let total = 2 * s.count_ones() as i64 - n as i64;
        let mut stay = 0.0;
        for x in 0..n {
            let up = s >> x & 1 == 1;
            let p = self.kernel.p_plus_others(x, total - if up { 1 } else { -1 });
            let (go, keep) = if up { (1.0 - p, p) } else { (p, 1.0 - p) };
            stay += keep;
            f(s ^ (1 << x), go * inv);
        }
        f(s, stay * inv);
    }
}

impl ExactChain {
    pub fn build(kernel: HeatBath, partition: Partition) -> Result<Self> {
        let n = kernel.n_sites();
        if n > MAX_SITES {
            return Err(Error::Capacity { n, cap: MAX_SITES });
        }
        if partition.n_sites() != n {
            return Err(Error::Contract("partition and kernel disagree on N".into()));
        }
        let n_states = 1usize << n;
        let beta = kernel.params().beta;
        let h = kernel.env().fields().to_vec();
        let mut log_w = vec![0.0; n_states];
        for (s, lw) in log_w.iter_mut().enumerate() {
            let total = 2 * s.count_ones() as i64 - n as i64;
            let field: f64 = (0..n).map(|x| if s >> x & 1 == 1 { h[x] } else { -h[x] }).sum();
            *lw = beta * ((total * total) as f64 / (2.0 * n as f64) + field);
        }
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut mu: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|m| *m /= z);

        let n_blocks = partition.n_blocks();
        let mut masks = vec![0usize; n_blocks];
        for x in 0..n {
            masks[partition.block_of(x)] |= 1 << x;
        }
        let sizes: Vec<i64> = partition.sizes().iter().map(|s| *s as i64).collect();
        let key = |s: usize| -> Vec<i64> {
            (0..n_blocks).map(|b| 2 * (s & masks[b]).count_ones() as i64 - sizes[b]).collect()
        };
        let mut ordered: BTreeMap<Vec<i64>, Vec<u32>> = BTreeMap::new();
        for s in 0..n_states {
            ordered.entry(key(s)).or_default().push(s as u32);
        }
        let mut slice_of = vec![0u32; n_states];
        let mut slices = Vec::with_capacity(ordered.len());
        let mut lookup = HashMap::with_capacity(ordered.len());
        let mut members = Vec::with_capacity(ordered.len());
        for (id, (k, list)) in ordered.into_iter().enumerate() {
            for s in &list {
                slice_of[*s as usize] = id as u32;
            }
            slices.push(MesoState::new(k.clone(), n));
            lookup.insert(k, id);
            members.push(list);
        }
        let chain = Self { kernel, partition, n_sites: n, mu, slice_of, slices, lookup, members, solver: Solver::Auto };
        let defect = chain.reversibility_defect();
        if defect > 1e-12 {
            return Err(Error::Numerical(format!("kernel is not reversible: relative defect {defect:e}")));
        }
        Ok(chain)
    }

    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }

    pub fn solver(&self) -> Solver {
        self.solver
    }

    pub fn kernel(&self) -> &HeatBath {
        &self.kernel
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_states(&self) -> usize {
        self.mu.len()
    }

    #[inline]
    pub fn mu(&self, s: usize) -> f64 {
        self.mu[s]
    }

    pub fn mu_vec(&self) -> &[f64] {
        &self.mu
    }

    pub fn mu_of(&self, set: &StateSet) -> f64 {
        set.states().iter().map(|s| self.mu[*s]).sum()
    }

    /// `P(s, s^(x))`.
    #[inline]
    pub fn rate(&self, s: usize, x: usize) -> f64 {
        let n = self.n_sites;
        let total = 2 * s.count_ones() as i64 - n as i64;
        let up = s >> x & 1 == 1;
        let p = self.kernel.p_plus_others(x, total - if up { 1 } else { -1 });
        if up {
            (1.0 - p) / n as f64
        } else {
            p / n as f64
        }
    }

    /// `P(s, s)`.
    pub fn hold(&self, s: usize) -> f64 {
        let mut out = 0.0;
        self.row(s, |t, p| {
            if t == s {
                out = p;
            }
        });
        out
    }

    /// `P(s, t)` for arbitrary states.
    pub fn prob(&self, s: usize, t: usize) -> f64 {
        let d = s ^ t;
        if d == 0 {
            self.hold(s)
        } else if d.is_power_of_two() {
            self.rate(s, d.trailing_zeros() as usize)
        } else {
            0.0
        }
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    #[inline]
    pub fn slice_of(&self, s: usize) -> usize {
        self.slice_of[s] as usize
    }

    pub fn slice(&self, id: usize) -> &MesoState {
        &self.slices[id]
    }

    pub fn slices(&self) -> &[MesoState] {
        &self.slices
    }

    pub fn slice_id(&self, m: &MesoState) -> Option<usize> {
        self.lookup.get(m.sums()).copied()
    }

    pub fn slice_members(&self, id: usize) -> &[u32] {
        &self.members[id]
    }

    pub fn config(&self, s: usize) -> SpinConfig {
        SpinConfig::from_bits(s as u64, self.partition.block_map().clone(), self.partition.n_blocks())
    }

    pub fn state_of(&self, sigma: &SpinConfig) -> usize {
        sigma.to_bits() as usize
    }

    /// Union of the slices whose meso state satisfies `pred`.
    pub fn set_of_slices<F: Fn(&MesoState) -> bool>(&self, pred: F) -> StateSet {
        let keep: Vec<bool> = self.slices.iter().map(pred).collect();
        StateSet::from_mask((0..self.n_states()).map(|s| keep[self.slice_of(s)]).collect())
    }

    pub fn slice_set(&self, id: usize) -> StateSet {
        let list: Vec<usize> = self.members[id].iter().map(|s| *s as usize).collect();
        StateSet::from_states(self.n_states(), &list)
    }

    /// Largest `|Σ_t P(s,t) - 1|`.
    pub fn row_sum_defect(&self) -> f64 {
        (0..self.n_states())
            .map(|s| {
                let mut sum = 0.0;
                self.row(s, |_, p| sum += p);
                (sum - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Largest relative defect of `μ(s)P(s,t) = μ(t)P(t,s)` over all edges.
    pub fn reversibility_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..self.n_states() {
            for x in 0..self.n_sites {
                let t = s ^ (1 << x);
                if t < s {
                    continue;
                }
                let a = self.mu[s] * self.rate(s, x);
                let b = self.mu[t] * self.rate(t, x);
                let scale = a.abs().max(b.abs());
                if scale > 0.0 {
                    worst = worst.max((a - b).abs() / scale);
                }
            }
        }
        worst
    }

    /// `(P f)(s)`.
    pub fn apply(&self, f: &[f64], s: usize) -> f64 {
        let mut out = 0.0;
        self.row(s, |t, p| out += p * f[t]);
        out
    }

    /// `(L f)(s) = f(s) - (P f)(s)`.
    pub fn generator(&self, f: &[f64], s: usize) -> f64 {
        f[s] - self.apply(f, s)
    }

    /// Dirichlet form `½ Σ μ(s)P(s,t)(f(s) - f(t))²`.
    pub fn dirichlet_form(&self, f: &[f64]) -> f64 {
        let mut sum = 0.0;
        for s in 0..self.n_states() {
            self.row(s, |t, p| {
                let d = f[s] - f[t];
                sum += self.mu[s] * p * d * d;
            });
        }
        0.5 * sum
    }

    /// Solves `u = source + z P u` on `interior` with `u = boundary` elsewhere.
    pub fn dirichlet(&self, interior: &StateSet, boundary: &[f64], source: &[f64], z: f64) -> Result<Vec<f64>> {
        solve_dirichlet(self, interior, boundary, source, z, self.solver)
    }

    /// One-step extension `z Σ_t P(s,t) v(t)` used at boundary states.
    fn step_into(&self, v: &[f64], s: usize, z: f64) -> f64 {
        z * self.apply(v, s)
    }

    /// Equilibrium potential, capacity and the distribution `ν_A`.
    pub fn equilibrium_potential(&self, a: &StateSet, b: &StateSet) -> Result<PotentialSolution> {
        check_pair(a, b)?;
        let h = self.hitting_probability(a, b)?;
        let lh: Vec<f64> = (0..self.n_states()).map(|s| self.generator(&h, s)).collect();
        let cap: f64 = a.states().iter().map(|s| self.mu[*s] * lh[*s]).sum();
        if cap <= 0.0 {
            return Err(Error::Connectivity("zero capacity between the two sets".into()));
        }
        let mut nu_a = vec![0.0; self.n_states()];
        for s in a.states() {
            nu_a[s] = self.mu[s] * lh[s] / cap;
        }
        let interior = a.union(b).complement();
        let harmonic_residual = interior.states().iter().map(|s| lh[*s].abs()).fold(0.0, f64::max);
        Ok(PotentialSolution { h, lh, cap, nu_a, harmonic_residual })
    }

    /// `h_{A,B}`: 1 on A, 0 on B, `P_s(τ_A < τ_B)` elsewhere.
    pub fn hitting_probability(&self, a: &StateSet, b: &StateSet) -> Result<Vec<f64>> {
        check_pair(a, b)?;
        let boundary: Vec<f64> = (0..self.n_states()).map(|s| if a.contains(s) { 1.0 } else { 0.0 }).collect();
        let zero = vec![0.0; self.n_states()];
        self.dirichlet(&a.union(b).complement(), &boundary, &zero, 1.0)
    }

    /// `P_s(τ_A < τ_B)` with `τ > 0` at every state.
    pub fn hitting_probability_strict(&self, a: &StateSet, b: &StateSet) -> Result<Vec<f64>> {
        let h = self.hitting_probability(a, b)?;
        Ok((0..self.n_states())
            .map(|s| if a.contains(s) || b.contains(s) { self.apply(&h, s) } else { h[s] })
            .collect())
    }

    /// `w_{A,B}`: solves `L w = h_{A,B}` off `A ∪ B`, zero on `A ∪ B`.
    pub fn w_function(&self, a: &StateSet, b: &StateSet, h: &[f64]) -> Result<Vec<f64>> {
        let interior = a.union(b).complement();
        let zero = vec![0.0; self.n_states()];
        self.dirichlet(&interior, &zero, h, 1.0)
    }

    /// `E_s τ_B` with `τ > 0`, for every state.
    pub fn mean_hitting_vector(&self, b: &StateSet) -> Result<Vec<f64>> {
        if b.is_empty() {
            return Err(Error::Contract("target set is empty".into()));
        }
        let n = self.n_states();
        let u = self.dirichlet(&b.complement(), &vec![0.0; n], &vec![1.0; n], 1.0)?;
        Ok((0..n).map(|s| if b.contains(s) { 1.0 + self.apply(&u, s) } else { u[s] }).collect())
    }

    /// `E_start τ_B` for a distribution given as `(state, mass)` pairs.
    pub fn mean_hitting(&self, start: &[(usize, f64)], b: &StateSet) -> Result<f64> {
        if start.iter().any(|(s, w)| *w > 0.0 && b.contains(*s)) {
            return Err(Error::Contract("start distribution charges the target".into()));
        }
        let u = self.mean_hitting_vector(b)?;
        Ok(start.iter().map(|(s, w)| w * u[*s]).sum())
    }

    /// Both sides of the mean hitting time formula and of its
    /// multiplied-out form `Σ_{y∉B} μ(y)h(y) = Σ_{x∈A} μ(x)Lh(x)E_xτ_B`.
    pub fn mean_hitting_identity(&self, a: &StateSet, b: &StateSet) -> Result<MeanHittingReport> {
        let pot = self.equilibrium_potential(a, b)?;
        let u = self.mean_hitting_vector(b)?;
        let lhs: f64 = a.states().iter().map(|s| pot.nu_a[*s] * u[*s]).sum();
        let mass: f64 = (0..self.n_states()).filter(|s| !b.contains(*s)).map(|s| self.mu[s] * pot.h[s]).sum();
        let rhs = mass / pot.cap;
        let weighted: f64 = a.states().iter().map(|s| self.mu[*s] * pot.lh[*s] * u[*s]).sum();
        Ok(MeanHittingReport {
            lhs,
            rhs,
            residual: rel(lhs, rhs),
            sum_identity_residual: rel(mass, weighted),
            cap: pot.cap,
        })
    }

    /// Green's function check for `A = {x}`: the row `g_B(x, ·)` from a
    /// transposed direct solve against `μ(y) h_{x,B}(y) / cap(x,B)`.
    pub fn green_function_check(&self, x: usize, b: &StateSet) -> Result<GreenReport> {
        if b.contains(x) {
            return Err(Error::Contract("x lies in B".into()));
        }
        let single = StateSet::from_states(self.n_states(), &[x]);
        let pot = self.equilibrium_potential(&single, b)?;
        let interior = b.complement();
        let idx = interior.states();
        let row = dense_green(self, &interior, x, true)?;
        let col = dense_green(self, &interior, x, false)?;
        let mut worst = 0.0f64;
        let mut reversibility = 0.0f64;
        for (i, y) in idx.iter().enumerate() {
            let predicted = self.mu[*y] * pot.h[*y] / pot.cap;
            worst = worst.max((predicted / row[i] - 1.0).abs());
            let l = self.mu[*y] * col[i];
            let r = self.mu[x] * row[i];
            reversibility = reversibility.max(rel(l, r));
        }
        let outside_b_zero = b.states().iter().all(|y| self.mu[*y] * pot.h[*y] == 0.0);
        Ok(GreenReport { max_residual: worst, reversibility_residual: reversibility, zero_on_b: outside_b_zero })
    }

    /// `ν_{A,B}(σ) ∝ μ(σ) P_σ(τ_B < τ_A)` from the `h_{B,A}` solve.
    pub fn last_exit_biased(&self, a: &StateSet, b: &StateSet) -> Result<Vec<f64>> {
        let h_ba = self.hitting_probability(b, a)?;
        let mut nu = vec![0.0; self.n_states()];
        let mut total = 0.0;
        for s in a.states() {
            nu[s] = self.mu[s] * self.apply(&h_ba, s);
            total += nu[s];
        }
        if total <= 0.0 {
            return Err(Error::Degenerate("every escape probability from A is zero".into()));
        }
        nu.iter_mut().for_each(|v| *v /= total);
        Ok(nu)
    }

    /// `R_s(λ) = E_s z^{τ_B}` with `z = e^{-λ/T}`, for every state.
    pub fn laplace_vector(&self, b: &StateSet, lambda: f64, t: f64) -> Result<Vec<f64>> {
        check_lambda(lambda, t)?;
        let z = (-lambda / t).exp();
        let n = self.n_states();
        let boundary: Vec<f64> = (0..n).map(|s| if b.contains(s) { 1.0 } else { 0.0 }).collect();
        let u = self.dirichlet(&b.complement(), &boundary, &vec![0.0; n], z)?;
        Ok((0..n).map(|s| if b.contains(s) { self.step_into(&u, s, z) } else { u[s] }).collect())
    }

    pub fn laplace_transform(&self, start: usize, b: &StateSet, lambda: f64, t: f64) -> Result<f64> {
        Ok(self.laplace_vector(b, lambda, t)?[start])
    }

    /// Return kernel `K_λ(σ, σ') = E_σ[z^{τ_A}; τ_A < τ_B, σ(τ_A) = σ']` on A.
    pub fn return_kernel(&self, a: &StateSet, b: &StateSet, lambda: f64, t: f64) -> Result<DMatrix<f64>> {
        check_pair(a, b)?;
        check_lambda(lambda, t)?;
        let z = (-lambda / t).exp();
        let states = a.states();
        let n = self.n_states();
        let interior = a.union(b).complement();
        let zero = vec![0.0; n];
        let mut k = DMatrix::zeros(states.len(), states.len());
        let mut boundary = vec![0.0; n];
        for (j, target) in states.iter().enumerate() {
            boundary[*target] = 1.0;
            let v = self.dirichlet(&interior, &boundary, &zero, z)?;
            boundary[*target] = 0.0;
            for (i, s) in states.iter().enumerate() {
                k[(i, j)] = self.step_into(&v, *s, z);
            }
        }
        Ok(k)
    }

    /// Left Perron vector `ρ_λ` of the return kernel and its eigenvalue `C(λ)`.
    pub fn rho_lambda(&self, a: &StateSet, b: &StateSet, lambda: f64, t: f64) -> Result<RhoLambda> {
        let kernel = self.return_kernel(a, b, lambda, t)?;
        let states = a.states();
        let (rho, c_lambda, iterations) = perron_left(&kernel)?;
        Ok(RhoLambda { states, rho, c_lambda, kernel, iterations })
    }

    /// Both sides of the renewal equation for the Laplace transform
    /// started from `ρ_λ`, each from its own solves.
    pub fn renewal_check(&self, a: &StateSet, b: &StateSet, lambda: f64, t: f64) -> Result<RenewalReport> {
        let rl = self.rho_lambda(a, b, lambda, t)?;
        let z = (-lambda / t).exp();
        let r = self.laplace_vector(b, lambda, t)?;
        let lhs: f64 = rl.states.iter().zip(&rl.rho).map(|(s, p)| p * r[*s]).sum();

        let n = self.n_states();
        let boundary: Vec<f64> = (0..n).map(|s| if b.contains(s) { 1.0 } else { 0.0 }).collect();
        let v = self.dirichlet(&a.union(b).complement(), &boundary, &vec![0.0; n], z)?;
        let numerator: f64 = rl.states.iter().zip(&rl.rho).map(|(s, p)| p * self.step_into(&v, *s, z)).sum();
        let rhs = numerator / (1.0 - rl.c_lambda);

        // T_λ decomposition, reported as a measured residual only
        let tau_b = self.mean_hitting_vector(b)?;
        let tau_ab = self.mean_hitting_vector(&a.union(b))?;
        let h_ba = self.hitting_probability_strict(b, a)?;
        let t_lambda: f64 = rl.states.iter().zip(&rl.rho).map(|(s, p)| p * tau_b[*s]).sum();
        let e_ab: f64 = rl.states.iter().zip(&rl.rho).map(|(s, p)| p * tau_ab[*s]).sum();
        let escape: f64 = rl.states.iter().zip(&rl.rho).map(|(s, p)| p * h_ba[*s]).sum();
        Ok(RenewalReport {
            lambda,
            lhs,
            rhs,
            residual: rel(lhs, rhs),
            c_lambda: rl.c_lambda,
            t_lambda,
            t_lambda_ratio_residual: rel(t_lambda, e_ab / escape),
        })
    }

    /// Three last-step identities, summed over `A` with weight `μ`, and the
    /// uphill ratio at `λ = 0`:
    /// `E[τ_A; τ_A < τ_B]` against `Σ_A μ P h_{A,B} + Σ μ h_{A,B}²`,
    /// `E τ_{A∪B}` against `μ(A) + Σ μ h_{A,B}` and
    /// `E[τ_B; τ_B < τ_A]` against `Σ_A μ P h_{B,A} + Σ μ h_{A,B} h_{B,A}`,
    /// the plain sums running over states outside `A ∪ B`.
    pub fn uphill_identities(&self, a: &StateSet, b: &StateSet) -> Result<UphillReport> {
        check_pair(a, b)?;
        let n = self.n_states();
        let off = a.union(b).complement();
        let h_ab = self.hitting_probability(a, b)?;
        let h_ba = self.hitting_probability(b, a)?;
        let w_ab = self.w_function(a, b, &h_ab)?;
        let w_ba = self.w_function(b, a, &h_ba)?;
        let t_ab = self.dirichlet(&off, &vec![0.0; n], &vec![1.0; n], 1.0)?;

        // E_σ[τ_A 1{τ_A<τ_B}] for σ ∈ A, by one explicit step
        let conditional = |target: &StateSet, h: &[f64], w: &[f64], s: usize| {
            let mut out = 0.0;
            self.row(s, |t, p| {
                if target.contains(t) {
                    out += p;
                } else if off.contains(t) {
                    out += p * (h[t] + w[t]);
                }
            });
            out
        };
        let a_states = a.states();
        let mut lhs7 = 0.0;
        let mut lhs8 = 0.0;
        let mut lhs9 = 0.0;
        let mut stay = 0.0;
        let mut escape = 0.0;
        let mut mu_a = 0.0;
        for &s in &a_states {
            let m = self.mu[s];
            mu_a += m;
            lhs7 += m * conditional(a, &h_ab, &w_ab, s);
            lhs9 += m * conditional(b, &h_ba, &w_ba, s);
            let mut e = 1.0;
            self.row(s, |t, p| {
                if off.contains(t) {
                    e += p * t_ab[t];
                }
            });
            lhs8 += m * e;
            stay += m * self.apply(&h_ab, s);
            escape += m * self.apply(&h_ba, s);
        }
        let mut sq = 0.0;
        let mut lin = 0.0;
        let mut cross = 0.0;
        for s in off.states() {
            let m = self.mu[s];
            sq += m * h_ab[s] * h_ab[s];
            lin += m * h_ab[s];
            cross += m * h_ab[s] * h_ba[s];
        }
        let rhs7 = stay + sq;
        let rhs8 = mu_a + lin;
        let rhs9 = escape + cross;

        let rho = self.rho_lambda(a, b, 0.0, 1.0)?;
        let mut up = 0.0;
        let mut down = 0.0;
        for (s, p) in rho.states.iter().zip(&rho.rho) {
            up += p * conditional(b, &h_ba, &w_ba, *s);
            down += p * conditional(a, &h_ab, &w_ab, *s);
        }
        Ok(UphillReport {
            return_time: (lhs7, rhs7, rel(lhs7, rhs7)),
            exit_time: (lhs8, rhs8, rel(lhs8, rhs8)),
            escape_time: (lhs9, rhs9, rel(lhs9, rhs9)),
            uphill_ratio: up / down,
        })
    }

    /// Downhill lemma quantities with `B_δ` the complement of `A_δ`.
    pub fn h_transform_downhill(&self, a: &StateSet, b: &StateSet, a_delta: &StateSet) -> Result<DownhillReport> {
        check_pair(a, b)?;
        if !a.is_subset(a_delta) || !a_delta.is_disjoint(b) {
            return Err(Error::Contract("need A ⊂ A_δ and A_δ ∩ B = ∅".into()));
        }
        let n = self.n_states();
        let b_delta = a_delta.complement();
        let shell = a_delta.minus(a);
        let h = self.hitting_probability(a, b)?;
        if shell.states().iter().any(|s| h[*s] <= 0.0) {
            return Err(Error::Domain("h vanishes on A_δ".into()));
        }
        let w = self.w_function(a, b, &h)?;
        // f(η) = E_η[τ_A 1{τ_A<τ_B}] with τ > 0 at every η
        let off = a.union(b).complement();
        let f: Vec<f64> = (0..n)
            .map(|s| {
                if off.contains(s) {
                    return w[s];
                }
                let mut out = 0.0;
                self.row(s, |t, p| {
                    if a.contains(t) {
                        out += p;
                    } else if off.contains(t) {
                        out += p * (h[t] + w[t]);
                    }
                });
                out
            })
            .collect();

        // left side: harmonic extension of f on B_δ killed at A, stepped from A
        let boundary: Vec<f64> = (0..n).map(|s| if b_delta.contains(s) { f[s] } else { 0.0 }).collect();
        let g = self.dirichlet(&shell, &boundary, &vec![0.0; n], 1.0)?;
        let lhs: f64 = a.states().iter().map(|s| self.mu[*s] * self.apply(&g, *s)).sum();

        // reversed form: Σ_{η∈B_δ} μ(η) P_η(τ_A < τ_{B_δ}) f(η)
        let back = self.hitting_probability_strict(a, &b_delta)?;
        let reversed: f64 = b_delta.states().iter().map(|s| self.mu[*s] * back[*s] * f[*s]).sum();

        // h-transformed chain on {h > 0}
        let ht = HTransform::new(self, &h);
        let (row_defect, rev_defect) = ht.defects(&off);
        let domain = StateSet::from_mask(h.iter().map(|v| *v > 0.0).collect());
        let bd_h = b_delta.minus(&b);
        let boundary: Vec<f64> = (0..n).map(|s| if b_delta.contains(s) { 1.0 } else { 0.0 }).collect();
        let esc = solve_dirichlet(&ht, &shell, &boundary, &vec![0.0; n], 1.0, self.solver)?;
        let rhs: f64 = shell.states().iter().map(|s| ht.weight(*s) * esc[*s]).sum();
        let exterior: f64 = bd_h.states().iter().filter(|s| domain.contains(**s)).map(|s| ht.weight(*s)).sum();
        Ok(DownhillReport {
            lhs,
            reversed,
            reversal_residual: rel(lhs, reversed),
            rhs,
            holds: lhs <= rhs,
            exterior_mass: exterior,
            completed_residual: rel(lhs, rhs + exterior),
            h_row_sum_defect: row_defect,
            h_reversibility_defect: rev_defect,
        })
    }

    /// `max_{σ, σ' ∈ A_δ} P_σ(τ_B < τ_{S[m(σ')]})`.
    pub fn local_recurrence_probe(&self, a_delta: &StateSet, b: &StateSet) -> Result<f64> {
        if !a_delta.is_disjoint(b) {
            return Err(Error::Contract("A_δ meets B".into()));
        }
        let mut slice_ids: Vec<usize> = a_delta.states().iter().map(|s| self.slice_of(*s)).collect();
        slice_ids.sort_unstable();
        slice_ids.dedup();
        let mut worst = 0.0f64;
        for id in slice_ids {
            let target = self.slice_set(id);
            let esc = self.hitting_probability_strict(b, &target)?;
            for s in a_delta.states() {
                worst = worst.max(esc[s]);
            }
        }
        Ok(worst)
    }
}

/// Sets built around a pair of wells: `A` is the slice nearest the
/// metastable minimum, `B` the slice nearest the stable one and `A_δ` every
/// slice within l1 distance `δ` of `A`.
#[derive(Clone, Debug)]
pub struct WellSets {
    pub a: StateSet,
    pub b: StateSet,
    pub a_delta: StateSet,
    pub a_slice: MesoState,
    pub b_slice: MesoState,
}

impl WellSets {
    pub fn build(chain: &ExactChain, metastable: &[f64], stable: &[f64], delta: f64) -> Result<Self> {
        let nearest = |target: &[f64]| -> Result<usize> {
            if target.len() != chain.partition().n_blocks() {
                return Err(Error::Contract("minimum and partition disagree on n".into()));
            }
            let dist = |m: &MesoState| m.coords().iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>();
            Ok((0..chain.n_slices()).min_by(|i, j| dist(chain.slice(*i)).total_cmp(&dist(chain.slice(*j)))).unwrap())
        };
        let ia = nearest(metastable)?;
        let ib = nearest(stable)?;
        if ia == ib {
            return Err(Error::Degenerate("both minima round to the same slice".into()));
        }
        let a_slice = chain.slice(ia).clone();
        let b_slice = chain.slice(ib).clone();
        let a_delta = chain.set_of_slices(|m| m.l1_distance(&a_slice) <= delta + 1e-12);
        let b = chain.slice_set(ib);
        if !a_delta.is_disjoint(&b) {
            return Err(Error::Config(format!("delta {delta} is too large: A_δ reaches B")));
        }
        Ok(Self { a: chain.slice_set(ia), b, a_delta, a_slice, b_slice })
    }
}

fn check_pair(a: &StateSet, b: &StateSet) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("boundary sets must be nonempty".into()));
    }
    if !a.is_disjoint(b) {
        return Err(Error::Contract("boundary sets must be disjoint".into()));
    }
    Ok(())
}

fn check_lambda(lambda: f64, t: f64) -> Result<()> {
    if !(lambda >= 0.0) || !(t > 0.0) {
        return Err(Error::Domain(format!("need λ >= 0 and T > 0, got λ = {lambda}, T = {t}")));
    }
    Ok(())
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Doob transform `p^h(s,t) = p(s,t) h(t) / h(s)` on `{h > 0}`.
pub struct HTransform<'a> {
    chain: &'a ExactChain,
    h: &'a [f64],
}

impl<'a> HTransform<'a> {
    pub fn new(chain: &'a ExactChain, h: &'a [f64]) -> Self {
        Self { chain, h }
    }

    /// Row-sum defect on `off` and reversibility defect on all of `{h > 0}`.
    pub fn defects(&self, off: &StateSet) -> (f64, f64) {
        let mut row = 0.0f64;
        let mut rev = 0.0f64;
        for s in 0..self.n_states() {
            if self.h[s] <= 0.0 {
                continue;
            }
            let mut sum = 0.0;
            self.row(s, |t, p| {
                sum += p;
                if t != s {
                    let mut back = 0.0;
                    self.row(t, |u, q| {
                        if u == s {
                            back = q;
                        }
                    });
                    rev = rev.max(rel(self.weight(s) * p, self.weight(t) * back));
                }
            });
            if off.contains(s) {
                row = row.max((sum - 1.0).abs());
            }
        }
        (row, rev)
    }
}

impl Kernel for HTransform<'_> {
    fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    fn weight(&self, s: usize) -> f64 {
        self.h[s] * self.h[s] * self.chain.mu(s)
    }

    fn row<F: FnMut(usize, f64)>(&self, s: usize, mut f: F) {
        let hs = self.h[s];
        if hs <= 0.0 {
            return;
        }
        self.chain.row(s, |t, p| {
            if self.h[t] > 0.0 {
                f(t, p * self.h[t] / hs);
            }
        });
    }
}

#[derive(Clone, Debug)]
pub struct PotentialSolution {
    pub h: Vec<f64>,
    /// `(L h)(s)` at every state; on A this is the escape probability.
    pub lh: Vec<f64>,
    pub cap: f64,
    pub nu_a: Vec<f64>,
    pub harmonic_residual: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct MeanHittingReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub sum_identity_residual: f64,
    pub cap: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GreenReport {
    pub max_residual: f64,
    pub reversibility_residual: f64,
    pub zero_on_b: bool,
}

#[derive(Clone, Debug)]
pub struct RhoLambda {
    pub states: Vec<usize>,
    pub rho: Vec<f64>,
    pub c_lambda: f64,
    pub kernel: DMatrix<f64>,
    pub iterations: usize,
}

impl RhoLambda {
    /// `max |ρ K - C ρ|`.
    pub fn eigen_residual(&self) -> f64 {
        let rho = DVector::from_column_slice(&self.rho);
        let left = self.kernel.transpose() * &rho;
        left.iter().zip(&self.rho).map(|(l, r)| (l - self.c_lambda * r).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct RenewalReport {
    pub lambda: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub c_lambda: f64,
    pub t_lambda: f64,
    pub t_lambda_ratio_residual: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct UphillReport {
    /// `(lhs, rhs, relative residual)` for each identity.
    pub return_time: (f64, f64, f64),
    pub exit_time: (f64, f64, f64),
    pub escape_time: (f64, f64, f64),
    pub uphill_ratio: f64,
}

impl UphillReport {
    pub fn max_residual(&self) -> f64 {
        self.return_time.2.max(self.exit_time.2).max(self.escape_time.2)
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct DownhillReport {
    pub lhs: f64,
    /// Same quantity after path reversal.
    pub reversed: f64,
    pub reversal_residual: f64,
    /// `Σ_{A_δ \ A} μ^h P^h(τ_{B_δ} < τ_A)`.
    pub rhs: f64,
    pub holds: bool,
    /// `μ^h(B_δ)`.
    pub exterior_mass: f64,
    /// `|lhs - (rhs + μ^h(B_δ))|`, relative.
    pub completed_residual: f64,
    pub h_row_sum_defect: f64,
    pub h_reversibility_defect: f64,
}

fn perron_left(k: &DMatrix<f64>) -> Result<(Vec<f64>, f64, usize)> {
    let m = k.nrows();
    let kt = k.transpose();
    let mut rho = DVector::from_element(m, 1.0 / m as f64);
    let mut c = 0.0;
    for it in 1..=POWER_MAX_ITER {
        let next = &kt * &rho;
        let sum: f64 = next.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Numerical("return kernel has no positive mass".into()));
        }
        let next = next / sum;
        let diff: f64 = next.iter().zip(rho.iter()).map(|(a, b)| (a - b).abs()).sum();
        rho = next;
        c = sum;
        if diff <= POWER_TOL {
            let c = (&kt * &rho).iter().sum();
            return Ok((rho.iter().cloned().collect(), c, it));
        }
    }
    Err(Error::Numerical(format!("power iteration did not converge in {POWER_MAX_ITER} steps (C = {c})")))
}

/// Solves `u = source + z P u` on `interior`, `u = boundary` elsewhere.
pub fn solve_dirichlet<K: Kernel>(
    k: &K,
    interior: &StateSet,
    boundary: &[f64],
    source: &[f64],
    z: f64,
    solver: Solver,
) -> Result<Vec<f64>> {
    let idx = interior.states();
    let mut out = boundary.to_vec();
    if idx.is_empty() {
        return Ok(out);
    }
    if z >= 1.0 {
        check_reachable(k, interior)?;
    }
    let mut pos = vec![u32::MAX; k.n_states()];
    for (i, s) in idx.iter().enumerate() {
        pos[*s] = i as u32;
    }
    let mut rhs = vec![0.0; idx.len()];
    for (i, s) in idx.iter().enumerate() {
        let mut acc = source[*s];
        k.row(*s, |t, p| {
            if pos[t] == u32::MAX {
                acc += z * p * boundary[t];
            }
        });
        rhs[i] = acc;
    }
    let solver = match solver {
        Solver::Auto if idx.len() <= AUTO_DENSE => Solver::Dense,
        Solver::Auto => Solver::Cg,
        other => other,
    };
    let x = match solver {
        Solver::Auto | Solver::Cg => cg(k, &idx, &pos, &rhs, z)?,
        Solver::Dense => {
            let a = dense_operator(k, &idx, &pos, z)?;
            let lu = a.lu();
            lu.solve(&DVector::from_vec(rhs))
                .ok_or_else(|| Error::Connectivity("singular Dirichlet system".into()))?
                .iter()
                .cloned()
                .collect()
        }
    };
    for (i, s) in idx.iter().enumerate() {
        out[*s] = x[i];
    }
    Ok(out)
}

fn check_reachable<K: Kernel>(k: &K, interior: &StateSet) -> Result<()> {
    let n = k.n_states();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        if !interior.contains(s) {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    if queue.is_empty() {
        return Err(Error::Connectivity("no boundary states".into()));
    }
    // kernels here are reversible, so the edge relation is symmetric
    while let Some(s) = queue.pop_front() {
        k.row(s, |t, p| {
            if p > 0.0 && !seen[t] {
                seen[t] = true;
                queue.push_back(t);
            }
        });
    }
    if let Some(s) = interior.states().into_iter().find(|s| !seen[*s]) {
        return Err(Error::Connectivity(format!("state {s} cannot reach the boundary")));
    }
    Ok(())
}

fn dense_operator<K: Kernel>(k: &K, idx: &[usize], pos: &[u32], z: f64) -> Result<DMatrix<f64>> {
    let m = idx.len();
    if m > DENSE_LIMIT {
        return Err(Error::Capacity { n: m, cap: DENSE_LIMIT });
    }
    let mut a = DMatrix::identity(m, m);
    for (i, s) in idx.iter().enumerate() {
        k.row(*s, |t, p| {
            let j = pos[t];
            if j != u32::MAX {
                a[(i, j as usize)] -= z * p;
            }
        });
    }
    Ok(a)
}

/// Row (`transpose = true`) or column of `g_B` through `x`, by dense LU on
/// `B^c` without using reversibility.
fn dense_green(chain: &ExactChain, interior: &StateSet, x: usize, transpose: bool) -> Result<Vec<f64>> {
    let idx = interior.states();
    let mut pos = vec![u32::MAX; chain.n_states()];
    for (i, s) in idx.iter().enumerate() {
        pos[*s] = i as u32;
    }
    let mut a = dense_operator(chain, &idx, &pos, 1.0)?;
    if transpose {
        a.transpose_mut();
    }
    let mut e = DVector::zeros(idx.len());
    e[pos[x] as usize] = 1.0;
    a.lu()
        .solve(&e)
        .map(|v| v.iter().cloned().collect())
        .ok_or_else(|| Error::Connectivity("singular Green system".into()))
}

fn cg<K: Kernel>(k: &K, idx: &[usize], pos: &[u32], b: &[f64], z: f64) -> Result<Vec<f64>> {
    let m = idx.len();
    let top = idx.iter().map(|s| k.weight(*s)).fold(0.0, f64::max);
    let w: Vec<f64> = idx.iter().map(|s| k.weight(*s) / top).collect();
    let mut diag = vec![1.0; m];
    for (i, s) in idx.iter().enumerate() {
        k.row(*s, |t, p| {
            if t == *s {
                diag[i] -= z * p;
            }
        });
    }
    let apply = |x: &[f64], y: &mut [f64]| {
        for (i, s) in idx.iter().enumerate() {
            let mut acc = x[i];
            k.row(*s, |t, p| {
                let j = pos[t];
                if j != u32::MAX {
                    acc -= z * p * x[j as usize];
                }
            });
            y[i] = acc;
        }
    };
    let dot = |a: &[f64], c: &[f64]| -> f64 { a.iter().zip(c).zip(&w).map(|((x, y), v)| x * y * v).sum() };
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));

    let b_norm = norm(b);
    let mut x: Vec<f64> = b.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut r = vec![0.0; m];
    let mut ap = vec![0.0; m];
    let residual = |x: &[f64], r: &mut [f64], ap: &mut [f64]| {
        apply(x, ap);
        for i in 0..m {
            r[i] = b[i] - ap[i];
        }
    };
    residual(&x, &mut r, &mut ap);
    let mut zv: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = zv.clone();
    let mut rz = dot(&r, &zv);
    let max_iter = 20 * m + 10_000;
    for iter in 1..=max_iter {
        if norm(&r) == 0.0 {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numerical("CG breakdown: operator not positive definite".into()));
        }
        let alpha = rz / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let mut restart = false;
        if norm(&r) <= CG_TOL * (b_norm + norm(&x)) {
            residual(&x, &mut r, &mut ap);
            if norm(&r) <= 10.0 * CG_TOL * (b_norm + norm(&x)) {
                return Ok(x);
            }
            restart = true;
        } else if iter % 64 == 0 {
            // residual replacement keeps the recurrence honest
            residual(&x, &mut r, &mut ap);
        }
        for i in 0..m {
            zv[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &zv);
        let beta = if restart { 0.0 } else { rz_new / rz };
        rz = rz_new;
        for i in 0..m {
            p[i] = zv[i] + beta * p[i];
        }
    }
    residual(&x, &mut r, &mut ap);
    Err(Error::Numerical(format!(
        "CG did not converge in {max_iter} iterations (residual {:e})",
        norm(&r) / (b_norm + norm(&x))
    )))
}
