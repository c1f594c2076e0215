#![allow(dead_code)]

use std::sync::Arc;

use rfcw::coarse::{build_partition, Partition};
use rfcw::exact::{ExactChain, WellSets};
use rfcw::landscape::{well_pair, FreeEnergySurface, WellPair};
use rfcw::model::{FieldEnvironment, HeatBath, ModelParams};

pub fn kernel(env: &FieldEnvironment, beta: f64) -> HeatBath {
    HeatBath::new(Arc::new(env.clone()), ModelParams::new(beta).unwrap()).unwrap()
}

pub fn chain(env: &FieldEnvironment, partition: &Partition, beta: f64) -> ExactChain {
    ExactChain::build(kernel(env, beta), partition.clone()).unwrap()
}

/// Two field values, `hi` on the first `n_hi` sites and `lo` on the rest.
pub fn two_valued(n: usize, n_hi: usize, hi: f64, lo: f64) -> FieldEnvironment {
    FieldEnvironment::from_fields((0..n).map(|i| if i < n_hi { hi } else { lo }).collect()).unwrap()
}

/// Asymmetric double well: fields 0.15 and -0.05 alternating, so the
/// minus well is metastable.
pub fn double_well_env(n: usize) -> FieldEnvironment {
    FieldEnvironment::from_fields((0..n).map(|i| if i % 2 == 0 { 0.15 } else { -0.05 }).collect()).unwrap()
}

pub struct Instance {
    pub env: FieldEnvironment,
    pub partition: Partition,
    pub chain: ExactChain,
    pub wells: WellPair,
    pub sets: WellSets,
}

pub fn instance(env: FieldEnvironment, n_blocks: usize, beta: f64, delta: f64) -> Instance {
    let partition = build_partition(&env, n_blocks).unwrap();
    let chain = chain(&env, &partition, beta);
    let surface = FreeEnergySurface::new(&env, &partition, beta).unwrap();
    let wells = well_pair(&surface.find_critical_points().unwrap()).unwrap();
    let sets = WellSets::build(&chain, &wells.metastable.m_star, &wells.stable.m_star, delta).unwrap();
    Instance { env, partition, chain, wells, sets }
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Transition matrix written out from the heat-bath formula, without the
/// crate's kernel code.
pub fn dense_p(h: &[f64], beta: f64) -> nalgebra::DMatrix<f64> {
    let n = h.len();
    let states = 1usize << n;
    let mut p = nalgebra::DMatrix::zeros(states, states);
    for s in 0..states {
        let spin = |x: usize| if s >> x & 1 == 1 { 1.0 } else { -1.0 };
        let total: f64 = (0..n).map(spin).sum();
        let mut stay = 1.0;
        for x in 0..n {
            let g = (total - spin(x)) / n as f64 + h[x];
            let up = 0.5 * (1.0 + (beta * g).tanh());
            let flip = if spin(x) > 0.0 { 1.0 - up } else { up } / n as f64;
            p[(s, s ^ (1 << x))] = flip;
            stay -= flip;
        }
        p[(s, s)] = stay;
    }
    p
}

/// Solves `u = f + z P u` on `interior`, `u = g` outside, by dense LU.
pub fn dense_dirichlet(p: &nalgebra::DMatrix<f64>, interior: &[bool], g: &[f64], f: &[f64], z: f64) -> Vec<f64> {
    let idx: Vec<usize> = (0..interior.len()).filter(|s| interior[*s]).collect();
    let m = idx.len();
    let mut a = nalgebra::DMatrix::zeros(m, m);
    let mut rhs = nalgebra::DVector::zeros(m);
    for (i, s) in idx.iter().enumerate() {
        rhs[i] = f[*s];
        for t in 0..interior.len() {
            let w = z * p[(*s, t)];
            if interior[t] {
                let j = idx.binary_search(&t).unwrap();
                a[(i, j)] -= w;
            } else {
                rhs[i] += w * g[t];
            }
        }
        a[(i, i)] += 1.0;
    }
    let x = a.lu().solve(&rhs).unwrap();
    let mut u = g.to_vec();
    for (i, s) in idx.iter().enumerate() {
        u[*s] = x[i];
    }
    u
}
