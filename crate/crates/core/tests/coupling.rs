mod common;

use common::{double_well_env, instance, kernel, two_valued};
use rfcw::coarse::{a1_certificate, build_partition, MesoState, Partition};
use rfcw::coupling::{
    basic_coupling_attempt, cycle_run, llp_step, local_coupling_time_probe, AttemptStreams, CoinStack,
    CouplingAttempt, CouplingParams, CycleSetup, Termination,
};
use rfcw::dynamics::{run_until_hit, sample_on_slice, StoppingSpec, Target};
use rfcw::model::{FieldEnvironment, HeatBath, SpinConfig};
use rfcw::rng::{Domain, StreamFactory};
use rfcw::stats::{chi_square_gof, ks_two_sample};
use rfcw::Error;

fn spins(p: &Partition, values: &[i8]) -> SpinConfig {
    p.spin_config(values.to_vec()).unwrap()
}

/// σ and η on the same slice, disagreeing on two sites in every block.
fn crossed_pair(p: &Partition) -> (SpinConfig, SpinConfig) {
    let mut s = vec![-1i8; p.n_sites()];
    let mut e = vec![-1i8; p.n_sites()];
    for block in 0..p.n_blocks() {
        let m = p.members(block);
        s[m[0]] = 1;
        e[m[1]] = 1;
    }
    (spins(p, &s), spins(p, &e))
}

fn cell(before: &SpinConfig, after: &SpinConfig) -> usize {
    let diff: Vec<usize> = (0..before.n_sites()).filter(|x| before.spin(*x) != after.spin(*x)).collect();
    assert!(diff.len() <= 1, "one step changed {} sites", diff.len());
    diff.first().map_or(0, |x| x + 1)
}

fn one_step_probs(k: &HeatBath, s: &SpinConfig) -> Vec<f64> {
    let n = s.n_sites() as f64;
    let mut p: Vec<f64> = (0..s.n_sites()).map(|x| k.p_to(s, x, -s.spin(x)) / n).collect();
    p.insert(0, 1.0 - p.iter().sum::<f64>());
    p
}

#[test]
fn llp_keeps_equal_chains_equal() {
    let env = FieldEnvironment::from_fields(vec![0.0; 6]).unwrap();
    let p = build_partition(&env, 1).unwrap();
    let k = kernel(&env, 1.2);
    let mut rng = StreamFactory::new(1).stream(Domain::Auxiliary, 0, 0);
    let mut s = spins(&p, &[1, -1, 1, 1, -1, -1]);
    let mut e = s.clone();
    for _ in 0..10_000 {
        llp_step(&mut s, &mut e, &k, &mut rng).unwrap();
        assert_eq!(s, e);
    }
}

#[test]
fn llp_hamming_distance_never_increases() {
    let env = FieldEnvironment::from_fields(vec![0.0; 6]).unwrap();
    let p = build_partition(&env, 1).unwrap();
    let k = kernel(&env, 1.0);
    let mut rng = StreamFactory::new(2).stream(Domain::Auxiliary, 0, 0);
    let mut s = spins(&p, &[1, 1, 1, -1, -1, -1]);
    let mut e = spins(&p, &[-1, -1, -1, 1, 1, 1]);
    let mut d = s.hamming(&e);
    for _ in 0..100_000 {
        llp_step(&mut s, &mut e, &k, &mut rng).unwrap();
        assert_eq!(s.block_sums(), e.block_sums());
        let now = s.hamming(&e);
        assert!(now <= d);
        d = now;
    }
    assert_eq!(d, 0);
}

#[test]
fn llp_preserves_block_sums_with_blocks() {
    let env = two_valued(8, 4, 0.2, -0.1);
    let p = build_partition(&env, 2).unwrap();
    let k = kernel(&env, 1.3);
    let mut rng = StreamFactory::new(3).stream(Domain::Auxiliary, 0, 0);
    let (mut s, mut e) = crossed_pair(&p);
    for _ in 0..20_000 {
        llp_step(&mut s, &mut e, &k, &mut rng).unwrap();
        assert_eq!(s.block_sums(), e.block_sums());
    }
    let (s, mut e) = crossed_pair(&p);
    let mut other = s.clone();
    other.flip(p.members(0)[1]);
    assert!(matches!(llp_step(&mut other, &mut e, &k, &mut rng), Err(Error::Contract(_))));
}

#[test]
fn three_term_marginal_identity() {
    let env = rfcw::model::sample_fields(&rfcw::model::DistSpec::Uniform { low: -0.3, high: 0.3 }, 8, 4).unwrap();
    let p = build_partition(&env, 2).unwrap();
    let beta = 1.1;
    let k = kernel(&env, beta);
    let nu = 3.0 * a1_certificate(&common::chain(&env, &p, beta));
    assert!(nu > 0.0 && nu < 1.0);
    let configs: Vec<SpinConfig> = (0..256u64).map(|b| SpinConfig::from_bits(b, p.block_map().clone(), 2)).collect();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for eta in &configs {
        for sigma in configs.iter().filter(|s| s.block_sums() == eta.block_sums()) {
            for i in (0..8).filter(|i| sigma.spin(*i) != eta.spin(*i)) {
                for y in (0..8).filter(|y| {
                    p.block_of(*y) == p.block_of(i) && sigma.spin(*y) != eta.spin(*y) && eta.spin(*y) != eta.spin(i)
                }) {
                    let (qp, qm) = (k.p_to(eta, i, 1), k.p_to(eta, i, -1));
                    let (rp, rm) = (k.p_to(sigma, y, 1), k.p_to(sigma, y, -1));
                    let a_plus = (qp.min(rp) - (1.0 - nu) * qp) / (nu * qp);
                    let b_minus = (qm - qm.min(rm)) / (nu * qm);
                    assert!((-1e-12..=1.0 + 1e-12).contains(&a_plus));
                    assert!((-1e-12..=1.0 + 1e-12).contains(&b_minus));
                    let total = qp * ((1.0 - nu) + nu * a_plus) + qm * nu * b_minus;
                    worst = worst.max((total - rp).abs());
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 1000);
    assert!(worst < 1e-14, "{worst}");
}

/// Counts of σ's and η's one-step outcomes over independent attempts.
fn one_step_counts(s0: &SpinConfig, e0: &SpinConfig, nu: f64, k: &HeatBath, samples: u64, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let n = s0.n_sites();
    let f = StreamFactory::new(seed);
    let mut cs = vec![0u64; n + 1];
    let mut ce = vec![0u64; n + 1];
    for i in 0..samples {
        let mut coin_rng = f.stream(Domain::Coins, i, 0);
        let coins = CoinStack::draw(1, nu, &mut coin_rng);
        let mut att = CouplingAttempt::new(s0.clone(), e0.clone(), coins, 10, k).unwrap();
        att.step(&mut f.stream(Domain::EtaChain, i, 0), &mut coin_rng, &mut f.stream(Domain::SigmaPrivate, i, 0)).unwrap();
        cs[cell(s0, att.sigma())] += 1;
        ce[cell(e0, att.eta())] += 1;
    }
    (cs, ce)
}

#[test]
fn attempt_preserves_one_step_marginals() {
    let env = FieldEnvironment::from_fields(vec![0.35, -0.2, 0.5, -0.45]).unwrap();
    let p = build_partition(&env, 2).unwrap();
    let k = kernel(&env, 1.0);
    let (s0, e0) = crossed_pair(&p);
    let nu = 0.6;
    let (cs, ce) = one_step_counts(&s0, &e0, nu, &k, 200_000, 5);
    let ps = chi_square_gof(&cs, &one_step_probs(&k, &s0)).unwrap();
    let pe = chi_square_gof(&ce, &one_step_probs(&k, &e0)).unwrap();
    assert!(ps.p_value > 0.001, "{ps:?}");
    assert!(pe.p_value > 0.001, "{pe:?}");
}

#[test]
fn small_nu_is_reported() {
    // strong field spread inside a block makes r < (1 - ν) q
    let env = FieldEnvironment::from_fields(vec![0.9, -0.9, 0.0, 0.0]).unwrap();
    let p = Partition::from_assignment(&env, vec![0, 0, 1, 1], 2).unwrap();
    let k = kernel(&env, 1.5);
    let (s0, e0) = crossed_pair(&p);
    let f = StreamFactory::new(6);
    let mut seen = false;
    for i in 0..200 {
        let coins = CoinStack::from_values(vec![false], 1e-6);
        let mut att = CouplingAttempt::new(s0.clone(), e0.clone(), coins, 10, &k).unwrap();
        let r = att.step(&mut f.stream(Domain::EtaChain, i, 0), &mut f.stream(Domain::Coins, i, 0), &mut f.stream(Domain::SigmaPrivate, i, 0));
        if let Err(Error::NuViolation { value, nu }) = r {
            assert!(value < 0.0 && nu == 1e-6);
            seen = true;
        }
    }
    assert!(seen);
}

#[test]
fn certified_nu_never_violates() {
    let env = rfcw::model::sample_fields(&rfcw::model::DistSpec::Uniform { low: -0.2, high: 0.2 }, 8, 7).unwrap();
    let p = build_partition(&env, 2).unwrap();
    let beta = 1.2;
    let k = kernel(&env, beta);
    let nu = 3.0 * a1_certificate(&common::chain(&env, &p, beta));
    let f = StreamFactory::new(8);
    let (s0, e0) = crossed_pair(&p);
    for i in 0..2_000 {
        let coins = CoinStack::from_values(vec![false; 4], nu);
        let mut att = CouplingAttempt::new(s0.clone(), e0.clone(), coins, 50, &k).unwrap();
        let (mut a, mut b, mut c) =
            (f.stream(Domain::EtaChain, i, 0), f.stream(Domain::Coins, i, 0), f.stream(Domain::SigmaPrivate, i, 0));
        for _ in 0..50 {
            att.step(&mut a, &mut b, &mut c).unwrap();
        }
    }
}

#[test]
fn counters_are_monotone_and_chi_latches() {
    let env = FieldEnvironment::from_fields(vec![0.1, 0.05, -0.1, -0.05, 0.08, -0.02]).unwrap();
    let p = build_partition(&env, 2).unwrap();
    let k = kernel(&env, 1.0);
    let f = StreamFactory::new(9);
    for i in 0..200 {
        let (s0, e0) = crossed_pair(&p);
        let mut coin_rng = f.stream(Domain::Coins, i, 0);
        let coins = CoinStack::draw(24, 0.3, &mut coin_rng);
        let mut att = CouplingAttempt::new(s0, e0, coins, 216, &k).unwrap();
        let (mut a, mut c) = (f.stream(Domain::EtaChain, i, 0), f.stream(Domain::SigmaPrivate, i, 0));
        let (mut used, mut chi, mut nn) = (0, false, 0);
        let mut equal_since_clean = false;
        while att.time() < 216 {
            att.step(&mut a, &mut coin_rng, &mut c).unwrap();
            assert!(att.coins().consumed() >= used && att.n_count() >= nn);
            assert!(att.chi() || !chi);
            used = att.coins().consumed();
            nn = att.n_count();
            chi = att.chi();
            if !att.chi() {
                assert_eq!(att.sigma().block_sums(), att.eta().block_sums());
            }
            if equal_since_clean {
                assert_eq!(att.sigma(), att.eta());
            }
            equal_since_clean = att.merged() && !att.chi();
        }
    }
}

fn attempt_setup() -> (FieldEnvironment, Partition, HeatBath, StoppingSpec, MesoState) {
    let env = FieldEnvironment::from_fields(vec![0.11, 0.1, -0.1, -0.11]).unwrap();
    let p = build_partition(&env, 2).unwrap();
    let k = kernel(&env, 1.0);
    let b = StoppingSpec::single(Target::slice(&MesoState::new(vec![2, 2], 4)), 1_000_000).unwrap();
    (env, p, k, b, MesoState::new(vec![-2, 0], 4))
}

#[test]
fn successful_attempts_end_merged() {
    let (_, p, k, _, slice) = attempt_setup();
    // B out of reach within the horizon
    let far = StoppingSpec::single(Target::total_above(4, 10.0), 10).unwrap();
    let params = CouplingParams::with_nu(0.03).unwrap();
    let f = StreamFactory::new(10);
    let mut successes = 0;
    for i in 0..20_000 {
        let s0 = sample_on_slice(&p, &slice, &mut f.stream(Domain::SliceSample, i, 0)).unwrap();
        let e0 = sample_on_slice(&p, &slice, &mut f.stream(Domain::SliceSample, i, 1)).unwrap();
        let mut coin_rng = f.stream(Domain::Coins, i, 0);
        let coins = CoinStack::draw(params.n_coins(4), params.nu, &mut coin_rng);
        let out = basic_coupling_attempt(
            &s0,
            &e0,
            coins,
            params.horizon(4),
            &far,
            &k,
            AttemptStreams {
                eta: &mut f.stream(Domain::EtaChain, i, 0),
                coins: &mut coin_rng,
                sigma: &mut f.stream(Domain::SigmaPrivate, i, 0),
            },
        )
        .unwrap();
        if out.success {
            successes += 1;
            assert_eq!(out.sigma_final, out.eta_final);
            assert_eq!(out.merged_state.as_ref(), Some(&out.eta_final));
        }
    }
    assert!(successes > 10_000, "{successes}");
}

#[test]
fn cycle_decomposition_fires_exactly_once() {
    let inst = instance(double_well_env(6), 2, 1.5, 0.2);
    let k = kernel(&inst.env, 1.5);
    let b = StoppingSpec::single(Target::slice(&inst.sets.b_slice), 10_000_000).unwrap();
    let setup = CycleSetup {
        kernel: &k,
        partition: &inst.partition,
        anchor: &inst.sets.a_slice,
        b: &b,
        params: CouplingParams::new(2.0, 4.0, 0.05).unwrap(),
        cap_cycles: 10_000,
    };
    let f = StreamFactory::new(11);
    let mut kinds = [0usize; 3];
    for i in 0..2_000 {
        // alternate between starts on and off the anchor slice
        let s0 = if i % 2 == 0 {
            sample_on_slice(&inst.partition, &inst.sets.a_slice, &mut f.stream(Domain::Auxiliary, i, 0)).unwrap()
        } else {
            inst.partition.spin_config(vec![-1; 6]).unwrap()
        };
        let r = cycle_run(&s0, &setup, &f, i).unwrap();
        assert_eq!(r.trace.decomposition_terms(), 1, "{:?}", r.trace);
        assert!(b.hit(r.final_state.block_sums(), 6).is_some());
        assert_eq!(r.tau_b, r.trace.tau_b);
        match r.trace.termination {
            Termination::Coupled => kinds[0] += 1,
            Termination::SigmaHitB => kinds[1] += 1,
            Termination::Truncated => kinds[2] += 1,
        }
        if i % 2 == 0 {
            assert!(r.trace.pre_entry.is_none());
        }
    }
    assert_eq!(kinds[2], 0);
    assert!(kinds[0] > 0 && kinds[1] > 0, "{kinds:?}");
}

#[test]
fn first_cycle_success_returns_eta_time() {
    let inst = instance(double_well_env(6), 2, 1.5, 0.2);
    let k = kernel(&inst.env, 1.5);
    let b = StoppingSpec::single(Target::slice(&inst.sets.b_slice), 10_000_000).unwrap();
    let params = CouplingParams::new(2.0, 4.0, 0.01).unwrap();
    let setup =
        CycleSetup { kernel: &k, partition: &inst.partition, anchor: &inst.sets.a_slice, b: &b, params, cap_cycles: 1000 };
    let f = StreamFactory::new(12);
    let mut checked = 0;
    for i in 0..3_000 {
        let s0 = sample_on_slice(&inst.partition, &inst.sets.a_slice, &mut f.stream(Domain::Auxiliary, i, 0)).unwrap();
        let r = cycle_run(&s0, &setup, &f, i).unwrap();
        if r.trace.success_cycle != Some(0) {
            continue;
        }
        // the η chain of cycle 0 alone, run to B on its own stream
        let eta0 = sample_on_slice(&inst.partition, &inst.sets.a_slice, &mut f.stream(Domain::SliceSample, i, 0)).unwrap();
        let plain = run_until_hit(&eta0, &b, &k, &mut f.stream(Domain::EtaChain, i, 0));
        assert_eq!(r.tau_b, plain.time);
        assert_eq!(r.final_state, plain.final_state);
        checked += 1;
    }
    assert!(checked > 50, "{checked}");
}

#[test]
fn cycle_run_matches_plain_simulation() {
    let inst = instance(double_well_env(6), 2, 1.5, 0.2);
    let k = kernel(&inst.env, 1.5);
    let b = StoppingSpec::single(Target::slice(&inst.sets.b_slice), 100_000_000).unwrap();
    let setup = CycleSetup {
        kernel: &k,
        partition: &inst.partition,
        anchor: &inst.sets.a_slice,
        b: &b,
        params: CouplingParams::new(2.0, 4.0, 0.05).unwrap(),
        cap_cycles: 100_000,
    };
    let s0 = sample_on_slice(&inst.partition, &inst.sets.a_slice, &mut StreamFactory::new(0).stream(Domain::Auxiliary, 0, 0)).unwrap();
    let f = StreamFactory::new(13);
    let cyc: Vec<f64> = (0..4_000).map(|i| cycle_run(&s0, &setup, &f, i).unwrap().tau_b as f64).collect();
    let g = StreamFactory::new(14);
    let plain: Vec<f64> = (0..4_000).map(|i| run_until_hit(&s0, &b, &k, &mut g.trajectory(i)).time as f64).collect();
    let ks = ks_two_sample(&cyc, &plain).unwrap();
    assert!(ks.p_value > 0.001, "{ks:?}");
}

#[test]
fn hitting_law_does_not_depend_on_coins() {
    let inst = instance(double_well_env(6), 2, 1.5, 0.2);
    let k = kernel(&inst.env, 1.5);
    let b = StoppingSpec::single(Target::slice(&inst.sets.b_slice), 100_000_000).unwrap();
    let s0 = inst.partition.spin_config(vec![-1; 6]).unwrap();
    let run = |nu: f64, seed: u64| -> Vec<f64> {
        let setup = CycleSetup {
            kernel: &k,
            partition: &inst.partition,
            anchor: &inst.sets.a_slice,
            b: &b,
            params: CouplingParams::new(2.0, 4.0, nu).unwrap(),
            cap_cycles: 100_000,
        };
        let f = StreamFactory::new(seed);
        (0..3_000).map(|i| cycle_run(&s0, &setup, &f, i).unwrap().tau_b as f64).collect()
    };
    let ks = ks_two_sample(&run(0.01, 15), &run(0.4, 16)).unwrap();
    assert!(ks.p_value > 0.001, "{ks:?}");
}

#[test]
fn cycle_run_rejects_anchor_in_b() {
    let inst = instance(double_well_env(6), 2, 1.5, 0.2);
    let k = kernel(&inst.env, 1.5);
    let b = StoppingSpec::single(Target::slice(&inst.sets.a_slice), 1000).unwrap();
    let setup = CycleSetup {
        kernel: &k,
        partition: &inst.partition,
        anchor: &inst.sets.a_slice,
        b: &b,
        params: CouplingParams::with_nu(0.1).unwrap(),
        cap_cycles: 10,
    };
    let s0 = inst.partition.spin_config(vec![-1; 6]).unwrap();
    assert!(matches!(cycle_run(&s0, &setup, &StreamFactory::new(1), 0), Err(Error::Config(_))));
}

#[test]
fn cycle_run_truncates_on_cap() {
    let inst = instance(double_well_env(6), 2, 1.5, 0.2);
    let k = kernel(&inst.env, 1.5);
    let b = StoppingSpec::single(Target::slice(&inst.sets.b_slice), 50).unwrap();
    let setup = CycleSetup {
        kernel: &k,
        partition: &inst.partition,
        anchor: &inst.sets.a_slice,
        b: &b,
        params: CouplingParams::new(2.0, 4.0, 0.1).unwrap(),
        cap_cycles: 10,
    };
    let s0 = sample_on_slice(&inst.partition, &inst.sets.a_slice, &mut StreamFactory::new(2).stream(Domain::Auxiliary, 0, 0)).unwrap();
    let r = cycle_run(&s0, &setup, &StreamFactory::new(3), 0).unwrap();
    assert_eq!(r.trace.termination, Termination::Truncated);
    assert_eq!(r.tau_b, 50);
}

#[test]
fn probe_is_trivial_on_a_single_slice() {
    let (_, p, k, _, slice) = attempt_setup();
    let a = Target::slice(&slice);
    let f = StreamFactory::new(17);
    for i in 0..100 {
        let e0 = sample_on_slice(&p, &slice, &mut f.stream(Domain::Auxiliary, i, 0)).unwrap();
        // η0 already in A: the first step either stays or leaves A_δ = A
        let out = local_coupling_time_probe(&e0, &a, &a, 5, CouplingParams::with_nu(0.1).unwrap(), &k, &p, &f, i).unwrap();
        assert!(out.hit);
        assert_eq!(out.eta_time, Some(1));
    }
}

#[test]
fn probe_is_monotone_in_budget() {
    let inst = instance(double_well_env(8), 2, 1.5, 0.3);
    let k = kernel(&inst.env, 1.5);
    let a = Target::slice(&inst.sets.a_slice);
    let centre = inst.sets.a_slice.coords();
    let a_delta = Target::Ball { center: centre.clone(), radius: 0.3 };
    let start = inst
        .chain
        .slices()
        .iter()
        .find(|m| m.sums() != inst.sets.a_slice.sums() && a_delta.contains(m))
        .expect("A_δ has a second slice")
        .clone();
    let params = CouplingParams::new(2.0, 4.0, 0.02).unwrap();
    let f = StreamFactory::new(18);
    let budgets = [4u64, 8, 16, 32, 64];
    let mut freq = [0usize; 5];
    let mut cert = [0usize; 5];
    for i in 0..500 {
        let e0 = sample_on_slice(&inst.partition, &start, &mut f.stream(Domain::Auxiliary, i, 0)).unwrap();
        let mut last = (false, false);
        for (j, budget) in budgets.iter().enumerate() {
            let out = local_coupling_time_probe(&e0, &a, &a_delta, *budget, params, &k, &inst.partition, &f, i).unwrap();
            assert!(out.hit >= last.0 && out.certified >= last.1);
            assert!(!out.certified || out.hit);
            last = (out.hit, out.certified);
            freq[j] += out.hit as usize;
            cert[j] += out.certified as usize;
        }
    }
    assert!(freq.windows(2).all(|w| w[0] <= w[1]) && cert.windows(2).all(|w| w[0] <= w[1]));
    assert!(freq[4] > 400, "{freq:?}");
}

#[test]
fn probe_frequency_beats_coin_bound() {
    use rfcw::landscape::{well_pair, FreeEnergySurface};
    let n = 40;
    let env = double_well_env(n);
    let p = build_partition(&env, 2).unwrap();
    let beta = 1.5;
    let k = kernel(&env, beta);
    let surface = FreeEnergySurface::new(&env, &p, beta).unwrap();
    let wells = well_pair(&surface.find_critical_points().unwrap()).unwrap();
    let a_slice = MesoState::nearest(&wells.metastable.m_star, &p).unwrap();
    let delta = 0.15;
    let a = Target::slice(&a_slice);
    let a_delta = Target::Ball { center: a_slice.coords(), radius: delta };
    let mut shifted = a_slice.sums().to_vec();
    shifted[0] += 2;
    shifted[1] += 2;
    let start = MesoState::on_grid(shifted, &p).unwrap();
    assert!(a_delta.contains(&start));
    let params = CouplingParams::new(3.0, 20.0, 0.001).unwrap();
    let m = params.n_coins(n) as i32;
    let bound = (1.0 - params.nu).powi(m) / 3.0;
    let f = StreamFactory::new(19);
    let probes = 1_000;
    let mut certified = 0;
    for i in 0..probes {
        let e0 = sample_on_slice(&p, &start, &mut f.stream(Domain::Auxiliary, i, 0)).unwrap();
        let out = local_coupling_time_probe(&e0, &a, &a_delta, params.horizon(n), params, &k, &p, &f, i).unwrap();
        certified += out.certified as u64;
    }
    let freq = certified as f64 / probes as f64;
    let se = (bound * (1.0 - bound) / probes as f64).sqrt();
    assert!(freq >= bound - 3.0 * se, "{freq} vs {bound}");
}
