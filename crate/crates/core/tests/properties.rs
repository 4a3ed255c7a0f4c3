use polymer_core::covariance::{
    circulant_spectrum, delta_metric, q_lattice, q_value, validate_spec, CovarianceSpec, Lattice, SpectrumOptions,
};
use polymer_core::environment::{sample_slab, EnvironmentSlab, FieldSampler, TimeGrid};
use polymer_core::exec;
use polymer_core::free_energy::{beta_sweep, fit_power_law, FreeEnergyCurve, FreeEnergyPoint, Model, ModelConfig, SweepSpec};
use polymer_core::partition::{brownian_resolution, montecarlo_logz, propagate, transfer_matrix_logz, PathSampler, WalkKernel};
use polymer_core::polymer::{discretize_brownian_path, hamiltonian, path_overlap, sample_jump_path};
use polymer_core::stats::{log_sum_exp, mean_stderr};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn any_spec() -> impl Strategy<Value = CovarianceSpec> {
    prop_oneof![
        (0.1f64..5.0).prop_map(CovarianceSpec::white_noise),
        (0.1f64..5.0, 0.05f64..1.0, 0.2f64..10.0).prop_map(|(q, h, l)| CovarianceSpec::powered_exponential(q, h, l)),
        (0.1f64..5.0, 0.05f64..2.0, 0.0f64..1.0, 0.2f64..5.0)
            .prop_map(|(q, g, frac, c)| CovarianceSpec::log_regular(q, g, frac * q, c)),
    ]
}

fn offset(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, d)
}

proptest! {
    #[test]
    fn delta_squared_is_bounded(spec in any_spec(), x in (1usize..4).prop_flat_map(offset)) {
        let dm = delta_metric(&spec, &x).unwrap();
        let q0 = q_value(&spec, &vec![0.0; x.len()]).unwrap();
        let qx = q_value(&spec, &x).unwrap();
        prop_assert!(dm >= 0.0);
        prop_assert!((dm * dm - 2.0 * (q0 - qx)).abs() <= 1e-12 * q0.max(1.0));
        prop_assert!(dm * dm <= 4.0 * spec.q0() * (1.0 + 1e-12));
    }

    #[test]
    fn mean_eigenvalue_is_periodized_variance(
        spec in any_spec(),
        d in 1usize..3,
        extent in 3usize..24,
        spacing in 0.1f64..2.0,
    ) {
        let lattice = Lattice::new(d, extent, spacing).unwrap();
        let options = SpectrumOptions { clip_threshold: 1.0, ..Default::default() };
        let Ok(spectrum) = circulant_spectrum(&spec, &lattice, &options) else {
            return Ok(());
        };
        let row = spectrum.covariance_row();
        prop_assert!((spectrum.mean_eigenvalue() - row[0]).abs() <= 1e-10 * row[0].abs().max(1.0));
        if spectrum.clipped_mass == 0.0 {
            let q0 = q_lattice(&spec, &lattice, &vec![0; d]);
            prop_assert!((spectrum.mean_eigenvalue() - q0).abs() <= 1e-10 * q0.max(1.0));
        }
    }

    // Below H = 0.2 the leading correction (ℓ/100)^{2H}/4 alone exceeds 5%.
    #[test]
    fn holder_ratio_near_origin(q0 in 0.1f64..5.0, h in 0.2f64..=1.0, l in 0.1f64..20.0, d in 1usize..4, dir in 0usize..3) {
        let spec = CovarianceSpec::powered_exponential(q0, h, l);
        let r = l / 100.0;
        let mut x = vec![0.0; d];
        x[dir % d] = r;
        let ratio = delta_metric(&spec, &x).unwrap() / r.powf(h);
        let limit = (2.0 * q0).sqrt() / l.powf(h);
        prop_assert!((ratio / limit - 1.0).abs() <= 0.05, "ratio {ratio} limit {limit}");
    }

    #[test]
    fn validation_is_pure(spec in any_spec(), d in 1usize..3, extent in 3usize..16) {
        let lattice = Lattice::intrinsic(d, extent).unwrap();
        let options = SpectrumOptions::default();
        prop_assert_eq!(validate_spec(&spec, &lattice, &options), validate_spec(&spec, &lattice, &options));
    }
}

#[test]
fn replicas_are_uncorrelated() {
    let lattice = Lattice::intrinsic(1, 16).unwrap();
    let spec = CovarianceSpec::powered_exponential(1.0, 0.5, 2.0);
    let sampler = FieldSampler::new(&spec, &lattice, &SpectrumOptions::default()).unwrap();
    let grid = TimeGrid::new(1000.0, 1000).unwrap();
    let a = sample_slab(&sampler, grid, 7, 0).unwrap();
    for other in [1u64, 2, 1 << 40] {
        let b = sample_slab(&sampler, grid, 7, other).unwrap();
        for site in [0usize, 5] {
            let xs: Vec<f64> = (0..grid.n_steps).map(|k| a.increment(k, site)).collect();
            let ys: Vec<f64> = (0..grid.n_steps).map(|k| b.increment(k, site)).collect();
            let products: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x * y).collect();
            let (m, se) = mean_stderr(&products);
            assert!(m.abs() <= 4.0 * se, "replica {other} site {site}: {m} ± {se}");
        }
    }
}

#[test]
fn increment_variance_is_linear_in_dt() {
    let lattice = Lattice::intrinsic(1, 16).unwrap();
    let spec = CovarianceSpec::powered_exponential(1.0, 0.5, 2.0);
    let sampler = FieldSampler::new(&spec, &lattice, &SpectrumOptions::default()).unwrap();
    let variance = |dt: f64, seed: u64| {
        let grid = TimeGrid::with_dt(dt * 10_000.0, dt).unwrap();
        let slab = sample_slab(&sampler, grid, seed, 0).unwrap();
        let xs: Vec<f64> = (0..grid.n_steps).map(|k| slab.increment(k, 3)).collect();
        xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64
    };
    let ratio = variance(0.01, 1) / variance(0.02, 2);
    assert!((0.45..=0.55).contains(&ratio), "ratio {ratio}");
}

fn cholesky(c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = c.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (c[i][i] - s).sqrt();
            } else {
                l[i][j] = (c[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

fn empirical_covariance(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = samples[0].len();
    let mut c = vec![vec![0.0; n]; n];
    for s in samples {
        for i in 0..n {
            for j in 0..n {
                c[i][j] += s[i] * s[j];
            }
        }
    }
    c.iter().map(|r| r.iter().map(|v| v / samples.len() as f64).collect()).collect()
}

#[test]
fn spectral_sampling_matches_cholesky() {
    let n_samples = 20_000;
    let lattice = Lattice::intrinsic(1, 8).unwrap();
    for spec in [CovarianceSpec::powered_exponential(1.0, 0.5, 2.0), CovarianceSpec::powered_exponential(2.0, 0.9, 1.5)] {
        let exact: Vec<Vec<f64>> = (0..8i64).map(|i| (0..8i64).map(|j| q_lattice(&spec, &lattice, &[i - j])).collect()).collect();
        let l = cholesky(&exact);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let direct: Vec<Vec<f64>> = (0..n_samples)
            .map(|_| {
                let z: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
                (0..8).map(|i| (0..=i).map(|k| l[i][k] * z[k]).sum()).collect()
            })
            .collect();
        let sampler = FieldSampler::new(&spec, &lattice, &SpectrumOptions::default()).unwrap();
        let grid = TimeGrid::new(n_samples as f64, n_samples).unwrap();
        let slab = sample_slab(&sampler, grid, 5, 0).unwrap();
        let spectral: Vec<Vec<f64>> = (0..n_samples).map(|k| slab.step(k).to_vec()).collect();

        let a = empirical_covariance(&direct);
        let b = empirical_covariance(&spectral);
        for i in 0..8 {
            for j in 0..8 {
                let var = (exact[i][i] * exact[j][j] + exact[i][j].powi(2)) / n_samples as f64;
                let z = (a[i][j] - b[i][j]) / (2.0 * var).sqrt();
                assert!(z.abs() <= 5.0, "entry ({i},{j}): {} vs {} (z={z:.2})", a[i][j], b[i][j]);
            }
        }
    }
}

fn small_slab(seed: u64, replica: u64, steps: usize) -> EnvironmentSlab {
    let lattice = Lattice::intrinsic(1, 16).unwrap();
    let spec = CovarianceSpec::powered_exponential(1.0, 0.5, 2.0);
    let sampler = FieldSampler::new(&spec, &lattice, &SpectrumOptions::default()).unwrap();
    sample_slab(&sampler, TimeGrid::with_dt(steps as f64 * 0.05, 0.05).unwrap(), seed, replica).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hamiltonian_is_linear(seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0, path_seed in any::<u64>()) {
        let s1 = small_slab(seed, 0, 40);
        let s2 = small_slab(seed, 1, 40);
        let path = sample_jump_path(1, 2.0, s1.grid(), path_seed).unwrap();
        let mixed = s1.combine(a, &s2, b).unwrap();
        let h1 = hamiltonian(&path, &s1).unwrap();
        let h2 = hamiltonian(&path, &s2).unwrap();
        let lhs = hamiltonian(&path, &mixed).unwrap();
        prop_assert!((lhs - (a * h1 + b * h2)).abs() <= 1e-12 * (1.0 + a.abs() * h1.abs() + b.abs() * h2.abs()) * 40.0);
    }

    #[test]
    fn merged_jumps_equal_component_exits(seed in any::<u64>(), d in 1usize..4, eps in 0.2f64..1.0) {
        let t = 2.0;
        let trace = discretize_brownian_path(d, t, eps, brownian_resolution(t, eps), seed).unwrap();
        prop_assert_eq!(trace.exits().len(), trace.component_counts().iter().sum::<usize>());
    }

    #[test]
    fn log_z_convex_in_beta(seed in any::<u64>(), step in 0.05f64..2.0) {
        let slab = small_slab(seed, 0, 40);
        let kernel = WalkKernel::lattice_walk(1, 0.05).unwrap();
        let betas: Vec<f64> = (0..6).map(|i| i as f64 * step).collect();
        let prop = propagate(&mut &slab, &betas, &kernel, &[40]).unwrap();
        let logz: Vec<f64> = prop.log_z.iter().map(|r| r[0]).collect();
        for w in logz.windows(3) {
            prop_assert!(w[2] - 2.0 * w[1] + w[0] >= -1e-9, "{:?}", logz);
        }
    }

    #[test]
    fn scaling_slab_equals_scaling_beta(seed in any::<u64>(), beta in 0.0f64..5.0, power in -2i32..4) {
        let slab = small_slab(seed, 0, 20);
        let kernel = WalkKernel::lattice_walk(1, 0.05).unwrap();
        let lambda = 2f64.powi(power);
        let scaled = transfer_matrix_logz(&slab.scaled(lambda), beta, &kernel).unwrap();
        let direct = transfer_matrix_logz(&slab, lambda * beta, &kernel).unwrap();
        prop_assert_eq!(scaled.log_z.to_bits(), direct.log_z.to_bits());
    }

    #[test]
    fn jensen_on_replicate_batches(seed in any::<u64>(), beta in 0.0f64..4.0) {
        let kernel = WalkKernel::lattice_walk(1, 0.05).unwrap();
        let logz: Vec<f64> = (0..8)
            .map(|r| transfer_matrix_logz(&small_slab(seed, r, 20), beta, &kernel).unwrap().log_z)
            .collect();
        let mean_log = logz.iter().sum::<f64>() / logz.len() as f64;
        let log_mean = log_sum_exp(&logz) - (logz.len() as f64).ln();
        prop_assert!(mean_log <= log_mean + 1e-12);
    }

    #[test]
    fn power_law_fit_is_exact(exponent in 0.5f64..=2.0, scale in 0.1f64..10.0) {
        let betas = [1.0, 2.0, 4.0, 8.0, 16.0];
        let points = betas
            .iter()
            .map(|&beta| FreeEnergyPoint {
                beta,
                t: 4.0,
                n_steps: 80,
                model: Model::LatticeWalk,
                epsilon: None,
                mean_p: scale * beta.powf(exponent),
                stderr: 1e-3 * scale * beta.powf(exponent),
                n_replicas: 16,
                boundary_mass: 0.0,
                unreliable: 0,
                stabilized: Some(true),
                t_monotone: Some(true),
            })
            .collect();
        let curve = FreeEnergyCurve {
            model: Model::LatticeWalk,
            d: 1,
            family: "white-noise-lattice".into(),
            q0: 1.0,
            digest: "0".into(),
            seed: 0,
            points,
            min_convexity: None,
        };
        let fit = fit_power_law(&curve, 0.0, f64::INFINITY).unwrap();
        prop_assert!((fit.estimate - exponent).abs() <= 1e-6, "{} vs {exponent}", fit.estimate);
    }
}

#[test]
fn hamiltonian_moments_match_covariance() {
    let n = 10_000u64;
    let lattice = Lattice::intrinsic(1, 16).unwrap();
    let spec = CovarianceSpec::powered_exponential(1.0, 0.5, 2.0);
    let sampler = FieldSampler::new(&spec, &lattice, &SpectrumOptions::default()).unwrap();
    let grid = TimeGrid::with_dt(2.0, 0.05).unwrap();
    let p = sample_jump_path(1, 2.0, &grid, 3).unwrap();
    let q = sample_jump_path(1, 2.0, &grid, 4).unwrap();
    assert!(p.n_jumps() > 0 && p != q);

    let (hp, hq): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|r| {
            let slab = sample_slab(&sampler, grid, 17, r).unwrap();
            (hamiltonian(&p, &slab).unwrap(), hamiltonian(&q, &slab).unwrap())
        })
        .unzip();

    let var_target = 2.0 * spec.q0();
    let cov_target = path_overlap(&p, 1, &q, 1, &spec, &lattice);
    let squares: Vec<f64> = hp.iter().map(|h| h * h).collect();
    let (var, var_se) = mean_stderr(&squares);
    assert!((var - var_target).abs() <= 4.0 * var_se, "variance {var} ± {var_se} vs {var_target}");
    let cross: Vec<f64> = hp.iter().zip(&hq).map(|(a, b)| a * b).collect();
    let (cov, cov_se) = mean_stderr(&cross);
    assert!((cov - cov_target).abs() <= 4.0 * cov_se, "covariance {cov} ± {cov_se} vs {cov_target}");
}

// A white-noise slab on the doubled lattice that agrees with `small` on every
// site of the smaller box (by minimum image).
fn embed(small: &EnvironmentSlab, big: &EnvironmentSlab) -> EnvironmentSlab {
    let (sl, bl) = (small.lattice(), big.lattice());
    let mut inc = big.increments().to_vec();
    let n_big = bl.sites();
    for k in 0..small.grid().n_steps {
        for i in 0..sl.sites() {
            let j = bl.index_of(&sl.min_image(i));
            inc[k * n_big + j] = small.increment(k, i);
        }
    }
    EnvironmentSlab::from_increments(bl.clone(), *big.grid(), inc).unwrap()
}

#[test]
fn doubling_the_lattice_is_harmless_without_boundary_mass() {
    let spec = CovarianceSpec::white_noise(1.0);
    let grid = TimeGrid::with_dt(0.5, 0.01).unwrap();
    for (d, extent) in [(1usize, 32usize), (2, 32)] {
        let small_lattice = Lattice::intrinsic(d, extent).unwrap();
        let big_lattice = Lattice::intrinsic(d, 2 * extent).unwrap();
        let small_sampler = FieldSampler::new(&spec, &small_lattice, &SpectrumOptions::default()).unwrap();
        let big_sampler = FieldSampler::new(&spec, &big_lattice, &SpectrumOptions::default()).unwrap();
        let kernel = WalkKernel::lattice_walk(d, 0.01).unwrap();
        for seed in 0..4 {
            let small = sample_slab(&small_sampler, grid, seed, 0).unwrap();
            let big = embed(&small, &sample_slab(&big_sampler, grid, seed, 1).unwrap());
            for beta in [0.5, 2.0] {
                let a = transfer_matrix_logz(&small, beta, &kernel).unwrap();
                assert!(a.boundary_mass <= 1e-3);
                let b = transfer_matrix_logz(&big, beta, &kernel).unwrap();
                let rel = (a.log_z - b.log_z).abs() / a.log_z.abs();
                assert!(rel <= 1e-6, "d={d} seed={seed} β={beta}: {} vs {}", a.log_z, b.log_z);
            }
        }
    }
}

#[test]
fn montecarlo_error_and_agreement() {
    let beta = 0.2;
    let kernel = WalkKernel::lattice_walk(1, 0.05).unwrap();
    let sampler = PathSampler::Kernel(kernel);
    for seed in 0..5 {
        let slab = small_slab(seed, 0, 40);
        let exact = transfer_matrix_logz(&slab, beta, &kernel).unwrap().log_z;
        let coarse = montecarlo_logz(&slab, beta, &sampler, 1000, seed).unwrap();
        let fine = montecarlo_logz(&slab, beta, &sampler, 4000, seed + 100).unwrap();
        let ratio = coarse.stderr / fine.stderr;
        assert!((1.6..=2.4).contains(&ratio), "stderr ratio {ratio}");
        for est in [&coarse, &fine] {
            assert!((est.log_z - exact).abs() <= 3.0 * est.stderr, "{} ± {} vs {exact}", est.log_z, est.stderr);
        }
    }
}

#[test]
fn annealed_mean_example() {
    let lattice = Lattice::intrinsic(1, 16).unwrap();
    let spec = CovarianceSpec::white_noise(1.0);
    let sampler = FieldSampler::new(&spec, &lattice, &SpectrumOptions::default()).unwrap();
    let grid = TimeGrid::with_dt(2.0, 0.02).unwrap();
    let kernel = WalkKernel::lattice_walk(1, 0.02).unwrap();
    let check = polymer_core::partition::annealed_mean_check(&sampler, grid, &kernel, 0.5, 10_000, 3).unwrap();
    assert!((check.target - 0.25f64.exp()).abs() < 1e-12);
    assert!(check.passed(), "{check:?}");
}

#[test]
fn sweep_is_thread_invariant() {
    let spec = SweepSpec {
        model: ModelConfig::lattice_walk(CovarianceSpec::powered_exponential(1.0, 0.5, 2.0), 1, 32),
        betas: vec![0.0, 0.5, 1.0, 2.0],
        horizons: vec![1.0, 2.0, 4.0],
        n_replicas: 6,
        seed: 42,
    };
    let one = exec::with_threads(Some(1), || beta_sweep(spec.clone())).unwrap();
    let many = exec::with_threads(Some(4), || beta_sweep(spec.clone())).unwrap();
    let again = beta_sweep(spec).unwrap();
    assert_eq!(one.curve(), many.curve());
    assert_eq!(one.curve(), again.curve());
    assert!(one.all_points().points.iter().all(|p| p.beta > 0.0 || p.mean_p == 0.0));
}
