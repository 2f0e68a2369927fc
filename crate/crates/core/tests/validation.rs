use chainsbi::seed::{rng_from_seed, Rng};
use chainsbi::snpe::{measure_target, ConditionalDensity, Simulator, TargetObservation, UniformBoxPrior};
use chainsbi::validation::*;
use chainsbi::{Layout, NoiseModel, ObservableKind, Result};
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// q(θ | x) = N(x, sd²) per coordinate.
struct GaussianAround {
    sd: f64,
    dim: usize,
}

impl ConditionalDensity for GaussianAround {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_prob(&self, thetas: ArrayView2<f64>, x: &[f64]) -> Result<Vec<f64>> {
        Ok(thetas
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(x).map(|(t, m)| -0.5 * ((t - m) / self.sd).powi(2) - self.sd.ln()).sum())
            .collect())
    }

    fn sample(&self, x: &[f64], count: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((count, self.dim), |(_, k)| x[k] + self.sd * rng.sample::<f64, _>(StandardNormal)))
    }

    fn is_amortized(&self) -> bool {
        true
    }
}

/// Always returns the same point.
struct PointMass(Vec<f64>);

impl ConditionalDensity for PointMass {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn log_prob(&self, thetas: ArrayView2<f64>, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; thetas.nrows()])
    }

    fn sample(&self, _x: &[f64], count: usize, _rng: &mut Rng) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn((count, self.0.len()), |(_, k)| self.0[k]))
    }

    fn is_amortized(&self) -> bool {
        false
    }
}

/// x = θ + N(0, 20²) inside a box wide enough for truncation to be negligible.
fn toy_simulator(theta: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    Ok(theta.iter().map(|t| t + 20.0 * rng.sample::<f64, _>(StandardNormal)).collect())
}

fn toy_prior() -> UniformBoxPrior {
    UniformBoxPrior {
        bounds: vec![(-5000.0, 5000.0); 2],
    }
}

#[test]
fn perfect_posterior_has_zero_predictive_distance() {
    let sim = Simulator::new(Layout::Global, ObservableKind::FirstColumn).with_noise(NoiseModel::disabled());
    let target = measure_target(&sim, &[300.0, 700.0], 3, 0).unwrap();
    assert_eq!(target.sigma_star, Some(vec![0.0; 4]));
    let ppc = posterior_predictive_check(&PointMass(vec![300.0, 700.0]), &UniformBoxPrior::digital(2), &sim, &target, 50, 1).unwrap();
    assert_eq!(ppc.mean_euclidean_distance, 0.0);
    assert_eq!(ppc.n_samples, 50);
    // zero target spread: scaled statistics are not defined
    assert!(ppc.scaled_sd.is_none());
}

#[test]
fn uninformative_posterior_is_calibrated() {
    let prior = UniformBoxPrior::digital(2);
    let double = PriorAsPosterior { prior: prior.clone() };
    let sim = Simulator::new(Layout::Global, ObservableKind::Tau);
    let simulate = |t: &[f64], s: u64| sim.observe(t, s).map(|x| x.values);
    let curve = expected_coverage(&double, &prior, &simulate, 1000, 200, 4).unwrap();
    assert!(curve.max_deviation() <= 0.04, "{}", curve.max_deviation());
    assert!(curve.empirical_coverage.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn exact_posterior_is_calibrated_and_narrow_one_is_not() {
    let prior = toy_prior();
    let exact = expected_coverage(&GaussianAround { sd: 20.0, dim: 2 }, &prior, &toy_simulator, 1000, 500, 2).unwrap();
    assert!(exact.max_deviation() <= 0.05, "{}", exact.max_deviation());
    let narrow = expected_coverage(&GaussianAround { sd: 10.0, dim: 2 }, &prior, &toy_simulator, 1000, 500, 2).unwrap();
    for (l, c) in narrow.credibility_levels.iter().zip(&narrow.empirical_coverage) {
        assert!(c < l, "level {l}: {c}");
    }
}

#[test]
fn coverage_rejects_targeted_posteriors() {
    let prior = toy_prior();
    assert!(expected_coverage(&PointMass(vec![0.0, 0.0]), &prior, &toy_simulator, 10, 10, 0).is_err());
}

#[test]
fn independent_uniforms_are_uncorrelated() {
    let mut rng = rng_from_seed(12);
    let s = Array2::from_shape_fn((10_000, 2), |_| rng.random::<f64>());
    let c = pearson_correlation_matrix(s.view()).unwrap();
    assert!(c.r[0][1].abs() < 0.03);
    assert_eq!(c.r[0][1], c.r[1][0]);
}

#[test]
fn grid_map_structure() {
    let sim = Simulator::new(Layout::Global, ObservableKind::Tau);
    let grid = grid_search(&sim, 40, false).unwrap();
    assert_eq!(grid.to_csv().lines().count(), 1601);
    let (rows, cols) = grid.monotone_fractions();
    assert!(rows >= 0.95 && cols >= 0.95, "{rows} {cols}");
    let (lo, hi) = grid.tau_range();
    assert!(lo <= 0.3 && hi >= 3.0, "{lo}..{hi}");
    assert!(grid.failure.iter().flatten().all(|f| !f));
    // same value as a noise-free target at a node
    let quiet = sim.clone().with_noise(NoiseModel::disabled());
    let (i, j) = (13, 27);
    let t = measure_target(&quiet, &[grid.leak_axis[i], grid.axial_axis[j]], 1, 0).unwrap();
    assert!((t.x()[0] - grid.tau[i][j]).abs() <= 1e-9);
    assert!(t.sigma_star.is_none());
    assert!(grid_search(&Simulator::new(Layout::PerElement, ObservableKind::Tau), 4, false).is_err());
}

#[test]
fn grid_posterior_matches_analytic_gaussian_likelihood() {
    // noise-free heights plus Gaussian observation noise of known sd
    let sd = [0.3, 0.15, 0.08, 0.05];
    let quiet = Simulator::new(Layout::Global, ObservableKind::FirstColumn).with_noise(NoiseModel::disabled());
    let axis = digital_axis(40);
    let clean: Vec<Vec<Vec<f64>>> =
        axis.iter().map(|&l| axis.iter().map(|&a| quiet.observe(&[l, a], 0).unwrap().values).collect()).collect();
    let index = |v: f64| axis.iter().position(|&a| a == v).unwrap();
    let simulate = |t: &[f64], s: u64| -> Result<Vec<f64>> {
        let mut rng = rng_from_seed(s);
        let x = &clean[index(t[0])][index(t[1])];
        Ok(x.iter().zip(&sd).map(|(v, e)| v + e * rng.sample::<f64, _>(StandardNormal)).collect())
    };
    let x_star = quiet.observe(&[600.0, 350.0], 0).unwrap().values;
    let reference =
        reference_posterior_grid(&simulate, &x_star, &axis, &axis, 400, LikelihoodEstimator::Gaussian, 3).unwrap();
    let total: f64 = reference.mass.iter().flatten().sum();
    assert!((total - 1.0).abs() <= 1e-12);
    let mut analytic: Vec<Vec<f64>> = clean
        .iter()
        .map(|row| {
            row.iter()
                .map(|h| h.iter().zip(&x_star).zip(&sd).map(|((m, x), e)| -0.5 * ((x - m) / e).powi(2)).sum::<f64>())
                .collect()
        })
        .collect();
    let m = analytic.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = analytic.iter().flatten().map(|l| (l - m).exp()).sum();
    for row in &mut analytic {
        for v in row.iter_mut() {
            *v = (*v - m).exp() / z;
        }
    }
    let tv = total_variation(&reference.mass, &analytic);
    assert!(tv <= 0.05, "total variation {tv}");
}

#[test]
fn tau_grid_posterior_follows_the_contour() {
    let sim = Simulator::new(Layout::Global, ObservableKind::Tau);
    let target: TargetObservation = measure_target(&sim, &[511.0, 511.0], 100, 7).unwrap();
    let axis = digital_axis(40);
    let reference = reference_posterior_2d(&sim, target.x(), &axis, &axis, 30, LikelihoodEstimator::Gaussian, 9).unwrap();
    let grid = grid_search(&sim, 40, false).unwrap();
    let sigma = target.sigma_star.as_ref().unwrap()[0];
    let band: f64 = (0..40)
        .flat_map(|i| (0..40).map(move |j| (i, j)))
        .filter(|&(i, j)| (grid.tau[i][j] - target.x()[0]).abs() <= 3.0 * sigma)
        .map(|(i, j)| reference.mass[i][j])
        .sum();
    assert!(band >= 0.8, "band mass {band}");
}
