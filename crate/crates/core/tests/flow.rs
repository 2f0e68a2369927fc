use chainsbi::flow::{ConditionalFlow, FlowConfig, Standardization};
use chainsbi::seed::rng_from_seed;
use ndarray::{array, Array2};
use rand::Rng;

fn scrambled(config: FlowConfig, support: Vec<(f64, f64)>, scale: f64, seed: u64) -> ConditionalFlow {
    let mut flow = ConditionalFlow::new(config, support).unwrap();
    let mut rng = rng_from_seed(seed);
    for p in flow.params_mut() {
        *p = rng.random_range(-scale..scale);
    }
    flow
}

fn random_rows(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng_from_seed(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

#[test]
fn fresh_flow_is_the_standardized_logit_map() {
    let mut flow = ConditionalFlow::new(FlowConfig::new(2, 3).with_architecture(3, 2, 8), vec![(0.0, 2.0), (-1.0, 1.0)]).unwrap();
    flow.standardization = Standardization {
        theta_mean: vec![0.3, -0.2],
        theta_sd: vec![1.5, 0.7],
        x_mean: vec![0.0; 3],
        x_sd: vec![1.0; 3],
    };
    let theta = [0.5, 0.25];
    let lp = flow.log_prob_given(array![[theta[0], theta[1]]].view(), &[1.0, -4.0, 2.0]).unwrap()[0];
    let mut expected = 0.0;
    for (k, (lo, hi)) in [(0.0, 2.0), (-1.0, 1.0)].iter().enumerate() {
        let w: f64 = hi - lo;
        let p = (theta[k] - lo) / w;
        let y = (p / (1.0 - p)).ln();
        let u = (y - flow.standardization.theta_mean[k]) / flow.standardization.theta_sd[k];
        expected += -0.5 * u * u - 0.5 * (2.0 * std::f64::consts::PI).ln() - flow.standardization.theta_sd[k].ln()
            - (w * p * (1.0 - p)).ln();
    }
    assert!((lp - expected).abs() < 1e-12, "{lp} vs {expected}");
}

#[test]
fn gradient_matches_central_differences() {
    let config = FlowConfig::new(3, 2).with_architecture(2, 2, 6).with_seed(1);
    let mut flow = scrambled(config, vec![(0.0, 1.0), (0.0, 1022.0), (-3.0, 2.0)], 0.5, 11);
    flow.standardization.theta_sd = vec![1.3, 0.8, 2.0];
    flow.standardization.x_mean = vec![0.5, -1.0];
    let mut thetas = random_rows(7, 3, 0.05, 0.95, 2);
    thetas.column_mut(1).mapv_inplace(|v| v * 1022.0);
    thetas.column_mut(2).mapv_inplace(|v| -3.0 + 5.0 * v);
    let xs = random_rows(7, 2, -2.0, 2.0, 3);
    let weights = [0.3, -1.0, 0.7, 2.0, 0.1, -0.4, 1.1];
    let objective = |f: &ConditionalFlow| -> f64 {
        f.log_prob(thetas.view(), xs.view()).unwrap().iter().zip(&weights).map(|(l, w)| l * w).sum()
    };
    let mut grad = vec![0.0; flow.n_parameters()];
    let lp = flow.log_prob_with_grad(thetas.view(), xs.view(), &weights, &mut grad).unwrap();
    let direct = flow.log_prob(thetas.view(), xs.view()).unwrap();
    for (a, b) in lp.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut rng = rng_from_seed(99);
    let h = 1e-6;
    for _ in 0..40 {
        let i = rng.random_range(0..flow.n_parameters());
        let orig = flow.params()[i];
        flow.params_mut()[i] = orig + h;
        let up = objective(&flow);
        flow.params_mut()[i] = orig - h;
        let down = objective(&flow);
        flow.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
        assert!(err < 1e-5, "param {i}: analytic {} numeric {fd}", grad[i]);
    }
}

#[test]
fn single_transform_is_lower_triangular() {
    let mut config = FlowConfig::new(4, 1).with_architecture(1, 2, 12);
    config.permute_between = false;
    let flow = scrambled(config, vec![(0.0, 1.0); 4], 0.6, 5);
    let theta = [0.2, 0.7, 0.4, 0.55];
    let x = array![[0.3]];
    let base = |t: &[f64]| flow.to_base(Array2::from_shape_vec((1, 4), t.to_vec()).unwrap().view(), x.view()).unwrap();
    let z0 = base(&theta);
    for j in 0..4 {
        let mut t = theta;
        t[j] += 1e-4;
        let z = base(&t);
        for k in 0..4 {
            let dz = (z[[0, k]] - z0[[0, k]]).abs();
            if j > k {
                assert_eq!(dz, 0.0, "output {k} depends on later coordinate {j}");
            } else if j == k {
                assert!(dz > 0.0);
            }
        }
    }
}

#[test]
fn density_integrates_to_one() {
    let flow = scrambled(FlowConfig::new(2, 1).with_architecture(3, 2, 8), vec![(0.0, 4.0), (-1.0, 1.0)], 0.4, 21);
    // integrate in logit coordinates: θ = lo + w σ(y), dθ = w σ(y)(1-σ(y)) dy
    let n = 400;
    let (a, b) = (-18.0, 18.0);
    let step = (b - a) / n as f64;
    let sig = |y: f64| 1.0 / (1.0 + (-y).exp());
    let mut thetas = Array2::zeros((n * n, 2));
    let mut jac = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (y0, y1) = (a + (i as f64 + 0.5) * step, a + (j as f64 + 0.5) * step);
            let (s0, s1) = (sig(y0), sig(y1));
            let r = i * n + j;
            thetas[[r, 0]] = 4.0 * s0;
            thetas[[r, 1]] = -1.0 + 2.0 * s1;
            jac[r] = 4.0 * s0 * (1.0 - s0) * 2.0 * s1 * (1.0 - s1);
        }
    }
    for x in [-1.5, 0.0, 2.0] {
        let lp = flow.log_prob_given(thetas.view(), &[x]).unwrap();
        let mass: f64 = lp
            .iter()
            .zip(&jac)
            .filter(|(l, _)| l.is_finite())
            .map(|(l, j)| l.exp() * j)
            .sum::<f64>()
            * step
            * step;
        assert!((mass - 1.0).abs() < 2e-3, "x = {x}: mass {mass}");
    }
}

#[test]
fn inverse_round_trip_and_support() {
    let flow = scrambled(FlowConfig::new(3, 2).with_architecture(4, 2, 10), vec![(0.0, 1022.0); 3], 0.5, 8);
    let mut rng = rng_from_seed(4);
    let x = [0.4, -0.9];
    let samples = flow.sample(&x, 500, &mut rng).unwrap();
    assert!(samples.iter().all(|v| *v > 0.0 && *v < 1022.0));
    let xs = chainsbi::flow::broadcast_rows(&x, 500);
    let z = flow.to_base(samples.view(), xs.view()).unwrap();
    let back = flow.from_base(z, &x).unwrap();
    for (a, b) in samples.iter().zip(&back) {
        assert!((a - b).abs() < 1e-7 * 1022.0, "{a} vs {b}");
    }
}

#[test]
fn samples_follow_the_density() {
    let flow = scrambled(FlowConfig::new(1, 1).with_architecture(2, 2, 8), vec![(0.0, 1.0)], 0.8, 13);
    let x = [0.7];
    let n_bins = 20;
    // bin probabilities by fine quadrature of the density
    let fine = 200;
    let grid: Vec<f64> = (0..n_bins * fine).map(|i| (i as f64 + 0.5) / (n_bins * fine) as f64).collect();
    let lp = flow.log_prob_given(Array2::from_shape_vec((grid.len(), 1), grid.clone()).unwrap().view(), &x).unwrap();
    let mut probs = vec![0.0; n_bins];
    for (i, l) in lp.iter().enumerate() {
        probs[i / fine] += l.exp() / (n_bins * fine) as f64;
    }
    let total: f64 = probs.iter().sum();
    assert!((total - 1.0).abs() < 1e-2, "{total}");
    let n = 20_000;
    let samples = flow.sample(&x, n, &mut rng_from_seed(77)).unwrap();
    let mut counts = vec![0.0; n_bins];
    for v in samples.iter() {
        counts[((v * n_bins as f64) as usize).min(n_bins - 1)] += 1.0;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&probs)
        .map(|(o, p)| {
            let e = p / total * n as f64;
            (o - e) * (o - e) / e
        })
        .sum();
    // 0.999 quantile of χ² with 19 degrees of freedom
    assert!(chi2 < 43.82, "chi2 {chi2}");
}

#[test]
fn sample_moments_match_quadrature() {
    let flow = scrambled(FlowConfig::new(2, 2).with_architecture(2, 2, 8), vec![(0.0, 1.0); 2], 0.5, 31);
    let x = [0.1, 1.2];
    let n = 300;
    let pts: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let mut thetas = Array2::zeros((n * n, 2));
    for i in 0..n {
        for j in 0..n {
            thetas[[i * n + j, 0]] = pts[i];
            thetas[[i * n + j, 1]] = pts[j];
        }
    }
    let lp = flow.log_prob_given(thetas.view(), &x).unwrap();
    let w: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let z: f64 = w.iter().sum();
    let mean: Vec<f64> = (0..2).map(|k| (0..n * n).map(|r| w[r] * thetas[[r, k]]).sum::<f64>() / z).collect();
    let samples = flow.sample(&x, 40_000, &mut rng_from_seed(3)).unwrap();
    for k in 0..2 {
        let col = samples.column(k);
        let m = col.mean().unwrap();
        let sd = col.std(1.0);
        // five standard errors
        assert!((m - mean[k]).abs() < 5.0 * sd / 200.0, "dim {k}: {m} vs {}", mean[k]);
    }
}
