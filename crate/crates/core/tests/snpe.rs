use chainsbi::flow::FlowConfig;
use chainsbi::seed::rng_from_seed;
use chainsbi::snpe::*;
use chainsbi::trainer::TrainConfig;
use chainsbi::{Error, Layout, NoiseModel, ObservableKind};
use ndarray::array;

fn tau_setup() -> (Simulator, UniformBoxPrior, SnpeConfig) {
    let sim = Simulator::new(Layout::Global, ObservableKind::Tau);
    let config = SnpeConfig {
        flow: FlowConfig::new(2, 1).with_architecture(1, 2, 20),
        train: TrainConfig {
            batch_size: 25,
            max_epochs: 60,
            ..TrainConfig::default()
        },
        ..SnpeConfig::default()
    };
    (sim, UniformBoxPrior::digital(2), config)
}

fn small_run(seed: u64) -> InferenceRun {
    let (sim, prior, config) = tau_setup();
    let target = measure_target(&sim, &[511.0, 511.0], 20, 0).unwrap();
    let schedule = RoundSchedule::new(vec![60, 50, 50]).unwrap();
    run_snpe(&sim, &prior, &target, &schedule, &config, seed).unwrap()
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn budget_matches_schedule_and_runs_are_reproducible() {
    let run = small_run(5);
    assert_eq!(run.total_simulations(), 160);
    assert_eq!(run.rounds.len(), 3);
    assert!(run.rounds[0].record.amortized && !run.rounds[2].record.amortized);
    for r in &run.rounds {
        assert_eq!(r.thetas.nrows(), r.record.n_simulations);
        assert!(r.thetas.iter().all(|v| *v > 0.0 && *v < 1022.0));
    }
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run.save(a.path()).unwrap();
    small_run(5).save(b.path()).unwrap();
    let files = dir_bytes(a.path());
    assert!(files.iter().any(|(n, _)| n.ends_with("flow.bin")));
    assert_eq!(files, dir_bytes(b.path()));
    let other = tempfile::tempdir().unwrap();
    small_run(6).save(other.path()).unwrap();
    assert_ne!(files, dir_bytes(other.path()));
}

#[test]
fn saved_runs_load_back() {
    let run = small_run(8);
    let dir = tempfile::tempdir().unwrap();
    run.save(dir.path()).unwrap();
    let back = InferenceRun::load(dir.path()).unwrap();
    assert_eq!(back.manifest, run.manifest);
    assert_eq!(back.report(), run.report());
    let probe = array![[100.0, 900.0], [511.0, 511.0]];
    let x = run.manifest.target.x();
    assert_eq!(
        run.final_posterior().log_prob(probe.view(), x).unwrap(),
        back.final_posterior().log_prob(probe.view(), x).unwrap()
    );
    for (a, b) in run.rounds.iter().zip(&back.rounds) {
        assert_eq!(a.thetas, b.thetas);
        for (p, q) in a.xs.iter().zip(&b.xs) {
            assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }
}

#[test]
fn tiny_first_round_is_rejected() {
    let (sim, prior, config) = tau_setup();
    let target = measure_target(&sim, &[511.0, 511.0], 5, 0).unwrap();
    let err = run_snpe(&sim, &prior, &target, &RoundSchedule::new(vec![2]).unwrap(), &config, 0).unwrap_err();
    assert!(matches!(err, Error::DatasetTooSmall { .. }), "{err}");
}

#[test]
fn sampling_contracts() {
    let run = small_run(1);
    let prior = &run.manifest.prior;
    let post = run.final_posterior();
    let x = run.manifest.target.x().to_vec();
    let empty = posterior_sample(&post, prior, &x, 0, &mut rng_from_seed(0)).unwrap();
    assert_eq!(empty.samples.dim(), (0, 2));
    let s = posterior_sample(&post, prior, &x, 500, &mut rng_from_seed(0)).unwrap();
    assert!(s.samples.iter().all(|v| *v > 0.0 && *v < 1022.0));
    assert!(s.acceptance_rate > 0.0 && s.acceptance_rate <= 1.0);
    let other: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
    assert!(matches!(posterior_sample(&post, prior, &other, 10, &mut rng_from_seed(0)), Err(Error::NotAmortized)));
    // the round-0 flow accepts any observation
    assert!(posterior_sample(&run.amortized_posterior(), prior, &other, 10, &mut rng_from_seed(0)).is_ok());
}

#[test]
fn ensembles() {
    let run = small_run(2);
    let x = run.manifest.target.x().to_vec();
    let probe = array![[100.0, 900.0], [511.0, 511.0], [1000.0, 20.0]];
    let single = run.final_posterior().log_prob(probe.view(), &x).unwrap();
    let same = PosteriorEnsemble::new(vec![run.final_posterior(); 3]).unwrap();
    for (a, b) in same.log_prob(probe.view(), &x).unwrap().iter().zip(&single) {
        assert!((a - b).abs() <= 1e-12);
    }

    let other = small_run(3);
    let q = other.final_posterior().log_prob(probe.view(), &x).unwrap();
    let mixed = build_ensemble(&[run.clone(), other.clone()]).unwrap();
    for ((m, a), b) in mixed.log_prob(probe.view(), &x).unwrap().iter().zip(&single).zip(&q) {
        let expected = (0.5 * (a.exp() + b.exp())).ln();
        assert!((m - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{m} {expected}");
    }
    assert!(!mixed.is_amortized());
    assert!(build_amortized_ensemble(&[run.clone(), other]).unwrap().is_amortized());

    assert!(matches!(build_ensemble(&[run.clone(), run.clone()]), Err(Error::EnsembleConfig(_))));
    let mut moved = small_run(4);
    moved.manifest.target = measure_target(&moved.manifest.simulator, &[300.0, 300.0], 5, 0).unwrap();
    assert!(matches!(build_ensemble(&[run, moved]), Err(Error::EnsembleConfig(_))));
    assert!(matches!(build_ensemble(&[]), Err(Error::EnsembleConfig(_))));
}

#[test]
fn target_measurement() {
    let sim = Simulator::new(Layout::Global, ObservableKind::Tau);
    let quiet = sim.clone().with_noise(NoiseModel::disabled());
    assert_eq!(measure_target(&quiet, &[511.0, 511.0], 10, 3).unwrap().sigma_star, Some(vec![0.0]));
    assert!(measure_target(&sim, &[511.0, 511.0], 1, 3).unwrap().sigma_star.is_none());
    assert!(measure_target(&sim, &[511.0, 511.0], 0, 3).is_err());
    let t = measure_target(&sim, &[511.0, 511.0], 100, 3).unwrap();
    assert!(t.x()[0] > 0.9 && t.x()[0] < 1.5, "{}", t.x()[0]);
    let sd = t.sigma_star.as_ref().unwrap()[0];
    assert!(sd > 0.04 / 3.0 && sd < 0.04 * 3.0, "{sd}");
    assert_eq!(t, measure_target(&sim, &[511.0, 511.0], 100, 3).unwrap());
}
