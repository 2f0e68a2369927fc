//! Scan the parameter box: noise-free decay constants at the corners and
//! the spread of the noisy decay constant at the center.

use chainsbi::{
    extract_psp_heights, fit_decay_constant, run_trial, DigitalParameterSpace, Layout, NoiseModel,
    StimulusProtocol,
};

fn tau(space: &DigitalParameterSpace, theta: [f64; 2], noise: &NoiseModel, seed: u64) -> f64 {
    let proto = StimulusProtocol::sequential(space.n_compartments);
    let t = run_trial(&theta, space, Layout::Global, &proto, noise, seed).unwrap();
    let h = extract_psp_heights(&t, &proto).unwrap();
    fit_decay_constant(&h.first_column()).unwrap().tau
}

fn main() {
    let space = DigitalParameterSpace::default();
    println!("g_leak range {:?} µS", space.g_leak_range);
    println!("g_axial range {:?} µS", space.g_axial_range);
    println!("w_syn {} nA", space.constants.w_syn);
    let quiet = NoiseModel::disabled();
    for theta in [[0.0, 0.0], [0.0, 1022.0], [1022.0, 0.0], [1022.0, 1022.0], [511.0, 511.0]] {
        println!("tau{theta:?} = {:.4}", tau(&space, theta, &quiet, 0));
    }
    let noise = NoiseModel::default();
    let n = 2000;
    let draws: Vec<f64> = (0..n).map(|s| tau(&space, [511.0, 511.0], &noise, s)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
    println!("noisy center: mean {mean:.4} sd {sd:.4}");
}
