//! Full-model gradients of the reconstruction loss against central finite
//! differences, one parameter entry at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restad_core::model::{ModelConfig, Parameters, RestadModel};
use restad_core::tensor::Tape;
use restad_core::train::mse_loss;

fn config() -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        window_len: 8,
        d_model: 8,
        ffn_dim: 16,
        n_heads: 2,
        n_layers: 3,
        rbf_enabled: true,
        rbf_position: 2,
        n_centers: 4,
        dropout: 0.0,
        seed: 11,
    }
}

fn loss(model: &RestadModel, x: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(&[2, 8, 3], x.to_vec(), false).unwrap();
    let out = model.forward(&mut tape, xv, false, None).unwrap();
    let l = mse_loss(&mut tape, xv, out.reconstruction).unwrap();
    tape.value(l)[0]
}

/// Worst relative error per parameter group, as (name, error).
fn check(mut model: RestadModel, x: &[f64]) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(&[2, 8, 3], x.to_vec(), false).unwrap();
    let out = model.forward(&mut tape, xv, true, None).unwrap();
    let l = mse_loss(&mut tape, xv, out.reconstruction).unwrap();
    tape.backward(l).unwrap();
    model.zero_grad();
    model.accumulate_grads(&tape, &out.bindings).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = model
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.grad().expect("tracked parameter").to_vec()))
        .collect();
    let h = 1e-5;
    let mut worst = Vec::new();
    for (p, (name, grad)) in analytic.iter().enumerate() {
        let mut err: f64 = 0.0;
        for (i, &a) in grad.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let mut k = 0;
                m.visit_mut("", &mut |_, t| {
                    if k == p {
                        t.data_mut()[i] += delta;
                    }
                    k += 1;
                });
                loss(&m, x)
            };
            // a ReLU input within h of zero puts a kink inside the stencil;
            // smaller steps step around it
            let rel = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            let mut e = f64::INFINITY;
            for step in [h, h / 10.0, h / 100.0] {
                e = e.min(rel((shifted(step) - shifted(-step)) / (2.0 * step)));
                if e < 1e-4 {
                    break;
                }
            }
            err = err.max(e);
        }
        worst.push((name.clone(), err));
    }
    worst
}

#[test]
fn every_parameter_group_matches_finite_differences() {
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
        let model = RestadModel::new(ModelConfig { seed, ..config() }).unwrap();
        let groups = check(model, &x);
        assert!(groups.iter().any(|(n, _)| n.starts_with("rbf")));
        for (name, err) in &groups {
            assert!(*err < 1e-4, "seed {seed}, {name}: relative error {err:.3e}");
        }
    }
}
