//! Reconstruction training with Adam, plus the two RBF initialization
//! pipelines (random centers, or K-means on a pre-trained base model).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{contract, shape_err, Error, Result};
use crate::init::{kmeans_init, GammaInitMode, KMeansInitConfig};
use crate::model::{Dropout, ModelConfig, Parameters, RestadModel};
use crate::tensor::{Tape, Var};

const DROPOUT_SALT: u64 = 0x4452_4f50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Global L2 norm clip on the gradient; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            shuffle: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} outside (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `(1/B) sum_i ||x_i - x_hat_i||_F^2` for `[B, T, d]` inputs.
pub fn mse_loss(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(shape_err("mse_loss", tape.shape(x), tape.shape(x_hat)));
    }
    let b = tape.shape(x).first().copied().unwrap_or(1).max(1);
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: alloc::vec![0.0; n],
            v: alloc::vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update; `t` is the 1-based step count.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    t: u64,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.adam_eps);
    }
}

/// Adam over every trainable tensor of a model, in visit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub t: u64,
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(model: &RestadModel) -> Self {
        let states = model
            .named_parameters()
            .iter()
            .map(|(_, p)| AdamState::new(p.numel()))
            .collect();
        Self { t: 0, states }
    }

    pub fn step(&mut self, model: &mut RestadModel, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let scale = match cfg.grad_clip {
            Some(c) => {
                let mut sq = 0.0;
                model.visit("", &mut |_, p| {
                    sq += p.grad().map_or(0.0, |g| g.iter().map(|v| v * v).sum());
                });
                let norm = libm::sqrt(sq);
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let mut i = 0;
        let mut err = None;
        let t = self.t;
        let states = &mut self.states;
        model.visit_mut("", &mut |name, p| {
            let Some(state) = states.get_mut(i) else {
                err = Some(contract(format!("no optimizer state for {name}")));
                return;
            };
            i += 1;
            let (data, grad) = p.data_and_grad_mut();
            if let Some(g) = grad {
                if scale == 1.0 {
                    adam_step(data, g, state, t, cfg);
                } else {
                    let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    adam_step(data, &g, state, t, cfg);
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub checksum: String,
}

/// Trains with a zero clock. See [`fit_timed`].
pub fn fit(model: &mut RestadModel, data: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainLog> {
    fit_timed(model, data, cfg, &mut || 0.0)
}

/// Minibatch Adam on the reconstruction loss. `clock` returns seconds from
/// any fixed origin and is only used for the per-epoch wall time.
pub fn fit_timed(
    model: &mut RestadModel,
    data: &WindowedDataset,
    cfg: &TrainConfig,
    clock: &mut dyn FnMut() -> f64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.dim != model.config().input_dim || data.window_len > model.config().window_len {
        return Err(contract(format!(
            "windows of [{}, {}] do not fit the model",
            data.window_len, data.dim
        )));
    }
    if data.windows.iter().any(|v| !v.is_finite()) {
        return Err(contract("training windows contain non-finite values"));
    }
    let mut order: Vec<usize> = (0..data.n_windows).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SALT);
    let rate = model.config().dropout;
    let mut adam = Adam::new(model);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = clock();
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let input = data.select(chunk);
            let x = tape.leaf(&[chunk.len(), data.window_len, data.dim], input, false)?;
            let dropout = (rate > 0.0).then_some(Dropout {
                rate,
                rng: &mut dropout_rng,
            });
            let out = model.forward(&mut tape, x, true, dropout)?;
            let loss = mse_loss(&mut tape, x, out.reconstruction)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    loss: value,
                });
            }
            tape.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&tape, &out.bindings)?;
            adam.step(model, cfg)?;
            total += value * chunk.len() as f64;
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss: total / data.n_windows.max(1) as f64,
            wall_secs: clock() - started,
        });
    }
    Ok(TrainLog {
        epochs,
        checksum: model.checksum(),
    })
}

/// Builds a model with randomly initialized RBF centers and trains it.
pub fn train_restad_random(
    data: &WindowedDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(RestadModel, TrainLog)> {
    let mut model = RestadModel::new(model_cfg.clone())?;
    let log = fit_timed(&mut model, data, train_cfg, clock)?;
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansTrainLog {
    pub base: TrainLog,
    pub gamma_init: f64,
    pub full: TrainLog,
}

/// Two phases: train a base model without the RBF layer, fit centers to its
/// latents, then train the full model. The full model reuses the embedding
/// and the encoder layers up to the RBF position from the base; later layers
/// and the head change width and start fresh.
pub fn train_restad_kmeans(
    data: &WindowedDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    gamma_mode: GammaInitMode,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(RestadModel, KMeansTrainLog)> {
    if !model_cfg.rbf_enabled {
        return Err(Error::Config(
            "K-means init needs rbf_enabled = true".into(),
        ));
    }
    model_cfg.validate()?;
    let base_cfg = ModelConfig {
        rbf_enabled: false,
        ..model_cfg.clone()
    };
    let mut base = RestadModel::new(base_cfg)?;
    let base_log = fit_timed(&mut base, data, train_cfg, clock)?;

    let km_cfg = KMeansInitConfig {
        n_centers: model_cfg.n_centers,
        rbf_position: model_cfg.rbf_position,
        seed: model_cfg.seed,
        gamma_mode,
        batch_size: train_cfg.batch_size,
        ..KMeansInitConfig::default()
    };
    let rbf = kmeans_init(&base, data, &km_cfg)?;
    let gamma_init = rbf.gamma();

    let mut model = RestadModel::new(model_cfg.clone())?;
    model.token = base.token.clone();
    let p = model_cfg.rbf_position;
    model.layers[..p].clone_from_slice(&base.layers[..p]);
    model.set_rbf(rbf)?;
    let full = fit_timed(&mut model, data, train_cfg, clock)?;
    Ok((
        model,
        KMeansTrainLog {
            base: base_log,
            gamma_init,
            full,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, normalize, windowize, SynthSpec};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            window_len: 20,
            d_model: 8,
            ffn_dim: 16,
            n_heads: 2,
            n_layers: 2,
            n_centers: 4,
            rbf_position: 1,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn tiny_data() -> WindowedDataset {
        let spec = SynthSpec {
            train_len: 400,
            test_len: 100,
            ..SynthSpec::clean(1)
        };
        let d = normalize(&generate_synthetic(&spec).unwrap()).unwrap();
        windowize(&d.train, 20).unwrap()
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 1, 2], alloc::vec![1.0, 2.0], false).unwrap();
        let z = tape.leaf(&[1, 1, 2], alloc::vec![0.0, 0.0], false).unwrap();
        let l = mse_loss(&mut tape, x, z).unwrap();
        assert_eq!(tape.value(l), [5.0]);
        let l0 = mse_loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.value(l0), [0.0]);
        let y = tape.leaf(&[1, 2, 1], alloc::vec![0.0, 0.0], false).unwrap();
        assert!(mse_loss(&mut tape, x, y).is_err());
    }

    proptest! {
        #[test]
        fn mse_gradient_is_scaled_residual(
            b in 1usize..4,
            vals in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 3 * 2),
        ) {
            let n = b * 3 * 2;
            let (x, xh) = (vals[..n].to_vec(), vals[n..2 * n].to_vec());
            let mut tape = Tape::new();
            let xv = tape.leaf(&[b, 3, 2], x.clone(), false).unwrap();
            let hv = tape.leaf(&[b, 3, 2], xh.clone(), true).unwrap();
            let l = mse_loss(&mut tape, xv, hv).unwrap();
            tape.backward(l).unwrap();
            let g = tape.grad(hv).unwrap();
            let loss = |h: &[f64]| -> f64 {
                h.iter().zip(&x).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / b as f64
            };
            for i in 0..n {
                prop_assert!((g[i] - 2.0 * (xh[i] - x[i]) / b as f64).abs() < 1e-12);
                let mut up = xh.clone();
                let mut dn = xh.clone();
                up[i] += 1e-6;
                dn[i] -= 1e-6;
                let fd = (loss(&up) - loss(&dn)) / 2e-6;
                prop_assert!((fd - g[i]).abs() < 1e-5);
            }
            let doubled: Vec<f64> = x.iter().zip(&xh).map(|(a, c)| a + 2.0 * (c - a)).collect();
            prop_assert!((loss(&doubled) - 4.0 * loss(&xh)).abs() < 1e-9 * (1.0 + loss(&xh)));
        }
    }

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut p = alloc::vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1, &cfg);
        assert_eq!(p, [1.0, -2.0]);

        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.3, -5.0], &mut s, 1, &cfg);
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-9);

        let mut a = alloc::vec![0.5; 3];
        let mut b = alloc::vec![0.5; 3];
        let (mut sa, mut sb) = (AdamState::new(3), AdamState::new(3));
        for t in 1..5 {
            let g = [0.1 * t as f64, -0.2, 0.3];
            adam_step(&mut a, &g, &mut sa, t, &cfg);
            adam_step(&mut b, &g, &mut sb, t, &cfg);
        }
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let mut m = RestadModel::new(tiny_config()).unwrap();
        let before = m.clone();
        let log = fit(
            &mut m,
            &tiny_data(),
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(m.checksum(), before.checksum());
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let mut m = RestadModel::new(tiny_config()).unwrap();
        let before = m.checksum();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let log = fit(&mut m, &tiny_data(), &cfg).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert_eq!(m.checksum(), before);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            epochs: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let data = tiny_data();
        let mut a = RestadModel::new(tiny_config()).unwrap();
        let mut b = RestadModel::new(tiny_config()).unwrap();
        let la = fit(&mut a, &data, &cfg).unwrap();
        let lb = fit(&mut b, &data, &cfg).unwrap();
        assert_eq!(la, lb);
        assert!(la.epochs[4].mean_loss <= la.epochs[0].mean_loss);
        assert!(la.epochs.iter().all(|e| e.mean_loss.is_finite()));
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let mut m = RestadModel::new(tiny_config()).unwrap();
        m.head.bias = Tensor::new(&[2], alloc::vec![f64::INFINITY, 0.0])
            .unwrap()
            .with_grad();
        let err = fit(&mut m, &tiny_data(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFiniteLoss {
                epoch: 0,
                batch: 0,
                ..
            }
        ));
        assert!(alloc::format!("{err}").contains("batch 0"));
    }

    #[test]
    fn kmeans_pipeline_trains_gamma() {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (m, log) = train_restad_kmeans(
            &tiny_data(),
            &tiny_config(),
            &cfg,
            GammaInitMode::Reciprocal,
            &mut || 0.0,
        )
        .unwrap();
        let rbf = m.rbf.as_ref().unwrap();
        assert!(m.config().rbf_enabled);
        assert_eq!(rbf.centers.shape(), [4, 8]);
        assert_eq!(log.base.epochs.len(), 2);
        assert_ne!(rbf.gamma(), log.gamma_init);
    }

    #[test]
    fn kmeans_rejects_degenerate_latents() {
        // four distinct latent points and four centers: every point is a center
        let cfg = ModelConfig {
            window_len: 2,
            n_centers: 4,
            ..tiny_config()
        };
        let s = crate::data::Series::new(4, 2, alloc::vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
            .unwrap();
        let w = windowize(&s, 2).unwrap();
        let t = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let err = train_restad_kmeans(&w, &cfg, &t, GammaInitMode::Reciprocal, &mut || 0.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateInit(_)), "{err:?}");
    }
}
