//! The reconstruction network: token + sinusoidal embedding, a stack of
//! post-norm Transformer encoder layers, an optional RBF similarity layer
//! after a configurable encoder layer, and a linear reconstruction head.
//!
//! Layers after the RBF layer operate at width `n_centers`, because the
//! similarity vector itself is what they consume.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::SCHEMA_VERSION;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Offset mixed into the model seed for the RBF layer's random draw.
const RBF_SEED_SALT: u64 = 0x5242_465f_4c41_5952;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Features per time point.
    pub input_dim: usize,
    /// Window length; also the length of the positional table.
    pub window_len: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub rbf_enabled: bool,
    /// 1-based index of the encoder layer whose output feeds the RBF layer.
    pub rbf_position: usize,
    pub n_centers: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            window_len: 100,
            d_model: 32,
            ffn_dim: 128,
            n_heads: 8,
            n_layers: 3,
            rbf_enabled: true,
            rbf_position: 2,
            n_centers: 32,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("window_len", self.window_len),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("n_centers", self.n_centers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rbf_enabled {
            if self.rbf_position == 0 || self.rbf_position > self.n_layers {
                return Err(Error::Config(format!(
                    "rbf_position {} outside [1, {}]",
                    self.rbf_position, self.n_layers
                )));
            }
            if self.rbf_position < self.n_layers && !self.n_centers.is_multiple_of(self.n_heads) {
                return Err(Error::Config(format!(
                    "n_centers {} feeds an attention layer and must be divisible by n_heads {}",
                    self.n_centers, self.n_heads
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Width of the hidden state entering 0-based encoder layer `layer`
    /// (or the head, for `layer == n_layers`).
    pub fn width_before(&self, layer: usize) -> usize {
        if self.rbf_enabled && layer >= self.rbf_position {
            self.n_centers
        } else {
            self.d_model
        }
    }
}

/// Records parameter leaves on a tape in visiting order.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: Vec<Var>,
    track: bool,
}

impl Bindings {
    pub fn new(track: bool) -> Self {
        Self {
            vars: Vec::new(),
            track,
        }
    }

    fn bind(&mut self, tape: &mut Tape, t: &Tensor) -> Var {
        let v = if self.track {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.vars.push(v);
        v
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Optional dropout source for training-mode forwards.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

fn apply_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    let Some(d) = dropout.as_mut() else {
        return Ok(x);
    };
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - d.rate);
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if d.rng.random::<f64>() < d.rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let shape = tape.shape(x).to_vec();
    let m = tape.leaf(&shape, mask, false)?;
    tape.mul(x, m)
}

/// Visits parameters with dotted names, in the order forward binds them.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / libm::sqrt(input as f64);
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = Tensor::new(&[input, output], draw(input * output)).expect("sized");
        let bias = Tensor::new(&[output], draw(output)).expect("sized");
        Self {
            weight: weight.with_grad(),
            bias: bias.with_grad(),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]).with_grad(),
            bias: Tensor::zeros(&[output]).with_grad(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Bindings, x: Var) -> Result<Var> {
        let w = b.bind(tape, &self.weight);
        let bias = b.bind(tape, &self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, bias)
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Tensor::new(&[width], vec![1.0; width])
                .expect("sized")
                .with_grad(),
            bias: Tensor::zeros(&[width]).with_grad(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Bindings, x: Var) -> Result<Var> {
        let g = b.bind(tape, &self.gain);
        let bias = b.bind(tape, &self.bias);
        tape.layer_norm(x, g, bias, LAYER_NORM_EPS)
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(width: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            n_heads,
            query: Linear::new(width, width, rng),
            key: Linear::new(width, width, rng),
            value: Linear::new(width, width, rng),
            output: Linear::new(width, width, rng),
        }
    }

    /// Scaled dot-product self-attention over `x: [B, T, w]`.
    pub fn forward(&self, tape: &mut Tape, b: &mut Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [batch, len, width] = shape[..] else {
            return Err(contract(format!(
                "attention expects [B, T, w], got {shape:?}"
            )));
        };
        if width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "width {width} not divisible by {} heads",
                self.n_heads
            )));
        }
        let head_dim = width / self.n_heads;
        let split = [batch, len, self.n_heads, head_dim];

        let q = self.query.forward(tape, b, x)?;
        let k = self.key.forward(tape, b, x)?;
        let v = self.value.forward(tape, b, x)?;
        let heads = |tape: &mut Tape, t: Var| -> Result<Var> {
            let r = tape.reshape(t, &split)?;
            tape.permute(r, &[0, 2, 1, 3])
        };
        let q = heads(tape, q)?;
        let k = heads(tape, k)?;
        let v = heads(tape, v)?;
        let ctx = tape.attention(q, k, v, 1.0 / libm::sqrt(head_dim as f64))?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch, len, width])?;
        self.output.forward(tape, b, ctx)
    }
}

impl Parameters for MultiHeadAttention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Post-norm layer: `h' = LN(h + MHSA(h))`, `out = LN(h' + FFN(h'))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(width: usize, ffn_dim: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            attention: MultiHeadAttention::new(width, n_heads, rng),
            norm1: LayerNorm::new(width),
            ffn_in: Linear::new(width, ffn_dim, rng),
            ffn_out: Linear::new(ffn_dim, width, rng),
            norm2: LayerNorm::new(width),
        }
    }

    pub fn width(&self) -> usize {
        self.norm1.gain.numel()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &mut Bindings,
        h: Var,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        let a = self.attention.forward(tape, b, h)?;
        let a = apply_dropout(tape, a, dropout)?;
        let r = tape.add(h, a)?;
        let h1 = self.norm1.forward(tape, b, r)?;
        let f = self.ffn_in.forward(tape, b, h1)?;
        let f = tape.relu(f);
        let f = self.ffn_out.forward(tape, b, f)?;
        let f = apply_dropout(tape, f, dropout)?;
        let r = tape.add(h1, f)?;
        self.norm2.forward(tape, b, r)
    }
}

impl Parameters for EncoderLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

/// Gaussian similarity to `M` learnable centers:
/// `z_m = exp(-0.5 * e^gamma * ||h - c_m||^2)`.
///
/// `gamma` lives in the log domain, so the effective scale is always positive.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfLayer {
    /// `[M, d_h]`
    pub centers: Tensor,
    /// Scalar, shape `[]`.
    pub gamma: Tensor,
}

impl RbfLayer {
    pub fn new(centers: Tensor, gamma: f64) -> Result<Self> {
        if centers.shape().len() != 2 {
            return Err(contract(format!(
                "centers must be [M, d_h], got {:?}",
                centers.shape()
            )));
        }
        Ok(Self {
            centers: centers.with_grad(),
            gamma: Tensor::scalar(gamma).with_grad(),
        })
    }

    pub fn n_centers(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.data()[0]
    }

    pub fn forward(&self, tape: &mut Tape, b: &mut Bindings, h: Var) -> Result<Var> {
        let c = b.bind(tape, &self.centers);
        let g = b.bind(tape, &self.gamma);
        let dist = tape.sq_dist(h, c)?;
        let scale = tape.exp(g);
        let scale = tape.scale(scale, -0.5);
        let e = tape.mul(dist, scale)?;
        Ok(tape.exp(e))
    }
}

impl Parameters for RbfLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "centers"), &self.centers);
        f(join(prefix, "gamma"), &self.gamma);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "centers"), &mut self.centers);
        f(join(prefix, "gamma"), &mut self.gamma);
    }
}

/// Fixed sinusoidal table: `PE[t, 2i] = sin(t / 10000^(2i/w))`,
/// `PE[t, 2i+1] = cos(t / 10000^(2i/w))`.
pub fn positional_table(len: usize, width: usize) -> Vec<f64> {
    let mut table = vec![0.0; len * width];
    for t in 0..len {
        for j in 0..width {
            let pair = (j / 2) * 2;
            let freq = libm::pow(10000.0, pair as f64 / width as f64);
            let angle = t as f64 / freq;
            table[t * width + j] = if j % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            };
        }
    }
    table
}

#[derive(Debug)]
pub struct Forward {
    /// `[B, T, d]`
    pub reconstruction: Var,
    /// `[B, T, M]` when the RBF layer is enabled.
    pub similarity: Option<Var>,
    pub bindings: Bindings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestadModel {
    config: ModelConfig,
    pub token: Linear,
    positional: Vec<f64>,
    pub layers: Vec<EncoderLayer>,
    pub rbf: Option<RbfLayer>,
    pub head: Linear,
}

impl RestadModel {
    /// Builds a freshly initialized model. The RBF layer, when enabled, gets
    /// the random (standard normal) initialization.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let token = Linear::new(config.input_dim, config.d_model, &mut rng);
        let layers = (0..config.n_layers)
            .map(|l| {
                EncoderLayer::new(
                    config.width_before(l),
                    config.ffn_dim,
                    config.n_heads,
                    &mut rng,
                )
            })
            .collect();
        let rbf = config.rbf_enabled.then(|| {
            crate::init::random_init(
                config.n_centers,
                config.d_model,
                config.seed ^ RBF_SEED_SALT,
            )
        });
        let head = Linear::new(
            config.width_before(config.n_layers),
            config.input_dim,
            &mut rng,
        );
        Ok(Self {
            positional: positional_table(config.window_len, config.d_model),
            config,
            token,
            layers,
            rbf,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn positional(&self) -> &[f64] {
        &self.positional
    }

    /// Replaces the RBF layer. Its shape must match the configuration.
    pub fn set_rbf(&mut self, layer: RbfLayer) -> Result<()> {
        if !self.config.rbf_enabled {
            return Err(Error::Config("model was built without an RBF layer".into()));
        }
        if layer.n_centers() != self.config.n_centers || layer.input_dim() != self.config.d_model {
            return Err(contract(format!(
                "RBF layer {:?} does not match [{}, {}]",
                layer.centers.shape(),
                self.config.n_centers,
                self.config.d_model
            )));
        }
        self.rbf = Some(layer);
        Ok(())
    }

    /// Token projection plus positional table, `[B, T, d] -> [B, T, d_model]`.
    pub fn embed(&self, tape: &mut Tape, b: &mut Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [_, len, dim] = shape[..] else {
            return Err(contract(format!("input must be [B, T, d], got {shape:?}")));
        };
        if dim != self.config.input_dim {
            return Err(contract(format!(
                "input has {dim} features, model expects {}",
                self.config.input_dim
            )));
        }
        if len > self.config.window_len {
            return Err(contract(format!(
                "sequence length {len} exceeds positional table length {}",
                self.config.window_len
            )));
        }
        let tok = self.token.forward(tape, b, x)?;
        let w = self.config.d_model;
        let pe = tape.leaf(&[len, w], self.positional[..len * w].to_vec(), false)?;
        tape.add(tok, pe)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        track: bool,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Forward> {
        let mut b = Bindings::new(track);
        let mut h = self.embed(tape, &mut b, x)?;
        h = apply_dropout(tape, h, &mut dropout)?;
        let mut similarity = None;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &mut b, h, &mut dropout)?;
            if l + 1 == self.config.rbf_position {
                if let Some(rbf) = &self.rbf {
                    let z = rbf.forward(tape, &mut b, h)?;
                    similarity = Some(z);
                    h = z;
                }
            }
        }
        let reconstruction = self.head.forward(tape, &mut b, h)?;
        Ok(Forward {
            reconstruction,
            similarity,
            bindings: b,
        })
    }

    /// Hidden state after the first `layers` encoder layers, ignoring any
    /// RBF layer. Used to harvest latents for K-means.
    pub fn hidden_at(&self, tape: &mut Tape, x: Var, layers: usize) -> Result<Var> {
        if layers > self.layers.len() {
            return Err(contract(format!(
                "asked for layer {layers} of a {}-layer encoder",
                self.layers.len()
            )));
        }
        if self.config.rbf_enabled && layers > self.config.rbf_position {
            return Err(contract(
                "latents past the RBF layer are not in the center space",
            ));
        }
        let mut b = Bindings::new(false);
        let mut h = self.embed(tape, &mut b, x)?;
        for layer in &self.layers[..layers] {
            h = layer.forward(tape, &mut b, h, &mut None)?;
        }
        Ok(h)
    }

    /// Adds the tape gradients of a tracked forward into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &Bindings) -> Result<()> {
        let vars = bindings.vars();
        let mut i = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let Some(v) = vars.get(i) else {
                err = Some(contract(format!("no binding for parameter {name}")));
                return;
            };
            i += 1;
            if tape.shape(*v) != p.shape() {
                err = Some(contract(format!("binding for {name} has the wrong shape")));
                return;
            }
            if let Some(g) = tape.grad(*v) {
                if let Err(e) = p.accumulate_grad(g) {
                    err = Some(e);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != vars.len() {
            return Err(contract("bindings outnumber parameters"));
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over parameter names, shapes and raw value bits.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_parameters() {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            params: self
                .named_parameters()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.schema_version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported schema_version {}",
                ckpt.schema_version
            )));
        }
        let mut model = Self::new(ckpt.config.clone())?;
        let mut expected = 0;
        let mut err = None;
        model.visit_mut("", &mut |name, p| {
            expected += 1;
            if err.is_some() {
                return;
            }
            match ckpt.params.iter().find(|a| a.name == name) {
                None => err = Some(Error::Checkpoint(format!("missing parameter {name}"))),
                Some(a) if a.shape != p.shape() || a.data.len() != p.numel() => {
                    err = Some(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        a.shape,
                        p.shape()
                    )))
                }
                Some(a) => p.data_mut().copy_from_slice(&a.data),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if expected != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays, model has {expected}",
                ckpt.params.len()
            )));
        }
        Ok(model)
    }
}

impl Parameters for RestadModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.token.visit(&join(prefix, "embed.token"), f);
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layers.{l}")), f);
            if l + 1 == self.config.rbf_position {
                if let Some(rbf) = &self.rbf {
                    rbf.visit(&join(prefix, "rbf"), f);
                }
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        let pos = self.config.rbf_position;
        self.token.visit_mut(&join(prefix, "embed.token"), f);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layers.{l}")), f);
            if l + 1 == pos {
                if let Some(rbf) = self.rbf.as_mut() {
                    rbf.visit_mut(&join(prefix, "rbf"), f);
                }
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Serializable model snapshot: configuration plus named parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}
