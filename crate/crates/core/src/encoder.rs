//! Per-modality sequence encoder: temporal convolution, sinusoidal positional
//! embedding and a pre-norm transformer encoder. The representation of a
//! sequence is the encoder output at its final position.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, LayerNorm, Linear};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Common embedding dimension `d`.
    pub d_model: usize,
    /// Temporal convolution width (odd).
    pub kernel_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 8, kernel_size: 3, layers: 2, heads: 2, ff_dim: 16, dropout: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidConfig("d_model, heads and ff_dim must be >= 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Sinusoidal positional embedding `[seq_len, d]`:
/// `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(t / 10000^(2i/d))`.
const FINAL_NORM_EPS: f64 = 1e-5;

pub fn positional_embedding(seq_len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(seq_len, d);
    for t in 0..seq_len {
        for j in 0..d {
            let i2 = (j - j % 2) as f64;
            let angle = t as f64 / 10000f64.powf(i2 / d as f64);
            pe.set(t, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d),
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, cfg.ff_dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), cfg.ff_dim, d, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        seq_len: usize,
        heads: usize,
        p_drop: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let h = self.norm_attn.forward(tape, store, x);
        let q = self.query.forward(tape, store, h);
        let k = self.key.forward(tape, store, h);
        let v = self.value.forward(tape, store, h);
        let a = tape.attention(q, k, v, seq_len, heads);
        let a = self.out.forward(tape, store, a);
        let a = dropout(tape, a, p_drop, rng.as_deref_mut());
        let x = tape.add(x, a);
        let h = self.norm_ff.forward(tape, store, x);
        let h = self.ff_in.forward(tape, store, h);
        let h = tape.relu(h);
        let h = self.ff_out.forward(tape, store, h);
        let h = dropout(tape, h, p_drop, rng);
        tape.add(x, h)
    }

    /// Zeroes the attention and feed-forward output projections so the block
    /// reduces to the identity.
    pub fn zero_projections(&self, store: &mut ParamStore) {
        for l in [&self.query, &self.key, &self.value, &self.out, &self.ff_in, &self.ff_out] {
            l.zero(store);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Embedded sequence `[batch * seq_len, d]`.
    pub embedded: Var,
    /// Final-position representation `[batch, d]`.
    pub z: Var,
}

#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub config: EncoderConfig,
    pub in_dim: usize,
    pub seq_len: usize,
    pub conv: Linear,
    pub layers: Vec<TransformerLayer>,
    positions: Tensor,
}

impl ModalityEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        seq_len: usize,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if in_dim == 0 || seq_len == 0 {
            return Err(Error::InvalidConfig(format!("{name}: input dim and sequence length must be >= 1")));
        }
        let conv = Linear::new(store, &format!("{name}.conv"), config.kernel_size * in_dim, config.d_model, rng);
        let layers =
            (0..config.layers).map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), config, rng)).collect();
        Ok(Self {
            config: *config,
            in_dim,
            seq_len,
            conv,
            layers,
            positions: positional_embedding(seq_len, config.d_model),
        })
    }

    /// `Conv1d(x) + PE`. `x` is `[batch * seq_len, in_dim]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (rows, cols) = tape.shape(x);
        if cols != self.in_dim || rows % self.seq_len != 0 || rows == 0 {
            return Err(Error::Shape(format!(
                "encoder expects [batch * {}, {}], got [{rows}, {cols}]",
                self.seq_len, self.in_dim
            )));
        }
        let batch = rows / self.seq_len;
        let unfolded = tape.unfold_time(x, self.seq_len, self.config.kernel_size);
        let conv = self.conv.forward(tape, store, unfolded);
        let pe = if batch == 1 {
            self.positions.clone()
        } else {
            Tensor::vcat(&vec![&self.positions; batch])
        };
        let pe = tape.constant(pe);
        Ok(tape.add(conv, pe))
    }

    /// Runs the transformer stack over an embedded sequence batch and returns
    /// the output at each sequence's last position, `[batch, d]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, embedded: Var, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let (rows, _) = tape.shape(embedded);
        let mut h = embedded;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, self.seq_len, self.config.heads, self.config.dropout, rng.as_deref_mut());
        }
        // No affine on the output norm: every Z row keeps unit scale.
        let h = tape.layer_norm(h, FINAL_NORM_EPS);
        let last: Vec<usize> = (0..rows / self.seq_len).map(|b| b * self.seq_len + self.seq_len - 1).collect();
        let z = tape.gather_rows(h, &last);
        if !tape.value(z).is_finite() {
            return Err(Error::NonFinite("transformer encoder output".into()));
        }
        Ok(z)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<EncoderOutput> {
        let embedded = self.embed(tape, store, x)?;
        let z = self.encode(tape, store, embedded, rng)?;
        Ok(EncoderOutput { embedded, z })
    }
}
