//! Parameter layouts and the shared transformer sublayers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{uniform, xavier, Bound, ParamId, ParamStore};
use super::EncoderError;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Xavier,
    Embedding,
    Zeros,
    Ones,
}

/// Where parameters come from: fresh random values, or an existing store
/// (checkpoint load) that must already hold every name with the right shape.
pub(crate) enum Source<'a> {
    Fresh(&'a mut ChaCha8Rng),
    Existing,
}

impl Source<'_> {
    pub(crate) fn param(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        shape: &[usize],
        init: Init,
    ) -> Result<ParamId, EncoderError> {
        match self {
            Source::Fresh(rng) => {
                let t = match init {
                    Init::Xavier => xavier(rng, shape[0], shape[1]),
                    Init::Embedding => uniform(rng, shape, 0.1),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::filled(shape, 1.0),
                };
                Ok(store.add(name, t))
            }
            Source::Existing => {
                let id = store.find(name).ok_or_else(|| EncoderError::MissingParam(name.to_string()))?;
                if store.get(id).shape() != shape {
                    return Err(EncoderError::ParamShape {
                        name: name.to_string(),
                        expected: shape.to_vec(),
                        found: store.get(id).shape().to_vec(),
                    });
                }
                Ok(id)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Linear {
    pub(crate) fn new(
        src: &mut Source,
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self, EncoderError> {
        Ok(Linear {
            w: src.param(store, &format!("{prefix}.weight"), &[fan_in, fan_out], Init::Xavier)?,
            b: src.param(store, &format!("{prefix}.bias"), &[fan_out], Init::Zeros)?,
        })
    }

    pub(crate) fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_row(y, p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub(crate) gain: ParamId,
    pub(crate) bias: ParamId,
}

impl Norm {
    pub(crate) fn new(src: &mut Source, store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self, EncoderError> {
        Ok(Norm {
            gain: src.param(store, &format!("{prefix}.gain"), &[d], Init::Ones)?,
            bias: src.param(store, &format!("{prefix}.bias"), &[d], Init::Zeros)?,
        })
    }

    pub(crate) fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm_rows(x, p.var(self.gain), p.var(self.bias), LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attention {
    pub(crate) q: Linear,
    pub(crate) k: Linear,
    pub(crate) v: Linear,
    pub(crate) o: Linear,
}

impl Attention {
    pub(crate) fn new(src: &mut Source, store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self, EncoderError> {
        Ok(Attention {
            q: Linear::new(src, store, &format!("{prefix}.q"), d, d)?,
            k: Linear::new(src, store, &format!("{prefix}.k"), d, d)?,
            v: Linear::new(src, store, &format!("{prefix}.v"), d, d)?,
            o: Linear::new(src, store, &format!("{prefix}.o"), d, d)?,
        })
    }

    /// Multi-head attention of `queries` over `keys` (which also supply the
    /// values).
    pub(crate) fn apply(
        &self,
        tape: &mut Tape,
        p: &Bound,
        queries: Var,
        keys: Var,
        n_heads: usize,
        mask: Option<&Tensor>,
    ) -> Result<Var, TensorError> {
        let q = self.q.apply(tape, p, queries)?;
        let k = self.k.apply(tape, p, keys)?;
        let v = self.v.apply(tape, p, keys)?;
        let ctx = multi_head(tape, q, k, v, n_heads, mask)?;
        self.o.apply(tape, p, ctx)
    }
}

/// Splits projected Q, K, V into `n_heads` column blocks, attends per head
/// and concatenates the results.
pub(crate) fn multi_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: Option<&Tensor>,
) -> Result<Var, TensorError> {
    let d = tape.value(q).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(TensorError::Invalid(format!("{n_heads} heads do not divide width {d}")));
    }
    if n_heads == 1 {
        return scaled_dot_attention(tape, q, k, v, mask);
    }
    let dh = d / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        heads.push(scaled_dot_attention(tape, qh, kh, vh, mask)?);
    }
    tape.concat_cols(&heads)
}

/// `softmax(Q Kᵀ / sqrt(d) + mask) V` where `d` is the width of `Q`.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
) -> Result<Var, TensorError> {
    let (qs, ks, vs) = (tape.value(q), tape.value(k), tape.value(v));
    if qs.cols() != ks.cols() {
        return Err(TensorError::Shape { op: "attention q/k", left: qs.shape().to_vec(), right: ks.shape().to_vec() });
    }
    if ks.rows() != vs.rows() {
        return Err(TensorError::Shape { op: "attention k/v", left: ks.shape().to_vec(), right: vs.shape().to_vec() });
    }
    let d = qs.cols() as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / d.sqrt())?;
    if let Some(m) = mask {
        scores = tape.add_const(scores, m)?;
    }
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

/// Additive mask that hides future positions.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = -1e9;
        }
    }
    m
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForward {
    pub(crate) up: Linear,
    pub(crate) down: Linear,
}

impl FeedForward {
    pub(crate) fn new(
        src: &mut Source,
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        ffn: usize,
    ) -> Result<Self, EncoderError> {
        Ok(FeedForward {
            up: Linear::new(src, store, &format!("{prefix}.up"), d, ffn)?,
            down: Linear::new(src, store, &format!("{prefix}.down"), ffn, d)?,
        })
    }

    pub(crate) fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = self.up.apply(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.down.apply(tape, p, h)
    }
}

/// Inverted dropout driven by a seeded generator.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        Dropout { p, rng }
    }

    pub(crate) fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - self.p);
        let mask = (0..n).map(|_| if self.rng.random::<f64>() < self.p { 0.0 } else { keep }).collect();
        tape.mul_const(x, Tensor::new(shape, mask)?)
    }
}

pub(crate) fn maybe_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<&mut Dropout>) -> Result<Var, TensorError> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}
