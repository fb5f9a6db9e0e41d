use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::noise::delete_tokens;
use super::TsdaeError;
use crate::encoder::{
    causal_mask, maybe_dropout, Attention, Bound, Dropout, EncoderConfig, EncoderError, EncoderModel, FeedForward,
    Init, Linear, Norm, ParamId, ParamStore, Source, Vocab, CLS, EOS,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Tape handles of the value and output projections used by
/// [`restricted_cross_attention`].
#[derive(Debug, Clone, Copy)]
pub struct CrossAttnVars {
    pub value_weight: Var,
    pub value_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

/// Cross-attention whose key/value set is the single row `s`
/// (`1 x d`). With one key the softmax weight is exactly 1 for every query,
/// so each output row is the projected value of `s`; queries never enter
/// the result and the query/key projections are omitted.
pub fn restricted_cross_attention(tape: &mut Tape, h_prev: Var, s: Var, w: &CrossAttnVars) -> Result<Var, TensorError> {
    let (h, sv) = (tape.value(h_prev), tape.value(s));
    if sv.rows() != 1 || sv.cols() != h.cols() {
        return Err(TensorError::Shape {
            op: "restricted_cross_attention",
            left: h.shape().to_vec(),
            right: sv.shape().to_vec(),
        });
    }
    let t = h.rows();
    let v = tape.matmul(s, w.value_weight)?;
    let v = tape.add_row(v, w.value_bias)?;
    let o = tape.matmul(v, w.out_weight)?;
    let o = tape.add_row(o, w.out_bias)?;
    tape.repeat_rows(o, t)
}

#[derive(Debug, Clone, Copy)]
struct CrossAttention {
    value: Linear,
    out: Linear,
}

impl CrossAttention {
    fn vars(&self, p: &Bound) -> CrossAttnVars {
        CrossAttnVars {
            value_weight: p.var(self.value.w),
            value_bias: p.var(self.value.b),
            out_weight: p.var(self.out.w),
            out_bias: p.var(self.out.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross: CrossAttention,
    norm2: Norm,
    ffn: FeedForward,
    norm3: Norm,
}

#[derive(Debug, Clone)]
struct DecoderLayout {
    pos_emb: ParamId,
    emb_norm: Norm,
    layers: Vec<DecoderLayer>,
    out_bias: ParamId,
}

/// One training pair: the corrupted encoder input (with `[CLS]`) and the
/// reconstruction target (content tokens followed by `[EOS]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsdaeExample {
    pub noisy: Vec<usize>,
    pub target: Vec<usize>,
}

/// Encoder plus a teacher-forced decoder. Decoder parameters live in the
/// encoder's store after the encoder's own, and the decoder reads the
/// encoder's token-embedding parameter both for its input embedding and,
/// transposed, as its output projection.
#[derive(Debug, Clone)]
pub struct TsdaeModel {
    pub encoder: EncoderModel,
    encoder_params: usize,
    layout: DecoderLayout,
}

impl TsdaeModel {
    pub fn new(vocab: Vocab, config: EncoderConfig, decoder_layers: usize, seed: u64) -> Result<Self, TsdaeError> {
        if decoder_layers == 0 {
            return Err(TsdaeError::Config("decoder needs at least one layer".into()));
        }
        let mut encoder = EncoderModel::new(vocab, config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let encoder_params = encoder.params.len();
        let layout = build_decoder(&mut Source::Fresh(&mut rng), &mut encoder.params, &config, decoder_layers)?;
        Ok(TsdaeModel { encoder, encoder_params, layout })
    }

    /// Wraps an existing encoder (e.g. a loaded checkpoint) with a fresh decoder.
    pub fn with_encoder(mut encoder: EncoderModel, decoder_layers: usize, seed: u64) -> Result<Self, TsdaeError> {
        if decoder_layers == 0 {
            return Err(TsdaeError::Config("decoder needs at least one layer".into()));
        }
        let config = encoder.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let encoder_params = encoder.params.len();
        let layout = build_decoder(&mut Source::Fresh(&mut rng), &mut encoder.params, &config, decoder_layers)?;
        Ok(TsdaeModel { encoder, encoder_params, layout })
    }

    pub fn decoder_layers(&self) -> usize {
        self.layout.layers.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.encoder.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.encoder.params
    }

    /// Parameter used as the decoder's output projection (transposed).
    pub fn decoder_output_projection_id(&self) -> ParamId {
        self.encoder.token_embedding_id()
    }

    pub fn decoder_output_projection(&self) -> &Tensor {
        self.encoder.params.get(self.decoder_output_projection_id())
    }

    /// Drops the decoder and returns the encoder alone.
    pub fn into_encoder(self) -> EncoderModel {
        let mut encoder = self.encoder;
        encoder.params.truncate(self.encoder_params);
        encoder
    }

    /// Builds a training pair from a sentence. Returns `None` when the
    /// sentence has no content tokens.
    pub fn example(&self, sentence: &str, ratio: f64, rng: &mut ChaCha8Rng) -> Option<TsdaeExample> {
        let max_len = self.encoder.config.max_len;
        let ids = self.encoder.tokenize(sentence);
        let mut content = ids[1..].to_vec();
        if content.is_empty() {
            return None;
        }
        content.truncate(max_len.saturating_sub(1));
        let noisy = std::iter::once(CLS).chain(delete_tokens(&content, ratio, rng)).collect();
        let mut target = content;
        target.push(EOS);
        Some(TsdaeExample { noisy, target })
    }

    /// Teacher-forced logits `t x vocab_size` for `target`, conditioned on
    /// the sentence embedding `s` (`1 x d`).
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        p: &Bound,
        target: &[usize],
        s: Var,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var, TsdaeError> {
        let c = &self.encoder.config;
        let t = target.len();
        if t == 0 {
            return Err(EncoderError::EmptySequence.into());
        }
        if t > c.max_len {
            return Err(EncoderError::TooLong { len: t, max: c.max_len }.into());
        }
        let inputs: Vec<usize> = std::iter::once(CLS).chain(target[..t - 1].iter().copied()).collect();
        self.encoder.check_ids(&inputs)?;
        if let Some(&id) = target.iter().find(|&&id| id >= c.vocab_size) {
            return Err(EncoderError::TokenOutOfRange { id, vocab: c.vocab_size }.into());
        }
        let positions: Vec<usize> = (0..t).collect();
        let tok_emb = p.var(self.encoder.token_embedding_id());
        let tok = tape.gather_rows(tok_emb, &inputs)?;
        let pos = tape.gather_rows(p.var(self.layout.pos_emb), &positions)?;
        let x = tape.add(tok, pos)?;
        let x = self.layout.emb_norm.apply(tape, p, x)?;
        let mut x = maybe_dropout(tape, x, &mut dropout)?;
        let mask = causal_mask(t);
        for layer in &self.layout.layers {
            let a = layer.self_attn.apply(tape, p, x, x, c.n_heads, Some(&mask))?;
            let a = maybe_dropout(tape, a, &mut dropout)?;
            let sum = tape.add(x, a)?;
            x = layer.norm1.apply(tape, p, sum)?;
            let cr = restricted_cross_attention(tape, x, s, &layer.cross.vars(p))?;
            let cr = maybe_dropout(tape, cr, &mut dropout)?;
            let sum = tape.add(x, cr)?;
            x = layer.norm2.apply(tape, p, sum)?;
            let f = layer.ffn.apply(tape, p, x)?;
            let f = maybe_dropout(tape, f, &mut dropout)?;
            let sum = tape.add(x, f)?;
            x = layer.norm3.apply(tape, p, sum)?;
        }
        let proj = tape.transpose(tok_emb)?;
        let logits = tape.matmul(x, proj)?;
        Ok(tape.add_row(logits, p.var(self.layout.out_bias))?)
    }

    /// Token-level mean cross-entropy over every target position of the
    /// batch. `dropout` is only passed while training.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[TsdaeExample],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var, TsdaeError> {
        let mut all_logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for ex in batch {
            let hidden = self.encoder.forward(tape, p, &ex.noisy, dropout.as_deref_mut())?;
            let s = tape.select_rows(hidden, &[0])?;
            all_logits.push(self.decode_teacher_forced(tape, p, &ex.target, s, dropout.as_deref_mut())?);
            targets.extend_from_slice(&ex.target);
        }
        if all_logits.is_empty() {
            return Err(TensorError::NoSupervisedPositions.into());
        }
        let logits = tape.concat_rows(&all_logits)?;
        Ok(tape.cross_entropy(logits, &targets, None)?)
    }

    /// Inference-mode loss value.
    pub fn loss(&self, batch: &[TsdaeExample]) -> Result<f64, TsdaeError> {
        let mut tape = Tape::new();
        let p = self.encoder.params.bind(&mut tape, false);
        let l = self.batch_loss(&mut tape, &p, batch, None)?;
        Ok(tape.value(l).item())
    }

    /// Loss and gradients for every parameter, without dropout.
    pub fn loss_and_grads(&self, batch: &[TsdaeExample]) -> Result<(f64, Vec<Tensor>), TsdaeError> {
        let mut tape = Tape::new();
        let p = self.encoder.params.bind(&mut tape, true);
        let l = self.batch_loss(&mut tape, &p, batch, None)?;
        let value = tape.value(l).item();
        let mut g = tape.backward(l)?;
        let grads = p.vars().iter().map(|&v| g.take(v).expect("leaf gradient")).collect();
        Ok((value, grads))
    }

    /// Teacher-forced argmax prediction for each target position of
    /// `sentence`. The encoder sees the sentence without noise.
    pub fn reconstruct(&self, sentence: &str) -> Result<(Vec<usize>, Vec<usize>), TsdaeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = self.example(sentence, 0.0, &mut rng).ok_or(TsdaeError::Encoder(EncoderError::EmptySequence))?;
        let mut tape = Tape::new();
        let p = self.encoder.params.bind(&mut tape, false);
        let hidden = self.encoder.forward(&mut tape, &p, &ex.noisy, None)?;
        let s = tape.select_rows(hidden, &[0])?;
        let logits = self.decode_teacher_forced(&mut tape, &p, &ex.target, s, None)?;
        let lv = tape.value(logits);
        let predicted = (0..lv.rows())
            .map(|r| {
                lv.row_slice(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect();
        Ok((predicted, ex.target))
    }
}

fn build_decoder(
    src: &mut Source,
    store: &mut ParamStore,
    c: &EncoderConfig,
    n_layers: usize,
) -> Result<DecoderLayout, EncoderError> {
    let d = c.d_model;
    let pos_emb = src.param(store, "decoder.pos_emb", &[c.max_len, d], Init::Embedding)?;
    let emb_norm = Norm::new(src, store, "decoder.emb_norm", d)?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let p = format!("decoder.layer.{i}");
        layers.push(DecoderLayer {
            self_attn: Attention::new(src, store, &format!("{p}.self_attn"), d)?,
            norm1: Norm::new(src, store, &format!("{p}.norm1"), d)?,
            cross: CrossAttention {
                value: Linear::new(src, store, &format!("{p}.cross.v"), d, d)?,
                out: Linear::new(src, store, &format!("{p}.cross.o"), d, d)?,
            },
            norm2: Norm::new(src, store, &format!("{p}.norm2"), d)?,
            ffn: FeedForward::new(src, store, &format!("{p}.ffn"), d, c.ffn_dim)?,
            norm3: Norm::new(src, store, &format!("{p}.norm3"), d)?,
        });
    }
    let out_bias = src.param(store, "decoder.out_bias", &[c.vocab_size], Init::Zeros)?;
    Ok(DecoderLayout { pos_emb, emb_norm, layers, out_bias })
}
