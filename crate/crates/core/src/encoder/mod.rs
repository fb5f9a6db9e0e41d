//! Tokenizer, transformer encoder and pooling.

mod layers;
mod params;
mod vocab;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use layers::{causal_mask, scaled_dot_attention, Dropout};
pub(crate) use layers::{maybe_dropout, Attention, FeedForward, Init, Linear, Norm, Source};
pub use params::{Bound, ParamId, ParamStore};
pub use vocab::{split_words, Vocab, CLS, EOS, PAD, RESERVED, SEP, UNK};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("token id {id} is outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Cls,
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            other => Err(format!("unknown pooling `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub pooling: Pooling,
    /// Dropout probability used in training sublayers.
    pub dropout: f64,
}

impl EncoderConfig {
    /// The small test configuration for a given vocabulary size.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 64,
            max_len: 64,
            vocab_size,
            pooling: Pooling::Cls,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(EncoderError::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EncoderError::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.vocab_size < RESERVED.len() {
            return Err(EncoderError::Config(format!("vocab_size {} is below the reserved count", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
}

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayer {
    pub(crate) attn: Attention,
    pub(crate) norm1: Norm,
    pub(crate) ffn: FeedForward,
    pub(crate) norm2: Norm,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayout {
    pub(crate) tok_emb: ParamId,
    pub(crate) pos_emb: ParamId,
    pub(crate) emb_norm: Norm,
    pub(crate) layers: Vec<EncoderLayer>,
}

impl EncoderLayout {
    fn build(src: &mut Source, store: &mut ParamStore, c: &EncoderConfig) -> Result<Self, EncoderError> {
        let d = c.d_model;
        let tok_emb = src.param(store, "encoder.tok_emb", &[c.vocab_size, d], Init::Embedding)?;
        let pos_emb = src.param(store, "encoder.pos_emb", &[c.max_len, d], Init::Embedding)?;
        let emb_norm = Norm::new(src, store, "encoder.emb_norm", d)?;
        let mut layers = Vec::with_capacity(c.n_layers);
        for i in 0..c.n_layers {
            let p = format!("encoder.layer.{i}");
            layers.push(EncoderLayer {
                attn: Attention::new(src, store, &format!("{p}.attn"), d)?,
                norm1: Norm::new(src, store, &format!("{p}.norm1"), d)?,
                ffn: FeedForward::new(src, store, &format!("{p}.ffn"), d, c.ffn_dim)?,
                norm2: Norm::new(src, store, &format!("{p}.norm2"), d)?,
            });
        }
        Ok(EncoderLayout { tok_emb, pos_emb, emb_norm, layers })
    }
}

/// Vocabulary, configuration and parameters of a sentence encoder.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub vocab: Vocab,
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub(crate) layout: EncoderLayout,
}

impl EncoderModel {
    pub fn new(vocab: Vocab, config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        Self::check_vocab(&vocab, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = EncoderLayout::build(&mut Source::Fresh(&mut rng), &mut params, &config)?;
        Ok(EncoderModel { vocab, config, params, layout })
    }

    /// Rebuilds a model around previously saved parameters. Extra
    /// parameters in the store are kept but unused.
    pub fn from_params(vocab: Vocab, config: EncoderConfig, mut params: ParamStore) -> Result<Self, EncoderError> {
        Self::check_vocab(&vocab, &config)?;
        let layout = EncoderLayout::build(&mut Source::Existing, &mut params, &config)?;
        Ok(EncoderModel { vocab, config, params, layout })
    }

    fn check_vocab(vocab: &Vocab, config: &EncoderConfig) -> Result<(), EncoderError> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(EncoderError::Config(format!(
                "vocab_size {} does not match vocabulary of {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        Ok(())
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.layout.tok_emb
    }

    pub fn token_embedding(&self) -> &Tensor {
        self.params.get(self.layout.tok_emb)
    }

    pub fn tokenize(&self, sentence: &str) -> Vec<usize> {
        self.vocab.tokenize(sentence, self.config.max_len)
    }

    pub(crate) fn check_ids(&self, ids: &[usize]) -> Result<(), EncoderError> {
        if ids.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if ids.len() > self.config.max_len {
            return Err(EncoderError::TooLong { len: ids.len(), max: self.config.max_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(EncoderError::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Hidden states `t x d_model` on `tape`. Pass a dropout source only
    /// while training.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ids: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var, EncoderError> {
        self.check_ids(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather_rows(p.var(self.layout.tok_emb), ids)?;
        let pos = tape.gather_rows(p.var(self.layout.pos_emb), &positions)?;
        let x = tape.add(tok, pos)?;
        let x = self.layout.emb_norm.apply(tape, p, x)?;
        let mut x = maybe_dropout(tape, x, &mut dropout)?;
        let heads = self.config.n_heads;
        for layer in &self.layout.layers {
            let a = layer.attn.apply(tape, p, x, x, heads, None)?;
            let a = maybe_dropout(tape, a, &mut dropout)?;
            let sum = tape.add(x, a)?;
            x = layer.norm1.apply(tape, p, sum)?;
            let f = layer.ffn.apply(tape, p, x)?;
            let f = maybe_dropout(tape, f, &mut dropout)?;
            let sum = tape.add(x, f)?;
            x = layer.norm2.apply(tape, p, sum)?;
        }
        Ok(x)
    }

    /// Forward pass followed by pooling; returns a `1 x d_model` row.
    pub fn embed_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ids: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<Var, EncoderError> {
        let hidden = self.forward(tape, p, ids, dropout)?;
        Ok(pool_var(tape, hidden, ids, self.config.pooling)?)
    }

    /// Inference-mode hidden states.
    pub fn encode(&self, ids: &[usize]) -> Result<Tensor, EncoderError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let h = self.forward(&mut tape, &p, ids, None)?;
        Ok(tape.value(h).clone())
    }

    pub fn embed(&self, sentence: &str) -> Result<SentenceEmbedding, EncoderError> {
        Ok(self.embed_all(&[sentence])?.remove(0))
    }

    pub fn embed_all<S: AsRef<str>>(&self, sentences: &[S]) -> Result<Vec<SentenceEmbedding>, EncoderError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mark = tape.len();
        let mut out = Vec::with_capacity(sentences.len());
        for s in sentences {
            let ids = self.tokenize(s.as_ref());
            let e = self.embed_var(&mut tape, &p, &ids, None)?;
            out.push(SentenceEmbedding { vector: tape.value(e).data().to_vec() });
            tape.truncate(mark);
        }
        Ok(out)
    }
}

/// Row 0 for [`Pooling::Cls`]; the mean over rows whose token is not
/// `[PAD]` for [`Pooling::Mean`].
pub fn pool(hidden: &Tensor, ids: &[usize], mode: Pooling) -> SentenceEmbedding {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let v = pool_var(&mut tape, h, ids, mode).expect("pool of a non-empty hidden state");
    SentenceEmbedding { vector: tape.value(v).data().to_vec() }
}

pub fn pool_var(tape: &mut Tape, hidden: Var, ids: &[usize], mode: Pooling) -> Result<Var, TensorError> {
    match mode {
        Pooling::Cls => tape.select_rows(hidden, &[0]),
        Pooling::Mean => {
            let t = tape.value(hidden).rows();
            let mut rows: Vec<usize> = (0..t).filter(|&r| ids.get(r).is_none_or(|&id| id != PAD)).collect();
            if rows.is_empty() {
                rows = (0..t).collect();
            }
            tape.mean_rows(hidden, &rows)
        }
    }
}
