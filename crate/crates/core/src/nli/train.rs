use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{StsPair, Triplet};
use super::loss::{mnr_loss_var, spearman};
use super::NliError;
use crate::encoder::{Bound, Dropout, EncoderModel};
use crate::tasks::cosine;
use crate::tensor::{optimizer_step, AdamWConfig, OptimizerState, Scheduler, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub scheduler: Scheduler,
    pub batch_size: usize,
    pub evaluation_steps: usize,
    pub save_best: bool,
    pub show_progress: bool,
    pub use_amp: bool,
    pub mnrl_scale: f64,
    /// Runs exactly this many steps (cycling epochs) instead of `epochs`.
    pub max_steps: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 1,
            learning_rate: 1e-5,
            weight_decay: 1e-6,
            scheduler: Scheduler::Constant,
            batch_size: 128,
            evaluation_steps: 500,
            save_best: true,
            show_progress: true,
            use_amp: false,
            mnrl_scale: 20.0,
            max_steps: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), NliError> {
        if self.batch_size == 0 || self.evaluation_steps == 0 || (self.epochs == 0 && self.max_steps.is_none()) {
            return Err(NliError::Config("epochs, batch_size and evaluation_steps must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.mnrl_scale > 0.0) {
            return Err(NliError::Config("learning rate, weight decay and scale must be valid".into()));
        }
        if self.use_amp {
            return Err(NliError::Config("mixed precision is not supported".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub model: EncoderModel,
    pub train_losses: Vec<f64>,
    /// `(step, Spearman)` for every evaluation where the correlation was
    /// defined.
    pub evaluations: Vec<(usize, f64)>,
    pub best: Option<(usize, f64)>,
}

/// Spearman correlation between embedding cosine and gold scores. Gold
/// scores are divided by 5 first, which leaves the ranks unchanged.
pub fn sts_spearman(model: &EncoderModel, pairs: &[StsPair]) -> Result<f64, NliError> {
    if pairs.len() < 2 {
        return Err(NliError::Undefined("need at least two pairs".into()));
    }
    let left: Vec<&str> = pairs.iter().map(|p| p.sentence1.as_str()).collect();
    let right: Vec<&str> = pairs.iter().map(|p| p.sentence2.as_str()).collect();
    let a = model.embed_all(&left)?;
    let b = model.embed_all(&right)?;
    let predicted = a.iter().zip(&b).map(|(u, v)| cosine(&u.vector, &v.vector)).collect::<Result<Vec<f64>, _>>()?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold / 5.0).collect();
    spearman(&predicted, &gold)
}

/// Stacks the pooled embeddings of `sentences` into one `B x d` tape value.
fn embed_rows(
    model: &EncoderModel,
    tape: &mut Tape,
    p: &Bound,
    sentences: &[&str],
    mut dropout: Option<&mut Dropout>,
) -> Result<Var, NliError> {
    let mut rows = Vec::with_capacity(sentences.len());
    for s in sentences {
        let ids = model.tokenize(s);
        rows.push(model.embed_var(tape, p, &ids, dropout.as_deref_mut())?);
    }
    Ok(tape.concat_rows(&rows)?)
}

/// MNRL loss of a triplet batch; the three towers share `p`.
pub fn triplet_loss(
    model: &EncoderModel,
    tape: &mut Tape,
    p: &Bound,
    batch: &[&Triplet],
    scale: f64,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var, NliError> {
    let anchors: Vec<&str> = batch.iter().map(|t| t.anchor.as_str()).collect();
    let positives: Vec<&str> = batch.iter().map(|t| t.positive.as_str()).collect();
    let negatives: Vec<&str> = batch.iter().map(|t| t.negative.as_str()).collect();
    let a = embed_rows(model, tape, p, &anchors, dropout.as_deref_mut())?;
    let pv = embed_rows(model, tape, p, &positives, dropout.as_deref_mut())?;
    let n = embed_rows(model, tape, p, &negatives, dropout)?;
    Ok(mnr_loss_var(tape, a, pv, n, scale)?)
}

/// Contrastive fine-tuning with in-batch negatives. Shuffling and dropout
/// derive from `seed`.
pub fn finetune_nli(
    mut model: EncoderModel,
    triplets: &[Triplet],
    sts_dev: &[StsPair],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneRun, NliError> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(NliError::NoTriplets);
    }
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(k);
        r
    };
    let mut order_rng = stream(6);
    let mut dropout = Dropout::new(model.config.dropout, stream(7));
    let per_epoch = triplets.len().div_ceil(config.batch_size);
    let total_steps = config.max_steps.unwrap_or(config.epochs * per_epoch);
    let opt = AdamWConfig::new(config.learning_rate, config.weight_decay);
    let mut state = OptimizerState::new(model.params.tensors(), opt);

    let mut train_losses = Vec::with_capacity(total_steps);
    let mut evaluations = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_params = None;
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut cursor = order.len();
    for step in 1..=total_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(triplets.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&triplets[order[cursor]]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let loss = triplet_loss(&model, &mut tape, &bound, &batch, config.mnrl_scale, Some(&mut dropout))?;
        train_losses.push(tape.value(loss).item());
        let mut grads = tape.backward(loss)?;
        let grads: Vec<_> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        optimizer_step(model.params.tensors_mut(), &grads, &mut state)?;

        if (step % config.evaluation_steps == 0 || step == total_steps) && sts_dev.len() >= 2 {
            match sts_spearman(&model, sts_dev) {
                Ok(rho) => {
                    evaluations.push((step, rho));
                    if config.show_progress {
                        eprintln!(
                            "nli step {step}/{total_steps} loss {:.4} sts spearman {rho:.4}",
                            train_losses[step - 1]
                        );
                    }
                    if config.save_best && best.is_none_or(|(_, b)| rho > b) {
                        best = Some((step, rho));
                        best_params = Some(model.params.clone());
                    }
                }
                Err(NliError::Undefined(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    }
    Ok(FinetuneRun { model, train_losses, evaluations, best })
}
