use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{TsdaeExample, TsdaeModel};
use super::noise::NoiseSpec;
use super::TsdaeError;
use crate::encoder::Dropout;
use crate::normalize::SentenceCorpus;
use crate::tensor::{optimizer_step, AdamWConfig, OptimizerState, Scheduler, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub scheduler: Scheduler,
    pub batch_size: usize,
    pub evaluation_steps: usize,
    pub save_best: bool,
    pub show_progress: bool,
    pub use_amp: bool,
    /// Runs exactly this many steps (cycling epochs) instead of `epochs`.
    pub max_steps: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 1,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            scheduler: Scheduler::Constant,
            batch_size: 128,
            evaluation_steps: 500,
            save_best: true,
            show_progress: true,
            use_amp: false,
            max_steps: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TsdaeError> {
        if self.batch_size == 0 || self.evaluation_steps == 0 || (self.epochs == 0 && self.max_steps.is_none()) {
            return Err(TsdaeError::Config("epochs, batch_size and evaluation_steps must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(TsdaeError::Config("learning rate and weight decay must be non-negative".into()));
        }
        if self.use_amp {
            return Err(TsdaeError::Config("mixed precision is not supported".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TsdaeRun {
    pub model: TsdaeModel,
    /// Training loss of every step.
    pub train_losses: Vec<f64>,
    /// `(step, held-out loss)` at every evaluation.
    pub evaluations: Vec<(usize, f64)>,
    /// Evaluation whose parameters were kept, when `save_best` is set.
    pub best: Option<(usize, f64)>,
}

const HOLDOUT_FRACTION: f64 = 0.05;

/// Denoising pre-training. Noise, shuffling and dropout all derive from
/// `noise.rng_seed`, so a run is reproducible bit for bit.
pub fn train_tsdae(
    mut model: TsdaeModel,
    corpus: &SentenceCorpus,
    config: &PretrainConfig,
    noise: &NoiseSpec,
) -> Result<TsdaeRun, TsdaeError> {
    config.validate()?;
    let mut probe = ChaCha8Rng::seed_from_u64(0);
    let usable: Vec<&str> =
        corpus.sentences.iter().map(String::as_str).filter(|s| model.example(s, 0.0, &mut probe).is_some()).collect();
    if usable.is_empty() {
        return Err(TsdaeError::EmptyCorpus);
    }

    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(noise.rng_seed);
        r.set_stream(k);
        r
    };
    let mut order_rng = stream(2);
    let mut noise_rng = stream(3);
    let mut dropout = Dropout::new(model.encoder.config.dropout, stream(4));

    let mut indices: Vec<usize> = (0..usable.len()).collect();
    indices.shuffle(&mut order_rng);
    let n_hold = (usable.len() as f64 * HOLDOUT_FRACTION).floor() as usize;
    let (holdout, train): (Vec<&str>, Vec<&str>) = if n_hold == 0 || n_hold == usable.len() {
        (usable.clone(), usable.clone())
    } else {
        (indices[..n_hold].iter().map(|&i| usable[i]).collect(), indices[n_hold..].iter().map(|&i| usable[i]).collect())
    };

    let per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = config.max_steps.unwrap_or(config.epochs * per_epoch);
    let opt = AdamWConfig::new(config.learning_rate, config.weight_decay);
    let mut state = OptimizerState::new(model.params().tensors(), opt);

    let evaluate = |m: &TsdaeModel| -> Result<f64, TsdaeError> {
        let mut rng = stream(5);
        let batch: Vec<TsdaeExample> =
            holdout.iter().filter_map(|s| m.example(s, noise.deletion_ratio, &mut rng)).collect();
        m.loss(&batch)
    };

    let mut train_losses = Vec::with_capacity(total_steps);
    let mut evaluations = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_params = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 1..=total_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let s = train[order[cursor]];
            cursor += 1;
            if let Some(ex) = model.example(s, noise.deletion_ratio, &mut noise_rng) {
                batch.push(ex);
            }
        }
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, true);
        let loss = model.batch_loss(&mut tape, &bound, &batch, Some(&mut dropout))?;
        train_losses.push(tape.value(loss).item());
        let mut grads = tape.backward(loss)?;
        let grads: Vec<_> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        optimizer_step(model.params_mut().tensors_mut(), &grads, &mut state)?;

        if step % config.evaluation_steps == 0 || step == total_steps {
            let eval = evaluate(&model)?;
            evaluations.push((step, eval));
            if config.show_progress {
                eprintln!("tsdae step {step}/{total_steps} train {:.4} eval {eval:.4}", train_losses[step - 1]);
            }
            if config.save_best && best.is_none_or(|(_, b)| eval < b) {
                best = Some((step, eval));
                best_params = Some(model.params().clone());
            }
        }
    }
    if let Some(p) = best_params {
        *model.params_mut() = p;
    }
    Ok(TsdaeRun { model, train_losses, evaluations, best })
}
