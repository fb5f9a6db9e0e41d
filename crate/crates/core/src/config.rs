//! Pipeline settings in a flat `key=value` text format. Blank lines and
//! lines starting with `#` are ignored; unknown keys are errors.

use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::nli::FinetuneConfig;
use crate::tsdae::PretrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    Value { line: usize, key: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Replacement cleaning rule table; the built-in one when absent.
    pub rules: Option<PathBuf>,
    /// Drop repeated sentences when building the corpus.
    pub dedup: bool,
    pub min_count: usize,
    pub deletion_ratio: f64,
    pub decoder_layers: usize,
    /// Encoder shape; `vocab_size` is filled in from the corpus.
    pub model: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            rules: None,
            dedup: true,
            min_count: 1,
            deletion_ratio: 0.6,
            decoder_layers: 1,
            model: EncoderConfig::toy(0),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value { line, key: key.to_string(), reason: e.to_string() })
}

fn parse_steps(line: usize, key: &str, value: &str) -> Result<Option<usize>, ConfigError> {
    if value == "none" {
        Ok(None)
    } else {
        parse(line, key, value).map(Some)
    }
}

fn steps_text(s: Option<usize>) -> String {
    s.map_or("none".to_string(), |v| v.to_string())
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let (key, value) = t
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError::Syntax { line, text: t.to_string() })?;
            c.set(line, key, value)?;
        }
        Ok(c)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        let (p, f) = (&mut self.pretrain, &mut self.finetune);
        match key {
            "seed" => self.seed = parse(line, key, v)?,
            "rules" => self.rules = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "dedup" => self.dedup = parse(line, key, v)?,
            "min_count" => self.min_count = parse(line, key, v)?,
            "deletion_ratio" => self.deletion_ratio = parse(line, key, v)?,
            "decoder_layers" => self.decoder_layers = parse(line, key, v)?,
            "model.d_model" => self.model.d_model = parse(line, key, v)?,
            "model.n_heads" => self.model.n_heads = parse(line, key, v)?,
            "model.n_layers" => self.model.n_layers = parse(line, key, v)?,
            "model.ffn_dim" => self.model.ffn_dim = parse(line, key, v)?,
            "model.max_len" => self.model.max_len = parse(line, key, v)?,
            "model.pooling" => self.model.pooling = parse(line, key, v)?,
            "model.dropout" => self.model.dropout = parse(line, key, v)?,
            "pretrain.epochs" => p.epochs = parse(line, key, v)?,
            "pretrain.learning_rate" => p.learning_rate = parse(line, key, v)?,
            "pretrain.weight_decay" => p.weight_decay = parse(line, key, v)?,
            "pretrain.scheduler" => p.scheduler = parse(line, key, v)?,
            "pretrain.batch_size" => p.batch_size = parse(line, key, v)?,
            "pretrain.evaluation_steps" => p.evaluation_steps = parse(line, key, v)?,
            "pretrain.save_best" => p.save_best = parse(line, key, v)?,
            "pretrain.show_progress" => p.show_progress = parse(line, key, v)?,
            "pretrain.use_amp" => p.use_amp = parse(line, key, v)?,
            "pretrain.max_steps" => p.max_steps = parse_steps(line, key, v)?,
            "finetune.epochs" => f.epochs = parse(line, key, v)?,
            "finetune.learning_rate" => f.learning_rate = parse(line, key, v)?,
            "finetune.weight_decay" => f.weight_decay = parse(line, key, v)?,
            "finetune.scheduler" => f.scheduler = parse(line, key, v)?,
            "finetune.batch_size" => f.batch_size = parse(line, key, v)?,
            "finetune.evaluation_steps" => f.evaluation_steps = parse(line, key, v)?,
            "finetune.save_best" => f.save_best = parse(line, key, v)?,
            "finetune.show_progress" => f.show_progress = parse(line, key, v)?,
            "finetune.use_amp" => f.use_amp = parse(line, key, v)?,
            "finetune.mnrl_scale" => f.mnrl_scale = parse(line, key, v)?,
            "finetune.max_steps" => f.max_steps = parse_steps(line, key, v)?,
            _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
        Ok(())
    }

    /// Every key with its current value; [`PipelineConfig::parse`] reads it
    /// back unchanged.
    pub fn to_text(&self) -> String {
        let (m, p, f) = (&self.model, &self.pretrain, &self.finetune);
        let rules = self.rules.as_ref().map_or(String::new(), |r| r.display().to_string());
        let lines = [
            format!("seed={}", self.seed),
            format!("rules={rules}"),
            format!("dedup={}", self.dedup),
            format!("min_count={}", self.min_count),
            format!("deletion_ratio={}", self.deletion_ratio),
            format!("decoder_layers={}", self.decoder_layers),
            format!("model.d_model={}", m.d_model),
            format!("model.n_heads={}", m.n_heads),
            format!("model.n_layers={}", m.n_layers),
            format!("model.ffn_dim={}", m.ffn_dim),
            format!("model.max_len={}", m.max_len),
            format!("model.pooling={}", m.pooling),
            format!("model.dropout={}", m.dropout),
            format!("pretrain.epochs={}", p.epochs),
            format!("pretrain.learning_rate={}", p.learning_rate),
            format!("pretrain.weight_decay={}", p.weight_decay),
            format!("pretrain.scheduler={}", p.scheduler),
            format!("pretrain.batch_size={}", p.batch_size),
            format!("pretrain.evaluation_steps={}", p.evaluation_steps),
            format!("pretrain.save_best={}", p.save_best),
            format!("pretrain.show_progress={}", p.show_progress),
            format!("pretrain.use_amp={}", p.use_amp),
            format!("pretrain.max_steps={}", steps_text(p.max_steps)),
            format!("finetune.epochs={}", f.epochs),
            format!("finetune.learning_rate={}", f.learning_rate),
            format!("finetune.weight_decay={}", f.weight_decay),
            format!("finetune.scheduler={}", f.scheduler),
            format!("finetune.batch_size={}", f.batch_size),
            format!("finetune.evaluation_steps={}", f.evaluation_steps),
            format!("finetune.save_best={}", f.save_best),
            format!("finetune.show_progress={}", f.show_progress),
            format!("finetune.use_amp={}", f.use_amp),
            format!("finetune.mnrl_scale={}", f.mnrl_scale),
            format!("finetune.max_steps={}", steps_text(f.max_steps)),
        ];
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Scheduler;

    #[test]
    fn default_hyperparameters() {
        let c = PipelineConfig::default();
        let p = &c.pretrain;
        assert_eq!(p.epochs, 1);
        assert_eq!(p.learning_rate, 1e-4);
        assert_eq!(p.weight_decay, 1e-5);
        assert_eq!(p.scheduler, Scheduler::Constant);
        assert_eq!(p.batch_size, 128);
        assert_eq!(p.evaluation_steps, 500);
        assert!(p.save_best && p.show_progress && !p.use_amp);
        let f = &c.finetune;
        assert_eq!(f.epochs, 1);
        assert_eq!(f.learning_rate, 1e-5);
        assert_eq!(f.weight_decay, 1e-6);
        assert_eq!(f.scheduler, Scheduler::Constant);
        assert_eq!(f.batch_size, 128);
        assert_eq!(f.evaluation_steps, 500);
        assert!(f.save_best && f.show_progress && !f.use_amp);
        assert_eq!(c.deletion_ratio, 0.6);
    }

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig { seed: 7, rules: Some(PathBuf::from("rules.tsv")), ..Default::default() };
        c.pretrain.max_steps = Some(300);
        c.finetune.learning_rate = 2.5e-5;
        assert_eq!(PipelineConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(PipelineConfig::parse(&PipelineConfig::default().to_text()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn comments_and_errors() {
        let c = PipelineConfig::parse("# run\n\nseed = 3\npretrain.scheduler=constantlr\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(PipelineConfig::parse("seed").unwrap_err(), ConfigError::Syntax { line: 1, text: "seed".into() });
        assert!(matches!(PipelineConfig::parse("\nbatch=3"), Err(ConfigError::UnknownKey { line: 2, .. })));
        assert!(matches!(PipelineConfig::parse("seed=-1"), Err(ConfigError::Value { line: 1, .. })));
    }
}
