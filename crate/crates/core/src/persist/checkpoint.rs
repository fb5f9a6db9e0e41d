use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{f32_values, format_error, read_file, write_atomic, PersistError, Reader};
use crate::encoder::{EncoderConfig, EncoderModel, ParamStore, Vocab};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AVCK";
const VERSION: u32 = 1;
/// Magic, version and manifest length.
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    Finetuned,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrained => "pretrained",
            Stage::Finetuned => "finetuned",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrained" => Ok(Stage::Pretrained),
            "finetuned" => Ok(Stage::Finetuned),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: EncoderModel,
}

/// Layout: `AVCK`, version, manifest length (u32 LE each), the UTF-8
/// manifest, then every tensor as little-endian f32.
///
/// The manifest holds a `stage` line, a `[config]` block of `key=value`
/// lines, a `[tensors]` block of `name<TAB>shape<TAB>offset` lines (offset
/// in bytes from the start of the blob) and finally `[vocab]`, one token
/// per line up to the end.
pub fn encode_checkpoint(model: &EncoderModel, stage: Stage) -> Vec<u8> {
    let c = &model.config;
    let mut manifest = format!(
        "stage {stage}\n[config]\nd_model={}\nn_heads={}\nn_layers={}\nffn_dim={}\nmax_len={}\nvocab_size={}\npooling={}\ndropout={}\n[tensors]\n",
        c.d_model, c.n_heads, c.n_layers, c.ffn_dim, c.max_len, c.vocab_size, c.pooling, c.dropout
    );
    let mut blob = Vec::with_capacity(model.params.numel() * 4);
    for (name, t) in model.params.iter() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\t{}\n", shape.join("x"), blob.len()));
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    manifest.push_str("[vocab]\n");
    manifest.push_str(&model.vocab.to_text());

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&blob);
    out
}

fn parse_config(lines: &[(usize, &str)]) -> Result<EncoderConfig, PersistError> {
    let mut cfg = EncoderConfig::toy(0);
    let mut seen = Vec::new();
    for &(at, line) in lines {
        let (key, value) = line.split_once('=').ok_or_else(|| format_error(at, format!("config line `{line}`")))?;
        let bad = |e: String| format_error(at, format!("config `{key}`: {e}"));
        let int = || value.parse::<usize>().map_err(|e| bad(e.to_string()));
        match key {
            "d_model" => cfg.d_model = int()?,
            "n_heads" => cfg.n_heads = int()?,
            "n_layers" => cfg.n_layers = int()?,
            "ffn_dim" => cfg.ffn_dim = int()?,
            "max_len" => cfg.max_len = int()?,
            "vocab_size" => cfg.vocab_size = int()?,
            "pooling" => cfg.pooling = value.parse().map_err(bad)?,
            "dropout" => cfg.dropout = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            _ => return Err(format_error(at, format!("unknown config key `{key}`"))),
        }
        seen.push(key);
    }
    for key in ["d_model", "n_heads", "n_layers", "ffn_dim", "max_len", "vocab_size", "pooling", "dropout"] {
        if !seen.contains(&key) {
            return Err(format_error(lines.last().map_or(HEADER_LEN, |l| l.0), format!("config lacks `{key}`")));
        }
    }
    Ok(cfg)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, PersistError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_error(version_at, format!("unsupported version {version}")));
    }
    let len = r.u32("manifest length")? as usize;
    let manifest_at = r.pos;
    let manifest = std::str::from_utf8(r.take(len, "manifest")?)
        .map_err(|e| format_error(manifest_at + e.valid_up_to(), "manifest is not UTF-8"))?;
    let blob_at = r.pos;
    let blob = r.take(r.remaining(), "blob")?;

    // Absolute byte offset of every manifest line, for error reporting.
    let mut lines = Vec::new();
    let mut at = manifest_at;
    for line in manifest.split_inclusive('\n') {
        lines.push((at, line.trim_end_matches('\n')));
        at += line.len();
    }
    let mut it = lines.into_iter();
    let (stage_at, stage_line) = it.next().ok_or_else(|| format_error(manifest_at, "empty manifest"))?;
    let stage = stage_line
        .strip_prefix("stage ")
        .ok_or_else(|| format_error(stage_at, "manifest must start with a stage line"))?
        .parse::<Stage>()
        .map_err(|e| format_error(stage_at + 6, e))?;
    match it.next() {
        Some((_, "[config]")) => {}
        other => return Err(format_error(other.map_or(at, |l| l.0), "expected [config]")),
    }
    let mut config_lines = Vec::new();
    let mut tensor_lines = Vec::new();
    let mut in_tensors = false;
    let mut vocab_text = None;
    for (line_at, line) in it.by_ref() {
        match line {
            "[tensors]" if !in_tensors => in_tensors = true,
            "[vocab]" if in_tensors => {
                vocab_text = Some(line_at + line.len() + 1);
                break;
            }
            _ if in_tensors => tensor_lines.push((line_at, line)),
            _ => config_lines.push((line_at, line)),
        }
    }
    let vocab_at = vocab_text.ok_or_else(|| format_error(at, "manifest lacks [tensors] or [vocab]"))?;
    let config = parse_config(&config_lines)?;
    let vocab_src = &manifest[(vocab_at - manifest_at).min(manifest.len())..];
    let vocab = Vocab::from_text(vocab_src)?;

    let mut params = ParamStore::new();
    for (line_at, line) in tensor_lines {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, offset] = fields[..] else {
            return Err(format_error(line_at, format!("tensor line `{line}` needs three fields")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| format_error(line_at, format!("shape of {name}: {e}")))?;
        let offset: usize = offset.parse().map_err(|e| format_error(line_at, format!("offset of {name}: {e}")))?;
        let count: usize = shape.iter().product();
        let end = offset.checked_add(count * 4).filter(|&e| e <= blob.len()).ok_or_else(|| {
            format_error(blob_at + offset.min(blob.len()), format!("{name} extends past the end of the blob"))
        })?;
        if params.find(name).is_some() {
            return Err(format_error(line_at, format!("duplicate tensor {name}")));
        }
        let data: Vec<f64> = f32_values(&blob[offset..end]).map(f64::from).collect();
        let t = Tensor::new(shape, data).map_err(|e| format_error(line_at, e.to_string()))?;
        params.add(name, t);
    }
    let model = EncoderModel::from_params(vocab, config, params)?;
    Ok(Checkpoint { stage, model })
}

pub fn save_checkpoint(model: &EncoderModel, stage: Stage, path: &Path) -> Result<(), PersistError> {
    write_atomic(path, &encode_checkpoint(model, stage))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PersistError> {
    decode_checkpoint(&read_file(path)?)
}
