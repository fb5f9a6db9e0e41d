//! The `avsent` command line: one subcommand per pipeline stage.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::encoder::{EncoderModel, Vocab};
use crate::nli::{build_triplets, finetune_nli, load_nli, load_sts, sts_spearman};
use crate::normalize::{build_corpus, clean_message, read_raw_messages, CleanMessage, RuleSet, SentenceCorpus};
use crate::persist::{load_checkpoint, read_embeddings, save_checkpoint, write_atomic, write_embeddings, Stage};
use crate::tasks::{
    cosine, dedup_counts, kmeans_cluster, paraphrase_mine, project_2d, semantic_search, EmbeddingMatrix, MiningOptions,
};
use crate::tsdae::{train_tsdae, NoiseSpec, TsdaeModel};

#[derive(Debug, Parser)]
#[command(name = "avsent", version, about = "Sentence embeddings for abbreviated aviation text")]
pub struct Cli {
    /// Seed for every random choice; overrides `seed` in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat key=value settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file; text results go to stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize raw feed records into one clean message per line.
    Clean {
        #[arg(long)]
        input: PathBuf,
    },
    /// Split clean messages into a one-sentence-per-line corpus.
    Segment {
        #[arg(long)]
        input: PathBuf,
        /// Keep repeated sentences.
        #[arg(long)]
        keep_duplicates: bool,
    },
    /// Denoising pre-training on a sentence corpus; writes a checkpoint.
    PretrainTsdae {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Contrastive fine-tuning on NLI data; writes a checkpoint.
    FinetuneNli {
        #[arg(long)]
        model: PathBuf,
        /// TSV with sentence1, sentence2 and label columns.
        #[arg(long)]
        nli: PathBuf,
        /// STS dev TSV (sentence1, sentence2, score) used to keep the best model.
        #[arg(long)]
        sts: Option<PathBuf>,
    },
    /// Embed a sentence file into an embedding file plus sidecar.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Most similar corpus sentences to a query.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// k-means over an embedding file.
    Cluster {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        /// Add the 2-D principal-component coordinates of each row.
        #[arg(long)]
        project: bool,
    },
    /// Highest-scoring sentence pairs of an embedding file.
    MineParaphrases {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        #[arg(long, default_value_t = 500_000)]
        max_pairs: usize,
        #[arg(long, default_value_t = 5000)]
        query_chunk: usize,
        #[arg(long, default_value_t = 100_000)]
        corpus_chunk: usize,
    },
    /// Spearman correlation of a model on an STS file.
    StsEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sts: PathBuf,
    },
    /// Per-pair cosine scores of one or more checkpoints.
    CompareModels {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// One `sentence1<TAB>sentence2` pair per line.
        #[arg(long)]
        pairs: PathBuf,
    },
}

/// Fixed-point score without a negative sign on zero.
pub fn format_score(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_model(path: &Path) -> Result<EncoderModel> {
    Ok(load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?.model)
}

fn require_out<'a>(out: &'a Option<PathBuf>, command: &str) -> Result<&'a Path> {
    out.as_deref().with_context(|| format!("{command} needs --out"))
}

fn embedding_matrix(model: &EncoderModel, sentences: &[String]) -> Result<EmbeddingMatrix> {
    let rows: Vec<Vec<f64>> = model.embed_all(sentences)?.into_iter().map(|e| e.vector).collect();
    if rows.is_empty() {
        return Ok(EmbeddingMatrix::new(0, model.config.d_model, Vec::new())?);
    }
    Ok(EmbeddingMatrix::from_rows(&rows)?)
}

fn model_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// What a command leaves for the caller once its artifacts are written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    /// The command's result; goes to `--out` or stdout.
    Text(String),
    /// A training report for stdout; `--out` already holds the checkpoint.
    Summary(String),
    Nothing,
}

pub fn execute(cli: &Cli, cfg: &PipelineConfig) -> Result<Output> {
    let seed = cfg.seed;
    let text = match &cli.command {
        Command::Clean { input } => {
            let rules = match &cfg.rules {
                Some(p) => RuleSet::from_tsv(&read_text(p)?)?,
                None => RuleSet::canonical(),
            };
            let mut out = String::new();
            for raw in read_raw_messages(&read_text(input)?) {
                out.push_str(&clean_message(&raw, &rules).body);
                out.push('\n');
            }
            out
        }
        Command::Segment { input, keep_duplicates } => {
            let messages: Vec<CleanMessage> = read_text(input)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| CleanMessage { body: l.to_string(), applied_rule_ids: Vec::new() })
                .collect();
            build_corpus(&messages, cfg.dedup && !keep_duplicates).to_text()
        }
        Command::PretrainTsdae { corpus } => {
            let out = require_out(&cli.out, "pretrain-tsdae")?;
            let corpus = SentenceCorpus::from_text(&read_text(corpus)?);
            let vocab = Vocab::build(&corpus.sentences, cfg.min_count)?;
            let mut shape = cfg.model;
            shape.vocab_size = vocab.len();
            let model = TsdaeModel::new(vocab, shape, cfg.decoder_layers, seed)?;
            let run = train_tsdae(model, &corpus, &cfg.pretrain, &NoiseSpec::new(cfg.deletion_ratio, seed)?)?;
            save_checkpoint(&run.model.into_encoder(), Stage::Pretrained, out)?;
            return Ok(Output::Summary(training_summary(&run.train_losses, run.best)));
        }
        Command::FinetuneNli { model, nli, sts } => {
            let out = require_out(&cli.out, "finetune-nli")?;
            let model = load_model(model)?;
            let triplets = build_triplets(&load_nli(nli)?);
            let dev = match sts {
                Some(p) => load_sts(p)?,
                None => Vec::new(),
            };
            let run = finetune_nli(model, &triplets, &dev, &cfg.finetune, seed)?;
            save_checkpoint(&run.model, Stage::Finetuned, out)?;
            return Ok(Output::Summary(training_summary(&run.train_losses, run.best)));
        }
        Command::Embed { model, input } => {
            let out = require_out(&cli.out, "embed")?;
            let model = load_model(model)?;
            let corpus = SentenceCorpus::from_text(&read_text(input)?);
            write_embeddings(&embedding_matrix(&model, &corpus.sentences)?, &corpus.sentences, out)?;
            return Ok(Output::Nothing);
        }
        Command::Search { model, embeddings, query, top_k } => {
            let model = load_model(model)?;
            let (matrix, sentences) = read_embeddings(embeddings)?;
            if matrix.d() != model.config.d_model {
                bail!("embeddings have {} dimensions, model has {}", matrix.d(), model.config.d_model);
            }
            // Search distinct sentences and report how often each occurs.
            let counts = dedup_counts(&sentences);
            let mut first = Vec::with_capacity(counts.len());
            for (s, _) in &counts {
                first.push(sentences.iter().position(|x| x == s).expect("sentence came from this list"));
            }
            let rows: Vec<Vec<f64>> = first.iter().map(|&i| matrix.row_f64(i)).collect();
            let unique = if rows.is_empty() { matrix.clone() } else { EmbeddingMatrix::from_rows(&rows)? };
            let q = model.embed(query)?;
            let mut out = String::from("Query\tSentence\tScore\tCount\n");
            for hit in semantic_search(&q.vector, &unique, *top_k)? {
                let (s, count) = &counts[hit.corpus_index];
                out.push_str(&format!("{query}\t{s}\t{}\t{count}\n", format_score(hit.score, 4)));
            }
            out
        }
        Command::Cluster { embeddings, k, max_iters, project } => {
            let (matrix, sentences) = read_embeddings(embeddings)?;
            let result = kmeans_cluster(&matrix, *k, *max_iters, seed)?;
            let coords = if *project { Some(project_2d(&matrix)?) } else { None };
            let mut out =
                String::from(if *project { "Index\tCluster\tX\tY\tSentence\n" } else { "Index\tCluster\tSentence\n" });
            for (i, (c, s)) in result.assignments.iter().zip(&sentences).enumerate() {
                match &coords {
                    Some(xy) => out.push_str(&format!(
                        "{i}\t{c}\t{}\t{}\t{s}\n",
                        format_score(xy[i][0], 4),
                        format_score(xy[i][1], 4)
                    )),
                    None => out.push_str(&format!("{i}\t{c}\t{s}\n")),
                }
            }
            out
        }
        Command::MineParaphrases { embeddings, top_k, max_pairs, query_chunk, corpus_chunk } => {
            let (matrix, sentences) = read_embeddings(embeddings)?;
            let opts = MiningOptions {
                query_chunk: *query_chunk,
                corpus_chunk: *corpus_chunk,
                top_k_per_query: *top_k,
                max_pairs: *max_pairs,
            };
            let mut out = String::from("Idx1\tIdx2\tMessage1\tMessage2\tScore\n");
            for p in paraphrase_mine(&matrix, &opts)? {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    p.i,
                    p.j,
                    sentences[p.i],
                    sentences[p.j],
                    format_score(p.score, 4)
                ));
            }
            out
        }
        Command::StsEval { model, sts } => {
            let model = load_model(model)?;
            let pairs = load_sts(sts)?;
            let rho = sts_spearman(&model, &pairs)?;
            format!("Pairs\tSpearman\n{}\t{}\n", pairs.len(), format_score(rho, 4))
        }
        Command::CompareModels { models, pairs } => {
            let mut list = Vec::new();
            for (n, line) in read_text(pairs)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match line.split('\t').collect::<Vec<_>>()[..] {
                    [a, b] => list.push((a.to_string(), b.to_string())),
                    _ => bail!("{} line {}: expected two tab-separated sentences", pairs.display(), n + 1),
                }
            }
            let loaded: Vec<(String, EncoderModel)> =
                models.iter().map(|p| Ok((model_name(p), load_model(p)?))).collect::<Result<_>>()?;
            let mut out = String::from("Index\tSentence1\tSentence2");
            for (name, _) in &loaded {
                out.push('\t');
                out.push_str(name);
            }
            out.push('\n');
            for (i, (a, b)) in list.iter().enumerate() {
                out.push_str(&format!("{i}\t{a}\t{b}"));
                for (_, m) in &loaded {
                    let score = cosine(&m.embed(a)?.vector, &m.embed(b)?.vector)?;
                    out.push('\t');
                    out.push_str(&format_score(score, 3));
                }
                out.push('\n');
            }
            out
        }
    };
    Ok(Output::Text(text))
}

fn training_summary(losses: &[f64], best: Option<(usize, f64)>) -> String {
    let mut out = format!(
        "steps\t{}\ninitial_loss\t{}\nfinal_loss\t{}\n",
        losses.len(),
        losses.first().map_or("nan".into(), |l| format_score(*l, 6)),
        losses.last().map_or("nan".into(), |l| format_score(*l, 6)),
    );
    if let Some((step, score)) = best {
        out.push_str(&format!("best_step\t{step}\nbest_score\t{}\n", format_score(score, 6)));
    }
    out
}

pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::parse(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_pipeline<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = load_config(&cli).and_then(|cfg| execute(&cli, &cfg)).and_then(|text| {
        match (text, &cli.out) {
            (Output::Text(t), Some(out)) => write_atomic(out, t.as_bytes())?,
            (Output::Text(t) | Output::Summary(t), _) => print!("{t}"),
            (Output::Nothing, _) => {}
        }
        Ok(())
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
