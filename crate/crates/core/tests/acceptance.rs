//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! Exits nonzero when any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avsent::cli::format_score;
use avsent::encoder::{scaled_dot_attention, EncoderConfig, EncoderModel, Vocab};
use avsent::nli::{finetune_nli, mnr_loss, spearman, FinetuneConfig, Triplet};
use avsent::normalize::{clean_message, split_raw_records, RawMessage, RuleSet, SentenceCorpus};
use avsent::persist::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_embeddings, save_checkpoint, write_embeddings, Stage,
    EMBEDDING_HEADER_LEN,
};
use avsent::tasks::{kmeans_cluster, paraphrase_mine, semantic_search, EmbeddingMatrix, MiningOptions};
use avsent::tensor::{Tape, Tensor};
use avsent::tsdae::{restricted_cross_attention, train_tsdae, CrossAttnVars, NoiseSpec, PretrainConfig, TsdaeModel};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const RAW: &str = include_str!("fixtures/raw_messages.txt");
const GOLDEN: &str = include_str!("fixtures/clean_messages.txt");

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {took:?}, limit {limit:?}"));
    }
    Ok(())
}

fn c1_golden_normalization() -> Outcome {
    let t = Instant::now();
    let rules = RuleSet::canonical();
    let records = split_raw_records(RAW);
    let golden: Vec<&str> = GOLDEN.lines().collect();
    ensure!(records.len() == 2 && golden.len() == 2, "expected two records and two golden lines");
    for (i, (raw, want)) in records.iter().zip(&golden).enumerate() {
        let clean = clean_message(&RawMessage::new(raw.as_str()).unwrap(), &rules);
        ensure!(clean.body.as_bytes() == want.as_bytes(), "message {i} differs:\n got {}\nwant {want}", clean.body);
        let again = clean_message(&RawMessage::new(clean.body.as_str()).unwrap(), &rules);
        ensure!(again.body == clean.body, "message {i} is not idempotent");
    }
    within(Duration::from_secs(1), t)?;
    Ok(format!("2 messages byte-equal and idempotent in {:?}", t.elapsed()))
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn c2_restricted_cross_attention() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for instance in 0..100 {
        let d = rng.random_range(1..=16);
        let t = rng.random_range(1..=12);
        let mut tape = Tape::new();
        let h = tape.constant(random_tensor(&mut rng, t, d));
        let s = tape.constant(random_tensor(&mut rng, 1, d));
        let w = CrossAttnVars {
            value_weight: tape.constant(random_tensor(&mut rng, d, d)),
            value_bias: tape.constant(random_tensor(&mut rng, 1, d)),
            out_weight: tape.constant(random_tensor(&mut rng, d, d)),
            out_bias: tape.constant(random_tensor(&mut rng, 1, d)),
        };
        let out = restricted_cross_attention(&mut tape, h, s, &w).unwrap();
        let got = tape.value(out).clone();
        ensure!(got.dims() == (t, d), "instance {instance}: shape {:?}", got.shape());
        for r in 1..t {
            ensure!(got.row_slice(r) == got.row_slice(0), "instance {instance}: row {r} differs from row 0");
        }
        // Generic attention with its own query and key projections and a
        // single key.
        let wq = tape.constant(random_tensor(&mut rng, d, d));
        let wk = tape.constant(random_tensor(&mut rng, d, d));
        let q = tape.matmul(h, wq).unwrap();
        let k = tape.matmul(s, wk).unwrap();
        let v = tape.matmul(s, w.value_weight).unwrap();
        let v = tape.add_row(v, w.value_bias).unwrap();
        let a = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        let o = tape.matmul(a, w.out_weight).unwrap();
        let o = tape.add_row(o, w.out_bias).unwrap();
        ensure!(tape.value(o) == &got, "instance {instance}: differs from single-key attention");
    }
    within(Duration::from_secs(1), t0)?;
    Ok(format!("100 instances exact in {:?}", t0.elapsed()))
}

fn c3_gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let sentences = ["RWY 27 CLOSED.", "BIRD ACTIVITY INVOF ARPT.", "WIND 270 AT 15."];
    let vocab = Vocab::build(&sentences, 1).unwrap();
    let mut cfg = EncoderConfig::toy(vocab.len());
    cfg.dropout = 0.0;
    let mut model = TsdaeModel::new(vocab, cfg, 1, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch: Vec<_> = sentences.iter().filter_map(|s| model.example(s, 0.4, &mut rng)).collect();
    let (_, grads) = model.loss_and_grads(&batch).unwrap();
    let h = 1e-5;
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut vanishing = Vec::new();
    for (pi, id) in ids.into_iter().enumerate() {
        let name = model.params().name(id).to_string();
        let g = &grads[pi];
        let n = g.numel();
        let mut nonzero: Vec<usize> = (0..n).filter(|&i| g.data()[i] != 0.0).collect();
        let zero: Vec<usize> = (0..n).filter(|&i| g.data()[i] == 0.0).take(3).collect();
        ensure!(!nonzero.is_empty(), "{name}: analytic gradient is identically zero");
        // Up to 12 coordinates per group, spread over the tensor.
        let stride = nonzero.len().div_ceil(12);
        nonzero = nonzero.into_iter().step_by(stride).collect();
        let mut numeric = |i: usize| {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = model.loss(&batch).unwrap();
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = model.loss(&batch).unwrap();
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        };
        let (mut diff, mut an, mut nu) = (0.0, 0.0, 0.0);
        for &i in &nonzero {
            let num = numeric(i);
            let a = g.data()[i];
            diff += (a - num) * (a - num);
            an += a * a;
            nu += num * num;
        }
        for &i in &zero {
            let num = numeric(i);
            ensure!(num.abs() < 1e-8, "{name}[{i}]: analytic 0, numeric {num:e}");
        }
        checked += nonzero.len() + zero.len();
        // Key biases shift every score of a query row equally, which the
        // softmax cancels: their true gradient is zero and both sides hold
        // only rounding noise.
        if an.sqrt() < 1e-12 {
            ensure!(nu.sqrt() < 1e-8, "{name}: analytic ~0 but numeric norm {:e}", nu.sqrt());
            vanishing.push(name);
            continue;
        }
        let rel = diff.sqrt() / an.sqrt().max(nu.sqrt());
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
        ensure!(rel < 1e-4, "{name}: relative error {rel:e}");
    }
    within(Duration::from_secs(30), t0)?;
    Ok(format!(
        "{} groups, {checked} coordinates, worst relative error {:.2e} ({}); {} zero-gradient groups confirmed; {:?}",
        grads.len(),
        worst.0,
        worst.1,
        vanishing.len(),
        t0.elapsed()
    ))
}

fn c4_c5_tsdae_training() -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let sentences = common::templated_sentences(200, 1);
    let vocab = Vocab::build(&sentences, 1).unwrap();
    let n = vocab.len();
    let model = TsdaeModel::new(vocab, EncoderConfig::toy(n), 1, 2).unwrap();
    let corpus = SentenceCorpus { sentences, deduplicated: true };
    let cfg = PretrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        max_steps: Some(300),
        evaluation_steps: 100,
        show_progress: false,
        ..Default::default()
    };
    let run = train_tsdae(model, &corpus, &cfg, &NoiseSpec::new(0.6, 3).unwrap()).unwrap();
    let l = &run.train_losses;
    let initial = l[0];
    let fin = l[l.len() - 10..].iter().sum::<f64>() / 10.0;

    let tying = {
        let m = &run.model;
        if m.decoder_output_projection_id() != m.encoder.token_embedding_id() {
            Err("decoder projection is a separate parameter".to_string())
        } else if m.decoder_output_projection() != m.encoder.token_embedding() {
            Err("decoder projection values differ from the token embedding".to_string())
        } else {
            let exported = m.clone().into_encoder();
            if exported.token_embedding() == m.decoder_output_projection() {
                Ok(format!("shared parameter, {} values equal", m.encoder.token_embedding().numel()))
            } else {
                Err("exported encoder embedding differs".to_string())
            }
        }
    };

    let single = "BIRD ACTIVITY INVOF ARPT.";
    let vocab = Vocab::build(&[single], 1).unwrap();
    let n1 = vocab.len();
    let model = TsdaeModel::new(vocab, EncoderConfig::toy(n1), 1, 5).unwrap();
    let one = SentenceCorpus { sentences: vec![single.to_string()], deduplicated: true };
    let overfit_cfg = PretrainConfig {
        learning_rate: 1e-3,
        batch_size: 1,
        max_steps: Some(150),
        evaluation_steps: 50,
        show_progress: false,
        ..Default::default()
    };
    let fitted = train_tsdae(model, &one, &overfit_cfg, &NoiseSpec::new(0.6, 6).unwrap()).unwrap();
    let (predicted, target) = fitted.model.reconstruct(single).unwrap();

    let training = if !(fin < 0.5 * initial) {
        Err(format!("loss {initial:.4} -> {fin:.4}, not halved"))
    } else if predicted != target {
        Err(format!("single sentence decoded as {predicted:?}, want {target:?}"))
    } else {
        within(Duration::from_secs(180), t0).map(|_| {
            format!(
                "loss {initial:.4} -> {fin:.4} (ratio {:.3}); single sentence reconstructed; {:?}",
                fin / initial,
                t0.elapsed()
            )
        })
    };
    (training, tying)
}

fn rows(r: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn c6_mnrl_closed_forms() -> Outcome {
    let a = rows(&[&[1.0, 0.0]]);
    let p = rows(&[&[0.0, 1.0]]);
    let n = rows(&[&[0.0, -1.0]]);
    let sym = mnr_loss(&a, &p, &n, 20.0).unwrap();
    ensure!((sym - 2f64.ln()).abs() < 1e-12, "symmetric case {sym} != ln 2");
    let p2 = rows(&[&[3.0, 0.0]]);
    let n2 = rows(&[&[-0.5, 0.0]]);
    let sat = mnr_loss(&a, &p2, &n2, 20.0).unwrap();
    ensure!((0.0..1e-15).contains(&sat), "saturated case {sat:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, p, n) = (random_tensor(&mut rng, 6, 5), random_tensor(&mut rng, 6, 5), random_tensor(&mut rng, 6, 5));
    let base = mnr_loss(&a, &p, &n, 20.0).unwrap();
    let scaled =
        |t: &Tensor, s: f64| Tensor::matrix(t.rows(), t.cols(), t.data().iter().map(|v| v * s).collect()).unwrap();
    for s in [0.25, 2.0, 1024.0] {
        let l = mnr_loss(&scaled(&a, s), &scaled(&p, s), &scaled(&n, s), 20.0).unwrap();
        ensure!(l == base, "rescaling by {s}: {l} != {base}");
    }
    let mut worst: f64 = 0.0;
    for s in [0.3, 3.0, 17.5] {
        let l = mnr_loss(&scaled(&a, s), &scaled(&p, s), &scaled(&n, s), 20.0).unwrap();
        worst = worst.max((l - base).abs());
    }
    ensure!(worst < 1e-12, "non-binary rescaling drifts by {worst:e}");
    Ok(format!(
        "ln2 err {:.1e}; saturated {sat:.1e}; exact for power-of-two scales, {worst:.1e} otherwise",
        (sym - 2f64.ln()).abs()
    ))
}

fn triplet_families(n: usize) -> Vec<Triplet> {
    let mut out = Vec::new();
    let letters = ["A", "B", "C", "D", "E", "F", "G", "H", "J", "K"];
    for i in 0..n {
        let rwy = 2 + i;
        let l = letters[i % letters.len()];
        out.push(match i % 4 {
            0 => Triplet {
                anchor: format!("RWY {rwy} CLSD."),
                positive: format!("RUNWAY {rwy} CLOSED."),
                negative: format!("RWY {rwy} OPEN."),
            },
            1 => Triplet {
                anchor: format!("TWY {l} CLSD."),
                positive: format!("TAXIWAY {l} CLOSED."),
                negative: format!("TWY {l} OPEN FOR ALL ACFT."),
            },
            2 => Triplet {
                anchor: format!("BIRD ACTIVITY INVOF RWY {rwy}."),
                positive: format!("BIRD ACTIVITY IN THE VICINITY OF RWY {rwy}."),
                negative: format!("NO BIRD ACTIVITY RPTD RWY {rwy}."),
            },
            _ => Triplet {
                anchor: format!("ILS RWY {rwy} OTS."),
                positive: format!("ILS RWY {rwy} OUT OF SERVICE."),
                negative: format!("ILS RWY {rwy} IN SERVICE."),
            },
        });
    }
    out
}

fn gap(model: &EncoderModel, triplets: &[Triplet]) -> f64 {
    let (mut pos, mut neg) = (0.0, 0.0);
    for t in triplets {
        let a = model.embed(&t.anchor).unwrap().vector;
        let p = model.embed(&t.positive).unwrap().vector;
        let n = model.embed(&t.negative).unwrap().vector;
        pos += common::cosine_oracle(&a, &p);
        neg += common::cosine_oracle(&a, &n);
    }
    (pos - neg) / triplets.len() as f64
}

fn c7_finetuning_effect() -> Outcome {
    let t0 = Instant::now();
    let triplets = triplet_families(20);
    let text: Vec<&str> =
        triplets.iter().flat_map(|t| [t.anchor.as_str(), t.positive.as_str(), t.negative.as_str()]).collect();
    let vocab = Vocab::build(&text, 1).unwrap();
    let n = vocab.len();
    let model = EncoderModel::new(vocab, EncoderConfig::toy(n), 8).unwrap();
    let before = gap(&model, &triplets);
    let cfg = FinetuneConfig {
        learning_rate: 1e-4,
        batch_size: 10,
        max_steps: Some(60),
        show_progress: false,
        ..Default::default()
    };
    let run = finetune_nli(model, &triplets, &[], &cfg, 8).unwrap();
    let after = gap(&run.model, &triplets);
    ensure!(after > before, "gap {before:.4} -> {after:.4} did not increase");
    within(Duration::from_secs(120), t0)?;
    Ok(format!("cos(a,p) - cos(a,n) gap {before:.4} -> {after:.4} in {:?}", t0.elapsed()))
}

fn c8_identity_pairs() -> Outcome {
    let messages = [
        "ATIS YMEN K 050345. WIND 090/15 MAX XW 15 KTS.",
        "RWY 29 ARRIVING AND DEPARTING.",
        "BIRD ACTIVITY INVOF ARPT.",
        "ATIS YMEN K 050345. WIND 090/15 MAX XW 15 KTS.",
        "TWY D CLSD.",
        "BIRD ACTIVITY INVOF ARPT.",
    ];
    let vocab = Vocab::build(&messages, 1).unwrap();
    let n = vocab.len();
    let model = EncoderModel::new(vocab, EncoderConfig::toy(n), 3).unwrap();
    let rows: Vec<Vec<f64>> = model.embed_all(&messages).unwrap().into_iter().map(|e| e.vector).collect();
    let matrix = EmbeddingMatrix::from_rows(&rows).unwrap();
    let pairs = paraphrase_mine(&matrix, &MiningOptions::default()).unwrap();
    for (i, j) in [(0, 3), (2, 5)] {
        let p = pairs.iter().find(|p| (p.i, p.j) == (i, j)).ok_or(format!("pair ({i}, {j}) missing"))?;
        let shown = format_score(p.score, 4);
        ensure!(shown == "1.0000", "pair ({i}, {j}) printed as {shown}");
    }
    let others = pairs.iter().filter(|p| format_score(p.score, 4) == "1.0000").count();
    ensure!(others == 2, "{others} pairs print as 1.0000, expected the 2 duplicates");
    Ok("both duplicate pairs print as 1.0000 and rank first".into())
}

/// Brute-force cosine ranking: score descending, index ascending.
fn ranked(scores: &mut [(f64, usize)]) {
    scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

fn brute_mine(rows: &[Vec<f64>], top_k: usize, max_pairs: usize) -> Vec<(usize, usize, f64)> {
    let mut pairs = std::collections::BTreeMap::new();
    for i in 0..rows.len() {
        let mut s: Vec<(f64, usize)> =
            (0..rows.len()).filter(|&j| j != i).map(|j| (common::cosine_oracle(&rows[i], &rows[j]), j)).collect();
        ranked(&mut s);
        for &(score, j) in s.iter().take(top_k) {
            pairs.entry((i.min(j), i.max(j))).or_insert(score);
        }
    }
    let mut v: Vec<(usize, usize, f64)> = pairs.into_iter().map(|((i, j), s)| (i, j, s)).collect();
    v.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    v.truncate(max_pairs);
    v
}

fn c9_oracle_equivalence() -> Outcome {
    let t0 = Instant::now();
    let (n, d) = (500, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let matrix = EmbeddingMatrix::new(n, d, data).unwrap();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| matrix.row_f64(i)).collect();

    for q in [0, 17, 250, 499] {
        let hits = semantic_search(&rows[q], &matrix, 10).unwrap();
        let mut all: Vec<(f64, usize)> = (0..n).map(|j| (common::cosine_oracle(&rows[q], &rows[j]), j)).collect();
        ranked(&mut all);
        ensure!(hits.len() == 10, "search returned {} hits", hits.len());
        for (h, (score, j)) in hits.iter().zip(&all) {
            ensure!(h.corpus_index == *j, "query {q}: hit {} vs brute {j}", h.corpus_index);
            ensure!((h.score - score).abs() < 1e-6, "query {q}: score {} vs {score}", h.score);
        }
    }

    let settings = [(5000, 100_000), (64, 100), (7, 33)];
    let mut compared = 0;
    for (top_k, max_pairs) in [(5, 100_000), (499, 2000)] {
        let oracle = brute_mine(&rows, top_k, max_pairs);
        for (qc, cc) in settings {
            let opts = MiningOptions { query_chunk: qc, corpus_chunk: cc, top_k_per_query: top_k, max_pairs };
            let got = paraphrase_mine(&matrix, &opts).unwrap();
            ensure!(
                got.len() == oracle.len(),
                "chunks ({qc}, {cc}) top {top_k}: {} pairs vs {}",
                got.len(),
                oracle.len()
            );
            let got_set: std::collections::BTreeSet<_> = got.iter().map(|p| (p.i, p.j)).collect();
            let want_set: std::collections::BTreeSet<_> = oracle.iter().map(|p| (p.0, p.1)).collect();
            ensure!(got_set == want_set, "chunks ({qc}, {cc}) top {top_k}: pair sets differ");
            for (g, w) in got.iter().zip(&oracle) {
                ensure!((g.score - w.2).abs() < 1e-6, "pair ({}, {}) score {} vs {}", g.i, g.j, g.score, w.2);
            }
            compared += got.len();
        }
    }
    within(Duration::from_secs(10), t0)?;
    Ok(format!("search x4 and {compared} mined pairs over 3 chunkings match brute force in {:?}", t0.elapsed()))
}

fn c10_spearman() -> Outcome {
    let gold = [0.2, 1.4, 2.0, 3.3, 4.9];
    let up = spearman(&[0.1, 0.2, 0.35, 0.5, 0.99], &gold).map_err(|e| e.to_string())?;
    let down = spearman(&[0.99, 0.5, 0.35, 0.2, 0.1], &gold).map_err(|e| e.to_string())?;
    ensure!(up == 1.0, "monotone gives {up}");
    ensure!(down == -1.0, "reversed gives {down}");
    // Ranks x = [1, 2.5, 2.5, 4], y = [1, 2, 3, 4]: sxy = 4.5, sxx = 4.5,
    // syy = 5, so rho = 4.5 / sqrt(22.5) = sqrt(0.9).
    let tie = spearman(&[0.1, 0.4, 0.4, 0.8], &[1.0, 2.0, 3.0, 4.0]).map_err(|e| e.to_string())?;
    ensure!((tie - 0.9f64.sqrt()).abs() < 1e-12, "tie case {tie}");
    Ok(format!("1.0, -1.0 exact; tie case error {:.1e}", (tie - 0.9f64.sqrt()).abs()))
}

fn c11_kmeans() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut iters = 0;
    for seed in 0..5 {
        let data: Vec<f32> = (0..300 * 8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let m = EmbeddingMatrix::new(300, 8, data).unwrap();
        let c = kmeans_cluster(&m, 6, 100, seed).unwrap();
        for w in c.objective_history.windows(2) {
            ensure!(w[1] <= w[0] + 1e-12 * w[0].abs(), "seed {seed}: objective rose {} -> {}", w[0], w[1]);
        }
        ensure!(c == kmeans_cluster(&m, 6, 100, seed).unwrap(), "seed {seed}: rerun differs");
        iters += c.iterations;
    }

    let mut blob_rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..100 {
        let centre = if i % 2 == 0 { [5.0, 0.0, 1.0] } else { [0.0, 5.0, -1.0] };
        blob_rows.push(centre.iter().map(|c| c + rng.random_range(-0.3..0.3)).collect::<Vec<f64>>());
        truth.push(i % 2);
    }
    let m = EmbeddingMatrix::from_rows(&blob_rows).unwrap();
    let c = kmeans_cluster(&m, 2, 100, 1).unwrap();
    let mut purity_hits = 0;
    for cluster in 0..2 {
        let members: Vec<usize> = (0..100).filter(|&i| c.assignments[i] == cluster).collect();
        let ones = members.iter().filter(|&&i| truth[i] == 1).count();
        purity_hits += ones.max(members.len() - ones);
    }
    let purity = purity_hits as f64 / 100.0;
    ensure!(purity == 1.0, "purity {purity}");
    Ok(format!("objective monotone over {iters} iterations, deterministic, blob purity {purity:.1}"))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out =
        Command::new(env!("CARGO_BIN_EXE_avsent")).current_dir(dir).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

const CLI_CONFIG: &str = "\
pretrain.max_steps=30
pretrain.batch_size=8
pretrain.evaluation_steps=10
pretrain.show_progress=false
finetune.max_steps=6
finetune.batch_size=4
finetune.evaluation_steps=3
finetune.show_progress=false
";

/// Runs the whole pipeline in `dir` and returns every produced byte
/// stream by name.
fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    std::fs::copy(fixtures.join("raw_messages.txt"), dir.join("raw.txt")).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("cfg.txt"), CLI_CONFIG).map_err(|e| e.to_string())?;
    let extra = common::templated_sentences(40, 3).join("\n") + "\n";
    let nli = "sentence1\tsentence2\tlabel\n\
        RWY 7L CLOSED.\tRUNWAY 7L IS CLOSED.\tentailment\n\
        RWY 7L CLOSED.\tRWY 7L IS OPEN.\tcontradiction\n\
        NOTAMS.\tNOTICE TO AIR MISSIONS.\tentailment\n\
        NOTAMS.\tNO NOTICES.\tcontradiction\n\
        BIRD ACTIVITY INVOF ARPT.\tBIRDS NEAR THE AIRPORT.\tentailment\n\
        BIRD ACTIVITY INVOF ARPT.\tNO BIRD ACTIVITY.\tcontradiction\n";
    let sts = "sentence1\tsentence2\tscore\n\
        NOTAMS.\tNOTICE TO AIR MISSIONS.\t4.5\n\
        RWY 7L CLOSED.\tRWY 7L IS OPEN.\t1.0\n\
        TDWR OTS.\tRWY 2R GS OTS.\t2.0\n";
    let pairs = "NOTAMS.\tNOTICE TO AIR MISSIONS.\nTDWR OTS.\tRWY 2R GS OTS.\n";
    for (name, body) in [("nli.tsv", nli), ("sts.tsv", sts), ("pairs.tsv", pairs)] {
        std::fs::write(dir.join(name), body).map_err(|e| e.to_string())?;
    }
    let common = ["--config", "cfg.txt", "--seed", "12"];
    let mut outputs = Vec::new();
    let mut step = |label: &str, args: &[&str], files: &[&str]| -> Result<(), String> {
        let mut full: Vec<&str> = args.to_vec();
        full.extend_from_slice(&common);
        outputs.push((format!("{label} stdout"), run_cli(dir, &full)?));
        for f in files {
            outputs.push((f.to_string(), std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?));
        }
        Ok(())
    };
    step("clean", &["clean", "--input", "raw.txt", "--out", "clean.txt"], &["clean.txt"])?;
    step("segment", &["segment", "--input", "clean.txt", "--out", "corpus0.txt"], &["corpus0.txt"])?;
    let mut corpus = std::fs::read_to_string(dir.join("corpus0.txt")).map_err(|e| e.to_string())?;
    corpus.push_str(&extra);
    corpus.push_str("BIRD ACTIVITY INVOF ARPT.\nBIRD ACTIVITY INVOF ARPT.\n");
    std::fs::write(dir.join("corpus.txt"), corpus).map_err(|e| e.to_string())?;
    step("pretrain-tsdae", &["pretrain-tsdae", "--corpus", "corpus.txt", "--out", "pre.ckpt"], &["pre.ckpt"])?;
    step(
        "finetune-nli",
        &["finetune-nli", "--model", "pre.ckpt", "--nli", "nli.tsv", "--sts", "sts.tsv", "--out", "ft.ckpt"],
        &["ft.ckpt"],
    )?;
    step(
        "embed",
        &["embed", "--model", "ft.ckpt", "--input", "corpus.txt", "--out", "emb.avse"],
        &["emb.avse", "emb.avse.txt"],
    )?;
    step(
        "search",
        &[
            "search",
            "--model",
            "ft.ckpt",
            "--embeddings",
            "emb.avse",
            "--query",
            "BIRD ACTIVITY IN VCY OF ARPT",
            "--top-k",
            "10",
        ],
        &[],
    )?;
    step(
        "cluster",
        &["cluster", "--embeddings", "emb.avse", "--k", "4", "--project", "--out", "clusters.tsv"],
        &["clusters.tsv"],
    )?;
    step("mine-paraphrases", &["mine-paraphrases", "--embeddings", "emb.avse", "--top-k", "3"], &[])?;
    step("sts-eval", &["sts-eval", "--model", "ft.ckpt", "--sts", "sts.tsv"], &[])?;
    step(
        "compare-models",
        &["compare-models", "--model", "pre.ckpt", "--model", "ft.ckpt", "--pairs", "pairs.tsv"],
        &[],
    )?;
    Ok(outputs)
}

fn c12_determinism_and_persistence() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure!(x == y, "{name} differs between runs");
    }
    let search = String::from_utf8(first.iter().find(|(n, _)| n == "search stdout").unwrap().1.clone()).unwrap();
    let lines: Vec<&str> = search.lines().collect();
    ensure!(lines[0] == "Query\tSentence\tScore\tCount", "search header `{}`", lines[0]);
    ensure!(lines.len() == 11, "search printed {} result rows", lines.len() - 1);
    ensure!(
        lines[1..].iter().all(|l| l.split('\t').count() == 4 && l.split('\t').nth(2).unwrap().len() == 6),
        "search rows are not Query/Sentence/Score(4 dp)/Count"
    );

    // Checkpoint round trip on the trained model.
    let ckpt = a.path().join("ft.ckpt");
    let loaded = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    ensure!(loaded.stage == Stage::Finetuned, "stage tag lost");
    let original = std::fs::read(&ckpt).unwrap();
    ensure!(encode_checkpoint(&loaded.model, loaded.stage) == original, "save -> load -> save is not byte-identical");
    ensure!(decode_checkpoint(&original[..original.len() - 3]).is_err(), "truncated checkpoint loaded");
    let corpus = SentenceCorpus::from_text(&std::fs::read_to_string(a.path().join("corpus.txt")).unwrap());
    let before = loaded.model.embed_all(&corpus.sentences).unwrap();
    let copy = a.path().join("copy.ckpt");
    save_checkpoint(&loaded.model, Stage::Finetuned, &copy).map_err(|e| e.to_string())?;
    let after = load_checkpoint(&copy).map_err(|e| e.to_string())?.model.embed_all(&corpus.sentences).unwrap();
    let mut drift: f64 = 0.0;
    for (x, y) in before.iter().zip(&after) {
        drift = drift.max(1.0 - common::cosine_oracle(&x.vector, &y.vector));
    }
    ensure!(drift < 1e-6, "checkpoint cosine drift {drift:e}");

    // f64 model embeddings against the f32 embedding file written by the CLI.
    let (matrix, sentences) = read_embeddings(&a.path().join("emb.avse")).map_err(|e| e.to_string())?;
    ensure!(sentences == corpus.sentences, "sidecar sentences differ");
    let mut file_drift: f64 = 0.0;
    for (i, e) in before.iter().enumerate() {
        file_drift = file_drift.max(1.0 - common::cosine_oracle(&e.vector, &matrix.row_f64(i)));
    }
    ensure!(file_drift < 1e-6, "embedding file cosine drift {file_drift:e}");

    // 1000-row file: pairwise cosines identical after the round trip.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data: Vec<f32> = (0..1000 * 12).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    let big = EmbeddingMatrix::new(1000, 12, data).unwrap();
    let names: Vec<String> = (0..1000).map(|i| format!("SENTENCE {i}.")).collect();
    let p = a.path().join("big.avse");
    write_embeddings(&big, &names, &p).map_err(|e| e.to_string())?;
    ensure!(
        std::fs::metadata(&p).unwrap().len() as usize == EMBEDDING_HEADER_LEN + 4 * 1000 * 12,
        "payload length wrong"
    );
    let (back, back_names) = read_embeddings(&p).map_err(|e| e.to_string())?;
    ensure!(back_names == names, "sidecar changed");
    for i in (0..1000).step_by(37) {
        for j in (0..1000).step_by(53) {
            let x = common::cosine_oracle(&big.row_f64(i), &big.row_f64(j));
            let y = common::cosine_oracle(&back.row_f64(i), &back.row_f64(j));
            ensure!(x == y, "cosine ({i}, {j}) changed");
        }
    }
    Ok(format!(
        "{} outputs byte-identical across runs; checkpoint drift {drift:.1e}, file drift {file_drift:.1e}",
        first.len()
    ))
}

fn guard(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "golden normalization", guard(c1_golden_normalization)),
        (2, "restricted cross-attention", guard(c2_restricted_cross_attention)),
        (3, "gradient suite", guard(c3_gradient_suite)),
    ];
    let (training, tying) = match catch_unwind(c4_c5_tsdae_training) {
        Ok(pair) => pair,
        Err(_) => (Err("panicked".into()), Err("training panicked".into())),
    };
    results.push((4, "TSDAE desk-scale training", training));
    results.push((5, "weight tying", tying));
    results.push((6, "MNRL closed forms", guard(c6_mnrl_closed_forms)));
    results.push((7, "fine-tuning effect", guard(c7_finetuning_effect)));
    results.push((8, "identical messages score 1.0000", guard(c8_identity_pairs)));
    results.push((9, "search and mining oracle equivalence", guard(c9_oracle_equivalence)));
    results.push((10, "Spearman evaluator", guard(c10_spearman)));
    results.push((11, "k-means", guard(c11_kmeans)));
    results.push((12, "determinism and persistence", guard(c12_determinism_and_persistence)));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
