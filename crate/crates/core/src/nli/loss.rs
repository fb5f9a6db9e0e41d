use super::NliError;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Multiple negatives ranking loss on tape rows (`B x d` each). Anchor `i`
/// is scored against all `B` positives and all `B` hard negatives with
/// `scale * cosine`; the target is positive `i`.
pub fn mnr_loss_var(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    negatives: Var,
    scale: f64,
) -> Result<Var, TensorError> {
    let b = tape.value(anchors).rows();
    for v in [positives, negatives] {
        let other = tape.value(v);
        if other.rows() != b || other.cols() != tape.value(anchors).cols() {
            return Err(TensorError::Shape {
                op: "mnr_loss",
                left: tape.value(anchors).shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
    }
    let a = tape.normalize_rows(anchors)?;
    let p = tape.normalize_rows(positives)?;
    let n = tape.normalize_rows(negatives)?;
    let candidates = tape.concat_rows(&[p, n])?;
    let ct = tape.transpose(candidates)?;
    let cos = tape.matmul(a, ct)?;
    let scores = tape.scale(cos, scale)?;
    let targets: Vec<usize> = (0..b).collect();
    tape.cross_entropy(scores, &targets, None)
}

/// [`mnr_loss_var`] on plain matrices.
pub fn mnr_loss(anchors: &Tensor, positives: &Tensor, negatives: &Tensor, scale: f64) -> Result<f64, NliError> {
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let p = tape.constant(positives.clone());
    let n = tape.constant(negatives.clone());
    let l = mnr_loss_var(&mut tape, a, p, n, scale)?;
    Ok(tape.value(l).item())
}

/// `W · [u, v, |u − v|]` with `W` of shape `3 x 3d`.
pub fn classification_logits(u: &[f64], v: &[f64], w: &Tensor) -> Result<Vec<f64>, NliError> {
    let d = u.len();
    if v.len() != d || w.dims() != (3, 3 * d) {
        return Err(NliError::Dimension(format!("u has {d} values, v has {}, head is {:?}", v.len(), w.shape())));
    }
    let features: Vec<f64> = u.iter().chain(v).copied().chain(u.iter().zip(v).map(|(a, b)| (a - b).abs())).collect();
    Ok((0..3).map(|r| w.row_slice(r).iter().zip(&features).map(|(a, b)| a * b).sum()).collect())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of the average ranks.
pub fn spearman(predicted: &[f64], gold: &[f64]) -> Result<f64, NliError> {
    if predicted.len() != gold.len() {
        return Err(NliError::Dimension(format!("{} predictions for {} gold scores", predicted.len(), gold.len())));
    }
    if predicted.len() < 2 {
        return Err(NliError::Undefined("need at least two pairs".into()));
    }
    let rx = average_ranks(predicted);
    let ry = average_ranks(gold);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in rx.iter().zip(&ry) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(NliError::Undefined("constant scores have no rank correlation".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
