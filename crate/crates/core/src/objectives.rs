//! Loss functions: binary cross-entropy, full softmax cross-entropy, sampled
//! softmax cross-entropy, the Barlow Twins redundancy-reduction loss, and the
//! combined multi-task objective, plus the negative/candidate samplers.
//!
//! Every loss comes in a value form and a value-and-gradient form; the
//! gradient forms are what the trainer consumes and what the finite-difference
//! suite checks.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::encoder::ScoreVector;
use crate::{Error, ItemId, Result};

/// Numerically stable log(1 + exp(x)).
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy over one positive score and its sampled negatives:
/// -[log sigma(pos) + sum_j log(1 - sigma(neg_j))], evaluated in softplus
/// form so extreme scores cannot overflow.
pub fn bce_loss(pos_score: f64, negatives: &[f64]) -> f64 {
    let mut loss = softplus(-pos_score);
    for &s in negatives {
        loss += softplus(s);
    }
    loss
}

/// [`bce_loss`] plus gradients with respect to each score.
pub fn bce_loss_grad(pos_score: f64, negatives: &[f64]) -> (f64, f64, Vec<f64>) {
    let loss = bce_loss(pos_score, negatives);
    let d_pos = sigmoid(pos_score) - 1.0;
    let d_negs = negatives.iter().map(|&s| sigmoid(s)).collect();
    (loss, d_pos, d_negs)
}

/// Full-catalog cross-entropy: -log softmax(scores)[target].
pub fn ce_loss(scores: &ScoreVector, target: ItemId) -> f64 {
    ce_from_logits(scores.as_slice(), (target - 1) as usize)
}

/// [`ce_loss`] plus the gradient over all catalog scores.
pub fn ce_loss_grad(scores: &ScoreVector, target: ItemId) -> (f64, Vec<f64>) {
    ce_from_logits_grad(scores.as_slice(), (target - 1) as usize)
}

/// Cross-entropy over raw logits with max-subtraction stability.
pub fn ce_from_logits(logits: &[f64], target_idx: usize) -> f64 {
    assert!(target_idx < logits.len(), "target index out of range");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    log_sum - (logits[target_idx] - max)
}

/// [`ce_from_logits`] plus gradient: softmax(logits) - onehot(target).
pub fn ce_from_logits_grad(logits: &[f64], target_idx: usize) -> (f64, Vec<f64>) {
    assert!(target_idx < logits.len(), "target index out of range");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    let loss = sum.ln() - (logits[target_idx] - max);
    for p in probs.iter_mut() {
        *p /= sum;
    }
    probs[target_idx] -= 1.0;
    (loss, probs)
}

/// Sampled cross-entropy: softmax restricted to the candidate set, which
/// contains the true target at `target_position`.
pub fn sce_loss(scores_on_candidates: &[f64], target_position: usize) -> Result<f64> {
    if target_position >= scores_on_candidates.len() {
        return Err(Error::IndexOutOfRange(format!(
            "target position {target_position} in candidate set of size {}",
            scores_on_candidates.len()
        )));
    }
    Ok(ce_from_logits(scores_on_candidates, target_position))
}

/// [`sce_loss`] plus the gradient over the candidate scores.
pub fn sce_loss_grad(scores_on_candidates: &[f64], target_position: usize) -> Result<(f64, Vec<f64>)> {
    if target_position >= scores_on_candidates.len() {
        return Err(Error::IndexOutOfRange(format!(
            "target position {target_position} in candidate set of size {}",
            scores_on_candidates.len()
        )));
    }
    Ok(ce_from_logits_grad(scores_on_candidates, target_position))
}

/// Two embedding views of one batch, row b of each being the encoder output
/// for the b-th (anchor, paired) prefix.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub view_a: Array2<f64>,
    pub view_b: Array2<f64>,
}

impl ViewBatch {
    pub fn new(view_a: Array2<f64>, view_b: Array2<f64>) -> Result<ViewBatch> {
        if view_a.dim() != view_b.dim() {
            return Err(Error::InvalidInput(format!(
                "view shapes differ: {:?} vs {:?}",
                view_a.dim(),
                view_b.dim()
            )));
        }
        if view_a.nrows() < 2 {
            return Err(Error::InvalidInput(
                "view batches need at least 2 rows".into(),
            ));
        }
        if view_a.iter().chain(view_b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("views contain non-finite values".into()));
        }
        Ok(ViewBatch { view_a, view_b })
    }

    pub fn batch_size(&self) -> usize {
        self.view_a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.view_a.ncols()
    }
}

/// D x D cross-correlation of the two views, with diagnostics for columns
/// whose variance vanished after centering.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub matrix: Array2<f64>,
    /// Column indices of view A / view B that were flagged zero-variance and
    /// had their correlations defined as 0.
    pub degenerate_a: Vec<usize>,
    pub degenerate_b: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

fn row_normalized(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// Centers columns and column-normalizes; zero-norm columns are flagged and
/// left as zeros so downstream correlations come out 0 instead of NaN.
fn centered_unit_columns(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Vec<usize>) {
    let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
    let mut centered = z - &mean.view().insert_axis(Axis(0));
    let mut norms = Array1::zeros(z.ncols());
    let mut degenerate = Vec::new();
    for (j, mut col) in centered.columns_mut().into_iter().enumerate() {
        let norm = col.dot(&col).sqrt();
        norms[j] = norm;
        if norm > 0.0 {
            col.mapv_inplace(|v| v / norm);
        } else {
            degenerate.push(j);
        }
    }
    (centered, norms, degenerate)
}

/// Cross-correlation matrix of two views: rows are l2-normalized, columns are
/// mean-centered across the batch, and entry (i, j) is the cosine of centered
/// column i of view A with centered column j of view B (the Pearson column
/// correlation). Entries lie in [-1, 1] up to rounding.
pub fn cross_correlation(views: &ViewBatch, row_normalize: bool) -> CorrelationMatrix {
    let a = if row_normalize {
        row_normalized(&views.view_a)
    } else {
        views.view_a.clone()
    };
    let b = if row_normalize {
        row_normalized(&views.view_b)
    } else {
        views.view_b.clone()
    };
    let (a_hat, _, degenerate_a) = centered_unit_columns(&a);
    let (b_hat, _, degenerate_b) = centered_unit_columns(&b);
    if !degenerate_a.is_empty() || !degenerate_b.is_empty() {
        log::warn!(
            "cross-correlation: {} + {} zero-variance columns defined as 0",
            degenerate_a.len(),
            degenerate_b.len()
        );
    }
    CorrelationMatrix {
        matrix: a_hat.t().dot(&b_hat),
        degenerate_a,
        degenerate_b,
    }
}

/// Barlow Twins loss: sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2.
pub fn bt_loss(correlation: &CorrelationMatrix, lambda: f64) -> f64 {
    let c = &correlation.matrix;
    assert_eq!(c.nrows(), c.ncols(), "correlation matrix must be square");
    let mut invariance = 0.0;
    let mut redundancy = 0.0;
    for ((i, j), &v) in c.indexed_iter() {
        if i == j {
            invariance += (1.0 - v) * (1.0 - v);
        } else {
            redundancy += v * v;
        }
    }
    invariance + lambda * redundancy
}

/// Barlow Twins loss and its gradients with respect to both raw views.
///
/// Backpropagates through the full normalization chain (row l2-normalize,
/// column center, column normalize); flagged zero-variance columns and
/// zero-norm rows contribute zero gradient.
pub fn bt_loss_grad(
    views: &ViewBatch,
    lambda: f64,
    row_normalize: bool,
) -> (f64, Array2<f64>, Array2<f64>) {
    let batch = views.batch_size();
    let dim = views.dim();

    let (a1, a_row_norms) = if row_normalize {
        let mut norms = Array1::zeros(batch);
        let mut a = views.view_a.clone();
        for (b, mut row) in a.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            norms[b] = n;
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
        (a, norms)
    } else {
        (views.view_a.clone(), Array1::zeros(0))
    };
    let (b1, b_row_norms) = if row_normalize {
        let mut norms = Array1::zeros(batch);
        let mut b = views.view_b.clone();
        for (r, mut row) in b.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            norms[r] = n;
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
        (b, norms)
    } else {
        (views.view_b.clone(), Array1::zeros(0))
    };

    let (a_hat, a_col_norms, degenerate_a) = centered_unit_columns(&a1);
    let (b_hat, b_col_norms, degenerate_b) = centered_unit_columns(&b1);
    let c = a_hat.t().dot(&b_hat);

    let correlation = CorrelationMatrix {
        matrix: c.clone(),
        degenerate_a,
        degenerate_b,
    };
    let loss = bt_loss(&correlation, lambda);

    // dL/dC
    let mut g = Array2::zeros((dim, dim));
    for ((i, j), &v) in c.indexed_iter() {
        g[[i, j]] = if i == j {
            -2.0 * (1.0 - v)
        } else {
            2.0 * lambda * v
        };
    }

    // Through C = A_hat^T B_hat.
    let d_a_hat = b_hat.dot(&g.t());
    let d_b_hat = a_hat.dot(&g);

    // Through column normalization: u_hat = u / |u|.
    let un_normalize_columns = |d_hat: &Array2<f64>, hat: &Array2<f64>, norms: &Array1<f64>| {
        let mut d = Array2::zeros((batch, dim));
        for j in 0..dim {
            let n = norms[j];
            if n == 0.0 {
                continue;
            }
            let hat_col = hat.column(j);
            let d_col = d_hat.column(j);
            let proj = hat_col.dot(&d_col);
            for b in 0..batch {
                d[[b, j]] = (d_col[b] - hat_col[b] * proj) / n;
            }
        }
        d
    };
    let d_a2 = un_normalize_columns(&d_a_hat, &a_hat, &a_col_norms);
    let d_b2 = un_normalize_columns(&d_b_hat, &b_hat, &b_col_norms);

    // Through column centering: subtract the column mean of the gradient.
    let un_center = |d: Array2<f64>| {
        let mean = d.mean_axis(Axis(0)).expect("nonempty batch");
        d - &mean.insert_axis(Axis(0))
    };
    let d_a1 = un_center(d_a2);
    let d_b1 = un_center(d_b2);

    // Through row normalization: y = x / |x|.
    let un_row_normalize = |d1: Array2<f64>, normalized: &Array2<f64>, norms: &Array1<f64>| {
        if !row_normalize {
            return d1;
        }
        let mut d0 = Array2::zeros((batch, dim));
        for b in 0..batch {
            let n = norms[b];
            if n == 0.0 {
                continue;
            }
            let y = normalized.row(b);
            let dy = d1.row(b);
            let proj = y.dot(&dy);
            for j in 0..dim {
                d0[[b, j]] = (dy[j] - y[j] * proj) / n;
            }
        }
        d0
    };
    let d_a = un_row_normalize(d_a1, &a1, &a_row_norms);
    let d_b = un_row_normalize(d_b1, &b1, &b_row_norms);

    (loss, d_a, d_b)
}

/// The combined multi-task objective for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub pred: f64,
    pub bt: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda: f64,
}

/// total = pred + alpha * bt; alpha = 0 recovers the pure prediction loss.
pub fn total_loss(pred: f64, bt: f64, alpha: f64, lambda: f64) -> LossBundle {
    assert!(alpha >= 0.0, "alpha must be non-negative");
    LossBundle {
        pred,
        bt,
        total: pred + alpha * bt,
        alpha,
        lambda,
    }
}

/// Negative items for one BCE step: never the target, never in the prefix.
#[derive(Debug, Clone)]
pub struct NegativeSet {
    pub items: Vec<ItemId>,
}

/// Candidate set for one SCE step: the target plus distinct non-target items.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub items: Vec<ItemId>,
    pub target_position: usize,
}

/// Uniform negatives without replacement, rejecting the target and every
/// prefix item.
pub fn sample_negatives(
    prefix: &[ItemId],
    target: ItemId,
    catalog_size: u32,
    m: usize,
    rng: &mut impl Rng,
) -> Result<NegativeSet> {
    assert!(m >= 1, "m must be >= 1");
    let mut excluded: std::collections::BTreeSet<ItemId> = prefix
        .iter()
        .copied()
        .filter(|&i| i != crate::PADDING_ID)
        .collect();
    excluded.insert(target);
    let available = catalog_size as usize - excluded.len().min(catalog_size as usize);
    if available < m {
        return Err(Error::Sampling(format!(
            "cannot draw {m} negatives from catalog of {catalog_size} with {} exclusions",
            excluded.len()
        )));
    }
    let mut items = Vec::with_capacity(m);
    let mut taken: std::collections::BTreeSet<ItemId> = std::collections::BTreeSet::new();
    while items.len() < m {
        let candidate = rng.gen_range(1..=catalog_size);
        if excluded.contains(&candidate) || taken.contains(&candidate) {
            continue;
        }
        taken.insert(candidate);
        items.push(candidate);
    }
    Ok(NegativeSet { items })
}

/// The target plus K distinct uniform non-target items, target first.
pub fn sample_candidates(
    target: ItemId,
    catalog_size: u32,
    k: usize,
    rng: &mut impl Rng,
) -> Result<CandidateSet> {
    assert!(k >= 1, "K must be >= 1");
    if (k as u64) + 1 > catalog_size as u64 {
        return Err(Error::Sampling(format!(
            "cannot draw {k} distinct non-target candidates from catalog of {catalog_size}"
        )));
    }
    let mut items = Vec::with_capacity(k + 1);
    items.push(target);
    let mut taken: std::collections::BTreeSet<ItemId> = std::collections::BTreeSet::new();
    taken.insert(target);
    while items.len() < k + 1 {
        let candidate = rng.gen_range(1..=catalog_size);
        if taken.contains(&candidate) {
            continue;
        }
        taken.insert(candidate);
        items.push(candidate);
    }
    Ok(CandidateSet {
        items,
        target_position: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use ndarray::array;

    const LN2: f64 = std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn bce_symmetric_zero_scores() {
        close(bce_loss(0.0, &[0.0]), 2.0 * LN2, 1e-15);
    }

    #[test]
    fn bce_saturates_to_zero() {
        assert!(bce_loss(50.0, &[-50.0]) <= 1e-20);
    }

    #[test]
    fn bce_matches_naive_formula_at_moderate_scores() {
        // Oracle: the direct, unstable formula is fine at these magnitudes.
        let naive = |pos: f64, negs: &[f64]| -> f64 {
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            -(sig(pos).ln() + negs.iter().map(|&s| (1.0 - sig(s)).ln()).sum::<f64>())
        };
        let (pos, negs) = (1.0, vec![0.0, -1.0]);
        close(bce_loss(pos, &negs), naive(pos, &negs), 1e-12);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let negs = vec![0.3, -0.7, 2.0];
        let (_, d_pos, d_negs) = bce_loss_grad(0.5, &negs);
        let h = 1e-6;
        let fd_pos = (bce_loss(0.5 + h, &negs) - bce_loss(0.5 - h, &negs)) / (2.0 * h);
        close(d_pos, fd_pos, 1e-8);
        for j in 0..negs.len() {
            let mut hi = negs.clone();
            let mut lo = negs.clone();
            hi[j] += h;
            lo[j] -= h;
            let fd = (bce_loss(0.5, &hi) - bce_loss(0.5, &lo)) / (2.0 * h);
            close(d_negs[j], fd, 1e-8);
        }
    }

    #[test]
    fn ce_uniform_two_way() {
        close(ce_from_logits(&[0.0, 0.0], 0), LN2, 1e-15);
    }

    #[test]
    fn ce_matches_direct_softmax() {
        // Oracle: direct evaluation of -ln(e^1 / (e^1 + 2)).
        let direct = -( (1.0_f64).exp() / ((1.0_f64).exp() + 2.0) ).ln();
        close(ce_from_logits(&[1.0, 0.0, 0.0], 0), direct, 1e-12);
        close(direct, (1.0 + 2.0 * (-1.0_f64).exp()).ln(), 1e-12);
    }

    #[test]
    fn ce_shift_invariant() {
        let logits = [0.4, -2.0, 1.7, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|&s| s + 123.456).collect();
        close(
            ce_from_logits(&logits, 2),
            ce_from_logits(&shifted, 2),
            1e-12,
        );
    }

    #[test]
    fn ce_gradient_sums_to_zero_and_matches_fd() {
        let logits = [0.4, -2.0, 1.7];
        let (_, grad) = ce_from_logits_grad(&logits, 1);
        close(grad.iter().sum::<f64>(), 0.0, 1e-14);
        let h = 1e-6;
        for j in 0..logits.len() {
            let mut hi = logits.to_vec();
            let mut lo = logits.to_vec();
            hi[j] += h;
            lo[j] -= h;
            let fd = (ce_from_logits(&hi, 1) - ce_from_logits(&lo, 1)) / (2.0 * h);
            close(grad[j], fd, 1e-8);
        }
    }

    #[test]
    fn sce_equals_ce_on_full_catalog() {
        let mut rng = stream(11, Purpose::Eval, &[]);
        for trial in 0..100 {
            let n = 2 + (trial % 37);
            let logits: Vec<f64> = (0..n).map(|_| crate::rng::next_gaussian(&mut rng) * 3.0).collect();
            let target = trial % n;
            let ce = ce_from_logits(&logits, target);
            let sce = sce_loss(&logits, target).unwrap();
            close(ce, sce, 1e-10);
        }
    }

    #[test]
    fn sce_uniform_pair() {
        close(sce_loss(&[0.0, 0.0], 0).unwrap(), LN2, 1e-15);
    }

    #[test]
    fn sce_target_position_out_of_range() {
        assert!(matches!(
            sce_loss(&[0.0, 1.0], 2),
            Err(Error::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn sce_matches_enumerated_softmax() {
        // Oracle: enumerate the 5-candidate softmax directly.
        let scores: [f64; 5] = [0.2, -1.0, 0.7, 0.0, 3.0];
        let target = 2;
        let z: f64 = scores.iter().map(|&s| s.exp()).sum();
        let direct = -(scores[target].exp() / z).ln();
        close(sce_loss(&scores, target).unwrap(), direct, 1e-12);
    }

    #[test]
    fn cross_correlation_orthonormal_self_view_is_identity() {
        let z = array![[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
        let views = ViewBatch::new(z.clone(), z).unwrap();
        let c = cross_correlation(&views, true);
        for ((i, j), &v) in c.matrix.indexed_iter() {
            let expected = if i == j { 1.0 } else { 0.0 };
            close(v, expected, 1e-12);
        }
        assert!(c.degenerate_a.is_empty() && c.degenerate_b.is_empty());
    }

    #[test]
    fn cross_correlation_sign_flip_negates_diagonal() {
        let z = array![[1.0, 2.0], [-1.0, 1.0], [0.5, -1.0], [-2.0, -1.5]];
        let views = ViewBatch::new(z.clone(), -z).unwrap();
        let c = cross_correlation(&views, true);
        for i in 0..2 {
            close(c.matrix[[i, i]], -1.0, 1e-12);
        }
    }

    #[test]
    fn cross_correlation_matches_pearson_oracle() {
        // Oracle: elementwise Pearson correlation of the row-normalized
        // columns via a naive double loop.
        let mut rng = stream(5, Purpose::Eval, &[]);
        let (b, d) = (8, 4);
        let a = Array2::from_shape_fn((b, d), |_| crate::rng::next_gaussian(&mut rng));
        let bm = Array2::from_shape_fn((b, d), |_| crate::rng::next_gaussian(&mut rng));
        let views = ViewBatch::new(a.clone(), bm.clone()).unwrap();
        let c = cross_correlation(&views, true);

        let norm_rows = |m: &Array2<f64>| {
            let mut out = m.clone();
            for mut row in out.rows_mut() {
                let n = row.dot(&row).sqrt();
                row.mapv_inplace(|v| v / n);
            }
            out
        };
        let (an, bn) = (norm_rows(&a), norm_rows(&bm));
        for i in 0..d {
            for j in 0..d {
                let x: Vec<f64> = an.column(i).to_vec();
                let y: Vec<f64> = bn.column(j).to_vec();
                let mx = x.iter().sum::<f64>() / b as f64;
                let my = y.iter().sum::<f64>() / b as f64;
                let num: f64 = (0..b).map(|t| (x[t] - mx) * (y[t] - my)).sum();
                let dx: f64 = (0..b).map(|t| (x[t] - mx).powi(2)).sum::<f64>().sqrt();
                let dy: f64 = (0..b).map(|t| (y[t] - my).powi(2)).sum::<f64>().sqrt();
                close(c.matrix[[i, j]], num / (dx * dy), 1e-12);
            }
        }
    }

    #[test]
    fn cross_correlation_flags_constant_column() {
        let a = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let views = ViewBatch::new(a.clone(), a).unwrap();
        let c = cross_correlation(&views, false);
        assert_eq!(c.degenerate_a, vec![1]);
        for j in 0..2 {
            close(c.matrix[[1, j]], 0.0, 0.0);
            close(c.matrix[[j, 1]], 0.0, 0.0);
        }
        close(c.matrix[[0, 0]], 1.0, 1e-12);
    }

    #[test]
    fn bt_loss_identity_is_zero() {
        let c = CorrelationMatrix {
            matrix: Array2::eye(4),
            degenerate_a: vec![],
            degenerate_b: vec![],
        };
        assert_eq!(bt_loss(&c, 0.5), 0.0);
    }

    #[test]
    fn bt_loss_hand_evaluated_example() {
        let c = CorrelationMatrix {
            matrix: array![[1.0, 0.5], [0.5, 1.0]],
            degenerate_a: vec![],
            degenerate_b: vec![],
        };
        close(bt_loss(&c, 0.2), 0.1, 1e-12);
    }

    #[test]
    fn bt_loss_collapsed_matrix_costs_dimension() {
        let d = 6;
        let c = CorrelationMatrix {
            matrix: Array2::zeros((d, d)),
            degenerate_a: vec![],
            degenerate_b: vec![],
        };
        close(bt_loss(&c, 0.7), d as f64, 1e-12);
    }

    #[test]
    fn bt_grad_matches_finite_differences() {
        for &row_normalize in &[true, false] {
            let mut rng = stream(17, Purpose::Eval, &[row_normalize as u64]);
            let (b, d) = (6, 4);
            let a = Array2::from_shape_fn((b, d), |_| crate::rng::next_gaussian(&mut rng));
            let bm = Array2::from_shape_fn((b, d), |_| crate::rng::next_gaussian(&mut rng));
            let lambda = 0.3;
            let loss_of = |a: &Array2<f64>, bm: &Array2<f64>| {
                let v = ViewBatch::new(a.clone(), bm.clone()).unwrap();
                bt_loss(&cross_correlation(&v, row_normalize), lambda)
            };
            let views = ViewBatch::new(a.clone(), bm.clone()).unwrap();
            let (loss, da, db) = bt_loss_grad(&views, lambda, row_normalize);
            close(loss, loss_of(&a, &bm), 1e-12);

            let h = 1e-6;
            for r in 0..b {
                for c in 0..d {
                    let mut hi = a.clone();
                    let mut lo = a.clone();
                    hi[[r, c]] += h;
                    lo[[r, c]] -= h;
                    let fd = (loss_of(&hi, &bm) - loss_of(&lo, &bm)) / (2.0 * h);
                    close(da[[r, c]], fd, 1e-6);

                    let mut hi = bm.clone();
                    let mut lo = bm.clone();
                    hi[[r, c]] += h;
                    lo[[r, c]] -= h;
                    let fd = (loss_of(&a, &hi) - loss_of(&a, &lo)) / (2.0 * h);
                    close(db[[r, c]], fd, 1e-6);
                }
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(1.0, 0.5, 0.3, 0.2);
        close(b.total, 1.15, 1e-15);
        let off = total_loss(0.77, 123.0, 0.0, 0.2);
        assert_eq!(off.total, off.pred);
    }

    #[test]
    fn negatives_respect_support() {
        let mut rng = stream(1, Purpose::Negatives, &[]);
        for _ in 0..200 {
            let set = sample_negatives(&[1, 2], 3, 10, 1, &mut rng).unwrap();
            assert_eq!(set.items.len(), 1);
            assert!((4..=10).contains(&set.items[0]));
        }
    }

    #[test]
    fn negatives_exhausted_catalog_errors() {
        let mut rng = stream(1, Purpose::Negatives, &[]);
        assert!(matches!(
            sample_negatives(&[1, 2, 3], 4, 4, 1, &mut rng),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn candidates_cover_catalog_when_k_is_max() {
        let mut rng = stream(2, Purpose::Candidates, &[]);
        let set = sample_candidates(5, 8, 7, &mut rng).unwrap();
        let mut items = set.items.clone();
        items.sort_unstable();
        assert_eq!(items, (1..=8).collect::<Vec<_>>());
        assert_eq!(set.items[set.target_position], 5);
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let draw = || {
            let mut rng = stream(9, Purpose::Candidates, &[3]);
            sample_candidates(2, 100, 10, &mut rng).unwrap().items
        };
        assert_eq!(draw(), draw());
    }
}
