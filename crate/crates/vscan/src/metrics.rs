//! Evaluation metrics: voxelwise image quality (MAE, PSNR, SSIM),
//! classification scores (balanced accuracy, GMean, per-class TPR, AUC),
//! and the exact Wilcoxon signed-rank test used for paired fold
//! comparisons.
//!
//! Scores that are undefined for a given input (a class absent from the
//! test set, all paired differences zero) are reported as `None` rather
//! than silently propagating NaN. All accumulation is done in `f64`.

use thiserror::Error;

use crate::volume::Volume;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dims mismatch: {a:?} vs {b:?}")]
    DimsMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("{0}")]
    BadParam(String),
    #[error("exact Wilcoxon limited to n <= 20 non-zero differences, got {n}")]
    TooManySamples { n: usize },
}

// ─── Image quality ──────────────────────────────────────────────────────

/// Mean absolute voxel difference.
pub fn mae_slices(y: &[f32], yhat: &[f32]) -> Result<f64, MetricError> {
    if y.len() != yhat.len() {
        return Err(MetricError::LengthMismatch {
            a: y.len(),
            b: yhat.len(),
        });
    }
    let mut acc = 0.0f64;
    for (&a, &b) in y.iter().zip(yhat) {
        acc += (a as f64 - b as f64).abs();
    }
    Ok(acc / y.len() as f64)
}

pub fn mae(y: &Volume, yhat: &Volume) -> Result<f64, MetricError> {
    check_dims(y, yhat)?;
    mae_slices(y.voxels(), yhat.voxels())
}

/// Peak signal-to-noise ratio, `10*log10(max_i^2 / MSE)`. A perfect match
/// (zero MSE) reports `f64::INFINITY` rather than failing.
pub fn psnr_slices(y: &[f32], yhat: &[f32], max_i: f64) -> Result<f64, MetricError> {
    if y.len() != yhat.len() {
        return Err(MetricError::LengthMismatch {
            a: y.len(),
            b: yhat.len(),
        });
    }
    if max_i <= 0.0 {
        return Err(MetricError::BadParam(format!(
            "psnr max_i must be positive, got {max_i}"
        )));
    }
    let mut mse = 0.0f64;
    for (&a, &b) in y.iter().zip(yhat) {
        let d = a as f64 - b as f64;
        mse += d * d;
    }
    mse /= y.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_i * max_i / mse).log10())
}

pub fn psnr(y: &Volume, yhat: &Volume, max_i: f64) -> Result<f64, MetricError> {
    check_dims(y, yhat)?;
    psnr_slices(y.voxels(), yhat.voxels(), max_i)
}

/// Mean local SSIM over a sliding cubic window with uniform weights.
///
/// Local statistics are biased (divide by n) moments. Windows are "valid"
/// positions only; if any dim is smaller than the window the whole volume
/// is treated as a single window. `c1`/`c2` are the usual stabilizers,
/// conventionally `(0.01 L)^2` and `(0.03 L)^2` — see [`ssim`].
pub fn ssim_with_consts(
    y: &Volume,
    yhat: &Volume,
    window: usize,
    c1: f64,
    c2: f64,
) -> Result<f64, MetricError> {
    check_dims(y, yhat)?;
    if window == 0 {
        return Err(MetricError::BadParam("ssim window must be >= 1".into()));
    }
    let (d, h, w) = y.dims();
    let a = y.voxels();
    let b = yhat.voxels();
    if window > d || window > h || window > w {
        // whole-volume fallback
        let stats = region_stats(a, b, &mut (0..a.len()));
        return Ok(ssim_formula(stats, c1, c2));
    }
    // Sliding sums: for each (z,y) anchor, walk the window along x adding
    // the new yz-column and dropping the old one. Window sums stay small,
    // so f64 keeps them effectively exact for unit-range voxels.
    let mut total = 0.0f64;
    let mut count = 0usize;
    let col_idx = |z0: usize, y0: usize, x: usize| -> ColIter {
        ColIter {
            z0,
            y0,
            x,
            h,
            w,
            dz: 0,
            dy: 0,
            window,
        }
    };
    for z0 in 0..=(d - window) {
        for y0 in 0..=(h - window) {
            let mut s = WinStats::default();
            for x in 0..window {
                for i in col_idx(z0, y0, x) {
                    s.add(a[i] as f64, b[i] as f64);
                }
            }
            total += ssim_formula(s, c1, c2);
            count += 1;
            for x1 in window..w {
                for i in col_idx(z0, y0, x1 - window) {
                    s.sub(a[i] as f64, b[i] as f64);
                }
                for i in col_idx(z0, y0, x1) {
                    s.add(a[i] as f64, b[i] as f64);
                }
                total += ssim_formula(s, c1, c2);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// SSIM with the conventional stabilizers `c1 = (0.01 max_i)^2`,
/// `c2 = (0.03 max_i)^2`.
pub fn ssim(y: &Volume, yhat: &Volume, window: usize, max_i: f64) -> Result<f64, MetricError> {
    let c1 = (0.01 * max_i).powi(2);
    let c2 = (0.03 * max_i).powi(2);
    ssim_with_consts(y, yhat, window, c1, c2)
}

struct ColIter {
    z0: usize,
    y0: usize,
    x: usize,
    h: usize,
    w: usize,
    dz: usize,
    dy: usize,
    window: usize,
}

impl Iterator for ColIter {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        if self.dz == self.window {
            return None;
        }
        let i = ((self.z0 + self.dz) * self.h + self.y0 + self.dy) * self.w + self.x;
        self.dy += 1;
        if self.dy == self.window {
            self.dy = 0;
            self.dz += 1;
        }
        Some(i)
    }
}

#[derive(Default, Clone, Copy)]
struct WinStats {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl WinStats {
    fn add(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }
    fn sub(&mut self, x: f64, y: f64) {
        self.n -= 1.0;
        self.sx -= x;
        self.sy -= y;
        self.sxx -= x * x;
        self.syy -= y * y;
        self.sxy -= x * y;
    }
}

fn region_stats(a: &[f32], b: &[f32], idx: &mut dyn Iterator<Item = usize>) -> WinStats {
    let mut s = WinStats::default();
    for i in idx {
        s.add(a[i] as f64, b[i] as f64);
    }
    s
}

fn ssim_formula(s: WinStats, c1: f64, c2: f64) -> f64 {
    let mx = s.sx / s.n;
    let my = s.sy / s.n;
    let vx = s.sxx / s.n - mx * mx;
    let vy = s.syy / s.n - my * my;
    let cxy = s.sxy / s.n - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

// ─── Classification metrics ─────────────────────────────────────────────

/// Binary confusion counts with SCC as the positive class by convention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
    pub false_pos: usize,
}

impl ConfusionCounts {
    /// Tally predictions: `1` is the positive class index.
    pub fn from_predictions(truth: &[usize], pred: &[usize]) -> Result<Self, MetricError> {
        if truth.len() != pred.len() {
            return Err(MetricError::LengthMismatch {
                a: truth.len(),
                b: pred.len(),
            });
        }
        let mut c = ConfusionCounts::default();
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (1, 1) => c.true_pos += 1,
                (1, _) => c.false_neg += 1,
                (0, 0) => c.true_neg += 1,
                (0, _) => c.false_pos += 1,
                _ => {
                    return Err(MetricError::BadParam(format!(
                        "labels must be 0/1, got {t}"
                    )))
                }
            }
        }
        Ok(c)
    }

    /// Positive-class recall `TP/(TP+FN)`; `None` when no positives exist.
    pub fn tpr_positive(&self) -> Option<f64> {
        let n = self.true_pos + self.false_neg;
        (n > 0).then(|| self.true_pos as f64 / n as f64)
    }

    /// Negative-class recall `TN/(TN+FP)`; `None` when no negatives exist.
    pub fn tpr_negative(&self) -> Option<f64> {
        let n = self.true_neg + self.false_pos;
        (n > 0).then(|| self.true_neg as f64 / n as f64)
    }
}

/// `(TPR_pos + TPR_neg) / 2`; undefined when either class is absent.
pub fn balanced_accuracy(c: &ConfusionCounts) -> Option<f64> {
    Some(0.5 * (c.tpr_positive()? + c.tpr_negative()?))
}

/// `sqrt(TPR_pos * TPR_neg)`; undefined when either class is absent.
pub fn gmean(c: &ConfusionCounts) -> Option<f64> {
    Some((c.tpr_positive()? * c.tpr_negative()?).sqrt())
}

/// Per-class true positive rate. `positive_class = true` selects the
/// positive (SCC) recall, `false` the negative (ADC) recall.
pub fn tpr(c: &ConfusionCounts, positive_class: bool) -> Option<f64> {
    if positive_class {
        c.tpr_positive()
    } else {
        c.tpr_negative()
    }
}

/// Area under the ROC curve via the rank-sum (Mann-Whitney) statistic:
/// the probability that a random positive outscores a random negative,
/// with ties counted half. Undefined when a class is missing.
pub fn auc(scores: &[(f64, bool)]) -> Option<f64> {
    let pos = scores.iter().filter(|(_, l)| *l).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].0.partial_cmp(&scores[j].0).expect("finite scores"));
    // midranks over tied groups
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if scores[k].1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

// ─── Exact Wilcoxon signed-rank test ────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sided {
    /// Alternative: `a` tends to exceed `b`.
    OneGreater,
    Two,
}

/// Exact Wilcoxon signed-rank test for paired samples.
///
/// Zero differences are dropped; ties in `|d|` get midranks. The p-value
/// is exact over all `2^n` sign assignments of the rank sum (computed by
/// dynamic programming over doubled ranks, so midranks stay integral).
/// Returns `Ok(None)` when every difference is zero. The two-sided value
/// is `min(1, 2*min(P(W >= w), P(W <= w)))`.
pub fn wilcoxon_signed_rank_exact(
    a: &[f64],
    b: &[f64],
    sided: Sided,
) -> Result<Option<f64>, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(None);
    }
    if n > 20 {
        return Err(MetricError::TooManySamples { n });
    }
    // midranks of |d|, doubled to keep them integral
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        diffs[i]
            .abs()
            .partial_cmp(&diffs[j].abs())
            .expect("finite fold scores")
    });
    let mut ranks2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let rank2 = (i + j) as u64 + 2; // 2 * midrank = 2*((i+j)/2 + 1)
        for &k in &order[i..=j] {
            ranks2[k] = rank2;
        }
        i = j + 1;
    }
    let w_obs: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let total: u64 = ranks2.iter().sum();

    // counts[s] = number of sign assignments with doubled rank sum s
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in &ranks2 {
        for s in (r as usize..counts.len()).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    let denom = (1u64 << n) as f64;
    let p_ge: f64 = counts[w_obs as usize..].iter().sum::<u64>() as f64 / denom;
    let p_le: f64 = counts[..=w_obs as usize].iter().sum::<u64>() as f64 / denom;
    let p = match sided {
        Sided::OneGreater => p_ge,
        Sided::Two => (2.0 * p_ge.min(p_le)).min(1.0),
    };
    Ok(Some(p))
}

fn check_dims(a: &Volume, b: &Volume) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimsMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    Ok(())
}
