//! Evaluation metrics: confusion matrix, precision/recall/F1 with
//! macro averaging, rank-based ROC-AUC, and a small Jacobi PCA for the
//! 3-D latent projection.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    /// Row major, rows = true class, columns = predicted class.
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn at(&self, true_class: usize, pred_class: usize) -> usize {
        self.counts[true_class * self.k + pred_class]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.k).map(|i| self.at(i, i)).sum()
    }

    pub fn row_sum(&self, true_class: usize) -> usize {
        (0..self.k).map(|p| self.at(true_class, p)).sum()
    }

    pub fn col_sum(&self, pred_class: usize) -> usize {
        (0..self.k).map(|t| self.at(t, pred_class)).sum()
    }

    pub fn from_counts(k: usize, counts: Vec<usize>) -> Result<ConfusionMatrix> {
        if counts.len() != k * k {
            return Err(Error::Invalid(format!(
                "{} counts for a {k}x{k} confusion matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { k, counts })
    }
}

pub fn confusion_matrix(
    true_labels: &[usize],
    pred_labels: &[usize],
    k: usize,
) -> Result<ConfusionMatrix> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::Invalid(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            pred_labels.len()
        )));
    }
    let mut counts = vec![0usize; k * k];
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        if t >= k || p >= k {
            return Err(Error::Invalid(format!(
                "label pair ({t}, {p}) out of range for {k} classes"
            )));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// True when a zero denominator forced any of the three to 0.
    pub zero_division: bool,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub auc: Option<f64>,
    /// Why AUC is absent, when it is.
    pub auc_note: Option<String>,
}

/// Per-class precision/recall/F1 plus macro averages and accuracy.
/// Zero denominators yield 0 with the flag set instead of NaN.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Invalid(
            "confusion matrix is empty; nothing was evaluated".into(),
        ));
    }
    let mut per_class = Vec::with_capacity(cm.k);
    for c in 0..cm.k {
        let tp = cm.at(c, c) as f64;
        let fp = (cm.col_sum(c) - cm.at(c, c)) as f64;
        let fn_ = (cm.row_sum(c) - cm.at(c, c)) as f64;
        let mut zero_division = false;
        let mut ratio = |num: f64, den: f64| {
            if den == 0.0 {
                zero_division = true;
                0.0
            } else {
                num / den
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: cm.row_sum(c),
            zero_division,
        });
    }
    let kf = cm.k as f64;
    let macro_of = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / kf;
    Ok(EvalReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: macro_of(|c| c.precision),
        macro_recall: macro_of(|c| c.recall),
        macro_f1: macro_of(|c| c.f1),
        per_class,
        confusion: cm.clone(),
        auc: None,
        auc_note: None,
    })
}

/// Micro-averaged metrics. For single-label classification the summed
/// TP/FP/FN collapse so that precision = recall = F1 = accuracy.
pub fn micro_average(cm: &ConfusionMatrix) -> Result<ClassMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Invalid("confusion matrix is empty".into()));
    }
    let acc = cm.trace() as f64 / total as f64;
    Ok(ClassMetrics {
        precision: acc,
        recall: acc,
        f1: acc,
        support: total,
        zero_division: false,
    })
}

/// Binary ROC-AUC as the Mann-Whitney statistic, computed from average
/// ranks so ties count one half exactly.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("AUC scores must be finite".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Invalid(format!(
            "binary AUC labels must be 0 or 1, got {bad}"
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative samples"
        )));
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end shared equally within the tie group
        let avg = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Macro one-vs-rest AUC over `probs` (N x K row major). Classes
/// missing from the labels cannot be scored and are skipped.
pub fn one_vs_rest_auc(probs: &[f64], k: usize, labels: &[usize]) -> Result<f64> {
    if k < 2 {
        return Err(Error::Invalid("need at least 2 classes for AUC".into()));
    }
    let n = labels.len();
    if probs.len() != n * k {
        return Err(Error::Invalid(format!(
            "{} probabilities for {n} samples x {k} classes",
            probs.len()
        )));
    }
    let mut aucs = Vec::new();
    for c in 0..k {
        let binary: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
        let scores: Vec<f64> = (0..n).map(|i| probs[i * k + c]).collect();
        match roc_auc(&scores, &binary) {
            Ok(a) => aucs.push(a),
            Err(Error::UndefinedAuc(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(Error::UndefinedAuc(
            "no class has both positive and negative samples".into(),
        ));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Full report. `probs` (N x K) enables AUC: the positive-class column
/// for binary problems, macro one-vs-rest otherwise. An undefined AUC
/// becomes a note instead of an error so single-class evaluation still
/// reports the other metrics.
pub fn evaluate(
    true_labels: &[usize],
    pred_labels: &[usize],
    k: usize,
    probs: Option<&[f64]>,
) -> Result<EvalReport> {
    let cm = confusion_matrix(true_labels, pred_labels, k)?;
    let mut report = classification_metrics(&cm)?;
    if let Some(p) = probs {
        let auc = if k == 2 {
            let scores: Vec<f64> = (0..true_labels.len()).map(|i| p[i * 2 + 1]).collect();
            roc_auc(&scores, true_labels)
        } else {
            one_vs_rest_auc(p, k, true_labels)
        };
        match auc {
            Ok(a) => report.auc = Some(a),
            Err(Error::UndefinedAuc(why)) => report.auc_note = Some(why),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

// ── PCA ──

#[derive(Clone, Debug)]
pub struct PcaResult {
    /// N x dims row major.
    pub projection: Vec<f64>,
    /// m x dims row major; column j is the j-th component.
    pub components: Vec<f64>,
    /// All m eigenvalues of the covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Fraction of total variance per retained component.
    pub explained_variance: Vec<f64>,
    /// Eigenvalues carrying variance above rounding noise.
    pub informative_components: usize,
    /// Set when fewer than `dims` informative components exist.
    pub degenerate: bool,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// (eigenvalues, eigenvectors) unsorted; column j of the returned
/// matrix (row major m x m) is the eigenvector for eigenvalue j.
fn jacobi_eigen(mut a: Vec<f64>, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; m * m];
    for i in 0..m {
        v[i * m + i] = 1.0;
    }
    let scale: f64 = (0..m).map(|i| a[i * m + i].abs()).fold(1e-300, f64::max);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..m {
            for q in (p + 1)..m {
                off += a[p * m + q] * a[p * m + q];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..m - 1 {
            for q in (p + 1)..m {
                let apq = a[p * m + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                let sign = if theta < 0.0 { -1.0 } else { 1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..m {
                    if r != p && r != q {
                        let arp = a[r * m + p];
                        let arq = a[r * m + q];
                        a[r * m + p] = c * arp - s * arq;
                        a[p * m + r] = a[r * m + p];
                        a[r * m + q] = s * arp + c * arq;
                        a[q * m + r] = a[r * m + q];
                    }
                }
                let app = a[p * m + p];
                let aqq = a[q * m + q];
                a[p * m + p] = app - t * apq;
                a[q * m + q] = aqq + t * apq;
                a[p * m + q] = 0.0;
                a[q * m + p] = 0.0;
                for r in 0..m {
                    let vrp = v[r * m + p];
                    let vrq = v[r * m + q];
                    v[r * m + p] = c * vrp - s * vrq;
                    v[r * m + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    let vals = (0..m).map(|i| a[i * m + i]).collect();
    (vals, v)
}

/// Center, eigendecompose the covariance, and project onto the top
/// `dims` components. Components are orthonormal with the largest
/// magnitude entry of each made positive.
pub fn pca_project(features: &[f64], n: usize, m: usize, dims: usize) -> Result<PcaResult> {
    if features.len() != n * m {
        return Err(Error::Invalid(format!(
            "{} values for {n} samples x {m} features",
            features.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("PCA features must be finite".into()));
    }
    if dims == 0 || dims > m {
        return Err(Error::Invalid(format!(
            "cannot project {m}-dimensional features to {dims} dimensions"
        )));
    }
    if n <= dims {
        return Err(Error::Invalid(format!(
            "need more than {dims} samples for a {dims}-D projection, got {n}"
        )));
    }

    let mut centered = features.to_vec();
    for col in 0..m {
        let mean: f64 = (0..n).map(|i| features[i * m + col]).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * m + col] -= mean;
        }
    }
    let mut cov = vec![0.0; m * m];
    for a in 0..m {
        for b in a..m {
            let s: f64 = (0..n).map(|i| centered[i * m + a] * centered[i * m + b]).sum();
            cov[a * m + b] = s / (n - 1) as f64;
            cov[b * m + a] = cov[a * m + b];
        }
    }

    let (vals, vecs) = jacobi_eigen(cov, m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).expect("finite eigenvalues"));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| vals[i].max(0.0)).collect();

    let mut components = vec![0.0; m * dims];
    for (j, &src) in order.iter().take(dims).enumerate() {
        let mut best = 0;
        for r in 1..m {
            if vecs[r * m + src].abs() > vecs[best * m + src].abs() {
                best = r;
            }
        }
        let flip = if vecs[best * m + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..m {
            components[r * dims + j] = flip * vecs[r * m + src];
        }
    }

    let mut projection = vec![0.0; n * dims];
    for i in 0..n {
        for j in 0..dims {
            let mut s = 0.0;
            for a in 0..m {
                s += centered[i * m + a] * components[a * dims + j];
            }
            projection[i * dims + j] = s;
        }
    }

    let total: f64 = eigenvalues.iter().sum();
    let informative = eigenvalues.iter().filter(|&&l| l > 1e-12 * total.max(1e-300)).count();
    let explained_variance: Vec<f64> = eigenvalues
        .iter()
        .take(dims)
        .map(|&l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    Ok(PcaResult {
        projection,
        components,
        eigenvalues,
        explained_variance,
        informative_components: informative,
        degenerate: informative < dims,
    })
}

// ── CSV exports ──

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// `metric,value` rows: accuracy, macro averages, AUC when defined,
/// then per-class precision/recall/F1 keyed by class name.
pub fn write_metrics_csv(path: &Path, report: &EvalReport, class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["metric", "value"]).map_err(csv_err)?;
    let mut row = |name: String, value: f64| -> Result<()> {
        w.write_record([name, value.to_string()]).map_err(csv_err)
    };
    row("accuracy".into(), report.accuracy)?;
    row("macro_precision".into(), report.macro_precision)?;
    row("macro_recall".into(), report.macro_recall)?;
    row("macro_f1".into(), report.macro_f1)?;
    if let Some(auc) = report.auc {
        row("auc".into(), auc)?;
    }
    for (c, metrics) in report.per_class.iter().enumerate() {
        let name = class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| format!("class{c}"));
        row(format!("precision_{name}"), metrics.precision)?;
        row(format!("recall_{name}"), metrics.recall)?;
        row(format!("f1_{name}"), metrics.f1)?;
    }
    w.flush()?;
    Ok(())
}

/// Square table: `true_class` column then one count column per
/// predicted class name.
pub fn write_confusion_csv(
    path: &Path,
    cm: &ConfusionMatrix,
    class_names: &[String],
) -> Result<()> {
    let name = |c: usize| {
        class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| format!("class{c}"))
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["true_class".to_string()];
    header.extend((0..cm.k()).map(name));
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..cm.k() {
        let mut record = vec![name(t)];
        record.extend((0..cm.k()).map(|p| cm.at(t, p).to_string()));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `x,y,z,label` rows, one per sample, in sample order.
pub fn write_projection_csv(
    path: &Path,
    projection: &[f64],
    labels: &[usize],
    class_names: &[String],
) -> Result<()> {
    if projection.len() != labels.len() * 3 {
        return Err(Error::Invalid(format!(
            "{} projection values for {} labeled samples (need 3 per sample)",
            projection.len(),
            labels.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["x", "y", "z", "label"]).map_err(csv_err)?;
    for (i, &label) in labels.iter().enumerate() {
        let name = class_names
            .get(label)
            .cloned()
            .unwrap_or_else(|| format!("class{label}"));
        w.write_record([
            projection[i * 3].to_string(),
            projection[i * 3 + 1].to_string(),
            projection[i * 3 + 2].to_string(),
            name,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_hand_count() {
        let cm = confusion_matrix(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(cm.at(0, 0), 1);
        assert_eq!(cm.at(0, 1), 1);
        assert_eq!(cm.at(1, 0), 0);
        assert_eq!(cm.at(1, 1), 2);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn confusion_perfect_is_diagonal() {
        let labels = [0usize, 1, 2, 1, 0, 2, 2];
        let cm = confusion_matrix(&labels, &labels, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t == p {
                    assert_eq!(cm.at(t, p), labels.iter().filter(|&&l| l == t).count());
                } else {
                    assert_eq!(cm.at(t, p), 0);
                }
            }
        }
    }

    #[test]
    fn confusion_row_sums_are_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let cm = confusion_matrix(&t, &p, 4).unwrap();
            for c in 0..4 {
                assert_eq!(cm.row_sum(c), t.iter().filter(|&&l| l == c).count());
            }
            assert_eq!(cm.total(), n);
        }
    }

    #[test]
    fn confusion_rejects_bad_input() {
        assert!(confusion_matrix(&[0, 1], &[0], 2).is_err());
        assert!(confusion_matrix(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn metrics_hand_case() {
        let cm = ConfusionMatrix::from_counts(2, vec![50, 10, 5, 35]).unwrap();
        let r = classification_metrics(&cm).unwrap();
        assert_eq!(r.accuracy, 85.0 / 100.0);
        assert_eq!(r.per_class[1].precision, 35.0 / 45.0);
        assert_eq!(r.per_class[1].recall, 0.875);
        assert_eq!(r.per_class[0].precision, 50.0 / 55.0);
        assert_eq!(r.per_class[0].recall, 50.0 / 60.0);
        assert!(!r.per_class.iter().any(|c| c.zero_division));
    }

    #[test]
    fn metrics_diagonal_is_all_ones() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 7, 0, 0, 0, 2]).unwrap();
        let r = classification_metrics(&cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for c in &r.per_class {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn metrics_match_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..50 {
            let counts: Vec<usize> = (0..9).map(|_| rng.gen_range(0..20)).collect();
            if counts.iter().sum::<usize>() == 0 {
                continue;
            }
            let cm = ConfusionMatrix::from_counts(3, counts.clone()).unwrap();
            let r = classification_metrics(&cm).unwrap();
            // direct translation of the definitions, written separately
            let mut f1s = Vec::new();
            for c in 0..3 {
                let tp = counts[c * 3 + c] as f64;
                let col: f64 = (0..3).map(|t| counts[t * 3 + c] as f64).sum();
                let row: f64 = (0..3).map(|p| counts[c * 3 + p] as f64).sum();
                let prec = if col == 0.0 { 0.0 } else { tp / col };
                let rec = if row == 0.0 { 0.0 } else { tp / row };
                let f1 = if prec + rec == 0.0 {
                    0.0
                } else {
                    2.0 * prec * rec / (prec + rec)
                };
                assert!((r.per_class[c].precision - prec).abs() < 1e-15);
                assert!((r.per_class[c].recall - rec).abs() < 1e-15);
                assert!((r.per_class[c].f1 - f1).abs() < 1e-15);
                f1s.push(f1);
            }
            let lo = f1s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(r.macro_f1 >= lo - 1e-15 && r.macro_f1 <= hi + 1e-15);
            for c in &r.per_class {
                for v in [c.precision, c.recall, c.f1] {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn metrics_zero_denominator_flags() {
        // nothing ever predicted as class 1
        let cm = ConfusionMatrix::from_counts(2, vec![3, 0, 2, 0]).unwrap();
        let r = classification_metrics(&cm).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert!(r.per_class[1].zero_division);
        assert!(!r.per_class[0].zero_division);
        // empty matrix is an error
        let empty = ConfusionMatrix::from_counts(2, vec![0; 4]).unwrap();
        assert!(classification_metrics(&empty).is_err());
        assert!(micro_average(&cm).unwrap().f1 == r.accuracy);
    }

    #[test]
    fn auc_hand_case() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((auc - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5; 6], &[0, 1, 0, 1, 0, 1]).unwrap(), 0.5);
    }

    fn brute_force_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut pairs = 0.0;
        let mut wins = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_matches_brute_force_on_200_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for case in 0..200 {
            let n = rng.gen_range(2..=64);
            // coarse grid forces plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            if n > 1 {
                labels[1] = 1;
            }
            let got = roc_auc(&scores, &labels).unwrap();
            let want = brute_force_auc(&scores, &labels);
            assert!((got - want).abs() <= 1e-12, "case {case}: {got} vs {want}");
        }
    }

    #[test]
    fn auc_invariant_under_increasing_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for _ in 0..30 {
            let n = rng.gen_range(4..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=20) as f64 / 20.0).collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let base = roc_auc(&scores, &labels).unwrap();
            let cubed: Vec<f64> = scores.iter().map(|&s| s * s * s).collect();
            let exped: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
            assert!((roc_auc(&cubed, &labels).unwrap() - base).abs() < 1e-12);
            assert!((roc_auc(&exped, &labels).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_single_class_is_undefined() {
        let err = roc_auc(&[0.1, 0.2], &[1, 1]).unwrap_err();
        assert!(matches!(err, Error::UndefinedAuc(_)), "{err}");
    }

    #[test]
    fn ovr_auc_macro() {
        // three samples, perfectly confident and correct
        let probs = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let auc = one_vs_rest_auc(&probs, 3, &[0, 1, 2]).unwrap();
        assert_eq!(auc, 1.0);
        // class 2 absent: macro over the present classes only
        let probs = vec![0.9, 0.1, 0.0, 0.2, 0.8, 0.0, 0.7, 0.3, 0.0, 0.4, 0.6, 0.0];
        let auc = one_vs_rest_auc(&probs, 3, &[0, 1, 0, 1]).unwrap();
        assert_eq!(auc, 1.0);
        assert!(one_vs_rest_auc(&probs[..3], 3, &[0]).is_err());
    }

    #[test]
    fn evaluate_combines_report_and_auc() {
        let probs = vec![0.9, 0.1, 0.3, 0.7, 0.6, 0.4, 0.2, 0.8];
        let r = evaluate(&[0, 1, 1, 1], &[0, 1, 0, 1], 2, Some(&probs)).unwrap();
        assert_eq!(r.accuracy, 0.75);
        let want = roc_auc(&[0.1, 0.7, 0.4, 0.8], &[0, 1, 1, 1]).unwrap();
        assert_eq!(r.auc, Some(want));
        // single-class truth: metrics still come back, AUC becomes a note
        let r = evaluate(&[1, 1], &[1, 0], 2, Some(&probs[..4])).unwrap();
        assert!(r.auc.is_none());
        assert!(r.auc_note.is_some());
    }

    // ── PCA ──

    fn random_features(n: usize, m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * m).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn components_are_orthonormal() {
        for dims in [3, 6] {
            let x = random_features(30, 6, 80);
            let r = pca_project(&x, 30, 6, dims).unwrap();
            for a in 0..dims {
                for b in 0..dims {
                    let dot: f64 = (0..6)
                        .map(|i| r.components[i * dims + a] * r.components[i * dims + b])
                        .sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10, "C^T C [{a}][{b}] = {dot}");
                }
            }
        }
    }

    #[test]
    fn rank_one_data_explains_everything_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let dir: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..20)
            .flat_map(|_| {
                let t: f64 = rng.gen_range(-3.0..3.0);
                dir.iter().map(|d| d * t).collect::<Vec<_>>()
            })
            .collect();
        let r = pca_project(&x, 20, 5, 3).unwrap();
        assert!((r.explained_variance[0] - 1.0).abs() < 1e-12);
        assert_eq!(r.informative_components, 1);
        assert!(r.degenerate);
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let x = random_features(25, 7, 82);
        let r = pca_project(&x, 25, 7, 3).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..7).map(|i| r.components[i * 3 + j]).collect();
            let mut best = 0;
            for i in 1..7 {
                if col[i].abs() > col[best].abs() {
                    best = i;
                }
            }
            assert!(col[best] > 0.0);
        }
    }

    /// Power iteration with deflation, an independent route to the top
    /// eigenpairs of the covariance.
    fn power_iteration_top(cov: &[f64], m: usize, dims: usize) -> (Vec<f64>, Vec<f64>) {
        let mut s = cov.to_vec();
        let mut vals = Vec::new();
        let mut vecs = vec![0.0; m * dims];
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for j in 0..dims {
            let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            for _ in 0..200_000 {
                let mut next = vec![0.0; m];
                for a in 0..m {
                    for b in 0..m {
                        next[a] += s[a * m + b] * v[b];
                    }
                }
                let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
                next.iter_mut().for_each(|x| *x /= norm);
                let delta: f64 = next
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let flipped: f64 = next
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| (a + b).abs())
                    .fold(0.0, f64::max);
                v = next;
                if delta.min(flipped) < 1e-15 {
                    break;
                }
            }
            let mut sv = vec![0.0; m];
            for a in 0..m {
                for b in 0..m {
                    sv[a] += s[a * m + b] * v[b];
                }
            }
            let lambda: f64 = v.iter().zip(&sv).map(|(a, b)| a * b).sum();
            vals.push(lambda);
            for a in 0..m {
                vecs[a * dims + j] = v[a];
                for b in 0..m {
                    s[a * m + b] -= lambda * v[a] * v[b];
                }
            }
        }
        (vals, vecs)
    }

    #[test]
    fn projection_matches_power_iteration_oracle() {
        let n = 50;
        let m = 8;
        let x = random_features(n, m, 83);
        let r = pca_project(&x, n, m, 3).unwrap();

        // rebuild the centered data and covariance independently
        let mut centered = x.clone();
        for col in 0..m {
            let mean: f64 = (0..n).map(|i| x[i * m + col]).sum::<f64>() / n as f64;
            for i in 0..n {
                centered[i * m + col] -= mean;
            }
        }
        let mut cov = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                cov[a * m + b] = (0..n)
                    .map(|i| centered[i * m + a] * centered[i * m + b])
                    .sum::<f64>()
                    / (n - 1) as f64;
            }
        }
        let (vals, vecs) = power_iteration_top(&cov, m, 3);
        for j in 0..3 {
            assert!(
                (r.eigenvalues[j] - vals[j]).abs() <= 1e-8 * vals[j].max(1.0),
                "eigenvalue {j}: {} vs {}",
                r.eigenvalues[j],
                vals[j]
            );
            let dot: f64 = (0..m)
                .map(|i| r.components[i * 3 + j] * vecs[i * 3 + j])
                .sum();
            assert!(dot.abs() > 1.0 - 1e-8, "component {j} misaligned: {dot}");
            // projections agree up to the same sign
            for i in 0..n {
                let oracle: f64 = (0..m).map(|a| centered[i * m + a] * vecs[a * 3 + j]).sum();
                let got = r.projection[i * 3 + j];
                assert!(
                    (got - dot.signum() * oracle).abs() < 1e-8,
                    "row {i} comp {j}"
                );
            }
        }
    }

    #[test]
    fn full_projection_preserves_total_variance() {
        let n = 24;
        let m = 5;
        let x = random_features(n, m, 84);
        let r = pca_project(&x, n, m, m).unwrap();
        let total_in: f64 = {
            let mut t = 0.0;
            for col in 0..m {
                let mean: f64 = (0..n).map(|i| x[i * m + col]).sum::<f64>() / n as f64;
                t += (0..n).map(|i| (x[i * m + col] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            }
            t
        };
        let total_out: f64 = (0..m)
            .map(|j| {
                (0..n).map(|i| r.projection[i * m + j].powi(2)).sum::<f64>() / (n - 1) as f64
            })
            .sum();
        assert!((total_in - total_out).abs() < 1e-10 * total_in);
        let ev_sum: f64 = r.explained_variance.iter().sum();
        assert!((ev_sum - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pca_rejects_too_few_samples() {
        let x = random_features(3, 5, 85);
        assert!(pca_project(&x, 3, 5, 3).is_err());
        let x = random_features(10, 2, 86);
        assert!(pca_project(&x, 10, 2, 3).is_err());
    }

    #[test]
    fn csv_exports_roundtrip() {
        use tempfile::TempDir;
        let dir = TempDir::new().unwrap();
        let names = vec!["neg".to_string(), "pos".to_string()];
        let probs = vec![0.9, 0.1, 0.3, 0.7, 0.6, 0.4, 0.2, 0.8];
        let report = evaluate(&[0, 1, 1, 1], &[0, 1, 0, 1], 2, Some(&probs)).unwrap();

        let mpath = dir.path().join("metrics.csv");
        write_metrics_csv(&mpath, &report, &names).unwrap();
        let mut seen = std::collections::HashMap::new();
        let mut rdr = csv::Reader::from_path(&mpath).unwrap();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            seen.insert(rec[0].to_string(), rec[1].parse::<f64>().unwrap());
        }
        assert_eq!(seen["accuracy"], report.accuracy);
        assert_eq!(seen["auc"], report.auc.unwrap());
        assert_eq!(seen["precision_pos"], report.per_class[1].precision);

        let cpath = dir.path().join("confusion.csv");
        write_confusion_csv(&cpath, &report.confusion, &names).unwrap();
        let mut rdr = csv::Reader::from_path(&cpath).unwrap();
        let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][0], "neg");
        assert_eq!(rows[1][1].parse::<usize>().unwrap(), report.confusion.at(1, 0));

        let ppath = dir.path().join("proj.csv");
        let proj = vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25];
        write_projection_csv(&ppath, &proj, &[0, 1], &names).unwrap();
        let mut rdr = csv::Reader::from_path(&ppath).unwrap();
        let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[1][3], "pos");
        assert_eq!(rows[0][0].parse::<f64>().unwrap(), 1.0);
    }
}
