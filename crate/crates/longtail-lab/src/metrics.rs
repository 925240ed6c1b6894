//! Evaluation over a held-out split: micro accuracy, macro per-bin
//! accuracy, and the weight-norm / class-count correlation that the whole
//! experiment hinges on.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{bin_of, ClassCatalog, BACKGROUND, NUM_BINS};
use crate::error::{Error, Result};
use crate::head::WeightNorms;
use crate::inference::Predictor;
use crate::synthdata::Records;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    /// Micro accuracy over every eval record, background included.
    pub overall_acc: f64,
    /// Macro accuracy over the foreground classes falling in each count
    /// bin (1: <10, 2: <100, 3: <1000, 4: rest); None when the bin is empty.
    pub acc_per_bin: [Option<f64>; NUM_BINS],
    pub acc_bg: f64,
    /// Indexed by category id 0..=C.
    pub per_class_acc: Vec<f64>,
    pub weight_norms: Option<WeightNorms>,
    /// Pearson correlation of the foreground column norms against
    /// log(1 + N(j)); absent when norms are not reported.
    pub norm_count_correlation: Option<f64>,
}

/// Pearson correlation between foreground weight norms and log(1 + N(j)).
pub fn norm_count_correlation(norms: &WeightNorms, catalog: &ClassCatalog) -> Result<f64> {
    let c = catalog.num_foreground();
    if norms.per_category.len() != c + 1 {
        return Err(Error::shape(format!(
            "norms cover {} categories, catalog has {}",
            norms.per_category.len(),
            c + 1
        )));
    }
    let xs: Vec<f64> = (1..=c).map(|j| (1.0 + catalog.count(j as u32) as f64).ln()).collect();
    let ys = &norms.per_category[1..];
    pearson(&xs, ys)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::data("correlation needs at least 3 paired samples"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::numeric("correlation undefined: a variable has zero variance"));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Score every eval record and aggregate accuracies.
pub fn evaluate(
    predictor: &dyn Predictor,
    eval: &Records,
    catalog: &ClassCatalog,
    method: &str,
) -> Result<MetricsReport> {
    if eval.len() == 0 {
        return Err(Error::data("eval split is empty"));
    }
    let c = catalog.num_foreground();
    let mut correct = vec![0usize; c + 1];
    let mut total = vec![0usize; c + 1];
    let mut overall_correct = 0usize;
    for i in 0..eval.len() {
        let label = eval.labels[i] as usize;
        if label > c {
            return Err(Error::data(format!("eval label {} outside catalog", label)));
        }
        let predicted = predictor.predict(eval.feature(i))?.argmax() as usize;
        total[label] += 1;
        if predicted == label {
            correct[label] += 1;
            overall_correct += 1;
        }
    }
    let per_class_acc: Vec<f64> = (0..=c)
        .map(|j| if total[j] == 0 { 0.0 } else { correct[j] as f64 / total[j] as f64 })
        .collect();

    // macro over classes within each count bin; classes absent from eval
    // still participate (with accuracy 0) so thin bins cannot hide misses
    let mut bin_sum = [0.0; NUM_BINS];
    let mut bin_classes = [0usize; NUM_BINS];
    for j in 1..=c {
        let bin = bin_of(catalog.count(j as u32)) - 1;
        bin_sum[bin] += per_class_acc[j];
        bin_classes[bin] += 1;
    }
    let mut acc_per_bin = [None; NUM_BINS];
    for b in 0..NUM_BINS {
        if bin_classes[b] > 0 {
            acc_per_bin[b] = Some(bin_sum[b] / bin_classes[b] as f64);
        }
    }

    Ok(MetricsReport {
        method: method.to_string(),
        overall_acc: overall_correct as f64 / eval.len() as f64,
        acc_per_bin,
        acc_bg: per_class_acc[BACKGROUND as usize],
        per_class_acc,
        weight_norms: None,
        norm_count_correlation: None,
    })
}

impl MetricsReport {
    /// Attach column norms and the norm/count correlation when the head
    /// exposes per-category columns.
    pub fn with_norms(mut self, norms: WeightNorms, catalog: &ClassCatalog) -> Result<Self> {
        self.norm_count_correlation = Some(norm_count_correlation(&norms, catalog)?);
        self.weight_norms = Some(norms);
        Ok(self)
    }
}

/// One row per foreground category, sorted by train count descending:
/// `category_id,train_count,weight_norm`.
pub fn export_norms(norms: &WeightNorms, catalog: &ClassCatalog, path: &Path) -> Result<()> {
    let c = catalog.num_foreground();
    if norms.per_category.len() != c + 1 {
        return Err(Error::shape("norm vector does not match the catalog"));
    }
    let mut rows: Vec<(u32, u64, f64)> =
        (1..=c as u32).map(|j| (j, catalog.count(j), norms.per_category[j as usize])).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = String::from("category_id,train_count,weight_norm\n");
    for (id, count, norm) in rows {
        out.push_str(&format!("{},{},{}\n", id, count, norm));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::ScoreVector;

    /// Predicts by thresholding the first feature dimension.
    struct StubPredictor {
        answers: Vec<u32>,
    }

    impl Predictor for StubPredictor {
        fn predict(&self, feature: &[f64]) -> Result<ScoreVector> {
            let idx = feature[0] as usize;
            let answer = self.answers[idx] as usize;
            let mut scores = vec![0.0; 4];
            scores[answer] = 1.0;
            Ok(ScoreVector { scores, normalized: true })
        }
    }

    fn eval_records(labels: Vec<u32>) -> Records {
        let features: Vec<f64> = (0..labels.len()).map(|i| i as f64).collect();
        let image_ids = vec![-1; labels.len()];
        Records { feature_dim: 1, features, labels, image_ids }
    }

    #[test]
    fn accuracy_bookkeeping_by_hand() {
        // catalog: class 1 count 5 (bin 1), class 2 count 50 (bin 2),
        // class 3 count 20000 (bin 4); bin 3 empty
        let catalog = ClassCatalog::new(vec![5, 50, 20000]).unwrap();
        let eval = eval_records(vec![0, 0, 1, 1, 2, 3]);
        // correct on: both bg, one of two class-1, class-2 miss, class-3 hit
        let stub = StubPredictor { answers: vec![0, 0, 1, 3, 0, 3] };
        let report = evaluate(&stub, &eval, &catalog, "stub").unwrap();
        assert!((report.acc_bg - 1.0).abs() < 1e-15);
        assert!((report.overall_acc - 4.0 / 6.0).abs() < 1e-15);
        assert!((report.per_class_acc[1] - 0.5).abs() < 1e-15);
        assert_eq!(report.per_class_acc[2], 0.0);
        assert!((report.acc_per_bin[0].unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(report.acc_per_bin[1].unwrap(), 0.0);
        assert!(report.acc_per_bin[2].is_none());
        assert!((report.acc_per_bin[3].unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(report.method, "stub");
    }

    #[test]
    fn pearson_hand_cases() {
        // perfectly linear
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let r = pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        // textbook case: r = 0 for a symmetric parabola
        let r = pearson(&[-1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!(r.abs() < 1e-12);
        // zero variance and short inputs are errors
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn correlation_uses_log_counts() {
        // norms exactly linear in log(1 + N): correlation is 1
        let catalog = ClassCatalog::new(vec![5, 50, 500, 5000]).unwrap();
        let per_category: Vec<f64> = std::iter::once(0.3)
            .chain(catalog.counts().iter().map(|&n| 0.1 + 0.02 * (1.0 + n as f64).ln()))
            .collect();
        let norms = WeightNorms { per_category, others: vec![] };
        let r = norm_count_correlation(&norms, &catalog).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_round_trips_through_json() {
        let catalog = ClassCatalog::new(vec![5, 50, 20000]).unwrap();
        let eval = eval_records(vec![0, 1, 2, 3]);
        let stub = StubPredictor { answers: vec![0, 1, 2, 3] };
        let norms = WeightNorms { per_category: vec![0.5, 0.1, 0.2, 0.3], others: vec![0.05] };
        let report =
            evaluate(&stub, &eval, &catalog, "stub").unwrap().with_norms(norms, &catalog).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        assert!(back.norm_count_correlation.unwrap().is_finite());
    }

    #[test]
    fn norm_export_is_sorted_by_count() {
        let catalog = ClassCatalog::new(vec![50, 5000, 5]).unwrap();
        let norms = WeightNorms { per_category: vec![0.4, 0.1, 0.2, 0.3], others: vec![] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norms.csv");
        export_norms(&norms, &catalog, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "category_id,train_count,weight_norm");
        assert_eq!(lines[1], "2,5000,0.2");
        assert_eq!(lines[2], "1,50,0.1");
        assert_eq!(lines[3], "3,5,0.3");
    }
}
