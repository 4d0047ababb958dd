//! Evaluation metrics and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::combine_accuracy;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const CLASSES_CSV: &str = "classes.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: u64,
    pub true_class: usize,
    pub predicted_class: usize,
    pub class_probs: Vec<f64>,
    pub true_score: u8,
    pub predicted_score: u8,
    pub score_probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    Class,
    Score,
}

impl PredictionRecord {
    fn label(&self, field: Field, score_low: u8) -> (usize, &[f64]) {
        match field {
            Field::Class => (self.true_class, &self.class_probs),
            Field::Score => ((self.true_score - score_low) as usize, &self.score_probs),
        }
    }
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Fraction of records whose true label is among the `k` most probable.
/// Equal probabilities rank the lower index first. Scores are indexed from
/// the lowest score in `score_probs`, which is assumed to be 1.
pub fn topk_accuracy(records: &[PredictionRecord], k: usize, field: Field) -> Result<f64> {
    let Some(first) = records.first() else {
        return if k == 0 { Err(Error::InvalidK { k, labels: 0 }) } else { Ok(0.0) };
    };
    let labels = first.label(field, 1).1.len();
    if k == 0 || k > labels {
        return Err(Error::InvalidK { k, labels });
    }
    let hits = records
        .iter()
        .filter(|r| {
            let (t, probs) = r.label(field, 1);
            let ahead = probs.iter().enumerate().filter(|&(j, &p)| p > probs[t] || (p == probs[t] && j < t)).count();
            ahead < k
        })
        .count();
    Ok(fraction(hits, records.len()))
}

pub fn exact_accuracy(records: &[PredictionRecord], field: Field) -> f64 {
    let hits = records
        .iter()
        .filter(|r| match field {
            Field::Class => r.true_class == r.predicted_class,
            Field::Score => r.true_score == r.predicted_score,
        })
        .count();
    fraction(hits, records.len())
}

/// Fraction of records with `|true_score − predicted_score| ≤ gamma`.
pub fn relaxed_accuracy(records: &[PredictionRecord], gamma: u32) -> f64 {
    let hits = records.iter().filter(|r| r.true_score.abs_diff(r.predicted_score) as u32 <= gamma).count();
    fraction(hits, records.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub count: usize,
    pub accuracy: f64,
    pub relaxed_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassSummary {
    pub rows: Vec<ClassSummary>,
    /// Unweighted means over the classes that have records.
    pub mean_accuracy: f64,
    pub mean_relaxed_accuracy: f64,
    /// Classes without any record; excluded from the means.
    pub empty: Vec<usize>,
}

/// Score accuracy per true class.
pub fn per_class_summary(records: &[PredictionRecord], n_classes: usize, gamma: u32) -> PerClassSummary {
    let mut rows = Vec::new();
    let mut empty = Vec::new();
    for class in 0..n_classes {
        let subset: Vec<PredictionRecord> = records.iter().filter(|r| r.true_class == class).cloned().collect();
        if subset.is_empty() {
            empty.push(class);
            continue;
        }
        rows.push(ClassSummary {
            class,
            count: subset.len(),
            accuracy: exact_accuracy(&subset, Field::Score),
            relaxed_accuracy: relaxed_accuracy(&subset, gamma),
        });
    }
    let n = rows.len();
    let mean = |f: fn(&ClassSummary) -> f64| if n == 0 { 0.0 } else { rows.iter().map(f).sum::<f64>() / n as f64 };
    PerClassSummary {
        mean_accuracy: mean(|r| r.accuracy),
        mean_relaxed_accuracy: mean(|r| r.relaxed_accuracy),
        rows,
        empty,
    }
}

/// `(new − baseline)/baseline`.
pub fn improvement_ratio(new: f64, baseline: f64) -> Result<f64> {
    if baseline <= 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((new - baseline) / baseline)
}

pub fn confusion_matrix(records: &[PredictionRecord], n_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for r in records {
        if r.true_class < n_classes && r.predicted_class < n_classes {
            m[r.true_class][r.predicted_class] += 1;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub gamma: u32,
    pub top1: f64,
    /// Absent when there are fewer than five classes.
    pub top5: Option<f64>,
    /// Score accuracy of each lower model on its own class (true-class routing).
    pub classes: Vec<ClassSummary>,
    pub mean_accuracy: f64,
    pub mean_relaxed_accuracy: f64,
    /// Score accuracy through the routed hierarchy, misroutes included.
    pub end_to_end_accuracy: f64,
    pub end_to_end_relaxed_accuracy: f64,
    /// `top1 × mean_accuracy`.
    pub combined_accuracy: f64,
    pub flat_accuracy: Option<f64>,
    pub flat_relaxed_accuracy: Option<f64>,
    /// Relative gain of end-to-end accuracy over the flat model.
    pub improvement: Option<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// `routed` holds end-to-end predictions; `stage` the lower-model
    /// predictions made with the true class.
    pub fn build(routed: &[PredictionRecord], stage: &[PredictionRecord], n_classes: usize, gamma: u32) -> Result<Self> {
        if routed.is_empty() || stage.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let top1 = topk_accuracy(routed, 1, Field::Class)?;
        let top5 = if n_classes >= 5 { Some(topk_accuracy(routed, 5, Field::Class)?) } else { None };
        let summary = per_class_summary(stage, n_classes, gamma);
        Ok(MetricsReport {
            gamma,
            top1,
            top5,
            combined_accuracy: combine_accuracy(top1, summary.mean_accuracy)?,
            classes: summary.rows,
            mean_accuracy: summary.mean_accuracy,
            mean_relaxed_accuracy: summary.mean_relaxed_accuracy,
            end_to_end_accuracy: exact_accuracy(routed, Field::Score),
            end_to_end_relaxed_accuracy: relaxed_accuracy(routed, gamma),
            flat_accuracy: None,
            flat_relaxed_accuracy: None,
            improvement: None,
            confusion: confusion_matrix(routed, n_classes),
        })
    }

    pub fn with_flat(mut self, flat: &[PredictionRecord]) -> Result<Self> {
        let acc = exact_accuracy(flat, Field::Score);
        self.flat_accuracy = Some(acc);
        self.flat_relaxed_accuracy = Some(relaxed_accuracy(flat, self.gamma));
        self.improvement = Some(improvement_ratio(self.end_to_end_accuracy, acc)?);
        Ok(self)
    }

    /// Same report with every real rounded to four decimals, as written to disk.
    pub fn rounded(&self) -> Self {
        let mut r = self.clone();
        for f in [
            &mut r.top1,
            &mut r.mean_accuracy,
            &mut r.mean_relaxed_accuracy,
            &mut r.end_to_end_accuracy,
            &mut r.end_to_end_relaxed_accuracy,
            &mut r.combined_accuracy,
        ] {
            *f = round4(*f);
        }
        for f in [&mut r.top5, &mut r.flat_accuracy, &mut r.flat_relaxed_accuracy, &mut r.improvement]
            .into_iter()
            .flatten()
        {
            *f = round4(*f);
        }
        for c in &mut r.classes {
            c.accuracy = round4(c.accuracy);
            c.relaxed_accuracy = round4(c.relaxed_accuracy);
        }
        r
    }

    fn scalar_rows(&self) -> Vec<(&'static str, Option<f64>, Option<f64>)> {
        vec![
            ("mean", Some(self.mean_accuracy), Some(self.mean_relaxed_accuracy)),
            ("end_to_end", Some(self.end_to_end_accuracy), Some(self.end_to_end_relaxed_accuracy)),
            ("combined", Some(self.combined_accuracy), None),
            ("top1", Some(self.top1), None),
            ("top5", self.top5, None),
            ("flat", self.flat_accuracy, self.flat_relaxed_accuracy),
            ("improvement", self.improvement, None),
        ]
    }
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn fmt4(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// Per-class rows followed by named summary rows; scalar metrics without a
/// relaxed counterpart leave the last column empty.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = format!("# gamma={}\nclass,accuracy,relaxed_accuracy\n", report.gamma);
    for c in &report.classes {
        let _ = writeln!(out, "{},{:.4},{:.4}", c.class, c.accuracy, c.relaxed_accuracy);
    }
    for (name, acc, relaxed) in report.scalar_rows() {
        let _ = writeln!(out, "{name},{},{}", fmt4(acc), fmt4(relaxed));
    }
    out
}

pub fn classes_csv(report: &MetricsReport) -> String {
    let mut out = String::from("class_name,accuracy,relaxed_accuracy\n");
    for c in &report.classes {
        let _ = writeln!(out, "class_{:02},{:.4},{:.4}", c.class, c.accuracy, c.relaxed_accuracy);
    }
    out
}

pub fn confusion_csv(report: &MetricsReport) -> String {
    let n = report.confusion.len();
    let mut out = String::from("true\\predicted");
    for j in 0..n {
        let _ = write!(out, ",{j}");
    }
    out.push('\n');
    for (i, row) in report.confusion.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn report_json(report: &MetricsReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&report.rounded())?;
    s.push('\n');
    Ok(s)
}

/// Writes the report in `format` plus `classes.csv` and `confusion.csv` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let main = match format {
        ReportFormat::Csv => (REPORT_CSV, report_csv(report)),
        ReportFormat::Json => (REPORT_JSON, report_json(report)?),
    };
    let files = [main, (CLASSES_CSV, classes_csv(report)), (CONFUSION_CSV, confusion_csv(report))];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads `report.json` from `dir`, or `report.csv` with the confusion matrix
/// from `confusion.csv` when no JSON report is present.
pub fn load_report(dir: &Path) -> Result<MetricsReport> {
    let json = dir.join(REPORT_JSON);
    if json.exists() {
        let bytes = fs::read(&json).map_err(|e| Error::io(&json, e))?;
        return serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(&json, e.to_string()));
    }
    let csv = dir.join(REPORT_CSV);
    let text = fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
    let confusion_path = dir.join(CONFUSION_CSV);
    let confusion = match fs::read_to_string(&confusion_path) {
        Ok(t) => parse_confusion(&t).map_err(|e| Error::corrupt(&confusion_path, e))?,
        Err(_) => Vec::new(),
    };
    parse_report_csv(&text, confusion).map_err(|e| Error::corrupt(&csv, e))
}

fn parse_confusion(text: &str) -> std::result::Result<Vec<Vec<u64>>, String> {
    text.lines()
        .skip(1)
        .map(|line| line.split(',').skip(1).map(|v| v.parse::<u64>().map_err(|e| e.to_string())).collect())
        .collect()
}

pub fn parse_report_csv(text: &str, confusion: Vec<Vec<u64>>) -> std::result::Result<MetricsReport, String> {
    let mut lines = text.lines();
    let gamma = lines
        .next()
        .and_then(|l| l.strip_prefix("# gamma="))
        .ok_or("missing gamma line")?
        .parse::<u32>()
        .map_err(|e| e.to_string())?;
    if lines.next() != Some("class,accuracy,relaxed_accuracy") {
        return Err("unexpected header".into());
    }
    let opt = |s: &str| -> std::result::Result<Option<f64>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>().map(Some).map_err(|e| e.to_string())
        }
    };
    let mut classes = Vec::new();
    let mut scalars = std::collections::BTreeMap::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let [name, acc, relaxed] = cols[..] else {
            return Err(format!("expected three columns in {line:?}"));
        };
        let (acc, relaxed) = (opt(acc)?, opt(relaxed)?);
        if let Ok(class) = name.parse::<usize>() {
            // the CSV has no count column; a class's count is its confusion row total
            let count = confusion.get(class).map_or(0, |row| row.iter().sum::<u64>() as usize);
            classes.push(ClassSummary {
                class,
                count,
                accuracy: acc.ok_or("missing class accuracy")?,
                relaxed_accuracy: relaxed.ok_or("missing class relaxed accuracy")?,
            });
        } else {
            scalars.insert(name.to_string(), (acc, relaxed));
        }
    }
    let get = |k: &str| scalars.get(k).copied().unwrap_or((None, None));
    let need = |v: Option<f64>, k: &str| v.ok_or(format!("missing {k}"));
    Ok(MetricsReport {
        gamma,
        top1: need(get("top1").0, "top1")?,
        top5: get("top5").0,
        classes,
        mean_accuracy: need(get("mean").0, "mean")?,
        mean_relaxed_accuracy: need(get("mean").1, "mean relaxed")?,
        end_to_end_accuracy: need(get("end_to_end").0, "end_to_end")?,
        end_to_end_relaxed_accuracy: need(get("end_to_end").1, "end_to_end relaxed")?,
        combined_accuracy: need(get("combined").0, "combined")?,
        flat_accuracy: get("flat").0,
        flat_relaxed_accuracy: get("flat").1,
        improvement: get("improvement").0,
        confusion,
    })
}

/// Plain-text tables for terminal display.
pub fn render_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>9} {:>9} {:>7}", "class", "accuracy", "relaxed", "count");
    for c in &report.classes {
        let _ = writeln!(out, "{:<12} {:>9.4} {:>9.4} {:>7}", c.class, c.accuracy, c.relaxed_accuracy, c.count);
    }
    out.push('\n');
    let _ = writeln!(out, "{:<12} {:>9} {:>9}   (gamma = {})", "metric", "value", "relaxed", report.gamma);
    for (name, acc, relaxed) in report.scalar_rows() {
        if acc.is_some() {
            let _ = writeln!(out, "{:<12} {:>9} {:>9}", name, fmt4(acc), fmt4(relaxed));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(true_score: u8, predicted_score: u8) -> PredictionRecord {
        PredictionRecord {
            sample_id: 0,
            true_class: 0,
            predicted_class: 0,
            class_probs: vec![1.0, 0.0],
            true_score,
            predicted_score,
            score_probs: vec![0.2; 5],
        }
    }

    #[test]
    fn relaxed_examples() {
        let recs = [record(3, 4), record(1, 3), record(5, 5), record(2, 1)];
        assert_eq!(relaxed_accuracy(&recs, 1), 0.75);
        assert_eq!(relaxed_accuracy(&recs, 0), 0.25);
        assert_eq!(relaxed_accuracy(&recs, 4), 1.0);
        assert_eq!(relaxed_accuracy(&[], 1), 0.0);
    }

    #[test]
    fn topk_examples() {
        let r = PredictionRecord { class_probs: vec![0.1, 0.6, 0.3], true_class: 2, ..record(1, 1) };
        assert_eq!(topk_accuracy(std::slice::from_ref(&r), 1, Field::Class).unwrap(), 0.0);
        assert_eq!(topk_accuracy(std::slice::from_ref(&r), 2, Field::Class).unwrap(), 1.0);
        assert_eq!(topk_accuracy(std::slice::from_ref(&r), 3, Field::Class).unwrap(), 1.0);
        assert!(matches!(topk_accuracy(std::slice::from_ref(&r), 4, Field::Class), Err(Error::InvalidK { .. })));
        assert!(matches!(topk_accuracy(std::slice::from_ref(&r), 0, Field::Class), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let r = PredictionRecord { class_probs: vec![0.4, 0.4, 0.2], true_class: 1, ..record(1, 1) };
        assert_eq!(topk_accuracy(std::slice::from_ref(&r), 1, Field::Class).unwrap(), 0.0);
        let r = PredictionRecord { true_class: 0, ..r };
        assert_eq!(topk_accuracy(std::slice::from_ref(&r), 1, Field::Class).unwrap(), 1.0);
    }

    #[test]
    fn per_class_mean_is_unweighted() {
        let mut recs = vec![record(3, 3), record(3, 3)];
        recs.push(PredictionRecord { true_class: 1, ..record(2, 5) });
        let s = per_class_summary(&recs, 3, 1);
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.mean_accuracy, 0.5);
        assert_eq!(s.empty, vec![2]);
    }

    #[test]
    fn improvement_examples() {
        assert!((improvement_ratio(0.7194, 0.4568).unwrap() - 0.5748).abs() < 1e-4);
        assert_eq!(improvement_ratio(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(improvement_ratio(0.5, 0.25).unwrap(), 1.0);
        assert!(matches!(improvement_ratio(0.5, 0.0), Err(Error::ZeroBaseline)));
    }

    #[test]
    fn class_extremes_render_as_bounds() {
        let classes = [0.882, 0.7336, 0.80].iter().enumerate().map(|(i, &a)| ClassSummary {
            class: i,
            count: 20,
            accuracy: a,
            relaxed_accuracy: a,
        });
        let report = MetricsReport {
            gamma: 1,
            top1: 0.8967,
            top5: None,
            classes: classes.collect(),
            mean_accuracy: 0.8023,
            mean_relaxed_accuracy: 0.9,
            end_to_end_accuracy: 0.7,
            end_to_end_relaxed_accuracy: 0.8,
            combined_accuracy: 0.7194,
            flat_accuracy: None,
            flat_relaxed_accuracy: None,
            improvement: None,
            confusion: vec![vec![1, 0], vec![0, 1]],
        };
        let csv = classes_csv(&report);
        assert!(csv.contains("class_00,0.8820,0.8820"));
        assert!(csv.contains("class_01,0.7336,0.7336"));
        let parsed = parse_report_csv(&report_csv(&report), report.confusion.clone()).unwrap();
        assert_eq!(parsed.classes.iter().map(|c| c.accuracy).fold(f64::MIN, f64::max), 0.882);
        assert_eq!(parsed.classes.iter().map(|c| c.accuracy).fold(f64::MAX, f64::min), 0.7336);
        assert_eq!(parsed.combined_accuracy, 0.7194);
    }

    fn arb_records() -> impl Strategy<Value = Vec<PredictionRecord>> {
        prop::collection::vec((1u8..=5, 1u8..=5), 1..40)
            .prop_map(|pairs| pairs.into_iter().map(|(t, p)| record(t, p)).collect())
    }

    proptest! {
        #[test]
        fn relaxed_monotone_in_gamma(recs in arb_records()) {
            let exact = exact_accuracy(&recs, Field::Score);
            prop_assert_eq!(relaxed_accuracy(&recs, 0).to_bits(), exact.to_bits());
            for g in 0..5 {
                prop_assert!(relaxed_accuracy(&recs, g) <= relaxed_accuracy(&recs, g + 1));
            }
            prop_assert_eq!(relaxed_accuracy(&recs, 4), 1.0);
        }

        #[test]
        fn topk_monotone_in_k(probs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 1..30), t in 0usize..5) {
            let recs: Vec<PredictionRecord> = probs
                .into_iter()
                .map(|p| PredictionRecord { score_probs: p, true_score: t as u8 + 1, ..record(1, 1) })
                .collect();
            let accs: Vec<f64> = (1..=5).map(|k| topk_accuracy(&recs, k, Field::Score).unwrap()).collect();
            prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(accs[4], 1.0);
        }
    }
}
