//! Segmentation metrics, aggregation, Welch t-tests and report export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::SegMask;
use crate::error::{contract, Error, Result};

/// Significance level for the pairwise comparisons.
pub const ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Unprocessed,
    Traditional,
    Cyclegan,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Unprocessed, Method::Traditional, Method::Cyclegan];

    pub fn name(self) -> &'static str {
        match self {
            Method::Unprocessed => "unprocessed",
            Method::Traditional => "traditional",
            Method::Cyclegan => "cyclegan",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Dice,
    Jaccard,
    Auc,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::Accuracy,
        MetricKind::Dice,
        MetricKind::Jaccard,
        MetricKind::Auc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Dice => "dice",
            MetricKind::Jaccard => "jaccard",
            MetricKind::Auc => "auc",
        }
    }
}

/// Metrics of one segmented B-scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub volume_id: String,
    pub bscan_index: usize,
    pub accuracy: f64,
    pub dice: f64,
    pub jaccard: f64,
    /// Absent when the ground truth holds a single class.
    pub auc: Option<f64>,
}

impl MetricRow {
    pub fn get(&self, m: MetricKind) -> Option<f64> {
        match m {
            MetricKind::Accuracy => Some(self.accuracy),
            MetricKind::Dice => Some(self.dice),
            MetricKind::Jaccard => Some(self.jaccard),
            MetricKind::Auc => self.auc,
        }
    }
}

fn same_dims(pred: &SegMask, gt: &SegMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(contract(format!(
            "mask dims {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// `(|A∩B|, |A|, |B|)` over retina labels.
fn overlap(pred: &SegMask, gt: &SegMask) -> (u64, u64, u64) {
    let mut c = (0, 0, 0);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        c.0 += u64::from(p == 1 && g == 1);
        c.1 += u64::from(p == 1);
        c.2 += u64::from(g == 1);
    }
    c
}

pub fn accuracy(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    same_dims(pred, gt)?;
    let agree = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .filter(|(p, g)| p == g)
        .count();
    Ok(agree as f64 / gt.labels().len() as f64)
}

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    same_dims(pred, gt)?;
    let (i, a, b) = overlap(pred, gt);
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * i as f64 / (a + b) as f64
    })
}

/// `|A∩B| / |A∪B|`, and 1 when both masks are empty.
pub fn jaccard(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    same_dims(pred, gt)?;
    let (i, a, b) = overlap(pred, gt);
    let union = a + b - i;
    Ok(if union == 0 {
        1.0
    } else {
        i as f64 / union as f64
    })
}

/// ROC area as the normalized Mann–Whitney statistic of the retina
/// probabilities; ties count one half. `None` for single-class ground truth.
pub fn auc(retina_probs: &[f32], gt: &SegMask) -> Result<Option<f64>> {
    if retina_probs.len() != gt.labels().len() {
        return Err(contract("probability map and mask sizes differ"));
    }
    let mut order: Vec<usize> = (0..retina_probs.len()).collect();
    order.sort_by(|&a, &b| retina_probs[a].total_cmp(&retina_probs[b]));
    let n_pos = gt.labels().iter().filter(|&&l| l == 1).count();
    let n_neg = gt.labels().len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    // Count, over tie groups in ascending score order, negatives strictly
    // below each positive plus half the tied negatives.
    let mut wins = 0.0f64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && retina_probs[order[j]] == retina_probs[order[i]] {
            j += 1;
        }
        let (mut pos, mut neg) = (0u64, 0u64);
        for &k in &order[i..j] {
            if gt.labels()[k] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
        i = j;
    }
    Ok(Some(wins / (n_pos as f64 * n_neg as f64)))
}

/// All metrics of one B-scan.
pub fn score_bscan(
    method: Method,
    volume_id: &str,
    bscan_index: usize,
    pred: &SegMask,
    retina_probs: &[f32],
    gt: &SegMask,
) -> Result<MetricRow> {
    Ok(MetricRow {
        method,
        volume_id: volume_id.to_string(),
        bscan_index,
        accuracy: accuracy(pred, gt)?,
        dice: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        auc: auc(retina_probs, gt)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single value.
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { n, mean, std })
}

/// Present values of `metric` for `method`, in row order.
pub fn metric_values(rows: &[MetricRow], method: Method, metric: MetricKind) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.method == method)
        .filter_map(|r| r.get(metric))
        .collect()
}

/// Per-method, per-metric summaries of `rows`.
pub fn aggregate(rows: &[MetricRow]) -> BTreeMap<Method, BTreeMap<MetricKind, Summary>> {
    let mut out = BTreeMap::new();
    for method in Method::ALL {
        let per: BTreeMap<_, _> = MetricKind::ALL
            .into_iter()
            .filter_map(|m| summarize(&metric_values(rows, method, m)).map(|s| (m, s)))
            .collect();
        if !per.is_empty() {
            out.insert(method, per);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    #[serde(with = "extended_f64")]
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    #[serde(with = "extended_f64")]
    pub df: f64,
    /// Two-tailed p-value.
    pub p: f64,
}

/// Two-tailed Welch (unequal variance) t-test.
pub fn ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    let (Some(sa), Some(sb)) = (summarize(a), summarize(b)) else {
        return Err(contract("t-test needs non-empty groups"));
    };
    if sa.n < 2 || sb.n < 2 {
        return Err(contract("t-test needs at least two samples per group"));
    }
    let (va, vb) = (sa.std * sa.std / sa.n as f64, sb.std * sb.std / sb.n as f64);
    let se2 = va + vb;
    let diff = sa.mean - sb.mean;
    if se2 == 0.0 {
        // Both groups constant: identical means are indistinguishable,
        // different ones are perfectly separated.
        return Ok(if diff == 0.0 {
            TTest {
                t: 0.0,
                df: f64::INFINITY,
                p: 1.0,
            }
        } else {
            TTest {
                t: diff.signum() * f64::INFINITY,
                df: f64::INFINITY,
                p: 0.0,
            }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (sa.n - 1) as f64 + vb * vb / (sb.n - 1) as f64);
    let dist =
        StudentsT::new(0.0, 1.0, df).map_err(|e| contract(format!("t distribution: {e}")))?;
    let p = if t == 0.0 {
        1.0
    } else {
        (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
    };
    Ok(TTest { t, df, p })
}

/// JSON has no infinities; write them as the strings `"inf"` / `"-inf"`.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => "inf".serialize(s),
            f64::NEG_INFINITY => "-inf".serialize(s),
            v => v.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("not a number: {t}"))),
        }
    }
}

/// Linear-interpolation quantile of sorted data (`(n − 1)·q` position).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme data within 1.5·IQR of the quartiles.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || s.iter().copied().filter(|&v| v >= lo && v <= hi);
    Some(BoxStats {
        q1,
        median,
        q3,
        whisker_low: inside().next().unwrap_or(q1),
        whisker_high: inside().next_back().unwrap_or(q3),
        outliers: s.iter().copied().filter(|&v| v < lo || v > hi).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub method: Method,
    pub metric: MetricKind,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: MetricKind,
    pub first: Method,
    pub second: Method,
    #[serde(flatten)]
    pub test: TTest,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<AggregateEntry>,
    /// Summaries of per-volume means.
    pub volume_aggregates: Vec<AggregateEntry>,
    pub comparisons: Vec<Comparison>,
    pub test: String,
    pub alpha: f64,
}

impl MetricsReport {
    /// Aggregate `rows` and t-test every pair of `methods` on every metric.
    /// Each listed method needs at least two rows.
    pub fn build(rows: Vec<MetricRow>, methods: &[Method]) -> Result<Self> {
        for &m in methods {
            let n = rows.iter().filter(|r| r.method == m).count();
            if n < 2 {
                return Err(Error::MissingInput(format!(
                    "method group {m} has {n} rows; at least two are required"
                )));
            }
        }
        let flatten = |agg: BTreeMap<Method, BTreeMap<MetricKind, Summary>>| {
            agg.into_iter()
                .filter(|(m, _)| methods.contains(m))
                .flat_map(|(method, per)| {
                    per.into_iter()
                        .map(move |(metric, summary)| AggregateEntry {
                            method,
                            metric,
                            summary,
                        })
                })
                .collect::<Vec<_>>()
        };
        let aggregates = flatten(aggregate(&rows));
        let volume_aggregates = flatten(aggregate(&volume_means(&rows)));
        let mut comparisons = Vec::new();
        for metric in MetricKind::ALL {
            for (i, &first) in methods.iter().enumerate() {
                for &second in &methods[i + 1..] {
                    let (a, b) = (
                        metric_values(&rows, first, metric),
                        metric_values(&rows, second, metric),
                    );
                    if a.len() < 2 || b.len() < 2 {
                        continue;
                    }
                    let test = ttest(&a, &b)?;
                    comparisons.push(Comparison {
                        metric,
                        first,
                        second,
                        test,
                        significant: test.p < ALPHA,
                    });
                }
            }
        }
        Ok(Self {
            rows,
            aggregates,
            volume_aggregates,
            comparisons,
            test: "welch two-tailed".into(),
            alpha: ALPHA,
        })
    }

    pub fn summary(&self, method: Method, metric: MetricKind) -> Option<Summary> {
        self.aggregates
            .iter()
            .find(|e| e.method == method && e.metric == metric)
            .map(|e| e.summary)
    }

    pub fn comparison(&self, metric: MetricKind, a: Method, b: Method) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| {
            c.metric == metric && ((c.first, c.second) == (a, b) || (c.first, c.second) == (b, a))
        })
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.aggregates.iter().map(|e| e.method).collect();
        m.dedup();
        m
    }

    /// Plain-text table of `mean (std)` cells, one line per method.
    pub fn table(&self) -> String {
        let mut out = String::from("method");
        for m in MetricKind::ALL {
            write!(out, "\t{}", m.name()).unwrap();
        }
        out.push('\n');
        for method in self.methods() {
            out.push_str(method.name());
            for metric in MetricKind::ALL {
                match self.summary(method, metric) {
                    Some(s) => write!(out, "\t{} ({})", s.mean, s.std).unwrap(),
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// One line per comparison; `*` marks p < alpha.
    pub fn significance_list(&self) -> String {
        let mut out = String::new();
        for c in &self.comparisons {
            writeln!(
                out,
                "{}\t{} vs {}\tt={:.4}\tdf={:.2}\tp={:.3e}{}",
                c.metric.name(),
                c.first,
                c.second,
                c.test.t,
                c.test.df,
                c.test.p,
                if c.significant { "\t*" } else { "" }
            )
            .unwrap();
        }
        out
    }
}

/// Per-volume means of every metric, as one row per (method, volume).
pub fn volume_means(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut groups: BTreeMap<(Method, &str), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method, r.volume_id.as_str()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, id), rs)| {
            let mean = |f: &dyn Fn(&MetricRow) -> Option<f64>| {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                summarize(&v).map(|s| s.mean)
            };
            MetricRow {
                method,
                volume_id: id.to_string(),
                bscan_index: 0,
                accuracy: mean(&|r| Some(r.accuracy)).unwrap_or(0.0),
                dice: mean(&|r| Some(r.dice)).unwrap_or(0.0),
                jaccard: mean(&|r| Some(r.jaccard)).unwrap_or(0.0),
                auc: mean(&|r| r.auc),
            }
        })
        .collect()
}

pub fn write_rows_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("metrics csv: {other:?}")),
    }
}

/// Write `rows.csv`, `report.json`, `table.txt`, `significance.txt` and a
/// `boxplot_<metric>.csv` per metric into `dir`.
pub fn export_report(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_rows_csv(&report.rows, dir.join("rows.csv"))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("report.json"), json)?;
    fs::write(dir.join("table.txt"), report.table())?;
    fs::write(dir.join("significance.txt"), report.significance_list())?;
    for metric in MetricKind::ALL {
        let mut w = csv::Writer::from_path(dir.join(format!("boxplot_{}.csv", metric.name())))
            .map_err(csv_err)?;
        w.write_record(["method", "kind", "value", "volume_id", "bscan_index"])
            .map_err(csv_err)?;
        for method in report.methods() {
            let values = metric_values(&report.rows, method, metric);
            let Some(b) = box_stats(&values) else {
                continue;
            };
            let stats = [
                ("q1", b.q1),
                ("median", b.median),
                ("q3", b.q3),
                ("whisker_low", b.whisker_low),
                ("whisker_high", b.whisker_high),
            ];
            for (kind, v) in stats
                .iter()
                .copied()
                .chain(b.outliers.iter().map(|&v| ("outlier", v)))
            {
                w.write_record([method.name(), kind, &v.to_string(), "", ""])
                    .map_err(csv_err)?;
            }
            for r in report.rows.iter().filter(|r| r.method == method) {
                if let Some(v) = r.get(metric) {
                    w.write_record([
                        method.name(),
                        "value",
                        &v.to_string(),
                        &r.volume_id,
                        &r.bscan_index.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(labels: &[u8]) -> SegMask {
        // Embed a short label list in the top-left of a minimal 32×32 mask.
        let mut l = vec![0u8; 32 * 32];
        l[..labels.len()].copy_from_slice(labels);
        SegMask::new(32, 32, l).unwrap()
    }

    #[test]
    fn counting_metrics() {
        let gt = mask(&[1, 1, 0, 0]);
        let pred = mask(&[1, 0, 0, 0]);
        assert_eq!(accuracy(&gt, &gt).unwrap(), 1.0);
        assert_eq!(accuracy(&pred, &gt).unwrap(), 1.0 - 1.0 / 1024.0);
        let inv = SegMask::new(32, 32, gt.labels().iter().map(|&l| 1 - l).collect()).unwrap();
        assert_eq!(accuracy(&inv, &gt).unwrap(), 0.0);
        let a = mask(&[1, 1, 1, 1, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(jaccard(&a, &b).unwrap(), 1.0 / 3.0);
        let empty = mask(&[]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&mask(&[1]), &mask(&[0, 1])).unwrap(), 0.0);
    }

    #[test]
    fn auc_cases() {
        let gt = mask(&[1, 0, 1]);
        let mut probs = vec![0.5f32; 1024];
        probs[..3].copy_from_slice(&[0.9, 0.4, 0.6]);
        // Remaining negatives score 0.5: each positive beats them all.
        assert_eq!(auc(&probs, &gt).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.3; 1024], &gt).unwrap(), Some(0.5));
        assert_eq!(auc(&probs, &mask(&[])).unwrap(), None);
    }

    #[test]
    fn ttest_cases() {
        let a = [0.1, 0.5, 0.3, 0.9];
        let r = ttest(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        assert!(ttest(&[0.0; 10], &[1.0; 10]).unwrap().p < 1e-6);
        let b = [0.2, 0.1, 0.15, 0.12, 0.3];
        let (x, y) = (ttest(&a, &b).unwrap(), ttest(&b, &a).unwrap());
        assert_eq!(x.p, y.p);
        assert_eq!(x.t, -y.t);
        assert!(ttest(&[1.0], &b).is_err());
    }

    #[test]
    fn quartiles_linear() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        let b = box_stats(&v).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.75, 4.5, 6.25));
        assert!(b.outliers.is_empty());
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!(b.whisker_high, 4.0);
    }

    fn row(method: Method, i: usize, d: f64) -> MetricRow {
        MetricRow {
            method,
            volume_id: format!("v{}", i % 2),
            bscan_index: i,
            accuracy: 0.9,
            dice: d,
            jaccard: d / (2.0 - d),
            auc: (!i.is_multiple_of(3)).then_some(0.8 + d / 10.0),
        }
    }

    #[test]
    fn missing_group_fails() {
        let rows = vec![
            row(Method::Unprocessed, 0, 0.5),
            row(Method::Unprocessed, 1, 0.6),
        ];
        let err = MetricsReport::build(rows, &[Method::Unprocessed, Method::Cyclegan]).unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
    }

    #[test]
    fn export_round_trip() {
        let rows: Vec<MetricRow> = (0..6)
            .flat_map(|i| {
                [
                    row(Method::Unprocessed, i, 0.3 + i as f64 / 50.0),
                    row(Method::Cyclegan, i, 0.9 - i as f64 / 70.0),
                ]
            })
            .collect();
        let report =
            MetricsReport::build(rows.clone(), &[Method::Unprocessed, Method::Cyclegan]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_report(&report, dir.path()).unwrap();
        assert_eq!(read_rows_csv(dir.path().join("rows.csv")).unwrap(), rows);
        let back: MetricsReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(back, report);
        // Every table cell parses back to the aggregate it came from.
        let table = fs::read_to_string(dir.path().join("table.txt")).unwrap();
        for line in table.lines().skip(1) {
            let mut cells = line.split('\t');
            let method = match cells.next().unwrap() {
                "unprocessed" => Method::Unprocessed,
                _ => Method::Cyclegan,
            };
            for (metric, cell) in MetricKind::ALL.into_iter().zip(cells) {
                let (mean, std) = cell.trim_end_matches(')').split_once(" (").unwrap();
                let s = report.summary(method, metric).unwrap();
                assert_eq!(
                    (mean.parse::<f64>().unwrap(), std.parse::<f64>().unwrap()),
                    (s.mean, s.std)
                );
            }
        }
        assert!(dir.path().join("boxplot_dice.csv").exists());
        let sig = fs::read_to_string(dir.path().join("significance.txt")).unwrap();
        assert!(sig
            .lines()
            .any(|l| l.starts_with("dice") && l.ends_with('*')));
    }
}
