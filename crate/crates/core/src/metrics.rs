//! Scoring and method-comparison analysis.
//!
//! Decisions are per (target, label): a label is predicted when its
//! probability exceeds the threshold, independently of the other labels.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl LabelCounts {
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_label: Vec<LabelCounts>,
    pub target_count: usize,
}

impl MetricsReport {
    pub fn totals(&self) -> LabelCounts {
        self.per_label
            .iter()
            .fold(LabelCounts::default(), |acc, c| LabelCounts {
                tp: acc.tp + c.tp,
                fp: acc.fp + c.fp,
                fn_: acc.fn_ + c.fn_,
            })
    }
}

/// Thresholds probabilities into per-label decisions.
pub fn decide<T: Scalar>(probabilities: &[T], threshold: f64) -> Vec<bool> {
    let threshold = T::lit(threshold);
    probabilities.iter().map(|&p| p > threshold).collect()
}

/// Micro-averaged scores from aligned decision and gold indicator rows.
pub fn score_decisions(predicted: &[Vec<bool>], golds: &[Vec<bool>]) -> Result<MetricsReport> {
    if predicted.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold targets",
            predicted.len(),
            golds.len()
        )));
    }
    let labels = golds.first().or(predicted.first()).map_or(0, Vec::len);
    let mut per_label = vec![LabelCounts::default(); labels];
    for (pred, gold) in predicted.iter().zip(golds) {
        if pred.len() != labels || gold.len() != labels {
            return Err(Error::Shape("label count differs between targets".into()));
        }
        for (counts, (&p, &g)) in per_label.iter_mut().zip(pred.iter().zip(gold)) {
            match (p, g) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let mut report = MetricsReport {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        per_label,
        target_count: golds.len(),
    };
    let totals = report.totals();
    report.precision = totals.precision();
    report.recall = totals.recall();
    report.f1 = f1_from(report.precision, report.recall);
    Ok(report)
}

pub fn score<T: Scalar>(
    probabilities: &[Vec<T>],
    golds: &[Vec<bool>],
    threshold: f64,
) -> Result<MetricsReport> {
    let predicted: Vec<Vec<bool>> = probabilities.iter().map(|p| decide(p, threshold)).collect();
    score_decisions(&predicted, golds)
}

/// Metrics CSV: a `_micro` summary row followed by one row per label.
pub fn write_metrics<W: Write>(writer: W, labels: &[String], report: &MetricsReport) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        "label",
        "tp",
        "fp",
        "fn",
        "precision",
        "recall",
        "f1",
        "support",
    ])?;
    let totals = report.totals();
    csv.write_record([
        "_micro".to_string(),
        totals.tp.to_string(),
        totals.fp.to_string(),
        totals.fn_.to_string(),
        report.precision.to_string(),
        report.recall.to_string(),
        report.f1.to_string(),
        report.target_count.to_string(),
    ])?;
    for (label, c) in labels.iter().zip(&report.per_label) {
        csv.write_record([
            label.clone(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.precision().to_string(),
            c.recall().to_string(),
            f1_from(c.precision(), c.recall()).to_string(),
            c.support().to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Decisions of one trained run over an evaluation set.
#[derive(Clone, Debug, PartialEq)]
pub struct RunDecisions {
    pub labels: Vec<String>,
    pub golds: Vec<Vec<bool>>,
    pub predicted: Vec<Vec<bool>>,
}

/// Per-target, per-label predictions CSV (`target,label,gold,predicted,probability`).
pub fn write_predictions<W: Write, T: Scalar>(
    writer: W,
    labels: &[String],
    golds: &[Vec<bool>],
    probabilities: &[Vec<T>],
    threshold: f64,
) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["target", "label", "gold", "predicted", "probability"])?;
    for (t, (gold, probs)) in golds.iter().zip(probabilities).enumerate() {
        let decided = decide(probs, threshold);
        for (l, label) in labels.iter().enumerate() {
            csv.write_record([
                t.to_string(),
                label.clone(),
                u8::from(gold[l]).to_string(),
                u8::from(decided[l]).to_string(),
                probs[l].to_f64_lossy().to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(reader: R) -> Result<RunDecisions> {
    let mut csv = csv::Reader::from_reader(reader);
    let mut labels: Vec<String> = Vec::new();
    let mut rows: BTreeMap<usize, BTreeMap<String, (bool, bool)>> = BTreeMap::new();
    for record in csv.records() {
        let record = record?;
        let field = |i: usize| {
            record
                .get(i)
                .ok_or_else(|| Error::Data("short predictions row".into()))
        };
        let target: usize = field(0)?
            .parse()
            .map_err(|_| Error::Data(format!("bad target index {:?}", field(0))))?;
        let label = field(1)?.to_string();
        let flag = |s: &str| match s {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(Error::Data(format!("bad decision flag {other:?}"))),
        };
        let (gold, pred) = (flag(field(2)?)?, flag(field(3)?)?);
        if !labels.contains(&label) {
            labels.push(label.clone());
        }
        rows.entry(target).or_default().insert(label, (gold, pred));
    }
    let mut golds = Vec::with_capacity(rows.len());
    let mut predicted = Vec::with_capacity(rows.len());
    for (target, by_label) in rows {
        let mut g = Vec::with_capacity(labels.len());
        let mut p = Vec::with_capacity(labels.len());
        for label in &labels {
            let &(gold, pred) = by_label.get(label).ok_or_else(|| {
                Error::Data(format!("target {target} has no row for label {label:?}"))
            })?;
            g.push(gold);
            p.push(pred);
        }
        golds.push(g);
        predicted.push(p);
    }
    Ok(RunDecisions {
        labels,
        golds,
        predicted,
    })
}

/// How a group of runs is pooled into one recall per label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupPooling {
    /// Recalled instances summed over runs / (runs x gold count).
    MeanRecall,
    /// An instance counts as recalled when any run in the group recalls it.
    Union,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupDelta {
    pub label: String,
    /// `recall(A) - recall(B)` in percentage points.
    pub delta: f64,
    pub recall_a: f64,
    pub recall_b: f64,
    pub support: usize,
}

fn group_recall(runs: &[RunDecisions], label: usize, pooling: GroupPooling) -> f64 {
    let golds = &runs[0].golds;
    let support = golds.iter().filter(|g| g[label]).count();
    if support == 0 {
        return 0.0;
    }
    match pooling {
        GroupPooling::MeanRecall => {
            let hits: usize = runs
                .iter()
                .map(|r| {
                    r.golds
                        .iter()
                        .zip(&r.predicted)
                        .filter(|(g, p)| g[label] && p[label])
                        .count()
                })
                .sum();
            hits as f64 / (runs.len() * support) as f64
        }
        GroupPooling::Union => {
            let hits = (0..golds.len())
                .filter(|&t| golds[t][label] && runs.iter().any(|r| r.predicted[t][label]))
                .count();
            hits as f64 / support as f64
        }
    }
}

/// Per-label recall difference between two groups of runs over the same
/// gold set, largest first. Labels with fewer than `min_support` gold
/// instances are dropped.
pub fn group_delta_recall(
    group_a: &[RunDecisions],
    group_b: &[RunDecisions],
    min_support: usize,
    pooling: GroupPooling,
) -> Result<Vec<GroupDelta>> {
    let reference = group_a
        .first()
        .or(group_b.first())
        .ok_or_else(|| Error::Data("both groups are empty".into()))?;
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::Data("each group needs at least one run".into()));
    }
    for run in group_a.iter().chain(group_b) {
        if run.labels != reference.labels || run.golds != reference.golds {
            return Err(Error::Data("gold sets differ across runs".into()));
        }
        if run.predicted.len() != run.golds.len()
            || run.predicted.iter().any(|p| p.len() != run.labels.len())
        {
            return Err(Error::Shape("predictions not aligned with golds".into()));
        }
    }
    let mut deltas = Vec::new();
    for (l, label) in reference.labels.iter().enumerate() {
        let support = reference.golds.iter().filter(|g| g[l]).count();
        if support < min_support || support == 0 {
            continue;
        }
        let recall_a = group_recall(group_a, l, pooling);
        let recall_b = group_recall(group_b, l, pooling);
        deltas.push(GroupDelta {
            label: label.clone(),
            delta: 100.0 * (recall_a - recall_b),
            recall_a,
            recall_b,
            support,
        });
    }
    deltas.sort_by(|x, y| {
        y.delta
            .total_cmp(&x.delta)
            .then_with(|| x.label.cmp(&y.label))
    });
    Ok(deltas)
}

pub fn write_group_deltas<W: Write>(writer: W, deltas: &[GroupDelta]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["label", "delta_recall", "recall_a", "recall_b", "support"])?;
    for d in deltas {
        csv.write_record([
            d.label.clone(),
            d.delta.to_string(),
            d.recall_a.to_string(),
            d.recall_b.to_string(),
            d.support.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// One cell of the method x encoder results grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub encoder: String,
    pub method: String,
    pub score: f64,
}

/// Grid with rows = methods and columns = encoders, in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub methods: Vec<String>,
    pub encoders: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
    pub row_max: Vec<Option<f64>>,
    pub col_max: Vec<Option<f64>>,
}

fn max_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values
        .flatten()
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

pub fn build_grid(cells: &[GridCell]) -> Result<Grid> {
    if cells.is_empty() {
        return Err(Error::Data("results grid needs at least one cell".into()));
    }
    let mut methods: Vec<String> = Vec::new();
    let mut encoders: Vec<String> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method.clone());
        }
        if !encoders.contains(&c.encoder) {
            encoders.push(c.encoder.clone());
        }
    }
    let mut grid = vec![vec![None; encoders.len()]; methods.len()];
    for c in cells {
        let r = methods
            .iter()
            .position(|m| *m == c.method)
            .expect("method indexed");
        let col = encoders
            .iter()
            .position(|e| *e == c.encoder)
            .expect("encoder indexed");
        grid[r][col] = Some(c.score);
    }
    let row_max = grid.iter().map(|row| max_of(row.iter().copied())).collect();
    let col_max = (0..encoders.len())
        .map(|col| max_of(grid.iter().map(|row| row[col])))
        .collect();
    Ok(Grid {
        methods,
        encoders,
        cells: grid,
        row_max,
        col_max,
    })
}

/// Grid CSV: header of encoder ids plus `row_max`, one row per method,
/// and a trailing `col_max` row. Missing cells are empty.
pub fn write_grid<W: Write>(writer: W, grid: &Grid) -> Result<()> {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec!["method".to_string()];
    header.extend(grid.encoders.iter().cloned());
    header.push("row_max".into());
    csv.write_record(&header)?;
    for (r, method) in grid.methods.iter().enumerate() {
        let mut row = vec![method.clone()];
        row.extend(grid.cells[r].iter().map(|&v| fmt(v)));
        row.push(fmt(grid.row_max[r]));
        csv.write_record(&row)?;
    }
    let mut last = vec!["col_max".to_string()];
    last.extend(grid.col_max.iter().map(|&v| fmt(v)));
    last.push(String::new());
    csv.write_record(&last)?;
    csv.flush()?;
    Ok(())
}

/// Reads `encoder,method,score` rows.
pub fn read_grid_cells<R: Read>(reader: R) -> Result<Vec<GridCell>> {
    let mut csv = csv::Reader::from_reader(reader);
    let mut cells = Vec::new();
    for record in csv.records() {
        let record = record?;
        if record.len() < 3 {
            return Err(Error::Data(
                "grid cell rows need encoder,method,score".into(),
            ));
        }
        let score = record[2]
            .parse::<f64>()
            .map_err(|_| Error::Data(format!("bad score {:?}", &record[2])))?;
        cells.push(GridCell {
            encoder: record[0].to_string(),
            method: record[1].to_string(),
            score,
        });
    }
    Ok(cells)
}
