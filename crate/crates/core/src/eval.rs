//! Evaluation metrics over per-question records and comparison reports.
//!
//! Count-based metrics are computed as exact rationals and only converted to
//! floating point at the end. Reported values are kept at full precision in
//! JSON; the text tables round half-up to two decimals.

use std::collections::BTreeMap;
use std::io::BufRead;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::scalar::round_half_up;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0} is undefined on an empty record set")]
    Undefined(&'static str),
    #[error("record `{question_id}`: {message}")]
    InvalidRecord { question_id: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    FactBased,
    Complex,
    CrossDocument,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::FactBased, Category::Complex, Category::CrossDocument];

    pub fn label(self) -> &'static str {
        match self {
            Category::FactBased => "Fact-Based",
            Category::Complex => "Complex",
            Category::CrossDocument => "Cross-Document",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub system: String,
    pub category: Category,
    /// 0 poor, 1 satisfactory, 2 excellent.
    pub human_score: u8,
    pub correct: bool,
    pub latency_s: f64,
    pub has_citation: bool,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<(), EvalError> {
        let invalid = |message: String| EvalError::InvalidRecord { question_id: self.question_id.clone(), message };
        if self.human_score > 2 {
            return Err(invalid(format!("human_score must be 0, 1 or 2, got {}", self.human_score)));
        }
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(invalid(format!("latency_s must be a non-negative number, got {}", self.latency_s)));
        }
        Ok(())
    }
}

fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn fraction<P: Fn(&EvalRecord) -> bool>(records: &[EvalRecord], metric: &'static str, pred: P) -> Result<Ratio<u64>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Undefined(metric));
    }
    let hits = records.iter().filter(|r| pred(r)).count() as u64;
    Ok(Ratio::new(hits, records.len() as u64))
}

pub fn accuracy_exact(records: &[EvalRecord]) -> Result<Ratio<u64>, EvalError> {
    fraction(records, "accuracy", |r| r.correct)
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64, EvalError> {
    accuracy_exact(records).map(ratio_to_f64)
}

pub fn mean_human_score_exact(records: &[EvalRecord]) -> Result<Ratio<u64>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Undefined("mean human score"));
    }
    let total: u64 = records.iter().map(|r| u64::from(r.human_score)).sum();
    Ok(Ratio::new(total, records.len() as u64))
}

pub fn mean_human_score(records: &[EvalRecord]) -> Result<f64, EvalError> {
    mean_human_score_exact(records).map(ratio_to_f64)
}

pub fn avg_response_time(records: &[EvalRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Undefined("average response time"));
    }
    Ok(records.iter().map(|r| r.latency_s).sum::<f64>() / records.len() as f64)
}

/// Percentage of records with a citation.
pub fn citation_rate(records: &[EvalRecord]) -> Result<f64, EvalError> {
    fraction(records, "citation rate", |r| r.has_citation).map(|r| ratio_to_f64(r * 100))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Qualitative {
    pub excellent_pct: f64,
    pub satisfactory_pct: f64,
    pub poor_pct: f64,
}

/// Score distribution over the Complex records in `records`.
pub fn qualitative_breakdown(records: &[EvalRecord]) -> Result<Qualitative, EvalError> {
    let complex: Vec<EvalRecord> = records.iter().filter(|r| r.category == Category::Complex).cloned().collect();
    let pct = |score: u8| fraction(&complex, "qualitative breakdown", |r| r.human_score == score).map(|r| ratio_to_f64(r * 100));
    Ok(Qualitative { excellent_pct: pct(2)?, satisfactory_pct: pct(1)?, poor_pct: pct(0)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryCell {
    pub count: usize,
    pub accuracy: Option<f64>,
    pub avg_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system: String,
    /// Unweighted mean of the defined per-category accuracies.
    pub average_score: Option<f64>,
    /// Unweighted mean of the defined per-category times.
    pub avg_response_time_s: Option<f64>,
    pub citation_rate_pct: Option<f64>,
    pub mean_human_score: Option<f64>,
    pub per_category: BTreeMap<Category, CategoryCell>,
    pub qualitative: Option<Qualitative>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub systems: Vec<SystemReport>,
}

fn system_report(system: &str, records: &[EvalRecord]) -> SystemReport {
    let mut per_category = BTreeMap::new();
    let mut accuracies: Vec<Ratio<u64>> = Vec::new();
    let mut times = Vec::new();
    for category in Category::ALL {
        let subset: Vec<EvalRecord> = records.iter().filter(|r| r.category == category).cloned().collect();
        let exact = accuracy_exact(&subset).ok();
        let time = avg_response_time(&subset).ok();
        accuracies.extend(exact);
        times.extend(time);
        per_category.insert(category, CategoryCell { count: subset.len(), accuracy: exact.map(ratio_to_f64), avg_time_s: time });
    }
    let average_score = (!accuracies.is_empty()).then(|| {
        let n = accuracies.len() as u64;
        ratio_to_f64(accuracies.iter().fold(Ratio::from_integer(0), |acc, a| acc + a) / n)
    });
    let avg_response_time_s = (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64);
    SystemReport {
        system: system.to_string(),
        average_score,
        avg_response_time_s,
        citation_rate_pct: citation_rate(records).ok(),
        mean_human_score: mean_human_score(records).ok(),
        per_category,
        qualitative: qualitative_breakdown(records).ok(),
    }
}

/// One report per system, in order of first appearance. Undefined cells are
/// `None` instead of errors.
pub fn build_report(records: &[EvalRecord]) -> Result<EvalReport, EvalError> {
    for r in records {
        r.validate()?;
    }
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.system.as_str()) {
            order.push(&r.system);
        }
    }
    let systems = order
        .into_iter()
        .map(|system| {
            let subset: Vec<EvalRecord> = records.iter().filter(|r| r.system == system).cloned().collect();
            system_report(system, &subset)
        })
        .collect();
    Ok(EvalReport { systems })
}

/// One record per non-blank line.
pub fn load_records<R: BufRead>(source: R) -> Result<Vec<EvalRecord>, EvalError> {
    let mut records = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord =
            serde_json::from_str(&line).map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

fn cell(value: Option<f64>) -> String {
    value.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", round_half_up(v, 2)))
}

fn table(headers: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..headers.len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).chain([headers[i].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(headers);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for row in rows {
        out.push('\n');
        out.push_str(&line(row));
    }
    out.push('\n');
    out
}

impl EvalReport {
    /// Overall summary, per-category performance and the Complex breakdown.
    pub fn to_text(&self) -> String {
        let s = |x: &str| x.to_string();
        let summary = table(
            &[s("System"), s("Average Score"), s("Avg. Response Time (s)"), s("Citation Rate (%)")],
            &self
                .systems
                .iter()
                .map(|r| vec![r.system.clone(), cell(r.average_score), cell(r.avg_response_time_s), cell(r.citation_rate_pct)])
                .collect::<Vec<_>>(),
        );
        let mut headers = vec![s("System")];
        for c in Category::ALL {
            headers.push(format!("{} Acc.", c.label()));
            headers.push(format!("{} Time (s)", c.label()));
        }
        let by_category = table(
            &headers,
            &self
                .systems
                .iter()
                .map(|r| {
                    let mut row = vec![r.system.clone()];
                    for c in Category::ALL {
                        let cat = r.per_category.get(&c);
                        row.push(cell(cat.and_then(|x| x.accuracy)));
                        row.push(cell(cat.and_then(|x| x.avg_time_s)));
                    }
                    row
                })
                .collect::<Vec<_>>(),
        );
        let qualitative = table(
            &[s("System"), s("Excellent (%)"), s("Satisfactory (%)"), s("Poor (%)")],
            &self
                .systems
                .iter()
                .map(|r| {
                    let q = r.qualitative;
                    vec![
                        r.system.clone(),
                        cell(q.map(|q| q.excellent_pct)),
                        cell(q.map(|q| q.satisfactory_pct)),
                        cell(q.map(|q| q.poor_pct)),
                    ]
                })
                .collect::<Vec<_>>(),
        );
        format!(
            "Summary across all question types\n{summary}\nPerformance by question category\n{by_category}\n\
             Qualitative assessment of complex questions\n{qualitative}"
        )
    }

    pub fn system(&self, name: &str) -> Option<&SystemReport> {
        self.systems.iter().find(|r| r.system == name)
    }
}
