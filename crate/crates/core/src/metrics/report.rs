use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::scores::{aos, exact_match, frame_f1, token_f1};
use super::FrameSpan;
use crate::corpus::Split;
use crate::error::{Error, Result};

/// Default WER bucket edges; the last bucket also takes WER above 1.
pub const DEFAULT_WER_EDGES: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0];

/// One system's answer to one test example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExamplePrediction {
    pub id: String,
    pub frame_span: FrameSpan,
    /// Transcript words the predicted time span reads as.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemPredictions {
    pub system: String,
    pub predictions: Vec<ExamplePrediction>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subset {
    /// Answer recoverable from the transcript.
    Clean,
    /// Answer lost in the transcript; only time-span metrics apply.
    Lost,
    Total,
}

impl Subset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::Clean => "clean",
            Subset::Lost => "lost",
            Subset::Total => "total",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub system: String,
    pub subset: Subset,
    pub count: usize,
    pub em: Option<f64>,
    pub token_f1: Option<f64>,
    pub frame_f1: Option<f64>,
    pub aos: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean frame F1 per system, in report order; `None` for an empty bucket.
    pub frame_f1: Vec<Option<f64>>,
}

impl BucketRow {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub systems: Vec<String>,
    pub subsets: Vec<SubsetRow>,
    pub buckets: Vec<BucketRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn bucket_index(wer: f64, edges: &[f64]) -> Option<usize> {
    let last = edges.len() - 2;
    (0..=last).find(|&k| wer >= edges[k] && (wer < edges[k + 1] || k == last))
}

/// Mean frame F1 per system within half-open WER ranges `[edges[k], edges[k+1])`;
/// the last range is closed above and absorbs any larger WER.
pub fn bucket_by_wer(wers: &[f64], frame_f1s: &[Vec<f64>], edges: &[f64]) -> Result<Vec<BucketRow>> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("wer_bucket_edges", "need at least two strictly increasing edges"));
    }
    if let Some(f) = frame_f1s.iter().find(|f| f.len() != wers.len()) {
        return Err(Error::shape(format!("{} WER values but {} scores", wers.len(), f.len())));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); edges.len() - 1];
    for (i, &w) in wers.iter().enumerate() {
        let k = bucket_index(w, edges).ok_or_else(|| Error::data(format!("WER {w} below the first bucket edge")))?;
        members[k].push(i);
    }
    Ok(members
        .iter()
        .enumerate()
        .map(|(k, idx)| BucketRow {
            lo: edges[k],
            hi: edges[k + 1],
            count: idx.len(),
            frame_f1: frame_f1s
                .iter()
                .map(|f| mean(&idx.iter().map(|&i| f[i]).collect::<Vec<_>>()))
                .collect(),
        })
        .collect())
}

struct Scored {
    em: f64,
    token_f1: f64,
    frame_f1: f64,
    aos: f64,
}

/// Score every system on the clean, lost and pooled subsets of a test split,
/// plus per-WER-bucket frame F1.
pub fn evaluate_run(split: &Split, systems: &[SystemPredictions], edges: &[f64]) -> Result<MetricsReport> {
    let mut per_system: Vec<Vec<Scored>> = Vec::with_capacity(systems.len());
    for sys in systems {
        let by_id: HashMap<&str, &ExamplePrediction> =
            sys.predictions.iter().map(|p| (p.id.as_str(), p)).collect();
        let missing: Vec<&str> = split
            .examples
            .iter()
            .map(|e| e.id.as_str())
            .filter(|id| !by_id.contains_key(id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::data(format!(
                "system {} has no prediction for {} example(s): {}",
                sys.system,
                missing.len(),
                missing.join(", ")
            )));
        }
        let mut scored = Vec::with_capacity(split.examples.len());
        for ex in &split.examples {
            let p = by_id[ex.id.as_str()];
            scored.push(Scored {
                em: exact_match(&p.tokens, &ex.answer_tokens),
                token_f1: token_f1(&p.tokens, &ex.answer_tokens)?,
                frame_f1: frame_f1(&p.frame_span, &ex.answer_frame_span)?,
                aos: aos(&p.frame_span, &ex.answer_frame_span)?,
            });
        }
        per_system.push(scored);
    }

    let mut subsets = Vec::new();
    for (sys, scored) in systems.iter().zip(&per_system) {
        for subset in [Subset::Clean, Subset::Lost, Subset::Total] {
            let idx: Vec<usize> = (0..split.examples.len())
                .filter(|&i| match subset {
                    Subset::Clean => !split.examples[i].lost,
                    Subset::Lost => split.examples[i].lost,
                    Subset::Total => true,
                })
                .collect();
            let pick = |f: fn(&Scored) -> f64| mean(&idx.iter().map(|&i| f(&scored[i])).collect::<Vec<_>>());
            let text = subset == Subset::Clean;
            subsets.push(SubsetRow {
                system: sys.system.clone(),
                subset,
                count: idx.len(),
                em: if text { pick(|s| s.em) } else { None },
                token_f1: if text { pick(|s| s.token_f1) } else { None },
                frame_f1: pick(|s| s.frame_f1),
                aos: pick(|s| s.aos),
            });
        }
    }

    let wers = split
        .examples
        .iter()
        .map(|e| split.passage_of(e).asr().map(|a| a.wer))
        .collect::<Result<Vec<f64>>>()?;
    let f1s: Vec<Vec<f64>> = per_system.iter().map(|s| s.iter().map(|x| x.frame_f1).collect()).collect();
    Ok(MetricsReport {
        systems: systems.iter().map(|s| s.system.clone()).collect(),
        subsets,
        buckets: bucket_by_wer(&wers, &f1s, edges)?,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn range(lo: f64, hi: f64) -> String {
    format!("{:.0}-{:.0}%", lo * 100.0, hi * 100.0)
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "kind,system,group,count,em,token_f1,frame_f1,aos";

    pub fn row(&self, system: &str, subset: Subset) -> Option<&SubsetRow> {
        self.subsets.iter().find(|r| r.system == system && r.subset == subset)
    }

    pub fn system_index(&self, system: &str) -> Option<usize> {
        self.systems.iter().position(|s| s == system)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.subsets {
            out.push_str(&format!(
                "subset,{},{},{},{},{},{},{}\n",
                r.system,
                r.subset.as_str(),
                r.count,
                cell(r.em),
                cell(r.token_f1),
                cell(r.frame_f1),
                cell(r.aos)
            ));
        }
        for b in &self.buckets {
            for (s, f) in self.systems.iter().zip(&b.frame_f1) {
                out.push_str(&format!("bucket,{s},{},{},,,{},\n", range(b.lo, b.hi), b.count, cell(*f)));
            }
        }
        out
    }

    /// Frame F1 against WER bucket midpoint, one column per system.
    pub fn wer_curve_csv(&self) -> String {
        let mut out = String::from("wer_mid,count");
        for s in &self.systems {
            out.push_str(&format!(",{s}_frame_f1"));
        }
        out.push('\n');
        for b in &self.buckets {
            out.push_str(&format!("{:.3},{}", b.midpoint(), b.count));
            for f in &b.frame_f1 {
                out.push(',');
                out.push_str(&cell(*f));
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or_else(|| "    -".to_string(), |x| format!("{:5.1}", 100.0 * x));
        writeln!(f, "{:<10} {:<6} {:>5} {:>6} {:>6} {:>6} {:>6}", "system", "subset", "n", "EM", "F1", "fF1", "AOS")?;
        for r in &self.subsets {
            writeln!(
                f,
                "{:<10} {:<6} {:>5} {:>6} {:>6} {:>6} {:>6}",
                r.system,
                r.subset.as_str(),
                r.count,
                pct(r.em),
                pct(r.token_f1),
                pct(r.frame_f1),
                pct(r.aos)
            )?;
        }
        writeln!(f)?;
        write!(f, "{:<9} {:>5}", "WER", "n")?;
        for s in &self.systems {
            write!(f, " {s:>10}")?;
        }
        writeln!(f)?;
        for b in &self.buckets {
            write!(f, "{:<9} {:>5}", range(b.lo, b.hi), b.count)?;
            for v in &b.frame_f1 {
                write!(f, " {:>10}", pct(*v))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
