//! Zero-shot abnormality scoring, binary metrics and cross-template
//! statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Pooling};
use crate::synth::{Cohort, Polarity};
use crate::tensor;

pub const METRICS: [&str; 6] = ["auc", "acc", "f1", "prec", "spec", "sens"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub anatomy_id: usize,
    pub polarity: Polarity,
    pub template: usize,
    pub embedding: Vec<f64>,
}

/// Encode every template of the cohort's bank with the text branch.
pub fn encode_prompts(params: &ModelParams, cohort: &Cohort, pooling: Pooling) -> Result<Vec<PromptEmbedding>> {
    cohort
        .templates
        .iter()
        .map(|t| {
            Ok(PromptEmbedding {
                anatomy_id: t.anatomy_id,
                polarity: t.polarity,
                template: t.template,
                embedding: params.encode_report(&t.sentences, pooling)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub patient: usize,
    pub anatomy: usize,
    pub score: f64,
    pub label: u8,
}

fn prompt<'a>(prompts: &'a [PromptEmbedding], j: usize, pol: Polarity, t: usize) -> Result<&'a [f64]> {
    prompts
        .iter()
        .find(|p| p.anatomy_id == j && p.polarity == pol && p.template == t)
        .map(|p| p.embedding.as_slice())
        .ok_or_else(|| Error::InvalidArgument(format!("no {pol:?} prompt for anatomy {j}, template {t}")))
}

/// `cos(V, e_abn) - cos(V, e_norm)` for every present (patient, anatomy).
pub fn zero_shot_scores(
    params: &ModelParams,
    cohort: &Cohort,
    prompts: &[PromptEmbedding],
    template: usize,
) -> Result<Vec<EvalScore>> {
    let m = cohort.anatomies();
    let pairs: Vec<(&[f64], &[f64])> = (0..m)
        .map(|j| Ok((prompt(prompts, j, Polarity::Abnormal, template)?, prompt(prompts, j, Polarity::Normal, template)?)))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for p in &cohort.patients {
        for a in &p.anatomies {
            let v = params.aggregate_visual(a.anatomy_id, &a.visual_tokens)?;
            let (abn, norm) = pairs[a.anatomy_id];
            out.push(EvalScore {
                patient: p.patient_id,
                anatomy: a.anatomy_id,
                score: score(&v, abn, norm)?,
                label: a.label,
            });
        }
    }
    Ok(out)
}

pub fn score(v: &[f64], e_abn: &[f64], e_norm: &[f64]) -> Result<f64> {
    Ok(tensor::cosine_similarity(v, e_abn)? - tensor::cosine_similarity(v, e_norm)?)
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// Mann–Whitney AUC: `(concordant + 0.5 * tied) / (pos * neg)`, computed by
/// sorting with average ranks over tie groups.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("AUC needs both positive and negative labels".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept integral: a tie group covering
    // ranks s+1..=e has average rank (s+1+e)/2.
    let mut twice_rank_sum: u128 = 0;
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && scores[idx[e]] == scores[idx[s]] {
            e += 1;
        }
        let p_in_group = idx[s..e].iter().filter(|&&i| labels[i] == 1).count() as u128;
        twice_rank_sum += p_in_group * (s as u128 + 1 + e as u128);
        s = e;
    }
    let (p, n) = (pos as u128, neg as u128);
    // U = R_pos - p(p+1)/2; 2U is an integer.
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Binary metrics with the zero-denominator convention: a metric whose
/// denominator is zero is 0.0 and its name is listed in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub counts: ConfusionCounts,
    pub acc: f64,
    pub f1: f64,
    pub prec: f64,
    pub spec: f64,
    pub sens: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Metrics derived from a confusion matrix. Weighted F1 is the
/// support-weighted mean of the positive- and negative-class F1.
pub fn metrics_from_counts(c: ConfusionCounts) -> BinaryMetrics {
    let mut und = Vec::new();
    let sens = ratio(c.tp, c.tp + c.fn_, "sens", &mut und);
    let spec = ratio(c.tn, c.tn + c.fp, "spec", &mut und);
    let prec = ratio(c.tp, c.tp + c.fp, "prec", &mut und);
    let npv = ratio(c.tn, c.tn + c.fn_, "npv", &mut Vec::new());
    let acc = 0.5 * (sens + spec);
    let (pos, neg) = (c.tp + c.fn_, c.tn + c.fp);
    let f1 = if pos + neg == 0 {
        und.push("f1".into());
        0.0
    } else {
        (pos as f64 * f1_of(prec, sens) + neg as f64 * f1_of(npv, spec)) / (pos + neg) as f64
    };
    if und.iter().any(|u| u == "sens" || u == "spec") {
        und.push("acc".into());
    }
    BinaryMetrics {
        counts: c,
        acc,
        f1,
        prec,
        spec,
        sens,
        undefined: und,
    }
}

/// Predict positive iff `score > threshold`.
pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<BinaryMetrics> {
    check_lengths(scores, labels)?;
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(metrics_from_counts(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Mean and population std of one metric across templates.
pub fn prompt_robustness(values: &[f64]) -> Result<MeanStd> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("prompt robustness needs >= 2 templates".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(MeanStd { mean, std: var.sqrt() })
}

/// Metrics of one (anatomy, template) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
    pub prec: f64,
    pub spec: f64,
    pub sens: f64,
    pub counts: ConfusionCounts,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub undefined: Vec<String>,
}

impl CellMetrics {
    pub fn get(&self, metric: &str) -> f64 {
        match metric {
            "auc" => self.auc,
            "acc" => self.acc,
            "f1" => self.f1,
            "prec" => self.prec,
            "spec" => self.spec,
            "sens" => self.sens,
            _ => panic!("unknown metric `{metric}`"),
        }
    }
}

pub fn cell_metrics(scores: &[f64], labels: &[u8]) -> Result<CellMetrics> {
    let b = confusion_metrics(scores, labels, 0.0)?;
    let mut undefined = b.undefined;
    let auc = match roc_auc(scores, labels) {
        Ok(a) => a,
        Err(Error::Degenerate(_)) => {
            undefined.push("auc".into());
            0.0
        }
        Err(e) => return Err(e),
    };
    Ok(CellMetrics {
        auc,
        acc: b.acc,
        f1: b.f1,
        prec: b.prec,
        spec: b.spec,
        sens: b.sens,
        counts: b.counts,
        undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `per_class[anatomy][template]`.
    pub per_class: BTreeMap<usize, BTreeMap<usize, CellMetrics>>,
    /// Class-macro average of each metric, per template.
    pub per_template: BTreeMap<usize, BTreeMap<String, f64>>,
    /// Macro over classes first, then mean/std across templates.
    pub aggregate: BTreeMap<String, MeanStd>,
    /// Mean/std across templates per class, then averaged over classes.
    pub aggregate_class_first: BTreeMap<String, MeanStd>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,template,metric,value\n");
        for (j, row) in &self.per_class {
            for (t, cell) in row {
                for m in METRICS {
                    let _ = writeln!(s, "{j},{t},{m},{}", cell.get(m));
                }
            }
        }
        s
    }
}

/// Evaluate every template of the cohort's bank.
pub fn evaluate(params: &ModelParams, cohort: &Cohort, pooling: Pooling) -> Result<MetricsReport> {
    let prompts = encode_prompts(params, cohort, pooling)?;
    let nt = cohort.config.n_templates;
    let m = cohort.anatomies();
    let mut per_class: BTreeMap<usize, BTreeMap<usize, CellMetrics>> = BTreeMap::new();
    for t in 0..nt {
        let scores = zero_shot_scores(params, cohort, &prompts, t)?;
        for j in 0..m {
            let (s, l): (Vec<f64>, Vec<u8>) =
                scores.iter().filter(|e| e.anatomy == j).map(|e| (e.score, e.label)).unzip();
            if s.is_empty() {
                continue;
            }
            per_class.entry(j).or_default().insert(t, cell_metrics(&s, &l)?);
        }
    }
    report_from_cells(per_class, nt)
}

pub fn report_from_cells(
    per_class: BTreeMap<usize, BTreeMap<usize, CellMetrics>>,
    n_templates: usize,
) -> Result<MetricsReport> {
    if per_class.is_empty() {
        return Err(Error::InvalidArgument("no class to evaluate".into()));
    }
    let mut per_template = BTreeMap::new();
    for t in 0..n_templates {
        let mut row = BTreeMap::new();
        for m in METRICS {
            let vals: Vec<f64> = per_class.values().map(|r| r[&t].get(m)).collect();
            row.insert(m.to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
        }
        per_template.insert(t, row);
    }
    let mut aggregate = BTreeMap::new();
    let mut class_first = BTreeMap::new();
    for m in METRICS {
        let across: Vec<f64> = per_template.values().map(|r| r[m]).collect();
        aggregate.insert(m.to_string(), prompt_robustness(&across)?);
        let per: Vec<MeanStd> = per_class
            .values()
            .map(|r| prompt_robustness(&r.values().map(|c| c.get(m)).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let k = per.len() as f64;
        class_first.insert(
            m.to_string(),
            MeanStd {
                mean: per.iter().map(|x| x.mean).sum::<f64>() / k,
                std: per.iter().map(|x| x.std).sum::<f64>() / k,
            },
        );
    }
    Ok(MetricsReport {
        per_class,
        per_template,
        aggregate,
        aggregate_class_first: class_first,
    })
}
