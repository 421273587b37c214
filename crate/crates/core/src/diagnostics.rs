//! Embedding-space collapse measurement: pairwise-cosine histograms,
//! intra/inter-anatomy cosine indices and a PCA projection.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Pooling};
use crate::synth::Cohort;
use crate::tensor;

pub const DEFAULT_BINS: usize = 40;
/// Cosine above which a pair counts as collapsed.
pub const COLLAPSE_COSINE: f64 = 0.9;
const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// One embedding with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub patient: usize,
    pub anatomy: usize,
    pub label: u8,
    pub modality: Modality,
    pub vector: Vec<f64>,
}

/// Text embeddings `R` of every present (patient, anatomy) report, in patient
/// then anatomy order.
pub fn text_embeddings(params: &ModelParams, cohort: &Cohort, pooling: Pooling) -> Result<Vec<Embedded>> {
    embed(cohort, Modality::Text, |a| params.encode_report(&a.sentences, pooling))
}

/// Visual embeddings `V` of every present (patient, anatomy) pair.
pub fn image_embeddings(params: &ModelParams, cohort: &Cohort) -> Result<Vec<Embedded>> {
    embed(cohort, Modality::Image, |a| params.aggregate_visual(a.anatomy_id, &a.visual_tokens))
}

fn embed(
    cohort: &Cohort,
    modality: Modality,
    f: impl Fn(&crate::synth::AnatomyRecord) -> Result<Vec<f64>>,
) -> Result<Vec<Embedded>> {
    let mut out = Vec::new();
    for p in &cohort.patients {
        for a in &p.anatomies {
            out.push(Embedded {
                patient: p.patient_id,
                anatomy: a.anatomy_id,
                label: a.label,
                modality,
                vector: f(a)?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub mean: f64,
    pub median: f64,
    pub fraction_above_0_9: f64,
    /// Left and right edge of the most populated bin (lowest on ties).
    pub modal_bin: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    /// `bins + 1` strictly increasing edges from -1 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_pairs: u64,
    pub summary: HistogramSummary,
}

fn bin_edges(bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|k| if k == bins { 1.0 } else { -1.0 + 2.0 * k as f64 / bins as f64 })
        .collect()
}

/// Histogram of a list of cosine values over `[-1, 1]`. A value on an edge
/// goes to the upper bin; the last bin is right-closed.
pub fn histogram_of(cosines: &[f64], bins: usize) -> Result<SimilarityHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs bins >= 1".into()));
    }
    if cosines.is_empty() {
        return Err(Error::InvalidArgument("histogram of zero pairs".into()));
    }
    let edges = bin_edges(bins);
    let mut counts = vec![0u64; bins];
    for &c in cosines {
        if !c.is_finite() {
            return Err(Error::NonFinite("cosine value".into()));
        }
        let c = c.clamp(-1.0, 1.0);
        // partition_point gives the number of edges <= c.
        let k = edges[..bins].partition_point(|&e| e <= c).saturating_sub(1);
        counts[k] += 1;
    }
    let n = cosines.len();
    let mut sorted = cosines.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let modal = (0..bins).fold(0, |best, k| if counts[k] > counts[best] { k } else { best });
    let summary = HistogramSummary {
        mean: cosines.iter().sum::<f64>() / n as f64,
        median,
        fraction_above_0_9: cosines.iter().filter(|&&c| c > COLLAPSE_COSINE).count() as f64 / n as f64,
        modal_bin: [edges[modal], edges[modal + 1]],
    };
    Ok(SimilarityHistogram {
        edges,
        counts,
        n_pairs: n as u64,
        summary,
    })
}

/// Histogram of all `n(n-1)/2` unordered pairwise cosines.
pub fn similarity_histogram(embeddings: &[Vec<f64>], bins: usize) -> Result<SimilarityHistogram> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidArgument("similarity histogram needs >= 2 embeddings".into()));
    }
    let mut cos = Vec::with_capacity(embeddings.len() * (embeddings.len() - 1) / 2);
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            cos.push(tensor::cosine_similarity(&embeddings[i], &embeddings[j])?);
        }
    }
    histogram_of(&cos, bins)
}

/// Cosines of all cross-anatomy pairs, in `(i, j > i)` order.
pub fn inter_anatomy_cosines(items: &[(usize, &[f64])]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            if items[i].0 != items[j].0 {
                out.push(tensor::cosine_similarity(items[i].1, items[j].1)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseIndex {
    /// Mean same-anatomy cosine; `None` when no anatomy has two embeddings.
    pub intra: Option<f64>,
    pub inter: f64,
    /// `intra - inter`.
    pub margin: Option<f64>,
    /// `(1 - inter) / (1 - intra)`; `None` when undefined.
    pub ratio: Option<f64>,
    pub inter_fraction_above_0_9: f64,
    pub n_intra_pairs: u64,
    pub n_inter_pairs: u64,
}

/// Intra/inter-anatomy cosine summary of labelled embeddings.
pub fn collapse_index(items: &[(usize, &[f64])]) -> Result<CollapseIndex> {
    let mut labels: Vec<usize> = items.iter().map(|x| x.0).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::InvalidArgument("collapse index needs >= 2 anatomies".into()));
    }
    let (mut intra, mut inter) = (0.0, 0.0);
    let (mut n_intra, mut n_inter, mut above) = (0u64, 0u64, 0u64);
    for i in 0..items.len() {
        for j in (i + 1)..items.len() {
            let c = tensor::cosine_similarity(items[i].1, items[j].1)?;
            if items[i].0 == items[j].0 {
                intra += c;
                n_intra += 1;
            } else {
                inter += c;
                n_inter += 1;
                if c > COLLAPSE_COSINE {
                    above += 1;
                }
            }
        }
    }
    let inter = inter / n_inter as f64;
    let intra = (n_intra > 0).then(|| intra / n_intra as f64);
    let ratio = intra.and_then(|a| {
        let den = 1.0 - a;
        (den.abs() > 1e-15).then(|| (1.0 - inter) / den)
    });
    Ok(CollapseIndex {
        intra,
        inter,
        margin: intra.map(|a| a - inter),
        ratio,
        inter_fraction_above_0_9: above as f64 / n_inter as f64,
        n_intra_pairs: n_intra,
        n_inter_pairs: n_inter,
    })
}

/// Collapse index of a list of [`Embedded`].
pub fn collapse_of(items: &[Embedded]) -> Result<CollapseIndex> {
    let v: Vec<(usize, &[f64])> = items.iter().map(|e| (e.anatomy, e.vector.as_slice())).collect();
    collapse_index(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// Unit principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues (divisor n), non-increasing.
    pub variances: Vec<f64>,
    /// `variances / total variance`.
    pub explained: Vec<f64>,
    /// Per input point, its coordinates on the components.
    pub coords: Vec<Vec<f64>>,
}

/// Top-`k` principal components by power iteration with deflation on the
/// covariance of the centred points.
pub fn pca(points: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs >= 2 points".into()));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("PCA points differ in dimension".into()));
    }
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("cannot take {k} components in dimension {d}")));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in &centred {
        for a in 0..d {
            for b in a..d {
                cov[a][b] += p[a] * p[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a][b] /= n as f64;
            cov[b][a] = cov[a][b];
        }
    }
    let total: f64 = (0..d).map(|a| cov[a][a]).sum();
    let scale = (0..d).map(|a| cov[a][a]).fold(0.0_f64, f64::max);
    if !(total > 0.0) || scale < 1e-300 {
        return Err(Error::Degenerate("PCA of identical points".into()));
    }

    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for c in 0..k {
        let (vec, val) = power_iteration(&cov, &components, c);
        let val = val.max(0.0);
        // Deflate.
        for a in 0..d {
            for b in 0..d {
                cov[a][b] -= val * vec[a] * vec[b];
            }
        }
        components.push(vec);
        variances.push(val);
    }
    let coords = centred
        .iter()
        .map(|p| components.iter().map(|c| tensor::dot(p, c)).collect())
        .collect();
    Ok(Pca {
        explained: variances.iter().map(|v| v / total).collect(),
        components,
        variances,
        coords,
    })
}

/// Dominant eigenpair of the symmetric PSD matrix `a`. The start vector is a
/// fixed dense vector made orthogonal to the already-found components; the
/// returned vector has its first nonzero loading positive.
fn power_iteration(a: &[Vec<f64>], found: &[Vec<f64>], c: usize) -> (Vec<f64>, f64) {
    let d = a.len();
    let orth = |v: &mut Vec<f64>| {
        for f in found {
            let p = tensor::dot(v, f);
            v.iter_mut().zip(f).for_each(|(x, y)| *x -= p * y);
        }
    };
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * (((i + 3 * c) % 7) as f64)).collect();
    orth(&mut v);
    let mut nv = tensor::norm(&v);
    if nv < 1e-12 {
        // Fall back to the first basis vector not spanned by `found`.
        for e in 0..d {
            v = vec![0.0; d];
            v[e] = 1.0;
            orth(&mut v);
            nv = tensor::norm(&v);
            if nv > 1e-6 {
                break;
            }
        }
    }
    v.iter_mut().for_each(|x| *x /= nv);
    let matvec = |v: &[f64]| -> Vec<f64> { a.iter().map(|row| tensor::dot(row, v)).collect() };
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITER {
        let mut w = matvec(&v);
        orth(&mut w);
        let nw = tensor::norm(&w);
        if nw < 1e-300 {
            lambda = 0.0;
            break;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let diff = v
            .iter()
            .zip(&w)
            .map(|(x, y)| (x - y).abs().min((x + y).abs()))
            .fold(0.0_f64, f64::max);
        v = w;
        lambda = tensor::dot(&v, &matvec(&v));
        if diff < PCA_TOL {
            break;
        }
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    (v, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub modality: Modality,
    pub anatomy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: Vec<ProjectedPoint>,
    pub explained: [f64; 2],
}

/// Project embeddings onto their top two principal components.
pub fn pca_project(items: &[Embedded]) -> Result<Projection2D> {
    if items.len() < 3 {
        return Err(Error::InvalidArgument("projection needs >= 3 embeddings".into()));
    }
    if items[0].vector.len() < 2 {
        return Err(Error::InvalidArgument("projection needs D >= 2".into()));
    }
    let pts: Vec<Vec<f64>> = items.iter().map(|e| e.vector.clone()).collect();
    let p = pca(&pts, 2)?;
    Ok(Projection2D {
        points: items
            .iter()
            .zip(&p.coords)
            .map(|(e, c)| ProjectedPoint {
                x: c[0],
                y: c[1],
                modality: e.modality,
                anatomy: e.anatomy,
            })
            .collect(),
        explained: [p.explained[0], p.explained[1]],
    })
}

pub fn histogram_csv(h: &SimilarityHistogram) -> String {
    let mut s = String::from("bin_left,bin_right,count\n");
    for (k, c) in h.counts.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", h.edges[k], h.edges[k + 1], c);
    }
    s
}

pub fn projection_csv(p: &Projection2D) -> String {
    let mut s = String::from("x,y,modality,anatomy\n");
    for pt in &p.points {
        let _ = writeln!(s, "{},{},{},{}", pt.x, pt.y, pt.modality.as_str(), pt.anatomy);
    }
    s
}

/// Collapse statistics of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub collapse: CollapseIndex,
    /// Cross-anatomy pairs only.
    pub inter_histogram: HistogramSummary,
    pub all_pairs_histogram: HistogramSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub text: ModalitySummary,
    pub image: ModalitySummary,
    pub projection_explained: [f64; 2],
}

/// Everything `diagnose` writes, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub text_histogram: SimilarityHistogram,
    pub image_histogram: SimilarityHistogram,
    pub text_inter_histogram: SimilarityHistogram,
    pub image_inter_histogram: SimilarityHistogram,
    pub projection: Projection2D,
    pub summary: DiagnosticsSummary,
}

pub fn diagnose(params: &ModelParams, cohort: &Cohort, pooling: Pooling, bins: usize) -> Result<DiagnosticsReport> {
    let text = text_embeddings(params, cohort, pooling)?;
    let image = image_embeddings(params, cohort)?;
    let modality = |items: &[Embedded]| -> Result<(SimilarityHistogram, SimilarityHistogram, ModalitySummary)> {
        let vecs: Vec<Vec<f64>> = items.iter().map(|e| e.vector.clone()).collect();
        let all = similarity_histogram(&vecs, bins)?;
        let labelled: Vec<(usize, &[f64])> = items.iter().map(|e| (e.anatomy, e.vector.as_slice())).collect();
        let inter = histogram_of(&inter_anatomy_cosines(&labelled)?, bins)?;
        let summary = ModalitySummary {
            collapse: collapse_index(&labelled)?,
            inter_histogram: inter.summary.clone(),
            all_pairs_histogram: all.summary.clone(),
        };
        Ok((all, inter, summary))
    };
    let (th, tih, ts) = modality(&text)?;
    let (ih, iih, is) = modality(&image)?;
    let mut both = image;
    both.extend(text);
    let projection = pca_project(&both)?;
    Ok(DiagnosticsReport {
        summary: DiagnosticsSummary {
            text: ts,
            image: is,
            projection_explained: projection.explained,
        },
        text_histogram: th,
        image_histogram: ih,
        text_inter_histogram: tih,
        image_inter_histogram: iih,
        projection,
    })
}

/// Write the report files into `dir`; returns the paths written.
pub fn write_report(r: &DiagnosticsReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let files = [
        ("text_histogram.csv", histogram_csv(&r.text_histogram)),
        ("image_histogram.csv", histogram_csv(&r.image_histogram)),
        ("text_inter_histogram.csv", histogram_csv(&r.text_inter_histogram)),
        ("image_inter_histogram.csv", histogram_csv(&r.image_inter_histogram)),
        ("projection.csv", projection_csv(&r.projection)),
        ("collapse.json", serde_json::to_string_pretty(&r.summary)? + "\n"),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        crate::io::write_atomic(&p, body.as_bytes())?;
        out.push(p);
    }
    Ok(out)
}
