//! Synthetic cohorts: per-anatomy visual token sequences, sentence-feature
//! reports and abnormality labels, with prompt-template banks. Text
//! prototypes of different anatomies can be placed at a small angle so that
//! report embeddings start out collapsed.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tags, Rng};
use crate::tensor::{self, Matrix};

pub const COHORT_VERSION: u32 = 1;
const COHORT_FORMAT: &str = "xanat-cohort";

/// Abnormal rate, either shared by all anatomies or listed per anatomy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rate {
    Uniform(f64),
    PerAnatomy(Vec<f64>),
}

impl Rate {
    pub fn for_anatomy(&self, j: usize) -> f64 {
        match self {
            Rate::Uniform(r) => *r,
            Rate::PerAnatomy(v) => v[j],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub anatomies: usize,
    pub dim: usize,
    pub n_patients: usize,
    pub tokens_per_anatomy: usize,
    /// Distinct normal sentences per anatomy.
    pub sentences_normal: usize,
    /// Distinct finding sentences per anatomy.
    pub sentences_abnormal: usize,
    /// Sentences in every report.
    pub sentences_per_report: usize,
    pub abnormal_rate: Rate,
    /// Probability that a patient lacks a given anatomy.
    pub missing_rate: f64,
    pub text_separation_deg: f64,
    pub vis_separation_deg: f64,
    /// Visual offset of abnormal anatomies along their pathology direction.
    pub pathology_offset_scale: f64,
    /// Text offset of finding sentences along the anatomy's finding direction.
    pub finding_offset_scale: f64,
    /// Std of the per-anatomy severity jitter along the pathology direction,
    /// in units of `pathology_offset_scale`; blurs normal against abnormal
    /// without blurring anatomy identity.
    pub pathology_noise_scale: f64,
    /// Per-coordinate std of visual token noise.
    pub noise_scale: f64,
    /// Per-coordinate std of the perturbation giving each bank sentence its
    /// own feature vector.
    pub text_noise_scale: f64,
    pub n_templates: usize,
    pub template_noise_scale: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            anatomies: 4,
            dim: 32,
            n_patients: 256,
            tokens_per_anatomy: 8,
            sentences_normal: 1,
            sentences_abnormal: 1,
            sentences_per_report: 4,
            abnormal_rate: Rate::Uniform(0.3),
            missing_rate: 0.5,
            text_separation_deg: 5.0,
            vis_separation_deg: 60.0,
            pathology_offset_scale: 0.2,
            pathology_noise_scale: 1.4,
            finding_offset_scale: 0.3,
            noise_scale: 0.05,
            text_noise_scale: 0.02,
            n_templates: 5,
            template_noise_scale: 0.03,
            seed: 1,
        }
    }
}

fn bad(msg: String) -> Error {
    Error::Config(msg)
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("anatomies", self.anatomies),
            ("dim", self.dim),
            ("n_patients", self.n_patients),
            ("tokens_per_anatomy", self.tokens_per_anatomy),
            ("sentences_normal", self.sentences_normal),
            ("sentences_abnormal", self.sentences_abnormal),
            ("sentences_per_report", self.sentences_per_report),
            ("n_templates", self.n_templates),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(bad(format!("{name} must be >= 1")));
            }
        }
        if self.dim < self.anatomies {
            return Err(bad(format!(
                "dim {} < anatomies {}: cannot place the anatomy prototypes",
                self.dim, self.anatomies
            )));
        }
        for (name, a) in [
            ("text_separation_deg", self.text_separation_deg),
            ("vis_separation_deg", self.vis_separation_deg),
        ] {
            if !(a > 0.0 && a <= 90.0) {
                return Err(bad(format!("{name} must lie in (0, 90], got {a}")));
            }
        }
        match &self.abnormal_rate {
            Rate::Uniform(r) => check_rate("abnormal_rate", *r)?,
            Rate::PerAnatomy(v) => {
                if v.len() != self.anatomies {
                    return Err(bad(format!(
                        "abnormal_rate lists {} values for {} anatomies",
                        v.len(),
                        self.anatomies
                    )));
                }
                for &r in v {
                    check_rate("abnormal_rate", r)?;
                }
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(bad(format!("missing_rate must lie in [0, 1), got {}", self.missing_rate)));
        }
        for (name, s) in [
            ("pathology_offset_scale", self.pathology_offset_scale),
            ("finding_offset_scale", self.finding_offset_scale),
            ("pathology_noise_scale", self.pathology_noise_scale),
            ("noise_scale", self.noise_scale),
            ("text_noise_scale", self.text_noise_scale),
            ("template_noise_scale", self.template_noise_scale),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(bad(format!("{name} must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

fn check_rate(name: &str, r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(bad(format!("{name} must lie in [0, 1], got {r}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyRecord {
    pub anatomy_id: usize,
    /// `T x D`.
    pub visual_tokens: Matrix,
    pub sentences: Vec<Vec<f64>>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: usize,
    /// Present anatomies only, ascending by id.
    pub anatomies: Vec<AnatomyRecord>,
}

impl Patient {
    pub fn anatomy(&self, j: usize) -> Option<&AnatomyRecord> {
        self.anatomies.iter().find(|a| a.anatomy_id == j)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub anatomy_id: usize,
    pub polarity: Polarity,
    pub template: usize,
    pub sentences: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub text: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
    /// Text direction of finding sentences, per anatomy.
    pub finding: Vec<Vec<f64>>,
    /// Visual direction of the pathology offset, per anatomy.
    pub pathology: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub config: CohortConfig,
    pub patients: Vec<Patient>,
    pub templates: Vec<Template>,
    pub prototypes: Prototypes,
}

impl Cohort {
    pub fn anatomies(&self) -> usize {
        self.config.anatomies
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn template(&self, j: usize, polarity: Polarity, t: usize) -> Option<&Template> {
        self.templates
            .iter()
            .find(|x| x.anatomy_id == j && x.polarity == polarity && x.template == t)
    }
}

/// Random orthonormal basis of R^d (rows), by twice-applied Gram–Schmidt on
/// Gaussian vectors.
fn random_orthonormal(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = tensor::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
            }
        }
        let n = tensor::norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// `m` unit vectors with every pairwise angle equal to `deg`, expressed in
/// the given orthonormal basis rows. Coordinates come from the Cholesky
/// factor of the Gram matrix `(1-c) I + c 11^T`.
fn equiangular(m: usize, deg: f64, basis: &[&[f64]]) -> Vec<Vec<f64>> {
    let c = deg.to_radians().cos();
    let mut l = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..=i {
            let g = if i == j { 1.0 } else { c };
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j {
                (g - s).max(0.0).sqrt()
            } else {
                (g - s) / l[j][j]
            };
        }
    }
    let d = basis[0].len();
    l.iter()
        .map(|coef| {
            let mut v = vec![0.0; d];
            for (k, &a) in coef.iter().enumerate() {
                if a != 0.0 {
                    v.iter_mut().zip(basis[k]).for_each(|(x, b)| *x += a * b);
                }
            }
            v
        })
        .collect()
}

fn add_noise(v: &[f64], scale: f64, rng: &mut Rng) -> Vec<f64> {
    v.iter().map(|&x| x + scale * rng.normal()).collect()
}

fn offset(base: &[f64], dir: &[f64], s: f64) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, d)| b + s * d).collect()
}

/// Generate a cohort. The output is a pure function of `cfg`.
///
/// One orthonormal basis is drawn and split into four blocks of `M` rows
/// (taken cyclically when `D < 4M`): text prototypes, text finding
/// directions, visual prototypes, visual pathology directions. Text and
/// visual prototypes are equiangular at their configured angles inside their
/// blocks.
pub fn generate_cohort(cfg: &CohortConfig) -> Result<Cohort> {
    cfg.validate()?;
    let (m, d) = (cfg.anatomies, cfg.dim);
    let mut rng = Rng::stream(cfg.seed, &[tags::COHORT]);
    let basis = random_orthonormal(d, &mut rng);
    let block = |b: usize| -> Vec<&[f64]> { (0..m).map(|k| basis[(b * m + k) % d].as_slice()).collect() };
    let text = equiangular(m, cfg.text_separation_deg, &block(0));
    let finding: Vec<Vec<f64>> = block(1).into_iter().map(<[f64]>::to_vec).collect();
    let visual = equiangular(m, cfg.vis_separation_deg, &block(2));
    let pathology: Vec<Vec<f64>> = block(3).into_iter().map(<[f64]>::to_vec).collect();

    // Sentence banks, per anatomy.
    let mut normal_bank = Vec::with_capacity(m);
    let mut finding_bank = Vec::with_capacity(m);
    for j in 0..m {
        normal_bank.push(
            (0..cfg.sentences_normal)
                .map(|_| add_noise(&text[j], cfg.text_noise_scale, &mut rng))
                .collect::<Vec<_>>(),
        );
        let abn = offset(&text[j], &finding[j], cfg.finding_offset_scale);
        finding_bank.push(
            (0..cfg.sentences_abnormal)
                .map(|_| add_noise(&abn, cfg.text_noise_scale, &mut rng))
                .collect::<Vec<_>>(),
        );
    }

    let t = cfg.tokens_per_anatomy;
    let l = cfg.sentences_per_report;
    let mut patients = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let mut present: Vec<bool> = (0..m).map(|_| !rng.bernoulli(cfg.missing_rate)).collect();
        if !present.iter().any(|&p| p) {
            present[rng.below(m)] = true;
        }
        let mut anatomies = Vec::new();
        for (j, &here) in present.iter().enumerate() {
            let label = u8::from(rng.bernoulli(cfg.abnormal_rate.for_anatomy(j)));
            if !here {
                continue;
            }
            let severity = f64::from(label) + cfg.pathology_noise_scale * rng.normal();
            let centre = offset(&visual[j], &pathology[j], severity * cfg.pathology_offset_scale);
            let mut data = Vec::with_capacity(t * d);
            for _ in 0..t {
                data.extend(add_noise(&centre, cfg.noise_scale, &mut rng));
            }
            let mut sentences: Vec<Vec<f64>> = (0..l)
                .map(|_| normal_bank[j][rng.below(cfg.sentences_normal)].clone())
                .collect();
            if label == 1 {
                let pos = rng.below(l);
                sentences[pos] = finding_bank[j][rng.below(cfg.sentences_abnormal)].clone();
            }
            anatomies.push(AnatomyRecord {
                anatomy_id: j,
                visual_tokens: Matrix::from_vec(t, d, data)?,
                sentences,
                label,
            });
        }
        patients.push(Patient {
            patient_id: i,
            anatomies,
        });
    }

    let mut templates = Vec::with_capacity(m * 2 * cfg.n_templates);
    for j in 0..m {
        for polarity in [Polarity::Normal, Polarity::Abnormal] {
            let base = match polarity {
                Polarity::Normal => text[j].clone(),
                Polarity::Abnormal => offset(&text[j], &finding[j], cfg.finding_offset_scale),
            };
            for k in 0..cfg.n_templates {
                templates.push(Template {
                    anatomy_id: j,
                    polarity,
                    template: k,
                    sentences: vec![add_noise(&base, cfg.template_noise_scale, &mut rng)],
                });
            }
        }
    }

    Ok(Cohort {
        config: cfg.clone(),
        patients,
        templates,
        prototypes: Prototypes {
            text,
            visual,
            finding,
            pathology,
        },
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: CohortConfig,
    checksum: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    templates: Vec<Template>,
    prototypes: Prototypes,
}

fn body_lines(c: &Cohort) -> Result<Vec<String>> {
    let mut lines = Vec::with_capacity(c.patients.len() + 1);
    for p in &c.patients {
        lines.push(serde_json::to_string(p)?);
    }
    lines.push(serde_json::to_string(&Trailer {
        templates: c.templates.clone(),
        prototypes: c.prototypes.clone(),
    })?);
    Ok(lines)
}

fn checksum(lines: &[String]) -> String {
    let mut buf = String::new();
    for l in lines {
        buf.push_str(l);
        buf.push('\n');
    }
    crate::io::sha256_hex(buf.as_bytes())
}

/// Serialize a cohort to JSON Lines.
///
/// Line 1 is `{format, version, config, checksum}`; then one line per
/// patient; the last line holds the template bank and prototypes. The
/// checksum is the SHA-256 of every line after the header, each terminated by
/// `\n`. Floats are written in shortest round-trip form.
pub fn cohort_to_string(c: &Cohort) -> Result<String> {
    let lines = body_lines(c)?;
    let header = Header {
        format: COHORT_FORMAT.into(),
        version: COHORT_VERSION,
        config: c.config.clone(),
        checksum: checksum(&lines),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for l in &lines {
        out.push_str(l);
        out.push('\n');
    }
    Ok(out)
}

/// SHA-256 body checksum recorded in the header.
pub fn cohort_checksum(c: &Cohort) -> Result<String> {
    Ok(checksum(&body_lines(c)?))
}

pub fn write_cohort(c: &Cohort, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, cohort_to_string(c)?.as_bytes())
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, no: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: no,
        msg: e.to_string(),
    })
}

pub fn read_cohort(path: &Path) -> Result<Cohort> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(f).lines() {
        lines.push(line.map_err(|e| Error::io(path, e))?);
    }
    cohort_from_lines(&lines)
}

pub fn cohort_from_str(text: &str) -> Result<Cohort> {
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    cohort_from_lines(&lines)
}

fn cohort_from_lines(lines: &[String]) -> Result<Cohort> {
    let first = lines.first().ok_or(Error::Parse {
        line: 1,
        msg: "empty cohort file".into(),
    })?;
    let header: serde_json::Value = parse_line(first, 1)?;
    if header.get("format").and_then(|f| f.as_str()) != Some(COHORT_FORMAT) {
        return Err(Error::Parse {
            line: 1,
            msg: "not a cohort file".into(),
        });
    }
    let version = header.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != COHORT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: COHORT_VERSION,
        });
    }
    let header: Header = parse_line(first, 1)?;
    header.config.validate().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let n = header.config.n_patients;
    let expected_lines = n + 2;
    let mut patients = Vec::with_capacity(n);
    for (k, line) in lines.iter().enumerate().skip(1).take(n) {
        let p: Patient = parse_line(line, k + 1)?;
        if p.patient_id != k - 1 {
            return Err(Error::Parse {
                line: k + 1,
                msg: format!("expected patient {}, found {}", k - 1, p.patient_id),
            });
        }
        patients.push(p);
    }
    if lines.len() < expected_lines {
        return Err(Error::Parse {
            line: lines.len() + 1,
            msg: format!(
                "file ends after {} lines; {n} patients need {expected_lines}",
                lines.len()
            ),
        });
    }
    let trailer: Trailer = parse_line(&lines[n + 1], n + 2)?;
    if let Some(extra) = lines[expected_lines..].iter().position(|l| !l.trim().is_empty()) {
        return Err(Error::Parse {
            line: expected_lines + extra + 1,
            msg: "unexpected content after the template bank".into(),
        });
    }
    let found = checksum(&lines[1..expected_lines]);
    if found != header.checksum {
        return Err(Error::Checksum {
            expected: header.checksum,
            found,
        });
    }
    let cohort = Cohort {
        config: header.config,
        patients,
        templates: trailer.templates,
        prototypes: trailer.prototypes,
    };
    check_shapes(&cohort)?;
    Ok(cohort)
}

fn check_shapes(c: &Cohort) -> Result<()> {
    let (m, d, t) = (c.config.anatomies, c.config.dim, c.config.tokens_per_anatomy);
    let err = |line: usize, msg: String| Error::Parse { line, msg };
    for (k, p) in c.patients.iter().enumerate() {
        let mut last = None;
        for a in &p.anatomies {
            if a.anatomy_id >= m || last.is_some_and(|l| a.anatomy_id <= l) {
                return Err(err(k + 2, format!("bad anatomy id {}", a.anatomy_id)));
            }
            last = Some(a.anatomy_id);
            if a.visual_tokens.shape() != (t, d) {
                return Err(err(k + 2, format!("visual tokens {:?}, expected ({t}, {d})", a.visual_tokens.shape())));
            }
            if a.sentences.is_empty() || a.sentences.iter().any(|s| s.len() != d) {
                return Err(err(k + 2, "malformed sentence features".into()));
            }
            if a.label > 1 {
                return Err(err(k + 2, format!("label {} is not 0/1", a.label)));
            }
        }
    }
    let tl = c.patients.len() + 2;
    for j in 0..m {
        for pol in [Polarity::Normal, Polarity::Abnormal] {
            for k in 0..c.config.n_templates {
                let tpl = c
                    .template(j, pol, k)
                    .ok_or_else(|| err(tl, format!("missing template ({j}, {pol:?}, {k})")))?;
                if tpl.sentences.is_empty() || tpl.sentences.iter().any(|s| s.len() != d) {
                    return Err(err(tl, "malformed template features".into()));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CohortConfig {
        CohortConfig {
            n_patients: 12,
            dim: 16,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        assert_eq!(cohort_to_string(&a).unwrap(), cohort_to_string(&b).unwrap());
        let mut other = small();
        other.seed = 2;
        assert_ne!(a, generate_cohort(&other).unwrap());
    }

    #[test]
    fn orthogonal_text_prototypes() {
        let cfg = CohortConfig {
            text_separation_deg: 90.0,
            noise_scale: 0.0,
            text_noise_scale: 0.0,
            ..small()
        };
        let c = generate_cohort(&cfg).unwrap();
        let p = &c.prototypes.text;
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..p.len() {
            for j in (i + 1)..p.len() {
                total += tensor::cosine_similarity(&p[i], &p[j]).unwrap();
                n += 1;
            }
        }
        assert!((total / n as f64).abs() < 1e-12);
    }

    #[test]
    fn noiseless_normal_tokens_equal_prototype() {
        let cfg = CohortConfig {
            noise_scale: 0.0,
            pathology_noise_scale: 0.0,
            abnormal_rate: Rate::Uniform(0.0),
            ..small()
        };
        let c = generate_cohort(&cfg).unwrap();
        for p in &c.patients {
            for a in &p.anatomies {
                for row in a.visual_tokens.iter_rows() {
                    assert_eq!(row, c.prototypes.visual[a.anatomy_id].as_slice());
                }
            }
        }
    }

    #[test]
    fn prototype_angles_are_exact() {
        for (tdeg, vdeg) in [(5.0, 60.0), (30.0, 90.0), (1.0, 45.0)] {
            let cfg = CohortConfig {
                text_separation_deg: tdeg,
                vis_separation_deg: vdeg,
                ..small()
            };
            let c = generate_cohort(&cfg).unwrap();
            for (protos, deg) in [(&c.prototypes.text, tdeg), (&c.prototypes.visual, vdeg)] {
                for i in 0..protos.len() {
                    assert!((tensor::norm(&protos[i]) - 1.0).abs() < 1e-12);
                    for j in (i + 1)..protos.len() {
                        let ang = tensor::cosine_similarity(&protos[i], &protos[j]).unwrap().clamp(-1.0, 1.0).acos();
                        assert!((ang - f64::to_radians(deg)).abs() < 1e-9, "{deg}: {}", ang.to_degrees());
                    }
                }
            }
        }
    }

    #[test]
    fn label_marginals() {
        let cfg = CohortConfig {
            n_patients: 2000,
            dim: 8,
            tokens_per_anatomy: 1,
            abnormal_rate: Rate::PerAnatomy(vec![0.1, 0.3, 0.5, 0.9]),
            ..Default::default()
        };
        let c = generate_cohort(&cfg).unwrap();
        for j in 0..4 {
            let labels: Vec<u8> = c.patients.iter().filter_map(|p| p.anatomy(j)).map(|a| a.label).collect();
            let rate = labels.iter().map(|&l| f64::from(l)).sum::<f64>() / labels.len() as f64;
            assert!((rate - cfg.abnormal_rate.for_anatomy(j)).abs() < 0.03, "anatomy {j}: {rate}");
        }
    }

    #[test]
    fn abnormal_reports_carry_a_finding_sentence() {
        let c = generate_cohort(&CohortConfig {
            n_patients: 50,
            text_noise_scale: 0.0,
            ..small()
        })
        .unwrap();
        for p in &c.patients {
            assert!(!p.anatomies.is_empty());
            for a in &p.anatomies {
                let proto = &c.prototypes.text[a.anatomy_id];
                let findings = a.sentences.iter().filter(|s| s.as_slice() != proto.as_slice()).count();
                assert_eq!(findings, usize::from(a.label));
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cases: Vec<Box<dyn Fn(&mut CohortConfig)>> = vec![
            Box::new(|c| c.n_patients = 0),
            Box::new(|c| c.dim = 2),
            Box::new(|c| c.text_separation_deg = 0.0),
            Box::new(|c| c.vis_separation_deg = 91.0),
            Box::new(|c| c.abnormal_rate = Rate::Uniform(1.5)),
            Box::new(|c| c.abnormal_rate = Rate::PerAnatomy(vec![0.1])),
            Box::new(|c| c.missing_rate = 1.0),
            Box::new(|c| c.noise_scale = -1.0),
            Box::new(|c| c.n_templates = 0),
        ];
        for f in cases {
            let mut cfg = CohortConfig::default();
            f(&mut cfg);
            assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = generate_cohort(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_cohort(&c, &path).unwrap();
        let back = read_cohort(&path).unwrap();
        assert_eq!(c, back);
        let bits = |c: &Cohort| -> Vec<u64> {
            c.patients
                .iter()
                .flat_map(|p| p.anatomies.iter())
                .flat_map(|a| a.visual_tokens.as_slice().iter().chain(a.sentences.iter().flatten()))
                .map(|x| x.to_bits())
                .collect()
        };
        assert_eq!(bits(&c), bits(&back));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = cohort_to_string(&generate_cohort(&small()).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let cut = lines[..5].join("\n");
        assert!(matches!(cohort_from_str(&cut), Err(Error::Parse { line: 6, .. })));
        let mid = &text[..text.len() - 40];
        assert!(matches!(cohort_from_str(mid), Err(Error::Parse { .. })));
        assert!(matches!(cohort_from_str(""), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = cohort_to_string(&generate_cohort(&small()).unwrap()).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[3] = "{not json".into();
        match cohort_from_str(&lines.join("\n")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_checksum_mismatch() {
        let text = cohort_to_string(&generate_cohort(&small()).unwrap()).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(cohort_from_str(&bumped), Err(Error::Version { found: 7, .. })));
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[2] = lines[2].replacen("\"label\":0", "\"label\":1", 1);
        lines[2] = lines[2].replacen("\"label\":1", "\"label\":0", 1);
        lines[2] = lines[2].replacen(",\"label\"", " ,\"label\"", 1);
        assert!(matches!(cohort_from_str(&lines.join("\n")), Err(Error::Checksum { .. })));
    }

    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn cohorts_respect_their_config(seed in any::<u64>(), n in 1usize..10, m in 1usize..4) {
            let cfg = CohortConfig { seed, n_patients: n, anatomies: m, dim: 8, tokens_per_anatomy: 3, ..Default::default() };
            let c = generate_cohort(&cfg).unwrap();
            prop_assert_eq!(c.patients.len(), n);
            prop_assert_eq!(c.templates.len(), m * 2 * cfg.n_templates);
            for p in &c.patients {
                prop_assert!(p.anatomies.windows(2).all(|w| w[0].anatomy_id < w[1].anatomy_id));
                for a in &p.anatomies {
                    prop_assert!(a.anatomy_id < m && a.label <= 1);
                    prop_assert_eq!((a.visual_tokens.rows(), a.visual_tokens.cols()), (3, 8));
                    prop_assert!(!a.sentences.is_empty());
                    prop_assert!(a.sentences.iter().all(|s| s.len() == 8 && s.iter().all(|x| x.is_finite())));
                }
            }
            let round = cohort_from_str(&cohort_to_string(&c).unwrap()).unwrap();
            prop_assert_eq!(round, c);
        }
    }
}
