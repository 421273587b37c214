//! Central finite-difference validation of reverse-mode gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, OpKind};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Pooling};
use crate::objective::{bind_inputs, build_loss_graph, BatchInputs, PairInput, RecombinationPlan};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Worst {
    pub leaf: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub value: f64,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<Worst>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / REL_ERR_FLOOR.max(analytic.abs() + numeric.abs())
}

/// Compare reverse-mode gradients against central differences with step `h`
/// for every coordinate of every leaf.
pub fn finite_difference_check(
    graph: &Graph,
    root: NodeId,
    bindings: &Bindings,
    h: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let report = graph.evaluate_with_gradients(root, bindings)?;
    let mut work = bindings.clone();
    let mut max_rel = 0.0;
    let mut worst = None;
    let mut coordinates = 0;
    for (name, analytic) in &report.grads {
        let cols = analytic.cols();
        for idx in 0..analytic.as_slice().len() {
            let orig = bindings[name].as_slice()[idx];
            let slot = |w: &mut Bindings, x: f64| {
                w.get_mut(name).expect("bound leaf").as_mut_slice()[idx] = x;
            };
            slot(&mut work, orig + h);
            let fp = graph.evaluate(root, &work)?;
            slot(&mut work, orig - h);
            let fm = graph.evaluate(root, &work)?;
            slot(&mut work, orig);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice()[idx];
            let e = relative_error(a, numeric);
            coordinates += 1;
            if e > max_rel || worst.is_none() {
                if e > max_rel {
                    max_rel = e;
                }
                worst = Some(Worst {
                    leaf: name.clone(),
                    row: idx / cols.max(1),
                    col: idx % cols.max(1),
                    analytic: a,
                    numeric,
                    rel_error: e,
                });
            }
        }
    }
    Ok(GradCheckReport {
        value: report.value,
        max_rel_error: max_rel,
        coordinates,
        worst,
    })
}

/// Size limits and tolerance of the full-objective check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveCheckConfig {
    pub configs: usize,
    pub max_batch: usize,
    pub max_anatomies: usize,
    pub max_dim: usize,
    pub max_sentences: usize,
    pub lambda: f64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for ObjectiveCheckConfig {
    fn default() -> Self {
        Self {
            configs: 10,
            max_batch: 6,
            max_anatomies: 3,
            max_dim: 8,
            max_sentences: 3,
            lambda: crate::objective::DEFAULT_LAMBDA,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveCase {
    pub batch: usize,
    pub anatomies: usize,
    pub dim: usize,
    pub groups: usize,
    pub pooling: Pooling,
    pub report: GradCheckReport,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveCheckReport {
    pub cases: Vec<ObjectiveCase>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Finite-difference check of the full objective (local + weighted global
/// losses through both encoders) with respect to every parameter and every
/// input token, at random configurations drawn from `seed`.
pub fn check_objective(
    seed: u64,
    cfg: &ObjectiveCheckConfig,
    fault: Option<OpKind>,
) -> Result<ObjectiveCheckReport> {
    if cfg.configs == 0
        || cfg.max_batch == 0
        || cfg.max_anatomies == 0
        || cfg.max_dim == 0
        || cfg.max_sentences == 0
    {
        return Err(Error::Config("gradcheck sizes must all be >= 1".into()));
    }
    let mut rng = Rng::stream(seed, &[crate::rng::tags::GRADCHECK]);
    let mut cases = Vec::with_capacity(cfg.configs);
    for k in 0..cfg.configs {
        let b = rng.range_inclusive(cfg.max_batch.min(2), cfg.max_batch);
        let m = rng.range_inclusive(1, cfg.max_anatomies);
        let d = rng.range_inclusive(cfg.max_dim.min(2), cfg.max_dim);
        let pooling = if k % 2 == 0 { Pooling::Positional } else { Pooling::Mean };
        let mut params = ModelParams::init(m, d, &mut rng)?;
        for w in [&mut params.w_v, &mut params.w_t] {
            for x in w.as_mut_slice() {
                *x += 0.3 * rng.normal();
            }
        }
        params.log_tau = rng.uniform_range(0.05f64.ln(), 0.5f64.ln());
        let t = rng.range_inclusive(1, 4);
        let mut pairs = vec![vec![None; m]; b];
        for row in pairs.iter_mut() {
            for slot in row.iter_mut() {
                if rng.bernoulli(0.25) {
                    continue;
                }
                let l = rng.range_inclusive(1, cfg.max_sentences);
                *slot = Some(PairInput {
                    tokens: Matrix::from_vec(t, d, (0..t * d).map(|_| rng.normal()).collect())?,
                    sentences: (0..l).map(|_| (0..d).map(|_| rng.normal()).collect()).collect(),
                });
            }
        }
        if pairs.iter().flatten().all(Option::is_none) {
            pairs[0][0] = Some(PairInput {
                tokens: Matrix::from_vec(t, d, (0..t * d).map(|_| rng.normal()).collect())?,
                sentences: vec![(0..d).map(|_| rng.normal()).collect()],
            });
        }
        let inputs = BatchInputs { pairs };
        let plan = RecombinationPlan::build(&inputs.availability(), &mut rng)?;
        let mut lg = build_loss_graph(&inputs, m, d, pooling, Some(&plan), cfg.lambda, true)?;
        if let Some(kind) = fault {
            lg.graph.inject_sign_fault(kind);
        }
        let mut bindings = params.to_bindings();
        bind_inputs(&inputs, &mut bindings)?;
        let report = finite_difference_check(&lg.graph, lg.total, &bindings, cfg.step)?;
        cases.push(ObjectiveCase {
            batch: b,
            anatomies: m,
            dim: d,
            groups: plan.groups(),
            pooling,
            pass: report.max_rel_error <= cfg.tolerance,
            report,
        });
    }
    let max_rel_error = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    Ok(ObjectiveCheckReport {
        pass: cases.iter().all(|c| c.pass),
        cases,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| scale * rng.normal()).collect()).unwrap()
    }

    fn one(name: &str, m: Matrix) -> Bindings {
        [(name.to_string(), m)].into_iter().collect()
    }

    #[test]
    fn quadratic_is_exact() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 1).unwrap();
        let xt = g.transpose(x);
        let sq = g.matmul(x, xt).unwrap();
        let s = g.sum(sq);
        let rep = finite_difference_check(&g, s, &one("x", Matrix::scalar(2.0)), 1e-5).unwrap();
        assert_eq!(rep.value, 4.0);
        assert!(rep.max_rel_error <= 1e-7, "{}", rep.max_rel_error);
    }

    #[test]
    fn constant_expression_has_zero_gradient() {
        let mut g = Graph::new();
        let _x = g.leaf("x", 2, 2).unwrap();
        let c = g.constant(Matrix::scalar(3.5));
        let s = g.sum(c);
        let rep = finite_difference_check(&g, s, &one("x", Matrix::identity(2)), 1e-5).unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
        assert_eq!(rep.coordinates, 4);
    }

    #[test]
    fn bad_step_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 1).unwrap();
        let s = g.sum(x);
        assert!(finite_difference_check(&g, s, &one("x", Matrix::scalar(1.0)), 0.0).is_err());
    }

    /// Reduce an arbitrary matrix node to a scalar through a random linear
    /// functional, so every output entry carries gradient.
    fn contract(g: &mut Graph, node: NodeId, rng: &mut Rng) -> NodeId {
        let (r, c) = g.shape(node);
        let w = g.constant(random(rng, c, r, 1.0));
        let p = g.matmul(node, w).unwrap();
        g.trace(p).unwrap()
    }

    type Builder = fn(&mut Graph, NodeId, NodeId, &mut Rng) -> NodeId;

    fn primitives() -> Vec<(&'static str, Builder)> {
        vec![
            ("matmul", |g, a, b, _| {
                let bt = g.transpose(b);
                g.matmul(a, bt).unwrap()
            }),
            ("transpose", |g, a, _, _| g.transpose(a)),
            ("add", |g, a, b, _| g.add(a, b).unwrap()),
            ("negate", |g, a, _, _| g.negate(a)),
            ("scale", |g, a, _, _| g.scale(a, -1.7)),
            ("mul_scalar", |g, a, b, _| {
                let s = g.group_mean_rows(b, vec![vec![0]]).unwrap();
                let sc = g.sum(s);
                g.mul_scalar(a, sc).unwrap()
            }),
            ("exp", |g, a, _, _| g.exp(a)),
            ("log", |g, a, _, _| {
                let e = g.exp(a);
                g.log(e)
            }),
            ("sum", |g, a, _, _| g.sum(a)),
            ("mean", |g, a, _, _| g.mean(a).unwrap()),
            ("group_mean_rows", |g, a, _, rng| {
                let r = g.shape(a).0;
                let groups = (0..3)
                    .map(|_| {
                        let k = 1 + rng.below(r);
                        let mut p = rng.permutation(r);
                        p.truncate(k);
                        p
                    })
                    .collect();
                g.group_mean_rows(a, groups).unwrap()
            }),
            ("stack_rows", |g, a, b, _| g.stack_rows(&[a, b, a]).unwrap()),
            ("normalize_rows", |g, a, _, _| g.normalize_rows(a)),
            ("softmax_rows", |g, a, _, _| g.softmax_rows(a).unwrap()),
            ("log_softmax_rows", |g, a, _, _| g.log_softmax_rows(a).unwrap()),
            ("trace", |g, a, b, _| {
                let bt = g.transpose(b);
                let sq = g.matmul(a, bt).unwrap();
                g.trace(sq).unwrap()
            }),
            ("cosine_matrix", |g, a, b, _| g.cosine_matrix(a, b).unwrap()),
        ]
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for (name, build) in primitives() {
            for cfg in 0..20u64 {
                let mut rng = Rng::stream(cfg, &[0xD1FF, name.len() as u64]);
                let r = 1 + rng.below(16);
                let c = 1 + rng.below(16);
                let mut g = Graph::new();
                let a = g.leaf("a", r, c).unwrap();
                let b = g.leaf("b", r, c).unwrap();
                let out = build(&mut g, a, b, &mut rng);
                let root = contract(&mut g, out, &mut rng);
                let bindings: Bindings = [
                    ("a".to_string(), random(&mut rng, r, c, 1.0)),
                    ("b".to_string(), random(&mut rng, r, c, 1.0)),
                ]
                .into_iter()
                .collect();
                let rep = finite_difference_check(&g, root, &bindings, 1e-5).unwrap();
                assert!(
                    rep.max_rel_error <= 1e-5,
                    "{name} cfg {cfg}: {:?}",
                    rep.worst
                );
            }
        }
    }

    #[test]
    fn sign_fault_is_detected() {
        let mut rng = Rng::new(4);
        let mut g = Graph::new();
        let a = g.leaf("a", 3, 4).unwrap();
        let n = g.normalize_rows(a);
        let root = contract(&mut g, n, &mut rng);
        let b = one("a", random(&mut rng, 3, 4, 1.0));
        assert!(finite_difference_check(&g, root, &b, 1e-5).unwrap().max_rel_error < 1e-5);
        g.inject_sign_fault(OpKind::NormalizeRows);
        let rep = finite_difference_check(&g, root, &b, 1e-5).unwrap();
        assert!(rep.max_rel_error > 0.5, "{}", rep.max_rel_error);
    }

    #[test]
    fn full_objective_passes_at_default_sizes() {
        let r = check_objective(1, &ObjectiveCheckConfig::default(), None).unwrap();
        assert_eq!(r.cases.len(), 10);
        assert!(r.pass, "max rel error {}", r.max_rel_error);
        assert!(r.cases.iter().all(|c| c.batch <= 6 && c.anatomies <= 3 && c.dim <= 8 && c.groups <= c.batch));
    }

    #[test]
    fn full_objective_detects_sign_fault() {
        let r = check_objective(1, &ObjectiveCheckConfig::default(), Some(OpKind::SoftmaxRows)).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn zero_sizes_are_rejected() {
        let cfg = ObjectiveCheckConfig {
            max_dim: 0,
            ..Default::default()
        };
        assert!(matches!(check_objective(1, &cfg, None), Err(Error::Config(_))));
    }
}
