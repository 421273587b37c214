//! Mini-batch training: epoch shuffling, report augmentation, the combined
//! local + global objective and Adam updates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_report, AugmentConfig};
use crate::diagnostics::{self, CollapseIndex};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Pooling};
use crate::objective::{build_loss_graph, BatchInputs, PairInput, RecombinationPlan, DEFAULT_LAMBDA};
use crate::rng::{tags, Rng};
use crate::synth::Cohort;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub augment: AugmentConfig,
    pub enable_global_loss: bool,
    pub enable_augment: bool,
    pub pooling: Pooling,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Record collapse indices at init and after every epoch.
    pub snapshots: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 3e-3,
            lambda: DEFAULT_LAMBDA,
            augment: AugmentConfig::default(),
            enable_global_loss: true,
            enable_augment: true,
            pooling: Pooling::Positional,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            clip_norm: Some(5.0),
            max_steps: None,
            snapshots: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps_adam > 0.0) {
            return bad("eps_adam must be > 0".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        if self.enable_augment {
            self.augment.validate()?;
        }
        Ok(())
    }

    /// The weight actually applied to the global term.
    pub fn effective_lambda(&self) -> f64 {
        if self.enable_global_loss {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Adam moments for a set of named flat parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One Adam step with bias correction, applied in place.
pub fn adam_step(
    params: &mut [(&str, &mut [f64])],
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(*name)
            .ok_or_else(|| Error::Shape(format!("no gradient for `{name}`")))?;
        if g.len() != p.len() {
            return Err(Error::Shape(format!("gradient of `{name}` has {} entries, expected {}", g.len(), p.len())));
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_global: Option<f64>,
    pub loss_local: Vec<Option<f64>>,
    pub tau: f64,
    pub lambda: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub clipped: bool,
}

/// Collapse indices at a point in training (`epoch` 0 = initial params).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub step: usize,
    pub text: CollapseIndex,
    pub image: CollapseIndex,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
}

impl TrainTrace {
    /// JSON Lines: one step record per line.
    pub fn steps_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.steps {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn snapshots_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.snapshots {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write(&self, steps_path: &Path, snapshots_path: &Path) -> Result<()> {
        crate::io::write_atomic(steps_path, self.steps_jsonl()?.as_bytes())?;
        crate::io::write_atomic(snapshots_path, self.snapshots_jsonl()?.as_bytes())
    }
}

pub fn snapshot(params: &ModelParams, cohort: &Cohort, pooling: Pooling, epoch: usize, step: usize) -> Result<Snapshot> {
    Ok(Snapshot {
        epoch,
        step,
        text: diagnostics::collapse_of(&diagnostics::text_embeddings(params, cohort, pooling)?)?,
        image: diagnostics::collapse_of(&diagnostics::image_embeddings(params, cohort)?)?,
    })
}

/// Initial parameters for a cohort under a training seed.
pub fn initial_params(cohort: &Cohort, seed: u64) -> Result<ModelParams> {
    ModelParams::init(cohort.anatomies(), cohort.dim(), &mut Rng::stream(seed, &[tags::INIT]))
}

/// Encoder inputs of a batch, with reports augmented when enabled.
pub fn batch_inputs(cohort: &Cohort, patients: &[usize], epoch: usize, cfg: &TrainConfig) -> Result<BatchInputs> {
    let m = cohort.anatomies();
    let mut pairs = Vec::with_capacity(patients.len());
    for &pi in patients {
        let p = &cohort.patients[pi];
        let mut row: Vec<Option<PairInput>> = vec![None; m];
        for a in &p.anatomies {
            let sentences = if cfg.enable_augment {
                let mut rng = Rng::stream(
                    cfg.seed,
                    &[tags::AUGMENT, epoch as u64, p.patient_id as u64, a.anatomy_id as u64],
                );
                augment_report(&a.sentences, &cfg.augment, &mut rng)?
            } else {
                a.sentences.clone()
            };
            row[a.anatomy_id] = Some(PairInput {
                tokens: a.visual_tokens.clone(),
                sentences,
            });
        }
        pairs.push(row);
    }
    Ok(BatchInputs { pairs })
}

fn param_norms(p: &ModelParams) -> String {
    format!(
        "|Q|={:.6e} |W_v|={:.6e} |W_t|={:.6e} log_tau={:.6e}",
        p.q.frobenius_norm(),
        p.w_v.frobenius_norm(),
        p.w_t.frobenius_norm(),
        p.log_tau
    )
}

/// Train from the default initialization for `cfg.seed`.
pub fn train(cohort: &Cohort, cfg: &TrainConfig) -> Result<(ModelParams, TrainTrace)> {
    let init = initial_params(cohort, cfg.seed)?;
    train_from(cohort, cfg, init)
}

/// Train from given initial parameters.
pub fn train_from(cohort: &Cohort, cfg: &TrainConfig, init: ModelParams) -> Result<(ModelParams, TrainTrace)> {
    cfg.validate()?;
    let n = cohort.patients.len();
    if cfg.batch_size > n {
        return Err(Error::Config(format!("batch_size {} exceeds {n} patients", cfg.batch_size)));
    }
    if init.anatomies() != cohort.anatomies() || init.dim() != cohort.dim() {
        return Err(Error::Shape("parameters do not match the cohort".into()));
    }
    let (m, d) = (cohort.anatomies(), cohort.dim());
    let mut params = init;
    let mut trace = TrainTrace::default();
    let mut adam = AdamState::default();
    let lambda = cfg.effective_lambda();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    if cfg.snapshots && cfg.epochs > 0 && max_steps > 0 {
        trace.snapshots.push(snapshot(&params, cohort, cfg.pooling, 0, 0)?);
    }
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let order = Rng::stream(cfg.seed, &[tags::EPOCH_ORDER, epoch as u64]).permutation(n);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            let inputs = batch_inputs(cohort, chunk, epoch, cfg)?;
            let plan = if cfg.enable_global_loss {
                let mut rng = Rng::stream(cfg.seed, &[tags::PLAN, step as u64]);
                Some(RecombinationPlan::build(&inputs.availability(), &mut rng)?)
            } else {
                None
            };
            let lg = build_loss_graph(&inputs, m, d, cfg.pooling, plan.as_ref(), lambda, false)?;
            let (breakdown, report) = lg.run(&params.to_bindings()).map_err(|e| match e {
                Error::NonFinite(what) => Error::NumericalAbort {
                    step: step + 1,
                    detail: format!("non-finite {what}; {}", param_norms(&params)),
                },
                e => e,
            })?;
            let grads: BTreeMap<String, Vec<f64>> =
                report.grads.into_iter().map(|(k, v)| (k, v.into_vec())).collect();
            let grad_norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !breakdown.total.is_finite() || !grad_norm.is_finite() {
                return Err(Error::NumericalAbort {
                    step: step + 1,
                    detail: format!(
                        "loss {} grad norm {}; {}",
                        breakdown.total,
                        grad_norm,
                        param_norms(&params)
                    ),
                });
            }
            let clipped = cfg.clip_norm.is_some_and(|c| grad_norm > c);
            let grads = match cfg.clip_norm {
                Some(c) if clipped => {
                    let s = c / grad_norm;
                    grads.into_iter().map(|(k, v)| (k, v.into_iter().map(|g| g * s).collect())).collect()
                }
                _ => grads,
            };
            let mut flat = params.flat_mut();
            adam_step(&mut flat, &grads, &mut adam, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)?;
            drop(flat);
            if !params.is_finite() {
                return Err(Error::NumericalAbort {
                    step: step + 1,
                    detail: format!("non-finite parameters after update; {}", param_norms(&params)),
                });
            }
            step += 1;
            trace.steps.push(StepRecord {
                step,
                epoch,
                loss_total: breakdown.total,
                loss_global: breakdown.global,
                loss_local: breakdown.local,
                tau: breakdown.tau,
                lambda,
                grad_norm,
                clipped,
            });
        }
        if cfg.snapshots {
            trace.snapshots.push(snapshot(&params, cohort, cfg.pooling, epoch + 1, step)?);
        }
    }
    Ok((params, trace))
}
