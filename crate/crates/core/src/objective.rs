//! The loss stack: per-anatomy bidirectional InfoNCE, the recombination plan,
//! synthetic global tokens, the global InfoNCE and their weighted total.
//!
//! Each loss exists twice: as plain `f64` code over vectors (used for
//! evaluation and as an oracle) and as a graph builder (used for training).
//! Tests pin the two to each other.

use serde::Serialize;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{ParamNodes, Pooling};
use crate::rng::Rng;
use crate::tensor::{self, Matrix};

/// Default weight of the global term.
pub const DEFAULT_LAMBDA: f64 = 0.1;

const UNIT_TOL: f64 = 1e-9;

/// Encoded anatomy tokens for one batch. `v[i][j]` / `r[i][j]` are present
/// exactly when patient `i` has anatomy `j` in both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct AnatomyBatch {
    m: usize,
    d: usize,
    v: Vec<Vec<Option<Vec<f64>>>>,
    r: Vec<Vec<Option<Vec<f64>>>>,
}

impl AnatomyBatch {
    pub fn new(v: Vec<Vec<Option<Vec<f64>>>>, r: Vec<Vec<Option<Vec<f64>>>>) -> Result<Self> {
        if v.is_empty() || v.len() != r.len() {
            return Err(Error::InvalidArgument("batch needs matching, non-empty V and R".into()));
        }
        let m = v[0].len();
        let mut d = None;
        for (vi, ri) in v.iter().zip(&r) {
            if vi.len() != m || ri.len() != m {
                return Err(Error::Shape("ragged anatomy rows in batch".into()));
            }
            for (a, b) in vi.iter().zip(ri) {
                match (a, b) {
                    (Some(a), Some(b)) => {
                        for t in [a, b] {
                            let dd = *d.get_or_insert(t.len());
                            if t.len() != dd {
                                return Err(Error::Shape("tokens of unequal dimension".into()));
                            }
                            if (tensor::norm(t) - 1.0).abs() > UNIT_TOL {
                                return Err(Error::InvalidArgument("anatomy tokens must be unit norm".into()));
                            }
                        }
                    }
                    (None, None) => {}
                    _ => {
                        return Err(Error::InvalidArgument(
                            "a token present in only one modality".into(),
                        ))
                    }
                }
            }
        }
        Ok(Self {
            m,
            d: d.unwrap_or(0),
            v,
            r,
        })
    }

    pub fn patients(&self) -> usize {
        self.v.len()
    }

    pub fn anatomies(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn available(&self, i: usize, j: usize) -> bool {
        self.v[i][j].is_some()
    }

    /// `availability[i][j]`.
    pub fn availability(&self) -> Vec<Vec<bool>> {
        self.v
            .iter()
            .map(|row| row.iter().map(Option::is_some).collect())
            .collect()
    }

    /// Available patient indices for anatomy `j`, ascending.
    pub fn available_patients(&self, j: usize) -> Vec<usize> {
        (0..self.patients()).filter(|&i| self.available(i, j)).collect()
    }

    pub fn visual(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.v[i][j].as_deref()
    }

    pub fn report(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.r[i][j].as_deref()
    }

    /// The same batch with patients reordered: new patient `k` is old `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            m: self.m,
            d: self.d,
            v: perm.iter().map(|&i| self.v[i].clone()).collect(),
            r: perm.iter().map(|&i| self.r[i].clone()).collect(),
        }
    }

    /// The same batch with the two modalities exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            m: self.m,
            d: self.d,
            v: self.r.clone(),
            r: self.v.clone(),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Bidirectional InfoNCE over paired rows: `-(1/N) sum_i [log softmax_row(S)_ii +
/// log softmax_col(S)_ii]` with `S_ik = cos(v_i, r_k) / tau`.
pub fn info_nce(v: &[&[f64]], r: &[&[f64]], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let n = v.len();
    if n == 0 || n != r.len() {
        return Err(Error::InvalidArgument("InfoNCE needs N >= 1 matching pairs".into()));
    }
    let mut s = Matrix::zeros(n, n);
    for (i, vi) in v.iter().enumerate() {
        for (k, rk) in r.iter().enumerate() {
            s.set(i, k, tensor::cosine_similarity(vi, rk)? / tau);
        }
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += tensor::log_softmax(s.row(i))?[i];
    }
    let st = s.transpose();
    for k in 0..n {
        acc += tensor::log_softmax(st.row(k))?[k];
    }
    Ok(-acc / n as f64)
}

/// Local loss for anatomy `j`; `None` when no patient has it (the skip sentinel).
pub fn local_contrastive_loss(batch: &AnatomyBatch, j: usize, tau: f64) -> Result<Option<f64>> {
    check_tau(tau)?;
    if j >= batch.anatomies() {
        return Err(Error::InvalidArgument(format!("anatomy {j} out of range")));
    }
    let idx = batch.available_patients(j);
    if idx.is_empty() {
        return Ok(None);
    }
    let v: Vec<&[f64]> = idx.iter().map(|&i| batch.visual(i, j).unwrap()).collect();
    let r: Vec<&[f64]> = idx.iter().map(|&i| batch.report(i, j).unwrap()).collect();
    info_nce(&v, &r, tau).map(Some)
}

/// Per-anatomy assignment of patients to synthetic global groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecombinationPlan {
    /// `assignment[j][k]`: the patient whose anatomy `j` joins group `k`.
    pub assignment: Vec<Vec<Option<usize>>>,
}

impl RecombinationPlan {
    pub fn groups(&self) -> usize {
        self.assignment.first().map_or(0, Vec::len)
    }

    /// Random plan with `K = B`: for each anatomy, a uniform permutation of
    /// the `K` slots is drawn and its first `N_j` entries receive the available
    /// patients in ascending order. Groups left empty are dropped.
    pub fn build(availability: &[Vec<bool>], rng: &mut Rng) -> Result<Self> {
        Self::build_with(availability, |k, avail| {
            let slots = rng.permutation(k);
            slots[..avail.len()].to_vec()
        })
    }

    /// Plan where every patient stays in its own group (all permutations are
    /// the identity).
    pub fn identity(availability: &[Vec<bool>]) -> Result<Self> {
        Self::build_with(availability, |_, avail| avail.to_vec())
    }

    /// `slots(K, available)` returns the group slot of each available patient.
    fn build_with(
        availability: &[Vec<bool>],
        mut slots: impl FnMut(usize, &[usize]) -> Vec<usize>,
    ) -> Result<Self> {
        let b = availability.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let m = availability[0].len();
        if availability.iter().any(|row| row.len() != m) {
            return Err(Error::Shape("ragged availability".into()));
        }
        if !availability.iter().flatten().any(|&a| a) {
            return Err(Error::InvalidArgument("no available anatomy in batch".into()));
        }
        let mut full = vec![vec![None; b]; m];
        for (j, slots_j) in full.iter_mut().enumerate() {
            let avail: Vec<usize> = (0..b).filter(|&i| availability[i][j]).collect();
            for (&i, slot) in avail.iter().zip(slots(b, &avail)) {
                slots_j[slot] = Some(i);
            }
        }
        let keep: Vec<usize> = (0..b).filter(|&k| full.iter().any(|a| a[k].is_some())).collect();
        let assignment = full
            .into_iter()
            .map(|a| keep.iter().map(|&k| a[k]).collect())
            .collect();
        Ok(Self { assignment })
    }

    /// Members `(anatomy, patient)` of group `k`, anatomy-ascending.
    pub fn members(&self, k: usize) -> Vec<(usize, usize)> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(j, a)| a[k].map(|i| (j, i)))
            .collect()
    }

    /// Verify that every available `(anatomy, patient)` pair is used exactly
    /// once and every group is non-empty.
    pub fn check(&self, availability: &[Vec<bool>]) -> Result<()> {
        let b = availability.len();
        let m = availability.first().map_or(0, Vec::len);
        if self.assignment.len() != m {
            return Err(Error::InvalidArgument("plan anatomy count mismatch".into()));
        }
        let mut seen = vec![vec![0usize; m]; b];
        for (j, a) in self.assignment.iter().enumerate() {
            for &i in a.iter().flatten() {
                if i >= b {
                    return Err(Error::InvalidArgument(format!("patient {i} out of range")));
                }
                seen[i][j] += 1;
            }
        }
        for i in 0..b {
            for j in 0..m {
                let want = usize::from(availability[i][j]);
                if seen[i][j] != want {
                    return Err(Error::InvalidArgument(format!(
                        "pair (anatomy {j}, patient {i}) used {} times, expected {want}",
                        seen[i][j]
                    )));
                }
            }
        }
        if (0..self.groups()).any(|k| self.members(k).is_empty()) {
            return Err(Error::InvalidArgument("plan has an empty group".into()));
        }
        Ok(())
    }
}

/// `(V~_k, R~_k)`: means over the present anatomies of each group, not
/// re-normalized.
pub fn synthesize_global_tokens(
    batch: &AnatomyBatch,
    plan: &RecombinationPlan,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    plan.check(&batch.availability())?;
    let d = batch.dim();
    let mut out = Vec::with_capacity(plan.groups());
    for k in 0..plan.groups() {
        let members = plan.members(k);
        let mut v = vec![0.0; d];
        let mut r = vec![0.0; d];
        for &(j, i) in &members {
            for (o, x) in v.iter_mut().zip(batch.visual(i, j).unwrap()) {
                *o += x;
            }
            for (o, x) in r.iter_mut().zip(batch.report(i, j).unwrap()) {
                *o += x;
            }
        }
        let inv = 1.0 / members.len() as f64;
        v.iter_mut().for_each(|x| *x *= inv);
        r.iter_mut().for_each(|x| *x *= inv);
        out.push((v, r));
    }
    Ok(out)
}

pub fn global_contrastive_loss(globals: &[(Vec<f64>, Vec<f64>)], tau: f64) -> Result<f64> {
    let v: Vec<&[f64]> = globals.iter().map(|g| g.0.as_slice()).collect();
    let r: Vec<&[f64]> = globals.iter().map(|g| g.1.as_slice()).collect();
    info_nce(&v, &r, tau)
}

/// Loss values for one step, as logged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// `None` marks an anatomy absent from the whole batch.
    pub local: Vec<Option<f64>>,
    pub global: Option<f64>,
    pub total: f64,
    pub tau: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn local_sum(&self) -> f64 {
        self.local.iter().flatten().sum()
    }
}

/// Total loss. With `plan = None` the global term is disabled.
pub fn total_loss(
    batch: &AnatomyBatch,
    plan: Option<&RecombinationPlan>,
    tau: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let local = (0..batch.anatomies())
        .map(|j| local_contrastive_loss(batch, j, tau))
        .collect::<Result<Vec<_>>>()?;
    let global = match plan {
        Some(p) => Some(global_contrastive_loss(&synthesize_global_tokens(batch, p)?, tau)?),
        None => None,
    };
    let total = local.iter().flatten().sum::<f64>() + global.map_or(0.0, |g| lambda * g);
    Ok(LossBreakdown {
        local,
        global,
        total,
        tau,
        lambda,
    })
}

/// Graph form of [`info_nce`] over row-paired `N x D` nodes.
pub fn graph_info_nce(g: &mut Graph, v: NodeId, r: NodeId, inv_tau: NodeId) -> Result<NodeId> {
    let n = g.shape(v).0;
    let cos = g.cosine_matrix(v, r)?;
    let s = g.mul_scalar(cos, inv_tau)?;
    let rows = g.log_softmax_rows(s)?;
    let st = g.transpose(s);
    let cols = g.log_softmax_rows(st)?;
    let a = g.trace(rows)?;
    let b = g.trace(cols)?;
    let both = g.add(a, b)?;
    Ok(g.scale(both, -1.0 / n as f64))
}

/// Raw encoder inputs for one (patient, anatomy) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInput {
    /// `T x D` visual tokens.
    pub tokens: Matrix,
    /// Sentence features in report order.
    pub sentences: Vec<Vec<f64>>,
}

/// Encoder inputs for a batch: `pairs[i][j]` is `None` for a missing anatomy.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs {
    pub pairs: Vec<Vec<Option<PairInput>>>,
}

impl BatchInputs {
    pub fn availability(&self) -> Vec<Vec<bool>> {
        self.pairs
            .iter()
            .map(|row| row.iter().map(Option::is_some).collect())
            .collect()
    }
}

/// Leaf name of an input token matrix when inputs are differentiable.
pub fn visual_leaf_name(i: usize, j: usize) -> String {
    format!("vis/{i}/{j}")
}

pub fn sentence_leaf_name(i: usize, j: usize) -> String {
    format!("txt/{i}/{j}")
}

/// Loss nodes of a built graph.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub graph: Graph,
    pub params: ParamNodes,
    pub total: NodeId,
    pub local: Vec<Option<NodeId>>,
    pub global: Option<NodeId>,
    pub lambda: f64,
}

impl LossGraph {
    /// Evaluate the breakdown and gradients for the given bindings.
    pub fn run(
        &self,
        bindings: &crate::autodiff::Bindings,
    ) -> Result<(LossBreakdown, crate::autodiff::GradReport)> {
        let (eval, grads) = self.graph.forward_backward(self.total, bindings)?;
        let tau = 1.0 / eval.value(self.params.inv_tau).get(0, 0);
        let breakdown = LossBreakdown {
            local: self
                .local
                .iter()
                .map(|n| n.map(|id| eval.value(id).get(0, 0)))
                .collect(),
            global: self.global.map(|id| eval.value(id).get(0, 0)),
            total: eval.scalar(),
            tau,
            lambda: self.lambda,
        };
        Ok((breakdown, grads))
    }
}

/// Build `sum_j L_loc^(j) + lambda * L_glo` from raw inputs through the
/// encoders. When `inputs_as_leaves` is set, every token and sentence matrix
/// becomes a named leaf (see [`visual_leaf_name`]) so gradients reach it.
pub fn build_loss_graph(
    inputs: &BatchInputs,
    m: usize,
    d: usize,
    pooling: Pooling,
    plan: Option<&RecombinationPlan>,
    lambda: f64,
    inputs_as_leaves: bool,
) -> Result<LossGraph> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let b = inputs.pairs.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut g = Graph::new();
    let pn = ParamNodes::declare(&mut g, m, d)?;

    // Per anatomy: encoded V and R rows of the available patients.
    let mut v_rows: Vec<Vec<NodeId>> = vec![Vec::new(); m];
    let mut r_rows: Vec<Vec<NodeId>> = vec![Vec::new(); m];
    let mut row_of = vec![vec![None; m]; b];
    for (i, row) in inputs.pairs.iter().enumerate() {
        if row.len() != m {
            return Err(Error::Shape(format!("patient {i} has {} anatomies, expected {m}", row.len())));
        }
        for (j, pair) in row.iter().enumerate() {
            let Some(p) = pair else { continue };
            let (tok, pooled) = if inputs_as_leaves {
                let (t, c) = p.tokens.shape();
                let tok = g.leaf(&visual_leaf_name(i, j), t, c)?;
                let s = g.leaf(&sentence_leaf_name(i, j), p.sentences.len(), d)?;
                (tok, pn.pool(&mut g, s, pooling)?)
            } else {
                let tok = g.constant(p.tokens.clone());
                let pooled = crate::model::pool_sentences(&p.sentences, pooling)?;
                (tok, g.constant(Matrix::row_vector(&pooled)))
            };
            row_of[i][j] = Some(v_rows[j].len());
            v_rows[j].push(pn.visual(&mut g, j, tok)?);
            r_rows[j].push(pooled);
        }
    }

    let mut local = vec![None; m];
    let mut v_stack = vec![None; m];
    let mut r_stack = vec![None; m];
    for j in 0..m {
        if v_rows[j].is_empty() {
            continue;
        }
        let v = g.stack_rows(&v_rows[j])?;
        let pooled = g.stack_rows(&r_rows[j])?;
        let r = pn.text(&mut g, pooled)?;
        local[j] = Some(graph_info_nce(&mut g, v, r, pn.inv_tau)?);
        v_stack[j] = Some(v);
        r_stack[j] = Some(r);
    }
    let present: Vec<NodeId> = local.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument("no available anatomy in batch".into()));
    }
    let mut total = present[0];
    for &l in &present[1..] {
        total = g.add(total, l)?;
    }

    let mut global = None;
    if let Some(plan) = plan {
        plan.check(&inputs.availability())?;
        let mut offsets = vec![0; m];
        let mut acc = 0;
        let mut vs = Vec::new();
        let mut rs = Vec::new();
        for j in 0..m {
            offsets[j] = acc;
            if let (Some(v), Some(r)) = (v_stack[j], r_stack[j]) {
                acc += g.shape(v).0;
                vs.push(v);
                rs.push(r);
            }
        }
        let v_all = g.stack_rows(&vs)?;
        let r_all = g.stack_rows(&rs)?;
        let groups: Vec<Vec<usize>> = (0..plan.groups())
            .map(|k| {
                plan.members(k)
                    .into_iter()
                    .map(|(j, i)| offsets[j] + row_of[i][j].expect("plan checked"))
                    .collect()
            })
            .collect();
        let gv = g.group_mean_rows(v_all, groups.clone())?;
        let gr = g.group_mean_rows(r_all, groups)?;
        let lg = graph_info_nce(&mut g, gv, gr, pn.inv_tau)?;
        let weighted = g.scale(lg, lambda);
        total = g.add(total, weighted)?;
        global = Some(lg);
    }

    Ok(LossGraph {
        graph: g,
        params: pn,
        total,
        local,
        global,
        lambda,
    })
}

/// Bind the input matrices of a graph built with `inputs_as_leaves`.
pub fn bind_inputs(inputs: &BatchInputs, bindings: &mut crate::autodiff::Bindings) -> Result<()> {
    for (i, row) in inputs.pairs.iter().enumerate() {
        for (j, pair) in row.iter().enumerate() {
            if let Some(p) = pair {
                bindings.insert(visual_leaf_name(i, j), p.tokens.clone());
                bindings.insert(sentence_leaf_name(i, j), Matrix::from_rows(&p.sentences)?);
            }
        }
    }
    Ok(())
}
