//! Acceptance suite. Every criterion runs at its stated tolerance and prints
//! one `PASS` or `FAIL` line; the process exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use xanat::augment::{augment_indices, AugmentConfig};
use xanat::diagnostics::{collapse_of, text_embeddings};
use xanat::evalkit::{confusion_metrics, evaluate, roc_auc};
use xanat::gradcheck::{check_objective, ObjectiveCheckConfig};
use xanat::io::sha256_hex;
use xanat::objective::{
    global_contrastive_loss, local_contrastive_loss, synthesize_global_tokens, AnatomyBatch, RecombinationPlan,
};
use xanat::rng::Rng;
use xanat::synth::{generate_cohort, Cohort, CohortConfig};
use xanat::trainer::{initial_params, train, TrainConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let cfg = ObjectiveCheckConfig::default();
    let report = match check_objective(1, &cfg, None) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let shapes_ok = report.cases.len() == 10
        && report
            .cases
            .iter()
            .all(|c| c.batch <= 6 && c.anatomies <= 3 && c.dim <= 8 && c.groups <= c.batch);
    let pass = shapes_ok && report.max_rel_error <= 1e-4 && secs < 30.0;
    verdict(
        pass,
        format!(
            "{} configs, max rel err {:.2e} (<= 1e-4), {secs:.1}s (< 30s)",
            report.cases.len(),
            report.max_rel_error
        ),
    )
}

// ---------------------------------------------------------------- 2

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// One-anatomy batch whose rows are `v[i]` / `r[i]`.
fn single_anatomy(v: &[Vec<f64>], r: &[Vec<f64>]) -> AnatomyBatch {
    AnatomyBatch::new(
        v.iter().map(|x| vec![Some(x.clone())]).collect(),
        r.iter().map(|x| vec![Some(x.clone())]).collect(),
    )
    .unwrap()
}

/// Local (per-anatomy) and global losses of the same rows, the global one
/// through the identity recombination plan with one anatomy.
fn both_losses(v: &[Vec<f64>], r: &[Vec<f64>], tau: f64) -> (f64, f64) {
    let batch = single_anatomy(v, r);
    let local = local_contrastive_loss(&batch, 0, tau).unwrap().unwrap();
    let plan = RecombinationPlan::identity(&batch.availability()).unwrap();
    let global = global_contrastive_loss(&synthesize_global_tokens(&batch, &plan).unwrap(), tau).unwrap();
    (local, global)
}

fn closed_form_losses() -> Verdict {
    let x = unit(&[0.3, -0.2, 0.9]);
    let cases: [(&str, Vec<Vec<f64>>, Vec<Vec<f64>>, f64, f64); 3] = [
        ("N=1", vec![x.clone()], vec![unit(&[1.0, 0.5, 0.0])], 0.07, 0.0),
        ("identical N=4", vec![x.clone(); 4], vec![x.clone(); 4], 0.07, 2.0 * 4f64.ln()),
        (
            "orthonormal N=2 tau=1",
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            1.0,
            2.0 * (1.0 + (-1f64).exp()).ln(),
        ),
    ];
    let mut worst = 0f64;
    let mut parts = Vec::new();
    for (name, v, r, tau, expect) in cases {
        let (l, g) = both_losses(&v, &r, tau);
        let err = (l - expect).abs().max((g - expect).abs());
        worst = worst.max(err);
        parts.push(format!("{name} err {err:.1e}"));
    }
    verdict(worst <= 1e-12, format!("{} (<= 1e-12)", parts.join(", ")))
}

// ---------------------------------------------------------------- 3

fn exactly_once_recombination() -> Verdict {
    let mut rng = Rng::new(3);
    let mut violations = 0usize;
    let plans = 1000;
    for _ in 0..plans {
        let b = rng.range_inclusive(1, 16);
        let m = rng.range_inclusive(1, 6);
        let p = rng.uniform_range(0.1, 1.0);
        let mut avail: Vec<Vec<bool>> = (0..b).map(|_| (0..m).map(|_| rng.bernoulli(p)).collect()).collect();
        if !avail.iter().flatten().any(|&a| a) {
            let (i, j) = (rng.below(b), rng.below(m));
            avail[i][j] = true;
        }
        let plan = RecombinationPlan::build(&avail, &mut rng).unwrap();
        let mut assigned: Vec<(usize, usize)> = (0..plan.groups()).flat_map(|k| plan.members(k)).collect();
        assigned.sort_unstable();
        let mut expected: Vec<(usize, usize)> = (0..m)
            .flat_map(|j| (0..b).filter(|&i| avail[i][j]).map(move |i| (j, i)).collect::<Vec<_>>())
            .collect();
        expected.sort_unstable();
        let empty_group = (0..plan.groups()).any(|k| plan.members(k).is_empty());
        if assigned != expected || plan.groups() > b || empty_group {
            violations += 1;
        }
    }
    verdict(violations == 0, format!("{plans} plans, {violations} violations"))
}

// ---------------------------------------------------------------- 4, 5, 6

struct Run {
    inter: f64,
    frac: f64,
    auc_mean: f64,
    auc_std: f64,
    secs: f64,
}

fn ablation_runs(cohort: &Cohort) -> BTreeMap<&'static str, Run> {
    let mut out = BTreeMap::new();
    for (name, global, augment) in xanat::cli::ABLATION_ROWS {
        let cfg = TrainConfig {
            seed: 1,
            max_steps: Some(300),
            enable_global_loss: global,
            enable_augment: augment,
            snapshots: false,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let (params, trace) = train(cohort, &cfg).unwrap();
        let secs = start.elapsed().as_secs_f64();
        assert_eq!(trace.steps.len(), 300, "criterion runs must take 300 steps");
        let c = collapse_of(&text_embeddings(&params, cohort, cfg.pooling).unwrap()).unwrap();
        let auc = evaluate(&params, cohort, cfg.pooling).unwrap().aggregate["auc"];
        out.insert(
            name,
            Run {
                inter: c.inter,
                frac: c.inter_fraction_above_0_9,
                auc_mean: auc.mean,
                auc_std: auc.std,
                secs,
            },
        );
    }
    out
}

fn collapse_mitigation(cohort: &Cohort, runs: &BTreeMap<&str, Run>) -> Verdict {
    let p0 = initial_params(cohort, 1).unwrap();
    let inter0 = collapse_of(&text_embeddings(&p0, cohort, TrainConfig::default().pooling).unwrap())
        .unwrap()
        .inter;
    let (lca, gca) = (&runs["LCA"], &runs["LCA+GCA"]);
    let drop_global = inter0 - gca.inter;
    let drop_local = inter0 - lca.inter;
    let secs = lca.secs + gca.secs;
    let pass = drop_global >= 0.3 && gca.frac < 0.2 && drop_local < 0.1 && secs < 300.0;
    verdict(
        pass,
        format!(
            "initial inter {inter0:.4}; lambda=0.1 drop {drop_global:.4} (>= 0.3), frac>0.9 {:.4} (< 0.2); \
             lambda=0 drop {drop_local:.4} (< 0.1); {secs:.1}s",
            gca.frac
        ),
    )
}

fn prompt_robustness(runs: &BTreeMap<&str, Run>) -> Verdict {
    let (lca, gca) = (&runs["LCA"], &runs["LCA+GCA"]);
    verdict(
        gca.auc_std <= 0.5 * lca.auc_std,
        format!(
            "std(AUC) LCA+GCA {:.5} vs 0.5 x LCA {:.5}",
            gca.auc_std,
            0.5 * lca.auc_std
        ),
    )
}

fn ablation_ordering(runs: &BTreeMap<&str, Run>) -> Verdict {
    let a = |k: &str| runs[k].auc_mean;
    let (l, g, c, all) = (a("LCA"), a("LCA+GCA"), a("LCA+CTA"), a("LCA+CTA+GCA"));
    verdict(
        l < g && l < c && c <= all,
        format!("mean AUC LCA {l:.4}, LCA+GCA {g:.4}, LCA+CTA {c:.4}, LCA+CTA+GCA {all:.4}"),
    )
}

// ---------------------------------------------------------------- 7

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (&si, &li) in scores.iter().zip(labels) {
        if li == 1 {
            p += 1;
        } else {
            n += 1;
        }
        if li != 1 {
            continue;
        }
        for (&sj, &lj) in scores.iter().zip(labels) {
            if lj == 0 {
                twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

fn metric_oracles() -> Verdict {
    let mut rng = Rng::new(7);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.range_inclusive(2, 64);
        let levels = rng.range_inclusive(2, 12);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.4))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 * 0.25 - 1.0).collect();
        if roc_auc(&scores, &labels).unwrap() != pairwise_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    let m = confusion_metrics(&[1.0, -1.0, -1.0, -1.0], &[1, 0, 1, 0], 0.0).unwrap();
    let f1 = (2.0 * (2.0 / 3.0) + 2.0 * 0.8) / 4.0;
    let example = m.sens == 0.5 && m.spec == 1.0 && m.acc == 0.75 && m.prec == 1.0 && (m.f1 - f1).abs() <= 1e-15;
    verdict(
        mismatches == 0 && example,
        format!(
            "200 AUC instances, {mismatches} mismatches; example sens {} spec {} acc {} prec {} weighted F1 {:.4}",
            m.sens, m.spec, m.acc, m.prec, m.f1
        ),
    )
}

// ---------------------------------------------------------------- 8

fn augmentation_distribution() -> Verdict {
    let cfg = AugmentConfig::default();
    let seeds = 30_000u64;
    let mut worst = 0f64;
    let mut empty = 0usize;
    for len in 1..=6usize {
        let lo = cfg.min_keep(len);
        let mut sizes = vec![0usize; len + 1];
        let mut first = vec![0usize; len];
        let mut kept = vec![0usize; len];
        for seed in 0..seeds {
            let idx = augment_indices(len, &cfg, &mut Rng::new(seed)).unwrap();
            if idx.is_empty() {
                empty += 1;
                continue;
            }
            sizes[idx.len()] += 1;
            first[idx[0]] += 1;
            for &i in &idx {
                kept[i] += 1;
            }
        }
        let s = seeds as f64;
        let n_sizes = (len - lo + 1) as f64;
        for (k, &c) in sizes.iter().enumerate() {
            let expect = if k >= lo { 1.0 / n_sizes } else { 0.0 };
            worst = worst.max((c as f64 / s - expect).abs());
        }
        let mean_keep = (lo + len) as f64 / 2.0;
        for i in 0..len {
            worst = worst.max((first[i] as f64 / s - 1.0 / len as f64).abs());
            worst = worst.max((kept[i] as f64 / s - mean_keep / len as f64).abs());
        }
    }
    verdict(
        worst <= 0.02 && empty == 0,
        format!("lengths 1..=6 over {seeds} seeds: max frequency deviation {worst:.4} (<= 0.02), {empty} empty"),
    )
}

// ---------------------------------------------------------------- 9

/// Digest of every file in `dir`; run manifests are compared with their wall
/// clock duration removed.
fn digest_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let bytes = std::fs::read(&path).unwrap();
        let bytes = if name.starts_with("manifest-") {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            v.as_object_mut().unwrap().remove("duration_seconds");
            serde_json::to_vec(&v).unwrap()
        } else {
            bytes
        };
        out.insert(name, sha256_hex(&bytes));
    }
    out
}

fn cli(dir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["xanat".to_string(), "--out".into(), dir.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    xanat::cli::main_with_args(argv)
}

fn pipeline(dir: &Path) -> Vec<i32> {
    let cohort = dir.join("cohort.jsonl").display().to_string();
    let ckpt = dir.join("checkpoint.json").display().to_string();
    vec![
        cli(dir, &["--seed", "1", "synth"]),
        cli(dir, &["--seed", "1", "train", "--cohort", &cohort]),
        cli(dir, &["--seed", "1", "eval", "--cohort", &cohort, "--checkpoint", &ckpt]),
        cli(dir, &["--seed", "1", "diagnose", "--cohort", &cohort, "--checkpoint", &ckpt]),
        cli(dir, &["--seed", "1", "gradcheck", "--configs", "3"]),
        cli(dir, &["--seed", "1", "ablation", "--cohort", &cohort, "--max-steps", "40"]),
    ]
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let codes_a = pipeline(dir.path());
    let first = digest_dir(dir.path());
    let codes_b = pipeline(dir.path());
    let second = digest_dir(dir.path());
    let ok_codes = codes_a.iter().chain(&codes_b).all(|&c| c == 0);
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    verdict(
        ok_codes && first.len() == second.len() && differing.is_empty() && first.len() >= 10,
        format!(
            "synth/train/eval/diagnose/gradcheck/ablation rerun: {} files, {} differ, exit codes {:?}",
            first.len(),
            differing.len(),
            codes_a
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    results.push((1, "gradient correctness", gradient_correctness()));
    results.push((2, "closed-form loss values", closed_form_losses()));
    results.push((3, "exactly-once recombination", exactly_once_recombination()));

    let cohort = generate_cohort(&CohortConfig::default()).unwrap();
    let runs = ablation_runs(&cohort);
    results.push((4, "collapse mitigation", collapse_mitigation(&cohort, &runs)));
    results.push((5, "prompt robustness", prompt_robustness(&runs)));
    results.push((6, "ablation ordering", ablation_ordering(&runs)));

    results.push((7, "metric oracles", metric_oracles()));
    results.push((8, "augmentation distribution", augmentation_distribution()));
    results.push((9, "determinism", determinism()));

    let mut failed = 0;
    for (id, name, v) in &results {
        println!("{} criterion {id} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
