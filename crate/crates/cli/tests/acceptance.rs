//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Criteria 6, 7 and 9 use the shipped quickstart config.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use fisherlda::commands::{self, Context, Overrides};
use fisherlda::config::LossName;
use fisherlda::manifest::{Manifest, SplitName};
use fisherlda::{checkpoint, runlog};
use fisherlda_core::dataset::DescriptorSet;
use fisherlda_core::evalrank::{average_precision, cmc_evaluate, map_evaluate, single_shot_trials, Metric};
use fisherlda_core::fisher::{fv_encode, fv_grad_gmm, fv_normalize, FvGradOptions};
use fisherlda_core::lda::{lda_grad_hidden, lda_objective, lda_solve, residual_ratio, scatter};
use fisherlda_core::linalg::generalized_symmetric_eigen;
use fisherlda_core::net::Mode;
use fisherlda_core::trainer::{TrainState, Trainer};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fisher_oracle() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut worst_norm = 0.0f64;
    let n = 60;
    for _ in 0..n {
        let k = r.random_range(1..=4);
        let d = r.random_range(1..=4);
        let m = r.random_range(1..=8);
        let model = random_gmm(&mut r, k, d);
        let x = gauss_matrix(&mut r, m, d, 1.5);
        let ours = fv_encode(&model, &x).map_err(|e| e.to_string())?;
        let oracle = fv_oracle(&model, &x);
        for (a, b) in ours.values.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        worst_norm = worst_norm.max((fv_normalize(&ours).values.norm() - 1.0).abs());
    }
    ensure(worst <= 1e-10, || format!("max deviation {worst:e} > 1e-10"))?;
    ensure(worst_norm <= 1e-9, || format!("norm off by {worst_norm:e}"))?;
    Ok(format!("{n} instances, max deviation {worst:.1e}, norm error {worst_norm:.1e}"))
}

fn fisher_gradients() -> Outcome {
    let mut r = rng(102);
    let n = 25;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let k = r.random_range(1..=3);
        let d = r.random_range(1..=3);
        let m = r.random_range(2..=6);
        let model = random_gmm(&mut r, k, d);
        let x = gauss_matrix(&mut r, m, d, 1.3);
        let u = DVector::from_fn(2 * k * d, |_, _| r.random_range(-1.0..1.0));
        let fast = fv_grad_gmm(&model, &x, &u, &FvGradOptions::EXACT).map_err(|e| e.to_string())?;
        let fd = fd_fv_gradient(&model, &x, &u, 1e-6);
        worst = worst.max(rel_err(&flatten_gmm_gradient(&fast), &flatten_gmm_gradient(&fd)));
    }
    ensure(worst < 1e-4, || format!("relative error {worst:e} >= 1e-4"))?;
    Ok(format!("{n} instances, max relative error {worst:.1e}"))
}

fn lda_gradients() -> Outcome {
    let mut r = rng(103);
    let (lambda, eps) = (1e-3, 1.0);
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut worst_sum = 0.0f64;
    while checked < 20 {
        let (x, y) = random_lda_batch(&mut r);
        let s = scatter(&x, &y).map_err(|e| e.to_string())?;
        let sol = lda_solve(&s, lambda).map_err(|e| e.to_string())?;
        let v: Vec<f64> = sol.eigenvalues.iter().copied().collect();
        let gap = v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let edge = v.iter().map(|&e| (e - (v[0] + eps)).abs()).fold(f64::INFINITY, f64::min);
        if gap < 1e-3 || edge < 1e-3 {
            continue;
        }
        let (_, sol, mask) = lda_objective(&x, &y, lambda, eps).map_err(|e| e.to_string())?;
        let g = lda_grad_hidden(&x, &y, &sol, &mask).map_err(|e| e.to_string())?;
        let fd = fd_matrix(&x, 1e-6, |xp| lda_value(xp, &y, lambda, eps));
        worst = worst.max(rel_err(g.as_slice(), fd.as_slice()));
        for col in g.column_iter() {
            worst_sum = worst_sum.max(col.sum().abs());
        }
        checked += 1;
    }
    ensure(worst < 1e-4, || format!("relative error {worst:e} >= 1e-4"))?;
    ensure(worst_sum < 1e-8, || format!("column sum {worst_sum:e} >= 1e-8"))?;
    Ok(format!("{checked} instances, max relative error {worst:.1e}, max column sum {worst_sum:.1e}"))
}

/// Residuals of random, ill-conditioned and hand-computed solves. Solves
/// inside training runs are checked by `lda_solve` itself, which refuses to
/// return a solution above the same bound.
fn eigen_residuals() -> Outcome {
    let mut r = rng(104);
    let mut worst = 0.0f64;
    let mut solves = 0;
    for i in 0..60 {
        let (x, y) = if i < 40 {
            random_lda_batch(&mut r)
        } else {
            let labels: Vec<usize> = (0..16).map(|j| j / 2).collect();
            (gauss_matrix(&mut r, 16, 32, 50.0), labels)
        };
        let s = scatter(&x, &y).map_err(|e| e.to_string())?;
        let sol = lda_solve(&s, 1e-3).map_err(|e| e.to_string())?;
        worst = worst.max(residual_ratio(&s, &sol));
        solves += 1;
    }
    ensure(worst <= 1e-6, || format!("residual ratio {worst:e} > 1e-6"))?;

    let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
    let s = scatter(&x, &[0, 0, 1, 1]).map_err(|e| e.to_string())?;
    let b = &s.s_w + DMatrix::<f64>::identity(2, 2) * 1e-3;
    let all = generalized_symmetric_eigen(&s.s_b, &b).map_err(|e| e.to_string())?;
    let exact = [-(2.0 / 3.0) / 2.001, (4.0 / 3.0) / 0.001];
    ensure(
        (all.values[0] - exact[0]).abs() < 1e-12 && (all.values[1] - exact[1]).abs() < 1e-9,
        || format!("hand example gave {:?}, expected {exact:?}", all.values.as_slice()),
    )?;
    ensure(
        (all.values[0] + 0.33317).abs() < 5e-6 && (all.values[1] - 1333.33).abs() < 5e-3,
        || format!("hand example {:?} differs from (-0.33317, 1333.33)", all.values.as_slice()),
    )?;
    Ok(format!(
        "{solves} solves, max residual ratio {worst:.1e}; hand example ({:.5}, {:.2})",
        all.values[0], all.values[1]
    ))
}

fn net_gradients() -> Outcome {
    let mut r = rng(105);
    let n = 24;
    let mut worst = 0.0f64;
    for case in 0..n {
        let bn = case % 2 == 0;
        let dropout = if case % 3 == 0 { 0.3 } else { 0.0 };
        let mode = if case % 4 == 3 { Mode::Eval } else { Mode::Train };
        let net = random_net(&mut r, bn, dropout);
        let rows = r.random_range(3..=6);
        let x = gauss_matrix(&mut r, rows, net.input_dim(), 1.0);
        let u = gauss_matrix(&mut r, rows, net.output_dim(), 1.0);
        let seed = case as u64;
        let (_, trace) = net.forward(&x, mode, seed).map_err(|e| e.to_string())?;
        let (grads, dx) = net.backward(&trace, &u).map_err(|e| e.to_string())?;
        let (fd_params, fd_dx) = fd_net(&net, &x, &u, mode, seed, 1e-6);
        worst = worst
            .max(rel_err(&flatten_net_grads(&grads), &fd_params))
            .max(rel_err(dx.as_slice(), fd_dx.as_slice()));
    }
    ensure(worst < 1e-4, || format!("relative error {worst:e} >= 1e-4"))?;
    Ok(format!("{n} nets (half with batch norm), max relative error {worst:.1e}"))
}

/// The shipped quickstart config and its synthetic dataset, generated
/// through the `synth` command into a scratch directory.
struct Shipped {
    _dir: tempfile::TempDir,
    ctx: Context,
    train: Vec<DescriptorSet>,
}

impl Shipped {
    fn load() -> Result<Self, String> {
        let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quickstart.json");
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let overrides = Overrides {
            out: Some(dir.path().to_path_buf()),
            ..Overrides::default()
        };
        let mut ctx = commands::load_context(&config, &overrides).map_err(|e| e.to_string())?;
        let manifest_path = commands::synth(&ctx).map_err(|e| e.to_string())?;
        ctx.config.manifest = Some(manifest_path.clone());
        let manifest = Manifest::read(&manifest_path).map_err(|e| e.to_string())?;
        let train = manifest.load_split(SplitName::Train).map_err(|e| e.to_string())?;
        Ok(Shipped { _dir: dir, ctx, train })
    }

    fn with(&self, seed: u64, loss: LossName) -> Context {
        let mut ctx = self.ctx.clone();
        ctx.config.seed = seed;
        ctx.config.loss_kind = loss;
        ctx
    }

    /// Test-split rank-1 of a trained state, through the `eval` command.
    fn rank1(&self, ctx: &Context, state: &TrainState) -> Result<f64, String> {
        let path: PathBuf = ctx.config.out_dir.join(format!("acceptance-{}.dlfc", ctx.config.seed));
        checkpoint::write(&path, state).map_err(|e| e.to_string())?;
        let (summary, _) = commands::eval(ctx, Some(&path), false).map_err(|e| e.to_string())?;
        Ok(summary.rank1)
    }
}

fn end_to_end(shipped: &Shipped) -> Outcome {
    let cfg = &shipped.ctx.config;
    ensure(
        cfg.synth_identities == 8 && cfg.hidden_widths.iter().all(|&w| w <= 32) && cfg.epochs <= 30,
        || "quickstart config is outside the desk-scale budget".into(),
    )?;
    ensure(cfg.channels.iter().all(|c| c.components == 4), || "expected K = 4".into())?;
    let cameras: std::collections::BTreeSet<u32> = shipped.train.iter().map(|i| i.camera_id).collect();
    ensure(cameras.len() == 2, || format!("expected 2 cameras, found {}", cameras.len()))?;

    let mut trainer = Trainer::new(cfg.train_config(), &shipped.train).map_err(|e| e.to_string())?;
    let steps = trainer.run().map_err(|e| e.to_string())?;
    let state = trainer.into_state();
    let (first, last) = (state.log[0].loss, state.log.last().unwrap().loss);
    ensure(last > first, || format!("objective {first} -> {last} did not increase"))?;
    ensure(!steps.is_empty(), || "no GMM update round ran".into())?;
    for (i, s) in steps.iter().enumerate() {
        ensure(s.objective_after >= s.objective_before, || {
            format!("GMM round {i}: {} < {} at eta = 0", s.objective_after, s.objective_before)
        })?;
    }
    let rank1 = shipped.rank1(&shipped.ctx, &state)?;
    ensure(rank1 >= 0.9, || format!("test rank-1 {rank1} < 0.9"))?;
    let etas: Vec<f64> = steps.iter().map(|s| s.eta).collect();
    Ok(format!(
        "{} epochs, objective {first:.3} -> {last:.3}, {} GMM rounds non-worsening (eta {etas:?}), test rank-1 {rank1}",
        state.epoch,
        steps.len()
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ablation(shipped: &Shipped) -> Outcome {
    let mut lda = Vec::new();
    let mut ce = Vec::new();
    for seed in 0..5 {
        for (loss, out) in [(LossName::Lda, &mut lda), (LossName::CrossEntropy, &mut ce)] {
            let ctx = shipped.with(seed, loss);
            let state = fisherlda_core::trainer::fit(ctx.config.train_config(), &shipped.train)
                .map_err(|e| format!("seed {seed}, {loss:?}: {e}"))?;
            out.push(shipped.rank1(&ctx, &state)?);
        }
    }
    let (ml, mc) = (median(lda.clone()), median(ce.clone()));
    ensure(ml >= mc, || format!("median rank-1 lda {ml} < cross-entropy {mc} ({lda:?} vs {ce:?})"))?;
    Ok(format!("median rank-1 lda {ml} vs cross-entropy {mc} (lda {lda:?}, ce {ce:?})"))
}

fn evaluation_oracles() -> Outcome {
    let mut r = rng(108);
    let n = 150;
    for case in 0..n {
        let ids = r.random_range(2..=5);
        let dim = r.random_range(1..=3);
        let (ng, np) = (r.random_range(ids..=ids + 6), r.random_range(ids..=ids + 4));
        let (gallery, gl) = random_ranking_instance(&mut r, ids, ng, dim);
        let (probe, pl) = random_ranking_instance(&mut r, ids, np, dim);
        let trials = r.random_range(1..=4);
        let seed = case as u64;
        let res = cmc_evaluate(&probe, &pl, &gallery, &gl, trials, seed, Metric::Euclidean).map_err(|e| e.to_string())?;
        let subsets = single_shot_trials(&gl, trials, seed);
        let brute = brute_cmc(&probe, &pl, &gallery, &gl, &subsets);
        ensure(res.cmc == brute, || format!("instance {case}: CMC {:?} vs oracle {brute:?}", res.cmc))?;
        let (map, skipped) = brute_map(&probe, &pl, &gallery, &gl);
        let m = map_evaluate(&probe, &pl, &gallery, &gl, Metric::Euclidean).map_err(|e| e.to_string())?;
        ensure(m.map == map && m.excluded == skipped && res.map == map, || {
            format!("instance {case}: mAP {} vs oracle {map}", m.map)
        })?;
    }
    let ap = average_precision(&[true, false, true, false]).unwrap_or(f64::NAN);
    ensure((ap - 5.0 / 6.0).abs() < 1e-15, || format!("hand AP {ap} != 5/6"))?;
    Ok(format!("{n} instances match exhaustive CMC and mAP exactly; hand AP {ap:.6}"))
}

fn determinism(shipped: &Shipped) -> Outcome {
    let cfg = shipped.ctx.config.train_config();
    let a = fisherlda_core::trainer::fit(cfg.clone(), &shipped.train).map_err(|e| e.to_string())?;
    let b = fisherlda_core::trainer::fit(cfg, &shipped.train).map_err(|e| e.to_string())?;
    let (ca, cb) = (checkpoint::encode(&a), checkpoint::encode(&b));
    ensure(ca == cb, || "checkpoints differ".into())?;
    let (la, lb) = (runlog::to_ndjson(&a.log), runlog::to_ndjson(&b.log));
    ensure(la == lb, || "logs differ".into())?;
    Ok(format!("{} checkpoint bytes and {} log bytes identical", ca.len(), la.len()))
}

fn main() {
    let shipped = &Shipped::load();
    let with_shipped = |f: fn(&Shipped) -> Outcome| -> Check<'_> {
        Box::new(move || shipped.as_ref().map_err(Clone::clone).and_then(f))
    };
    let criteria: Vec<(u32, &str, Duration, Check)> = vec![
        (1, "fisher vector oracle", Duration::from_secs(10), Box::new(fisher_oracle)),
        (2, "fisher vector gradients", Duration::from_secs(60), Box::new(fisher_gradients)),
        (3, "lda gradients", Duration::from_secs(60), Box::new(lda_gradients)),
        (4, "eigen residuals", Duration::MAX, Box::new(eigen_residuals)),
        (5, "network gradients", Duration::from_secs(30), Box::new(net_gradients)),
        (6, "end-to-end synthetic run", Duration::from_secs(300), with_shipped(end_to_end)),
        (7, "lda vs cross-entropy", Duration::MAX, with_shipped(ablation)),
        (8, "evaluation oracles", Duration::from_secs(10), Box::new(evaluation_oracles)),
        (9, "determinism", Duration::MAX, with_shipped(determinism)),
    ];
    let mut failed = 0;
    for (id, name, limit, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|msg| {
            if elapsed > *limit {
                Err(format!("took {elapsed:.1?}, limit {limit:?}; {msg}"))
            } else {
                Ok(msg)
            }
        });
        match outcome {
            Ok(msg) => println!("criterion {id} PASS  {name}: {msg} [{elapsed:.2?}]"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id} FAIL  {name}: {msg} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
