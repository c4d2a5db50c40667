//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (bypassing the harness capture) before asserting.

use std::io::Write;
use std::time::Instant;

use mccl::eval::{acc_metrics, assignment_cost, estimate_k, evaluate, hungarian, EvalConfig, EvalSpace};
use mccl::fusion::{fuse, fuse_batch, residual, FusionConfig, GateParams};
use mccl::losses::{hcl_loss, logit_distill_loss, sharpen, simgcd_cls_losses, KlOrder, SimGcdParams};
use mccl::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use mccl::trainer::gradcheck::{grad_check, grad_check_instance, GradCheckSetup, DEFAULT_STEP};
use mccl::trainer::{initial_params, train_two_stage, write_metrics_csv, Ablation, TrainConfig};
use mccl::voting::{
    build_vote_levels, consistency_scores, kmeans, vote_counts, KMeansParams, PairLabelMode, VoteCounts,
};
use mccl::{generate_synthetic, load_dataset, save_dataset, Mat, RunConfig, SyntheticConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance {id} [{name}]: {verdict} ({detail})");
}

#[test]
fn criterion_1_gradient_fidelity() {
    let start = Instant::now();
    let setup = GradCheckSetup::default();
    let (p32, ctx32, obj32) = grad_check_instance::<f32>(&setup).unwrap();
    let r32 = grad_check(&p32, &ctx32, &obj32, DEFAULT_STEP, 1e-3, false).unwrap();
    let (p64, ctx64, obj64) = grad_check_instance::<f64>(&setup).unwrap();
    let r64 = grad_check(&p64, &ctx64, &obj64, DEFAULT_STEP, 1e-6, false).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = r32.passed() && r64.passed() && secs < 60.0;
    report(
        1,
        "gradient fidelity",
        pass,
        &format!(
            "binary32 max rel {:.2e}, binary64 max rel {:.2e}, {secs:.1}s",
            r32.max_rel_err(),
            r64.max_rel_err()
        ),
    );
    assert!(pass, "{r32}\n{r64}");
}

/// Lexicographically first minimum-cost permutation, summed in row order.
fn brute_force_assignment(cost: &Mat<f64>) -> (Vec<usize>, f64) {
    let n = cost.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let total = (0..n).map(|r| cost.get(r, perm[r])).sum::<f64>();
        if best.as_ref().is_none_or(|b| total < b.1) {
            best = Some((perm.clone(), total));
        }
        // next permutation in lexicographic order
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
    best.unwrap()
}

#[test]
fn criterion_2_assignment_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for n in 2..=7 {
        for _ in 0..100 {
            let cost = Mat::from_vec(n, n, (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect());
            let (perm, best) = brute_force_assignment(&cost);
            let got = hungarian(&cost).unwrap();
            let cols: Vec<usize> = got.row_to_col.iter().map(|c| c.unwrap()).collect();
            if got.cost != best || assignment_cost(&cost, &got.row_to_col) != best || cols != perm {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 10.0;
    report(
        2,
        "assignment oracle",
        pass,
        &format!("{mismatches} mismatches over 600 matrices, {secs:.2}s"),
    );
    assert!(pass);
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mat<f64> {
    Mat::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-5.0..5.0)).collect())
}

#[test]
fn criterion_3_clustering_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = KMeansParams::default();
    let mut increases = 0;
    let mut nondeterministic = 0;
    for _ in 0..50 {
        let n = rng.random_range(10..80);
        let d = rng.random_range(1..6);
        let k = rng.random_range(1..8);
        let pts = random_points(&mut rng, n, d);
        let seed = rng.random();
        let r = kmeans(&pts, k, seed, &params).unwrap();
        for w in r.inertia_history.windows(2) {
            if w[1] > w[0] * (1.0 + 1e-12) {
                increases += 1;
            }
        }
        if kmeans(&pts, k, seed, &params).unwrap() != r {
            nondeterministic += 1;
        }
    }
    let mut nonzero = 0;
    for _ in 0..50 {
        let k = rng.random_range(1..10);
        let d = rng.random_range(1..5);
        let pts = random_points(&mut rng, k, d);
        if kmeans(&pts, k, rng.random(), &params).unwrap().inertia != 0.0 {
            nonzero += 1;
        }
    }
    let pass = increases == 0 && nondeterministic == 0 && nonzero == 0;
    report(
        3,
        "clustering invariants",
        pass,
        &format!("{increases} inertia increases, {nonzero} nonzero distinct-point fits, {nondeterministic} nondeterministic runs"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_consistency_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let levels_k = 5;
    let mut violations = Vec::new();
    for trial in 0..100 {
        let n = rng.random_range(8..=64);
        let n_total = 8;
        let levels = if trial % 2 == 0 {
            let pts = random_points(&mut rng, n, 3);
            let fs = random_points(&mut rng, n, 3);
            let ft = random_points(&mut rng, n, 3);
            build_vote_levels(&fs, &ft, &pts, n_total, levels_k, rng.random(), &KMeansParams::default()).unwrap()
        } else {
            (0..levels_k)
                .map(|_| (0..n).map(|_| rng.random_range(0..4)).collect())
                .collect()
        };
        let w = vote_counts(&levels).unwrap();
        let labels: Vec<Option<usize>> = (0..n)
            .map(|_| rng.random_bool(0.5).then(|| rng.random_range(0..3)))
            .collect();
        let eta = [0.0, 0.25, 0.5, 0.9, 1.0][trial % 5];
        let c: Mat<f64> = consistency_scores(&w, &labels, eta, PairLabelMode::SameClass).unwrap();
        for i in 0..n {
            if w.get(i, i) as usize != levels_k {
                violations.push(format!("w diagonal at {i}"));
            }
            let mut vote_part = 0.0;
            for j in 0..n {
                if w.get(i, j) != w.get(j, i) {
                    violations.push(format!("w asymmetric at ({i},{j})"));
                }
                let v = c.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    violations.push(format!("c out of range at ({i},{j})"));
                }
                if j != i {
                    let positive = matches!((labels[i], labels[j]), (Some(a), Some(b)) if a == b);
                    vote_part += v - if positive { 1.0 - eta } else { 0.0 };
                }
            }
            if w.off_diagonal_sum(i) > 0 && (vote_part - eta).abs() > 1e-6 {
                violations.push(format!("vote mass {vote_part} at row {i}"));
            }
        }
    }
    let worked = VoteCounts::from_raw(3, 5, vec![5, 4, 1, 4, 5, 2, 1, 2, 5]);
    let c: Mat<f64> = consistency_scores(&worked, &[None, None, None], 0.5, PairLabelMode::SameClass).unwrap();
    let c12 = c.get(0, 1);
    if (c12 - 0.4).abs() > 1e-12 {
        violations.push(format!("worked example c_12 = {c12}"));
    }
    let pass = violations.is_empty();
    report(
        4,
        "consistency scores",
        pass,
        &format!("{} violations over 100 tables, worked c_12 = {c12}", violations.len()),
    );
    assert!(pass, "{violations:?}");
}

fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (dst, x) in m.row_mut(r).iter_mut().zip(&v) {
            *dst = x / norm;
        }
    }
    m
}

#[test]
fn criterion_5_loss_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_hcl = 0.0f64;
    for _ in 0..50 {
        let f = random_unit_rows(&mut rng, 2, 6);
        let c = Mat::from_rows(&[vec![0.0, rng.random()], vec![rng.random(), 0.0]]);
        let tau = rng.random_range(0.05..1.0);
        let (l, _) = hcl_loss(&f, &c, tau, tau).unwrap();
        worst_hcl = worst_hcl.max(l.abs());
    }

    let mut worst_distill = 0.0f64;
    for order in [KlOrder::TeacherFirst, KlOrder::StudentFirst] {
        for _ in 0..20 {
            let mu: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let teacher = sharpen(&mu, 0.1);
            let logits: Vec<f64> = teacher.iter().map(|t| t.ln()).collect();
            let out = logit_distill_loss(
                &Mat::from_vec(1, 6, logits),
                &[Some(0)],
                &Mat::from_vec(1, 6, teacher),
                1.0,
                order,
            )
            .unwrap();
            worst_distill = worst_distill.max(out.loss.abs());
        }
    }

    let labels: Vec<Option<usize>> = vec![Some(0), Some(2), Some(1), Some(3)];
    let mut cls_s = Vec::new();
    for margin in [0.5, 1.0, 2.0] {
        let mut logits = Mat::zeros(4, 4);
        for (i, y) in labels.iter().enumerate() {
            logits.set(i, y.unwrap(), margin);
        }
        let out = simgcd_cls_losses([&logits, &logits], &labels, &SimGcdParams::default()).unwrap();
        cls_s.push(out.cls_s);
    }
    let decreasing = cls_s.windows(2).all(|w| w[1] < w[0]);
    let pass = worst_hcl < 1e-6 && worst_distill < 1e-6 && decreasing && cls_s[2] < 1e-6;
    report(
        5,
        "loss identities",
        pass,
        &format!("hcl {worst_hcl:.1e}, distill {worst_distill:.1e}, cls_s {cls_s:?}"),
    );
    assert!(pass);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_6_directional_ablation() {
    let start = Instant::now();
    let mut full = Vec::new();
    let mut base = Vec::new();
    for seed in 0..3u64 {
        let ds = generate_synthetic(&SyntheticConfig { seed, ..Default::default() }).unwrap();
        for (ablation, sink) in [(Ablation::default(), &mut full), (Ablation::baseline(), &mut base)] {
            let cfg = TrainConfig { seed, ablation, ..Default::default() };
            let out = train_two_stage::<f32>(&ds, &cfg).unwrap();
            assert!(out.metrics.iter().all(|m| m.total.is_finite()));
            sink.push(out.metrics.last().unwrap().all_acc);
        }
    }
    let (mf, mb) = (median(full.clone()), median(base.clone()));
    let secs = start.elapsed().as_secs_f64();
    let pass = mf >= mb + 0.05 && mf >= 0.80 && secs < 600.0;
    report(
        6,
        "directional ablation",
        pass,
        &format!("median full {mf:.4} {full:.4?}, baseline {mb:.4} {base:.4?}, {secs:.0}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_residual_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = FusionConfig::default();
    let c = 16;
    let n = 64;
    let mut worst_ulps = 0u32;
    for _ in 0..20 {
        let fst: Vec<f32> = (0..n * c).map(|_| rng.random_range(-256i32..256) as f32 / 128.0).collect();
        let delta: Vec<f32> = (0..n * c).map(|_| rng.random_range(-256i32..256) as f32 / 64.0).collect();
        let fs: Vec<f32> = fst.iter().zip(&delta).map(|(a, d)| a + d).collect();
        let ft: Vec<f32> = fst.iter().zip(&delta).map(|(a, d)| a - d).collect();
        assert!(residual(&fs, &ft, &fst).unwrap().iter().all(|&r| r == 0.0));
        let scale = rng.random_range(0.1..10.0);
        let gate = GateParams::<f32>::random(c, scale, &mut rng);
        for r in 0..n {
            let s = r * c..(r + 1) * c;
            let (out, _) = fuse(&fs[s.clone()], &ft[s.clone()], &fst[s.clone()], &gate, &cfg).unwrap();
            for (a, b) in out.iter().zip(&fst[s]) {
                worst_ulps = worst_ulps.max(a.to_bits().abs_diff(b.to_bits()));
            }
        }
        let (batch, _) = fuse_batch(
            &Mat::from_vec(n, c, fs),
            &Mat::from_vec(n, c, ft),
            &Mat::from_vec(n, c, fst.clone()),
            &gate,
            &cfg,
        )
        .unwrap();
        for (a, b) in batch.as_slice().iter().zip(&fst) {
            worst_ulps = worst_ulps.max(a.to_bits().abs_diff(b.to_bits()));
        }
    }
    let pass = worst_ulps <= 1;
    report(7, "residual no-op", pass, &format!("max deviation {worst_ulps} ulp"));
    assert!(pass);
}

#[test]
fn criterion_8_evaluation_protocol() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let known = [0u32, 2, 4];
    let gt: Vec<usize> = (0..300).map(|_| rng.random_range(0..6)).collect();
    let pred: Vec<usize> = gt
        .iter()
        .map(|&g| if rng.random_bool(0.7) { g } else { rng.random_range(0..7) })
        .collect();
    let reference = acc_metrics(&pred, &gt, &known).unwrap();
    let mut changed = 0;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut rng);
        let relabeled: Vec<usize> = pred.iter().map(|&p| perm[p] + 10).collect();
        let m = acc_metrics(&relabeled, &gt, &known).unwrap();
        if (m.all_acc, m.old_acc, m.new_acc) != (reference.all_acc, reference.old_acc, reference.new_acc) {
            changed += 1;
        }
    }

    let ds = generate_synthetic(&SyntheticConfig { noise_sigma: 0.0, ..Default::default() }).unwrap();
    let grid: Vec<usize> = (4..=16).collect();
    let params = initial_params::<f32>(&ds, &TrainConfig::default());
    let mut found = Vec::new();
    for space in [EvalSpace::ProjStf, EvalSpace::RawSt] {
        let cfg = EvalConfig { space, ..Default::default() };
        found.push(estimate_k(&ds, &params, &grid, &cfg).unwrap().k);
    }
    let pass = changed == 0 && found.iter().all(|&k| k == ds.num_classes_total);
    report(
        8,
        "evaluation protocol",
        pass,
        &format!(
            "{changed}/100 relabelings changed ACC, estimated k {found:?} for {} classes",
            ds.num_classes_total
        ),
    );
    assert!(pass);
}

/// gen, train and eval through files; returns the checkpoint, metrics CSV and report JSON bytes.
fn end_to_end(dir: &std::path::Path, cfg: &RunConfig) -> [Vec<u8>; 3] {
    let data = dir.join("data.vgcd");
    save_dataset(&generate_synthetic(&cfg.data).unwrap(), &data).unwrap();
    let ds = load_dataset(&data).unwrap();
    let out = train_two_stage::<f32>(&ds, &cfg.train).unwrap();
    let ckpt = dir.join("model.ckpt");
    save_checkpoint(&out.params, &ckpt).unwrap();
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &out.metrics).unwrap();
    let params = load_checkpoint::<f32>(&ckpt).unwrap();
    let report = evaluate(&ds, &params, ds.num_classes_total, &cfg.eval_config()).unwrap();
    [std::fs::read(&ckpt).unwrap(), csv, report.to_json().into_bytes()]
}

#[test]
fn criterion_9_determinism() {
    let cfg = RunConfig::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = end_to_end(a.path(), &cfg);
    let second = end_to_end(b.path(), &cfg);
    let names = ["checkpoint", "metrics", "report"];
    let differing: Vec<&str> = names
        .iter()
        .zip(first.iter().zip(&second))
        .filter(|(_, (x, y))| x != y)
        .map(|(n, _)| *n)
        .collect();
    let pass = differing.is_empty();
    report(
        9,
        "determinism",
        pass,
        &format!(
            "{} checkpoint bytes, {} metrics bytes, {} report bytes; differing: {differing:?}",
            first[0].len(),
            first[1].len(),
            first[2].len()
        ),
    );
    assert!(pass);
}
