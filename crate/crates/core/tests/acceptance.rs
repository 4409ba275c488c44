//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sste_core::diagnostics::RunRecord;
use sste_core::engine::{
    Activation, Batch, EffectiveWeight, LayerMode, LossKind, Network, Pass, SparseSettings, Targets,
};
use sste_core::experiment::{run_ablation_matrix, run_toy, run_training, ExperimentConfig, Mode, Task};
use sste_core::mvue::{mvue_block, RngStream};
use sste_core::rescale::{beta_keep_l1, beta_min_mse};
use sste_core::sparse::{hard_threshold, soft_threshold};
use sste_core::{FloatFormat, PruneConfig, RescaleRecipe, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// 1 ------------------------------------------------------------------------

fn toy_reproduction() -> Outcome {
    let base = ExperimentConfig { train_steps: 100, ..ExperimentConfig::for_task(Task::Toy) };
    // one GD step by hand in f64: g = 2(w1 - w2) (1, -1)
    let (alpha, w1, w2) = (0.25f64, 0.2f64, 0.1f64);
    let g = 2.0 * (w1 - w2);
    let oracle = [w1 - alpha * g, w2 + alpha * g];
    ensure(oracle[0] == oracle[1] && (oracle[0] - 0.15).abs() <= f64::EPSILON, || format!("oracle {oracle:?}"))?;
    let dense = run_toy(&ExperimentConfig { mode: Mode::Dense, ..base.clone() }).map_err(|e| e.to_string())?;
    ensure(dense.weights[1] == oracle, || format!("dense w_2 = {:?}, expected {oracle:?}", dense.weights[1]))?;
    ensure(dense.weights[1..].iter().all(|w| *w == oracle), || "dense left the minimum".into())?;

    let hard = run_toy(&ExperimentConfig { mode: Mode::HardSte, ..base }).map_err(|e| e.to_string())?;
    for (k, w) in hard.weights.iter().enumerate() {
        let expect = if k % 2 == 0 { [0.2, 0.1] } else { [0.1, 0.2] };
        ensure(*w == expect, || format!("hard-STE step {k}: {w:?} != {expect:?}"))?;
    }
    let g: Vec<f64> = hard.effective.iter().map(|w| (w[0] - w[1]).powi(2)).collect();
    ensure(g.iter().all(|&v| v == g[0]) && (g[0] - 0.04).abs() < 1e-16, || format!("g(w̃) varies: {:?}", &g[..4]))?;
    Ok(format!("dense -> (0.15, 0.15) at step 1; hard-STE swaps for {} steps, g(w̃) = {}", hard.effective.len(), g[0]))
}

// 2 ------------------------------------------------------------------------

fn continuity() -> Outcome {
    const BLOCKS: usize = 100_000;
    let cfg = PruneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<f64> = (0..BLOCKS * 4).map(|_| gaussian(&mut rng)).collect();
    let s_a = soft_threshold(&Tensor::vector(a.clone()), &cfg).map_err(|e| e.to_string())?;
    let mut violations = 0usize;
    let mut worst = 0.0f64;
    for exp in 1..=8 {
        let delta = 10f64.powi(-exp);
        let b: Vec<f64> = a.iter().map(|&x| x + delta * rng.random_range(-1.0..=1.0)).collect();
        let s_b = soft_threshold(&Tensor::vector(b.clone()), &cfg).map_err(|e| e.to_string())?;
        for blk in 0..BLOCKS {
            let r = blk * 4..blk * 4 + 4;
            let din = a[r.clone()].iter().zip(&b[r.clone()]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let dout = s_a.values.data()[r.clone()]
                .iter()
                .zip(&s_b.values.data()[r.clone()])
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            // floating-point slack: a few ulps of the block's magnitude
            let scale = a[r].iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if dout > 2.0 * din + 8.0 * f64::EPSILON * scale {
                violations += 1;
            }
            if din > 0.0 {
                worst = worst.max(dout / din);
            }
        }
    }
    ensure(violations == 0, || format!("{violations} Lipschitz violations"))?;

    // hard thresholding at a tie: a tiny push on index 2 swaps it with index 1
    let mut jump = 0.0f64;
    let mut witnesses = 0;
    for _ in 0..1000 {
        let top = 1.0 + rng.random::<f64>();
        let tie = 1.0 + rng.random::<f64>() * (top - 1.0);
        let a = vec![top, tie, tie, 0.1 * rng.random::<f64>()];
        let mut b = a.clone();
        b[2] += 1e-6 * rng.random_range(0.1..=1.0);
        let ha = hard_threshold(&Tensor::vector(a), &cfg).map_err(|e| e.to_string())?;
        let hb = hard_threshold(&Tensor::vector(b), &cfg).map_err(|e| e.to_string())?;
        let d = ha.values.data().iter().zip(hb.values.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if d >= 0.999 {
            witnesses += 1;
        }
        jump = jump.max(d);
    }
    ensure(witnesses > 0, || format!("largest hard-threshold jump {jump}"))?;
    Ok(format!(
        "{BLOCKS} blocks x 8 deltas, 0 violations (max ratio {worst:.4}); hard jump {jump:.4} under 1e-6 ({witnesses}/1000)"
    ))
}

// 3 ------------------------------------------------------------------------

fn beta_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid: Vec<f64> = (0..=4000).map(|i| i as f64 * 1e-3).collect();
    let mut max_gap = 0.0f64;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for sample in 0..1000 {
        let len = 4 * rng.random_range(16..=64);
        let w: Vec<f64> = (0..len).map(|_| gaussian(&mut rng) * rng.random_range(0.1..3.0)).collect();
        let w = Tensor::vector(w);
        let cfg = PruneConfig::new(2, 4, 0.0, RescaleRecipe::MinMse).map_err(|e| e.to_string())?;
        let s = soft_threshold(&w, &cfg).map_err(|e| e.to_string())?;
        let mse = |b: f64| w.data().iter().zip(s.values.data()).map(|(w, s)| (w - b * s).powi(2)).sum::<f64>();
        let star = beta_min_mse(&w, &s);
        if star.degenerate {
            continue;
        }
        let (grid_best, _) =
            grid.iter()
                .map(|&b| (b, mse(b)))
                .fold((f64::NAN, f64::INFINITY), |acc, (b, m)| if m < acc.1 { (b, m) } else { acc });
        lo = lo.min(star.value);
        hi = hi.max(star.value);
        let gap = (star.value - grid_best).abs();
        max_gap = max_gap.max(gap);
        ensure(gap <= 1e-3, || format!("sample {sample}: beta* {} vs grid {grid_best}", star.value))?;
        let floor = mse(star.value);
        let l1 = mse(beta_keep_l1(&w, &s).value);
        let tol = 1e-12 * w.norm_sq();
        ensure(floor <= l1 + tol && floor <= mse(1.0) + tol, || {
            format!("sample {sample}: MSE(beta*) {floor} vs keep-L1 {l1}, beta=1 {}", mse(1.0))
        })?;
    }
    Ok(format!(
        "1000 tensors, beta* in [{lo:.3}, {hi:.3}], max |beta* - grid| = {max_gap:.2e}; MSE(beta*) <= keep-L1, beta=1 on all"
    ))
}

// 4 ------------------------------------------------------------------------

fn mvue_statistics() -> Outcome {
    const BLOCKS: u64 = 1000;
    const DRAWS: u64 = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut dominated = 0;
    let mut worst_z = 0.0f64;
    for blk in 0..BLOCKS {
        let a: [f64; 4] = std::array::from_fn(|_| gaussian(&mut rng));
        let mut sum = [0.0; 4];
        let mut sum_sq = [0.0; 4];
        for d in 0..DRAWS {
            let mut stream = RngStream::new(4, blk, d, 0);
            let (out, _) = mvue_block(&a, &mut stream);
            let nnz = out.iter().filter(|&&v| v != 0.0).count();
            ensure(nnz <= 2, || format!("block {blk} draw {d}: {nnz} nonzeros"))?;
            for i in 0..4 {
                sum[i] += out[i];
                sum_sq[i] += out[i] * out[i];
            }
        }
        let n = DRAWS as f64;
        let mut total_var = 0.0;
        for i in 0..4 {
            let mean = sum[i] / n;
            let var = (sum_sq[i] / n - mean * mean).max(0.0) * n / (n - 1.0);
            total_var += var;
            let se = (var / n).sqrt();
            let err = (mean - a[i]).abs();
            if se > 0.0 {
                worst_z = worst_z.max(err / se);
            }
            ensure(err <= 4.0 * se + 1e-12 * a[i].abs().max(1.0), || {
                format!("block {blk} coord {i}: mean {mean} vs {} ({:.2} SE)", a[i], err / se)
            })?;
        }
        // a uniformly random pair keeps each coordinate with probability 1/2: Var_i = a_i²
        let uniform: f64 = a.iter().map(|x| x * x).sum();
        if total_var <= uniform {
            dominated += 1;
        }
    }
    let frac = dominated as f64 / BLOCKS as f64;
    ensure(frac >= 0.95, || format!("variance <= uniform baseline on only {:.1}% of blocks", 100.0 * frac))?;
    Ok(format!(
        "{BLOCKS} blocks x {DRAWS} draws, all 2:4; worst |mean err| {worst_z:.2} SE; dominates uniform on {:.1}%",
        100.0 * frac
    ))
}

// 5 ------------------------------------------------------------------------

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        0.0
    } else {
        diff / norm
    }
}

fn regression_batch(rng: &mut ChaCha8Rng, n: usize, inp: usize, out: usize) -> Batch {
    let x = Tensor::matrix(n, inp, (0..n * inp).map(|_| gaussian(rng)).collect()).unwrap();
    let y = Tensor::matrix(n, out, (0..n * out).map(|_| gaussian(rng)).collect()).unwrap();
    Batch { x, y: Targets::Values(y) }
}

fn class_batch(rng: &mut ChaCha8Rng, n: usize, inp: usize, classes: usize) -> Batch {
    let x = Tensor::matrix(n, inp, (0..n * inp).map(|_| gaussian(rng)).collect()).unwrap();
    Batch { x, y: Targets::Classes((0..n).map(|_| rng.random_range(0..classes)).collect()) }
}

/// Central differences of `f` around `params`, one coordinate at a time.
fn finite_diff(params: &[Tensor], f: impl Fn(&[Tensor]) -> f64) -> Vec<f64> {
    finite_diff_where(params, |_, _| true, f)
}

/// As [`finite_diff`], restricted to coordinates `(tensor, index)` accepted by `keep`.
fn finite_diff_where(params: &[Tensor], keep: impl Fn(usize, usize) -> bool, f: impl Fn(&[Tensor]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut out = Vec::new();
    let mut p = params.to_vec();
    for t in 0..p.len() {
        for i in 0..p[t].len() {
            if !keep(t, i) {
                continue;
            }
            let orig = p[t].data()[i];
            p[t].data_mut()[i] = orig + h;
            let up = f(&p);
            p[t].data_mut()[i] = orig - h;
            let down = f(&p);
            p[t].data_mut()[i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// Randomizes biases so their gradients are exercised away from zero.
fn jitter_biases(net: &mut Network, rng: &mut ChaCha8Rng) {
    let nl = net.linears.len();
    let mut values = net.param_values();
    for b in &mut values[nl..] {
        b.data_mut().iter_mut().for_each(|v| *v = 0.1 * gaussian(rng));
    }
    net.set_param_values(&values).unwrap();
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut dense_nets = Vec::new();
    for (k, act) in [Activation::Gelu, Activation::Relu].into_iter().enumerate() {
        let s = SparseSettings::default();
        dense_nets.push((
            format!("mlp-mse-{k}"),
            Network::mlp(&[8, 12, 8, 3], act, LossKind::Mse, false, &s, 50 + k as u64).unwrap(),
            regression_batch(&mut rng, 6, 8, 3),
        ));
        dense_nets.push((
            format!("mlp-ce-{k}"),
            Network::mlp(&[8, 16, 4], act, LossKind::SoftmaxCrossEntropy, false, &s, 60 + k as u64).unwrap(),
            class_batch(&mut rng, 6, 8, 4),
        ));
        dense_nets.push((
            format!("ffn-{k}"),
            Network::ffn_stack(8, 8, 16, 2, 4, act, LossKind::SoftmaxCrossEntropy, &s, 70 + k as u64).unwrap(),
            class_batch(&mut rng, 5, 8, 4),
        ));
    }
    for (name, mut net, batch) in dense_nets {
        ensure(net.num_params() <= 1000, || format!("{name} has {} params", net.num_params()))?;
        jitter_biases(&mut net, &mut rng);
        net.forward_backward(&batch, &Pass::eval()).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = net.grads().iter().flat_map(|g| g.data().to_vec()).collect();
        let fd = finite_diff(&net.param_values(), |p| net.loss_at(p, None, &batch).unwrap());
        let e = rel_err(&analytic, &fd);
        worst = worst.max(e);
        ensure(e <= 1e-5, || format!("{name}: relative error {e:.3e}"))?;
    }

    // fixed-mask sparse: hard-STE chain rule through w ⊙ m, S-STE w.r.t. the kept entries of w̃
    for mode in [LayerMode::HardSte, LayerMode::SSte] {
        let s = SparseSettings { mode, ..SparseSettings::default() };
        let mut net =
            Network::ffn_stack(8, 8, 16, 2, 4, Activation::Gelu, LossKind::SoftmaxCrossEntropy, &s, 80).unwrap();
        jitter_biases(&mut net, &mut rng);
        let batch = class_batch(&mut rng, 5, 8, 4);
        net.forward_backward(&batch, &Pass::eval()).map_err(|e| e.to_string())?;
        let grads = net.grads();
        let effs = net.effective_weights().map_err(|e| e.to_string())?;
        let (analytic, fd) = match mode {
            LayerMode::HardSte => {
                let masks = net.tracked_masks().map_err(|e| e.to_string())?;
                let mut analytic = Vec::new();
                for (i, g) in grads.iter().enumerate() {
                    match masks.get(i).and_then(|m| m.as_ref()) {
                        Some(m) => {
                            analytic.extend(g.data().iter().zip(m.bits()).map(|(g, &k)| if k { *g } else { 0.0 }))
                        }
                        None => analytic.extend_from_slice(g.data()),
                    }
                }
                let fd = finite_diff(&net.param_values(), |p| net.loss_at(p, Some(&masks), &batch).unwrap());
                (analytic, fd)
            }
            _ => {
                let values: Vec<Tensor> = effs.iter().map(|e| e.values.clone()).collect();
                let rebuild = |v: &[Tensor]| -> Vec<EffectiveWeight> {
                    effs.iter().zip(v).map(|(e, v)| EffectiveWeight { values: v.clone(), ..e.clone() }).collect()
                };
                let kept = |t: usize, i: usize| effs[t].mask.as_ref().is_none_or(|m| m.bits()[i]);
                let fd = finite_diff_where(&values, kept, |v| net.loss_with(&batch, rebuild(v)).unwrap());
                let analytic = grads[..effs.len()]
                    .iter()
                    .enumerate()
                    .flat_map(|(t, g)| g.data().iter().enumerate().filter(move |&(i, _)| kept(t, i)).map(|(_, &v)| v))
                    .collect();
                (analytic, fd)
            }
        };
        let e = rel_err(&analytic, &fd);
        worst = worst.max(e);
        ensure(e <= 1e-5, || format!("{mode:?} fixed mask: relative error {e:.3e}"))?;
    }
    Ok(format!("6 dense nets + hard-STE/S-STE fixed-mask nets, worst relative error {worst:.2e}"))
}

// 6 ------------------------------------------------------------------------

fn fp8_emulation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut report = Vec::new();
    for fmt in [FloatFormat::E4M3, FloatFormat::E5M2] {
        let grid = fmt.grid();
        for &g in &grid {
            let r = fmt.round(g);
            ensure(r.to_bits() == g.to_bits() || (r == 0.0 && g == 0.0), || format!("{}: {g} -> {r}", fmt.name()))?;
        }
        let max = fmt.max_value();
        let lo = fmt.min_subnormal().log2() - 2.0;
        let hi = max.log2() + 2.0;
        let mut samples: Vec<f64> = (0..200_000)
            .map(|_| {
                let mag = 2f64.powf(rng.random_range(lo..hi));
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        // midpoints between neighbours exercise the tie rule
        samples.extend(grid.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        samples.extend(grid.iter().flat_map(|&g| [g.next_up(), g.next_down()]));
        for &x in &samples {
            let (a, b) = (fmt.round(x), fmt.round(-x));
            ensure(a == -b, || format!("{}: round(-{x}) = {b} but round({x}) = {a}", fmt.name()))?;
        }
        samples.sort_by(f64::total_cmp);
        for w in samples.windows(2) {
            let (a, b) = (fmt.round(w[0]), fmt.round(w[1]));
            ensure(a <= b, || format!("{}: {} -> {a} but {} -> {b}", fmt.name(), w[0], w[1]))?;
        }
        report.push(format!("{} grid {} points exact, {} probes", fmt.name(), grid.len(), samples.len()));
    }
    Ok(report.join("; "))
}

// 7 ------------------------------------------------------------------------

struct Dynamics {
    hard_mispredicted: usize,
    late: [f64; 3],
    val: [f64; 3],
}

impl Dynamics {
    fn checks(&self) -> [bool; 3] {
        let [dense, hard, soft] = self.late;
        [self.hard_mispredicted >= 1, soft < hard && soft <= 2.0 * dense, self.val[2] <= self.val[1]]
    }
}

fn dynamics_for(seed: u64) -> Result<Dynamics, String> {
    let base = ExperimentConfig { seed, ..ExperimentConfig::for_task(Task::SyntheticClassification) };
    let configs: Vec<ExperimentConfig> = [Mode::Dense, Mode::HardSte, Mode::SSte]
        .iter()
        .map(|&mode| ExperimentConfig { mode, ..base.clone() })
        .collect();
    let runs = run_ablation_matrix(&configs).map_err(|e| e.to_string())?;
    let records: Vec<&RunRecord> = runs.iter().map(|r| &r.record).collect();
    let late = |r: &RunRecord| r.summary.flip_rate_by_phase.map_or(f64::NAN, |p| p.late);
    let val = |r: &RunRecord| r.summary.val_loss.unwrap_or(f64::NAN);
    Ok(Dynamics {
        hard_mispredicted: records[1].summary.mispredicted_steps,
        late: [late(records[0]), late(records[1]), late(records[2])],
        val: [val(records[0]), val(records[1]), val(records[2])],
    })
}

fn optimization_dynamics() -> Outcome {
    let describe = |seed: u64, d: &Dynamics| {
        format!(
            "seed {seed}: hard mispredicted {}, late flip dense/hard/s-ste {:.2e}/{:.2e}/{:.2e}, val hard {:.4} s-ste {:.4}",
            d.hard_mispredicted, d.late[0], d.late[1], d.late[2], d.val[1], d.val[2]
        )
    };
    let first = dynamics_for(0)?;
    if first.checks().iter().all(|&c| c) {
        return Ok(describe(0, &first));
    }
    // soft failure: majority over five seeds, per property
    println!("  flagged: {}", describe(0, &first));
    let mut passes = [0usize; 3];
    let mut first = Some(first);
    for seed in 0..5 {
        let d = match first.take() {
            Some(d) => d,
            None => dynamics_for(seed)?,
        };
        println!("  sweep {}", describe(seed, &d));
        for (p, ok) in passes.iter_mut().zip(d.checks()) {
            *p += usize::from(ok);
        }
    }
    ensure(passes.iter().all(|&p| p >= 3), || format!("seed sweep passes (a, b, c) = {passes:?} of 5"))?;
    Ok(format!("seed 0 flagged, 5-seed majority holds {passes:?}"))
}

// 8 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let configs = [
        ExperimentConfig {
            mode: Mode::SSte,
            mvue_grad_z: true,
            fp8_forward: "e4m3".into(),
            fp8_backward: "e5m2".into(),
            train_steps: 40,
            ..ExperimentConfig::for_task(Task::SyntheticClassification)
        },
        ExperimentConfig {
            mode: Mode::SrSte,
            srste_lambda_w: Some(2e-4),
            train_steps: 60,
            ..ExperimentConfig::for_task(Task::CharLmFfn)
        },
        ExperimentConfig { mode: Mode::HardSte, ..ExperimentConfig::for_task(Task::SyntheticRegression) },
    ];
    let csv = |c: &ExperimentConfig| -> Result<String, String> {
        run_training(c).and_then(|r| r.record.trace_csv()).map_err(|e| e.to_string())
    };
    for c in &configs {
        let (a, b) = (csv(c)?, csv(c)?);
        ensure(a == b, || format!("{} traces differ", c.display_label()))?;
    }
    let toy = ExperimentConfig { mode: Mode::SSte, ..ExperimentConfig::for_task(Task::Toy) };
    let t = |c: &ExperimentConfig| run_toy(c).and_then(|r| r.record.trace_csv()).map_err(|e| e.to_string());
    ensure(t(&toy)? == t(&toy)?, || "toy traces differ".into())?;
    Ok(format!("{} configs (incl. MVUE + FP8, minibatch Adam, toy) bitwise-identical trace.csv", configs.len() + 1))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 8] = [
        ("1 toy reproduction", toy_reproduction, Duration::from_secs(1)),
        ("2 soft-threshold continuity", continuity, Duration::from_secs(10)),
        ("3 beta optimality", beta_optimality, Duration::from_secs(10)),
        ("4 mvue statistics", mvue_statistics, Duration::from_secs(60)),
        ("5 gradient checks", gradient_checks, Duration::from_secs(30)),
        ("6 fp8 emulation", fp8_emulation, Duration::from_secs(5)),
        ("7 optimization dynamics", optimization_dynamics, Duration::from_secs(600)),
        ("8 determinism", determinism, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > budget => Err(format!("{msg}; took {took:.2?}, budget {budget:.0?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS criterion {name} ({took:.2?}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name} ({took:.2?}): {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
