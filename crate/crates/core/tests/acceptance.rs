//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Tolerances are pinned in the constants below. Relative errors use
//! `|a − b| / max(|a|, |b|, floor)` so that exact zeros are comparable.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use epsd::data::{make_synthetic, Dataset, Synthetic};
use epsd::distill::{
    cross_entropy, cskd_loss, dlb_loss, kd_loss, kl_divergence, pskd_loss, soft_cross_entropy, DistillKind,
    DistillObjective, DistillSpec, SoftTargets, StepBatch, StepTargets,
};
use epsd::harness::{run_sweep, ExperimentConfig, SweepReport};
use epsd::metrics::{aurc, ece, mean_jsv, CalibrationRecord};
use epsd::model::{build_model, record_logits, Arch, ChannelMask, Layout, Mask, MaskedModel};
use epsd::prune::{
    build_mask, epsd_saliency, magnitude_saliency, prospr_saliency, pruning_batches, run_schedule, snip_saliency,
    target_zeros, Granularity, PruneBatchConfig, PruneSchedule, SaliencyConfig, SaliencyMap,
};
use epsd::tensor::unroll::{hessian_vector, unrolled_hypergradient, StepVars, UnrollOptions, UnrolledObjective};
use epsd::tensor::{Scalar, Tape, Tensor, Var};
use epsd::train::{prune_for_regime, train, ProbeConfig, Regime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const OP_RTOL: f64 = 1e-4;
const OP_FLOOR: f64 = 1e-3;
const OP_CASES: usize = 20;
const HYPER_RTOL: f64 = 1e-3;
const HYPER_FLOOR: f64 = 1e-4;
const SUM_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-12;
const JSV_TOL: f64 = 1e-8;
const GRID: [f64; 5] = [0.36, 0.59, 0.79, 0.90, 0.95];
const GRID_PCT: [usize; 5] = [36, 59, 79, 90, 95];
const SEEDS: u64 = 20;
const JSV_WINDOW: usize = 200;

type Res<T> = epsd::Result<T>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn distribution(r: &mut ChaCha8Rng, rows: usize, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * classes);
    for _ in 0..rows {
        let raw = uniform(r, classes, 0.05, 1.0);
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}

fn labels(r: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

// ---------------------------------------------------------------- criterion 1

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Res<Var>>;

struct Case {
    shapes: Vec<Vec<usize>>,
    inputs: Vec<Vec<f64>>,
    build: Build,
}

fn case(shapes: Vec<Vec<usize>>, r: &mut ChaCha8Rng, build: Build) -> Case {
    let inputs = shapes.iter().map(|s| uniform(r, s.iter().product(), -1.5, 1.5)).collect();
    Case { shapes, inputs, build }
}

/// `Σ w ⊙ op(inputs)` and its gradient with respect to every input.
fn weighted_output(c: &Case, inputs: &[Vec<f64>], w: &[f64]) -> Res<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let vars = c
        .shapes
        .iter()
        .zip(inputs)
        .map(|(s, d)| tape.param(s.clone(), d.clone()))
        .collect::<Res<Vec<_>>>()?;
    let out = (c.build)(&mut tape, &vars)?;
    let wv = tape.constant(tape.shape(out).to_vec(), w.to_vec())?;
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().zip(inputs).map(|(v, d)| grads.get_or_zeros(*v, d.len())).collect()))
}

fn output_numel(c: &Case) -> Res<usize> {
    let mut tape = Tape::<f64>::new();
    let vars =
        c.shapes.iter().zip(&c.inputs).map(|(s, d)| tape.param(s.clone(), d.clone())).collect::<Res<Vec<_>>>()?;
    let out = (c.build)(&mut tape, &vars)?;
    Ok(tape.value(out).numel())
}

/// Largest relative error between backward and central differences.
fn check_case(c: &Case, r: &mut ChaCha8Rng) -> Res<f64> {
    let w = uniform(r, output_numel(c)?, -1.0, 1.0);
    let (_, analytic) = weighted_output(c, &c.inputs, &w)?;
    let mut worst: f64 = 0.0;
    for (k, input) in c.inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut up = c.inputs.clone();
            up[k][i] += FD_STEP;
            let mut dn = c.inputs.clone();
            dn[k][i] -= FD_STEP;
            let fd = (weighted_output(c, &up, &w)?.0 - weighted_output(c, &dn, &w)?.0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k][i], fd, OP_FLOOR));
        }
    }
    Ok(worst)
}

/// Keeps inputs of kinked ops away from the kink.
fn off_kink(v: &mut [f64]) {
    for x in v {
        if x.abs() < 0.05 {
            *x = if *x < 0.0 { -0.05 - x.abs() } else { 0.05 + *x };
        }
    }
}

fn op_case(name: &str, r: &mut ChaCha8Rng) -> Case {
    let d = |r: &mut ChaCha8Rng, lo: usize, hi: usize| r.random_range(lo..=hi);
    match name {
        "matmul" => {
            let (m, k, n) = (d(r, 1, 4), d(r, 1, 4), d(r, 1, 4));
            case(vec![vec![m, k], vec![k, n]], r, Box::new(|t, v| t.matmul(v[0], v[1])))
        }
        "conv2d" => {
            let (n, c, o) = (d(r, 1, 2), d(r, 1, 2), d(r, 1, 3));
            let (h, w, k, p) = (d(r, 3, 5), d(r, 3, 5), d(r, 1, 3), d(r, 0, 1));
            case(vec![vec![n, c, h, w], vec![o, c, k, k]], r, Box::new(move |t, v| t.conv2d(v[0], v[1], p)))
        }
        "add" => {
            let s = vec![d(r, 1, 3), d(r, 1, 4)];
            case(vec![s.clone(), s], r, Box::new(|t, v| t.add(v[0], v[1])))
        }
        "add_bias" => {
            let c = d(r, 1, 3);
            let s = if r.random_bool(0.5) { vec![d(r, 1, 3), c] } else { vec![d(r, 1, 2), c, d(r, 1, 3), d(r, 1, 3)] };
            case(vec![s, vec![c]], r, Box::new(|t, v| t.add(v[0], v[1])))
        }
        "sub" => {
            let s = vec![d(r, 1, 3), d(r, 1, 4)];
            case(vec![s.clone(), s], r, Box::new(|t, v| t.sub(v[0], v[1])))
        }
        "mul" => {
            let s = vec![d(r, 1, 3), d(r, 1, 4)];
            case(vec![s.clone(), s], r, Box::new(|t, v| t.mul(v[0], v[1])))
        }
        "scale" => {
            let k = r.random_range(-3.0..3.0);
            case(vec![vec![d(r, 1, 6)]], r, Box::new(move |t, v| t.scale(v[0], k)))
        }
        "relu" => {
            let mut c = case(vec![vec![d(r, 1, 3), d(r, 1, 4)]], r, Box::new(|t, v| t.relu(v[0])));
            off_kink(&mut c.inputs[0]);
            c
        }
        "reshape" => {
            let (a, b) = (d(r, 1, 3), d(r, 1, 4));
            case(vec![vec![a, b]], r, Box::new(move |t, v| t.reshape(v[0], vec![b, a])))
        }
        "slice" => {
            let len = d(r, 2, 8);
            let off = d(r, 0, len - 1);
            let m = d(r, 1, len - off);
            case(vec![vec![len]], r, Box::new(move |t, v| t.slice(v[0], off, vec![m])))
        }
        "mean" => case(vec![vec![d(r, 1, 3), d(r, 1, 4)]], r, Box::new(|t, v| t.mean(v[0]))),
        "sum" => case(vec![vec![d(r, 1, 3), d(r, 1, 4)]], r, Box::new(|t, v| t.sum(v[0]))),
        "sum_rows" => case(vec![vec![d(r, 1, 3), d(r, 1, 4)]], r, Box::new(|t, v| t.sum_rows(v[0]))),
        "logsumexp" => case(vec![vec![d(r, 1, 3), d(r, 2, 5)]], r, Box::new(|t, v| t.logsumexp(v[0]))),
        "log_softmax" => case(vec![vec![d(r, 1, 3), d(r, 2, 5)]], r, Box::new(|t, v| t.log_softmax(v[0]))),
        "mlp_forward" => {
            let sizes = vec![d(r, 1, 3), d(r, 2, 4), d(r, 2, 3)];
            let layout = Arch::Mlp(sizes.clone()).layout().expect("valid mlp");
            let n = d(r, 1, 3);
            let np = layout.num_params;
            case(vec![vec![np], vec![n, sizes[0]]], r, Box::new(move |t, v| record_logits(&layout, t, v[0], v[1])))
        }
        "cnn_forward" => {
            let arch: Arch = "cnn:in=1x4x4;conv=2k3p1,2k2p0;hidden=3;classes=2".parse().expect("valid cnn");
            let layout = arch.layout().expect("valid cnn");
            let np = layout.num_params;
            case(vec![vec![np], vec![d(r, 1, 2), 1, 4, 4]], r, Box::new(move |t, v| record_logits(&layout, t, v[0], v[1])))
        }
        _ => unreachable!("unknown op {name}"),
    }
}

fn loss_case(name: &str, r: &mut ChaCha8Rng) -> Res<Case> {
    let n = r.random_range(2..=5);
    let c = r.random_range(2..=5);
    let tau = r.random_range(0.5..5.0);
    let lambda = r.random_range(0.1..2.0);
    let y = labels(r, n, c);
    let spec = DistillSpec { kind: DistillKind::Cskd, tau, lambda_cls: lambda, ..DistillSpec::default() };
    let build: Build = match name {
        "cross_entropy" => Box::new(move |t, v| cross_entropy(t, v[0], &y)),
        "soft_cross_entropy" => {
            let targets = distribution(r, n, c);
            Box::new(move |t, v| soft_cross_entropy(t, v[0], &targets))
        }
        "kl" => {
            let target = SoftTargets::from_logits(&uniform(r, n * c, -3.0, 3.0), c, tau)?;
            Box::new(move |t, v| kl_divergence(t, v[0], &target, tau))
        }
        "kd" => {
            let teacher = uniform(r, n * c, -3.0, 3.0);
            Box::new(move |t, v| kd_loss(t, &teacher, v[0], tau))
        }
        "cskd" => {
            let companion = SoftTargets::from_logits(&uniform(r, n * c, -3.0, 3.0), c, tau)?;
            Box::new(move |t, v| cskd_loss(t, v[0], &y, &companion, &spec))
        }
        "pskd" => {
            let alpha = r.random_range(0.0..1.0);
            let past = distribution(r, n, c);
            let has: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
            Box::new(move |t, v| {
                let rows: Vec<Option<&[f64]>> =
                    (0..n).map(|i| has[i].then(|| &past[i * c..(i + 1) * c])).collect();
                pskd_loss(t, v[0], &y, &rows, alpha)
            })
        }
        "dlb" => {
            let carried = r.random_range(1..=n);
            let stored = SoftTargets::from_logits(&uniform(r, carried * c, -3.0, 3.0), c, tau)?;
            let spec = DistillSpec { kind: DistillKind::Dlb, ..spec };
            Box::new(move |t, v| dlb_loss(t, v[0], &y, Some(&stored), &spec))
        }
        _ => unreachable!("unknown loss {name}"),
    };
    let mut out = case(vec![vec![n, c]], r, build);
    out.inputs[0] = uniform(r, n * c, -3.0, 3.0);
    Ok(out)
}

/// Hessian-vector products from the dual backward pass against central
/// differences of the gradient.
fn hvp_case(seed: u64) -> Res<f64> {
    let mut r = rng(seed);
    let data = make_synthetic(&Synthetic::Gaussians { classes: 3, dim: 3, separation: 2.0, per_class: 6 }, seed)?;
    let model = build_model(&Arch::Mlp(vec![3, 4, 3]), seed)?;
    let batches =
        pruning_batches(&data, DistillKind::None, &PruneBatchConfig { steps: 1, per_class: 2, new_batch_per_step: true, seed })?;
    let mut obj = DistillObjective::new(model.layout(), DistillSpec::ce(), batches, data.len())?;
    let theta = uniform(&mut r, model.num_params(), -1.0, 1.0);
    let dir = uniform(&mut r, theta.len(), -1.0, 1.0);
    let fz = obj.freeze(0, &theta)?;
    let hv = hessian_vector(&obj, &theta, &dir, 0, &fz)?;
    let grad_at = |shift: f64| -> Res<Vec<f64>> {
        let p: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + shift * d).collect();
        let mut tape = Tape::<f64>::new();
        let pv = tape.param(vec![p.len()], p.clone())?;
        let vars = obj.record(&mut tape, pv, 0, &fz)?;
        Ok(tape.backward(vars.loss)?.get_or_zeros(pv, p.len()))
    };
    let (up, dn) = (grad_at(FD_STEP)?, grad_at(-FD_STEP)?);
    Ok(hv.iter().enumerate().map(|(i, h)| rel_err(*h, (up[i] - dn[i]) / (2.0 * FD_STEP), OP_FLOOR)).fold(0.0, f64::max))
}

fn criterion_1() -> Res<Verdict> {
    let start = Instant::now();
    let ops = [
        "matmul", "conv2d", "add", "add_bias", "sub", "mul", "scale", "relu", "reshape", "slice", "mean", "sum",
        "sum_rows", "logsumexp", "log_softmax", "mlp_forward", "cnn_forward",
    ];
    let losses = ["cross_entropy", "soft_cross_entropy", "kl", "kd", "cskd", "pskd", "dlb"];
    let mut worst = (0.0f64, String::new());
    let mut total = 0;
    for (k, name) in ops.iter().enumerate() {
        for i in 0..OP_CASES {
            let mut r = rng(1000 * k as u64 + i as u64);
            let c = op_case(name, &mut r);
            let e = check_case(&c, &mut r)?;
            if e > worst.0 {
                worst = (e, name.to_string());
            }
            total += 1;
        }
    }
    for (k, name) in losses.iter().enumerate() {
        for i in 0..OP_CASES {
            let mut r = rng(50_000 + 1000 * k as u64 + i as u64);
            let c = loss_case(name, &mut r)?;
            let e = check_case(&c, &mut r)?;
            if e > worst.0 {
                worst = (e, name.to_string());
            }
            total += 1;
        }
    }
    for i in 0..OP_CASES {
        let e = hvp_case(90_000 + i as u64)?;
        if e > worst.0 {
            worst = (e, "hessian_vector".into());
        }
        total += 1;
    }
    let elapsed = start.elapsed();
    let pass = worst.0 <= OP_RTOL && elapsed < Duration::from_secs(60);
    Ok(verdict(
        pass,
        format!(
            "{} ops + {} losses + hvp, {total} cases, max rel err {:.2e} ({}) <= {OP_RTOL:e}, {:.1}s < 60s",
            ops.len(),
            losses.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- criterion 2

/// Wraps an objective and keeps the stop-gradient targets of the nominal run.
struct Recorder<'a> {
    inner: DistillObjective<'a>,
    frozen: Vec<StepTargets>,
}

impl UnrolledObjective for Recorder<'_> {
    type Frozen = StepTargets;

    fn freeze(&mut self, step: usize, params: &[f64]) -> Res<StepTargets> {
        let f = self.inner.freeze(step, params)?;
        self.frozen.push(f.clone());
        Ok(f)
    }

    fn record<T: Scalar>(&self, tape: &mut Tape<T>, params: Var, step: usize, frozen: &StepTargets) -> Res<StepVars> {
        self.inner.record(tape, params, step, frozen)
    }

    fn observe(&mut self, step: usize, frozen: &StepTargets, tape: &Tape<f64>, vars: StepVars) -> Res<()> {
        self.inner.observe(step, frozen, tape, vars)
    }
}

/// Plain SGD unroll from `m ⊙ base` with targets held at their nominal values;
/// returns the loss at the last step.
fn unrolled_loss(
    obj: &DistillObjective,
    frozen: &[StepTargets],
    base: &[f64],
    mask: &[f64],
    keep: &[bool],
    steps: usize,
    lr: f64,
) -> Res<f64> {
    let mut theta = base.to_vec();
    for (t, m) in theta.iter_mut().zip(mask) {
        *t *= m;
    }
    for (k, fz) in frozen.iter().enumerate().take(steps) {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(vec![theta.len()], theta.clone())?;
        let vars = obj.record(&mut tape, p, k, fz)?;
        if k + 1 == steps {
            return Ok(tape.value(vars.loss).data()[0]);
        }
        let g = tape.backward(vars.loss)?.get_or_zeros(p, theta.len());
        for (i, t) in theta.iter_mut().enumerate() {
            if i < keep.len() && !keep[i] {
                continue;
            }
            *t -= lr * g[i];
        }
    }
    unreachable!("steps >= 1")
}

fn criterion_2() -> Res<Verdict> {
    let start = Instant::now();
    let arch = Arch::Mlp(vec![3, 4, 3]);
    let data = make_synthetic(&Synthetic::Gaussians { classes: 3, dim: 3, separation: 2.0, per_class: 10 }, 7)?;
    let lr = 0.5;
    let mut worst = (0.0f64, String::new());
    let mut coords = 0;
    let kinds = [DistillKind::None, DistillKind::Cskd, DistillKind::Pskd, DistillKind::Dlb];
    for (ki, &kind) in kinds.iter().enumerate() {
        let spec = DistillSpec { kind, tau: 2.0, alpha: 0.4, lambda_cls: 1.0, ..DistillSpec::default() };
        for steps in 1..=3 {
            for partial in [false, true] {
                let seed = 10 * ki as u64 + steps as u64;
                let model = build_model(&arch, seed)?;
                let n = model.num_maskable();
                // Never empties a unit's fan-in, which would park it on the relu kink.
                let keep: Vec<bool> = (0..n).map(|i| !partial || i % 5 != 2).collect();
                let mask: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                let cfg = PruneBatchConfig { steps: 3, per_class: 2, new_batch_per_step: true, seed };
                let batches = pruning_batches(&data, kind, &cfg)?;
                let obj = DistillObjective::new(model.layout(), spec, batches, data.len())?;
                let mut rec = Recorder { inner: obj.clone(), frozen: Vec::new() };
                let hg = unrolled_hypergradient(
                    &mut rec,
                    model.params(),
                    &mask,
                    Some(&keep),
                    steps,
                    lr,
                    &UnrollOptions::default(),
                )?;
                for j in 0..n {
                    let mut up = mask.clone();
                    up[j] += FD_STEP;
                    let mut dn = mask.clone();
                    dn[j] -= FD_STEP;
                    let fd = (unrolled_loss(&obj, &rec.frozen, model.params(), &up, &keep, steps, lr)?
                        - unrolled_loss(&obj, &rec.frozen, model.params(), &dn, &keep, steps, lr)?)
                        / (2.0 * FD_STEP);
                    let e = rel_err(hg.mask_grad[j], fd, HYPER_FLOOR);
                    if e > worst.0 {
                        worst = (e, format!("{kind} i={steps} coord {j}"));
                    }
                    coords += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let params = arch.layout()?.num_params;
    let pass = worst.0 <= HYPER_RTOL && elapsed < Duration::from_secs(120) && params <= 50;
    Ok(verdict(
        pass,
        format!(
            "{params}-param mlp, ce/cskd/pskd/dlb x i=1..3, {coords} coords, max rel err {:.2e} ({}) <= {HYPER_RTOL:e}, {:.1}s < 120s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- criteria 3-6

fn desk() -> Res<(ExperimentConfig, Dataset, MaskedModel)> {
    let cfg = ExperimentConfig::default();
    let data = cfg.load_dataset()?;
    let model = build_model(&cfg.resolve_arch(&data)?, 11)?;
    Ok((cfg, data, model))
}

fn batches_for(cfg: &ExperimentConfig, data: &Dataset, kind: DistillKind, seed: u64) -> Res<Vec<StepBatch>> {
    let rc = cfg.regime_config(0.5, seed, Arch::Mlp(vec![1, 1]));
    let new_batch = rc.new_batch_per_step.unwrap_or(kind != DistillKind::Pskd);
    pruning_batches(
        data,
        kind,
        &PruneBatchConfig { steps: rc.saliency.steps, per_class: rc.per_class, new_batch_per_step: new_batch, seed },
    )
}

fn criterion_3() -> Res<Verdict> {
    let (cfg, data, model) = desk()?;
    let sal = SaliencyConfig::default();
    let mut maps: Vec<(String, SaliencyMap)> = vec![
        ("magnitude".into(), magnitude_saliency(&model)?),
        ("snip".into(), snip_saliency(&model, batches_for(&cfg, &data, DistillKind::None, 1)?.remove(0), data.len())?),
        ("prospr".into(), prospr_saliency(&model, batches_for(&cfg, &data, DistillKind::None, 1)?, &sal, data.len())?),
    ];
    for kind in [DistillKind::Cskd, DistillKind::Pskd, DistillKind::Dlb] {
        let spec = DistillSpec { kind, ..cfg.distill };
        let b = batches_for(&cfg, &data, kind, 1)?;
        maps.push((format!("epsd:{kind}"), epsd_saliency(&model, b, &sal, &spec, data.len())?));
    }
    let mut worst_sum: f64 = 0.0;
    let mut mismatches = 0;
    let mut masks = 0;
    for (_, map) in &maps {
        worst_sum = worst_sum.max((map.scores.iter().sum::<f64>() - 1.0).abs());
        for k in [1e-6, 0.37, 1e3] {
            let scaled = SaliencyMap::from_raw(
                map.raw.iter().map(|v| v * k).collect(),
                map.criterion,
                map.steps_used,
                map.loss_used.clone(),
            )?;
            worst_sum = worst_sum.max((scaled.scores.iter().sum::<f64>() - 1.0).abs());
            for s in GRID {
                let a = build_mask(map, model.layout(), s, Granularity::Element)?;
                let b = build_mask(&scaled, model.layout(), s, Granularity::Element)?;
                masks += 1;
                if a != b {
                    mismatches += 1;
                }
            }
        }
    }
    let pass = worst_sum <= SUM_TOL && mismatches == 0;
    Ok(verdict(
        pass,
        format!(
            "{} saliency maps, max |sum - 1| {worst_sum:.1e} <= {SUM_TOL:e}, rescaled masks differing {mismatches}/{masks}",
            maps.len()
        ),
    ))
}

fn channel_aligned(mask: &Mask, layout: &Layout) -> bool {
    match ChannelMask::contract(mask, layout) {
        Ok(cm) => cm.expand(layout).is_ok_and(|m| &m == mask),
        Err(_) => false,
    }
}

fn criterion_4() -> Res<Verdict> {
    let (cfg, data, model) = desk()?;
    let spec = cfg.distill;
    let sal = epsd_saliency(&model, batches_for(&cfg, &data, spec.kind, 2)?, &SaliencyConfig::default(), &spec, data.len())?;
    // Global magnitude at 95% would empty the dense layer, so the cnn uses random scores.
    let cnn = build_model(&"cnn:in=1x8x8;conv=6k3p0,8k3p0;hidden=16;classes=4".parse()?, 3)?;
    let cnn_sal = SaliencyMap::from_raw(
        uniform(&mut rng(21), cnn.num_maskable(), 0.0, 1.0),
        magnitude_saliency(&cnn)?.criterion,
        1,
        "random".into(),
    )?;
    // Equal channel sizes, so summed channel scores compare like for like.
    let square = build_model(&Arch::Mlp(vec![16, 16, 16, 16]), 5)?;
    let square_sal = SaliencyMap::from_raw(
        uniform(&mut rng(22), square.num_maskable(), 0.0, 1.0),
        magnitude_saliency(&square)?.criterion,
        1,
        "random".into(),
    )?;
    let mut bad = Vec::new();
    let mut channel_masks = 0;
    let mut collapses = 0;
    for (name, m, s) in [("mlp", &model, &sal), ("cnn", &cnn, &cnn_sal), ("mlp16", &square, &square_sal)] {
        let n = m.num_maskable();
        for (&sp, &pct) in GRID.iter().zip(&GRID_PCT) {
            let expect = (pct * n).div_ceil(100);
            let mask = build_mask(s, m.layout(), sp, Granularity::Element)?;
            if mask.zeros() != expect {
                bad.push(format!("{name} s={sp}: {} zeros, want {expect}", mask.zeros()));
            }
            match build_mask(s, m.layout(), sp, Granularity::Channel) {
                Ok(cm) => {
                    channel_masks += 1;
                    if !channel_aligned(&cm, m.layout()) || cm.zeros() < expect {
                        bad.push(format!("{name} s={sp}: channel mask not aligned or short"));
                    }
                }
                Err(epsd::Error::LayerCollapse(_)) => collapses += 1,
                Err(e) => return Err(e),
            }
        }
    }
    if channel_masks == 0 {
        bad.push(format!("no channel mask built, {collapses} layer collapses"));
    }
    let pass = bad.is_empty();
    let detail = if pass {
        format!("element zeros = ceil(s*N) at all 5 sparsities on 3 models; {channel_masks} channel masks aligned, {collapses} layer collapses reported")
    } else {
        bad.join("; ")
    };
    Ok(verdict(pass, detail))
}

fn criterion_5() -> Res<Verdict> {
    let (cfg, data, model) = desk()?;
    let sal = SaliencyConfig::default();
    let mut bad = Vec::new();
    for kind in [DistillKind::Cskd, DistillKind::Pskd, DistillKind::Dlb] {
        let spec = DistillSpec { kind, lambda_cls: 0.0, alpha: 0.0, ..cfg.distill };
        let batches = batches_for(&cfg, &data, kind, 5)?;
        let prospr = prospr_saliency(&model, batches.clone(), &sal, data.len())?;
        let sd = epsd_saliency(&model, batches, &sal, &spec, data.len())?;
        if prospr.raw.iter().zip(&sd.raw).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bad.push(format!("{kind}: raw scores differ"));
        }
        for s in GRID {
            if build_mask(&prospr, model.layout(), s, Granularity::Element)?
                != build_mask(&sd, model.layout(), s, Granularity::Element)?
            {
                bad.push(format!("{kind}: masks differ at {s}"));
            }
        }
        let overrides = [format!("method={kind}"), "lambda_cls=0".into(), "alpha=0".into()];
        let c = ExperimentConfig::parse("", &overrides)?;
        let rc = c.regime_config(0.9, 4, c.resolve_arch(&data)?);
        let a = prune_for_regime(Regime::Epsd, &rc, &data)?;
        let b = prune_for_regime(Regime::PruningOnly, &rc, &data)?;
        if a.model.mask() != b.model.mask() {
            bad.push(format!("{kind}: regime masks differ"));
        }
    }
    let pass = bad.is_empty();
    Ok(verdict(
        pass,
        if pass {
            "cskd/pskd/dlb with lambda=0, alpha=0: raw scores bit-identical to prospr, masks equal at all 5 sparsities and through the regime pipeline".into()
        } else {
            bad.join("; ")
        },
    ))
}

fn criterion_6() -> Res<Verdict> {
    let (cfg, data, model) = desk()?;
    let spec = cfg.distill;
    let schedule = PruneSchedule::Iterative { fraction: 0.2, rounds: 7, recovery_epochs: 1 };
    let n = model.num_maskable();
    let mut seen: Vec<Mask> = Vec::new();
    let recovery = cfg.train.schedule.with_epochs(1);
    let probes = ProbeConfig { eval_every_epoch: false, ..ProbeConfig::default() };
    let (pruned, log) = run_schedule(
        model,
        &schedule,
        Granularity::Element,
        |m, round| {
            seen.push(m.mask().clone());
            let b = batches_for(&cfg, &data, spec.kind, 100 + round as u64)?;
            epsd_saliency(m, b, &SaliencyConfig::default(), &spec, data.len())
        },
        |m, round, epochs| {
            let out = train(&m, &recovery.with_epochs(epochs), &spec, &data, 200 + round as u64, &probes)?;
            Ok(out.model)
        },
    )?;
    seen.push(pruned.mask().clone());
    let monotone = seen.windows(2).all(|w| w[0].is_subset_zero_of(&w[1]));
    let per_round_exact =
        log.iter().enumerate().all(|(k, r)| r.zeros == target_zeros(1.0 - 0.8f64.powi(k as i32 + 1), n));
    let zeros = pruned.mask().zeros();
    let ceiling = (0.790273 * n as f64).ceil() as usize;
    let exact = target_zeros(1.0 - 0.8f64.powi(7), n);
    let zeros_stay = pruned.effective_params()[..n].iter().zip(pruned.mask().bits()).all(|(p, &k)| k || *p == 0.0);
    let pass = monotone && per_round_exact && zeros == exact && zeros.abs_diff(ceiling) <= 1 && zeros_stay;
    Ok(verdict(
        pass,
        format!(
            "{zeros}/{n} zeros (sparsity {:.6}), ceil(0.790273*N) = {ceiling}, ceil((1-0.8^7)*N) = {exact}; monotone {monotone}, per-round exact {per_round_exact}",
            pruned.mask().sparsity()
        ),
    ))
}

// ---------------------------------------------------------------- criterion 7

fn rec(confidence: f64, correct: bool) -> CalibrationRecord {
    CalibrationRecord { confidence, correct }
}

/// Mean singular value of a `[rows, 2]` matrix from the 2×2 Gram eigenvalues.
fn mean_sv_two_columns(w: &[f64], rows: usize) -> f64 {
    let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
    for r in 0..rows {
        let (x, y) = (w[2 * r], w[2 * r + 1]);
        a += x * x;
        b += x * y;
        d += y * y;
    }
    let mid = (a + d) / 2.0;
    let rad = (((a - d) / 2.0).powi(2) + b * b).sqrt();
    ((mid + rad).max(0.0).sqrt() + (mid - rad).max(0.0).sqrt()) / 2.0
}

fn criterion_7() -> Res<Verdict> {
    let five = [rec(0.95, true), rec(0.85, false), rec(0.62, true), rec(0.55, false), rec(0.30, true)];
    let three = [rec(0.7, false), rec(0.9, true), rec(0.8, false)];
    // Each record alone in its bin: mean |correct − confidence|.
    let fixtures: [(&str, f64, f64); 5] = [
        ("ece5/15", ece(&five, 15)?, (0.05 + 0.85 + 0.38 + 0.55 + 0.70) / 5.0),
        ("ece5/5", ece(&five, 5)?, 2.0 / 5.0 * 0.4 + 0.38 / 5.0 + 0.55 / 5.0 + 0.70 / 5.0),
        ("ece5/1", ece(&five, 1)?, (0.6f64 - 3.27 / 5.0).abs()),
        ("ece3/15", ece(&three, 15)?, (0.1 + 0.8 + 0.7) / 3.0),
        ("aurc5", aurc(&five)?, (0.0 + 1.0 / 2.0 + 1.0 / 3.0 + 2.0 / 4.0 + 2.0 / 5.0) / 5.0),
    ];
    let aurc3 = ("aurc3", aurc(&three)?, (0.0 + 1.0 / 2.0 + 2.0 / 3.0) / 3.0);
    let mut worst_metric: f64 = 0.0;
    for (_, got, want) in fixtures.iter().chain(std::iter::once(&aurc3)) {
        worst_metric = worst_metric.max((got - want).abs());
    }

    let mut worst_jsv: f64 = 0.0;
    let mut r = rng(77);
    for (inputs, masked) in [(4, false), (3, false), (5, true)] {
        let model = build_model(&Arch::Mlp(vec![inputs, 2]), 9)?;
        let model = if masked {
            let bits = (0..model.num_maskable()).map(|i| i % 3 != 0).collect();
            model.apply_mask(&Mask::from_bools(bits))?
        } else {
            model
        };
        let w = model.effective_params()[..inputs * 2].to_vec();
        let x = Tensor::from_f64(vec![6, inputs], &uniform(&mut r, 6 * inputs, -2.0, 2.0))?;
        worst_jsv = worst_jsv.max((mean_jsv(&model, &x)? - mean_sv_two_columns(&w, inputs)).abs());
    }
    let wide = build_model(&Arch::Mlp(vec![6, 3]), 4)?;
    let wmat = nalgebra::DMatrix::from_row_slice(6, 3, &wide.effective_params()[..18]);
    let direct = wmat.svd(false, false).singular_values.mean();
    let x = Tensor::from_f64(vec![4, 6], &uniform(&mut r, 24, -2.0, 2.0))?;
    worst_jsv = worst_jsv.max((mean_jsv(&wide, &x)? - direct).abs());

    let pass = worst_metric <= METRIC_TOL && worst_jsv <= JSV_TOL;
    Ok(verdict(
        pass,
        format!(
            "6 ECE/AURC fixtures max err {worst_metric:.1e} <= {METRIC_TOL:e}; linear Mean-JSV vs SVD max err {worst_jsv:.1e} <= {JSV_TOL:e}"
        ),
    ))
}

// ---------------------------------------------------------------- criteria 8-11

fn seed_list(n: u64) -> String {
    (0..n).map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
}

fn directional_config(seeds: u64) -> Res<ExperimentConfig> {
    let text = format!(
        "preset = desk\nregime = unpruned, simple_combination, epsd\nseeds = {}\n\n[pruning]\nsparsity = 0.36, 0.95\n\n[train]\njsv_steps = {JSV_WINDOW}\n",
        seed_list(seeds)
    );
    ExperimentConfig::parse(&text, &[])
}

fn ablation_config(seeds: u64) -> Res<ExperimentConfig> {
    let text = format!(
        "preset = desk\nregime = ablation:ce:ce, ablation:ce:sd, ablation:sd:ce, ablation:sd:sd\nseeds = {}\n\n[pruning]\nsparsity = 0.8\n",
        seed_list(seeds)
    );
    ExperimentConfig::parse(&text, &[])
}

fn acc(report: &SweepReport, regime: &str, s: f64) -> Res<(f64, usize)> {
    let a = report
        .aggregate(regime.parse()?, s)
        .ok_or_else(|| epsd::Error::Report(format!("no cells for {regime} at {s}")))?;
    Ok((a.acc_mean, a.n_ok))
}

fn criterion_8(report: &SweepReport, elapsed: Duration) -> Res<Verdict> {
    let (unpruned, n0) = acc(report, "unpruned", 0.0)?;
    let (sc_hi, n1) = acc(report, "simple_combination", 0.95)?;
    let (sc_lo, _) = acc(report, "simple_combination", 0.36)?;
    let (epsd_hi, n2) = acc(report, "epsd", 0.95)?;
    let (deficit_hi, deficit_lo) = (unpruned - sc_hi, unpruned - sc_lo);
    let seeds = n0.min(n1).min(n2);
    let pass = report.all_ok()
        && seeds >= 5
        && epsd_hi >= sc_hi
        && deficit_hi > deficit_lo
        && elapsed < Duration::from_secs(15 * 60);
    Ok(verdict(
        pass,
        format!(
            "{seeds} seeds, 4-class spirals, mlp 2-64-64-4: acc@95% epsd {epsd_hi:.4} vs sc {sc_hi:.4}; sc deficit vs unpruned ({unpruned:.4}) {deficit_hi:.4} @95% vs {deficit_lo:.4} @36%; {:.0}s < 900s",
            elapsed.as_secs_f64()
        ),
    ))
}

/// Seed-mean Mean-JSV per step and its running mean over the window.
fn running_jsv(report: &SweepReport, regime: Regime, s: f64) -> Vec<f64> {
    let traces: Vec<&Vec<(usize, f64)>> = report
        .cells
        .iter()
        .filter(|c| c.regime == regime && c.sparsity == s)
        .filter_map(|c| c.metrics().map(|m| &m.jsv_trace))
        .collect();
    let len = traces.iter().map(|t| t.len()).min().unwrap_or(0).min(JSV_WINDOW);
    let mut running = Vec::with_capacity(len);
    let mut acc = 0.0;
    for k in 0..len {
        acc += traces.iter().map(|t| t[k].1).sum::<f64>() / traces.len() as f64;
        running.push(acc / (k + 1) as f64);
    }
    running
}

fn criterion_9(report: &SweepReport) -> Res<Verdict> {
    let e = running_jsv(report, Regime::Epsd, 0.95);
    let s = running_jsv(report, Regime::SimpleCombination, 0.95);
    let steps = e.len().min(s.len());
    let (ef, sf) = (e.last().copied().unwrap_or(f64::NAN), s.last().copied().unwrap_or(f64::NAN));
    let held = (0..steps).filter(|&k| e[k] >= s[k]).count();
    let lo_e = running_jsv(report, Regime::Epsd, 0.36);
    let lo_s = running_jsv(report, Regime::SimpleCombination, 0.36);
    let pass = steps == JSV_WINDOW && ef >= sf;
    Ok(verdict(
        pass,
        format!(
            "running-mean Mean-JSV over {steps} steps @95%: epsd {ef:.4} vs sc {sf:.4} (epsd >= sc at {held}/{steps} steps); @36%: epsd {:.4} vs sc {:.4}",
            lo_e.last().copied().unwrap_or(f64::NAN),
            lo_s.last().copied().unwrap_or(f64::NAN)
        ),
    ))
}

fn criterion_10(report: &SweepReport) -> Res<Verdict> {
    let cells = ["ablation:ce:ce", "ablation:ce:sd", "ablation:sd:ce", "ablation:sd:sd"];
    let mut accs = Vec::new();
    for c in cells {
        accs.push(acc(report, c, 0.8)?);
    }
    let ran = report.all_ok() && accs.iter().all(|a| a.1 >= 5);
    let pass = ran && accs[3].0 >= accs[0].0;
    Ok(verdict(
        pass,
        format!(
            "{} seeds @80%: (ce,ce) {:.4}, (ce,sd) {:.4}, (sd,ce) {:.4}, (sd,sd) {:.4}; all cells ok {ran}",
            accs[0].1, accs[0].0, accs[1].0, accs[2].0, accs[3].0
        ),
    ))
}

fn criterion_11(directional: &SweepReport) -> Res<Verdict> {
    let cfg = directional_config(2)?;
    let a = run_sweep(&cfg)?;
    let b = run_sweep(&cfg)?;
    let dir_a = tempfile::tempdir()?;
    let dir_b = tempfile::tempdir()?;
    a.write(dir_a.path())?;
    b.write(dir_b.path())?;
    let mut same = true;
    for f in ["summary.csv", "aggregate.csv", "config.txt"] {
        same &= std::fs::read(dir_a.path().join(f))? == std::fs::read(dir_b.path().join(f))?;
    }
    // Cells are independent, so the same rows appear in the larger sweep.
    let big = directional.summary_csv();
    let rows_match = a.summary_csv().lines().skip(1).all(|row| big.lines().any(|l| l == row));
    let pass = same && rows_match;
    Ok(verdict(
        pass,
        format!(
            "two runs of a {}-cell sweep: summary/aggregate/config bytes identical {same}; rows identical inside the 20-seed sweep {rows_match}",
            a.cells.len()
        ),
    ))
}

fn main() -> ExitCode {
    let mut passed = 0;
    let mut report = |n: usize, v: Res<Verdict>| {
        let (ok, detail) = match v {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!("criterion {n:>2}: {}  {detail}", if ok { "PASS" } else { "FAIL" });
        if ok {
            passed += 1;
        }
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());

    let start = Instant::now();
    let directional = directional_config(SEEDS).and_then(|c| run_sweep(&c));
    let elapsed = start.elapsed();
    match &directional {
        Ok(d) => {
            report(8, criterion_8(d, elapsed));
            report(9, criterion_9(d));
        }
        Err(e) => {
            report(8, Err(epsd::Error::Report(e.to_string())));
            report(9, Err(epsd::Error::Report(e.to_string())));
        }
    }
    report(10, ablation_config(SEEDS).and_then(|c| run_sweep(&c)).and_then(|r| criterion_10(&r)));
    report(
        11,
        match &directional {
            Ok(d) => criterion_11(d),
            Err(e) => Err(epsd::Error::Report(e.to_string())),
        },
    );
    println!("{passed}/11 criteria passed");
    if passed == 11 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
