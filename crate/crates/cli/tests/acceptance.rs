//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Trains the desk models from scratch, so it takes several
//! minutes.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use codicast::denoiser::{DenoiserArch, Fusion};
use codicast::diffusion::{forward_diffuse, sample, train, DenoiserSettings, DiffusionConfig, NoisePredictor, TrainedModel};
use codicast::encoder::{pretrain_autoencoder, AutoencoderArch, ConditionEmbedding};
use codicast::forecast::{ensemble_forecast, Execution, ForecastEnsemble};
use codicast::grid::{fit_norm, make_synthetic, save_series, GridField, GridSeries, GridSpec};
use codicast::metrics::{acc, climatology, lat_weights, persistence_baseline, rmse_weighted, LatWeights};
use codicast::nn::gradcheck::{check, check_where, GradCheckReport};
use codicast::nn::layers::{Dense, ResBlock, SelfAttention};
use codicast::nn::{Graph, NodeId, ParamStore, Tensor};
use codicast::schedule::{build_schedule, Mode, NoiseSchedule, ScheduleParams};
use codicast::train::TrainSettings;
use codicast::{seed, Result};
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t0 = Instant::now();
    let (pass, detail) = f();
    let secs = t0.elapsed().as_secs_f64();
    let o = Outcome {
        name,
        pass,
        detail,
        secs,
    };
    report(&o);
    o
}

fn report(o: &Outcome) {
    println!(
        "{} {} ({:.1}s): {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.name,
        o.secs,
        o.detail
    );
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- schedule

fn schedule_suite() -> (bool, String) {
    let t0 = Instant::now();
    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    for n in [1000, 250, 50, 10, 2] {
        for mode in [Mode::Linear, Mode::Quadratic] {
            let s = build_schedule(n, 1e-4, 0.02, mode).unwrap();
            let ab = s.alpha_bars();
            if ab.windows(2).any(|w| w[1] >= w[0]) {
                bad.push(format!("alpha_bar not strictly decreasing ({n}, {mode:?})"));
            }
            if ab.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
                bad.push(format!("alpha_bar outside (0, 1) ({n}, {mode:?})"));
            }
            let mut prod = 1.0;
            for i in 0..n {
                let t = i as f64 / (n - 1) as f64;
                let beta = match mode {
                    Mode::Linear => 1e-4 + t * (0.02 - 1e-4),
                    Mode::Quadratic => (1e-4f64.sqrt() + t * (0.02f64.sqrt() - 1e-4f64.sqrt())).powi(2),
                };
                prod *= 1.0 - beta;
                worst = worst.max(rel(ab[i], prod));
            }
        }
        let lin = build_schedule(n, 1e-4, 0.02, Mode::Linear).unwrap();
        let quad = build_schedule(n, 1e-4, 0.02, Mode::Quadratic).unwrap();
        if lin.betas().iter().zip(quad.betas()).any(|(l, q)| q > l) {
            bad.push(format!("quadratic above linear at N={n}"));
        }
        if lin.beta(1) != quad.beta(1) || lin.beta(n) != quad.beta(n) {
            bad.push(format!("quadratic endpoints differ at N={n}"));
        }
    }
    if worst > 1e-12 {
        bad.push(format!("cumulative product off by {worst:.2e}"));
    }
    let d = ScheduleParams::default().build().unwrap();
    if d.steps() != 1000 || d.beta(1) != 1e-4 || d.beta(1000) != 0.02 {
        bad.push(format!("default endpoints {} / {}", d.beta(1), d.beta(d.steps())));
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 1.0 {
        bad.push(format!("took {secs:.2}s"));
    }
    (
        bad.is_empty(),
        if bad.is_empty() {
            format!("max product rel error {worst:.1e}; default beta [1e-4, 0.02]")
        } else {
            bad.join("; ")
        },
    )
}

// ---------------------------------------------------------- forward process

fn forward_oracle() -> (bool, String) {
    let t0 = Instant::now();
    let n = 10;
    let draws = 100_000;
    let s = build_schedule(n, 1e-4, 0.02, Mode::Linear).unwrap();
    let x0 = 0.7;
    let mut rng = seed::rng(2024);
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..draws {
        let mut x = x0;
        for k in 1..=n {
            let z: f64 = rng.sample(StandardNormal);
            x = (1.0 - s.beta(k)).sqrt() * x + s.beta(k).sqrt() * z;
        }
        sum += x;
        sq += x * x;
    }
    let m = draws as f64;
    let mean = sum / m;
    let var = (sq - m * mean * mean) / (m - 1.0);
    let want_mean = forward_diffuse(&[x0], n, &[0.0], &s).unwrap()[0];
    let want_var = 1.0 - s.alpha_bar(n);
    let se_mean = (want_var / m).sqrt();
    let se_var = want_var * (2.0 / (m - 1.0)).sqrt();
    let zm = (mean - want_mean) / se_mean;
    let zv = (var - want_var) / se_var;
    let secs = t0.elapsed().as_secs_f64();
    (
        zm.abs() <= 3.0 && zv.abs() <= 3.0 && secs < 10.0,
        format!("N={n}, {draws} draws: mean z={zm:+.2}, variance z={zv:+.2} (limit 3)"),
    )
}

// ---------------------------------------------------------------- gradients

fn random(shape: &[usize], seed_value: u64) -> Tensor<f64> {
    let mut rng = seed::rng(seed_value);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn project(g: &mut Graph<f64>, out: NodeId, seed_value: u64) -> Result<NodeId> {
    let r = g.constant(random(g.shape(out), seed_value));
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn store_with(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new(0);
    for (name, t) in entries {
        s.insert(name, t.clone()).unwrap();
    }
    s
}

fn gradient_suite() -> (bool, String) {
    let t0 = Instant::now();
    const EPS: f64 = 1e-3;
    let mut results: Vec<(String, GradCheckReport)> = Vec::new();

    for (k, stride) in [(3, 1), (2, 1), (1, 1), (3, 2)] {
        let store = store_with(&[
            ("x", random(&[2, 5, 6, 3], 20)),
            ("w", random(&[k, k, 3, 4], 21)),
            ("b", random(&[4], 22)),
        ]);
        let r = check(
            &store,
            |g, s| {
                let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
                let out = g.conv2d(x, w, Some(b), stride)?;
                project(g, out, 23)
            },
            EPS,
            150,
            7,
        )
        .unwrap();
        results.push((format!("conv2d k{k}s{stride}"), r));
    }

    let store = store_with(&[
        ("x", random(&[2, 3, 5], 30)),
        ("y", random(&[2, 4, 5], 31)),
        ("w", random(&[5, 5], 32)),
        ("b", random(&[5], 33)),
    ]);
    let r = check(
        &store,
        |g, s| {
            let (x, y, w, b) = (g.param(s, "x")?, g.param(s, "y")?, g.param(s, "w")?, g.param(s, "b")?);
            let xl = g.linear(x, w, Some(b))?;
            let scores = g.batch_matmul(xl, y, true)?;
            let p = g.softmax(scores)?;
            let out = g.batch_matmul(p, y, false)?;
            project(g, out, 34)
        },
        EPS,
        200,
        8,
    )
    .unwrap();
    results.push(("linear/batch_matmul/softmax".into(), r));

    let store = store_with(&[
        ("x", random(&[2, 3, 4, 16], 40)),
        ("gamma", random(&[16], 41)),
        ("beta", random(&[16], 42)),
    ]);
    let r = check(
        &store,
        |g, s| {
            let (x, gm, bt) = (g.param(s, "x")?, g.param(s, "gamma")?, g.param(s, "beta")?);
            let h = g.group_norm(x, gm, bt, 8)?;
            let h = g.swish(h);
            project(g, h, 43)
        },
        EPS,
        200,
        9,
    )
    .unwrap();
    results.push(("group_norm/swish".into(), r));

    let mut x = random(&[1, 4, 4, 3], 44);
    x.data_mut().iter_mut().for_each(|v| *v += 0.05f64.copysign(*v));
    let store = store_with(&[("x", x)]);
    let r = check(
        &store,
        |g, s| {
            let x = g.param(s, "x")?;
            let h = g.relu(x);
            project(g, h, 45)
        },
        EPS,
        100,
        10,
    )
    .unwrap();
    results.push(("relu".into(), r));

    let store = store_with(&[
        ("x", random(&[2, 4, 6, 3], 50)),
        ("y", random(&[2, 4, 6, 2], 51)),
        ("v", random(&[2, 5], 52)),
    ]);
    let r = check(
        &store,
        |g, s| {
            let (x, y, v) = (g.param(s, "x")?, g.param(s, "y")?, g.param(s, "v")?);
            let p = g.max_pool2(x)?;
            let u = g.upsample2(p)?;
            let c = g.concat_channels(u, y)?;
            let c = g.add_channel_bias(c, v)?;
            let r = g.reshape(c, &[2, 24, 5])?;
            let sc = g.scale(r, 0.7);
            project(g, sc, 53)
        },
        EPS,
        200,
        11,
    )
    .unwrap();
    results.push(("max_pool2/upsample2/concat/bias/reshape/scale".into(), r));

    let store = store_with(&[("a", random(&[3, 4], 60)), ("b", random(&[3, 4], 61))]);
    let r = check(
        &store,
        |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            g.mse(a, b)
        },
        EPS,
        100,
        12,
    )
    .unwrap();
    results.push(("mse".into(), r));

    let mut store = ParamStore::<f64>::new(70);
    let block = ResBlock::new("rb", 8, 16, Some(6));
    block.init(&mut store).unwrap();
    let attn = SelfAttention::new("sa", 16);
    attn.init(&mut store).unwrap();
    let dense = Dense::new("d", 16, 5);
    dense.init(&mut store).unwrap();
    store.insert("x", random(&[2, 4, 4, 8], 71)).unwrap();
    store.insert("temb", random(&[2, 6], 72)).unwrap();
    let r = check(
        &store,
        |g, s| {
            let x = g.param(s, "x")?;
            let t = g.param(s, "temb")?;
            let h = block.forward(g, s, x, Some(t))?;
            let h = attn.forward(g, s, h)?;
            let h = g.add(h, h)?;
            let h = dense.forward(g, s, h)?;
            project(g, h, 73)
        },
        EPS,
        300,
        13,
    )
    .unwrap();
    results.push(("resblock/self-attention/add/dense".into(), r));

    for fusion in [Fusion::Residual, Fusion::Concat] {
        let mut arch = DenoiserArch::new(16, 32, 2, 8, 8, 8).unwrap();
        arch.fusion = fusion;
        let store = arch.init::<f64>(21).unwrap();
        let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.constant(random(&[2, 16, 32, 2], 11));
            let c = g.constant(random(&[2, 16 * 32, 8], 12));
            let eps = g.constant(random(&[2, 16, 32, 2], 13));
            let pred = arch.forward(g, s, x, &[3, 17], c)?;
            g.mse(pred, eps)
        };
        let xa = check_where(&store, loss, EPS, 200, 1, |n| n.starts_with("xattn.")).unwrap();
        results.push((format!("denoiser 16x32x2 {fusion:?} cross-attention"), xa));
        let all = check_where(&store, loss, EPS, 120, 2, |_| true).unwrap();
        results.push((format!("denoiser 16x32x2 {fusion:?} all parameters"), all));
    }

    let secs = t0.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .unwrap();
    let failing: Vec<String> = results
        .iter()
        .filter(|(_, r)| r.max_rel_error > 1e-4 || r.checked == 0)
        .map(|(n, r)| format!("{n} {:.2e}", r.max_rel_error))
        .collect();
    let checked: usize = results.iter().map(|(_, r)| r.checked).sum();
    let straddled: usize = results.iter().map(|(_, r)| r.straddled).sum();
    for (n, r) in &results {
        println!(
            "    {n}: {} coords, rel err {:.2e} (plain central {:.2e}), {} straddled",
            r.checked, r.max_rel_error, r.max_rel_error_plain, r.straddled
        );
    }
    let mut detail = format!(
        "{} checks, {checked} coordinates, worst {:.2e} ({}), {straddled} kink-straddling draws redrawn",
        results.len(),
        worst.1.max_rel_error,
        worst.0
    );
    if !failing.is_empty() {
        detail.push_str(&format!("; over 1e-4: {}", failing.join(", ")));
    }
    if secs >= 120.0 {
        detail.push_str(&format!("; took {secs:.0}s, limit 120s"));
    }
    (failing.is_empty() && secs < 120.0, detail)
}

// ------------------------------------------------------------ Alg-2 inverse

fn raw_condition(prev: &GridField, curr: &GridField) -> Result<ConditionEmbedding> {
    let c = prev.c();
    let mut v = Vec::new();
    for (a, b) in prev.values().chunks(c).zip(curr.values().chunks(c)) {
        v.extend(a.iter().chain(b).map(|&x| x as f32));
    }
    ConditionEmbedding::from_matrix(prev.h() * prev.w(), 2 * c, v)
}

struct Perfect {
    s: NoiseSchedule,
    x0: Vec<f64>,
}

impl NoisePredictor for Perfect {
    fn schedule(&self) -> &NoiseSchedule {
        &self.s
    }
    fn condition(&self, p: &GridField, c: &GridField) -> Result<ConditionEmbedding> {
        raw_condition(p, c)
    }
    fn predict_noise(&self, x: &[f64], n: usize, _: &ConditionEmbedding) -> Result<Vec<f64>> {
        let ab = self.s.alpha_bar(n);
        Ok(x.iter()
            .zip(&self.x0)
            .map(|(xn, x0)| (xn - ab.sqrt() * x0) / (1.0 - ab).sqrt())
            .collect())
    }
}

fn inversion_oracle() -> (bool, String) {
    let t0 = Instant::now();
    let series = make_synthetic(8, 16, 2, 4, 1).unwrap();
    let mut worst = 0.0f64;
    for (i, mode) in [Mode::Linear, Mode::Quadratic].into_iter().enumerate() {
        for &beta_end in &[0.02, 0.4, 0.9] {
            let s = build_schedule(1, 1e-4, beta_end, mode).unwrap();
            let x0 = series.frame(2 + i % 2).values().to_vec();
            let model = Perfect { s, x0: x0.clone() };
            for sd in 0..5 {
                let out = sample(&model, series.frame(0), series.frame(1), sd).unwrap();
                for (a, b) in out.values().iter().zip(&x0) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        worst <= 1e-6 && secs < 1.0,
        format!("N=1, perfect noise stub, 30 samples: max |x0_hat - x0| = {worst:.1e}"),
    )
}

// ------------------------------------------------------------------ metrics

fn rand_traj(spec: &Arc<GridSpec>, m: usize, rng: &mut impl Rng) -> Vec<GridField> {
    (0..m)
        .map(|_| {
            let v = (0..spec.frame_len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
            GridField::new(spec.clone(), v).unwrap()
        })
        .collect()
}

fn metrics_identities() -> (bool, String) {
    let t0 = Instant::now();
    let mut rng = seed::rng(77);
    let mut bad = Vec::new();
    let names = vec!["a".to_string(), "b".to_string()];
    let spec = Arc::new(GridSpec::equiangular(8, 16, names.clone()).unwrap());
    let w = LatWeights::for_field(&GridField::zeros(spec.clone())).unwrap();
    let truth = rand_traj(&spec, 4, &mut rng);
    let clim = climatology(&rand_traj(&spec, 3, &mut rng)).unwrap();
    if rmse_weighted(&truth, &truth, &w).unwrap().iter().any(|&r| r != 0.0) {
        bad.push("pred = truth RMSE not 0".to_string());
    }
    if acc(&truth, &truth, &clim, &w).unwrap().iter().any(|a| (a - 1.0).abs() > 1e-12) {
        bad.push("pred = truth ACC not 1".to_string());
    }
    let mirrored: Vec<GridField> = truth
        .iter()
        .map(|t| {
            let v = t.values().iter().zip(clim.mean.values()).map(|(x, c)| 2.0 * c - x).collect();
            GridField::new(spec.clone(), v).unwrap()
        })
        .collect();
    if acc(&mirrored, &truth, &clim, &w).unwrap().iter().any(|a| (a + 1.0).abs() > 1e-12) {
        bad.push("mirrored anomalies ACC not -1".to_string());
    }
    let plus2: Vec<GridField> = truth
        .iter()
        .map(|t| GridField::new(spec.clone(), t.values().iter().map(|v| v + 2.0).collect()).unwrap())
        .collect();
    if rmse_weighted(&plus2, &truth, &w).unwrap().iter().any(|r| (r - 2.0).abs() > 1e-12) {
        bad.push("uniform +2 RMSE not 2".to_string());
    }
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let lat = vec![rng.gen_range(-89.0..0.0), rng.gen_range(0.0..89.0)];
        let s = Arc::new(GridSpec::new(lat.clone(), vec![0.0, 180.0], names.clone()).unwrap());
        let m = rng.gen_range(1..4);
        let (p, t) = (rand_traj(&s, m, &mut rng), rand_traj(&s, m, &mut rng));
        let c = climatology(&rand_traj(&s, 2, &mut rng)).unwrap();
        let w = lat_weights(&lat).unwrap();
        let r = rmse_weighted(&p, &t, &w).unwrap();
        let a = acc(&p, &t, &c, &w).unwrap();
        let cos: Vec<f64> = lat.iter().map(|d| d.to_radians().cos()).collect();
        let l: Vec<f64> = cos.iter().map(|x| 2.0 * x / (cos[0] + cos[1])).collect();
        for ch in 0..2 {
            let (mut rr, mut num, mut da, mut db) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..m {
                let mut sq = 0.0;
                for y in 0..2 {
                    for x in 0..2 {
                        let (pv, tv, cv) = (p[k].at(y, x, ch), t[k].at(y, x, ch), c.mean.at(y, x, ch));
                        sq += l[y] * (pv - tv).powi(2);
                        num += l[y] * (pv - cv) * (tv - cv);
                        da += l[y] * (pv - cv).powi(2);
                        db += l[y] * (tv - cv).powi(2);
                    }
                }
                rr += (sq / 4.0).sqrt();
            }
            worst = worst.max((r[ch] - rr / m as f64).abs());
            worst = worst.max((a[ch] - num / (da * db).sqrt()).abs());
        }
    }
    if worst > 1e-10 {
        bad.push(format!("brute-force disagreement {worst:.1e}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 1.0 {
        bad.push(format!("took {secs:.2}s"));
    }
    (
        bad.is_empty(),
        if bad.is_empty() {
            format!("identities hold; 500 random 2x2 instances agree to {worst:.1e}")
        } else {
            bad.join("; ")
        },
    )
}

// --------------------------------------------------------------- desk runs

const DESK_FRAMES: usize = 300;
const DESK_TRAIN: usize = 240;
const DESK_ICS: usize = 10;
const DESK_MEMBERS: usize = 5;

fn desk_schedule(n: usize) -> ScheduleParams {
    ScheduleParams {
        n,
        beta_start: 0.002,
        beta_end: 0.4,
        mode: Mode::Linear,
    }
}

fn desk_config(n: usize, seed_value: u64) -> DiffusionConfig {
    DiffusionConfig {
        schedule: desk_schedule(n),
        denoiser: DenoiserSettings {
            base_width: 16,
            d: 32,
            positional: true,
            fusion: Fusion::Concat,
        },
        train: TrainSettings {
            epochs: 200,
            batch: 16,
            lr: 1e-3,
            decay_steps: 10_000,
            decay_rate: 0.95,
            seed: seed_value,
        },
    }
}

struct Desk {
    data: GridSeries,
    model: TrainedModel,
    train_secs: f64,
}

fn train_desk(seed_value: u64, n: usize) -> Desk {
    let t0 = Instant::now();
    let data = make_synthetic(8, 16, 2, DESK_FRAMES, seed_value).unwrap();
    let trainset = data.slice(0..DESK_TRAIN).unwrap();
    let norm = fit_norm(&trainset).unwrap();
    let normed = norm.normalize_series(&trainset).unwrap();
    let frames: Vec<&GridField> = normed.frames().iter().collect();
    let ae = TrainSettings {
        epochs: 50,
        batch: 16,
        lr: 1e-3,
        decay_steps: 10_000,
        decay_rate: 0.95,
        seed: seed_value,
    };
    let (mut enc, _) =
        pretrain_autoencoder(&frames, AutoencoderArch::with_latent(2, 32).unwrap(), &ae).unwrap();
    enc.norm = Some(norm.clone());
    let model = train(&desk_config(n, seed_value), &trainset, &norm, Arc::new(enc)).unwrap();
    Desk {
        data,
        model,
        train_secs: t0.elapsed().as_secs_f64(),
    }
}

/// Initial-condition indices `t` in the held-out part; the forecast starts
/// from frames `t - 1` and `t`.
fn ic_times(steps: usize) -> Vec<usize> {
    (0..DESK_ICS).map(|i| DESK_TRAIN + 1 + i * 5).filter(|t| t + steps < DESK_FRAMES).collect()
}

fn ic_seed(seed_value: u64, ic: usize) -> u64 {
    seed::derive(seed_value, 0x6963, ic as u64)
}

fn desk_ensembles(d: &Desk, seed_value: u64, steps: usize) -> Vec<(usize, ForecastEnsemble)> {
    ic_times(steps)
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let e = ensemble_forecast(
                &d.model,
                &d.model.norm,
                d.data.frame(t - 1),
                d.data.frame(t),
                steps,
                DESK_MEMBERS,
                ic_seed(seed_value, i),
                6.0,
                Execution::Serial,
            )
            .unwrap();
            (t, e)
        })
        .collect()
}

/// Per-channel ensemble-mean RMSE at `lead` (1-based), averaged over
/// initial conditions, and the persistence RMSE at the same lead.
fn lead_rmse(d: &Desk, ens: &[(usize, ForecastEnsemble)], lead: usize) -> (Vec<f64>, Vec<f64>) {
    let w = LatWeights::for_field(d.data.frame(0)).unwrap();
    let mut pred = Vec::new();
    let mut pers = Vec::new();
    let mut truth = Vec::new();
    for (t, e) in ens {
        pred.push(e.uncertainty().unwrap()[lead - 1].mean.clone());
        let observed = d.data.slice(0..t + 1).unwrap();
        pers.push(persistence_baseline(&observed, lead)[lead - 1].clone());
        truth.push(d.data.frame(t + lead).clone());
    }
    (rmse_weighted(&pred, &truth, &w).unwrap(), rmse_weighted(&pers, &truth, &w).unwrap())
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn determinism(d: &Desk) -> (bool, String) {
    let t = DESK_TRAIN + 1;
    let (prev, curr) = (d.data.frame(t - 1), d.data.frame(t));
    let run = |exec| {
        ensemble_forecast(&d.model, &d.model.norm, prev, curr, 3, 5, 99, 6.0, exec).unwrap()
    };
    let serial = run(Execution::Serial);
    let concurrent: Vec<bool> = [2, 5].iter().map(|&n| run(Execution::Parallel(n)) == serial).collect();
    let in_process = concurrent.iter().all(|&b| b);

    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("desk.ckpt");
    d.model.save(&model_path).unwrap();
    let init = dir.path().join("init.gwf");
    save_series(&init, &d.data.slice(t - 1..t + 1).unwrap()).unwrap();
    let outs: Vec<_> = ["0", "3"]
        .iter()
        .map(|threads| {
            let out = dir.path().join(format!("fc_{threads}"));
            let status = Command::new(env!("CARGO_BIN_EXE_codicast"))
                .env("CODICAST_THREADS", threads)
                .args(["forecast", "--model", path(&model_path), "--init", path(&init)])
                .args(["--steps", "3", "--members", "5", "--seed", "99", "--out", path(&out)])
                .status()
                .unwrap();
            (status.success(), out)
        })
        .collect();
    let mut cross = outs.iter().all(|(ok, _)| *ok);
    if cross {
        for name in ["manifest.json", "mean.gwf", "std.gwf"]
            .into_iter()
            .map(String::from)
            .chain((0..5).map(|i| format!("member_{i}.gwf")))
        {
            let a = std::fs::read(outs[0].1.join(&name)).unwrap();
            let b = std::fs::read(outs[1].1.join(&name)).unwrap();
            cross &= a == b;
        }
    }
    // The binary's output must also match the in-process serial run.
    if cross {
        let m0 = codicast::grid::load_series(&outs[0].1.join("member_0.gwf")).unwrap();
        cross &= m0
            .frames()
            .iter()
            .zip(&serial.members[0])
            .all(|(a, b)| a.values().iter().zip(b.values()).all(|(x, y)| *x == f64::from(*y as f32)));
    }
    (
        in_process && cross,
        format!(
            "M=5 serial vs 2 and 5 workers identical: {in_process}; two processes (serial, 3 workers) byte-identical: {cross}"
        ),
    )
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn step_timing(model: &TrainedModel, data: &GridSeries) -> (bool, String) {
    let t = DESK_TRAIN + 1;
    let norm = &model.norm;
    let prev = norm.normalize(data.frame(t - 1)).unwrap();
    let curr = norm.normalize(data.frame(t)).unwrap();
    let ns = [5usize, 25, 50, 100];
    let models: Vec<TrainedModel> = ns
        .iter()
        .map(|&n| {
            let mut m = model.clone();
            m.schedule = desk_schedule(n).build().unwrap();
            m
        })
        .collect();
    // Repeats cycle through every N so a transient slowdown hits all of them
    // alike instead of one N's whole series.
    let mut times = vec![f64::INFINITY; ns.len()];
    for rep in 0..5 {
        for (m, best) in models.iter().zip(times.iter_mut()) {
            let t0 = Instant::now();
            for k in 0..4 {
                sample(m, &prev, &curr, 31 * rep + k).unwrap();
            }
            *best = best.min(t0.elapsed().as_secs_f64());
        }
    }
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let (mx, my) = (x.iter().sum::<f64>() / 4.0, times.iter().sum::<f64>() / 4.0);
    let slope = x.iter().zip(&times).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / x.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    let icept = my - slope * mx;
    let devs: Vec<f64> = x.iter().zip(&times).map(|(a, b)| (b - (icept + slope * a)) / (icept + slope * a)).collect();
    let ok = devs.iter().all(|d| d.abs() <= 0.2);
    (
        ok,
        format!(
            "4 samples per N: times {} s; deviation from linear fit {}",
            ns.iter().zip(&times).map(|(n, t)| format!("N={n}:{t:.3}")).collect::<Vec<_>>().join(" "),
            devs.iter().map(|d| format!("{:+.1}%", 100.0 * d)).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn main() -> ExitCode {
    let mut outcomes = vec![
        timed("schedule suite", schedule_suite),
        timed("forward-process oracle", forward_oracle),
        timed("gradient suite", gradient_suite),
        timed("reverse-chain inversion oracle", inversion_oracle),
        timed("metrics identities", metrics_identities),
    ];

    // Desk experiment: five independent seeds, each with its own data,
    // encoder and denoiser.
    let t0 = Instant::now();
    let mut passes = 0;
    let mut lines = Vec::new();
    let mut first: Option<(Desk, Vec<(usize, ForecastEnsemble)>)> = None;
    for s in 0..5u64 {
        let desk = train_desk(s, 50);
        let steps = if s == 0 { 10 } else { 5 };
        let ens = desk_ensembles(&desk, s, steps);
        let (l1, p1) = lead_rmse(&desk, &ens, 1);
        let (l5, p5) = lead_rmse(&desk, &ens, 5);
        let beats = l1.iter().zip(&p1).all(|(a, b)| a < b);
        let monotone = l1.iter().zip(&l5).all(|(a, b)| a <= b);
        let ok = beats && monotone;
        passes += usize::from(ok);
        let line = format!(
            "seed {s}: lead-1 RMSE {} vs persistence {}; lead-5 {} (persistence {}); train {:.0}s -> {}",
            fmt(&l1),
            fmt(&p1),
            fmt(&l5),
            fmt(&p5),
            desk.train_secs,
            if ok { "ok" } else { "miss" }
        );
        println!("    {line}");
        lines.push(line);
        if s == 0 {
            first = Some((desk, ens));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let o = Outcome {
        name: "end-to-end desk experiment",
        pass: passes >= 4,
        detail: format!(
            "{passes}/5 seeds beat persistence at lead 1 with lead-1 <= lead-5 on every channel (need 4); {:.1} min (target 15)",
            secs / 60.0
        ),
        secs,
    };
    report(&o);
    outcomes.push(o);

    let (desk0, ens0) = first.expect("seed 0 ran");
    outcomes.push(timed("uncertainty growth", || {
        let spreads: Vec<Vec<f64>> = ens0
            .iter()
            .map(|(_, e)| {
                e.uncertainty()
                    .unwrap()
                    .iter()
                    .map(|u| u.std.values().iter().sum::<f64>() / u.std.values().len() as f64)
                    .collect()
            })
            .collect();
        let rhos: Vec<f64> = spreads
            .iter()
            .map(|spread| {
                let leads: Vec<f64> = (1..=spread.len()).map(|k| k as f64).collect();
                spearman(&leads, spread)
            })
            .collect();
        let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
        let by_lead: Vec<f64> = (0..spreads[0].len())
            .map(|k| spreads.iter().map(|s| s[k]).sum::<f64>() / spreads.len() as f64)
            .collect();
        (
            mean >= 0.8,
            format!(
                "mean Spearman {mean:.3} over {} initial conditions, 10 leads (per IC {}); IC-mean spread by lead {}",
                rhos.len(),
                fmt(&rhos),
                fmt(&by_lead)
            ),
        )
    }));

    outcomes.push(timed("ensemble determinism", || determinism(&desk0)));

    outcomes.push(timed("diffusion-step sweep", || {
        let short = train_desk(0, 5);
        let ens5 = desk_ensembles(&short, 0, 1);
        let (r5, _) = lead_rmse(&short, &ens5, 1);
        let (r50, _) = lead_rmse(&desk0, &ens0, 1);
        let better = r50.iter().zip(&r5).all(|(a, b)| a < b);
        let (linear, timing) = step_timing(&desk0.model, &desk0.data);
        (
            better && linear,
            format!("lead-1 RMSE N=50 {} vs N=5 {}; {timing}", fmt(&r50), fmt(&r5)),
        )
    }));

    // Not a numbered criterion, but a stated invariant of the sampler.
    outcomes.push(timed("sampler finiteness (100 seeds)", || {
        let t = DESK_TRAIN + 1;
        let norm = &desk0.model.norm;
        let prev = norm.normalize(desk0.data.frame(t - 1)).unwrap();
        let curr = norm.normalize(desk0.data.frame(t)).unwrap();
        let bad = (0..100u64)
            .filter(|&s| match sample(&desk0.model, &prev, &curr, s) {
                Ok(f) => f.values().iter().any(|v| !v.is_finite()),
                Err(_) => true,
            })
            .count();
        (bad == 0, format!("{bad} of 100 samples non-finite"))
    }));

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    println!(
        "acceptance: {}/{} passed{}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failed.join(", "))
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
