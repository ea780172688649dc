use std::sync::{Arc, Mutex};

use codicast::diffusion::NoisePredictor;
use codicast::encoder::ConditionEmbedding;
use codicast::forecast::{
    ensemble_forecast, member_seed, rollout, step_seed, Execution, Manifest, UncertaintyField,
};
use codicast::grid::{fit_norm, load_series, make_synthetic, GridField, GridSpec, NormStats};
use codicast::schedule::{NoiseSchedule, ScheduleParams};
use codicast::{seed, Error, Result};

fn raw_condition(prev: &GridField, curr: &GridField) -> Result<ConditionEmbedding> {
    let c = prev.c();
    let mut v = Vec::new();
    for (a, b) in prev.values().chunks(c).zip(curr.values().chunks(c)) {
        v.extend(a.iter().chain(b).map(|&x| x as f32));
    }
    ConditionEmbedding::from_matrix(prev.h() * prev.w(), 2 * c, v)
}

/// Records every pair of frames it is conditioned on and predicts a smooth
/// function of the input and condition.
struct Recorder {
    s: NoiseSchedule,
    seen: Mutex<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl Recorder {
    fn new(n: usize) -> Self {
        let s = ScheduleParams {
            n,
            ..ScheduleParams::default()
        }
        .build()
        .unwrap();
        Self {
            s,
            seen: Mutex::new(Vec::new()),
        }
    }
}

impl NoisePredictor for Recorder {
    fn schedule(&self) -> &NoiseSchedule {
        &self.s
    }
    fn condition(&self, p: &GridField, c: &GridField) -> Result<ConditionEmbedding> {
        self.seen
            .lock()
            .unwrap()
            .push((p.values().to_vec(), c.values().to_vec()));
        raw_condition(p, c)
    }
    fn predict_noise(&self, x: &[f64], n: usize, cond: &ConditionEmbedding) -> Result<Vec<f64>> {
        let c = cond.cols() / 2;
        Ok(x.iter()
            .enumerate()
            .map(|(i, v)| {
                let row = i / c;
                let ch = i % c;
                let curr = f64::from(cond.values()[row * cond.cols() + c + ch]);
                0.3 * (v - curr).tanh() + 0.01 * n as f64
            })
            .collect())
    }
}

fn setup() -> (NormStats, GridField, GridField) {
    let series = make_synthetic(4, 8, 2, 12, 5).unwrap();
    let norm = fit_norm(&series).unwrap();
    (norm, series.frame(0).clone(), series.frame(1).clone())
}

#[test]
fn rollout_feeds_back_its_own_predictions() {
    let (norm, x0, x1) = setup();
    let model = Recorder::new(4);
    let out = rollout(&model, &norm, &x0, &x1, 4, 9).unwrap();
    assert_eq!(out.len(), 4);
    let seen = model.seen.lock().unwrap().clone();
    assert_eq!(seen.len(), 4);
    let normed: Vec<Vec<f64>> = [&x0, &x1]
        .into_iter()
        .chain(out.iter())
        .map(|f| norm.normalize(f).unwrap().values().to_vec())
        .collect();
    for (k, (p, c)) in seen.iter().enumerate() {
        for (a, b) in p.iter().zip(&normed[k]) {
            assert!((a - b).abs() < 1e-9, "step {} prev", k + 1);
        }
        for (a, b) in c.iter().zip(&normed[k + 1]) {
            assert!((a - b).abs() < 1e-9, "step {} curr", k + 1);
        }
    }
}

#[test]
fn rollout_is_deterministic_in_seed() {
    let (norm, x0, x1) = setup();
    let model = Recorder::new(3);
    let a = rollout(&model, &norm, &x0, &x1, 3, 1).unwrap();
    let b = rollout(&model, &norm, &x0, &x1, 3, 1).unwrap();
    let c = rollout(&model, &norm, &x0, &x1, 3, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn zero_steps_rejected() {
    let (norm, x0, x1) = setup();
    assert!(matches!(
        rollout(&Recorder::new(2), &norm, &x0, &x1, 0, 0),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn seed_derivations_match_domains() {
    assert_eq!(member_seed(7, 3), seed::derive(7, seed::MEMBER, 3));
    assert_eq!(step_seed(7, 3), seed::derive(7, seed::STEP, 3));
}

#[test]
fn single_member_equals_plain_rollout() {
    let (norm, x0, x1) = setup();
    let model = Recorder::new(3);
    let ens = ensemble_forecast(&model, &norm, &x0, &x1, 3, 1, 21, 6.0, Execution::Serial).unwrap();
    let direct = rollout(&model, &norm, &x0, &x1, 3, member_seed(21, 0)).unwrap();
    assert_eq!(ens.members[0], direct);
    assert_eq!(ens.lead_hours, vec![6.0, 12.0, 18.0]);
    let unc = ens.uncertainty().unwrap();
    assert!(unc.iter().all(|u| u.std.values().iter().all(|&s| s == 0.0)));
}

#[test]
fn serial_and_parallel_agree_bitwise() {
    let (norm, x0, x1) = setup();
    let model = Recorder::new(3);
    let serial = ensemble_forecast(&model, &norm, &x0, &x1, 3, 6, 4, 6.0, Execution::Serial).unwrap();
    for threads in [1, 2, 4] {
        let par = ensemble_forecast(&model, &norm, &x0, &x1, 3, 6, 4, 6.0, Execution::Parallel(threads))
            .unwrap();
        assert_eq!(serial, par, "{threads} threads");
    }
}

#[test]
fn thread_setting_zero_is_serial() {
    assert_eq!(Execution::from_threads(0).unwrap(), Execution::Serial);
    assert_eq!(Execution::from_threads(3).unwrap(), Execution::Parallel(3));
}

fn names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("v{i}")).collect()
}

fn constant(spec: &Arc<GridSpec>, v: f64) -> GridField {
    GridField::new(spec.clone(), vec![v; spec.frame_len()]).unwrap()
}

#[test]
fn two_member_mean_and_population_std() {
    let spec = Arc::new(GridSpec::equiangular(2, 3, names(2)).unwrap());
    let a = constant(&spec, 0.0);
    let b = constant(&spec, 2.0);
    let u = UncertaintyField::from_members(&[&a, &b]).unwrap();
    assert!(u.mean.values().iter().all(|&m| m == 1.0));
    assert!(u.std.values().iter().all(|&s| s == 1.0));
}

#[test]
fn uncertainty_matches_brute_force() {
    let series = make_synthetic(3, 4, 2, 8, 2).unwrap();
    let frames: Vec<&GridField> = series.frames().iter().collect();
    let u = UncertaintyField::from_members(&frames).unwrap();
    let m = frames.len() as f64;
    for i in 0..series.spec().frame_len() {
        let xs: Vec<f64> = frames.iter().map(|f| f.values()[i]).collect();
        let mean = xs.iter().sum::<f64>() / m;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
        assert!((u.mean.values()[i] - mean).abs() < 1e-12);
        assert!((u.std.values()[i] - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn coverage_counts_points_within_k_sigma() {
    let spec = Arc::new(GridSpec::equiangular(2, 2, names(1)).unwrap());
    let a = constant(&spec, 0.0);
    let b = constant(&spec, 2.0);
    let u = UncertaintyField::from_members(&[&a, &b]).unwrap();
    // Offsets from the mean of 0, 0.5, 1.5 and 3 with std 1.
    let truth = GridField::new(spec.clone(), vec![1.0, 1.5, -0.5, 4.0]).unwrap();
    assert_eq!(u.coverage(&truth, 1.0).unwrap(), vec![0.5]);
    assert_eq!(u.coverage(&truth, 2.0).unwrap(), vec![0.75]);
}

#[test]
fn export_writes_members_summary_and_manifest() {
    let (norm, x0, x1) = setup();
    let model = Recorder::new(2);
    let ens = ensemble_forecast(&model, &norm, &x0, &x1, 2, 3, 8, 6.0, Execution::Serial).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = ens.export(dir.path(), 8).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let back: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(back.member_files.len(), 3);
    let m1 = load_series(&dir.path().join("member_1.gwf")).unwrap();
    assert_eq!(m1.len(), 2);
    for (a, b) in m1.frames().iter().zip(&ens.members[1]) {
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }
    let std = load_series(&dir.path().join("std.gwf")).unwrap();
    assert_eq!(std.len(), 2);
}

#[test]
fn one_step_is_a_denormalised_sample() {
    let (norm, x0, x1) = setup();
    let model = Recorder::new(3);
    let out = rollout(&model, &norm, &x0, &x1, 1, 12).unwrap();
    let direct = codicast::diffusion::sample(
        &model,
        &norm.normalize(&x0).unwrap(),
        &norm.normalize(&x1).unwrap(),
        step_seed(12, 1),
    )
    .unwrap();
    assert_eq!(out, vec![norm.denormalize(&direct).unwrap()]);
}

#[test]
fn statistics_ignore_member_order() {
    let series = make_synthetic(3, 4, 2, 6, 8).unwrap();
    let fwd: Vec<&GridField> = series.frames().iter().collect();
    let rev: Vec<&GridField> = fwd.iter().rev().copied().collect();
    let a = UncertaintyField::from_members(&fwd).unwrap();
    let b = UncertaintyField::from_members(&rev).unwrap();
    for (x, y) in a.mean.values().iter().zip(b.mean.values()) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a.std.values().iter().zip(b.std.values()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn identical_members_have_zero_spread_and_degenerate_coverage() {
    let series = make_synthetic(3, 4, 2, 4, 8).unwrap();
    let f = series.frame(0);
    let u = UncertaintyField::from_members(&[f, f, f]).unwrap();
    assert!(u.std.values().iter().all(|&s| s == 0.0));
    assert_eq!(u.coverage(f, 1.0).unwrap(), vec![1.0, 1.0]);
    assert_eq!(u.coverage(series.frame(1), 1.0).unwrap(), vec![0.0, 0.0]);
}
