//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines appear in order
//! and unbuffered; exits non-zero when any criterion fails. Criteria 6 and 7
//! train seven small models on the synthetic task and dominate the runtime.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotunet::checkpoint::{load_checkpoint, save_checkpoint};
use rotunet::equivariance::{certify, default_tolerance, EquivarianceReport};
use rotunet::experiment::Experiment;
use rotunet::groups::{GroupKind, SymmetryGroup};
use rotunet::layers::{group_pool, group_relu, GroupBatchNorm, GroupConvLayer, LiftingConvLayer, PoolMode};
use rotunet::metrics::{aggregate_folds, binary_metrics, semantic_metrics, ConfusionCounts, MetricRecord};
use rotunet::params::ParamStore;
use rotunet::tensor::{gradient_error, BatchNormMode, DiceTarget, RunningStats, Scalar, Tape, Tensor, Var};
use rotunet::train::{
    evaluate, make_folds, AugmentDraw, Averaging, DataSetting, ExperimentConfig, Normalization, RunLog, N_FOLDS,
};
use rotunet::unet::{ArchConfig, ModelDescriptor, ModelSize, UNet};
use rotunet::Result;

// criterion 2
const CERT_HW: usize = 64;
const CERT_PROBES: usize = 8;
const CERT_TOL_F64: f64 = 1e-10;
const CERT_TOL_F32: f64 = 1e-4;
// criterion 3
const VANILLA_SMALL_TARGET: f64 = 500_000.0;
const VANILLA_LARGE_TARGET: f64 = 11_000_000.0;
const VANILLA_BAND: f64 = 0.10;
const EQUIVARIANT_BAND: f64 = 0.15;
// criterion 4
const GRAD_TOL_F32: f64 = 1e-3;
const GRAD_TOL_F64: f64 = 1e-6;
// criterion 5
const METRIC_PAIRS: usize = 100;
const METRIC_SIDE: usize = 16;
const RATIO_TOL: f64 = 1e-12;
// criterion 6
const IOU_SHIFT_TOL: f64 = 1e-4;
// criterion 7
const SEEDS: [u64; 3] = [0, 1, 2];
const DICE_TARGET: f64 = 0.7;
const LOSS_EPOCHS: usize = 5;
// criterion 8
const AUG_DRAWS: usize = 10_000;
const FREQ_TOL: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn timed(limit_s: f64, f: impl FnOnce() -> Result<Outcome>) -> Result<Outcome> {
    let start = Instant::now();
    let mut o = f()?;
    let s = start.elapsed().as_secs_f64();
    let in_time = s < limit_s;
    o.detail = format!("{}; {s:.1}s (limit {limit_s}s)", o.detail);
    o.pass &= in_time;
    Ok(o)
}

// ---------------------------------------------------------------- criterion 1

fn group_axioms() -> Result<Outcome> {
    timed(1.0, || {
        let mut failures = 0;
        let mut triples = 0;
        for kind in [GroupKind::C4, GroupKind::C8, GroupKind::D4] {
            let g = SymmetryGroup::new(kind);
            let els = g.elements();
            let e = g.identity();
            for a in els {
                failures += (g.compose(&e, a)? != *a) as usize + (g.compose(a, &a.inverse())? != e) as usize;
                let pa = g.regular_rep_perm(a)?;
                for b in els {
                    let ab = g.compose(a, b)?;
                    failures += !els.contains(&ab) as usize;
                    let pb = g.regular_rep_perm(b)?;
                    let composed: Vec<usize> = pb.iter().map(|&h| pa[h]).collect();
                    failures += (composed != g.regular_rep_perm(&ab)?) as usize;
                    for c in els {
                        triples += 1;
                        failures += (g.compose(&ab, c)? != g.compose(a, &g.compose(b, c)?)?) as usize;
                    }
                }
            }
        }
        Ok(outcome(failures == 0, format!("{triples} triples, {failures} violations")))
    })
}

// ---------------------------------------------------------------- criterion 2

fn exact_ok(r: &EquivarianceReport, bound: f64) -> bool {
    r.exact().all(|d| d.defect < bound)
}

fn certificates() -> Result<Outcome> {
    timed(120.0, || {
        let mut pass = true;
        let mut parts = Vec::new();
        for kind in [GroupKind::C4, GroupKind::D4, GroupKind::C8] {
            let cfg = ArchConfig::preset(kind, ModelSize::Small).input_hw(CERT_HW);
            let m64 = UNet::<f64>::new(cfg, 0)?;
            let r64 = certify(&m64, CERT_PROBES, 0, default_tolerance::<f64>())?;
            let r32 = certify(&m64.cast::<f32>(), CERT_PROBES, 0, default_tolerance::<f32>())?;
            let ok = exact_ok(&r64, CERT_TOL_F64) && exact_ok(&r32, CERT_TOL_F32) && r64.exact().count() >= 4;
            pass &= ok;
            let mut s = format!(
                "{kind} exact max {:.1e} (f64) / {:.1e} (f32)",
                r64.max_exact_defect(),
                r32.max_exact_defect()
            );
            let approx: Vec<f64> = r64.approximate().map(|d| d.defect).collect();
            if !approx.is_empty() {
                let max = approx.iter().cloned().fold(0.0, f64::max);
                s.push_str(&format!(", 45° max {max:.3} (reported)"));
            }
            parts.push(s);
        }
        Ok(outcome(pass, parts.join("; ")))
    })
}

// ---------------------------------------------------------------- criterion 3

const TABLE: [(&[GroupKind], ModelSize, [usize; 10]); 6] = [
    (&[GroupKind::Trivial], ModelSize::Small, [12, 12, 22, 44, 86, 172, 86, 44, 22, 12]),
    (&[GroupKind::Trivial], ModelSize::Large, [52, 52, 104, 206, 410, 820, 410, 206, 104, 52]),
    (&[GroupKind::C4], ModelSize::Small, [4, 4, 6, 12, 24, 46, 24, 12, 6, 4]),
    (&[GroupKind::C4], ModelSize::Large, [14, 14, 28, 56, 112, 222, 112, 56, 28, 14]),
    (&[GroupKind::C8, GroupKind::D4], ModelSize::Small, [4, 4, 6, 10, 18, 34, 18, 10, 6, 4]),
    (&[GroupKind::C8, GroupKind::D4], ModelSize::Large, [10, 10, 20, 40, 78, 154, 78, 40, 20, 10]),
];

fn count(kind: GroupKind, size: ModelSize) -> Result<usize> {
    Ok(ModelDescriptor::from_config(&ArchConfig::preset(kind, size))?.param_count())
}

fn table_fidelity() -> Result<Outcome> {
    timed(1.0, || {
        let mut cells = 0;
        let mut matched = 0;
        // C8 and D4 share a row; a cell matches when every family in the row does
        for (families, size, row) in TABLE {
            let built = families
                .iter()
                .map(|&fam| Ok(ModelDescriptor::from_config(&ArchConfig::preset(fam, size))?.filters()))
                .collect::<Result<Vec<_>>>()?;
            matched += (0..row.len()).filter(|&i| built.iter().all(|f| f[i] == row[i])).count();
            cells += row.len();
        }
        let mut pass = cells == 60 && matched == 60;
        let mut parts = vec![format!("{matched}/{cells} filter cells")];
        for (size, target) in [(ModelSize::Small, VANILLA_SMALL_TARGET), (ModelSize::Large, VANILLA_LARGE_TARGET)] {
            let base = count(GroupKind::Trivial, size)?;
            let dev = base as f64 / target - 1.0;
            let ok = dev.abs() <= VANILLA_BAND;
            pass &= ok;
            parts.push(format!("vanilla-{size} {base} ({:+.1}% {})", 100.0 * dev, if ok { "ok" } else { "outside ±10%" }));
            for fam in [GroupKind::C4, GroupKind::C8, GroupKind::D4] {
                let n = count(fam, size)?;
                let ratio = n as f64 / base as f64;
                let ok = (ratio - 1.0).abs() <= EQUIVARIANT_BAND;
                pass &= ok;
                parts.push(format!("{fam}-{size} {n} ({ratio:.2}× {})", if ok { "ok" } else { "outside ±15%" }));
            }
        }
        Ok(outcome(pass, parts.join(", ")))
    })
}

// ---------------------------------------------------------------- criterion 4

trait Step: Scalar {
    const STEP: f64;
}

impl Step for f32 {
    const STEP: f64 = 1e-2;
}

impl Step for f64 {
    const STEP: f64 = 1e-5;
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform<T: Scalar>(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, r)
}

/// Distinct values far apart relative to the step, so pooling winners stay put.
fn separated<T: Scalar>(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut v: Vec<T> = (0..n).map(|i| T::from_f64(0.05 * i as f64 - 0.025 * n as f64)).collect();
    v.shuffle(r);
    Tensor::from_vec(shape.to_vec(), v).expect("shape matches")
}

fn project<T: Scalar>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(tape.value(y).shape().to_vec(), -1.0, 1.0, &mut rng(seed));
    tape.dot(y, w)
}

fn leaves<T: Scalar>(tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Vec<Var> {
    inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect()
}

/// Worst relative gradient error per layer at precision `T`.
fn layer_errors<T: Step>() -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let mut r = rng(1);
    for (cin, cout, k, pad, hw) in [(3, 4, 3, 1, 6), (2, 3, 9, 4, 9)] {
        let inputs = vec![uniform::<T>(&[2, cin, hw, hw], &mut r), uniform(&[cout, cin, k, k], &mut r), uniform(&[cout], &mut r)];
        let e = gradient_error(&inputs, T::STEP, |t, p| {
            let v = leaves(t, p);
            let y = t.conv2d(v[0], v[1], Some(v[2]), pad)?;
            Ok((project(t, y, 7)?, v))
        })?;
        out.push((format!("conv2d k{k}"), e));
    }
    let inputs = vec![separated::<T>(&[2, 2, 6, 6], &mut r)];
    out.push((
        "maxpool2".into(),
        gradient_error(&inputs, T::STEP, |t, p| {
            let v = leaves(t, p);
            let y = t.maxpool2(v[0])?;
            Ok((project(t, y, 8)?, v))
        })?,
    ));
    let inputs = vec![uniform::<T>(&[2, 3, 4, 4], &mut r)];
    out.push((
        "bilinear_upsample2".into(),
        gradient_error(&inputs, T::STEP, |t, p| {
            let v = leaves(t, p);
            let y = t.upsample2(v[0])?;
            Ok((project(t, y, 9)?, v))
        })?,
    ));
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        let inputs = vec![uniform::<T>(&[3, 4, 3, 3], &mut r), uniform(&[4], &mut r), uniform(&[4], &mut r)];
        let running = RunningStats {
            mean: vec![T::from_f64(0.1); 4],
            var: vec![T::from_f64(0.7); 4],
        };
        let e = gradient_error(&inputs, T::STEP, |t, p| {
            let v = leaves(t, p);
            let (y, _) = t.batchnorm(v[0], v[1], v[2], &running, mode, 1e-5, 0.1)?;
            Ok((project(t, y, 10)?, v))
        })?;
        out.push((format!("batchnorm {mode:?}"), e));
    }
    let bin: Vec<u8> = (0..50).map(|_| r.gen_range(0..2)).collect();
    let inputs = vec![uniform::<T>(&[2, 1, 5, 5], &mut r)];
    out.push((
        "dice_loss binary".into(),
        gradient_error(&inputs, T::STEP, |t, p| {
            let v = leaves(t, p);
            Ok((t.dice_loss(v[0], &DiceTarget::Binary(bin.clone()), 1.0)?, v))
        })?,
    ));
    let cls: Vec<u8> = (0..50).map(|_| r.gen_range(0..3)).collect();
    let inputs = vec![uniform::<T>(&[2, 3, 5, 5], &mut r)];
    out.push((
        "dice_loss classes".into(),
        gradient_error(&inputs, T::STEP, |t, p| {
            let v = leaves(t, p);
            Ok((t.dice_loss(v[0], &DiceTarget::Classes(cls.clone()), 1.0)?, v))
        })?,
    ));
    for pool in [PoolMode::Max, PoolMode::Mean] {
        let inputs = vec![separated::<T>(&[2, 2, 8, 3, 3], &mut r)];
        let e = gradient_error(&inputs, T::STEP, |t, p| {
            let v = leaves(t, p);
            let y = group_pool(t, v[0], pool)?;
            Ok((project(t, y, 15)?, v))
        })?;
        out.push((format!("group pool {pool:?}"), e));
    }
    // f32 steps cross ReLU kinks and group-max ties; both are checked on
    // separated inputs above, so the f32 path runs linear with mean pooling
    let f64_run = T::STEP < 1e-3;
    for kind in [GroupKind::C4, GroupKind::C8, GroupKind::D4] {
        let pool = if f64_run { PoolMode::Max } else { PoolMode::Mean };
        out.push((format!("{kind} group path"), group_path::<T>(kind, pool, f64_run)?));
    }
    Ok(out)
}

/// Lifting conv → batch norm → (ReLU) → group conv → symmetry pooling.
fn group_path<T: Step>(kind: GroupKind, pool: PoolMode, relu: bool) -> Result<f64> {
    let group = Arc::new(SymmetryGroup::new(kind));
    let mut r = rng(12);
    let mut store = ParamStore::<T>::new();
    let lift = LiftingConvLayer::new("lift", &mut store, group.clone(), 2, 2, 3, &mut r)?;
    let bn = GroupBatchNorm::new("bn", &mut store, 2);
    let gconv = GroupConvLayer::new("gconv", &mut store, group.clone(), 2, 1, 3, &mut r)?;
    // the lifting bias is cancelled by the batch norm and has zero gradient
    let ids = [lift.weight(), gconv.weight(), gconv.bias()];
    let mut inputs = vec![uniform::<T>(&[2, 2, 6, 6], &mut r)];
    inputs.extend(ids.iter().map(|&id| uniform::<T>(store.get(id).shape(), &mut r)));
    gradient_error(&inputs, T::STEP, |tape, p| {
        let mut s = store.clone();
        for (id, t) in ids.iter().zip(&p[1..]) {
            *s.get_mut(*id) = t.clone();
        }
        let params = s.bind(tape, true);
        let x = tape.leaf(p[0].clone(), true);
        let h = lift.forward(tape, &params, x)?;
        let mut updates = Vec::new();
        let h = bn.forward(tape, &params, &s, h, BatchNormMode::Train, &mut updates)?;
        let h = if relu { group_relu(tape, h)? } else { h };
        let h = gconv.forward(tape, &params, h)?;
        let y = group_pool(tape, h, pool)?;
        let mut vars = vec![x];
        vars.extend(ids.iter().map(|&id| params.var(id)));
        Ok((project(tape, y, 13)?, vars))
    })
}

fn gradients() -> Result<Outcome> {
    timed(60.0, || {
        let e64 = layer_errors::<f64>()?;
        let e32 = layer_errors::<f32>()?;
        let worst = |v: &[(String, f64)]| v.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
        let (w64, w32) = (worst(&e64), worst(&e32));
        let bad: Vec<String> = e64
            .iter()
            .filter(|e| e.1 >= GRAD_TOL_F64)
            .map(|e| format!("{} f64 {:.1e}", e.0, e.1))
            .chain(e32.iter().filter(|e| e.1 >= GRAD_TOL_F32).map(|e| format!("{} f32 {:.1e}", e.0, e.1)))
            .collect();
        let detail = format!(
            "{} layer cases; worst f64 {:.1e} ({}), worst f32 {:.1e} ({}){}",
            e64.len(),
            w64.1,
            w64.0,
            w32.1,
            w32.0,
            if bad.is_empty() { String::new() } else { format!("; over tolerance: {}", bad.join(", ")) }
        );
        Ok(outcome(bad.is_empty(), detail))
    })
}

// ---------------------------------------------------------------- criterion 5

fn random_mask(r: &mut ChaCha8Rng, classes: u8) -> Vec<u8> {
    let weights: Vec<f64> = (0..classes).map(|_| if r.gen_bool(0.2) { 0.0 } else { r.gen() }).collect();
    let total: f64 = weights.iter().sum();
    (0..METRIC_SIDE * METRIC_SIDE)
        .map(|_| {
            if total == 0.0 {
                return 0;
            }
            let mut u = r.gen::<f64>() * total;
            for (k, w) in weights.iter().enumerate() {
                if u < *w {
                    return k as u8;
                }
                u -= w;
            }
            classes - 1
        })
        .collect()
}

fn pixels(mask: &[u8], k: u8) -> BTreeSet<usize> {
    mask.iter().enumerate().filter(|(_, &v)| v == k).map(|(i, _)| i).collect()
}

fn metric_oracles() -> Result<Outcome> {
    let mut r = rng(5);
    let mut count_errors = 0;
    let mut worst: f64 = 0.0;
    let n = (METRIC_SIDE * METRIC_SIDE) as f64;
    for _ in 0..METRIC_PAIRS {
        let (pred, gt) = (random_mask(&mut r, 2), random_mask(&mut r, 2));
        let c = ConfusionCounts::from_masks(&pred, &gt, 2)?;
        let (p, g) = (pixels(&pred, 1), pixels(&gt, 1));
        let inter = p.intersection(&g).count();
        let union = p.union(&g).count();
        let tn = n as usize - union;
        count_errors += ((c.tp(1), c.fp(1), c.fn_(1), c.tn(1)) != (inter as u64, (p.len() - inter) as u64, (g.len() - inter) as u64, tn as u64)) as usize;
        let m = binary_metrics(&c);
        let (i, u, np, ng) = (inter as f64, union as f64, p.len() as f64, g.len() as f64);
        let expect = [
            (m.dice, if u == 0.0 { 1.0 } else { 2.0 * i / (np + ng) }),
            (m.iou, if u == 0.0 { 1.0 } else { i / u }),
            (m.precision, if np == 0.0 { 0.0 } else { i / np }),
            (m.recall, if ng == 0.0 { 0.0 } else { i / ng }),
            (m.accuracy, (inter + tn) as f64 / n),
        ];
        worst = expect.iter().fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    for _ in 0..METRIC_PAIRS {
        let (pred, gt) = (random_mask(&mut r, 3), random_mask(&mut r, 3));
        let c = ConfusionCounts::from_masks(&pred, &gt, 3)?;
        let m = semantic_metrics(&c);
        let (mut ious, mut recalls, mut fw) = (Vec::new(), Vec::new(), 0.0);
        for k in 0..3u8 {
            let (p, g) = (pixels(&pred, k), pixels(&gt, k));
            let inter = p.intersection(&g).count();
            let union = p.union(&g).count();
            count_errors += ((c.tp(k as usize), c.fp(k as usize), c.fn_(k as usize)) != (inter as u64, (p.len() - inter) as u64, (g.len() - inter) as u64)) as usize;
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
            if !g.is_empty() {
                recalls.push(inter as f64 / g.len() as f64);
                fw += g.len() as f64 / n * (inter as f64 / union as f64);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let correct = pred.iter().zip(&gt).filter(|(a, b)| a == b).count() as f64;
        let expect = [(m.mean_iou, mean(&ious)), (m.mean_acc, mean(&recalls)), (m.pixel_acc, correct / n), (m.fw_iou, fw)];
        worst = expect.iter().fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    let mut agg_worst: f64 = 0.0;
    for _ in 0..50 {
        let folds: Vec<MetricRecord> = (0..N_FOLDS)
            .map(|_| {
                let (p, g) = (random_mask(&mut r, 2), random_mask(&mut r, 2));
                ConfusionCounts::from_masks(&p, &g, 2).map(|c| MetricRecord::from_counts(&c))
            })
            .collect::<Result<_>>()?;
        for (name, agg) in aggregate_folds(&folds)? {
            let v: Vec<f64> = folds.iter().map(|f| f.get(&name).unwrap_or(f64::NAN)).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            agg_worst = agg_worst.max((agg.mean - mean).abs()).max((agg.std - std).abs());
        }
    }
    let pass = count_errors == 0 && worst <= RATIO_TOL && agg_worst <= RATIO_TOL;
    Ok(outcome(
        pass,
        format!(
            "{METRIC_PAIRS} binary + {METRIC_PAIRS} 3-class pairs; {count_errors} count mismatches, max ratio error {worst:.1e}, fold aggregation error {agg_worst:.1e}"
        ),
    ))
}

// ------------------------------------------------------ criteria 6, 7 and 9

const SYNTHETIC: &str = include_str!("../../../configs/synthetic.toml");

fn synthetic(family: &str, seed: u64) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(SYNTHETIC, &[format!("model.family=\"{family}\""), format!("train.seed={seed}")], Path::new("."))
}

struct Training {
    root: tempfile::TempDir,
    /// `(family, seed, log)` for the full synthetic runs.
    runs: Vec<(String, u64, RunLog)>,
}

impl Training {
    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.path().join(format!("seed{seed}"))
    }
}

/// Fold 0 of the synthetic task, vanilla and c4, three seeds.
fn train_synthetic() -> Result<Training> {
    let root = tempfile::tempdir()?;
    let mut runs = Vec::new();
    for family in ["vanilla", "c4"] {
        for seed in SEEDS {
            let start = Instant::now();
            let exp = Experiment::prepare(synthetic(family, seed)?)?;
            let out = root.path().join(format!("seed{seed}"));
            exp.cross_validate::<f32>(&[0], Some(&out), &mut |_, _| {})?;
            let log = RunLog::read(&exp.cell_dir(&out).join("fold0").join("log.csv"))?;
            eprintln!(
                "  trained {family} seed {seed}: dice {:.3} in {:.0}s",
                log.records.last().and_then(|r| r.metrics.get("dice")).unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
            runs.push((family.to_string(), seed, log));
        }
    }
    Ok(Training { root, runs })
}

fn rotate_quarter(samples: &[&rotunet::data::SamplePair]) -> Result<Vec<rotunet::data::SamplePair>> {
    let turn = AugmentDraw {
        quarter_turns: 1,
        hflip: false,
        vflip: false,
    };
    samples.iter().map(|s| turn.apply(s)).collect()
}

/// Largest per-image IoU change when the whole test split is turned by 90°.
fn iou_shift<T: Scalar>(model: &UNet<T>, exp: &Experiment) -> Result<f64> {
    let cfg = &exp.config.train;
    let train = exp.plan.train(0, cfg.data_setting)?;
    let norm = Normalization::fit(train.iter().map(|&i| &exp.data[i]))?;
    let test: Vec<_> = exp.plan.test(0).iter().map(|&i| &exp.data[i]).collect();
    let turned = rotate_quarter(&test)?;
    let turned: Vec<_> = turned.iter().collect();
    let a = evaluate(model, &test, &norm, Averaging::PerImage, cfg.batch_size)?;
    let b = evaluate(model, &turned, &norm, Averaging::PerImage, cfg.batch_size)?;
    Ok(a.per_image
        .iter()
        .zip(&b.per_image)
        .map(|(x, y)| (x.headline_iou() - y.headline_iou()).abs())
        .fold(0.0, f64::max))
}

fn rotation_invariant_evaluation(t: &Training) -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;
    for family in ["c4", "vanilla"] {
        let exp = Experiment::prepare(synthetic(family, SEEDS[0])?)?;
        let ckpt = exp.cell_dir(&t.seed_dir(SEEDS[0])).join("fold0").join("final.ckpt");
        let model = load_checkpoint(&ckpt)?;
        let s64 = iou_shift(&model.cast::<f64>(), &exp)?;
        let s32 = iou_shift(&model, &exp)?;
        if family == "c4" {
            pass = s64 < IOU_SHIFT_TOL;
            parts.push(format!("c4 max per-image IoU shift {s64:.1e} (f64 eval), {s32:.1e} (f32 eval)"));
        } else {
            parts.push(format!("vanilla {s64:.3} (reported)"));
        }
    }
    Ok(outcome(pass, parts.join("; ")))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn learnability(t: &Training) -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for family in ["vanilla", "c4"] {
        let logs: Vec<&RunLog> = t.runs.iter().filter(|r| r.0 == family).map(|r| &r.2).collect();
        let dice = median(logs.iter().map(|l| l.records.last().and_then(|r| r.metrics.get("dice")).unwrap_or(f64::NAN)).collect());
        let losses: Vec<f64> = (0..LOSS_EPOCHS).map(|e| median(logs.iter().map(|l| l.records[e].loss).collect())).collect();
        let decreasing = losses.windows(2).all(|w| w[1] < w[0]);
        let ok = dice > DICE_TARGET && decreasing;
        pass &= ok;
        let l: Vec<String> = losses.iter().map(|x| format!("{x:.3}")).collect();
        parts.push(format!("{family} median dice {dice:.3}, median loss epochs 1-{LOSS_EPOCHS} [{}]", l.join(" ")));
    }
    Ok(outcome(pass, parts.join("; ")))
}

/// Mean cumulative seconds and IoU per epoch straight from the fold logs.
fn reduce_logs(cell: &Path) -> Result<Vec<(f64, f64)>> {
    let mut per_fold = Vec::new();
    for fold in 0..N_FOLDS {
        let p = cell.join(format!("fold{fold}")).join("log.csv");
        if !p.is_file() {
            continue;
        }
        let mut rd = csv::Reader::from_path(&p).map_err(|e| rotunet::Error::Format(e.to_string()))?;
        let h = rd.headers().map_err(|e| rotunet::Error::Format(e.to_string()))?.clone();
        let (ts, iou) = (h.iter().position(|x| x == "cumulative_seconds"), h.iter().position(|x| x == "iou"));
        let (ts, iou) = (ts.expect("time column"), iou.expect("iou column"));
        let rows: Vec<(f64, f64)> = rd
            .records()
            .map(|r| {
                let r = r.map_err(|e| rotunet::Error::Format(e.to_string()))?;
                Ok((r[ts].parse().unwrap_or(f64::NAN), r[iou].parse().unwrap_or(f64::NAN)))
            })
            .collect::<Result<_>>()?;
        per_fold.push(rows);
    }
    let n = per_fold.len() as f64;
    let epochs = per_fold.iter().map(Vec::len).min().unwrap_or(0);
    Ok((0..epochs)
        .map(|e| (per_fold.iter().map(|f| f[e].0).sum::<f64>() / n, per_fold.iter().map(|f| f[e].1).sum::<f64>() / n))
        .collect())
}

fn report_matches(run_dir: &Path) -> Result<(usize, bool)> {
    let out = run_dir.join("report");
    let code = rotunet_cli::run(["rotunet", "report", "--run-dir", run_dir.to_str().expect("utf-8 path"), "--out", out.to_str().expect("utf-8 path")]);
    if code != 0 {
        return Ok((0, false));
    }
    let mut curves = 0;
    let mut ok = true;
    for entry in fs::read_dir(run_dir)? {
        let cell = entry?.path();
        if !cell.join("cell.toml").is_file() {
            continue;
        }
        let name = cell.file_name().and_then(|n| n.to_str()).expect("utf-8 name").to_string();
        let expect = reduce_logs(&cell)?;
        let text = fs::read_to_string(out.join(format!("curve_{name}.csv")))?;
        let got: Vec<(f64, f64)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect();
                (f[1], f[2])
            })
            .collect();
        ok &= got.len() == expect.len()
            && got.iter().zip(&expect).all(|(a, b)| (a.0 - b.0).abs() <= 1e-12 * b.0.abs().max(1.0) && (a.1 - b.1).abs() <= 1e-12);
        curves += 1;
    }
    Ok((curves, ok))
}

fn sustainability_logging(t: &Training) -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    // a short run for the families the full task does not train
    let short_dir = t.root.path().join("short");
    for family in ["c8", "d4", "vanilla", "c4"] {
        let mut cfg = synthetic(family, 0)?;
        cfg.train.n_epochs = 3;
        cfg.model.input_hw = 32;
        if let rotunet::train::DataSource::Synthetic(s) = &mut cfg.data {
            s.n_images = 20;
            s.image_size = 32;
            s.cell = 4;
        }
        let exp = Experiment::prepare(cfg)?;
        exp.cross_validate::<f32>(&[0, 1], Some(&short_dir), &mut |_, _| {})?;
        for fold in [0, 1] {
            let log = RunLog::read(&exp.cell_dir(&short_dir).join(format!("fold{fold}")).join("log.csv"))?;
            let ok = log.records.len() == 3 && log.is_time_increasing();
            pass &= ok;
            if !ok {
                parts.push(format!("{family} short fold {fold}: {} epochs", log.records.len()));
            }
        }
    }
    for (family, seed, log) in &t.runs {
        let expect = synthetic(family, *seed)?.train.n_epochs;
        let ok = log.records.len() == expect && log.is_time_increasing();
        pass &= ok;
        if !ok {
            parts.push(format!("{family} seed {seed}: {} of {expect} epochs", log.records.len()));
        }
    }
    let mut curves = 0;
    for dir in SEEDS.iter().map(|&s| t.seed_dir(s)).chain([short_dir]) {
        let (n, ok) = report_matches(&dir)?;
        pass &= ok && n > 0;
        curves += n;
    }
    parts.insert(
        0,
        format!(
            "{} logs strictly increasing with configured epoch counts across 4 families; {curves} report curves vs direct CSV reduction",
            t.runs.len() + 8
        ),
    );
    Ok(outcome(pass, parts.join("; ")))
}

// ---------------------------------------------------------------- criterion 8

fn protocol() -> Result<Outcome> {
    let mut problems = Vec::new();
    for n in [50, 103, 517] {
        for seed in 0..3 {
            let plan = make_folds(n, seed)?;
            let mut seen = BTreeSet::new();
            let disjoint = plan.folds().iter().flatten().all(|&i| seen.insert(i));
            if !disjoint || seen != (0..n).collect() || plan != make_folds(n, seed)? {
                problems.push(format!("fold plan n={n} seed={seed}"));
            }
            for test in 0..N_FOLDS {
                let small = plan.train(test, DataSetting::Small)?;
                let expect: usize = (0..N_FOLDS).filter(|&f| f != test).map(|f| plan.folds()[f].len() / 10).sum();
                let test_set: BTreeSet<usize> = plan.test(test).iter().copied().collect();
                if small.len() != expect || small.iter().any(|i| test_set.contains(i)) {
                    problems.push(format!("small setting n={n} test={test}"));
                }
            }
        }
    }
    let mut r = rng(11);
    let (mut turns, mut h, mut v) = ([0usize; 4], 0usize, 0usize);
    for _ in 0..AUG_DRAWS {
        let d = AugmentDraw::sample(&mut r);
        turns[d.quarter_turns as usize] += 1;
        h += d.hflip as usize;
        v += d.vflip as usize;
    }
    let freq = |c: usize| c as f64 / AUG_DRAWS as f64;
    let mut worst: f64 = 0.0;
    for c in turns {
        worst = worst.max((freq(c) - 0.25).abs());
    }
    worst = worst.max((freq(h) - 0.5).abs()).max((freq(v) - 0.5).abs());
    if worst > FREQ_TOL {
        problems.push(format!("augmentation frequency off by {worst:.3}"));
    }
    let dir = tempfile::tempdir()?;
    for kind in [GroupKind::Trivial, GroupKind::C4, GroupKind::C8, GroupKind::D4] {
        let m = UNet::<f32>::new(ArchConfig::preset(kind, ModelSize::Small).input_hw(32), 5)?;
        let p = dir.path().join(format!("{kind}.ckpt"));
        save_checkpoint(&m, &p)?;
        let back = load_checkpoint(&p)?;
        let same = back.config() == m.config()
            && m.store().entries().iter().zip(back.store().entries()).all(|(a, b)| {
                a.name == b.name && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        if !same {
            problems.push(format!("{kind} checkpoint round trip"));
        }
    }
    let detail = format!(
        "folds, small setting, {AUG_DRAWS} augmentation draws (max deviation {worst:.3}), 4 checkpoint round trips{}",
        if problems.is_empty() { String::new() } else { format!("; failures: {}", problems.join(", ")) }
    );
    Ok(outcome(problems.is_empty(), detail))
}

// ------------------------------------------------------------------- driver

fn report_line(n: usize, result: Result<Outcome>) -> bool {
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {n}: {}  {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    // `cargo test -- --list` and filters from the harnessed targets
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut passed = vec![
        report_line(1, group_axioms()),
        report_line(2, certificates()),
        report_line(3, table_fidelity()),
        report_line(4, gradients()),
        report_line(5, metric_oracles()),
    ];
    let training = train_synthetic();
    match &training {
        Ok(t) => {
            passed.push(report_line(6, rotation_invariant_evaluation(t)));
            passed.push(report_line(7, learnability(t)));
        }
        Err(e) => {
            for n in [6, 7] {
                passed.push(report_line(n, Err(rotunet::Error::InvalidArgument(format!("training failed: {e}")))));
            }
        }
    }
    passed.push(report_line(8, protocol()));
    match &training {
        Ok(t) => passed.push(report_line(9, sustainability_logging(t))),
        Err(e) => passed.push(report_line(9, Err(rotunet::Error::InvalidArgument(format!("training failed: {e}"))))),
    }
    let n_pass = passed.iter().filter(|p| **p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass != passed.len() {
        std::process::exit(1);
    }
}
