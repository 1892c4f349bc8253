//! Tape gradients against central finite differences, at both precisions.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotunet::groups::{GroupKind, SymmetryGroup};
use rotunet::layers::{group_pool, group_relu, GroupBatchNorm, GroupConvLayer, LiftingConvLayer, PoolMode};
use rotunet::params::ParamStore;
use rotunet::tensor::{gradient_error, BatchNormMode, DiceTarget, RunningStats, Scalar, Tape, Tensor, Var};
use rotunet::Result;

trait Precision: Scalar {
    const STEP: f64;
    const TOL: f64;
}

impl Precision for f32 {
    const STEP: f64 = 1e-2;
    const TOL: f64 = 1e-3;
}

impl Precision for f64 {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-6;
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Reduce to a scalar with fixed random weights so every output element
/// contributes with a distinct coefficient.
fn project<T: Scalar>(tape: &mut Tape<T>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed));
    tape.dot(y, w)
}

fn leaves<T: Scalar>(tape: &mut Tape<T>, inputs: &[Tensor<T>]) -> Vec<Var> {
    inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect()
}

fn assert_close<T: Precision>(what: &str, err: f64) {
    assert!(err < T::TOL, "{what}: relative gradient error {err:.3e} >= {:.0e}", T::TOL);
}

/// Distinct values spaced well beyond the finite-difference step, in random
/// order, so max-pool winners never change under perturbation.
fn separated<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<T> = (0..n).map(|i| T::from_f64(0.05 * i as f64 - 0.025 * n as f64)).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape.to_vec(), v).unwrap()
}

fn conv2d_case<T: Precision>() {
    let mut r = rng(1);
    for (cin, cout, k, pad, hw) in [(3, 4, 3, 1, 6), (2, 3, 5, 2, 7), (2, 2, 3, 0, 5), (1, 2, 9, 4, 9)] {
        let inputs = vec![uniform::<T>(&[2, cin, hw, hw], &mut r), uniform(&[cout, cin, k, k], &mut r), uniform(&[cout], &mut r)];
        let err = gradient_error(&inputs, T::STEP, |tape, p| {
            let v = leaves(tape, p);
            let y = tape.conv2d(v[0], v[1], Some(v[2]), pad)?;
            Ok((project(tape, y, 7)?, v))
        })
        .unwrap();
        assert_close::<T>(&format!("conv2d k{k} pad{pad}"), err);
    }
}

fn maxpool_case<T: Precision>() {
    let inputs = vec![separated::<T>(&[2, 2, 6, 6], &mut rng(2))];
    let err = gradient_error(&inputs, T::STEP, |tape, p| {
        let v = leaves(tape, p);
        let y = tape.maxpool2(v[0])?;
        Ok((project(tape, y, 8)?, v))
    })
    .unwrap();
    assert_close::<T>("maxpool2", err);
}

fn upsample_case<T: Precision>() {
    let inputs = vec![uniform::<T>(&[2, 3, 4, 4], &mut rng(3))];
    let err = gradient_error(&inputs, T::STEP, |tape, p| {
        let v = leaves(tape, p);
        let y = tape.upsample2(v[0])?;
        Ok((project(tape, y, 9)?, v))
    })
    .unwrap();
    assert_close::<T>("bilinear_upsample2", err);
}

fn batchnorm_case<T: Precision>() {
    let mut r = rng(4);
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        let inputs = vec![uniform::<T>(&[3, 4, 3, 3], &mut r), uniform(&[4], &mut r), uniform(&[4], &mut r)];
        let running = RunningStats {
            mean: vec![T::from_f64(0.1); 4],
            var: vec![T::from_f64(0.7); 4],
        };
        let err = gradient_error(&inputs, T::STEP, |tape, p| {
            let v = leaves(tape, p);
            let (y, _) = tape.batchnorm(v[0], v[1], v[2], &running, mode, 1e-5, 0.1)?;
            Ok((project(tape, y, 10)?, v))
        })
        .unwrap();
        assert_close::<T>(&format!("batchnorm {mode:?}"), err);
    }
}

fn elementwise_case<T: Precision>() {
    let mut r = rng(5);
    // keep ReLU inputs away from the kink
    let mut x = uniform::<T>(&[2, 3, 4, 4], &mut r);
    for v in x.data_mut() {
        if v.as_f64().abs() < 0.1 {
            *v = T::from_f64(0.3);
        }
    }
    let inputs = vec![x, uniform(&[2, 3, 4, 4], &mut r), uniform(&[2, 2, 4, 4], &mut r)];
    let err = gradient_error(&inputs, T::STEP, |tape, p| {
        let v = leaves(tape, p);
        let a = tape.relu(v[0])?;
        let b = tape.sigmoid(v[1])?;
        let s = tape.add(a, b)?;
        let c = tape.concat_channels(s, v[2])?;
        let y = tape.softmax_channels(c)?;
        Ok((project(tape, y, 11)?, v))
    })
    .unwrap();
    assert_close::<T>("relu/sigmoid/add/concat/softmax", err);
}

fn dice_case<T: Precision>() {
    let mut r = rng(6);
    let bin: Vec<u8> = (0..2 * 5 * 5).map(|_| r.gen_range(0..2)).collect();
    let inputs = vec![uniform::<T>(&[2, 1, 5, 5], &mut r)];
    let err = gradient_error(&inputs, T::STEP, |tape, p| {
        let v = leaves(tape, p);
        Ok((tape.dice_loss(v[0], &DiceTarget::Binary(bin.clone()), 1.0)?, v))
    })
    .unwrap();
    assert_close::<T>("dice binary", err);

    // class 3 of 4 never occurs: absent classes must not contribute
    let cls: Vec<u8> = (0..2 * 5 * 5).map(|_| r.gen_range(0..3)).collect();
    let inputs = vec![uniform::<T>(&[2, 4, 5, 5], &mut r)];
    let err = gradient_error(&inputs, T::STEP, |tape, p| {
        let v = leaves(tape, p);
        Ok((tape.dice_loss(v[0], &DiceTarget::Classes(cls.clone()), 1.0)?, v))
    })
    .unwrap();
    assert_close::<T>("dice classes", err);
}

/// Lifting conv → batch norm → ReLU → group conv → symmetry pooling, with
/// gradients taken through the orbit expansion onto the base filters. The
/// coarse f32 step would cross ReLU kinks, so f32 runs skip the ReLU (checked
/// on its own above).
fn group_path_case<T: Precision>(kind: GroupKind, k: usize, pool: PoolMode, relu: bool) {
    let group = Arc::new(SymmetryGroup::new(kind));
    let mut r = rng(12);
    let mut store = ParamStore::<T>::new();
    let lift = LiftingConvLayer::new("lift", &mut store, group.clone(), 2, 2, k, &mut r).unwrap();
    let bn = GroupBatchNorm::new("bn", &mut store, 2);
    let gconv = GroupConvLayer::new("gconv", &mut store, group.clone(), 2, 1, k, &mut r).unwrap();
    // the lifting bias is cancelled exactly by the batch norm that follows
    let ids = [lift.weight(), gconv.weight(), gconv.bias()];
    // unit-scale weights rather than the default init keep differences well scaled
    let mut inputs = vec![uniform::<T>(&[2, 2, 6, 6], &mut r)];
    inputs.extend(ids.iter().map(|&id| uniform::<T>(store.get(id).shape(), &mut r)));
    let err = gradient_error(&inputs, T::STEP, |tape, p| {
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
    .unwrap();
    assert_close::<T>(&format!("{kind} k{k} {pool:?} relu={relu} path"), err);
}

fn group_pool_case<T: Precision>(pool: PoolMode) {
    let inputs = vec![separated::<T>(&[2, 2, 8, 3, 3], &mut rng(14))];
    let err = gradient_error(&inputs, T::STEP, |tape, p| {
        let v = leaves(tape, p);
        let y = group_pool(tape, v[0], pool)?;
        Ok((project(tape, y, 15)?, v))
    })
    .unwrap();
    assert_close::<T>(&format!("group pool {pool:?}"), err);
}

#[test]
fn group_pooling_both_precisions() {
    for pool in [PoolMode::Max, PoolMode::Mean] {
        group_pool_case::<f64>(pool);
        group_pool_case::<f32>(pool);
    }
}

#[test]
fn conv2d_f64() {
    conv2d_case::<f64>();
}

#[test]
fn conv2d_f32() {
    conv2d_case::<f32>();
}

#[test]
fn maxpool2_both_precisions() {
    maxpool_case::<f64>();
    maxpool_case::<f32>();
}

#[test]
fn upsample2_both_precisions() {
    upsample_case::<f64>();
    upsample_case::<f32>();
}

#[test]
fn batchnorm_both_precisions() {
    batchnorm_case::<f64>();
    batchnorm_case::<f32>();
}

#[test]
fn elementwise_both_precisions() {
    elementwise_case::<f64>();
    elementwise_case::<f32>();
}

#[test]
fn dice_loss_both_precisions() {
    dice_case::<f64>();
    dice_case::<f32>();
}

#[test]
fn group_paths_f64() {
    for (kind, pool) in [(GroupKind::C4, PoolMode::Max), (GroupKind::D4, PoolMode::Mean), (GroupKind::C8, PoolMode::Max)] {
        group_path_case::<f64>(kind, 3, pool, true);
    }
    group_path_case::<f64>(GroupKind::C8, 5, PoolMode::Mean, true);
}

#[test]
fn group_paths_f32() {
    // group-max ties sit within the f32 step too; the max reduction is
    // covered by `group_pooling_both_precisions`
    for kind in [GroupKind::C4, GroupKind::D4, GroupKind::C8] {
        group_path_case::<f32>(kind, 3, PoolMode::Mean, false);
    }
}
