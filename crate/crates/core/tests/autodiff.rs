mod common;

use common::{gradcheck_composed, gradcheck_op, op_cases, GRAD_TOL};
use proptest::prelude::*;
use rehab_core::autodiff::{Optimizer, OptimizerConfig, ParamSet, Tape, Tensor};
use rehab_core::nn::{Bound, Direction, Linear, Lstm};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_passes_gradient_check(seed in any::<u64>()) {
        for (name, shapes, op) in op_cases() {
            let err = gradcheck_op(seed, &shapes, op).unwrap();
            prop_assert!(err < GRAD_TOL, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn downsample_composes(b in 1usize..3, l in 1usize..20, c in 1usize..4, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let x = common::tensor(&mut r, &[b, l, c]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let d2 = tape.downsample(v, 2).unwrap();
        let d22 = tape.downsample(d2, 2).unwrap();
        let d4 = tape.downsample(v, 4).unwrap();
        prop_assert_eq!(tape.shape(d22), tape.shape(d4));
        prop_assert_eq!(tape.value(d22), tape.value(d4));
    }

    #[test]
    fn concat_backward_splits_upstream_gradient(seed in any::<u64>(), c1 in 1usize..4, c2 in 1usize..4) {
        let mut r = common::rng(seed);
        let a = common::tensor(&mut r, &[2, 3, c1]).with_grad();
        let b = common::tensor(&mut r, &[2, 3, c2]).with_grad();
        let up = common::tensor(&mut r, &[2, 3, c1 + c2]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let cat = tape.concat(&[va, vb], 2).unwrap();
        let w = tape.constant(&[2, 3, c1 + c2], up.data().to_vec()).unwrap();
        let p = tape.mul(cat, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        let (ga, gb) = (grads.get(va).unwrap(), grads.get(vb).unwrap());
        let mut rebuilt = Vec::new();
        for row in 0..6 {
            rebuilt.extend_from_slice(&ga[row * c1..(row + 1) * c1]);
            rebuilt.extend_from_slice(&gb[row * c2..(row + 1) * c2]);
        }
        prop_assert_eq!(rebuilt, up.data().to_vec());
    }
}

#[test]
fn composed_graph_passes_gradient_check_over_20_seeds() {
    for seed in 0..20 {
        let err = gradcheck_composed(seed).unwrap();
        assert!(err < GRAD_TOL, "seed {seed}: relative error {err:e}");
    }
}

fn train_trajectory(seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut r = common::rng(seed);
    let mut params = ParamSet::new();
    let lstm = Lstm::new(&mut params, "l", 2, 3, &mut r);
    let fc = Linear::new(&mut params, "fc", 3, 1, &mut r);
    let x = common::tensor(&mut r, &[2, 5, 2]);
    let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2)).unwrap();
    let mut losses = Vec::new();
    for _ in 0..10 {
        let mut tape = Tape::new();
        let bound = Bound::new(&params, &mut tape);
        let xv = tape.leaf(&x);
        let h = lstm
            .forward(&mut tape, &bound, xv, Direction::Forward)
            .unwrap();
        let last = tape.select(h, 1, 4).unwrap();
        let y = fc.forward(&mut tape, &bound, last).unwrap();
        let t = tape.constant(&[2, 1], vec![0.5, -0.5]).unwrap();
        let loss = tape.mse(y, t).unwrap();
        losses.push(tape.scalar(loss));
        let grads = tape.backward(loss).unwrap();
        bound.store_grads(&mut params, &grads);
        opt.step(params.tensors_mut()).unwrap();
    }
    let values = params.tensors().iter().map(|t| t.data().to_vec()).collect();
    (losses, values)
}

#[test]
fn same_seed_gives_bit_identical_training() {
    let (l1, p1) = train_trajectory(7);
    let (l2, p2) = train_trajectory(7);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&l1), bits(&l2));
    for (a, b) in p1.iter().zip(&p2) {
        assert_eq!(bits(a), bits(b));
    }
    let (l3, _) = train_trajectory(8);
    assert_ne!(bits(&l1), bits(&l3));
    assert!(l1.last() < l1.first());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut t = Tensor::new(vec![3], vec![1.0, -2.0, 0.5])
        .unwrap()
        .with_grad();
    t.grad = Some(vec![0.3, -4.0, 1e-3]);
    let before = t.data().to_vec();
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.01)).unwrap();
    let mut ts = vec![t];
    opt.step(&mut ts).unwrap();
    for (a, b) in ts[0].data().iter().zip(&before) {
        assert!(((a - b).abs() - 0.01).abs() < 1e-6);
    }
}
