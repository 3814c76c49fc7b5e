//! Oracle-equivalence tests: every operation against an independent
//! brute-force implementation.

mod common;

use common::*;
use crowdfusion::iadm::{
    aggregate, distribute, extract_context, iadm_forward, ContextBundle, ContextExtractor,
    GatingMode, IadmBlock,
};
use crowdfusion::tensor::ops;
use crowdfusion::tensor::{ConvParams, Shape, Tensor};
use rand::Rng;

const TOL: f64 = 1e-12;

#[test]
fn conv2d_matches_nested_loop_oracle_across_geometries() {
    let mut r = rng(101);
    for trial in 0..20 {
        let (n, ic, oc) = (1 + trial % 2, 1 + trial % 3, 1 + (trial + 1) % 3);
        let (h, w) = (r.gen_range(3..9), r.gen_range(3..9));
        let k = [1, 3, 5][trial % 3];
        let stride = 1 + trial % 2;
        let pad = trial % 3;
        let dil = 1 + trial % 2;
        if h + 2 * pad <= dil * (k - 1) || w + 2 * pad <= dil * (k - 1) {
            continue;
        }
        let x = rand_tensor(Shape::new(n, ic, h, w), &mut r);
        let weights = rand_tensor(Shape::new(oc, ic, k, k), &mut r);
        let bias = (trial % 2 == 0).then(|| rand_tensor(Shape::new(1, oc, 1, 1), &mut r));
        let p = ConvParams::new(weights, bias, stride, pad, dil).unwrap();
        let got = ops::conv2d(&x, &p).unwrap();
        let want = conv2d_oracle(&x, &p);
        assert_eq!(got.shape(), want.shape());
        assert!(
            max_abs_diff(&got, &want) < TOL,
            "trial {trial}: conv2d deviates from the oracle"
        );
    }
}

#[test]
fn conv2d_dilated_example_matches_oracle() {
    let mut r = rng(102);
    let x = rand_tensor(Shape::new(1, 2, 5, 5), &mut r);
    let weights = rand_tensor(Shape::new(3, 2, 3, 3), &mut r);
    let p = ConvParams::new(weights, None, 1, 2, 2).unwrap();
    let got = ops::conv2d(&x, &p).unwrap();
    let want = conv2d_oracle(&x, &p);
    assert_eq!(got.shape(), Shape::new(1, 3, 5, 5));
    assert!(max_abs_diff(&got, &want) < TOL);
}

#[test]
fn conv2d_is_linear_in_its_input() {
    let mut r = rng(103);
    let x = rand_tensor(Shape::new(1, 2, 6, 6), &mut r);
    let y = rand_tensor(Shape::new(1, 2, 6, 6), &mut r);
    let p = ConvParams::new(rand_tensor(Shape::new(2, 2, 3, 3), &mut r), None, 1, 1, 1).unwrap();
    let (alpha, beta) = (0.75, -1.25);
    let mixed = Tensor::from_vec(
        x.shape(),
        x.data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| alpha * a + beta * b)
            .collect(),
    )
    .unwrap();
    let lhs = ops::conv2d(&mixed, &p).unwrap();
    let cx = ops::conv2d(&x, &p).unwrap();
    let cy = ops::conv2d(&y, &p).unwrap();
    let rhs = Tensor::from_vec(
        lhs.shape(),
        cx.data()
            .iter()
            .zip(cy.data())
            .map(|(a, b)| alpha * a + beta * b)
            .collect(),
    )
    .unwrap();
    assert!(max_abs_diff(&lhs, &rhs) < TOL);
}

#[test]
fn maxpool_matches_brute_force_on_8x8() {
    let mut r = rng(104);
    let x = rand_tensor(Shape::new(1, 1, 8, 8), &mut r);
    let got = ops::maxpool2d(&x, 4).unwrap();
    let want = maxpool_oracle(&x, 4);
    assert_eq!(got.data(), want.data());
}

#[test]
fn maxpool_matches_oracle_on_ragged_sizes() {
    let mut r = rng(105);
    for (h, w, win) in [(5, 7, 2), (6, 6, 4), (3, 9, 3), (2, 2, 4)] {
        let x = rand_tensor(Shape::new(2, 3, h, w), &mut r);
        let got = ops::maxpool2d(&x, win).unwrap();
        let want = maxpool_oracle(&x, win);
        assert_eq!(got.data(), want.data(), "pool {h}x{w} window {win}");
    }
}

#[test]
fn upsample_matches_oracle() {
    let mut r = rng(106);
    for (h, w, th, tw) in [(2, 2, 4, 4), (3, 5, 6, 10), (1, 1, 8, 8), (4, 4, 4, 4)] {
        let x = rand_tensor(Shape::new(1, 2, h, w), &mut r);
        let got = ops::upsample_nearest(&x, th, tw).unwrap();
        let want = upsample_oracle(&x, th, tw);
        assert_eq!(got.data(), want.data());
    }
}

#[test]
fn extract_context_matches_composed_oracle() {
    let mut r = rng(107);
    for levels in 1..=3 {
        let channels = 2;
        let e = ContextExtractor::gaussian(levels, channels, 0.3, &mut r);
        let f = rand_tensor(Shape::new(1, channels, 8, 8), &mut r);
        let got = extract_context(&f, &e).unwrap();
        let want = extract_context_oracle(&f, &e);
        assert!(
            max_abs_diff(&got, &want) < TOL,
            "extract_context deviates at L={levels}"
        );
    }
}

#[test]
fn extract_context_handles_ragged_feature_sizes() {
    // 5x7 features force replicate padding and fractional upsampling inside
    // the pyramid.
    let mut r = rng(108);
    let e = ContextExtractor::gaussian(3, 3, 0.3, &mut r);
    let f = rand_tensor(Shape::new(2, 3, 5, 7), &mut r);
    let got = extract_context(&f, &e).unwrap();
    let want = extract_context_oracle(&f, &e);
    assert_eq!(got.shape(), f.shape());
    assert!(max_abs_diff(&got, &want) < TOL);
}

#[test]
fn aggregate_matches_composition_oracle() {
    let mut r = rng(109);
    for gating in [true, false] {
        let blk = IadmBlock::gaussian(2, 3, 3, GatingMode::Literal, gating, true, 0.3, &mut r);
        let shape = Shape::new(1, 3, 6, 8);
        let fr = rand_tensor(shape, &mut r);
        let ft = rand_tensor(shape, &mut r);
        let fs = rand_tensor(shape, &mut r);
        let (got, ctx) = aggregate(&[&fr, &ft], &fs, &blk).unwrap();
        let (want, ctx_want) = aggregate_oracle(&[&fr, &ft], &fs, &blk);
        assert!(max_abs_diff(&got, &want) < TOL, "gating={gating}");
        for (a, b) in ctx.specific.iter().zip(&ctx_want) {
            assert!(max_abs_diff(a, b) < TOL);
        }
    }
}

#[test]
fn distribute_matches_composition_oracle() {
    let mut r = rng(110);
    let blk = IadmBlock::gaussian(2, 2, 2, GatingMode::Literal, true, true, 0.3, &mut r);
    let shape = Shape::new(1, 2, 6, 6);
    let fr = rand_tensor(shape, &mut r);
    let ft = rand_tensor(shape, &mut r);
    let fs = rand_tensor(shape, &mut r);
    let (enhanced, ctx) = aggregate(&[&fr, &ft], &fs, &blk).unwrap();
    let got = distribute(&[&fr, &ft], &enhanced, &ctx, &blk).unwrap();
    let want = distribute_oracle(&[&fr, &ft], &enhanced, &ctx.specific, &blk);
    for (a, b) in got.iter().zip(&want) {
        assert!(max_abs_diff(a, b) < TOL);
    }
}

#[test]
fn full_module_matches_aggregate_then_distribute() {
    let mut r = rng(111);
    let blk = IadmBlock::gaussian(2, 3, 3, GatingMode::Sigmoid, true, true, 0.3, &mut r);
    let shape = Shape::new(2, 3, 4, 6);
    let fr = rand_tensor(shape, &mut r);
    let ft = rand_tensor(shape, &mut r);
    let fs = rand_tensor(shape, &mut r);
    let (enhanced, refined) = iadm_forward(&fs, &[&fr, &ft], &blk).unwrap();
    let (enhanced2, ctx) = aggregate(&[&fr, &ft], &fs, &blk).unwrap();
    let refined2 = distribute(&[&fr, &ft], &enhanced2, &ctx, &blk).unwrap();
    assert_eq!(enhanced.data(), enhanced2.data());
    for (a, b) in refined.iter().zip(&refined2) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn zero_shared_input_reduces_to_direct_aggregation() {
    // With a zero shared feature and zero biases, the enhanced shared
    // feature is exactly the sum of the gated specific contexts.
    let mut r = rng(112);
    let channels = 3;
    let mut blk = IadmBlock::gaussian(2, channels, 3, GatingMode::Literal, true, true, 0.3, &mut r);
    for e in blk
        .extractors_specific
        .iter_mut()
        .chain(Some(&mut blk.extractor_shared))
        .chain(blk.extractor_shared_hat.as_mut())
    {
        e.fuse.bias = Some(Tensor::zeros(Shape::new(1, channels, 1, 1)));
    }
    for g in blk.gates_in.as_mut().unwrap() {
        g.bias = Some(Tensor::zeros(Shape::new(1, channels, 1, 1)));
    }
    let shape = Shape::new(1, channels, 8, 8);
    let fr = rand_tensor(shape, &mut r);
    let ft = rand_tensor(shape, &mut r);
    let fs = Tensor::zeros(shape);
    let (enhanced, _) = aggregate(&[&fr, &ft], &fs, &blk).unwrap();

    // Direct two-term form, via oracles only.
    let ir = extract_context_oracle(&fr, &blk.extractors_specific[0]);
    let it = extract_context_oracle(&ft, &blk.extractors_specific[1]);
    let gates = blk.gates_in.as_ref().unwrap();
    let wr = conv2d_oracle(&ir, &gates[0]);
    let wt = conv2d_oracle(&it, &gates[1]);
    let mut want = Tensor::zeros(shape);
    for i in 0..want.numel() {
        want.data_mut()[i] = ir.data()[i] * wr.data()[i] + it.data()[i] * wt.data()[i];
    }
    assert!(max_abs_diff(&enhanced, &want) < 1e-10);
}

#[test]
fn distribute_without_context_reuse_is_detectable() {
    // The cached specific contexts are honoured: corrupting the bundle
    // changes the distribution output.
    let mut r = rng(113);
    let blk = IadmBlock::gaussian(2, 2, 2, GatingMode::Literal, true, true, 0.3, &mut r);
    let shape = Shape::new(1, 2, 4, 4);
    let fr = rand_tensor(shape, &mut r);
    let ft = rand_tensor(shape, &mut r);
    let fs = rand_tensor(shape, &mut r);
    let (enhanced, ctx) = aggregate(&[&fr, &ft], &fs, &blk).unwrap();
    let honest = distribute(&[&fr, &ft], &enhanced, &ctx, &blk).unwrap();
    let corrupted = ContextBundle {
        specific: vec![ctx.specific[1].clone(), ctx.specific[0].clone()],
        shared: ctx.shared.clone(),
    };
    let swapped = distribute(&[&fr, &ft], &enhanced, &corrupted, &blk).unwrap();
    assert!(max_abs_diff(&honest[0], &swapped[0]) > 1e-9);
}
