//! Independent brute-force oracles shared by the integration suites.
//!
//! Everything here is written as plainly as possible — direct nested loops,
//! no im2col, no shared kernels with the library — so agreement between the
//! two routes is meaningful.

use crowdfusion::iadm::{ContextExtractor, GatingMode, IadmBlock};
use crowdfusion::tensor::{ConvParams, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Direct cross-correlation with zero padding.
pub fn conv2d_oracle(x: &Tensor, p: &ConvParams) -> Tensor {
    let xs = x.shape();
    let ws = p.weights.shape();
    let (stride, pad, dil) = (p.stride, p.padding, p.dilation);
    let oh = (xs.h + 2 * pad - dil * (ws.h - 1) - 1) / stride + 1;
    let ow = (xs.w + 2 * pad - dil * (ws.w - 1) - 1) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for oc in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias.as_ref().map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..ws.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy >= 0 && iy < xs.h as isize && ix >= 0 && ix < xs.w as isize {
                                    acc += x.get(n, ic, iy as usize, ix as usize)
                                        * p.weights.get(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    out.set(n, oc, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Max over each window with right/bottom edge replication.
pub fn maxpool_oracle(x: &Tensor, window: usize) -> Tensor {
    let s = x.shape();
    let oh = s.h.div_ceil(window);
    let ow = s.w.div_ceil(window);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for py in oy * window..(oy + 1) * window {
                        for px in ox * window..(ox + 1) * window {
                            best = best.max(x.get(n, c, py.min(s.h - 1), px.min(s.w - 1)));
                        }
                    }
                    out.set(n, c, oy, ox, best);
                }
            }
        }
    }
    out
}

/// Pixel replication to `(th, tw)`.
pub fn upsample_oracle(x: &Tensor, th: usize, tw: usize) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, th, tw));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..th {
                for x2 in 0..tw {
                    out.set(n, c, y, x2, x.get(n, c, y * s.h / th, x2 * s.w / tw));
                }
            }
        }
    }
    out
}

pub fn concat_oracle(xs: &[&Tensor]) -> Tensor {
    let s0 = xs[0].shape();
    let total: usize = xs.iter().map(|t| t.shape().c).sum();
    let mut out = Tensor::zeros(Shape::new(s0.n, total, s0.h, s0.w));
    for n in 0..s0.n {
        let mut oc = 0;
        for t in xs {
            for c in 0..t.shape().c {
                for y in 0..s0.h {
                    for x in 0..s0.w {
                        out.set(n, oc, y, x, t.get(n, c, y, x));
                    }
                }
                oc += 1;
            }
        }
    }
    out
}

/// Pyramid context extraction composed from the oracles above.
pub fn extract_context_oracle(f: &Tensor, e: &ContextExtractor) -> Tensor {
    let s = f.shape();
    let levels: Vec<Tensor> = (1..=e.levels)
        .map(|l| {
            let window = 1usize << (l - 1);
            if window == 1 {
                f.clone()
            } else {
                upsample_oracle(&maxpool_oracle(f, window), s.h, s.w)
            }
        })
        .collect();
    let refs: Vec<&Tensor> = levels.iter().collect();
    conv2d_oracle(&concat_oracle(&refs), &e.fuse)
}

fn ew(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

fn gate_oracle(residual: &Tensor, gate: Option<&ConvParams>, mode: GatingMode) -> Tensor {
    match gate {
        None => residual.clone(),
        Some(p) => {
            let mut w = conv2d_oracle(residual, p);
            if mode == GatingMode::Sigmoid {
                let data = w.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
                w = Tensor::from_vec(w.shape(), data).unwrap();
            }
            ew(residual, &w, |r, g| r * g)
        }
    }
}

/// Aggregation transfer composed from oracles: returns the enhanced shared
/// feature and the per-modality contexts.
pub fn aggregate_oracle(
    specific: &[&Tensor],
    shared: &Tensor,
    blk: &IadmBlock,
) -> (Tensor, Vec<Tensor>) {
    let ctx: Vec<Tensor> = specific
        .iter()
        .zip(&blk.extractors_specific)
        .map(|(f, e)| extract_context_oracle(f, e))
        .collect();
    let ctx_shared = extract_context_oracle(shared, &blk.extractor_shared);
    let mut enhanced = shared.clone();
    for (m, c) in ctx.iter().enumerate() {
        let residual = ew(c, &ctx_shared, |a, b| a - b);
        let term = gate_oracle(
            &residual,
            blk.gates_in.as_ref().map(|g| &g[m]),
            blk.gating_mode,
        );
        enhanced = ew(&enhanced, &term, |a, b| a + b);
    }
    (enhanced, ctx)
}

/// Distribution transfer composed from oracles.
pub fn distribute_oracle(
    specific: &[&Tensor],
    shared_enhanced: &Tensor,
    ctx: &[Tensor],
    blk: &IadmBlock,
) -> Vec<Tensor> {
    let Some(hat) = &blk.extractor_shared_hat else {
        return specific.iter().map(|t| (*t).clone()).collect();
    };
    let ctx_hat = extract_context_oracle(shared_enhanced, hat);
    specific
        .iter()
        .zip(ctx)
        .enumerate()
        .map(|(m, (f, c))| {
            let residual = ew(&ctx_hat, c, |a, b| a - b);
            let term = gate_oracle(
                &residual,
                blk.gates_out.as_ref().map(|g| &g[m]),
                blk.gating_mode,
            );
            ew(f, &term, |a, b| a + b)
        })
        .collect()
}

/// Central finite difference of `f` at `x[i]` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let plus = f(&xp);
    xp[i] -= 2.0 * h;
    let minus = f(&xp);
    (plus - minus) / (2.0 * h)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
