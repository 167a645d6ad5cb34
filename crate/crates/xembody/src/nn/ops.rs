//! Differentiable ops. Forward computes the value eagerly; each op installs a
//! closure that maps the output gradient to parent gradients.

use super::{Scalar, Tensor};
use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_eq!(a.shape().1, b.shape().0, "matmul inner dims");
    let value = a.value().dot(b.value());
    let (av, bv) = (a.value().clone(), b.value().clone());
    Tensor::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(&g.dot(&bv.t()));
            parents[1].accumulate_grad(&av.t().dot(g));
        }),
    )
}

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    assert_eq!(a.shape(), b.shape(), "add shapes");
    Tensor::from_op(
        a.value() + b.value(),
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(g);
            parents[1].accumulate_grad(g);
        }),
    )
}

/// Broadcast a 1xD row (bias) over every row of x.
pub fn add_rowvec<F: Scalar>(x: &Tensor<F>, bias: &Tensor<F>) -> Tensor<F> {
    assert_eq!(bias.shape().0, 1, "bias must be a row vector");
    assert_eq!(x.shape().1, bias.shape().1, "bias width");
    let value = x.value() + bias.value();
    Tensor::from_op(
        value,
        vec![x.clone(), bias.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(g);
            let summed = g.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
            parents[1].accumulate_grad(&summed);
        }),
    )
}

pub fn scale<F: Scalar>(x: &Tensor<F>, c: f64) -> Tensor<F> {
    let cf = F::from_f64(c);
    Tensor::from_op(
        x.value().mapv(|v| v * cf),
        vec![x.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(&g.mapv(|v| v * cf));
        }),
    )
}

fn gelu_scalar<F: Scalar>(x: F) -> (F, F) {
    // tanh form of the Gaussian error linear unit and its derivative.
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let one = F::ONE;
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let du = c * (one + three * a * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * du;
    (y, dy)
}

pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let mut deriv = Array2::from_elem(x.value().dim(), F::ZERO);
    let mut value = x.value().clone();
    for (v, d) in value.iter_mut().zip(deriv.iter_mut()) {
        let (y, dy) = gelu_scalar(*v);
        *v = y;
        *d = dy;
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(&(g * &deriv));
        }),
    )
}

/// Per-row layer normalization with learned scale and shift.
pub fn layernorm<F: Scalar>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>, eps: f64) -> Tensor<F> {
    let (rows, d) = x.shape();
    assert_eq!(gamma.shape(), (1, d));
    assert_eq!(beta.shape(), (1, d));
    let df = F::from_f64(d as f64);
    let epsf = F::from_f64(eps);

    let mut xhat = Array2::from_elem((rows, d), F::ZERO);
    let mut inv_std = Array1::from_elem(rows, F::ZERO);
    let mut value = Array2::from_elem((rows, d), F::ZERO);
    for r in 0..rows {
        let row = x.value().row(r);
        let mut mean = F::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / df;
        let mut var = F::ZERO;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var = var / df;
        let is = F::ONE / (var + epsf).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat[[r, c]] = h;
            value[[r, c]] = h * gamma.value()[[0, c]] + beta.value()[[0, c]];
        }
    }

    let gv = gamma.value().clone();
    Tensor::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, parents| {
            let (rows, d) = g.dim();
            let df = F::from_f64(d as f64);
            let mut dx = Array2::from_elem((rows, d), F::ZERO);
            let mut dgamma = Array2::from_elem((1, d), F::ZERO);
            let mut dbeta = Array2::from_elem((1, d), F::ZERO);
            for r in 0..rows {
                let mut m1 = F::ZERO; // mean of dy*gamma
                let mut m2 = F::ZERO; // mean of dy*gamma*xhat
                for c in 0..d {
                    let dyg = g[[r, c]] * gv[[0, c]];
                    m1 += dyg;
                    m2 += dyg * xhat[[r, c]];
                    dgamma[[0, c]] += g[[r, c]] * xhat[[r, c]];
                    dbeta[[0, c]] += g[[r, c]];
                }
                m1 = m1 / df;
                m2 = m2 / df;
                for c in 0..d {
                    let dyg = g[[r, c]] * gv[[0, c]];
                    dx[[r, c]] = (dyg - m1 - xhat[[r, c]] * m2) * inv_std[r];
                }
            }
            parents[0].accumulate_grad(&dx);
            parents[1].accumulate_grad(&dgamma);
            parents[2].accumulate_grad(&dbeta);
        }),
    )
}

/// Multi-head scaled-dot-product attention over batched token matrices.
///
/// q is (B*Tq, H*dh); k and v are (B*Tk, H*dh). `key_open`, when present, has
/// length B*Tk; closed keys receive exactly zero attention weight, so
/// perturbing their values can never reach the output.
pub fn attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    batch: usize,
    heads: usize,
    key_open: Option<&[bool]>,
) -> Tensor<F> {
    let (qr, d) = q.shape();
    let (kr, dk) = k.shape();
    assert_eq!(d, dk, "q/k width");
    assert_eq!(v.shape(), (kr, d), "v shape");
    assert_eq!(qr % batch, 0);
    assert_eq!(kr % batch, 0);
    assert_eq!(d % heads, 0, "width divisible by heads");
    let tq = qr / batch;
    let tk = kr / batch;
    let dh = d / heads;
    if let Some(open) = key_open {
        assert_eq!(open.len(), kr, "key mask length");
    }
    let sc = F::from_f64(1.0 / (dh as f64).sqrt());

    let mut value = Array2::from_elem((qr, d), F::ZERO);
    // Saved softmax weights, one (Tq, Tk) matrix per (sample, head).
    let mut probs: Vec<Array2<F>> = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        for h in 0..heads {
            let qbh = q.value().slice(s![b * tq..(b + 1) * tq, h * dh..(h + 1) * dh]);
            let kbh = k.value().slice(s![b * tk..(b + 1) * tk, h * dh..(h + 1) * dh]);
            let vbh = v.value().slice(s![b * tk..(b + 1) * tk, h * dh..(h + 1) * dh]);
            let mut scores = qbh.dot(&kbh.t());
            scores.mapv_inplace(|x| x * sc);
            let mut p = Array2::from_elem((tq, tk), F::ZERO);
            for i in 0..tq {
                let mut max = None;
                for j in 0..tk {
                    let openj = key_open.map_or(true, |o| o[b * tk + j]);
                    if openj && max.map_or(true, |m| scores[[i, j]] > m) {
                        max = Some(scores[[i, j]]);
                    }
                }
                let Some(max) = max else { continue }; // all keys closed
                let mut sum = F::ZERO;
                for j in 0..tk {
                    let openj = key_open.map_or(true, |o| o[b * tk + j]);
                    if openj {
                        let e = (scores[[i, j]] - max).exp();
                        p[[i, j]] = e;
                        sum += e;
                    }
                }
                for j in 0..tk {
                    p[[i, j]] = p[[i, j]] / sum;
                }
            }
            let out = p.dot(&vbh);
            value
                .slice_mut(s![b * tq..(b + 1) * tq, h * dh..(h + 1) * dh])
                .assign(&out);
            probs.push(p);
        }
    }

    let qv = q.value().clone();
    let kv = k.value().clone();
    let vv = v.value().clone();
    Tensor::from_op(
        value,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, parents| {
            let mut dq = Array2::from_elem(qv.dim(), F::ZERO);
            let mut dk = Array2::from_elem(kv.dim(), F::ZERO);
            let mut dv = Array2::from_elem(vv.dim(), F::ZERO);
            for b in 0..batch {
                for h in 0..heads {
                    let p = &probs[b * heads + h];
                    let go = g.slice(s![b * tq..(b + 1) * tq, h * dh..(h + 1) * dh]);
                    let kbh = kv.slice(s![b * tk..(b + 1) * tk, h * dh..(h + 1) * dh]);
                    let qbh = qv.slice(s![b * tq..(b + 1) * tq, h * dh..(h + 1) * dh]);
                    let vbh = vv.slice(s![b * tk..(b + 1) * tk, h * dh..(h + 1) * dh]);
                    // dV = P^T dO
                    let dvbh = p.t().dot(&go);
                    dv.slice_mut(s![b * tk..(b + 1) * tk, h * dh..(h + 1) * dh])
                        .zip_mut_with(&dvbh, |a, &b| *a += b);
                    // dP = dO V^T, then softmax jacobian gives dS.
                    let dp = go.dot(&vbh.t());
                    let mut ds = Array2::from_elem((tq, tk), F::ZERO);
                    for i in 0..tq {
                        let mut dot = F::ZERO;
                        for j in 0..tk {
                            dot += dp[[i, j]] * p[[i, j]];
                        }
                        for j in 0..tk {
                            ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
                        }
                    }
                    ds.mapv_inplace(|x| x * sc);
                    let dqbh = ds.dot(&kbh);
                    dq.slice_mut(s![b * tq..(b + 1) * tq, h * dh..(h + 1) * dh])
                        .zip_mut_with(&dqbh, |a, &b| *a += b);
                    let dkbh = ds.t().dot(&qbh);
                    dk.slice_mut(s![b * tk..(b + 1) * tk, h * dh..(h + 1) * dh])
                        .zip_mut_with(&dkbh, |a, &b| *a += b);
                }
            }
            parents[0].accumulate_grad(&dq);
            parents[1].accumulate_grad(&dk);
            parents[2].accumulate_grad(&dv);
        }),
    )
}

/// Interleave per-modality token blocks into one sequence per sample. Part i
/// has shape (B*Ti, D); the output is (B*sum(Ti), D) with each sample's
/// blocks concatenated in argument order.
pub fn concat_token_groups<F: Scalar>(parts: &[Tensor<F>], batch: usize) -> Tensor<F> {
    assert!(!parts.is_empty());
    let d = parts[0].shape().1;
    let t_counts: Vec<usize> = parts
        .iter()
        .map(|p| {
            assert_eq!(p.shape().1, d, "width mismatch in concat");
            assert_eq!(p.shape().0 % batch, 0);
            p.shape().0 / batch
        })
        .collect();
    let total: usize = t_counts.iter().sum();
    let mut value = Array2::from_elem((batch * total, d), F::ZERO);
    for b in 0..batch {
        let mut row = b * total;
        for (p, &tc) in parts.iter().zip(&t_counts) {
            value
                .slice_mut(s![row..row + tc, ..])
                .assign(&p.value().slice(s![b * tc..(b + 1) * tc, ..]));
            row += tc;
        }
    }
    let tc = t_counts.clone();
    Tensor::from_op(
        value,
        parts.to_vec(),
        Box::new(move |g, parents| {
            let total: usize = tc.iter().sum();
            for (pi, parent) in parents.iter().enumerate() {
                let tcp = tc[pi];
                let offset: usize = tc[..pi].iter().sum();
                let mut dp = Array2::from_elem(parent.shape(), F::ZERO);
                for b in 0..batch {
                    dp.slice_mut(s![b * tcp..(b + 1) * tcp, ..])
                        .assign(&g.slice(s![b * total + offset..b * total + offset + tcp, ..]));
                }
                parent.accumulate_grad(&dp);
            }
        }),
    )
}

/// Pull a token range out of every sample: x is (B*T, D), output is
/// (B*len, D) covering tokens `range` of each sample.
pub fn slice_token_range<F: Scalar>(
    x: &Tensor<F>,
    batch: usize,
    tokens_per_sample: usize,
    range: std::ops::Range<usize>,
) -> Tensor<F> {
    assert_eq!(x.shape().0, batch * tokens_per_sample);
    assert!(range.end <= tokens_per_sample);
    let len = range.end - range.start;
    let d = x.shape().1;
    let mut value = Array2::from_elem((batch * len, d), F::ZERO);
    for b in 0..batch {
        value.slice_mut(s![b * len..(b + 1) * len, ..]).assign(
            &x.value()
                .slice(s![b * tokens_per_sample + range.start..b * tokens_per_sample + range.end, ..]),
        );
    }
    let start = range.start;
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let d = g.dim().1;
            let mut dx = Array2::from_elem((batch * tokens_per_sample, d), F::ZERO);
            for b in 0..batch {
                dx.slice_mut(s![
                    b * tokens_per_sample + start..b * tokens_per_sample + start + len,
                    ..
                ])
                .assign(&g.slice(s![b * len..(b + 1) * len, ..]));
            }
            parents[0].accumulate_grad(&dx);
        }),
    )
}

/// Tile a (T, D) block once per sample, producing (B*T, D). Used for learned
/// query sets shared across the batch.
pub fn repeat_rows<F: Scalar>(x: &Tensor<F>, batch: usize) -> Tensor<F> {
    let (t, d) = x.shape();
    let mut value = Array2::from_elem((batch * t, d), F::ZERO);
    for b in 0..batch {
        value
            .slice_mut(s![b * t..(b + 1) * t, ..])
            .assign(x.value());
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut dx = Array2::from_elem((t, d), F::ZERO);
            for b in 0..batch {
                dx.zip_mut_with(&g.slice(s![b * t..(b + 1) * t, ..]), |a, &b| *a += b);
            }
            parents[0].accumulate_grad(&dx);
        }),
    )
}

/// Transpose each sample's (R, C) block: (B*R, C) -> (B*C, R). Converts a
/// channel-major conv feature map into a cell-major token sequence.
pub fn transpose_per_sample<F: Scalar>(x: &Tensor<F>, batch: usize) -> Tensor<F> {
    let (rows, c) = x.shape();
    assert_eq!(rows % batch, 0);
    let r = rows / batch;
    let mut value = Array2::from_elem((batch * c, r), F::ZERO);
    for b in 0..batch {
        value
            .slice_mut(s![b * c..(b + 1) * c, ..])
            .assign(&x.value().slice(s![b * r..(b + 1) * r, ..]).t());
    }
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents| {
            let mut dx = Array2::from_elem((batch * r, c), F::ZERO);
            for b in 0..batch {
                dx.slice_mut(s![b * r..(b + 1) * r, ..])
                    .assign(&g.slice(s![b * c..(b + 1) * c, ..]).t());
            }
            parents[0].accumulate_grad(&dx);
        }),
    )
}

/// Inverted dropout. In eval mode or at rate 0 this is the identity (same
/// node, no graph growth).
pub fn dropout<F: Scalar>(x: &Tensor<F>, rate: f64, train: bool, rng: &mut ChaCha8Rng) -> Tensor<F> {
    assert!((0.0..1.0).contains(&rate), "dropout rate in [0,1)");
    if !train || rate == 0.0 {
        return x.clone();
    }
    let keep = 1.0 - rate;
    let scale = F::from_f64(1.0 / keep);
    let mask = Array2::from_shape_fn(x.value().dim(), |_| {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            F::ZERO
        }
    });
    let value = x.value() * &mask;
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents| {
            parents[0].accumulate_grad(&(g * &mask));
        }),
    )
}

fn im2col<F: Scalar>(
    x: &Array2<F>,
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let mut col = Array2::from_elem((cin * k * k, ho * wo), F::ZERO);
    for ci in 0..cin {
        for dy in 0..k {
            for dx in 0..k {
                let row = ci * k * k + dy * k + dx;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] =
                            x[[b * cin + ci, iy as usize * w + ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// 2-D convolution over flattened feature maps. x is (B*Cin, H*W), weight is
/// (Cout, Cin*k*k), bias is (1, Cout); output is (B*Cout, Ho*Wo).
#[allow(clippy::too_many_arguments)]
pub fn conv2d<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    assert_eq!(x.shape(), (batch * cin, h * w), "conv input shape");
    let cout = weight.shape().0;
    assert_eq!(weight.shape().1, cin * k * k, "conv weight shape");
    assert_eq!(bias.shape(), (1, cout));
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;

    let mut value = Array2::from_elem((batch * cout, ho * wo), F::ZERO);
    for b in 0..batch {
        let col = im2col(x.value(), b, cin, h, w, k, stride, pad, ho, wo);
        let mut y = weight.value().dot(&col);
        for co in 0..cout {
            let bv = bias.value()[[0, co]];
            for o in 0..ho * wo {
                y[[co, o]] += bv;
            }
        }
        value.slice_mut(s![b * cout..(b + 1) * cout, ..]).assign(&y);
    }

    let xv = x.value().clone();
    let wv = weight.value().clone();
    Tensor::from_op(
        value,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, parents| {
            let mut dw = Array2::from_elem(wv.dim(), F::ZERO);
            let mut db = Array2::from_elem((1, cout), F::ZERO);
            let x_needs = parents[0].0.needs_grad;
            let mut dx = Array2::from_elem(xv.dim(), F::ZERO);
            for b in 0..batch {
                let gb = g.slice(s![b * cout..(b + 1) * cout, ..]);
                let col = im2col(&xv, b, cin, h, w, k, stride, pad, ho, wo);
                dw.zip_mut_with(&gb.dot(&col.t()), |a, &v| *a += v);
                for co in 0..cout {
                    for o in 0..ho * wo {
                        db[[0, co]] += gb[[co, o]];
                    }
                }
                if x_needs {
                    // Scatter-add the column gradient back through im2col.
                    let dcol = wv.t().dot(&gb);
                    for ci in 0..cin {
                        for dy in 0..k {
                            for dxk in 0..k {
                                let row = ci * k * k + dy * k + dxk;
                                for oy in 0..ho {
                                    let iy = (oy * stride + dy) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..wo {
                                        let ix = (ox * stride + dxk) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dx[[b * cin + ci, iy as usize * w + ix as usize]] +=
                                            dcol[[row, oy * wo + ox]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if x_needs {
                parents[0].accumulate_grad(&dx);
            }
            parents[1].accumulate_grad(&dw);
            parents[2].accumulate_grad(&db);
        }),
    )
}

/// Weighted l1 objective: sum(weights * |pred - target|), accumulated in f64.
/// Validity and active-dim masking enter through zero weights.
pub fn weighted_l1<F: Scalar>(pred: &Tensor<F>, target: &Array2<F>, weights: &Array2<F>) -> Tensor<F> {
    assert_eq!(pred.shape(), (target.dim().0, target.dim().1));
    assert_eq!(target.dim(), weights.dim());
    let mut acc = 0.0f64;
    for ((p, t), w) in pred.value().iter().zip(target.iter()).zip(weights.iter()) {
        acc += w.to_f64() * (*p - *t).abs().to_f64();
    }
    let value = Array2::from_elem((1, 1), F::from_f64(acc));
    let tv = target.clone();
    let wv = weights.clone();
    Tensor::from_op(
        value,
        vec![pred.clone()],
        Box::new(move |g, parents| {
            let g0 = g[[0, 0]];
            let pv = parents[0].value();
            let mut dp = Array2::from_elem(pv.dim(), F::ZERO);
            for ((d, (p, t)), w) in dp.iter_mut().zip(pv.iter().zip(tv.iter())).zip(wv.iter()) {
                let diff = *p - *t;
                let sign = if diff > F::ZERO {
                    F::ONE
                } else if diff < F::ZERO {
                    -F::ONE
                } else {
                    F::ZERO
                };
                *d = g0 * *w * sign;
            }
            parents[0].accumulate_grad(&dp);
        }),
    )
}

/// Sum of scalar (1x1) tensors.
pub fn add_scalars<F: Scalar>(xs: &[Tensor<F>]) -> Tensor<F> {
    assert!(!xs.is_empty());
    let mut acc = 0.0f64;
    for x in xs {
        assert_eq!(x.shape(), (1, 1));
        acc += x.value()[[0, 0]].to_f64();
    }
    Tensor::from_op(
        Array2::from_elem((1, 1), F::from_f64(acc)),
        xs.to_vec(),
        Box::new(move |g, parents| {
            for p in parents {
                p.accumulate_grad(g);
            }
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::super::backward;
    use super::*;
    use ndarray::arr2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() - 0.5)
    }

    /// Central finite-difference check of d(sum of out . probe)/d(inputs).
    fn gradcheck(
        inputs: &[Array2<f64>],
        f: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
        tol: f64,
    ) {
        let leafs: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, a)| Tensor::leaf(a.clone(), i))
            .collect();
        let out = f(&leafs);
        assert_eq!(out.shape(), (1, 1), "gradcheck expects a scalar fn");
        backward(&out);
        let analytic: Vec<Array2<f64>> = leafs
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| Array2::zeros(l.shape())))
            .collect();

        let h = 1e-5;
        for (pi, arr) in inputs.iter().enumerate() {
            for idx in 0..arr.len() {
                let eval = |delta: f64| {
                    let leafs: Vec<Tensor<f64>> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, a)| {
                            let mut a = a.clone();
                            if i == pi {
                                a.as_slice_mut().unwrap()[idx] += delta;
                            }
                            Tensor::leaf(a, i)
                        })
                        .collect();
                    f(&leafs).value()[[0, 0]]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic[pi].as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() <= tol * fd.abs().max(an.abs()).max(1.0),
                    "input {pi} elem {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn sum_to_scalar(t: &Tensor<f64>, probe: &Array2<f64>) -> Tensor<f64> {
        // Project to a scalar with a fixed probe so gradchecks exercise
        // non-uniform output gradients.
        let zeros = Array2::zeros(t.shape());
        weighted_l1(t, &zeros, probe)
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_arr(&mut rng, 3, 4);
        let b = rand_arr(&mut rng, 4, 2);
        // Shift outputs positive so the l1 probe is smooth at every point.
        let probe = Array2::from_shape_fn((3, 2), |(i, j)| 0.3 + 0.1 * (i + 2 * j) as f64);
        gradcheck(&[a, b], &|l| {
            let y = add(&matmul(&l[0], &l[1]), &Tensor::constant(Array2::from_elem((3, 2), 10.0)));
            sum_to_scalar(&y, &probe)
        }, 1e-6);
    }

    #[test]
    fn bias_and_scale_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr(&mut rng, 5, 3);
        let b = rand_arr(&mut rng, 1, 3);
        let probe = Array2::from_elem((5, 3), 0.7);
        gradcheck(&[x, b], &|l| {
            let y = scale(&add_rowvec(&l[0], &l[1]), 1.7);
            let shifted = add(&y, &Tensor::constant(Array2::from_elem((5, 3), 10.0)));
            sum_to_scalar(&shifted, &probe)
        }, 1e-6);
    }

    #[test]
    fn gelu_matches_reference_points() {
        // Spot values of the tanh form.
        let x = Tensor::constant(arr2(&[[0.0f64, 1.0, -1.0]]));
        let y = gelu(&x);
        assert!((y.value()[[0, 0]]).abs() < 1e-12);
        assert!((y.value()[[0, 1]] - 0.841192).abs() < 1e-5);
        assert!((y.value()[[0, 2]] + 0.158808).abs() < 1e-5);
    }

    #[test]
    fn gelu_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_arr(&mut rng, 4, 4) * 2.0;
        let probe = Array2::from_shape_fn((4, 4), |(i, j)| 0.2 + 0.05 * (i * 4 + j) as f64);
        gradcheck(&[x], &|l| {
            let y = add(&gelu(&l[0]), &Tensor::constant(Array2::from_elem((4, 4), 10.0)));
            sum_to_scalar(&y, &probe)
        }, 1e-5);
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::constant(rand_arr(&mut rng, 3, 8));
        let gamma = Tensor::constant(Array2::ones((1, 8)));
        let beta = Tensor::constant(Array2::zeros((1, 8)));
        let y = layernorm(&x, &gamma, &beta, 1e-5);
        for r in 0..3 {
            let row = y.value().row(r);
            let mean: f64 = row.sum() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3); // eps shrinks variance slightly
        }
    }

    #[test]
    fn layernorm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_arr(&mut rng, 3, 6);
        let gamma = rand_arr(&mut rng, 1, 6) + 1.0;
        let beta = rand_arr(&mut rng, 1, 6);
        let probe = Array2::from_shape_fn((3, 6), |(i, j)| 0.1 + 0.07 * (i * 6 + j) as f64);
        gradcheck(&[x, gamma, beta], &|l| {
            let y = layernorm(&l[0], &l[1], &l[2], 1e-5);
            let shifted = add(&y, &Tensor::constant(Array2::from_elem((3, 6), 50.0)));
            sum_to_scalar(&shifted, &probe)
        }, 1e-5);
    }

    #[test]
    fn attention_weights_uniform_for_equal_scores() {
        // Equal keys give uniform attention; output is then the mean of V.
        let b = 1;
        let q = Tensor::constant(Array2::ones((2, 4)));
        let k = Tensor::constant(Array2::ones((3, 4)));
        let v = Tensor::constant(arr2(&[
            [0.0f64, 1.0, 2.0, 3.0],
            [4.0, 5.0, 6.0, 7.0],
            [8.0, 9.0, 10.0, 11.0],
        ]));
        let y = attention(&q, &k, &v, b, 2, None);
        for c in 0..4 {
            assert!((y.value()[[0, c]] - (c as f64 + 4.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_masked_key_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_arr(&mut rng, 4, 8);
        let k = rand_arr(&mut rng, 6, 8);
        let mut v = rand_arr(&mut rng, 6, 8);
        let open = vec![true, true, false, true, false, true];
        let y1 = attention(
            &Tensor::constant(q.clone()),
            &Tensor::constant(k.clone()),
            &Tensor::constant(v.clone()),
            2,
            2,
            Some(&open),
        );
        // Perturb the closed keys' values arbitrarily: bit-identical output.
        for c in 0..8 {
            v[[2, c]] = 999.0;
            v[[4, c]] = -999.0;
        }
        let mut k2 = k.clone();
        for c in 0..8 {
            k2[[2, c]] = 123.0;
        }
        let y2 = attention(
            &Tensor::constant(q),
            &Tensor::constant(k2),
            &Tensor::constant(v),
            2,
            2,
            Some(&open),
        );
        assert_eq!(y1.value(), y2.value());
    }

    #[test]
    fn attention_all_keys_closed_gives_zeros() {
        let q = Tensor::constant(Array2::<f64>::ones((2, 4)));
        let k = Tensor::constant(Array2::<f64>::ones((2, 4)));
        let v = Tensor::constant(Array2::<f64>::ones((2, 4)));
        let y = attention(&q, &k, &v, 1, 1, Some(&[false, false]));
        assert!(y.value().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_arr(&mut rng, 4, 6);
        let k = rand_arr(&mut rng, 6, 6);
        let v = rand_arr(&mut rng, 6, 6);
        let open = vec![true, false, true, true, true, false];
        let probe = Array2::from_shape_fn((4, 6), |(i, j)| 0.15 + 0.04 * (i * 6 + j) as f64);
        gradcheck(&[q, k, v], &|l| {
            let y = attention(&l[0], &l[1], &l[2], 2, 3, Some(&open));
            let shifted = add(&y, &Tensor::constant(Array2::from_elem((4, 6), 10.0)));
            sum_to_scalar(&shifted, &probe)
        }, 1e-5);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_arr(&mut rng, 4, 3); // B=2, 2 tokens
        let b = rand_arr(&mut rng, 6, 3); // B=2, 3 tokens
        let cat = concat_token_groups(
            &[Tensor::constant(a.clone()), Tensor::constant(b.clone())],
            2,
        );
        assert_eq!(cat.shape(), (10, 3));
        // Sample 1's second block sits at tokens 2..5 of its 5-token row run.
        let back = slice_token_range(&cat, 2, 5, 2..5);
        assert_eq!(back.value(), &b);
        let front = slice_token_range(&cat, 2, 5, 0..2);
        assert_eq!(front.value(), &a);
    }

    #[test]
    fn concat_slice_repeat_transpose_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_arr(&mut rng, 4, 3);
        let b = rand_arr(&mut rng, 2, 3); // repeated per sample
        let probe = Array2::from_shape_fn((6, 2), |(i, j)| 0.2 + 0.1 * (i * 2 + j) as f64);
        gradcheck(&[a, b], &|l| {
            let rep = repeat_rows(&l[1], 2); // (4,3), 2 tokens per sample
            let cat = concat_token_groups(&[l[0].clone(), rep], 2); // 4 tokens
            let sl = slice_token_range(&cat, 2, 4, 1..3); // (4,3)
            let tr = transpose_per_sample(&sl, 2); // (6,2)
            let shifted = add(&tr, &Tensor::constant(Array2::from_elem((6, 2), 10.0)));
            sum_to_scalar(&shifted, &probe)
        }, 1e-6);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::constant(Array2::<f64>::ones((100, 10)));
        let y = dropout(&x, 0.3, false, &mut rng);
        assert_eq!(y.value(), x.value());
        let y = dropout(&x, 0.3, true, &mut rng);
        // Kept entries are scaled by 1/(1-p); mean stays near 1.
        let mean = y.value().sum() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "mean {mean}");
        for &v in y.value() {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_deterministic_given_seed() {
        let x = Tensor::constant(Array2::<f64>::ones((20, 20)));
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let y1 = dropout(&x, 0.5, true, &mut r1);
        let y2 = dropout(&x, 0.5, true, &mut r2);
        assert_eq!(y1.value(), y2.value());
    }

    #[test]
    fn conv2d_hand_case() {
        // 1 channel 3x3 input, 2x2 kernel of ones, stride 1, no padding:
        // each output is the sum of its 2x2 window.
        let x = Tensor::constant(arr2(&[[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]]));
        let w = Tensor::constant(Array2::ones((1, 4)));
        let b = Tensor::constant(Array2::zeros((1, 1)));
        let y = conv2d(&x, &w, &b, 1, 1, 3, 3, 2, 1, 0);
        assert_eq!(y.shape(), (1, 4));
        assert_eq!(y.value().as_slice().unwrap(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_stride_and_padding_shapes() {
        let x = Tensor::constant(Array2::<f64>::zeros((3, 32 * 32)));
        let w = Tensor::constant(Array2::zeros((16, 3 * 3 * 3)));
        let b = Tensor::constant(Array2::zeros((1, 16)));
        let y = conv2d(&x, &w, &b, 1, 3, 32, 32, 3, 2, 1);
        assert_eq!(y.shape(), (16, 16 * 16));
    }

    #[test]
    fn conv2d_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_arr(&mut rng, 4, 25); // B=2, Cin=2, 5x5
        let w = rand_arr(&mut rng, 3, 2 * 9);
        let b = rand_arr(&mut rng, 1, 3);
        let probe = Array2::from_shape_fn((6, 9), |(i, j)| 0.05 + 0.01 * (i * 9 + j) as f64);
        gradcheck(&[x, w, b], &|l| {
            let y = conv2d(&l[0], &l[1], &l[2], 2, 2, 5, 5, 3, 2, 1);
            let shifted = add(&y, &Tensor::constant(Array2::from_elem((6, 9), 10.0)));
            sum_to_scalar(&shifted, &probe)
        }, 1e-5);
    }

    #[test]
    fn weighted_l1_value_and_grad() {
        let pred = Tensor::leaf(arr2(&[[1.0f64, -2.0, 0.5]]), 0);
        let target = arr2(&[[0.0f64, 0.0, 0.5]]);
        let weights = arr2(&[[1.0f64, 0.5, 3.0]]);
        let loss = weighted_l1(&pred, &target, &weights);
        assert!((loss.value()[[0, 0]] - 2.0).abs() < 1e-12);
        backward(&loss);
        let g = pred.grad().unwrap();
        assert_eq!(g[[0, 0]], 1.0);
        assert_eq!(g[[0, 1]], -0.5);
        assert_eq!(g[[0, 2]], 0.0); // exact tie: subgradient 0
    }

    #[test]
    fn add_scalars_sums_and_distributes() {
        let a = Tensor::leaf(arr2(&[[0.1f64]]), 0);
        let b = Tensor::leaf(arr2(&[[0.2f64]]), 1);
        let c = Tensor::leaf(arr2(&[[0.3f64]]), 2);
        let s = add_scalars(&[a.clone(), b.clone(), c.clone()]);
        assert!((s.value()[[0, 0]] - 0.6).abs() < 1e-12);
        backward(&s);
        for t in [&a, &b, &c] {
            assert_eq!(t.grad().unwrap()[[0, 0]], 1.0);
        }
    }

    #[test]
    fn f32_ops_agree_with_f64_closely() {
        // The same small MLP forward in both precisions should agree to
        // f32 roundoff.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_arr(&mut rng, 8, 8);
        let w = rand_arr(&mut rng, 8, 8);
        let x32 = Tensor::constant(x.mapv(|v| v as f32));
        let w32 = Tensor::constant(w.mapv(|v| v as f32));
        let y64 = gelu(&matmul(&Tensor::constant(x), &Tensor::constant(w)));
        let y32 = gelu(&matmul(&x32, &w32));
        for (a, b) in y64.value().iter().zip(y32.value()) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }
}
