//! Elementwise operators, the dense layer, channel concatenation and the
//! weighted softmax cross-entropy reduction.

use super::{GradSink, Mode, Op, Result, RngStream, Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let tracked = a.tracked() || b.tracked();
    Ok(Tensor::from_op(a.shape().to_vec(), data, tracked, || {
        Op::Add(a.clone(), b.clone())
    }))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
    let tracked = a.tracked() || b.tracked();
    Ok(Tensor::from_op(a.shape().to_vec(), data, tracked, || {
        Op::Sub(a.clone(), b.clone())
    }))
}

/// Elementwise product of same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let tracked = a.tracked() || b.tracked();
    Ok(Tensor::from_op(a.shape().to_vec(), data, tracked, || {
        Op::Mul(a.clone(), b.clone())
    }))
}

pub fn square(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v * v).collect();
    Tensor::from_op(x.shape().to_vec(), data, x.tracked(), || Op::Square(x.clone()))
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    let data = x.data().iter().map(|v| v * c).collect();
    Tensor::from_op(x.shape().to_vec(), data, x.tracked(), || Op::Scale(x.clone(), c))
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    Tensor::from_op(vec![1], vec![s], x.tracked(), || Op::SumAll(x.clone()))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_op(x.shape().to_vec(), data, x.tracked(), || Op::Relu(x.clone()))
}

/// Same data, new shape; element count must match.
pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let expected: usize = shape.iter().product();
    if expected != x.len() {
        return Err(TensorError::DataLength {
            expected,
            got: x.len(),
        });
    }
    let data = x.data().clone();
    Ok(Tensor::from_op(shape.to_vec(), data, x.tracked(), || {
        Op::Reshape(x.clone())
    }))
}

/// Concatenate `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::BadRank {
        op: "concat_channels",
        expected: 4,
        got: 0,
    })?;
    if first.shape().len() != 4 {
        return Err(TensorError::BadRank {
            op: "concat_channels",
            expected: 4,
            got: first.shape().len(),
        });
    }
    let (n, h, w) = (first.shape()[0], first.shape()[2], first.shape()[3]);
    let mut channels = 0;
    for p in parts {
        if p.shape().len() != 4 || p.shape()[0] != n || p.shape()[2] != h || p.shape()[3] != w {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        channels += p.shape()[1];
    }
    let plane = h * w;
    let mut data = vec![0.0; n * channels * plane];
    let out_stride = channels * plane;
    let mut ch_off = 0;
    for p in parts {
        let c = p.shape()[1];
        let pd = p.data();
        for s in 0..n {
            let src = &pd[s * c * plane..(s + 1) * c * plane];
            let dst = &mut data[s * out_stride + ch_off * plane..][..c * plane];
            dst.copy_from_slice(src);
        }
        ch_off += c;
    }
    let tracked = parts.iter().any(Tensor::tracked);
    Ok(Tensor::from_op(vec![n, channels, h, w], data, tracked, || {
        Op::ConcatChannels(parts.to_vec())
    }))
}

pub(crate) fn concat_backward(out: &Tensor, parts: &[Tensor], out_grad: &[f64], sink: &mut GradSink) {
    let n = out.shape()[0];
    let plane = out.shape()[2] * out.shape()[3];
    let out_stride = out.shape()[1] * plane;
    let mut ch_off = 0;
    for p in parts {
        let c = p.shape()[1];
        if let Some(g) = sink.buf(p) {
            for s in 0..n {
                let src = &out_grad[s * out_stride + ch_off * plane..][..c * plane];
                let dst = &mut g[s * c * plane..(s + 1) * c * plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        ch_off += c;
    }
}

/// Inverted dropout: zero with probability `p`, survivors scaled by
/// `1/(1-p)`. Identity in eval mode and for `p == 0`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut RngStream, mode: Mode) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::InvalidDropout { p });
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok(Tensor::from_op(x.shape().to_vec(), data, x.tracked(), || {
        Op::Dropout {
            x: x.clone(),
            mask,
        }
    }))
}

/// Affine map `x[N,D] . w[D,K] + b[K]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(TensorError::BadRank {
            op: "dense",
            expected: 2,
            got: x.shape().len(),
        });
    }
    if w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (n, d, k) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    if b.shape() != [k] {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            lhs: b.shape().to_vec(),
            rhs: vec![k],
        });
    }
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut data = vec![0.0; n * k];
    for i in 0..n {
        let row = &xd[i * d..(i + 1) * d];
        let out = &mut data[i * k..(i + 1) * k];
        out.copy_from_slice(&bd);
        for (j, &xv) in row.iter().enumerate() {
            let wrow = &wd[j * k..(j + 1) * k];
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    drop((xd, wd, bd));
    let tracked = x.tracked() || w.tracked() || b.tracked();
    Ok(Tensor::from_op(vec![n, k], data, tracked, || Op::Dense {
        x: x.clone(),
        w: w.clone(),
        b: b.clone(),
    }))
}

pub(crate) fn dense_backward(x: &Tensor, w: &Tensor, b: &Tensor, out_grad: &[f64], sink: &mut GradSink) {
    let (n, d, k) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    if let Some(g) = sink.buf(x) {
        let wd = w.data();
        for i in 0..n {
            let go = &out_grad[i * k..(i + 1) * k];
            let gx = &mut g[i * d..(i + 1) * d];
            for j in 0..d {
                let wrow = &wd[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (gv, wv) in go.iter().zip(wrow) {
                    acc += gv * wv;
                }
                gx[j] += acc;
            }
        }
    }
    if let Some(g) = sink.buf(w) {
        let xd = x.data();
        for i in 0..n {
            let go = &out_grad[i * k..(i + 1) * k];
            let row = &xd[i * d..(i + 1) * d];
            for (j, &xv) in row.iter().enumerate() {
                let gw = &mut g[j * k..(j + 1) * k];
                for (gwv, &gv) in gw.iter_mut().zip(go) {
                    *gwv += xv * gv;
                }
            }
        }
    }
    if let Some(g) = sink.buf(b) {
        for i in 0..n {
            let go = &out_grad[i * k..(i + 1) * k];
            for (gb, &gv) in g.iter_mut().zip(go) {
                *gb += gv;
            }
        }
    }
}

/// Weighted pixel-wise cross-entropy against one-hot targets:
/// `-sum_v w_v sum_l T_{l,v} ln softmax(z)_{l,v}`, stabilized by
/// max-subtraction so logits up to ~1e4 in magnitude stay finite.
pub fn softmax_cross_entropy(logits: &Tensor, target: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 4 {
        return Err(TensorError::BadRank {
            op: "softmax_cross_entropy",
            expected: 4,
            got: logits.shape().len(),
        });
    }
    same_shape("softmax_cross_entropy", logits, target)?;
    let (n, c, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    if weights.shape() != [n, h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: weights.shape().to_vec(),
            rhs: vec![n, h, w],
        });
    }
    let zd = logits.data();
    let td = target.data();
    let wd = weights.data();
    let plane = h * w;
    let mut probs = vec![0.0; zd.len()];
    let mut loss = 0.0;
    for s in 0..n {
        let base = s * c * plane;
        for px in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for l in 0..c {
                m = m.max(zd[base + l * plane + px]);
            }
            let mut denom = 0.0;
            for l in 0..c {
                let e = (zd[base + l * plane + px] - m).exp();
                probs[base + l * plane + px] = e;
                denom += e;
            }
            let ln_denom = denom.ln();
            let mut px_loss = 0.0;
            for l in 0..c {
                let idx = base + l * plane + px;
                probs[idx] /= denom;
                let t = td[idx];
                if t != 0.0 {
                    px_loss -= t * (zd[idx] - m - ln_denom);
                }
            }
            loss += wd[s * plane + px] * px_loss;
        }
    }
    drop((zd, td, wd));
    Ok(Tensor::from_op(vec![1], vec![loss], logits.tracked(), || {
        Op::SoftmaxCrossEntropy {
            logits: logits.clone(),
            target: target.clone(),
            weights: weights.clone(),
            probs,
        }
    }))
}

pub(crate) fn sce_backward(
    logits: &Tensor,
    target: &Tensor,
    weights: &Tensor,
    probs: &[f64],
    out_grad: &[f64],
    sink: &mut GradSink,
) {
    let Some(g) = sink.buf(logits) else { return };
    let (n, c, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    let td = target.data();
    let wd = weights.data();
    let plane = h * w;
    let up = out_grad[0];
    for s in 0..n {
        let base = s * c * plane;
        for l in 0..c {
            let off = base + l * plane;
            for px in 0..plane {
                g[off + px] += up * wd[s * plane + px] * (probs[off + px] - td[off + px]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{sum_all, Tensor};
    use super::*;

    #[test]
    fn dense_identity_weight_passes_input_through() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b = Tensor::zeros(&[3]);
        let y = dense(&x, &eye, &b).unwrap();
        assert_eq!(*y.data(), *x.data());
    }

    #[test]
    fn dense_zero_weight_broadcasts_bias() {
        let x = Tensor::from_vec(&[2, 3], vec![9.0; 6]).unwrap();
        let w = Tensor::zeros(&[3, 2]);
        let b = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let y = dense(&x, &w, &b).unwrap();
        assert_eq!(*y.data(), vec![0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn dense_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(17);
        let x: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut expect = vec![0.0; 4];
        for i in 0..2 {
            for k in 0..2 {
                let mut acc = b[k];
                for j in 0..3 {
                    acc += x[i * 3 + j] * w[j * 2 + k];
                }
                expect[i * 2 + k] = acc;
            }
        }
        let y = dense(
            &Tensor::from_vec(&[2, 3], x).unwrap(),
            &Tensor::from_vec(&[3, 2], w).unwrap(),
            &Tensor::from_vec(&[2], b).unwrap(),
        )
        .unwrap();
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_rejects_dim_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            dense(&x, &w, &b),
            Err(TensorError::ShapeMismatch { op: "dense", .. })
        ));
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(*relu(&x).data(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = RngStream::new(1);
        for mode in [Mode::Train, Mode::Eval] {
            let y = dropout(&x, 0.0, &mut rng, mode).unwrap();
            assert_eq!(*y.data(), *x.data());
        }
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        let x = Tensor::zeros(&[2]);
        let mut rng = RngStream::new(1);
        assert!(matches!(
            dropout(&x, 1.0, &mut rng, Mode::Train),
            Err(TensorError::InvalidDropout { .. })
        ));
    }

    #[test]
    fn dropout_survivor_statistics() {
        let n = 100_000;
        let x = Tensor::from_vec(&[n], vec![1.0; n]).unwrap();
        let mut rng = RngStream::new(99);
        let y = dropout(&x, 0.5, &mut rng, Mode::Train).unwrap();
        let survivors = y.data().iter().filter(|v| **v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {frac}");
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn sce_uniform_logits_cost_ln4_per_pixel() {
        let (n, c, h, w) = (1, 4, 2, 2);
        let logits = Tensor::param(&[n, c, h, w], vec![0.0; n * c * h * w]).unwrap();
        let mut t = vec![0.0; n * c * h * w];
        for px in 0..h * w {
            t[px] = 1.0; // class 0 everywhere
        }
        let target = Tensor::from_vec(&[n, c, h, w], t).unwrap();
        let ones = Tensor::from_vec(&[n, h, w], vec![1.0; n * h * w]).unwrap();
        let loss = softmax_cross_entropy(&logits, &target, &ones).unwrap();
        let per_pixel = loss.item() / (h * w) as f64;
        assert!((per_pixel - 4.0f64.ln()).abs() < 1e-12, "{per_pixel}");
    }

    #[test]
    fn sce_confident_correct_prediction_is_near_zero() {
        let (c, h, w) = (4, 1, 1);
        let mut z = vec![0.0; c];
        z[2] = 100.0;
        let logits = Tensor::param(&[1, c, h, w], z).unwrap();
        let mut t = vec![0.0; c];
        t[2] = 1.0;
        let target = Tensor::from_vec(&[1, c, h, w], t).unwrap();
        let ones = Tensor::from_vec(&[1, h, w], vec![1.0]).unwrap();
        let loss = softmax_cross_entropy(&logits, &target, &ones).unwrap();
        assert!(loss.item() < 1e-10, "{}", loss.item());
    }

    #[test]
    fn sce_matches_direct_formula_oracle() {
        let (n, c, h, w) = (1, 4, 2, 2);
        let mut rng = RngStream::new(23);
        let z: Vec<f64> = (0..n * c * h * w).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut t = vec![0.0; n * c * h * w];
        let plane = h * w;
        for px in 0..plane {
            let cls = rng.uniform_usize(c);
            t[cls * plane + px] = 1.0;
        }
        let wts: Vec<f64> = (0..plane).map(|_| rng.uniform(0.0, 2.0)).collect();

        // Direct softmax-then-sum oracle, no stabilization tricks.
        let mut expect = 0.0;
        for px in 0..plane {
            let mut denom = 0.0;
            for l in 0..c {
                denom += z[l * plane + px].exp();
            }
            for l in 0..c {
                if t[l * plane + px] != 0.0 {
                    expect -= wts[px] * (z[l * plane + px].exp() / denom).ln();
                }
            }
        }

        let loss = softmax_cross_entropy(
            &Tensor::from_vec(&[n, c, h, w], z).unwrap(),
            &Tensor::from_vec(&[n, c, h, w], t).unwrap(),
            &Tensor::from_vec(&[n, h, w], wts).unwrap(),
        )
        .unwrap();
        assert!((loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn sce_survives_huge_logits() {
        let z = vec![1e4, -1e4, 0.0, 5.0];
        let logits = Tensor::param(&[1, 4, 1, 1], z).unwrap();
        let target = Tensor::from_vec(&[1, 4, 1, 1], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let ones = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let loss = softmax_cross_entropy(&logits, &target, &ones).unwrap();
        assert!(loss.item().is_finite());
        loss.backward().unwrap();
        assert!(logits.grad().unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn concat_splits_gradient() {
        let a = Tensor::param(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::param(&[1, 2, 2, 2], vec![2.0; 8]).unwrap();
        let y = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
        let loss = sum_all(&scale(&y, 3.0));
        loss.backward().unwrap();
        assert!(a.grad().unwrap().iter().all(|&g| g == 3.0));
        assert!(b.grad().unwrap().iter().all(|&g| g == 3.0));
    }

    #[test]
    fn reshape_preserves_data_and_grad_flow() {
        let x = Tensor::param(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = reshape(&x, &[6]).unwrap();
        assert_eq!(*y.data(), *x.data());
        sum_all(&y).backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| g == 1.0));
        assert!(reshape(&x, &[4]).is_err());
    }
}
