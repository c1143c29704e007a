//! Differentiable primitives with hand-written backward passes.
//!
//! Every op takes batched row-major inputs (`[batch, features]`) and returns
//! what its backward pass needs. Backward functions accumulate parameter
//! gradients in place and return input gradients.

use crate::error::{Error, Result};
use crate::nn::tensor::{gemm, Tensor};

fn expect_matrix(op: &'static str, t: &Tensor, cols: usize) -> Result<usize> {
    if t.shape().len() != 2 || t.cols() != cols {
        return Err(Error::shape(
            op,
            format!("expected [_, {cols}], got {:?}", t.shape()),
        ));
    }
    Ok(t.rows())
}

fn checked(t: Tensor, op: &str) -> Result<Tensor> {
    t.check_finite(op)?;
    Ok(t)
}

/// `y = x W^T + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::shape(
            "affine",
            format!("weight shape {:?}", w.shape()),
        ));
    }
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    if b.len() != out {
        return Err(Error::shape(
            "affine",
            format!("bias has {} entries, weight has {out} rows", b.len()),
        ));
    }
    let rows = expect_matrix("affine", x, inp)?;
    let mut y = Tensor::zeros(&[rows, out]);
    for r in 0..rows {
        y.row_mut(r).copy_from_slice(b.data());
    }
    gemm(
        rows,
        inp,
        out,
        x.data(),
        false,
        w.data(),
        true,
        1.0,
        y.data_mut(),
    );
    checked(y, "affine")
}

/// Accumulates `dW += dy^T x` and returns `dx = dy W`.
pub fn affine_backward_weight(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
) -> Result<Tensor> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let rows = expect_matrix("affine_backward", dy, out)?;
    if expect_matrix("affine_backward", x, inp)? != rows || dw.shape() != w.shape() {
        return Err(Error::shape(
            "affine_backward",
            "batch or gradient mismatch",
        ));
    }
    gemm(
        out,
        rows,
        inp,
        dy.data(),
        true,
        x.data(),
        false,
        1.0,
        dw.data_mut(),
    );
    let mut dx = Tensor::zeros(&[rows, inp]);
    gemm(
        rows,
        out,
        inp,
        dy.data(),
        false,
        w.data(),
        false,
        0.0,
        dx.data_mut(),
    );
    Ok(dx)
}

/// Accumulates the column sums of `dy` into `db`.
pub fn bias_backward(dy: &Tensor, db: &mut Tensor) -> Result<()> {
    let out = db.len();
    let rows = expect_matrix("bias_backward", dy, out)?;
    let g = db.data_mut();
    for r in 0..rows {
        for (acc, v) in g.iter_mut().zip(dy.row(r)) {
            *acc += v;
        }
    }
    Ok(())
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Backward of `tanh` given its output.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    zip_map(y, dy, |y, g| g * (1.0 - y * y))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of `sigmoid` given its output.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    zip_map(y, dy, |y, g| g * y * (1.0 - y))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    zip_map(x, dy, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn elu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { v.exp_m1() })
}

pub fn elu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    zip_map(x, dy, |x, g| if x > 0.0 { g } else { g * x.exp() })
}

pub fn abs(x: &Tensor) -> Tensor {
    x.map(f64::abs)
}

pub fn abs_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    zip_map(x, dy, |x, g| {
        if x > 0.0 {
            g
        } else if x < 0.0 {
            -g
        } else {
            0.0
        }
    })
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Row-wise softmax of a `[B, K]` matrix.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let k = x.cols();
    for r in 0..x.rows() {
        let row = y.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
        debug_assert_eq!(row.len(), k);
    }
    y
}

/// Backward of [`softmax_rows`] given its output.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = dy.row(r);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Concatenates `[B, *]` matrices along columns.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map(|t| t.rows()).unwrap_or(0);
    if parts.iter().any(|t| t.rows() != rows) {
        return Err(Error::shape("concat_cols", "row counts differ"));
    }
    let width: usize = parts.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for t in parts {
            data.extend_from_slice(t.row(r));
        }
    }
    Tensor::matrix(rows, width, data)
}

/// Inverse of [`concat_cols`].
pub fn split_cols(t: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    if widths.iter().sum::<usize>() != t.cols() {
        return Err(Error::shape(
            "split_cols",
            "widths do not cover the columns",
        ));
    }
    let rows = t.rows();
    let mut out: Vec<Vec<f64>> = widths
        .iter()
        .map(|w| Vec::with_capacity(rows * w))
        .collect();
    for r in 0..rows {
        let row = t.row(r);
        let mut at = 0;
        for (buf, &w) in out.iter_mut().zip(widths) {
            buf.extend_from_slice(&row[at..at + w]);
            at += w;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &w)| Tensor::matrix(rows, w, d))
        .collect()
}

/// Intermediates of one gated recurrent step.
#[derive(Clone, Debug)]
pub struct GruCache {
    x: Tensor,
    h: Tensor,
    r: Tensor,
    z: Tensor,
    n: Tensor,
    /// `h W_hn^T + b_hn`, the recurrent part of the candidate.
    hn: Tensor,
}

/// Parameters of a gated recurrent cell; gate blocks are ordered
/// reset, update, candidate.
pub struct GruWeights<'a> {
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub b_ih: &'a Tensor,
    pub b_hh: &'a Tensor,
}

/// Gradient accumulators matching [`GruWeights`].
pub struct GruGrads<'a> {
    pub w_ih: &'a mut Tensor,
    pub w_hh: &'a mut Tensor,
    pub b_ih: &'a mut Tensor,
    pub b_hh: &'a mut Tensor,
}

/// One step of a gated recurrent cell:
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
pub fn gru_cell(x: &Tensor, h: &Tensor, w: &GruWeights) -> Result<(Tensor, GruCache)> {
    let hidden = h.cols();
    if w.w_hh.shape() != [3 * hidden, hidden] || w.w_ih.shape().first() != Some(&(3 * hidden)) {
        return Err(Error::shape(
            "gru_cell",
            format!(
                "hidden {hidden} vs w_ih {:?}, w_hh {:?}",
                w.w_ih.shape(),
                w.w_hh.shape()
            ),
        ));
    }
    if x.rows() != h.rows() {
        return Err(Error::shape("gru_cell", "input and hidden batch differ"));
    }
    let gi = affine(x, w.w_ih, w.b_ih)?;
    let gh = affine(h, w.w_hh, w.b_hh)?;
    let rows = x.rows();
    let mut r = Tensor::zeros(&[rows, hidden]);
    let mut z = Tensor::zeros(&[rows, hidden]);
    let mut n = Tensor::zeros(&[rows, hidden]);
    let mut hn = Tensor::zeros(&[rows, hidden]);
    let mut h_new = Tensor::zeros(&[rows, hidden]);
    let rows_out = r
        .data_mut()
        .chunks_exact_mut(hidden)
        .zip(z.data_mut().chunks_exact_mut(hidden))
        .zip(n.data_mut().chunks_exact_mut(hidden))
        .zip(hn.data_mut().chunks_exact_mut(hidden))
        .zip(h_new.data_mut().chunks_exact_mut(hidden));
    let rows_in = gi
        .data()
        .chunks_exact(3 * hidden)
        .zip(gh.data().chunks_exact(3 * hidden))
        .zip(h.data().chunks_exact(hidden));
    for (((((r, z), n), hn), h_new), ((gi, gh), hp)) in rows_out.zip(rows_in) {
        for j in 0..hidden {
            let rv = sigmoid_scalar(gi[j] + gh[j]);
            let zv = sigmoid_scalar(gi[hidden + j] + gh[hidden + j]);
            let hnv = gh[2 * hidden + j];
            let nv = (gi[2 * hidden + j] + rv * hnv).tanh();
            r[j] = rv;
            z[j] = zv;
            hn[j] = hnv;
            n[j] = nv;
            h_new[j] = (1.0 - zv) * nv + zv * hp[j];
        }
    }
    let h_new = checked(h_new, "gru_cell")?;
    Ok((
        h_new,
        GruCache {
            x: x.clone(),
            h: h.clone(),
            r,
            z,
            n,
            hn,
        },
    ))
}

/// Backward of [`gru_cell`]; returns `(dx, dh)`.
pub fn gru_cell_backward(
    cache: &GruCache,
    w: &GruWeights,
    g: GruGrads,
    dh_new: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let hidden = cache.h.cols();
    let rows = cache.h.rows();
    if dh_new.shape() != cache.h.shape() {
        return Err(Error::shape("gru_cell_backward", "gradient shape"));
    }
    let mut dgi = Tensor::zeros(&[rows, 3 * hidden]);
    let mut dgh = Tensor::zeros(&[rows, 3 * hidden]);
    let mut dh = Tensor::zeros(&[rows, hidden]);
    for b in 0..rows {
        for j in 0..hidden {
            let gout = dh_new.row(b)[j];
            let (rv, zv, nv, hnv) = (
                cache.r.row(b)[j],
                cache.z.row(b)[j],
                cache.n.row(b)[j],
                cache.hn.row(b)[j],
            );
            let hp = cache.h.row(b)[j];
            let dn = gout * (1.0 - zv);
            let dz = gout * (hp - nv);
            dh.row_mut(b)[j] = gout * zv;
            let dan = dn * (1.0 - nv * nv);
            let daz = dz * zv * (1.0 - zv);
            let dar = dan * hnv * rv * (1.0 - rv);
            let gi = dgi.row_mut(b);
            gi[j] = dar;
            gi[hidden + j] = daz;
            gi[2 * hidden + j] = dan;
            let gh = dgh.row_mut(b);
            gh[j] = dar;
            gh[hidden + j] = daz;
            gh[2 * hidden + j] = dan * rv;
        }
    }
    let dx = affine_backward_weight(&cache.x, w.w_ih, &dgi, g.w_ih)?;
    bias_backward(&dgi, g.b_ih)?;
    let dh_rec = affine_backward_weight(&cache.h, w.w_hh, &dgh, g.w_hh)?;
    bias_backward(&dgh, g.b_hh)?;
    dh.add_assign(&dh_rec)?;
    Ok((dx, dh))
}

/// How raw attention scores become edge weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalization {
    Softmax,
    /// Scores are used as weights directly.
    Raw,
}

/// Outputs of [`scaled_dot`].
#[derive(Clone, Debug)]
pub struct Attention {
    /// `[B, K]` edge weights.
    pub weights: Tensor,
    /// `[B, K * J]` per-neighbour weighted values `w_k v_k`.
    pub messages: Tensor,
    /// `[B, J]` sum of the messages.
    pub mixed: Tensor,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    q: Tensor,
    keys: Tensor,
    values: Tensor,
    weights: Tensor,
    k: usize,
    scale: f64,
    norm: ScoreNormalization,
}

/// Scaled dot-product attention of one query per batch row over `k` keys.
///
/// `q` is `[B, J]`; `keys` and `values` are `[B * k, J]` with the rows of
/// batch entry `b` at `b * k .. (b + 1) * k`.
pub fn scaled_dot(
    q: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    k: usize,
    scale: f64,
    norm: ScoreNormalization,
) -> Result<(Attention, AttentionCache)> {
    if k == 0 {
        return Err(Error::EmptyGraph);
    }
    let rows = q.rows();
    let j = q.cols();
    if keys.shape() != [rows * k, j] || values.shape() != [rows * k, j] {
        return Err(Error::shape(
            "scaled_dot",
            format!(
                "q {:?}, keys {:?}, values {:?}, k = {k}",
                q.shape(),
                keys.shape(),
                values.shape()
            ),
        ));
    }
    let mut scores = Tensor::zeros(&[rows, k]);
    for b in 0..rows {
        let qb = q.row(b);
        for i in 0..k {
            let kr = keys.row(b * k + i);
            scores.row_mut(b)[i] = qb.iter().zip(kr).map(|(a, c)| a * c).sum::<f64>() / scale;
        }
    }
    let weights = match norm {
        ScoreNormalization::Softmax => softmax_rows(&scores),
        ScoreNormalization::Raw => scores,
    };
    let mut messages = Tensor::zeros(&[rows, k * j]);
    let mut mixed = Tensor::zeros(&[rows, j]);
    for b in 0..rows {
        for i in 0..k {
            let w = weights.row(b)[i];
            let v = values.row(b * k + i);
            let m = &mut messages.row_mut(b)[i * j..(i + 1) * j];
            for (dst, &src) in m.iter_mut().zip(v) {
                *dst = w * src;
            }
            for (acc, &src) in mixed.row_mut(b).iter_mut().zip(v) {
                *acc += w * src;
            }
        }
    }
    let weights = checked(weights, "scaled_dot")?;
    let messages = checked(messages, "scaled_dot")?;
    let mixed = checked(mixed, "scaled_dot")?;
    Ok((
        Attention {
            weights: weights.clone(),
            messages,
            mixed,
        },
        AttentionCache {
            q: q.clone(),
            keys: keys.clone(),
            values: values.clone(),
            weights,
            k,
            scale,
            norm,
        },
    ))
}

/// Backward of [`scaled_dot`]; returns `(dq, dkeys, dvalues)`.
pub fn scaled_dot_backward(
    cache: &AttentionCache,
    d_weights: &Tensor,
    d_messages: &Tensor,
    d_mixed: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let rows = cache.q.rows();
    let j = cache.q.cols();
    let k = cache.k;
    if d_weights.shape() != [rows, k]
        || d_messages.shape() != [rows, k * j]
        || d_mixed.shape() != [rows, j]
    {
        return Err(Error::shape("scaled_dot_backward", "gradient shapes"));
    }
    let mut dw = d_weights.clone();
    let mut dvalues = Tensor::zeros(cache.values.shape());
    for b in 0..rows {
        let gm = d_mixed.row(b);
        for i in 0..k {
            let w = cache.weights.row(b)[i];
            let v = cache.values.row(b * k + i);
            let gmsg = &d_messages.row(b)[i * j..(i + 1) * j];
            let mut acc = 0.0;
            let dv = dvalues.row_mut(b * k + i);
            for c in 0..j {
                let g = gmsg[c] + gm[c];
                dv[c] = w * g;
                acc += v[c] * g;
            }
            dw.row_mut(b)[i] += acc;
        }
    }
    let dscores = match cache.norm {
        ScoreNormalization::Softmax => softmax_rows_backward(&cache.weights, &dw),
        ScoreNormalization::Raw => dw,
    };
    let mut dq = Tensor::zeros(cache.q.shape());
    let mut dkeys = Tensor::zeros(cache.keys.shape());
    for b in 0..rows {
        let qb = cache.q.row(b).to_vec();
        for i in 0..k {
            let ds = dscores.row(b)[i] / cache.scale;
            let kr = cache.keys.row(b * k + i).to_vec();
            for (dst, kv) in dq.row_mut(b).iter_mut().zip(&kr) {
                *dst += ds * kv;
            }
            for (dst, qv) in dkeys.row_mut(b * k + i).iter_mut().zip(&qb) {
                *dst = ds * qv;
            }
        }
    }
    Ok((dq, dkeys, dvalues))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Relative error between analytic and central-difference gradients of
    /// `loss` with respect to `x`.
    fn fd_error(x: &mut Tensor, analytic: &Tensor, mut loss: impl FnMut(&Tensor) -> f64) -> f64 {
        let h = 1e-4;
        let mut numeric = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + h;
            let up = loss(x);
            x.data_mut()[i] = orig - h;
            let down = loss(x);
            x.data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * h);
        }
        let mut diff = numeric.clone();
        diff.scale(-1.0);
        diff.add_assign(analytic).unwrap();
        diff.l2_norm() / numeric.l2_norm().max(analytic.l2_norm()).max(1e-12)
    }

    fn weighted_sum(y: &Tensor, c: &Tensor) -> f64 {
        y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn identity_affine() {
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 4] = 1.0;
        }
        let x = Tensor::row_vector(vec![1.0, -2.0, 3.5]);
        assert_eq!(affine(&x, &w, &Tensor::zeros(&[3])).unwrap(), x);
    }

    #[test]
    fn affine_shape_error() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            affine(&x, &w, &Tensor::zeros(&[2])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn bias_gradient_of_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 4], &mut rng);
        let w = random(&[3, 4], &mut rng);
        let dy = Tensor::filled(&[1, 3], 1.0);
        let mut dw = Tensor::zeros(&[3, 4]);
        let mut db = Tensor::zeros(&[3]);
        affine_backward_weight(&x, &w, &dy, &mut dw).unwrap();
        bias_backward(&dy, &mut db).unwrap();
        assert_eq!(db.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = random(&[8, 8], &mut rng);
        let mut w = random(&[8, 8], &mut rng);
        let mut b = random(&[8], &mut rng);
        let c = random(&[8, 8], &mut rng);
        let mut dw = Tensor::zeros(&[8, 8]);
        let mut db = Tensor::zeros(&[8]);
        let dx = affine_backward_weight(&x, &w, &c, &mut dw).unwrap();
        bias_backward(&c, &mut db).unwrap();
        let (w0, b0, x0) = (w.clone(), b.clone(), x.clone());
        assert!(
            fd_error(&mut x, &dx, |x| weighted_sum(
                &affine(x, &w0, &b0).unwrap(),
                &c
            )) < 1e-4
        );
        assert!(
            fd_error(&mut w, &dw, |w| weighted_sum(
                &affine(&x0, w, &b0).unwrap(),
                &c
            )) < 1e-4
        );
        assert!(
            fd_error(&mut b, &db, |b| weighted_sum(
                &affine(&x0, &w0, b).unwrap(),
                &c
            )) < 1e-4
        );
    }

    #[test]
    fn activations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random(&[4, 5], &mut rng);
        let c = random(&[4, 5], &mut rng);
        let y = tanh(&x);
        assert!(
            fd_error(&mut x, &tanh_backward(&y, &c), |x| weighted_sum(
                &tanh(x),
                &c
            )) < 1e-4
        );
        let y = sigmoid(&x);
        assert!(
            fd_error(&mut x, &sigmoid_backward(&y, &c), |x| weighted_sum(
                &sigmoid(x),
                &c
            )) < 1e-4
        );
        let g = elu_backward(&x, &c);
        assert!(fd_error(&mut x, &g, |x| weighted_sum(&elu(x), &c)) < 1e-4);
        let g = abs_backward(&x, &c);
        assert!(fd_error(&mut x, &g, |x| weighted_sum(&abs(x), &c)) < 1e-4);
        let g = relu_backward(&x, &c);
        assert!(fd_error(&mut x, &g, |x| weighted_sum(&relu(x), &c)) < 1e-4);
        let y = softmax_rows(&x);
        let g = softmax_rows_backward(&y, &c);
        assert!(fd_error(&mut x, &g, |x| weighted_sum(&softmax_rows(x), &c)) < 1e-4);
    }

    #[test]
    fn split_inverts_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[3, 2], &mut rng);
        let b = random(&[3, 5], &mut rng);
        let cat = concat_cols(&[&a, &b]).unwrap();
        let parts = split_cols(&cat, &[2, 5]).unwrap();
        assert_eq!(parts, vec![a, b]);
    }

    fn gru_params(rng: &mut ChaCha8Rng, i: usize, h: usize) -> [Tensor; 4] {
        [
            random(&[3 * h, i], rng),
            random(&[3 * h, h], rng),
            random(&[3 * h], rng),
            random(&[3 * h], rng),
        ]
    }

    #[test]
    fn gru_zero_everything_is_zero() {
        let z = |s: &[usize]| Tensor::zeros(s);
        let (w_ih, w_hh, b_ih, b_hh) = (z(&[6, 3]), z(&[6, 2]), z(&[6]), z(&[6]));
        let w = GruWeights {
            w_ih: &w_ih,
            w_hh: &w_hh,
            b_ih: &b_ih,
            b_hh: &b_hh,
        };
        let (h, _) = gru_cell(&z(&[1, 3]), &z(&[1, 2]), &w).unwrap();
        assert_eq!(h, z(&[1, 2]));
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (i, hd, bsz) = (5, 4, 3);
        let [w_ih, w_hh, b_ih, b_hh] = gru_params(&mut rng, i, hd);
        let mut x = random(&[bsz, i], &mut rng);
        let mut h = random(&[bsz, hd], &mut rng);
        let c = random(&[bsz, hd], &mut rng);
        let w = GruWeights {
            w_ih: &w_ih,
            w_hh: &w_hh,
            b_ih: &b_ih,
            b_hh: &b_hh,
        };
        let (_, cache) = gru_cell(&x, &h, &w).unwrap();
        let mut g = [
            Tensor::zeros(w_ih.shape()),
            Tensor::zeros(w_hh.shape()),
            Tensor::zeros(b_ih.shape()),
            Tensor::zeros(b_hh.shape()),
        ];
        let [g0, g1, g2, g3] = &mut g;
        let (dx, dh) = gru_cell_backward(
            &cache,
            &w,
            GruGrads {
                w_ih: g0,
                w_hh: g1,
                b_ih: g2,
                b_hh: g3,
            },
            &c,
        )
        .unwrap();
        let h0 = h.clone();
        let x0 = x.clone();
        assert!(
            fd_error(&mut x, &dx, |x| weighted_sum(
                &gru_cell(x, &h0, &w).unwrap().0,
                &c
            )) < 1e-4
        );
        assert!(
            fd_error(&mut h, &dh, |h| weighted_sum(
                &gru_cell(&x0, h, &w).unwrap().0,
                &c
            )) < 1e-4
        );
        let mut p = w_ih.clone();
        let e = fd_error(&mut p, &g[0], |p| {
            let w = GruWeights {
                w_ih: p,
                w_hh: &w_hh,
                b_ih: &b_ih,
                b_hh: &b_hh,
            };
            weighted_sum(&gru_cell(&x0, &h0, &w).unwrap().0, &c)
        });
        assert!(e < 1e-4, "{e}");
        let mut p = w_hh.clone();
        let e = fd_error(&mut p, &g[1], |p| {
            let w = GruWeights {
                w_ih: &w_ih,
                w_hh: p,
                b_ih: &b_ih,
                b_hh: &b_hh,
            };
            weighted_sum(&gru_cell(&x0, &h0, &w).unwrap().0, &c)
        });
        assert!(e < 1e-4, "{e}");
        let mut p = b_hh.clone();
        let e = fd_error(&mut p, &g[3], |p| {
            let w = GruWeights {
                w_ih: &w_ih,
                w_hh: &w_hh,
                b_ih: &b_ih,
                b_hh: p,
            };
            weighted_sum(&gru_cell(&x0, &h0, &w).unwrap().0, &c)
        });
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn gru_two_steps_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let [w_ih, w_hh, b_ih, b_hh] = gru_params(&mut rng, 2, 3);
        let w = GruWeights {
            w_ih: &w_ih,
            w_hh: &w_hh,
            b_ih: &b_ih,
            b_hh: &b_hh,
        };
        let x1 = random(&[1, 2], &mut rng);
        let x2 = random(&[1, 2], &mut rng);
        let h0 = Tensor::zeros(&[1, 3]);
        let (h1, _) = gru_cell(&x1, &h0, &w).unwrap();
        let (h2, _) = gru_cell(&x2, &h1, &w).unwrap();
        let (h1b, _) = gru_cell(&x1, &h0, &w).unwrap();
        let (h2b, _) = gru_cell(&x2, &h1b, &w).unwrap();
        assert_eq!(h2, h2b);
        assert!(h2.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random(&[1, 4], &mut rng);
        let key = random(&[1, 4], &mut rng);
        let mut keys = Vec::new();
        for _ in 0..3 {
            keys.extend_from_slice(key.data());
        }
        let keys = Tensor::matrix(3, 4, keys).unwrap();
        let values = random(&[3, 4], &mut rng);
        let (att, _) = scaled_dot(&q, &keys, &values, 3, 2.0, ScoreNormalization::Softmax).unwrap();
        for &w in att.weights.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_graph_is_rejected() {
        let q = Tensor::zeros(&[1, 4]);
        let e = Tensor::zeros(&[0, 4]);
        assert!(matches!(
            scaled_dot(&q, &e, &e, 0, 2.0, ScoreNormalization::Softmax),
            Err(Error::EmptyGraph)
        ));
    }

    #[test]
    fn scaled_dot_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for norm in [ScoreNormalization::Softmax, ScoreNormalization::Raw] {
            let (bsz, k, j) = (2, 3, 5);
            let mut q = random(&[bsz, j], &mut rng);
            let mut keys = random(&[bsz * k, j], &mut rng);
            let mut values = random(&[bsz * k, j], &mut rng);
            let cw = random(&[bsz, k], &mut rng);
            let cm = random(&[bsz, k * j], &mut rng);
            let cx = random(&[bsz, j], &mut rng);
            let loss = |q: &Tensor, keys: &Tensor, values: &Tensor| {
                let (a, _) = scaled_dot(q, keys, values, k, 5f64.sqrt(), norm).unwrap();
                weighted_sum(&a.weights, &cw)
                    + weighted_sum(&a.messages, &cm)
                    + weighted_sum(&a.mixed, &cx)
            };
            let (att, cache) = scaled_dot(&q, &keys, &values, k, 5f64.sqrt(), norm).unwrap();
            let s: f64 = att.weights.row(0).iter().sum();
            if norm == ScoreNormalization::Softmax {
                assert!((s - 1.0).abs() < 1e-12);
            }
            let (dq, dk, dv) = scaled_dot_backward(&cache, &cw, &cm, &cx).unwrap();
            let (q0, k0, v0) = (q.clone(), keys.clone(), values.clone());
            assert!(fd_error(&mut q, &dq, |q| loss(q, &k0, &v0)) < 1e-4);
            assert!(fd_error(&mut keys, &dk, |k| loss(&q0, k, &v0)) < 1e-4);
            assert!(fd_error(&mut values, &dv, |v| loss(&q0, &k0, v)) < 1e-4);
        }
    }
}
