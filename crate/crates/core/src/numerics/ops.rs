//! Forward and backward kernels.
//!
//! Slice-level functions (`gemm*`, `*_rows`) are what the model uses on its hot
//! path; the `Tensor` wrappers validate shapes and finiteness at the boundary.
//! All reductions accumulate sequentially in index order so results are
//! bit-reproducible.

use super::tensor::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Epsilon inside layer-norm denominators.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `out[m×n] (+)= a[m×k] · b[k×n]`.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if !accumulate {
        out.fill(0.0);
    }
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub fn gemm_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] (+)= g · bᵀ` for `g[m×n]`, `b[k×n]`.
pub fn gemm_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], accumulate: bool) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            if accumulate {
                out[i * k + p] += acc;
            } else {
                out[i * k + p] = acc;
            }
        }
    }
}

/// Standard matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions differ: [{m}x{k}] · [{k2}x{n}]"
        )));
    }
    a.check_finite("matmul lhs")?;
    b.check_finite("matmul rhs")?;
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), m, k, n, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gradients of `matmul(a, b)` with respect to both inputs.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if b.shape() != [k, n] || grad_out.shape() != [m, n] {
        return Err(Error::Dimension(format!(
            "matmul_backward shapes {:?}, {:?}, grad {:?}",
            a.shape(),
            b.shape(),
            grad_out.shape()
        )));
    }
    let mut ga = vec![0.0; m * k];
    gemm_a_bt(grad_out.data(), b.data(), m, k, n, &mut ga, false);
    let mut gb = vec![0.0; k * n];
    gemm_at_b(a.data(), grad_out.data(), m, k, n, &mut gb);
    Ok((Tensor::from_parts(vec![m, k], ga), Tensor::from_parts(vec![k, n], gb)))
}

/// In-place stable log-softmax of one row.
pub fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in z {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Row-wise log-softmax over the last dimension.
pub fn log_softmax(z: &Tensor) -> Result<Tensor> {
    let v = z.last_dim();
    if v < 2 {
        return Err(Error::Dimension(format!(
            "log_softmax needs a last dimension of at least 2, got {v}"
        )));
    }
    z.check_finite("log_softmax input")?;
    let mut out = vec![0.0; z.len()];
    for (zr, or) in z.data().chunks_exact(v).zip(out.chunks_exact_mut(v)) {
        log_softmax_row(zr, or);
    }
    Ok(Tensor::from_parts(z.shape().to_vec(), out))
}

/// Backward of log-softmax given its output: `dz = g - softmax · Σg`.
pub fn log_softmax_backward(log_probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if log_probs.shape() != grad_out.shape() {
        return Err(Error::Dimension("log_softmax_backward shape mismatch".into()));
    }
    let v = log_probs.last_dim();
    let mut out = vec![0.0; log_probs.len()];
    for ((lp, g), o) in log_probs
        .data()
        .chunks_exact(v)
        .zip(grad_out.data().chunks_exact(v))
        .zip(out.chunks_exact_mut(v))
    {
        let gsum: f64 = g.iter().sum();
        for j in 0..v {
            o[j] = g[j] - lp[j].exp() * gsum;
        }
    }
    Ok(Tensor::from_parts(log_probs.shape().to_vec(), out))
}

/// Saved activations of a layer norm over `rows × dim`.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Layer norm of each row followed by the affine `gamma`, `beta`.
pub fn layer_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64], dim: usize, out: &mut [f64]) -> LayerNormCache {
    let rows = x.len() / dim;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            out[r * dim + j] = h * gamma[j] + beta[j];
        }
    }
    LayerNormCache { xhat, rstd }
}

/// Backward of [`layer_norm_rows`]; accumulates into `dx`, `dgamma`, `dbeta`.
pub fn layer_norm_rows_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &[f64],
    dim: usize,
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let rows = dy.len() / dim;
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let g = &dy[r * dim..(r + 1) * dim];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..dim {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= dim as f64;
        mean_dxhat_xhat /= dim as f64;
        let rs = cache.rstd[r];
        for j in 0..dim {
            dx[r * dim + j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

/// Output of [`layer_norm`].
#[derive(Debug, Clone)]
pub struct LayerNormOutput {
    pub y: Tensor,
    pub cache: LayerNormCache,
}

/// Layer norm over the last dimension of a `[rows × dim]` tensor.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<LayerNormOutput> {
    let dim = x.last_dim();
    if gamma.shape() != [dim] || beta.shape() != [dim] {
        return Err(Error::Dimension(format!(
            "layer_norm affine shapes {:?}/{:?} do not match dim {dim}",
            gamma.shape(),
            beta.shape()
        )));
    }
    x.check_finite("layer_norm input")?;
    let mut out = vec![0.0; x.len()];
    let cache = layer_norm_rows(x.data(), gamma.data(), beta.data(), dim, &mut out);
    Ok(LayerNormOutput {
        y: Tensor::from_parts(x.shape().to_vec(), out),
        cache,
    })
}

/// Gradients `(dx, dgamma, dbeta)` of [`layer_norm`].
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dim = grad_out.last_dim();
    if gamma.shape() != [dim] || cache.xhat.len() != grad_out.len() {
        return Err(Error::Dimension("layer_norm_backward shape mismatch".into()));
    }
    let mut dx = vec![0.0; grad_out.len()];
    let mut dg = vec![0.0; dim];
    let mut db = vec![0.0; dim];
    layer_norm_rows_backward(cache, gamma.data(), grad_out.data(), dim, &mut dx, &mut dg, &mut db);
    Ok((
        Tensor::from_parts(grad_out.shape().to_vec(), dx),
        Tensor::from_parts(vec![dim], dg),
        Tensor::from_parts(vec![dim], db),
    ))
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.check_finite("gelu input")?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| gelu_scalar(v)).collect(),
    ))
}

pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Dimension("gelu_backward shape mismatch".into()));
    }
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| g * gelu_grad_scalar(v))
            .collect(),
    ))
}

/// Gathers rows of a `[vocab × dim]` table.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (vocab, dim) = table.dims2()?;
    if ids.is_empty() {
        return Err(Error::Dimension("embedding_lookup needs at least one id".into()));
    }
    let mut out = Vec::with_capacity(ids.len() * dim);
    for (pos, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::Input(format!(
                "embedding id {id} at position {pos} is outside the table of {vocab} rows"
            )));
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), dim], out))
}

/// Gradient of [`embedding_lookup`] with respect to the table; repeated ids accumulate.
pub fn embedding_backward(ids: &[usize], grad_out: &Tensor, vocab: usize) -> Result<Tensor> {
    let (n, dim) = grad_out.dims2()?;
    if n != ids.len() {
        return Err(Error::Dimension("embedding_backward length mismatch".into()));
    }
    let mut table = vec![0.0; vocab * dim];
    for (i, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(Error::Input(format!("embedding id {id} out of range")));
        }
        for (t, g) in table[id * dim..(id + 1) * dim].iter_mut().zip(grad_out.row(i)) {
            *t += g;
        }
    }
    check_finite(&table, "embedding gradient")?;
    Ok(Tensor::from_parts(vec![vocab, dim], table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Weighted sum of the output so every output entry receives a distinct upstream gradient.
    fn probe(out: &Tensor, weights: &Tensor) -> f64 {
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn matmul_identity_and_manual_case() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &x).unwrap(), x);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = random(&[3, 4], &mut rng);
            let b = random(&[4, 2], &mut rng);
            let w = random(&[3, 2], &mut rng);
            let err_a = grad_check(
                |x: &Tensor| {
                    let out = matmul(x, &b)?;
                    let (ga, _) = matmul_backward(x, &b, &w)?;
                    Ok((probe(&out, &w), ga))
                },
                &a,
                1e-4,
            )
            .unwrap();
            let err_b = grad_check(
                |x: &Tensor| {
                    let out = matmul(&a, x)?;
                    let (_, gb) = matmul_backward(&a, x, &w)?;
                    Ok((probe(&out, &w), gb))
                },
                &b,
                1e-4,
            )
            .unwrap();
            assert!(err_a.max_rel_error <= 1e-6, "{err_a:?}");
            assert!(err_b.max_rel_error <= 1e-6, "{err_b:?}");
        }
    }

    #[test]
    fn log_softmax_cases() {
        let z = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let lp = log_softmax(&z).unwrap();
        for &v in lp.data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
        let big = log_softmax(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!(big.data().iter().all(|v| v.is_finite()));
        assert!(big.data()[0].abs() < 1e-300 || big.data()[0] == 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let row = random(&[1, 17], &mut rng);
            let scaled = Tensor::new(vec![1, 17], row.data().iter().map(|v| v * 20.0).collect()).unwrap();
            let lp = log_softmax(&scaled).unwrap();
            let s: f64 = lp.data().iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert!(log_softmax(&Tensor::new(vec![1], vec![0.0]).unwrap()).is_err());
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        let mut t = Tensor::zeros(&[3]);
        t.data_mut()[1] = f64::NAN;
        assert!(matches!(log_softmax(&t), Err(Error::Numeric(_))));
    }

    #[test]
    fn log_softmax_backward_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&[2, 5], &mut rng);
        let z = random(&[2, 5], &mut rng);
        let r = grad_check(
            |x: &Tensor| {
                let lp = log_softmax(x)?;
                Ok((probe(&lp, &w), log_softmax_backward(&lp, &w)?))
            },
            &z,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::new(vec![1, 4], vec![2.5; 4]).unwrap();
        let g = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let b = Tensor::zeros(&[4]);
        let out = layer_norm(&x, &g, &b).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_backward_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 6], &mut rng);
        let gamma = random(&[6], &mut rng);
        let beta = random(&[6], &mut rng);
        let w = random(&[3, 6], &mut rng);
        let rx = grad_check(
            |x: &Tensor| {
                let out = layer_norm(x, &gamma, &beta)?;
                let (dx, _, _) = layer_norm_backward(&out.cache, &gamma, &w)?;
                Ok((probe(&out.y, &w), dx))
            },
            &x,
            1e-4,
        )
        .unwrap();
        let rg = grad_check(
            |g: &Tensor| {
                let out = layer_norm(&x, g, &beta)?;
                let (_, dg, _) = layer_norm_backward(&out.cache, g, &w)?;
                Ok((probe(&out.y, &w), dg))
            },
            &gamma,
            1e-4,
        )
        .unwrap();
        let rb = grad_check(
            |b: &Tensor| {
                let out = layer_norm(&x, &gamma, b)?;
                let (_, _, db) = layer_norm_backward(&out.cache, &gamma, &w)?;
                Ok((probe(&out.y, &w), db))
            },
            &beta,
            1e-4,
        )
        .unwrap();
        for r in [rx, rg, rb] {
            assert!(r.max_rel_error <= 1e-5, "{r:?}");
        }
    }

    #[test]
    fn gelu_zero_and_fd() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[10], &mut rng);
        let w = random(&[10], &mut rng);
        let r = grad_check(|x: &Tensor| Ok((probe(&gelu(x)?, &w), gelu_backward(x, &w)?)), &x, 1e-4).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn embedding_grad_accumulates_repeated_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = random(&[5, 3], &mut rng);
        let ids = [1usize, 3, 1, 1, 0];
        let w = random(&[5, 3], &mut rng);
        let r = grad_check(
            |t: &Tensor| {
                let out = embedding_lookup(t, &ids)?;
                Ok((probe(&out, &w), embedding_backward(&ids, &w, 5)?))
            },
            &table,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        let g = embedding_backward(&ids, &w, 5).unwrap();
        let expected: f64 = w.row(0)[0] + w.row(2)[0] + w.row(3)[0];
        assert_eq!(g.row(1)[0], expected);
        assert!(g.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = Tensor::zeros(&[4, 2]);
        assert!(matches!(embedding_lookup(&table, &[4]), Err(Error::Input(_))));
    }

    #[test]
    fn kernels_are_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = random(&[8, 8], &mut rng);
        let b = random(&[8, 8], &mut rng);
        assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        assert_eq!(log_softmax(&a).unwrap(), log_softmax(&a).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn log_softmax_rows_are_distributions(row in proptest::collection::vec(-1e3f64..1e3, 2..40)) {
            let z = Tensor::new(vec![1, row.len()], row).unwrap();
            let lp = log_softmax(&z).unwrap();
            let sum: f64 = lp.data().iter().map(|v| v.exp()).sum();
            proptest::prop_assert!((sum - 1.0).abs() <= 1e-12, "sum {}", sum);
            proptest::prop_assert!(lp.data().iter().all(|v| *v <= 0.0));
        }
    }
}
