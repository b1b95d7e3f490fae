//! Dense row-major `f64` tensors and the raw numeric kernels the autodiff
//! graph is built on.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NapError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NapError::contract(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NapError::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// i.i.d. standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Leading extent, treated as the batch axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all non-leading extents.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Extent of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let n = self.shape[1];
        self.data[i * n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Frobenius / ℓ2 norm of the flattened buffer.
    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(NapError::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(NapError::shape("transpose2", &self.shape, &[2]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// ‖self − other‖ / max(‖other‖, tiny)
    pub fn rel_diff(&self, other: &Tensor) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / other.norm().max(f64::MIN_POSITIVE)
    }
}

// ── kernels ──────────────────────────────────────────────────────────

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(NapError::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// aᵀ·b without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[0] != b.shape[0] {
        return Err(NapError::shape("matmul_tn", &a.shape, &b.shape));
    }
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a.data[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// a·bᵀ without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[1] {
        return Err(NapError::shape("matmul_nt", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

fn conv_dims(x: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.ndim() != 4 || kernel.ndim() != 4 {
        return Err(NapError::shape("conv2d", &x.shape, &kernel.shape));
    }
    let (b, cin, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, kcin, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if kcin != cin || kh != kw || kh % 2 == 0 {
        return Err(NapError::shape("conv2d", &x.shape, &kernel.shape));
    }
    let _ = (h, w);
    Ok((b, cin, cout, h, w, kh))
}

/// Same-padding, stride-1 direct convolution (cross-correlation).
pub fn conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (b, cin, cout, h, w, k) = conv_dims(x, kernel)?;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; b * cout * h * w];
    for n in 0..b {
        for co in 0..cout {
            for ci in 0..cin {
                for ki in 0..k {
                    for kj in 0..k {
                        let kv = kernel.data[((co * cin + ci) * k + ki) * k + kj];
                        if kv == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            let si = i as isize + ki as isize - pad;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..w {
                                let sj = j as isize + kj as isize - pad;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                out[((n * cout + co) * h + i) * w + j] += kv
                                    * x.data[((n * cin + ci) * h + si as usize) * w + sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, h, w], out)
}

/// Returns (∂L/∂x, ∂L/∂kernel) given upstream gradient `g` of conv2d(x, kernel).
pub fn conv2d_backward(x: &Tensor, kernel: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, cin, cout, h, w, k) = conv_dims(x, kernel)?;
    let pad = (k / 2) as isize;
    let mut gx = vec![0.0; x.numel()];
    let mut gk = vec![0.0; kernel.numel()];
    for n in 0..b {
        for co in 0..cout {
            for ci in 0..cin {
                for ki in 0..k {
                    for kj in 0..k {
                        let kidx = ((co * cin + ci) * k + ki) * k + kj;
                        let kv = kernel.data[kidx];
                        let mut acc = 0.0;
                        for i in 0..h {
                            let si = i as isize + ki as isize - pad;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..w {
                                let sj = j as isize + kj as isize - pad;
                                if sj < 0 || sj >= w as isize {
                                    continue;
                                }
                                let gv = g.data[((n * cout + co) * h + i) * w + j];
                                let xidx = ((n * cin + ci) * h + si as usize) * w + sj as usize;
                                acc += gv * x.data[xidx];
                                gx[xidx] += gv * kv;
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape.clone(), gx)?,
        Tensor::new(kernel.shape.clone(), gk)?,
    ))
}

/// 2×2 stride-2 max pooling over [b, c, H, W]; odd trailing rows/cols are
/// dropped. Returns the pooled tensor and the flat argmax source index of
/// every output cell (first maximum wins ties).
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.ndim() != 4 || x.shape[2] < 2 || x.shape[3] < 2 {
        return Err(NapError::shape("max_pool2", &x.shape, &[4]));
    }
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    out.push(x.data[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, arg))
}

/// Row-wise ℓ2 normalization `y = s·h / max(‖h‖, eps)` along the last axis. Returns the output and the per-row clamped norms.
pub fn rms_rows(h: &Tensor, eps: f64, gain: f64) -> (Tensor, Vec<f64>) {
    let n = h.last_dim();
    let mut out = h.data.clone();
    let mut norms = Vec::with_capacity(h.numel() / n);
    for row in out.chunks_mut(n) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        let inv = gain / norm;
        row.iter_mut().for_each(|v| *v *= inv);
        norms.push(norm);
    }
    (
        Tensor {
            shape: h.shape.clone(),
            data: out,
        },
        norms,
    )
}

/// Vector-Jacobian product of [`rms_rows`]: for ‖h‖ > eps this applies
/// J = (I − ĥĥᵀ)/‖h‖ (J is symmetric); below eps the map is linear h/eps.
pub fn rms_rows_backward(h: &Tensor, norms: &[f64], g: &Tensor, eps: f64, gain: f64) -> Tensor {
    let n = h.last_dim();
    let mut out = vec![0.0; h.numel()];
    for (r, &norm) in norms.iter().enumerate() {
        let hr = &h.data[r * n..(r + 1) * n];
        let gr = &g.data[r * n..(r + 1) * n];
        let or = &mut out[r * n..(r + 1) * n];
        let raw_norm = hr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if raw_norm > eps {
            let hg: f64 = hr.iter().zip(gr).map(|(a, b)| a * b).sum();
            let c = hg / (norm * norm);
            for i in 0..n {
                or[i] = gain * (gr[i] - hr[i] * c) / norm;
            }
        } else {
            for i in 0..n {
                or[i] = gain * gr[i] / eps;
            }
        }
    }
    Tensor {
        shape: h.shape.clone(),
        data: out,
    }
}

/// Subtracts each row's mean.
pub fn center_rows(h: &Tensor) -> Tensor {
    let n = h.last_dim();
    let mut out = h.data.clone();
    for row in out.chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    Tensor {
        shape: h.shape.clone(),
        data: out,
    }
}

/// Numerically stable row-wise softmax of a 2-D tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let n = logits.last_dim();
    let mut out = logits.data.clone();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor {
        shape: logits.shape.clone(),
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_orthogonal() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let r = Tensor::from_rows(&[&[1.0, 0.0]]);
        let c = Tensor::from_rows(&[&[0.0], &[5.0]]);
        assert_eq!(matmul(&r, &c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert_eq!(
            err,
            NapError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = crate::rng::seeded(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let c = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let tn = matmul(&a.transpose2().unwrap(), &b).unwrap();
        assert!(matmul_tn(&a, &b).unwrap().max_abs_diff(&tn) < 1e-14);
        let nt = matmul(&a, &c.transpose2().unwrap()).unwrap();
        assert!(matmul_nt(&a, &c).unwrap().max_abs_diff(&nt) < 1e-14);
    }

    #[test]
    fn new_rejects_bad_length_and_zero_extent() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn rms_rows_examples() {
        let (y, _) = rms_rows(&Tensor::vector(vec![3.0, 4.0]).reshape(&[1, 2]).unwrap(), 1e-8, 1.0);
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let (z, _) = rms_rows(&Tensor::zeros(&[1, 2]), 1e-8, 1.0);
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn conv_one_by_one_is_scalar_multiply() {
        let mut rng = crate::rng::seeded(1);
        let x = Tensor::randn(&[2, 1, 3, 3], 1.0, &mut rng);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert!(y.max_abs_diff(&x.scaled(2.0)) < 1e-15);
        let zero = conv2d(&x, &Tensor::zeros(&[4, 1, 3, 3])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let err = conv2d(&Tensor::zeros(&[1, 2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(err, Err(NapError::Shape { .. })));
    }

    #[test]
    fn max_pool_picks_max() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![1]);
    }
}
