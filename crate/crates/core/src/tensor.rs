//! Dense row-major f64 tensors.
//!
//! Everything in the pipeline runs in 64-bit floats with fixed summation
//! orders, so identical inputs produce bit-identical outputs across runs.

use crate::error::{CoreError, Result};

/// Dense tensor: `shape` lists dimension sizes, `data` is row-major.
/// A rank-0 tensor (empty shape) is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Checked constructor: shape must match data length and data must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(CoreError::shape(
                "Tensor::new",
                format!("shape {:?} expects {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                path: "Tensor::new".into(),
                detail: format!("element {} is {}", i, data[i]),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Unchecked constructor for internal kernels (shape/data length must agree).
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(CoreError::shape(
                "scalar_value",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count (row-major).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(CoreError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    fn dims2(&self, context: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(CoreError::shape(context, format!("expected matrix, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn dims3(&self, context: &'static str) -> Result<(usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(CoreError::shape(context, format!("expected rank-3, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Matrix product with fixed left-to-right accumulation over the inner axis.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = other.dims2("matmul rhs")?;
        if k != k2 {
            return Err(CoreError::shape(
                "matmul",
                format!("inner dims disagree: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        // i-k-j order: for each output element the k-sum still runs left to right,
        // so results are bit-identical to the naive triple loop.
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let crow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &other.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    crow[j] += aik * brow[j];
                }
            }
        }
        Ok(Tensor::from_raw(vec![m, n], out))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_raw(vec![n, m], out))
    }

    fn binary(&self, other: &Tensor, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            Ok(Tensor::from_raw(self.shape.clone(), data))
        } else if other.is_scalar() {
            let b = other.data[0];
            let data = self.data.iter().map(|&a| f(a, b)).collect();
            Ok(Tensor::from_raw(self.shape.clone(), data))
        } else if self.is_scalar() {
            let a = self.data[0];
            let data = other.data.iter().map(|&b| f(a, b)).collect();
            Ok(Tensor::from_raw(other.shape.clone(), data))
        } else {
            Err(CoreError::shape(
                context,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ))
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Copy with one element shifted by `delta` (finite-difference probes).
    pub fn perturbed(&self, index: usize, delta: f64) -> Tensor {
        let mut out = self.clone();
        out.data[index] += delta;
        out
    }

    /// Elementwise combine with an identically shaped tensor.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(CoreError::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    /// Sum of all elements, left-to-right.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CoreError::shape(
                "dot",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }

    /// Sum over the given axes (sorted, unique); reduced axes are removed.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        for &a in axes {
            if a >= self.rank() {
                return Err(CoreError::shape("sum_axes", format!("axis {} of {:?}", a, self.shape)));
            }
        }
        let keep: Vec<usize> = (0..self.rank()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&d| self.shape[d]).collect();
        let mut out = vec![0.0; numel(&out_shape)];
        let strides = row_major_strides(&self.shape);
        let out_strides = row_major_strides(&out_shape);
        let mut idx = vec![0usize; self.rank()];
        for (flat, &v) in self.data.iter().enumerate() {
            unflatten(flat, &strides, &mut idx);
            let mut o = 0;
            for (pos, &d) in keep.iter().enumerate() {
                o += idx[d] * out_strides[pos];
            }
            out[o] += v;
        }
        Ok(Tensor::from_raw(out_shape, out))
    }

    /// Inverse of `sum_axes`: tile `self` up to `target_shape`, where `axes`
    /// names the target dimensions not present in `self`.
    pub fn broadcast_axes(&self, target_shape: &[usize], axes: &[usize]) -> Result<Tensor> {
        let keep: Vec<usize> = (0..target_shape.len()).filter(|d| !axes.contains(d)).collect();
        let expect: Vec<usize> = keep.iter().map(|&d| target_shape[d]).collect();
        if expect != self.shape {
            return Err(CoreError::shape(
                "broadcast_axes",
                format!("{:?} cannot broadcast to {:?} inserting axes {:?}", self.shape, target_shape, axes),
            ));
        }
        let mut out = vec![0.0; numel(target_shape)];
        let t_strides = row_major_strides(target_shape);
        let s_strides = row_major_strides(&self.shape);
        let mut idx = vec![0usize; target_shape.len()];
        for (flat, slot) in out.iter_mut().enumerate() {
            unflatten(flat, &t_strides, &mut idx);
            let mut s = 0;
            for (pos, &d) in keep.iter().enumerate() {
                s += idx[d] * s_strides[pos];
            }
            *slot = self.data[s];
        }
        Ok(Tensor::from_raw(target_shape.to_vec(), out))
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn unflatten(mut flat: usize, strides: &[usize], idx: &mut [usize]) {
    for (d, &s) in strides.iter().enumerate() {
        idx[d] = flat / s;
        flat %= s;
    }
}

// ---------------------------------------------------------------------------
// Structured kernels used by the model: spatial graph mixing and per-node
// temporal convolution. All take/return [P, L, C] feature blocks.
// ---------------------------------------------------------------------------

/// out[p, l, :] = sum_q adj[p, q] * (x[q, l, :] @ w); computed as two matrix
/// products: first mix channels (x @ w), then mix nodes (adj @ ...).
pub fn spatial_conv(x: &Tensor, adj: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (p, l, c_in) = x.dims3("spatial_conv input")?;
    let (pa, pb) = adj.dims2("spatial_conv adjacency")?;
    let (wc_in, c_out) = w.dims2("spatial_conv weight")?;
    if pa != p || pb != p {
        return Err(CoreError::shape(
            "spatial_conv",
            format!("adjacency {:?} does not match {} nodes", adj.shape(), p),
        ));
    }
    if wc_in != c_in {
        return Err(CoreError::shape(
            "spatial_conv",
            format!("weight {:?} does not match {} input channels", w.shape(), c_in),
        ));
    }
    let xw = x.reshaped(vec![p * l, c_in])?.matmul(w)?; // [P*L, Cout]
    let mixed = adj.matmul(&xw.reshaped(vec![p, l * c_out])?)?;
    mixed.reshaped(vec![p, l, c_out])
}

/// Gradient of `spatial_conv` with respect to `w`, given upstream gradient g.
/// dW = (adj @ X)^T-contracted with g over nodes and time.
pub fn spatial_conv_w_grad(x: &Tensor, adj: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (p, l, c_in) = x.dims3("spatial_conv_w_grad input")?;
    let (_, _, c_out) = g.dims3("spatial_conv_w_grad upstream")?;
    let ax = adj.matmul(&x.reshaped(vec![p, l * c_in])?)?; // [P, L*Cin]
    let ax = ax.reshaped(vec![p * l, c_in])?;
    let g2 = g.reshaped(vec![p * l, c_out])?;
    ax.transpose2()?.matmul(&g2)
}

/// Per-node 1-D convolution along time with zero same-padding and stride 1.
/// x: [P, L, Cin], kernel: [T, Cin, Cout] with T odd; output [P, L, Cout].
pub fn temporal_conv(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (p, l, c_in) = x.dims3("temporal_conv input")?;
    let (t, kc_in, c_out) = kernel.dims3("temporal_conv kernel")?;
    if t % 2 == 0 {
        return Err(CoreError::Config(format!("temporal kernel length {} must be odd", t)));
    }
    if t > 2 * l - 1 {
        return Err(CoreError::Config(format!(
            "temporal kernel length {} exceeds 2L-1 = {}",
            t,
            2 * l - 1
        )));
    }
    if kc_in != c_in {
        return Err(CoreError::shape(
            "temporal_conv",
            format!("kernel {:?} does not match {} input channels", kernel.shape(), c_in),
        ));
    }
    let pad = (t - 1) / 2;
    let mut out = vec![0.0; p * l * c_out];
    let xd = x.data();
    let kd = kernel.data();
    for node in 0..p {
        let x_node = &xd[node * l * c_in..(node + 1) * l * c_in];
        let out_node = &mut out[node * l * c_out..(node + 1) * l * c_out];
        for tap in 0..t {
            // out[l0..l1) draws from x rows shifted by (tap - pad)
            let shift = tap as isize - pad as isize;
            let l0 = (-shift).max(0) as usize;
            let l1 = ((l as isize - shift).min(l as isize)).max(0) as usize;
            let k_tap = &kd[tap * c_in * c_out..(tap + 1) * c_in * c_out];
            for li in l0..l1 {
                let xin = ((li as isize) + shift) as usize;
                let xrow = &x_node[xin * c_in..(xin + 1) * c_in];
                let orow = &mut out_node[li * c_out..(li + 1) * c_out];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let krow = &k_tap[ci * c_out..(ci + 1) * c_out];
                    for co in 0..c_out {
                        orow[co] += xv * krow[co];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![p, l, c_out], out))
}

/// Gradient of `temporal_conv` with respect to the kernel, given upstream g.
/// dK[t, ci, co] = sum_{p,l} x_padded[p, l + t - pad, ci] * g[p, l, co].
pub fn temporal_conv_kernel_grad(x: &Tensor, g: &Tensor, t: usize) -> Result<Tensor> {
    let (p, l, c_in) = x.dims3("temporal_conv_kernel_grad input")?;
    let (_, _, c_out) = g.dims3("temporal_conv_kernel_grad upstream")?;
    let pad = (t - 1) / 2;
    let mut out = vec![0.0; t * c_in * c_out];
    let xd = x.data();
    let gd = g.data();
    for node in 0..p {
        let x_node = &xd[node * l * c_in..(node + 1) * l * c_in];
        let g_node = &gd[node * l * c_out..(node + 1) * l * c_out];
        for tap in 0..t {
            let shift = tap as isize - pad as isize;
            let l0 = (-shift).max(0) as usize;
            let l1 = ((l as isize - shift).min(l as isize)).max(0) as usize;
            let k_tap = &mut out[tap * c_in * c_out..(tap + 1) * c_in * c_out];
            for li in l0..l1 {
                let xin = ((li as isize) + shift) as usize;
                let xrow = &x_node[xin * c_in..(xin + 1) * c_in];
                let grow = &g_node[li * c_out..(li + 1) * c_out];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let krow = &mut k_tap[ci * c_out..(ci + 1) * c_out];
                    for (co, &gv) in grow.iter().enumerate() {
                        krow[co] += xv * gv;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![t, c_in, c_out], out))
}

/// Time-reverse the kernel and swap its channel axes: out[t, co, ci] =
/// k[T-1-t, ci, co]. Composing `temporal_conv` with this realizes the
/// input-gradient of a same-padded convolution.
pub fn kernel_flip_swap(k: &Tensor) -> Result<Tensor> {
    let (t, c_in, c_out) = k.dims3("kernel_flip_swap")?;
    let mut out = vec![0.0; t * c_in * c_out];
    let kd = k.data();
    for tap in 0..t {
        for ci in 0..c_in {
            for co in 0..c_out {
                out[tap * c_out * c_in + co * c_in + ci] =
                    kd[(t - 1 - tap) * c_in * c_out + ci * c_out + co];
            }
        }
    }
    Ok(Tensor::from_raw(vec![t, c_out, c_in], out))
}
