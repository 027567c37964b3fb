//! Forward ops and their vector-Jacobian products.
//!
//! Every op validates shapes, computes eagerly, and records a closure that
//! maps the upstream gradient to per-parent gradient buffers. Ops where the
//! math has a restricted domain (`ln`, `sqrt`) reject inputs outside it
//! instead of letting NaN propagate.

use crate::{Error, Result};

use super::tensor::Tensor;
use super::Scalar;

// ---- plain slice matmul kernels (shared by forward passes and VJPs) ----

fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == S::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    // a: m x k, b: n x k (transposed in the product) -> m x n
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for l in 0..k {
                acc = acc + arow[l] * brow[l];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    // a: k x m (used transposed), b: k x n -> m x n
    let mut out = vec![S::zero(); m * n];
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

fn check_same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// (outer, axis_len, inner) strides for reducing/walking `axis` of `shape`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<S: Scalar> Tensor<S> {
    // ---- elementwise ----

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("add", self, other)?;
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("sub", self, other)?;
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|&v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        check_same_shape("mul", self, other)?;
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let bd = b.data();
                let ad = a.data();
                vec![
                    Some(g.iter().zip(bd.iter()).map(|(&g, &b)| g * b).collect()),
                    Some(g.iter().zip(ad.iter()).map(|(&g, &a)| g * a).collect()),
                ]
            }),
        ))
    }

    pub fn neg(&self) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| -v).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.iter().map(|&v| -v).collect())]),
        )
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().map(|&v| v * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    pub fn square(&self) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| v * v).collect();
        let x = self.clone();
        let two = S::from_f64(2.0);
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let xd = x.data();
                vec![Some(
                    g.iter().zip(xd.iter()).map(|(&g, &x)| two * x * g).collect(),
                )]
            }),
        )
    }

    /// Elementwise square root. Domain: x >= 0 (gradients need x > 0).
    pub fn sqrt_elem(&self) -> Result<Tensor<S>> {
        if self.data().iter().any(|&v| v < S::zero()) {
            return Err(Error::input("sqrt", "negative input"));
        }
        let data: Vec<S> = self.data().iter().map(|&v| v.sqrt()).collect();
        let half = S::from_f64(0.5);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |out, g| {
                vec![Some(
                    g.iter().zip(out.iter()).map(|(&g, &y)| half * g / y).collect(),
                )]
            }),
        ))
    }

    pub fn exp(&self) -> Result<Tensor<S>> {
        let data: Vec<S> = self.data().iter().map(|&v| v.exp()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "exp",
                details: "overflow".into(),
            });
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|out, g| {
                vec![Some(
                    g.iter().zip(out.iter()).map(|(&g, &y)| g * y).collect(),
                )]
            }),
        ))
    }

    /// Natural log. Domain: x > 0.
    pub fn ln_elem(&self) -> Result<Tensor<S>> {
        if self.data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::input("ln", "non-positive input"));
        }
        let data: Vec<S> = self.data().iter().map(|&v| v.ln()).collect();
        let x = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let xd = x.data();
                vec![Some(
                    g.iter().zip(xd.iter()).map(|(&g, &x)| g / x).collect(),
                )]
            }),
        ))
    }

    pub fn tanh_elem(&self) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| v.tanh()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|out, g| {
                vec![Some(
                    g.iter()
                        .zip(out.iter())
                        .map(|(&g, &y)| g * (S::one() - y * y))
                        .collect(),
                )]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<S> {
        let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
        let a = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&x| {
                let u = c * (x + a * x * x * x);
                half * x * (S::one() + u.tanh())
            })
            .collect();
        let xs = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let xd = xs.data();
                vec![Some(
                    g.iter()
                        .zip(xd.iter())
                        .map(|(&g, &x)| {
                            let u = c * (x + a * x * x * x);
                            let t = u.tanh();
                            let du = c * (S::one() + three * a * x * x);
                            let d = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
                            g * d
                        })
                        .collect(),
                )]
            }),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product: [m x k] . [k x n] -> [m x n].
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} . {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let data = mm_nn(&self.data(), &other.data(), m, k, n);
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let da = mm_nt(g, &b.data(), m, n, k); // G . B^T
                let db = mm_tn(&a.data(), g, k, m, n); // A^T . G
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// 2-D product with transposed rhs: [m x k] . [n x k]^T -> [m x n].
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape()[1] != other.shape()[1] {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} . {:?}^T", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[0];
        let data = mm_nt(&self.data(), &other.data(), m, k, n);
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let da = mm_nn(g, &b.data(), m, n, k); // G . B
                let db = mm_tn(g, &a.data(), n, m, k); // G^T . A
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Batched 3-D matmul: [B x m x k] . [B x k x n] -> [B x m x n].
    pub fn bmm(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.ndim() != 3
            || other.ndim() != 3
            || self.shape()[0] != other.shape()[0]
            || self.shape()[2] != other.shape()[1]
        {
            return Err(Error::shape(
                "bmm",
                format!("{:?} . {:?}", self.shape(), other.shape()),
            ));
        }
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = other.shape()[2];
        let ad = self.data();
        let bd = other.data();
        let mut data = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            data.extend(mm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        drop(ad);
        drop(bd);
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            vec![bs, m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let ad = a.data();
                let bd = b.data();
                let mut da = Vec::with_capacity(bs * m * k);
                let mut db = Vec::with_capacity(bs * k * n);
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    da.extend(mm_nt(gi, &bd[i * k * n..(i + 1) * k * n], m, n, k));
                    db.extend(mm_tn(&ad[i * m * k..(i + 1) * m * k], gi, k, m, n));
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Batched product with transposed rhs: [B x m x k] . [B x n x k]^T -> [B x m x n].
    pub fn bmm_nt(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.ndim() != 3
            || other.ndim() != 3
            || self.shape()[0] != other.shape()[0]
            || self.shape()[2] != other.shape()[2]
        {
            return Err(Error::shape(
                "bmm_nt",
                format!("{:?} . {:?}^T", self.shape(), other.shape()),
            ));
        }
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = other.shape()[1];
        let ad = self.data();
        let bd = other.data();
        let mut data = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            data.extend(mm_nt(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
            ));
        }
        drop(ad);
        drop(bd);
        let a = self.clone();
        let b = other.clone();
        Ok(Tensor::from_op(
            vec![bs, m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let ad = a.data();
                let bd = b.data();
                let mut da = Vec::with_capacity(bs * m * k);
                let mut db = Vec::with_capacity(bs * n * k);
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    da.extend(mm_nn(gi, &bd[i * n * k..(i + 1) * n * k], m, n, k));
                    db.extend(mm_tn(gi, &ad[i * m * k..(i + 1) * m * k], n, m, k));
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    // ---- shape ----

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<S>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), new_shape),
            ));
        }
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} [{start}..{}) of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, axis_len, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * axis_len * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let full_shape = self.shape().to_vec();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let numel: usize = full_shape.iter().product();
                let mut dx = vec![S::zero(); numel];
                for o in 0..outer {
                    let dst = o * axis_len * inner + start * inner;
                    let srcb = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[srcb..srcb + len * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<S> {
        let total: S = self.data().iter().copied().sum();
        let n = self.numel();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |_, g| {
                let _ = &shape;
                vec![Some(vec![g[0]; n])]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.numel();
        let inv = S::from_f64(1.0 / n as f64);
        let total: S = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![1],
            vec![total * inv],
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor<S>> {
        if axis >= self.ndim() {
            return Err(Error::shape(
                "reduce_axis",
                format!("axis {axis} of {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let scale = if mean {
            S::from_f64(1.0 / len as f64)
        } else {
            S::one()
        };
        let src = self.data();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[base + i];
                }
            }
        }
        for v in data.iter_mut() {
            *v = *v * scale;
        }
        drop(src);
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ---- broadcasts ----

    /// Add a bias over the last axis: x[... x D] + b[D].
    pub fn add_row(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let d = *self.shape().last().unwrap();
        if bias.ndim() != 1 || bias.shape()[0] != d {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + bias {:?}", self.shape(), bias.shape()),
            ));
        }
        let rows = self.numel() / d;
        let bd = bias.data();
        let data: Vec<S> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        drop(bd);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |_, g| {
                let mut db = vec![S::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        db[j] = db[j] + g[r * d + j];
                    }
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        ))
    }

    /// Add a per-row value over columns: x[R x C] + v[R].
    pub fn add_col(&self, v: &Tensor<S>) -> Result<Tensor<S>> {
        if self.ndim() != 2 || v.ndim() != 1 || v.shape()[0] != self.shape()[0] {
            return Err(Error::shape(
                "add_col",
                format!("{:?} + col {:?}", self.shape(), v.shape()),
            ));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let vd = v.data();
        let data: Vec<S> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vd[i / c])
            .collect();
        drop(vd);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), v.clone()],
            Box::new(move |_, g| {
                let mut dv = vec![S::zero(); r];
                for i in 0..r {
                    for j in 0..c {
                        dv[i] = dv[i] + g[i * c + j];
                    }
                }
                vec![Some(g.to_vec()), Some(dv)]
            }),
        ))
    }

    /// Multiply by a one-element tensor (broadcast scalar).
    pub fn scale_by(&self, s: &Tensor<S>) -> Result<Tensor<S>> {
        if s.numel() != 1 {
            return Err(Error::shape("scale_by", format!("scale {:?}", s.shape())));
        }
        let sv = s.item();
        let data: Vec<S> = self.data().iter().map(|&v| v * sv).collect();
        let x = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(move |_, g| {
                let xd = x.data();
                let ds: S = g.iter().zip(xd.iter()).map(|(&g, &x)| g * x).sum();
                vec![
                    Some(g.iter().map(|&v| v * sv).collect()),
                    Some(vec![ds]),
                ]
            }),
        ))
    }

    /// One element by flattened index, as a [1] tensor.
    pub fn index_scalar(&self, flat: usize) -> Result<Tensor<S>> {
        if flat >= self.numel() {
            return Err(Error::shape(
                "index_scalar",
                format!("index {flat} of {:?}", self.shape()),
            ));
        }
        let v = self.data()[flat];
        let n = self.numel();
        Ok(Tensor::from_op(
            vec![1],
            vec![v],
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); n];
                dx[flat] = g[0];
                vec![Some(dx)]
            }),
        ))
    }

    /// Select rows of a 2-D tensor by index (repeats allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<S>> {
        if self.ndim() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", self.shape())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::input(
                "gather_rows",
                format!("row {bad} out of {r}"),
            ));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        drop(src);
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len(), c],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] = dx[i * c + j] + g[k * c + j];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Diagonal of a square matrix.
    pub fn diag(&self) -> Result<Tensor<S>> {
        if self.ndim() != 2 || self.shape()[0] != self.shape()[1] {
            return Err(Error::shape("diag", format!("{:?}", self.shape())));
        }
        let n = self.shape()[0];
        let src = self.data();
        let data: Vec<S> = (0..n).map(|i| src[i * n + i]).collect();
        drop(src);
        Ok(Tensor::from_op(
            vec![n],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); n * n];
                for i in 0..n {
                    dx[i * n + i] = g[i];
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ---- normalization / softmax ----

    /// Softmax along `axis`, numerically stable and shift-invariant.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.ndim() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} of {:?}", self.shape()),
            ));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite {
                op: "softmax",
                details: "non-finite input".into(),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut data = vec![S::zero(); self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut mx = src[idx(0)];
                for l in 1..len {
                    if src[idx(l)] > mx {
                        mx = src[idx(l)];
                    }
                }
                let mut denom = S::zero();
                for l in 0..len {
                    let e = (src[idx(l)] - mx).exp();
                    data[idx(l)] = e;
                    denom = denom + e;
                }
                for l in 0..len {
                    data[idx(l)] = data[idx(l)] / denom;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |out, g| {
                let mut dx = vec![S::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mut dot = S::zero();
                        for l in 0..len {
                            dot = dot + g[idx(l)] * out[idx(l)];
                        }
                        for l in 0..len {
                            dx[idx(l)] = out[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Row-wise log(sum(exp(x))) over the last axis, stable.
    pub fn logsumexp_last(&self) -> Result<Tensor<S>> {
        if self.ndim() == 0 {
            return Err(Error::shape("logsumexp_last", "scalar input".to_string()));
        }
        let c = *self.shape().last().unwrap();
        let rows = self.numel() / c;
        let src = self.data();
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
            let s: S = row.iter().map(|&v| (v - mx).exp()).sum();
            data.push(mx + s.ln());
        }
        drop(src);
        let mut shape: Vec<usize> = self.shape()[..self.ndim() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let x = self.clone();
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Box::new(move |out, g| {
                let xd = x.data();
                let mut dx = vec![S::zero(); xd.len()];
                for r in 0..rows {
                    for j in 0..c {
                        dx[r * c + j] = g[r] * (xd[r * c + j] - out[r]).exp();
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Row-wise L2 normalization of a 2-D tensor. Rows with norm below
    /// `eps` are scaled by 1/eps instead (degenerate-input guard).
    pub fn l2_normalize_rows(&self, eps: S) -> Result<Tensor<S>> {
        if self.ndim() != 2 {
            return Err(Error::shape("l2_normalize_rows", format!("{:?}", self.shape())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        let mut norms = Vec::with_capacity(r);
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n: S = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            let n = if n < eps { eps } else { n };
            norms.push(n);
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |out, g| {
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: S = gi.iter().zip(y.iter()).map(|(&g, &y)| g * y).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gi[j] - y[j] * dot) / norms[i];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with learnable gain and shift.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let d = *self.shape().last().unwrap();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(),
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let rows = self.numel() / d;
        let src = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut xhat = vec![S::zero(); rows * d];
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = vec![S::zero(); rows * d];
        let inv_d = S::from_f64(1.0 / d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu: S = row.iter().copied().sum::<S>() * inv_d;
            let var: S = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_d;
            let istd = S::one() / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..d {
                let xh = (row[j] - mu) * istd;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        drop(src);
        drop(gd);
        drop(bd);
        let gamma_t = gamma.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |_, g| {
                let gd = gamma_t.data();
                let mut dx = vec![S::zero(); rows * d];
                let mut dgamma = vec![S::zero(); d];
                let mut dbeta = vec![S::zero(); d];
                for r in 0..rows {
                    let gh: Vec<S> = (0..d).map(|j| g[r * d + j] * gd[j]).collect();
                    let mean_gh: S = gh.iter().copied().sum::<S>() * inv_d;
                    let mean_gh_xh: S = (0..d)
                        .map(|j| gh[j] * xhat[r * d + j])
                        .sum::<S>()
                        * inv_d;
                    for j in 0..d {
                        let xh = xhat[r * d + j];
                        dx[r * d + j] = (gh[j] - mean_gh - xh * mean_gh_xh) * inv_std[r];
                        dgamma[j] = dgamma[j] + g[r * d + j] * xh;
                        dbeta[j] = dbeta[j] + g[r * d + j];
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// Mean over valid timesteps of [B x T x d] given per-sample lengths.
    pub fn masked_mean_time(&self, lengths: &[usize]) -> Result<Tensor<S>> {
        if self.ndim() != 3 {
            return Err(Error::shape("masked_mean_time", format!("{:?}", self.shape())));
        }
        let (b, t, d) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if lengths.len() != b {
            return Err(Error::shape(
                "masked_mean_time",
                format!("{} lengths for batch {}", lengths.len(), b),
            ));
        }
        for (i, &l) in lengths.iter().enumerate() {
            if l == 0 || l > t {
                return Err(Error::input(
                    "masked_mean_time",
                    format!("length {l} at sample {i} (T = {t})"),
                ));
            }
        }
        let src = self.data();
        let mut data = vec![S::zero(); b * d];
        for i in 0..b {
            let inv = S::from_f64(1.0 / lengths[i] as f64);
            for ti in 0..lengths[i] {
                for j in 0..d {
                    data[i * d + j] = data[i * d + j] + src[(i * t + ti) * d + j] * inv;
                }
            }
        }
        drop(src);
        let lens = lengths.to_vec();
        Ok(Tensor::from_op(
            vec![b, d],
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![S::zero(); b * t * d];
                for i in 0..b {
                    let inv = S::from_f64(1.0 / lens[i] as f64);
                    for ti in 0..lens[i] {
                        for j in 0..d {
                            dx[(i * t + ti) * d + j] = g[i * d + j] * inv;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Softmax over the key axis of a 2-D score matrix with key validity.
    ///
    /// Rows listed invalid in `query_valid` get a constant uniform
    /// distribution over the valid keys (the padded-query fallback) and
    /// contribute no gradient to the scores. A mask with no valid keys is
    /// an error.
    pub fn masked_softmax_rows(
        &self,
        key_valid: &[bool],
        query_valid: Option<&[bool]>,
    ) -> Result<Tensor<S>> {
        if self.ndim() != 2 || key_valid.len() != self.shape()[1] {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!("scores {:?}, mask {}", self.shape(), key_valid.len()),
            ));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if let Some(qv) = query_valid {
            if qv.len() != r {
                return Err(Error::shape(
                    "masked_softmax_rows",
                    format!("{} query flags for {} rows", qv.len(), r),
                ));
            }
        }
        let n_valid = key_valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            return Err(Error::input("masked_softmax_rows", "no valid key positions"));
        }
        let uniform = S::from_f64(1.0 / n_valid as f64);
        let src = self.data();
        let mut data = vec![S::zero(); r * c];
        let mut constant_row = vec![false; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let q_ok = query_valid.map_or(true, |qv| qv[i]);
            if !q_ok {
                for j in 0..c {
                    data[i * c + j] = if key_valid[j] { uniform } else { S::zero() };
                }
                constant_row[i] = true;
                continue;
            }
            let mut mx = S::neg_infinity();
            for j in 0..c {
                if key_valid[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut denom = S::zero();
            for j in 0..c {
                if key_valid[j] {
                    let e = (row[j] - mx).exp();
                    data[i * c + j] = e;
                    denom = denom + e;
                }
            }
            for j in 0..c {
                data[i * c + j] = data[i * c + j] / denom;
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |out, g| {
                let mut dx = vec![S::zero(); r * c];
                for i in 0..r {
                    if constant_row[i] {
                        continue;
                    }
                    let p = &out[i * c..(i + 1) * c];
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: S = gi.iter().zip(p.iter()).map(|(&g, &p)| g * p).sum();
                    for j in 0..c {
                        dx[i * c + j] = p[j] * (gi[j] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Angle-compensated cosine, elementwise against constant per-pair
    /// compensation angles: out = c*cos(phi) - |sin(phi)|*sqrt(1 - c^2 + eps).
    ///
    /// `cos_phi` / `abs_sin_phi` are plain buffers (label-derived constants,
    /// not graph values). Inputs must satisfy |c| <= 1 + 1e-6; values inside
    /// the tolerance band are clamped to [-1, 1].
    pub fn compensated_cosine(
        &self,
        cos_phi: &[S],
        abs_sin_phi: &[S],
        eps: S,
    ) -> Result<Tensor<S>> {
        if cos_phi.len() != self.numel() || abs_sin_phi.len() != self.numel() {
            return Err(Error::shape(
                "compensated_cosine",
                format!("{} angles for {} cosines", cos_phi.len(), self.numel()),
            ));
        }
        let tol = S::from_f64(1.0 + 1e-6);
        if self.data().iter().any(|&c| c.abs() > tol) {
            return Err(Error::input("compensated_cosine", "|cosine| > 1 + 1e-6"));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(self.numel());
        for (i, &c) in src.iter().enumerate() {
            let c = c.min(S::one()).max(-S::one());
            let rad = (S::one() - c * c + eps).max(S::zero());
            data.push(c * cos_phi[i] - abs_sin_phi[i] * rad.sqrt());
        }
        drop(src);
        let x = self.clone();
        let cp = cos_phi.to_vec();
        let sp = abs_sin_phi.to_vec();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| {
                let xd = x.data();
                let mut dx = vec![S::zero(); xd.len()];
                for i in 0..xd.len() {
                    let c = xd[i];
                    if c.abs() > S::one() {
                        continue; // clamped region: derivative zero
                    }
                    let rad = (S::one() - c * c + eps).max(S::from_f64(1e-300));
                    dx[i] = g[i] * (cp[i] + sp[i] * c / rad.sqrt());
                }
                vec![Some(dx)]
            }),
        ))
    }
}

// ---- multi-tensor free functions ----

/// Concatenate along `axis`. All parts must agree on every other dimension.
pub fn concat<S: Scalar>(axis: usize, parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::input("concat", "no tensors"));
    }
    let ndim = parts[0].ndim();
    if axis >= ndim {
        return Err(Error::shape("concat", format!("axis {axis} of {ndim}-d")));
    }
    let mut axis_total = 0;
    for p in parts {
        if p.ndim() != ndim {
            return Err(Error::shape("concat", "rank mismatch".to_string()));
        }
        for d in 0..ndim {
            if d != axis && p.shape()[d] != parts[0].shape()[d] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", p.shape(), parts[0].shape()),
                ));
            }
        }
        axis_total += p.shape()[axis];
    }
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = axis_total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let part_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for (p, &plen) in parts.iter().zip(part_lens.iter()) {
            let src = p.data();
            let base = o * plen * inner;
            data.extend_from_slice(&src[base..base + plen * inner]);
        }
    }
    let plens = part_lens.clone();
    Ok(Tensor::from_op(
        shape,
        data,
        parts.to_vec(),
        Box::new(move |_, g| {
            let mut grads: Vec<Vec<S>> = plens
                .iter()
                .map(|&l| Vec::with_capacity(outer * l * inner))
                .collect();
            let mut offset = 0;
            for _o in 0..outer {
                for (pi, &plen) in plens.iter().enumerate() {
                    grads[pi].extend_from_slice(&g[offset..offset + plen * inner]);
                    offset += plen * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

/// Stack equal-shape tensors along a new leading axis.
pub fn stack0<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::input("stack0", "no tensors"));
    }
    let inner_shape = parts[0].shape().to_vec();
    let chunk: usize = inner_shape.iter().product();
    let mut data = Vec::with_capacity(parts.len() * chunk);
    for p in parts {
        if p.shape() != inner_shape.as_slice() {
            return Err(Error::shape(
                "stack0",
                format!("{:?} vs {:?}", p.shape(), inner_shape),
            ));
        }
        data.extend_from_slice(&p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(&inner_shape);
    let n = parts.len();
    Ok(Tensor::from_op(
        shape,
        data,
        parts.to_vec(),
        Box::new(move |_, g| {
            (0..n)
                .map(|i| Some(g[i * chunk..(i + 1) * chunk].to_vec()))
                .collect()
        }),
    ))
}

/// Elementwise sum of same-shape tensors as one n-ary node.
pub fn sum_tensors<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::input("sum_tensors", "no tensors"));
    }
    let shape = parts[0].shape().to_vec();
    let mut data = parts[0].to_vec();
    for p in &parts[1..] {
        if p.shape() != shape.as_slice() {
            return Err(Error::shape(
                "sum_tensors",
                format!("{:?} vs {:?}", p.shape(), shape),
            ));
        }
        for (d, &v) in data.iter_mut().zip(p.data().iter()) {
            *d = *d + v;
        }
    }
    let n = parts.len();
    Ok(Tensor::from_op(
        shape,
        data,
        parts.to_vec(),
        Box::new(move |_, g| (0..n).map(|_| Some(g.to_vec())).collect()),
    ))
}

/// x . W + b with gradients for all three operands.
pub fn affine<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    x.matmul(w)?.add_row(b)
}

/// Mean squared error between two same-shape tensors.
pub fn mse<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(pred.sub(target)?.square().mean_all())
}

/// softmax(Q K^T / sqrt(d) with key mask) V over one sequence.
///
/// `key_valid` marks which key rows may receive attention; rows of
/// `query_valid` set to false fall back to a constant uniform distribution
/// over the valid keys (padded-query fallback). No valid key is an error.
pub fn scaled_dot_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    key_valid: &[bool],
    query_valid: Option<&[bool]>,
) -> Result<Tensor<S>> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(Error::shape("attention", "q, k, v must be 2-d".to_string()));
    }
    let d = q.shape()[1];
    if k.shape()[1] != d || v.shape()[0] != k.shape()[0] {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if d == 0 {
        return Err(Error::input("attention", "zero head dimension"));
    }
    let scale = S::from_f64(1.0 / (d as f64).sqrt());
    let scores = q.matmul_nt(k)?.scale(scale);
    let probs = scores.masked_softmax_rows(key_valid, query_valid)?;
    probs.matmul(v)
}
