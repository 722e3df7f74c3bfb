//! Differentiable operations. Kernels work on flat row-major slices; each op
//! builds the value eagerly and registers a closure producing parent
//! gradients from the output gradient.

use std::rc::Rc;

use super::Tensor;
use crate::error::{CecError, Result};
use crate::scalar::Scalar;

// Flat matrix kernels. a is m x k, row-major.

pub(crate) fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// a (m x k) times b-transposed where b is n x k.
pub(crate) fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            orow[j] = acc;
        }
    }
    out
}

/// a-transposed times b where a is k x m and b is k x n.
pub(crate) fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aik = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn dims2<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(CecError::Dimension(format!(
            "{what} expects a matrix, got shape {other:?}"
        ))),
    }
}

impl<S: Scalar> Tensor<S> {
    /// Standard matrix product.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = dims2(self, "matmul lhs")?;
        let (k2, n) = dims2(other, "matmul rhs")?;
        if k != k2 {
            return Err(CecError::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let out = mm(self.data(), other.data(), m, k, n);
        let (a, b) = (self.data_rc(), other.data_rc());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(mm_nt(g, &b, m, n, k)),
                    Some(mm_tn(&a, g, k, m, n)),
                ]
            }),
        ))
    }

    /// Product with the transposed right operand: self (m x c) times
    /// otherᵀ where other is n x c. The workhorse of affinity matrices and
    /// row-projections, so transposes never materialize.
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, c) = dims2(self, "matmul_nt lhs")?;
        let (n, c2) = dims2(other, "matmul_nt rhs")?;
        if c != c2 {
            return Err(CecError::Dimension(format!(
                "matmul_nt channel counts disagree: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let out = mm_nt(self.data(), other.data(), m, c, n);
        let (a, b) = (self.data_rc(), other.data_rc());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(mm(g, &b, m, n, c)),
                    Some(mm_tn(g, &a, n, m, c)),
                ]
            }),
        ))
    }

    /// Row-wise softmax of `x / temperature` with max subtraction.
    pub fn softmax_rows(&self, temperature: S) -> Result<Tensor<S>> {
        if temperature <= S::zero() {
            return Err(CecError::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let (m, n) = dims2(self, "softmax_rows")?;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &self.data()[i * n..(i + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            let mut max = S::neg_infinity();
            for &v in row {
                if v / temperature > max {
                    max = v / temperature;
                }
            }
            let mut denom = S::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v / temperature - max).exp();
                denom += e;
                *o = e;
            }
            for o in orow.iter_mut() {
                *o = *o / denom;
            }
        }
        let y = Rc::new(out.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                // dx = (y * (g - <g, y>_row)) / t, rowwise
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mut dot = S::zero();
                    for (&yv, &gv) in yr.iter().zip(gr) {
                        dot += yv * gv;
                    }
                    let dr = &mut dx[i * n..(i + 1) * n];
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / temperature;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Divide each row by max(its Euclidean norm, eps). Rows with norm below
    /// eps are scaled by 1/eps, so zero rows stay zero.
    pub fn l2_normalize_rows(&self, eps: S) -> Result<Tensor<S>> {
        let (m, n) = dims2(self, "l2_normalize_rows")?;
        let mut out = vec![S::zero(); m * n];
        let mut norms = vec![S::zero(); m];
        for i in 0..m {
            let row = &self.data()[i * n..(i + 1) * n];
            let mut sq = S::zero();
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt().max(eps);
            norms[i] = norm;
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let x = self.data_rc();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let xr = &x[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dr = &mut dx[i * n..(i + 1) * n];
                    let mut sq = S::zero();
                    for &v in xr {
                        sq += v * v;
                    }
                    let norm = sq.sqrt();
                    if norm >= eps {
                        // d(x/|x|) = g/|x| - x (x . g) / |x|^3
                        let mut dot = S::zero();
                        for (&xv, &gv) in xr.iter().zip(gr) {
                            dot += xv * gv;
                        }
                        let n3 = norm * norm * norm;
                        for ((d, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                            *d = gv / norm - xv * dot / n3;
                        }
                    } else {
                        // denominator is the constant eps here
                        for (d, &gv) in dr.iter_mut().zip(gr) {
                            *d = gv / eps;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    fn binary_same_shape(
        &self,
        other: &Tensor<S>,
        what: &str,
    ) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CecError::Dimension(format!(
                "{what} expects equal shapes, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_same_shape(other, "add")?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_same_shape(other, "sub")?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|&v| -v).collect()),
                ]
            }),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_same_shape(other, "mul")?;
        let out = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let (a, b) = (self.data_rc(), other.data_rc());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    Some(g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect()),
                    Some(g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&self, k: S) -> Tensor<S> {
        let out = self.data().iter().map(|&v| v * k).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|&v| v * k).collect())]),
        )
    }

    pub fn add_scalar(&self, k: S) -> Tensor<S> {
        let out = self.data().iter().map(|&v| v + k).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    /// Scale row i of a matrix by s[i].
    pub fn scale_rows(&self, s: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, n) = dims2(self, "scale_rows")?;
        if s.shape() != [m] {
            return Err(CecError::Dimension(format!(
                "scale_rows expects a factor per row: {:?} vs {:?}",
                self.shape(),
                s.shape()
            )));
        }
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let f = s.data()[i];
            for (o, &v) in out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(&self.data()[i * n..(i + 1) * n])
            {
                *o = v * f;
            }
        }
        let (a, sv) = (self.data_rc(), s.data_rc());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), s.clone()],
            Box::new(move |g| {
                let mut da = vec![S::zero(); m * n];
                let mut ds = vec![S::zero(); m];
                for i in 0..m {
                    let f = sv[i];
                    let gr = &g[i * n..(i + 1) * n];
                    let ar = &a[i * n..(i + 1) * n];
                    let mut acc = S::zero();
                    for ((d, &gv), &av) in da[i * n..(i + 1) * n].iter_mut().zip(gr).zip(ar) {
                        *d = gv * f;
                        acc += gv * av;
                    }
                    ds[i] = acc;
                }
                vec![Some(da), Some(ds)]
            }),
        ))
    }

    /// Sum along each row: (m x n) -> (m).
    pub fn row_sum(&self) -> Result<Tensor<S>> {
        let (m, n) = dims2(self, "row_sum")?;
        let mut out = vec![S::zero(); m];
        for i in 0..m {
            for &v in &self.data()[i * n..(i + 1) * n] {
                out[i] += v;
            }
        }
        Ok(Tensor::from_op(
            vec![m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    for d in &mut dx[i * n..(i + 1) * n] {
                        *d = g[i];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Column means: (m x n) -> (1 x n).
    pub fn mean_rows(&self) -> Result<Tensor<S>> {
        let (m, n) = dims2(self, "mean_rows")?;
        let inv = S::one() / S::from_f64_c(m as f64);
        let mut out = vec![S::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&self.data()[i * n..(i + 1) * n]) {
                *o += v * inv;
            }
        }
        Ok(Tensor::from_op(
            vec![1, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    for (d, &gv) in dx[i * n..(i + 1) * n].iter_mut().zip(g) {
                        *d = gv * inv;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let mut acc = S::zero();
        for &v in self.data() {
            acc += v;
        }
        let len = self.len();
        Tensor::from_op(
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; len])]),
        )
    }

    /// Mean of all entries, as a scalar tensor.
    pub fn mean_all(&self) -> Tensor<S> {
        let inv = S::one() / S::from_f64_c(self.len() as f64);
        self.sum_all().scale(inv)
    }

    /// Stack column vectors (each of shape [m]) into an (m x N) matrix.
    pub fn stack_cols(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(CecError::Dimension("stack_cols of nothing".into()));
        }
        let m = parts[0].len();
        for p in parts {
            if p.shape() != [m] {
                return Err(CecError::Dimension(format!(
                    "stack_cols expects vectors of equal length {m}, got {:?}",
                    p.shape()
                )));
            }
        }
        let n = parts.len();
        let mut out = vec![S::zero(); m * n];
        for (j, p) in parts.iter().enumerate() {
            for (i, &v) in p.data().iter().enumerate() {
                out[i * n + j] = v;
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            parts.to_vec(),
            Box::new(move |g| {
                (0..n)
                    .map(|j| {
                        let mut dp = vec![S::zero(); m];
                        for (i, d) in dp.iter_mut().enumerate() {
                            *d = g[i * n + j];
                        }
                        Some(dp)
                    })
                    .collect()
            }),
        ))
    }

    /// Extract column j of a matrix as a vector of shape [m].
    pub fn select_col(&self, j: usize) -> Result<Tensor<S>> {
        let (m, n) = dims2(self, "select_col")?;
        if j >= n {
            return Err(CecError::Dimension(format!(
                "column {j} out of range for shape {:?}",
                self.shape()
            )));
        }
        let out: Vec<S> = (0..m).map(|i| self.data()[i * n + j]).collect();
        Ok(Tensor::from_op(
            vec![m],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    dx[i * n + j] = g[i];
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Elementwise max(x, floor). Gradient passes only strictly above the
    /// floor.
    pub fn clamp_min(&self, floor: S) -> Tensor<S> {
        let out = self.data().iter().map(|&v| v.max(floor)).collect();
        let x = self.data_rc();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&gv, &xv)| if xv > floor { gv } else { S::zero() })
                        .collect(),
                )]
            }),
        )
    }

    /// Repeat a one-element tensor into a vector of the given length.
    pub fn broadcast_scalar(&self, len: usize) -> Result<Tensor<S>> {
        if self.len() != 1 {
            return Err(CecError::Dimension(format!(
                "broadcast_scalar needs a one-element tensor, got {:?}",
                self.shape()
            )));
        }
        let v = self.data()[0];
        Ok(Tensor::from_op(
            vec![len],
            vec![v; len],
            vec![self.clone()],
            Box::new(move |g| {
                let mut acc = S::zero();
                for &gv in g {
                    acc += gv;
                }
                vec![Some(vec![acc])]
            }),
        ))
    }

    /// Elementwise reciprocal.
    pub fn recip(&self) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| S::one() / v).collect();
        let y = Rc::new(out.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| -gv * yv * yv)
                        .collect(),
                )]
            }),
        )
    }

    pub fn ln(&self) -> Tensor<S> {
        let out = self.data().iter().map(|&v| v.ln()).collect();
        let x = self.data_rc();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter().zip(x.iter()).map(|(&gv, &xv)| gv / xv).collect(),
                )]
            }),
        )
    }

    pub fn relu(&self) -> Tensor<S> {
        let out = self
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let x = self.data_rc();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let out: Vec<S> = self
            .data()
            .iter()
            .map(|&v| S::one() / (S::one() + (-v).exp()))
            .collect();
        let y = Rc::new(out.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                        .collect(),
                )]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor<S> {
        let out: Vec<S> = self.data().iter().map(|&v| v.tanh()).collect();
        let y = Rc::new(out.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                        .collect(),
                )]
            }),
        )
    }

    /// Patch-wise cross-entropy kernel for one query: the negative log
    /// softmax at the label column, summed over all rows (patches).
    pub fn cross_entropy_rows(&self, label: usize) -> Result<Tensor<S>> {
        let (m, n) = dims2(self, "cross_entropy_rows")?;
        if label >= n {
            return Err(CecError::Data(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let mut probs = vec![S::zero(); m * n];
        let mut loss = S::zero();
        for i in 0..m {
            let row = &self.data()[i * n..(i + 1) * n];
            let prow = &mut probs[i * n..(i + 1) * n];
            let mut max = S::neg_infinity();
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut denom = S::zero();
            for (p, &v) in prow.iter_mut().zip(row) {
                let e = (v - max).exp();
                denom += e;
                *p = e;
            }
            for p in prow.iter_mut() {
                *p = *p / denom;
            }
            loss -= row[label] - max - denom.ln();
        }
        let probs = Rc::new(probs);
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    let prow = &probs[i * n..(i + 1) * n];
                    let drow = &mut dx[i * n..(i + 1) * n];
                    for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                        let delta = if j == label { S::one() } else { S::zero() };
                        *d = (p - delta) * g[0];
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

/// Mean of a set of scalar tensors, as a scalar tensor.
pub fn mean_of_scalars<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(CecError::Contract("mean of no scalars".into()));
    }
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc = acc.add(p)?;
    }
    Ok(acc.scale(S::one() / S::from_f64_c(parts.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::constant(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t64(vec![2, 1], vec![3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let a = t64(vec![1, 2], vec![1.0, 2.0]);
        let b = t64(vec![2, 1], vec![3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_loop() {
        // fixed pseudo-random fill, checked against an explicit triple loop
        let mut v = 0.37;
        let mut next = || {
            v = (v * 9301.0 + 49297.0) % 233280.0 / 233280.0;
            v * 4.0 - 2.0
        };
        let a: Vec<f64> = (0..20).map(|_| next()).collect();
        let b: Vec<f64> = (0..15).map(|_| next()).collect();
        let got = t64(vec![4, 5], a.clone())
            .matmul(&t64(vec![5, 3], b.clone()))
            .unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut want = 0.0;
                for k in 0..5 {
                    want += a[i * 5 + k] * b[k * 3 + j];
                }
                assert!((got.data()[i * 3 + j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t64(vec![2, 3], vec![0.0; 6]);
        let b = t64(vec![2, 2], vec![0.0; 4]);
        assert!(matches!(a.matmul(&b), Err(CecError::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_hand_value() {
        let a = t64(vec![1, 2], vec![0.0, 0.0]);
        let s = a.softmax_rows(1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let a = t64(vec![1, 2], vec![1.0, 0.0]);
        let s = a.softmax_rows(1.0).unwrap();
        assert!((s.data()[0] - 0.7311).abs() < 1e-4);
        assert!((s.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_single_column_is_ones() {
        let a = t64(vec![3, 1], vec![-4.0, 0.0, 7.5]);
        let s = a.softmax_rows(1.0).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let a = t64(vec![1, 2], vec![0.0, 0.0]);
        assert!(matches!(
            a.softmax_rows(0.0),
            Err(CecError::Parameter(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_constant_grad_vanishes() {
        let x = Tensor::param(vec![2, 3], vec![0.3, -1.2, 0.9, 2.0, 2.0, -0.5]).unwrap();
        let s = x.softmax_rows(1.0).unwrap();
        for i in 0..2 {
            let sum: f64 = s.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        // rows always sum to 1, so the gradient of the total is zero
        s.sum_all().backward().unwrap();
        for g in x.grad().unwrap() {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_rows_cases() {
        let a = t64(vec![1, 2], vec![3.0, 4.0]);
        let n = a.l2_normalize_rows(1e-12).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-12);
        assert!((n.data()[1] - 0.8).abs() < 1e-12);

        let z = t64(vec![1, 2], vec![0.0, 0.0]);
        let n = z.l2_normalize_rows(1e-12).unwrap();
        assert_eq!(n.data(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_is_idempotent() {
        let a = t64(vec![2, 3], vec![0.2, -1.4, 2.2, 5.0, 0.1, -0.7]);
        let once = a.l2_normalize_rows(1e-12).unwrap();
        let twice = once.l2_normalize_rows(1e-12).unwrap();
        for (x, y) in once.data().iter().zip(twice.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::param(vec![3, 4], vec![0.5; 12]).unwrap();
        let loss = logits.cross_entropy_rows(1).unwrap();
        // ln 4 per patch, three patches
        assert!((loss.item().unwrap() - 3.0 * 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates_with_margin() {
        let mut data = vec![0.0; 5];
        data[2] = 10.0;
        let logits = t64(vec![1, 5], data);
        let loss = logits.cross_entropy_rows(2).unwrap();
        assert!(loss.item().unwrap() < 1e-3);
    }

    #[test]
    fn stack_and_select_are_inverse() {
        let a = t64(vec![3], vec![1.0, 2.0, 3.0]);
        let b = t64(vec![3], vec![4.0, 5.0, 6.0]);
        let m = Tensor::stack_cols(&[a, b]).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(m.select_col(1).unwrap().data(), &[4.0, 5.0, 6.0]);
    }
}
