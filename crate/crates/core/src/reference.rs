//! Straightforward implementations of the three neighborhood operators, the
//! forward/backward composition built from them, and a dense masked-attention
//! oracle.
//!
//! * `pn`: dot products between each query and its neighborhood (`Q K^T`).
//! * `nn`: weighted sum of the neighborhood (`P V`).
//! * `in_`: the transpose of `nn`, indexed by context token. It produces the key
//!   and value gradients.
//!
//! Every reduction runs sequentially in slot order, so results do not depend on
//! the thread count.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::error::{NaError, Result};
use crate::neighborhood::{neighborhood_contains, Geometry};
use crate::problem::{validate, NaParams, ProblemSpec, MAX_RANK};
use crate::tensor::{Element, Tensor};

/// Attention weights in neighborhood layout `[batch, heads, spatial..., window_volume]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactWeights<T> {
    pub data: Tensor<T>,
    /// Slot validity, flattened in the same order as `data`.
    pub valid: Vec<bool>,
}

impl<T: Element> CompactWeights<T> {
    pub fn volume(&self) -> usize {
        *self
            .data
            .shape()
            .last()
            .expect("compact weights have a slot axis")
    }

    /// Per-slot map over valid entries; invalid slots keep their value.
    pub fn map_valid(&self, f: impl Fn(usize, T) -> T) -> Self {
        let mut data = self.data.clone();
        for (i, (v, &ok)) in data.data_mut().iter_mut().zip(&self.valid).enumerate() {
            if ok {
                *v = f(i, *v);
            }
        }
        Self {
            data,
            valid: self.valid.clone(),
        }
    }

    pub(crate) fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>() + self.valid.len()
    }
}

/// Per-query log-sum-exp of the masked logits, shape `[batch, heads, spatial...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LseTensor<T>(pub Tensor<T>);

pub(crate) fn operand<'a, T: Element>(
    t: &'a Tensor<T>,
    expected: &[usize],
    what: &'static str,
) -> Result<Cow<'a, Tensor<T>>> {
    if t.shape() != expected {
        return Err(NaError::ShapeMismatch {
            what,
            expected: expected.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    let t = if t.is_contiguous() {
        Cow::Borrowed(t)
    } else {
        Cow::Owned(t.to_contiguous())
    };
    if !t.all_finite() {
        return Err(NaError::NonFiniteInput(what));
    }
    Ok(t)
}

/// Shape check for a caller-provided output buffer, which must be row-major.
pub(crate) fn out_buffer<T: Element>(
    t: &Tensor<T>,
    expected: &[usize],
    what: &'static str,
) -> Result<()> {
    if t.shape() != expected {
        return Err(NaError::ShapeMismatch {
            what,
            expected: expected.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    if !t.is_contiguous() {
        return Err(NaError::BadStrides {
            shape: t.shape().to_vec(),
            strides: t.strides().to_vec(),
            len: t.data().len(),
        });
    }
    Ok(())
}

pub(crate) fn weights_operand<'a, T: Element>(
    a: &'a CompactWeights<T>,
    problem: &ProblemSpec,
    params: &NaParams,
    what: &'static str,
) -> Result<Cow<'a, Tensor<T>>> {
    let t = operand(
        &a.data,
        &problem.shape_with_last(params.window_volume()),
        what,
    )?;
    if a.valid.len() != t.len() {
        return Err(NaError::ShapeMismatch {
            what,
            expected: vec![t.len()],
            got: vec![a.valid.len()],
        });
    }
    Ok(t)
}

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn check(problem: &ProblemSpec, params: &NaParams) -> Result<Geometry> {
    validate(problem, params)?;
    Ok(Geometry::new(problem, params))
}

/// Scaled dot products of every query with each slot of its neighborhood.
/// Invalid slots hold the dtype's most negative finite value.
pub fn pn<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
) -> Result<CompactWeights<T>> {
    let geo = check(problem, params)?;
    let shape = problem.qkv_shape();
    let a = operand(a, &shape, "pn lhs")?;
    let b = operand(b, &shape, "pn rhs")?;
    let (n, d, l) = (geo.tokens, problem.head_dim, geo.volume);
    let scale = T::from_f64(params.scale);
    let rows = problem.batch * problem.heads * n;

    let mut data = vec![T::zero(); rows * l];
    let mut valid = vec![false; rows * l];
    data.par_chunks_mut(l)
        .zip(valid.par_chunks_mut(l))
        .enumerate()
        .for_each(|(row, (out, ok))| {
            let (g, t) = (row / n, row % n);
            let q = geo.coord(t);
            let qa = &a.data()[row * d..][..d];
            for (w, slot) in geo.slots(q).enumerate() {
                match slot {
                    Some(c) => {
                        let kr = (g * n + geo.linear(c)) * d;
                        out[w] = scale * dot(qa, &b.data()[kr..kr + d]);
                        ok[w] = true;
                    }
                    None => out[w] = T::masked(),
                }
            }
        });
    Ok(CompactWeights {
        data: Tensor::from_vec(&problem.shape_with_last(l), data)?,
        valid,
    })
}

/// Softmax over the valid slots of each query, plus the per-query log-sum-exp.
pub fn masked_softmax<T: Element>(a: &CompactWeights<T>) -> (CompactWeights<T>, LseTensor<T>) {
    let l = a.volume();
    let src = a.data.to_contiguous();
    let mut data = vec![T::zero(); src.len()];
    let rows = src.len() / l;
    let mut lse = vec![T::zero(); rows];
    data.par_chunks_mut(l)
        .zip(lse.par_iter_mut())
        .enumerate()
        .for_each(|(row, (out, lse))| {
            let x = &src.data()[row * l..][..l];
            let ok = &a.valid[row * l..][..l];
            let mut max = T::neg_infinity();
            for w in 0..l {
                if ok[w] && x[w] > max {
                    max = x[w];
                }
            }
            let mut sum = T::zero();
            for w in 0..l {
                if ok[w] {
                    out[w] = (x[w] - max).exp();
                    sum += out[w];
                }
            }
            let inv = T::one() / sum;
            for w in 0..l {
                out[w] *= inv;
            }
            *lse = max + sum.ln();
        });
    let token_shape = &src.shape()[..src.shape().len() - 1];
    (
        CompactWeights {
            data: Tensor::from_vec(src.shape(), data).expect("same shape"),
            valid: a.valid.clone(),
        },
        LseTensor(Tensor::from_vec(token_shape, lse).expect("one value per query")),
    )
}

/// `out[q] = sum_w a[q, w] * b[decode(q, w)]` over valid slots.
pub fn nn<T: Element>(
    a: &CompactWeights<T>,
    b: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
) -> Result<Tensor<T>> {
    let geo = check(problem, params)?;
    let w8 = weights_operand(a, problem, params, "nn weights")?;
    let b = operand(b, &problem.qkv_shape(), "nn rhs")?;
    let (n, d, l) = (geo.tokens, problem.head_dim, geo.volume);
    let mut out = Tensor::zeros(&problem.qkv_shape());
    out.data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(row, o)| {
            let (g, t) = (row / n, row % n);
            let q = geo.coord(t);
            let wr = &w8.data()[row * l..][..l];
            for ((w, &p), slot) in wr.iter().enumerate().zip(geo.slots(q)) {
                if !a.valid[row * l + w] {
                    continue;
                }
                let c = slot.expect("valid slot decodes");
                let vr = &b.data()[(g * n + geo.linear(c)) * d..][..d];
                for (o, &v) in o.iter_mut().zip(vr) {
                    *o += p * v;
                }
            }
        });
    Ok(out)
}

/// `out[c] = sum over queries q attending to c of a[q, slot(c)] * b[q]`.
pub fn in_<T: Element>(
    a: &CompactWeights<T>,
    b: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
) -> Result<Tensor<T>> {
    let geo = check(problem, params)?;
    let w8 = weights_operand(a, problem, params, "in weights")?;
    let b = operand(b, &problem.qkv_shape(), "in rhs")?;
    let (n, d, l) = (geo.tokens, problem.head_dim, geo.volume);
    let inv = geo.inverse_tables();
    let mut out = Tensor::zeros(&problem.qkv_shape());
    out.data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(row, o)| {
            let (g, t) = (row / n, row % n);
            let c = geo.coord(t);
            for &(q0, o0) in &inv[0][c[0]] {
                for &(q1, o1) in &inv[1][c[1]] {
                    for &(q2, o2) in &inv[2][c[2]] {
                        let qrow = g * n + geo.linear([q0, q1, q2]);
                        let w = geo.slot_index([o0, o1, o2]);
                        let p = w8.data()[qrow * l + w];
                        let br = &b.data()[qrow * d..][..d];
                        for (o, &x) in o.iter_mut().zip(br) {
                            *o += p * x;
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Output, log-sum-exp and attention weights of the forward pass.
pub type ForwardResult<T> = (Tensor<T>, LseTensor<T>, CompactWeights<T>);

pub fn na_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
) -> Result<ForwardResult<T>> {
    let logits = pn(q, k, problem, params)?;
    let (p, lse) = masked_softmax(&logits);
    let out = nn(&p, v, problem, params)?;
    Ok((out, lse, p))
}

/// Gradient of the logits from `P`, `dP` and `D = rowsum(dO * O)`. Invalid slots are 0.
pub(crate) fn softmax_backward<T: Element>(
    p: &CompactWeights<T>,
    dp: &CompactWeights<T>,
    d_out: &Tensor<T>,
    out: &Tensor<T>,
    head_dim: usize,
) -> CompactWeights<T> {
    let l = p.volume();
    let (pd, dpd) = (p.data.to_contiguous(), dp.data.to_contiguous());
    let mut data = vec![T::zero(); pd.len()];
    data.par_chunks_mut(l).enumerate().for_each(|(row, da)| {
        let dsum = dot(
            &d_out.data()[row * head_dim..][..head_dim],
            &out.data()[row * head_dim..][..head_dim],
        );
        for w in 0..l {
            let i = row * l + w;
            if p.valid[i] {
                da[w] = pd.data()[i] * (dpd.data()[i] - dsum);
            }
        }
    });
    CompactWeights {
        data: Tensor::from_vec(pd.shape(), data).expect("same shape"),
        valid: p.valid.clone(),
    }
}

pub(crate) fn scaled<T: Element>(t: Tensor<T>, scale: f64) -> Tensor<T> {
    let s = T::from_f64(scale);
    let mut t = t;
    t.data_mut().iter_mut().for_each(|x| *x *= s);
    t
}

/// Gradients `(dq, dk, dv)` composed from the three operators, reusing the
/// attention weights kept from the forward pass.
#[allow(clippy::too_many_arguments)]
pub fn na_backward<T: Element>(
    d_out: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    p: &CompactWeights<T>,
    out: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = problem.qkv_shape();
    let d_out = operand(d_out, &shape, "output gradient")?;
    let out = operand(out, &shape, "forward output")?;
    let unit = params.with_scale(1.0);
    let dp = pn(&d_out, v, problem, &unit)?;
    let da = softmax_backward(p, &dp, &d_out, &out, problem.head_dim);
    let dq = scaled(nn(&da, k, problem, params)?, params.scale);
    let dk = scaled(in_(&da, q, problem, params)?, params.scale);
    let dv = in_(p, &d_out, problem, params)?;
    Ok((dq, dk, dv))
}

/// Largest token count the dense oracle will materialize.
pub const ORACLE_TOKEN_LIMIT: usize = 4096;

/// Dense softmax attention over the full `n x n` logit matrix with masked
/// entries set to `-inf`. Shares nothing with the operators above except the
/// membership predicate.
pub fn dense_oracle<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    problem: &ProblemSpec,
    params: &NaParams,
) -> Result<Tensor<T>> {
    validate(problem, params)?;
    let n = problem.num_tokens();
    if n > ORACLE_TOKEN_LIMIT {
        return Err(NaError::ProblemTooLargeForOracle {
            tokens: n,
            limit: ORACLE_TOKEN_LIMIT,
        });
    }
    let shape = problem.qkv_shape();
    let (q, k, v) = (
        operand(q, &shape, "query")?,
        operand(k, &shape, "key")?,
        operand(v, &shape, "value")?,
    );
    let d = problem.head_dim;
    let rank = problem.rank();
    let unravel = |mut t: usize| -> [usize; MAX_RANK] {
        let mut c = [0; MAX_RANK];
        for a in (0..rank).rev() {
            c[a] = t % problem.extents[a];
            t /= problem.extents[a];
        }
        c
    };
    let coords: Vec<_> = (0..n).map(unravel).collect();
    let mask: Vec<bool> = (0..n * n)
        .map(|ij| {
            neighborhood_contains(
                &coords[ij / n][..rank],
                &coords[ij % n][..rank],
                problem,
                params,
            )
        })
        .collect();
    let scale = T::from_f64(params.scale);
    let mut out = Tensor::zeros(&shape);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let od = out.data_mut();
    let mut logits = vec![T::neg_infinity(); n];
    for g in 0..problem.batch * problem.heads {
        let base = g * n * d;
        for i in 0..n {
            let row = &mask[i * n..][..n];
            let qi = &qd[base + i * d..][..d];
            let mut max = T::neg_infinity();
            for j in 0..n {
                if row[j] {
                    let kj = &kd[base + j * d..][..d];
                    let mut s = T::zero();
                    for x in 0..d {
                        s += qi[x] * kj[x];
                    }
                    logits[j] = s * scale;
                    max = max.max(logits[j]);
                }
            }
            let mut sum = T::zero();
            for j in 0..n {
                if row[j] {
                    logits[j] = (logits[j] - max).exp();
                    sum += logits[j];
                }
            }
            let o = &mut od[base + i * d..][..d];
            for j in 0..n {
                if row[j] {
                    let p = logits[j] / sum;
                    for (ox, &vx) in o.iter_mut().zip(&vd[base + j * d..][..d]) {
                        *ox += p * vx;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::AxisParams;

    fn p1(extent: usize, axis: AxisParams, d: usize) -> (ProblemSpec, NaParams) {
        (
            ProblemSpec::new(1, 1, &[extent], d),
            NaParams::new(vec![axis], d),
        )
    }

    #[test]
    fn pn_of_ones() {
        let (p, params) = p1(5, AxisParams::window(3), 1);
        let ones = Tensor::<f64>::filled(&p.qkv_shape(), 1.0);
        let a = pn(&ones, &ones, &p, &params.with_scale(1.0)).unwrap();
        assert!(a.valid.iter().all(|&v| v));
        assert!(a.data.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pn_window_one_is_self_dot() {
        let (p, params) = p1(6, AxisParams::window(1), 4);
        let q = Tensor::<f64>::random(&p.qkv_shape(), 1);
        let k = Tensor::<f64>::random(&p.qkv_shape(), 2);
        let a = pn(&q, &k, &p, &params).unwrap();
        for t in 0..6 {
            let expect = params.scale * dot(&q.data()[t * 4..][..4], &k.data()[t * 4..][..4]);
            assert_eq!(a.data.data()[t], expect);
        }
    }

    #[test]
    fn pn_matches_dense_logits() {
        let (p, params) = p1(6, AxisParams::window(3), 3);
        let q = Tensor::<f64>::random(&p.qkv_shape(), 3);
        let k = Tensor::<f64>::random(&p.qkv_shape(), 4);
        let a = pn(&q, &k, &p, &params).unwrap();
        for i in 0..6 {
            let mut row = Vec::new();
            for j in 0..6 {
                if neighborhood_contains(&[i], &[j], &p, &params) {
                    let mut s = 0.0;
                    for x in 0..3 {
                        s += q.get(&[0, 0, i, x]) * k.get(&[0, 0, j, x]);
                    }
                    row.push(s * params.scale);
                }
            }
            let got: Vec<f64> = (0..3).map(|w| a.data.get(&[0, 0, i, w])).collect();
            for (g, e) in got.iter().zip(&row) {
                assert!((g - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pn_rejects_bad_inputs() {
        let (p, params) = p1(5, AxisParams::window(3), 2);
        let good = Tensor::<f64>::zeros(&p.qkv_shape());
        let wrong = Tensor::<f64>::zeros(&[1, 1, 4, 2]);
        assert!(matches!(
            pn(&good, &wrong, &p, &params),
            Err(NaError::ShapeMismatch { .. })
        ));
        let mut nan = good.clone();
        nan.data_mut()[3] = f64::NAN;
        assert!(matches!(
            pn(&nan, &good, &p, &params),
            Err(NaError::NonFiniteInput(_))
        ));
    }

    #[test]
    fn softmax_cases() {
        let data =
            Tensor::<f64>::from_vec(&[1, 1, 2, 3], vec![0.5, 9.0, 9.0, 2.0, 2.0, 2.0]).unwrap();
        let a = CompactWeights {
            data,
            valid: vec![true, false, false, true, true, true],
        };
        let (p, lse) = masked_softmax(&a);
        assert_eq!(&p.data.data()[..3], &[1.0, 0.0, 0.0]);
        for w in 3..6 {
            assert!((p.data.data()[w] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(lse.0.data()[0], 0.5);

        let shifted = a.map_valid(|_, x| x + 4.0);
        let (p2, lse2) = masked_softmax(&shifted);
        assert!(p2.data.max_abs_diff(&p.data) < 1e-15);
        assert!((lse2.0.data()[1] - lse.0.data()[1] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn nn_identity_and_gather() {
        let (p, params) = p1(5, AxisParams::window(1), 3);
        let v = Tensor::<f64>::random(&p.qkv_shape(), 9);
        let ones = CompactWeights {
            data: Tensor::filled(&[1, 1, 5, 1], 1.0),
            valid: vec![true; 5],
        };
        assert!(nn(&ones, &v, &p, &params).unwrap().bitwise_eq(&v));

        let (p, params) = p1(5, AxisParams::window(3), 3);
        let v = Tensor::<f64>::random(&p.qkv_shape(), 9);
        let onehot = CompactWeights {
            data: Tensor::from_fn(&[1, 1, 5, 3], |i| if i[3] == 2 { 1.0 } else { 0.0 }),
            valid: vec![true; 15],
        };
        let out = nn(&onehot, &v, &p, &params).unwrap();
        let geo = Geometry::new(&p, &params);
        for t in 0..5 {
            let c = geo.decode([t, 0, 0], 2).unwrap()[0];
            for x in 0..3 {
                assert_eq!(out.get(&[0, 0, t, x]), v.get(&[0, 0, c, x]));
            }
        }
    }

    #[test]
    fn in_boundary_token_receives_two_queries() {
        let (p, params) = p1(5, AxisParams::window(3), 1);
        let b = Tensor::<f64>::from_vec(&p.qkv_shape(), vec![1.0, 10.0, 100.0, 1000.0, 10000.0])
            .unwrap();
        let a = CompactWeights {
            data: Tensor::filled(&[1, 1, 5, 3], 1.0),
            valid: vec![true; 15],
        };
        let out = in_(&a, &b, &p, &params).unwrap();
        assert_eq!(out.data()[0], 11.0);
        assert_eq!(out.data()[1], 111.0);
        assert_eq!(out.data()[2], 11111.0);
        assert_eq!(out.data()[4], 11000.0);
    }

    #[test]
    fn in_window_one_is_elementwise() {
        let (p, params) = p1(4, AxisParams::window(1), 2);
        let b = Tensor::<f64>::random(&p.qkv_shape(), 5);
        let a = CompactWeights {
            data: Tensor::from_vec(&[1, 1, 4, 1], vec![2.0, 3.0, 4.0, 5.0]).unwrap(),
            valid: vec![true; 4],
        };
        let out = in_(&a, &b, &p, &params).unwrap();
        for t in 0..4 {
            for x in 0..2 {
                assert_eq!(
                    out.get(&[0, 0, t, x]),
                    a.data.data()[t] * b.get(&[0, 0, t, x])
                );
            }
        }
    }

    #[test]
    fn forward_window_one_returns_v() {
        let p = ProblemSpec::new(2, 2, &[4, 3], 5);
        let params = NaParams::new(vec![AxisParams::window(1); 2], 5);
        let q = Tensor::<f64>::random(&p.qkv_shape(), 1);
        let k = Tensor::<f64>::random(&p.qkv_shape(), 2);
        let v = Tensor::<f64>::random(&p.qkv_shape(), 3);
        let (out, _, _) = na_forward(&q, &k, &v, &p, &params).unwrap();
        assert!(out.bitwise_eq(&v));
        assert!(dense_oracle(&q, &k, &v, &p, &params)
            .unwrap()
            .bitwise_eq(&v));
    }

    #[test]
    fn backward_zero_and_window_one() {
        let p = ProblemSpec::new(1, 2, &[5], 3);
        let params = NaParams::new(vec![AxisParams::window(3)], 3);
        let q = Tensor::<f64>::random(&p.qkv_shape(), 1);
        let k = Tensor::<f64>::random(&p.qkv_shape(), 2);
        let v = Tensor::<f64>::random(&p.qkv_shape(), 3);
        let (out, _, pw) = na_forward(&q, &k, &v, &p, &params).unwrap();
        let zero = Tensor::zeros(&p.qkv_shape());
        let (dq, dk, dv) = na_backward(&zero, &q, &k, &v, &pw, &out, &p, &params).unwrap();
        for g in [dq, dk, dv] {
            assert!(g.data().iter().all(|&x| x == 0.0));
        }

        let params = NaParams::new(vec![AxisParams::window(1)], 3);
        let (out, _, pw) = na_forward(&q, &k, &v, &p, &params).unwrap();
        let d_out = Tensor::<f64>::random(&p.qkv_shape(), 4);
        let (dq, dk, dv) = na_backward(&d_out, &q, &k, &v, &pw, &out, &p, &params).unwrap();
        assert!(dv.bitwise_eq(&d_out));
        assert!(dq.data().iter().all(|&x| x == 0.0));
        assert!(dk.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn oracle_rejects_large_problems() {
        let p = ProblemSpec::new(1, 1, &[4097], 1);
        let params = NaParams::new(vec![AxisParams::window(3)], 1);
        let t = Tensor::<f32>::zeros(&p.qkv_shape());
        assert!(matches!(
            dense_oracle(&t, &t, &t, &p, &params),
            Err(NaError::ProblemTooLargeForOracle { tokens: 4097, .. })
        ));
    }
}
