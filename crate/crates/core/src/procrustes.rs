//! Rotation-only weighted Procrustes through a 3×3 Jacobi SVD, with its
//! analytic backward pass and an engine primitive wrapping both.

use std::rc::Rc;

use engine::{CustomOp, EngineError, Scalar, Tensor, Var};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::so3::Rotation;

/// Sign-preserving floor on `σ_j² − σ_i²` in the backward pass.
pub const SPECTRUM_EPS: f64 = 1e-8;
/// `σ₂ ≤ RANK_TOL · σ₁` counts as rank below two.
pub const RANK_TOL: f64 = 1e-10;
const MIN_ACTIVE_WEIGHT: f64 = 1e-6;

/// Correspondences `x_i^Q ↔ x_i^R` with confidences `c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPointPairs {
    p_query: Vec<[f64; 3]>,
    p_ref: Vec<[f64; 3]>,
    weights: Vec<f64>,
}

impl WeightedPointPairs {
    pub fn new(p_query: Vec<[f64; 3]>, p_ref: Vec<[f64; 3]>, weights: Vec<f64>) -> Result<Self> {
        let n = p_query.len();
        if p_ref.len() != n || weights.len() != n {
            return Err(CoreError::Shape(format!(
                "point pairs need equal lengths, got {} / {} / {}",
                n,
                p_ref.len(),
                weights.len()
            )));
        }
        if n < 3 {
            return Err(CoreError::Degenerate("fewer than 3 point pairs"));
        }
        let finite = |p: &[f64; 3]| p.iter().all(|v| v.is_finite());
        if !p_query.iter().all(finite) || !p_ref.iter().all(finite) || !weights.iter().all(|w| w.is_finite()) {
            return Err(CoreError::NonFinite("point pairs"));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(CoreError::Config("negative correspondence weight".into()));
        }
        if weights.iter().filter(|&&w| w > MIN_ACTIVE_WEIGHT).count() < 3 {
            return Err(CoreError::Degenerate("fewer than 3 pairs carry weight"));
        }
        Ok(Self { p_query, p_ref, weights })
    }

    pub fn uniform(p_query: Vec<[f64; 3]>, p_ref: Vec<[f64; 3]>) -> Result<Self> {
        let w = vec![1.0; p_query.len()];
        Self::new(p_query, p_ref, w)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn p_query(&self) -> &[[f64; 3]] {
        &self.p_query
    }

    pub fn p_ref(&self) -> &[[f64; 3]] {
        &self.p_ref
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `H = Σ c_i x_i^Q (x_i^R)ᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let mut h = Matrix3::zeros();
        for ((q, r), &c) in self.p_query.iter().zip(&self.p_ref).zip(&self.weights) {
            h += Vector3::from(*q) * Vector3::from(*r).transpose() * c;
        }
        h
    }

    /// `Σ c_i ‖x_i^R − R x_i^Q‖²`.
    pub fn objective(&self, r: &Rotation) -> f64 {
        self.p_query
            .iter()
            .zip(&self.p_ref)
            .zip(&self.weights)
            .map(|((q, p), &c)| c * (Vector3::from(*p) - r.matrix() * Vector3::from(*q)).norm_squared())
            .sum()
    }
}

/// `H = U diag(s) Vᵀ` with `s` sorted descending and `U`, `V` orthogonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

/// One-sided Jacobi SVD of a 3×3 matrix.
pub fn svd3(h: &Matrix3<f64>) -> Svd3 {
    let mut a = *h;
    let mut v = Matrix3::<f64>::identity();
    for _ in 0..64 {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let alpha = a.column(p).norm_squared();
            let beta = a.column(q).norm_squared();
            let gamma = a.column(p).dot(&a.column(q));
            if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut a, &mut v] {
                for i in 0..3 {
                    let x = m[(i, p)];
                    let y = m[(i, q)];
                    m[(i, p)] = c * x - s * y;
                    m[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms = [a.column(0).norm(), a.column(1).norm(), a.column(2).norm()];
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s = Vector3::new(norms[order[0]], norms[order[1]], norms[order[2]]);
    let v = Matrix3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);

    let tiny = s[0] * 1e-13;
    let mut cols: [Vector3<f64>; 3] = [Vector3::zeros(); 3];
    for (k, &src) in order.iter().enumerate() {
        cols[k] = if s[k] > tiny && s[k] > 0.0 { a.column(src) / s[k] } else { Vector3::zeros() };
    }
    if cols[0] == Vector3::zeros() {
        cols[0] = Vector3::x();
    }
    if cols[1] == Vector3::zeros() {
        let e = if cols[0].x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        cols[1] = (e - cols[0] * cols[0].dot(&e)).normalize();
    }
    if cols[2] == Vector3::zeros() {
        cols[2] = cols[0].cross(&cols[1]);
    }
    Svd3 { u: Matrix3::from_columns(&cols), s, v }
}

/// The closest proper rotation for covariance `h`, with the decomposition used.
pub fn rotation_from_covariance(h: &Matrix3<f64>) -> Result<(Rotation, Svd3)> {
    if !h.iter().all(|x| x.is_finite()) {
        return Err(CoreError::NonFinite("covariance"));
    }
    let svd = svd3(h);
    if !(svd.s[0] > 0.0) || svd.s[1] <= RANK_TOL * svd.s[0] {
        return Err(CoreError::Degenerate("covariance has rank below 2"));
    }
    Ok((Rotation::from_matrix_unchecked(compose_rotation(&svd)), svd))
}

fn reflection_sign(svd: &Svd3) -> f64 {
    (svd.v * svd.u.transpose()).determinant().signum()
}

fn compose_rotation(svd: &Svd3) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, reflection_sign(svd)));
    svd.v * d * svd.u.transpose()
}

/// `argmin_R Σ c_i ‖x_i^R − R x_i^Q‖²` over SO(3), without centroid subtraction.
pub fn weighted_procrustes(pairs: &WeightedPointPairs) -> Result<Rotation> {
    rotation_from_covariance(&pairs.covariance()).map(|(r, _)| r)
}

/// `∂L/∂H` given `∂L/∂R` for `R = V diag(1,1,d) Uᵀ`.
pub fn rotation_backward(svd: &Svd3, grad_r: &Matrix3<f64>) -> Matrix3<f64> {
    let (u, s, v) = (svd.u, svd.s, svd.v);
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, reflection_sign(svd)));
    let u_bar = grad_r.transpose() * v * d;
    let v_bar = grad_r * u * d;
    let f = Matrix3::from_fn(|i, j| {
        if i == j {
            return 0.0;
        }
        let den = s[j] * s[j] - s[i] * s[i];
        let den = if den.abs() < SPECTRUM_EPS { SPECTRUM_EPS.copysign(den) } else { den };
        1.0 / den
    });
    let j = f.component_mul(&(u.transpose() * u_bar - u_bar.transpose() * u));
    let k = f.component_mul(&(v.transpose() * v_bar - v_bar.transpose() * v));
    let sm = Matrix3::from_diagonal(&s);
    u * (j * sm + sm * k) * v.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGradients {
    pub p_query: Vec<[f64; 3]>,
    pub p_ref: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

/// Gradients of `L(weighted_procrustes(pairs))` from `∂L/∂R`.
pub fn procrustes_backward(pairs: &WeightedPointPairs, grad_r: &Matrix3<f64>) -> Result<PairGradients> {
    let (_, svd) = rotation_from_covariance(&pairs.covariance())?;
    let hb = rotation_backward(&svd, grad_r);
    let mut out = PairGradients {
        p_query: Vec::with_capacity(pairs.len()),
        p_ref: Vec::with_capacity(pairs.len()),
        weights: Vec::with_capacity(pairs.len()),
    };
    for ((q, r), &c) in pairs.p_query.iter().zip(&pairs.p_ref).zip(&pairs.weights) {
        let (q, r) = (Vector3::from(*q), Vector3::from(*r));
        let dq = hb * r * c;
        let dr = hb.transpose() * q * c;
        out.p_query.push([dq.x, dq.y, dq.z]);
        out.p_ref.push([dr.x, dr.y, dr.z]);
        out.weights.push(q.dot(&(hb * r)));
    }
    Ok(out)
}

/// Whether rotation-loss gradients pass through the SVD solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdGradient {
    #[default]
    Backprop,
    Detached,
}

/// Engine primitive mapping covariances `[3,3]` or `[B,3,3]` to rotations of
/// the same shape. Kernels run in `f64` regardless of the graph scalar.
#[derive(Debug, Default, Clone, Copy)]
pub struct SvdRotationOp;

pub const OP_NAME: &str = "svd3-batched";

fn batch_count(shape: &[usize]) -> std::result::Result<usize, EngineError> {
    match shape {
        [3, 3] => Ok(1),
        [b, 3, 3] => Ok(*b),
        _ => Err(EngineError::ShapeMismatch { op: OP_NAME, shapes: vec![shape.to_vec()] }),
    }
}

fn block<T: Scalar>(t: &Tensor<T>, b: usize) -> Matrix3<f64> {
    let d = &t.data()[9 * b..9 * b + 9];
    Matrix3::from_fn(|i, j| d[3 * i + j].as_f64())
}

fn write_block<T: Scalar>(out: &mut [T], b: usize, m: &Matrix3<f64>) {
    for i in 0..3 {
        for j in 0..3 {
            out[9 * b + 3 * i + j] = T::from_f64_lossy(m[(i, j)]);
        }
    }
}

impl<T: Scalar> CustomOp<T> for SvdRotationOp {
    fn name(&self) -> &str {
        OP_NAME
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> engine::Result<Tensor<T>> {
        let [h] = inputs else {
            return Err(EngineError::Arity { op: OP_NAME, expected: 1, got: inputs.len() });
        };
        let nb = batch_count(h.shape())?;
        let mut out = vec![T::zero(); h.numel()];
        for b in 0..nb {
            let (r, _) = rotation_from_covariance(&block(h, b)).map_err(|e| match e {
                CoreError::NonFinite(_) => EngineError::NonFinite(f64::NAN),
                e => EngineError::Custom { op: OP_NAME.into(), msg: e.to_string() },
            })?;
            write_block(&mut out, b, r.matrix());
        }
        Tensor::new(h.shape().to_vec(), out)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let h = inputs[0];
        let nb = h.numel() / 9;
        let mut out = vec![T::zero(); h.numel()];
        for b in 0..nb {
            let svd = svd3(&block(h, b));
            write_block(&mut out, b, &rotation_backward(&svd, &block(grad, b)));
        }
        vec![Some(Tensor::new(h.shape().to_vec(), out).expect("shape preserved"))]
    }
}

/// Graph node `R = wSVD(H)` for `H` of shape `[3,3]` or `[B,3,3]`.
pub fn rotation_var<'g, T: Scalar>(h: Var<'g, T>, mode: SvdGradient) -> Result<Var<'g, T>> {
    let h = match mode {
        SvdGradient::Backprop => h,
        SvdGradient::Detached => h.detach()?,
    };
    Ok(h.graph().custom(Rc::new(SvdRotationOp), &[h])?)
}

/// Graph node for the weighted solve: `x_q`, `x_r` are `[N,3]`, `c` is `[N]`.
pub fn weighted_procrustes_var<'g, T: Scalar>(
    x_q: Var<'g, T>,
    x_r: Var<'g, T>,
    c: Var<'g, T>,
    mode: SvdGradient,
) -> Result<Var<'g, T>> {
    let shape = x_q.shape();
    if shape.len() != 2 || shape[1] != 3 || x_r.shape() != shape || c.shape() != [shape[0]] {
        return Err(CoreError::Shape(format!(
            "weighted solve expects [N,3], [N,3], [N]; got {:?}, {:?}, {:?}",
            shape,
            x_r.shape(),
            c.shape()
        )));
    }
    let n = shape[0];
    let weighted = x_q.mul(c.reshape(&[n, 1])?.broadcast_to(&[n, 3])?)?;
    let h = weighted.t()?.matmul(x_r)?;
    rotation_var(h, mode)
}
