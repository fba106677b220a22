//! Rotations, the 6D representation, Haar sampling and angular-error metrics.

use engine::{Scalar, Var};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Tolerance on `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOL: f64 = 1e-6;
const DEGENERATE_TOL: f64 = 1e-8;

/// Default accuracy thresholds in degrees.
pub const ACC_THRESHOLDS_DEG: [f64; 2] = [30.0, 15.0];

/// A proper rotation acting on column vectors, `x' = R x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Rotation {
    m: Matrix3<f64>,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl TryFrom<[[f64; 3]; 3]> for Rotation {
    type Error = CoreError;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|i, j| rows[i][j]))
    }
}

impl From<Rotation> for [[f64; 3]; 3] {
    fn from(r: Rotation) -> Self {
        let m = r.m;
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    /// Validates orthonormality and unit determinant.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("rotation matrix"));
        }
        let orth = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if orth > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(CoreError::NotRotation { orth_error: orth, det });
        }
        Ok(Self { m })
    }

    /// Row-major 9-vector.
    pub fn from_rows(rows: &[f64]) -> Result<Self> {
        if rows.len() != 9 {
            return Err(CoreError::Shape(format!("rotation needs 9 entries, got {}", rows.len())));
        }
        Self::from_matrix(Matrix3::from_row_slice(rows))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self { m }
    }

    /// Rodrigues rotation by `angle` radians about `axis` (normalized internally).
    pub fn about_axis(axis: [f64; 3], angle: f64) -> Result<Self> {
        let a = Vector3::from(axis);
        let n = a.norm();
        if !(n > DEGENERATE_TOL) || !angle.is_finite() {
            return Err(CoreError::Degenerate("rotation axis has zero length"));
        }
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_unchecked(a / n), angle);
        Ok(Self { m: *q.to_rotation_matrix().matrix() })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = self.m[(i, j)];
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self { m: self.m.transpose() }
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// `self · other`.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self { m: self.m * other.m }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.m * Vector3::from(p);
        [v.x, v.y, v.z]
    }

    pub fn angle(&self) -> f64 {
        geodesic_angle(&Rotation::identity(), self)
    }
}

/// Haar-uniform rotation from a unit quaternion built out of four standard normals.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n > 1e-12 {
            let q = UnitQuaternion::new_unchecked(Quaternion::new(w / n, x / n, y / n, z / n));
            return Rotation { m: *q.to_rotation_matrix().matrix() };
        }
    }
}

/// Haar-distributed rotation conditioned on its angle lying in `[lo, hi]` radians.
///
/// The angle density of a uniform rotation is `(1 − cos θ)/π`; it is sampled by
/// rejection within the interval and paired with a uniform axis.
pub fn random_rotation_in_range<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Result<Rotation> {
    if !(0.0 <= lo && lo <= hi && hi <= std::f64::consts::PI) {
        return Err(CoreError::Config(format!("angle range [{lo}, {hi}] outside [0, π]")));
    }
    let peak = 1.0 - hi.cos();
    let theta = if hi - lo < 1e-12 || peak <= 0.0 {
        lo
    } else {
        loop {
            let t = rng.gen_range(lo..=hi);
            if rng.gen::<f64>() * peak <= 1.0 - t.cos() {
                break t;
            }
        }
    };
    let axis = loop {
        let a = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if a.norm() > 1e-9 {
            break a;
        }
    };
    Rotation::about_axis([axis.x, axis.y, axis.z], theta)
}

/// Two stacked 3-vectors `(a1, a2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SixD(pub [f64; 6]);

impl SixD {
    pub fn a1(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn a2(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }
}

/// Gram-Schmidt: columns `[b1 b2 b1×b2]`.
pub fn sixd_to_rotation(v: &SixD) -> Result<Rotation> {
    if !v.0.iter().all(|x| x.is_finite()) {
        return Err(CoreError::NonFinite("6D vector"));
    }
    let a1 = v.a1();
    let a2 = v.a2();
    let n1 = a1.norm();
    if n1 <= DEGENERATE_TOL {
        return Err(CoreError::Degenerate("first 6D column has zero length"));
    }
    let b1 = a1 / n1;
    let r = a2 - b1 * b1.dot(&a2);
    let n2 = r.norm();
    if n2 <= DEGENERATE_TOL * a2.norm().max(1.0) {
        return Err(CoreError::Degenerate("6D columns are parallel"));
    }
    let b2 = r / n2;
    let b3 = b1.cross(&b2);
    Ok(Rotation { m: Matrix3::from_columns(&[b1, b2, b3]) })
}

pub fn rotation_to_sixd(r: &Rotation) -> SixD {
    let c0 = r.m.column(0);
    let c1 = r.m.column(1);
    SixD([c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]])
}

/// Graph version of [`sixd_to_rotation`] on a 6-element variable; returns a `[3, 3]` node.
pub fn sixd_to_rotation_var<'g, T: Scalar>(v: Var<'g, T>) -> Result<Var<'g, T>> {
    let v = v.reshape(&[6])?;
    let normalize = |x: Var<'g, T>| -> Result<Var<'g, T>> {
        let n = x.square()?.sum()?.add_scalar(1e-12)?.sqrt()?.reshape(&[1])?.broadcast_to(&[3])?;
        Ok(x.div(n)?)
    };
    let a1 = v.slice(0, 0, 3)?;
    let a2 = v.slice(0, 3, 6)?;
    let b1 = normalize(a1)?;
    let proj = b1.mul(a2)?.sum()?.reshape(&[1])?.broadcast_to(&[3])?;
    let b2 = normalize(a2.sub(b1.mul(proj)?)?)?;
    let b3 = cross_var(b1, b2)?;
    let g = v.graph();
    let rows = g.concat(&[b1.reshape(&[1, 3])?, b2.reshape(&[1, 3])?, b3.reshape(&[1, 3])?], 0)?;
    Ok(rows.t()?)
}

/// Cross product of two `[3]` variables.
pub fn cross_var<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    let c = |v: Var<'g, T>, i: usize| v.slice(0, i, i + 1);
    let x = c(a, 1)?.mul(c(b, 2)?)?.sub(c(a, 2)?.mul(c(b, 1)?)?)?;
    let y = c(a, 2)?.mul(c(b, 0)?)?.sub(c(a, 0)?.mul(c(b, 2)?)?)?;
    let z = c(a, 0)?.mul(c(b, 1)?)?.sub(c(a, 1)?.mul(c(b, 0)?)?)?;
    Ok(a.graph().concat(&[x, y, z], 0)?)
}

/// `arccos((Tr(Raᵀ Rb) − 1)/2)` with the argument clamped to `[−1, 1]`.
pub fn geodesic_angle(ra: &Rotation, rb: &Rotation) -> f64 {
    let tr = (ra.m.transpose() * rb.m).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn geodesic_angle_deg(ra: &Rotation, rb: &Rotation) -> f64 {
    geodesic_angle(ra, rb).to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_deg: f64,
    pub acc30: f64,
    pub acc15: f64,
    pub n: usize,
}

/// Fraction of errors strictly below `threshold_deg`.
pub fn accuracy_below(errors_deg: &[f64], threshold_deg: f64) -> f64 {
    if errors_deg.is_empty() {
        return 0.0;
    }
    errors_deg.iter().filter(|&&e| e < threshold_deg).count() as f64 / errors_deg.len() as f64
}

/// Mean error and strict-threshold accuracies at `thresholds_deg = [t_acc30, t_acc15]`.
pub fn compute_metrics(errors_deg: &[f64], thresholds_deg: [f64; 2]) -> Result<MetricsReport> {
    if errors_deg.is_empty() {
        return Err(CoreError::EmptyInput("angular errors"));
    }
    if let Some(&bad) = errors_deg.iter().find(|e| !(0.0..=180.0).contains(*e)) {
        return Err(CoreError::Config(format!("angular error {bad} outside [0, 180] degrees")));
    }
    let mae = errors_deg.iter().sum::<f64>() / errors_deg.len() as f64;
    Ok(MetricsReport {
        mae_deg: mae,
        acc30: accuracy_below(errors_deg, thresholds_deg[0]),
        acc15: accuracy_below(errors_deg, thresholds_deg[1]),
        n: errors_deg.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serde_roundtrip_validates() {
        let r = Rotation::about_axis([0.0, 0.0, 1.0], 0.3).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let back: Rotation = serde_json::from_str(&s).unwrap();
        assert!((r.matrix() - back.matrix()).abs().max() < 1e-15);
        assert!(serde_json::from_str::<Rotation>("[[2,0,0],[0,1,0],[0,0,1]]").is_err());
    }

    #[test]
    fn metrics_json_is_flat() {
        let m = compute_metrics(&[10.0, 20.0, 40.0], ACC_THRESHOLDS_DEG).unwrap();
        let v: serde_json::Value = serde_json::to_value(m).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 4);
        for k in ["mae_deg", "acc30", "acc15", "n"] {
            assert!(v.get(k).is_some());
        }
    }
}
