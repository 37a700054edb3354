//! Spatial (6-D) vectors in angular-then-linear order, Plücker transforms and
//! rigid-body inertias.

use crate::se3::Vec3;
use nalgebra::{Matrix3, Matrix6, Vector6};

pub type SVec = Vector6<f64>;
pub type SMat = Matrix6<f64>;

#[inline]
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub fn ang(v: &SVec) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

#[inline]
pub fn lin(v: &SVec) -> Vec3 {
    Vec3::new(v[3], v[4], v[5])
}

#[inline]
pub fn join(a: Vec3, l: Vec3) -> SVec {
    SVec::new(a.x, a.y, a.z, l.x, l.y, l.z)
}

/// Motion cross product `v × m`.
#[inline]
pub fn cross_motion(v: &SVec, m: &SVec) -> SVec {
    let (w, vl) = (ang(v), lin(v));
    let (mw, ml) = (ang(m), lin(m));
    join(w.cross(&mw), w.cross(&ml) + vl.cross(&mw))
}

/// Force cross product `v ×* f`.
#[inline]
pub fn cross_force(v: &SVec, f: &SVec) -> SVec {
    let (w, vl) = (ang(v), lin(v));
    let (n, ff) = (ang(f), lin(f));
    join(w.cross(&n) + vl.cross(&ff), w.cross(&ff))
}

/// Plücker transform from a parent frame to a child frame whose pose in the
/// parent is `(rot, pos)`.
#[derive(Clone, Copy, Debug)]
pub struct Xform {
    /// child-from-parent rotation, `rotᵀ`
    e: Matrix3<f64>,
    /// child origin in parent coordinates
    r: Vec3,
}

impl Xform {
    pub fn from_pose(rot: &Matrix3<f64>, pos: &Vec3) -> Self {
        Xform { e: rot.transpose(), r: *pos }
    }

    pub fn identity() -> Self {
        Xform { e: Matrix3::identity(), r: Vec3::zeros() }
    }

    /// Parent motion vector expressed in the child frame.
    #[inline]
    pub fn motion(&self, v: &SVec) -> SVec {
        let w = ang(v);
        join(self.e * w, self.e * (lin(v) - self.r.cross(&w)))
    }

    /// Child force vector expressed in the parent frame (`Xᵀ f`).
    #[inline]
    pub fn force_to_parent(&self, f: &SVec) -> SVec {
        let n = self.e.transpose() * ang(f);
        let ff = self.e.transpose() * lin(f);
        join(n + self.r.cross(&ff), ff)
    }

    pub fn matrix(&self) -> SMat {
        let mut m = SMat::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.e);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.e);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-self.e * skew(&self.r)));
        m
    }

    /// `Xᵀ I X`: child inertia expressed in the parent frame.
    pub fn inertia_to_parent(&self, inertia: &SMat) -> SMat {
        // X = diag(E, E) · [[1, 0], [-r×, 1]]
        let et = self.e.transpose();
        let a = et * inertia.fixed_view::<3, 3>(0, 0) * self.e;
        let b = et * inertia.fixed_view::<3, 3>(0, 3) * self.e;
        let m = et * inertia.fixed_view::<3, 3>(3, 3) * self.e;
        let rx = skew(&self.r);
        let bt_mr = b.transpose() - m * rx;
        let mut out = SMat::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&(a - b * rx + rx * bt_mr));
        let upper = b + rx * m;
        out.fixed_view_mut::<3, 3>(0, 3).copy_from(&upper);
        out.fixed_view_mut::<3, 3>(3, 0).copy_from(&upper.transpose());
        out.fixed_view_mut::<3, 3>(3, 3).copy_from(&m);
        out
    }
}

/// Spatial inertia about the body frame origin of a body with mass `m`,
/// center of mass `com` and rotational inertia `ic` about the COM.
pub fn rigid_inertia(m: f64, com: &Vec3, ic: &Matrix3<f64>) -> SMat {
    let cx = skew(com);
    let mut out = SMat::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&(ic + m * cx * cx.transpose()));
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(m * cx));
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(m * cx.transpose()));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&(m * Matrix3::identity()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::rotvec_to_matrix;

    #[test]
    fn transform_matches_matrix_form() {
        let x = Xform::from_pose(&rotvec_to_matrix(&Vec3::new(0.3, -0.2, 0.5)), &Vec3::new(1.0, 2.0, -0.5));
        let v = SVec::new(0.1, 0.2, 0.3, -1.0, 0.5, 2.0);
        assert!((x.motion(&v) - x.matrix() * v).norm() < 1e-14);
        assert!((x.force_to_parent(&v) - x.matrix().transpose() * v).norm() < 1e-14);
    }

    #[test]
    fn cross_products_are_dual() {
        let v = SVec::new(0.3, -0.1, 0.2, 1.0, 0.0, -2.0);
        let m = SVec::new(-0.5, 0.4, 0.1, 0.3, 0.2, 0.9);
        let f = SVec::new(1.0, 2.0, -1.0, 0.5, 0.1, 0.3);
        // (v×m)·f = −m·(v×*f)
        assert!((cross_motion(&v, &m).dot(&f) + m.dot(&cross_force(&v, &f))).abs() < 1e-14);
    }

    #[test]
    fn inertia_transform_matches_matrix_form() {
        let x = Xform::from_pose(&rotvec_to_matrix(&Vec3::new(-0.4, 0.7, 0.1)), &Vec3::new(0.2, -1.0, 0.6));
        let i = rigid_inertia(1.7, &Vec3::new(0.1, -0.3, 0.2), &Matrix3::new(0.05, 0.01, 0.0, 0.01, 0.04, 0.002, 0.0, 0.002, 0.03));
        let dense = x.matrix().transpose() * i * x.matrix();
        assert!((x.inertia_to_parent(&i) - dense).norm() < 1e-13);
    }
}
