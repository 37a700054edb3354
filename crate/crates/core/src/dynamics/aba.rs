//! Articulated-body algorithm over the expanded body tree of a mechanism.

use super::spatial::{cross_force, cross_motion, join, rigid_inertia, SMat, SVec, Xform};
use super::{DynamicsError, JointKind, Mechanism, SimState};
use crate::se3::Vec3;
use nalgebra::{Matrix3, Rotation3};

#[derive(Default)]
struct Workspace {
    xf: Vec<Xform>,
    v: Vec<SVec>,
    c: Vec<SVec>,
    ia: Vec<SMat>,
    pa: Vec<SVec>,
    u: Vec<SVec>,
    d_inv: Vec<f64>,
    u_sc: Vec<f64>,
    a: Vec<SVec>,
}

impl Workspace {
    fn resize(&mut self, n: usize) {
        if self.xf.len() != n {
            self.xf.resize(n, Xform::identity());
            self.v.resize(n, SVec::zeros());
            self.c.resize(n, SVec::zeros());
            self.ia.resize(n, SMat::zeros());
            self.pa.resize(n, SVec::zeros());
            self.u.resize(n, SVec::zeros());
            self.d_inv.resize(n, 0.0);
            self.u_sc.resize(n, 0.0);
            self.a.resize(n, SVec::zeros());
        }
    }
}

thread_local! {
    static WORKSPACE: std::cell::RefCell<Workspace> = std::cell::RefCell::new(Workspace::default());
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Dof {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Clone, Debug)]
struct Body {
    parent: Option<usize>,
    mount_rot: Matrix3<f64>,
    mount_pos: Vec3,
    dof: Dof,
    axis: Vec3,
    subspace: SVec,
    inertia: SMat,
    mass: f64,
    com: Vec3,
    damping: f64,
    q_index: usize,
}

/// A mechanism compiled for repeated dynamics evaluation. Floating bases are
/// expanded into three prismatic and three revolute virtual joints carried by
/// massless bodies.
#[derive(Clone, Debug)]
pub struct Model {
    bodies: Vec<Body>,
    link_body: Vec<usize>,
    dof: usize,
    gravity: Vec3,
    substeps: usize,
}

impl Model {
    pub fn new(mech: &Mechanism) -> Model {
        let mut bodies: Vec<Body> = Vec::new();
        let mut link_body = Vec::with_capacity(mech.links.len());
        let mut q_index = 0;
        for (link, joint) in mech.links.iter().zip(&mech.joints) {
            let parent = joint.parent.map(|p| link_body[p]);
            let ic = Matrix3::from_diagonal(&Vec3::from(link.inertia_diag));
            let com = Vec3::from(link.com);
            let inertia = rigid_inertia(link.mass, &com, &ic);
            let mount_rot = joint.mount.rotation_matrix();
            let mount_pos = joint.mount.p;
            let axis = Vec3::from(joint.axis);
            let real = |dof: Dof, axis: Vec3, parent, mount_rot, mount_pos, q_index| Body {
                parent,
                mount_rot,
                mount_pos,
                dof,
                axis,
                subspace: subspace(dof, &axis),
                inertia,
                mass: link.mass,
                com,
                damping: joint.damping,
                q_index,
            };
            match joint.kind {
                JointKind::Revolute | JointKind::Prismatic | JointKind::Fixed => {
                    let dof = match joint.kind {
                        JointKind::Revolute => Dof::Revolute,
                        JointKind::Prismatic => Dof::Prismatic,
                        _ => Dof::Fixed,
                    };
                    bodies.push(real(dof, axis, parent, mount_rot, mount_pos, q_index));
                    q_index += joint.kind.dof();
                }
                JointKind::Free => {
                    let virtual_axes = [
                        (Dof::Prismatic, Vec3::x()),
                        (Dof::Prismatic, Vec3::y()),
                        (Dof::Prismatic, Vec3::z()),
                        (Dof::Revolute, Vec3::z()),
                        (Dof::Revolute, Vec3::y()),
                    ];
                    let mut prev = parent;
                    for (k, (dof, ax)) in virtual_axes.into_iter().enumerate() {
                        let (mr, mp) = if k == 0 { (mount_rot, mount_pos) } else { (Matrix3::identity(), Vec3::zeros()) };
                        bodies.push(Body {
                            parent: prev,
                            mount_rot: mr,
                            mount_pos: mp,
                            dof,
                            axis: ax,
                            subspace: subspace(dof, &ax),
                            inertia: SMat::zeros(),
                            mass: 0.0,
                            com: Vec3::zeros(),
                            damping: 0.0,
                            q_index: q_index + k,
                        });
                        prev = Some(bodies.len() - 1);
                    }
                    let mut b = real(Dof::Revolute, Vec3::x(), prev, Matrix3::identity(), Vec3::zeros(), q_index + 5);
                    b.damping = 0.0;
                    bodies.push(b);
                    q_index += 6;
                }
            }
            link_body.push(bodies.len() - 1);
        }
        Model { bodies, link_body, dof: q_index, gravity: mech.gravity(), substeps: mech.substeps.max(1) }
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    fn local_pose(&self, b: &Body, q: &[f64]) -> (Matrix3<f64>, Vec3) {
        match b.dof {
            Dof::Revolute => {
                let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(b.axis), q[b.q_index]);
                (b.mount_rot * r.matrix(), b.mount_pos)
            }
            Dof::Prismatic => (b.mount_rot, b.mount_pos + b.mount_rot * b.axis * q[b.q_index]),
            Dof::Fixed => (b.mount_rot, b.mount_pos),
        }
    }

    /// World rotation and position of every link frame at `q`, written into
    /// `out` (resized to the link count).
    pub fn link_frames(&self, q: &[f64], out: &mut Vec<(Matrix3<f64>, Vec3)>) {
        out.clear();
        for b in &self.bodies {
            let (rot, pos) = self.local_pose(b, q);
            let w = match b.parent {
                Some(p) => (out[p].0 * rot, out[p].1 + out[p].0 * pos),
                None => (rot, pos),
            };
            out.push(w);
        }
        // link bodies are in increasing order, so compacting in place is safe
        for (k, &i) in self.link_body.iter().enumerate() {
            out[k] = out[i];
        }
        out.truncate(self.link_body.len());
    }

    fn check(&self, state: &SimState, tau: &[f64]) -> Result<(), DynamicsError> {
        for (what, got) in [("q", state.q.len()), ("qd", state.qd.len()), ("tau", tau.len())] {
            if got != self.dof {
                return Err(DynamicsError::DimensionMismatch { what, expected: self.dof, got });
            }
        }
        Ok(())
    }

    /// Joint accelerations under applied generalized forces `tau`, gravity and
    /// viscous joint damping.
    pub fn forward_dynamics(&self, state: &SimState, tau: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.check(state, tau)?;
        let mut qdd = vec![0.0; self.dof];
        self.aba(&state.q, &state.qd, tau, &mut qdd)?;
        Ok(qdd)
    }

    fn aba(&self, q: &[f64], qd: &[f64], tau: &[f64], qdd: &mut [f64]) -> Result<(), DynamicsError> {
        WORKSPACE.with(|ws| self.aba_in(&mut ws.borrow_mut(), q, qd, tau, qdd))
    }

    fn aba_in(&self, ws: &mut Workspace, q: &[f64], qd: &[f64], tau: &[f64], qdd: &mut [f64]) -> Result<(), DynamicsError> {
        let n = self.bodies.len();
        ws.resize(n);
        let Workspace { xf, v, c, ia, pa, u, d_inv, u_sc, a } = ws;
        for (i, b) in self.bodies.iter().enumerate() {
            let (rot, pos) = self.local_pose(b, q);
            let x = Xform::from_pose(&rot, &pos);
            let vp = b.parent.map_or(SVec::zeros(), |p| x.motion(&v[p]));
            let (vi, ci) = if b.dof == Dof::Fixed {
                (vp, SVec::zeros())
            } else {
                let vj = b.subspace * qd[b.q_index];
                let vi = vp + vj;
                (vi, cross_motion(&vi, &vj))
            };
            pa[i] = cross_force(&vi, &(b.inertia * vi));
            ia[i] = b.inertia;
            xf[i] = x;
            v[i] = vi;
            c[i] = ci;
        }

        for i in (0..n).rev() {
            let b = &self.bodies[i];
            if b.dof != Dof::Fixed {
                let ui = ia[i] * b.subspace;
                let d = b.subspace.dot(&ui);
                if !(d > 0.0) || !d.is_finite() {
                    return Err(DynamicsError::SingularInertia { joint: i, value: d });
                }
                let k = b.q_index;
                let uu = tau[k] - b.damping * qd[k] - b.subspace.dot(&pa[i]);
                u[i] = ui;
                d_inv[i] = 1.0 / d;
                u_sc[i] = uu;
                ia[i].ger(-d_inv[i], &ui, &ui, 1.0);
                let art = ia[i] * c[i] + ui * (uu * d_inv[i]);
                pa[i] += art;
            }
            if let Some(p) = b.parent {
                let add_i = xf[i].inertia_to_parent(&ia[i]);
                let add_p = xf[i].force_to_parent(&pa[i]);
                ia[p] += add_i;
                pa[p] += add_p;
            }
        }

        let a_base = join(Vec3::zeros(), -self.gravity);
        for (i, b) in self.bodies.iter().enumerate() {
            let ap = b.parent.map_or(a_base, |p| a[p]);
            let mut ai = xf[i].motion(&ap) + c[i];
            if b.dof != Dof::Fixed {
                let acc = (u_sc[i] - u[i].dot(&ai)) * d_inv[i];
                qdd[b.q_index] = acc;
                ai += b.subspace * acc;
            }
            a[i] = ai;
        }
        Ok(())
    }

    /// One semi-implicit Euler step of length `dt`, split into the model's
    /// substeps.
    pub fn step(&self, state: &SimState, tau: &[f64], dt: f64) -> Result<SimState, DynamicsError> {
        let mut next = state.clone();
        self.step_mut(&mut next, tau, dt)?;
        Ok(next)
    }

    /// [`Model::step`] in place.
    pub fn step_mut(&self, state: &mut SimState, tau: &[f64], dt: f64) -> Result<(), DynamicsError> {
        if !(dt > 0.0) {
            return Err(DynamicsError::BadTimeStep(dt));
        }
        self.check(state, tau)?;
        let h = dt / self.substeps as f64;
        let mut buf = [0.0; 16];
        let mut heap = Vec::new();
        let qdd: &mut [f64] = if self.dof <= buf.len() {
            &mut buf[..self.dof]
        } else {
            heap.resize(self.dof, 0.0);
            &mut heap
        };
        for _ in 0..self.substeps {
            self.aba(&state.q, &state.qd, tau, qdd)?;
            for k in 0..self.dof {
                state.qd[k] += qdd[k] * h;
                state.q[k] += state.qd[k] * h;
            }
        }
        Ok(())
    }

    pub fn energy(&self, state: &SimState) -> Result<f64, DynamicsError> {
        self.check(state, &state.q)?;
        let n = self.bodies.len();
        let mut v: Vec<SVec> = Vec::with_capacity(n);
        let mut world: Vec<(Matrix3<f64>, Vec3)> = Vec::with_capacity(n);
        let mut e = 0.0;
        for b in &self.bodies {
            let (rot, pos) = self.local_pose(b, &state.q);
            let x = Xform::from_pose(&rot, &pos);
            let vp = b.parent.map_or(SVec::zeros(), |p| x.motion(&v[p]));
            let vi = if b.dof == Dof::Fixed { vp } else { vp + b.subspace * state.qd[b.q_index] };
            let (wr, wp) = match b.parent {
                Some(p) => (world[p].0 * rot, world[p].1 + world[p].0 * pos),
                None => (rot, pos),
            };
            e += 0.5 * vi.dot(&(b.inertia * vi));
            if b.mass > 0.0 {
                e -= b.mass * self.gravity.dot(&(wp + wr * b.com));
            }
            v.push(vi);
            world.push((wr, wp));
        }
        Ok(e)
    }
}

fn subspace(dof: Dof, axis: &Vec3) -> SVec {
    match dof {
        Dof::Revolute => join(*axis, Vec3::zeros()),
        Dof::Prismatic => join(Vec3::zeros(), *axis),
        Dof::Fixed => SVec::zeros(),
    }
}
