//! Kinematic forest from pairwise joint fits: cost matrix, minimum spanning
//! forest, edge orientation, world attachment and joint position series.

use crate::dynamics::{Joint, JointKind, Mechanism};
use crate::joint_fit::{best_joint, joint_positions, JointFitError, JointFitResult, JointModel, RansacConfig};
use crate::se3::{compose, BodyTrajectory, ObservationError, ObservationSet, Pose};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TopologyError {
    #[error(transparent)]
    Fit(#[from] JointFitError),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error("body mismatch: {0}")]
    BodyMismatch(String),
    #[error("cannot build mechanism: {0}")]
    Mechanism(String),
}

/// Symmetric pair costs; `f64::INFINITY` means no joint candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize) -> Self {
        CostMatrix { n, data: vec![f64::INFINITY; n * n] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Sets both `C[i][j]` and `C[j][i]`. Diagonal entries stay infinite.
    pub fn set(&mut self, i: usize, j: usize, c: f64) {
        if i != j {
            self.data[i * self.n + j] = c;
            self.data[j * self.n + i] = c;
        }
    }
}

/// Winning fit for each unordered pair, keyed `(i, j)` with `i < j` and
/// fitted on `T_i^j` (body `j` in the frame of body `i`).
pub type FitMemo = BTreeMap<(usize, usize), JointFitResult>;

pub fn build_cost_matrix(obs: &ObservationSet, cfg: &RansacConfig) -> Result<(CostMatrix, FitMemo), TopologyError> {
    cfg.validate()?;
    let n = obs.n_bodies();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let fits = pairs
        .par_iter()
        .map(|&(i, j)| best_joint(&obs.relative_sequence(i, j), cfg).map(|r| ((i, j), r)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut c = CostMatrix::new(n);
    let mut memo = FitMemo::new();
    for ((i, j), r) in fits {
        if let Some(r) = r {
            c.set(i, j, r.cost);
            memo.insert((i, j), r);
        }
    }
    Ok((c, memo))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Forest {
    /// Sorted member ids of each component, ordered by smallest member.
    pub components: Vec<Vec<usize>>,
    /// Tree edges `(i, j)` with `i < j`, per component.
    pub edges: Vec<Vec<(usize, usize)>>,
}

impl Forest {
    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }
}

/// Prim's algorithm on every connected component of the finite-cost graph.
/// Ties break toward the lower vertex ids.
pub fn minimum_spanning_forest(c: &CostMatrix) -> Forest {
    let n = c.len();
    let mut visited = vec![false; n];
    let mut forest = Forest::default();
    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut members = vec![start];
        let mut edges = Vec::new();
        // best[v] = (cost, attached tree vertex)
        let mut best: Vec<(f64, usize)> = (0..n).map(|v| (c.get(start, v), start)).collect();
        loop {
            let next = (0..n)
                .filter(|&v| !visited[v] && best[v].0.is_finite())
                .min_by(|&a, &b| best[a].0.total_cmp(&best[b].0).then(a.cmp(&b)));
            let Some(v) = next else { break };
            visited[v] = true;
            members.push(v);
            let u = best[v].1;
            edges.push((u.min(v), u.max(v)));
            for w in 0..n {
                if !visited[w] && c.get(v, w) < best[w].0 {
                    best[w] = (c.get(v, w), v);
                }
            }
        }
        members.sort_unstable();
        edges.sort_unstable();
        forest.components.push(members);
        forest.edges.push(edges);
    }
    forest
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub parent: usize,
    pub child: usize,
    pub joint: JointModel,
    pub q: Vec<f64>,
}

/// Directs `edges` away from `root` by breadth-first search, inverting
/// memoized models that were fitted child-to-parent.
pub fn orient_tree(root: usize, edges: &[(usize, usize)], memo: &FitMemo) -> Result<Vec<Edge>, TopologyError> {
    let mut out = Vec::with_capacity(edges.len());
    let mut queue = VecDeque::from([root]);
    let mut seen = vec![root];
    while let Some(u) = queue.pop_front() {
        let mut next: Vec<usize> = edges
            .iter()
            .filter_map(|&(a, b)| if a == u { Some(b) } else if b == u { Some(a) } else { None })
            .filter(|v| !seen.contains(v))
            .collect();
        next.sort_unstable();
        for v in next {
            let key = (u.min(v), u.max(v));
            let fit = memo.get(&key).ok_or_else(|| TopologyError::BodyMismatch(format!("no fit for pair {key:?}")))?;
            let (joint, q) = if u < v {
                (fit.model.clone(), fit.q_series.clone())
            } else {
                let (m, k) = fit.model.inverted();
                (m, fit.q_series.iter().map(|q| k * q).collect())
            };
            out.push(Edge { parent: u, child: v, joint, q });
            seen.push(v);
            queue.push_back(v);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeBase {
    Fixed { joint: JointModel, q: Vec<f64> },
    /// Root moves freely; its observed world poses drive it.
    Floating { poses: Vec<Pose> },
}

impl TreeBase {
    pub fn is_floating(&self) -> bool {
        matches!(self, TreeBase::Floating { .. })
    }
}

/// World joint of `traj` and its cost; floating bases cost `∞`.
pub fn attach_to_world(traj: &BodyTrajectory, cfg: &RansacConfig) -> Result<(TreeBase, f64), TopologyError> {
    Ok(match best_joint(&traj.poses, cfg)? {
        Some(r) => (TreeBase::Fixed { joint: r.model, q: r.q_series }, r.cost),
        None => (TreeBase::Floating { poses: traj.poses.clone() }, f64::INFINITY),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicTree {
    pub root: usize,
    pub base: TreeBase,
    pub edges: Vec<Edge>,
}

impl KinematicTree {
    pub fn bodies(&self) -> Vec<usize> {
        let mut b: Vec<usize> = std::iter::once(self.root).chain(self.edges.iter().map(|e| e.child)).collect();
        b.sort_unstable();
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub trees: Vec<KinematicTree>,
    pub n_bodies: usize,
}

pub fn infer_articulation(obs: &ObservationSet, cfg: &RansacConfig) -> Result<WorldModel, TopologyError> {
    obs.validate()?;
    let (c, memo) = build_cost_matrix(obs, cfg)?;
    let forest = minimum_spanning_forest(&c);
    let attachments = obs
        .bodies
        .par_iter()
        .map(|b| attach_to_world(b, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut trees = Vec::with_capacity(forest.components.len());
    for (members, edges) in forest.components.iter().zip(&forest.edges) {
        // lowest attachment cost, then lowest id (members are sorted)
        let root = members
            .iter()
            .copied()
            .min_by(|&a, &b| attachments[a].1.total_cmp(&attachments[b].1).then(a.cmp(&b)))
            .expect("components are non-empty");
        let edges = orient_tree(root, edges, &memo)?;
        trees.push(KinematicTree { root, base: attachments[root].0.clone(), edges });
    }
    log::debug!("inferred {} tree(s) over {} bodies", trees.len(), obs.n_bodies());
    Ok(WorldModel { trees, n_bodies: obs.n_bodies() })
}

/// Column label and series of one joint.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSeries {
    pub label: String,
    pub parent: Option<usize>,
    pub child: usize,
    pub q: Vec<f64>,
}

fn body_label(id: usize) -> String {
    format!("body{id}")
}

/// Joint coordinates of every fixed-base world joint and inter-body edge over
/// the frames of `obs`, in tree order.
pub fn extract_joint_positions(model: &WorldModel, obs: &ObservationSet, rotation_weight: f64) -> Result<Vec<JointSeries>, TopologyError> {
    obs.validate()?;
    if model.n_bodies != obs.n_bodies() {
        return Err(TopologyError::BodyMismatch(format!("model has {} bodies, observations {}", model.n_bodies, obs.n_bodies())));
    }
    let mut seen = vec![false; model.n_bodies];
    for t in &model.trees {
        for b in t.bodies() {
            if b >= model.n_bodies || std::mem::replace(&mut seen[b], true) {
                return Err(TopologyError::BodyMismatch(format!("body {b} is missing or appears twice")));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(TopologyError::BodyMismatch("model does not cover every observed body".into()));
    }
    let series = |joint: &JointModel, seq: &[Pose]| match joint {
        JointModel::Static { .. } | JointModel::Free => vec![0.0; seq.len()],
        _ => joint_positions(joint, seq, rotation_weight),
    };
    let mut out = Vec::new();
    for t in &model.trees {
        if let TreeBase::Fixed { joint, .. } = &t.base {
            let q = series(joint, &obs.bodies[t.root].poses);
            out.push(JointSeries { label: format!("world->{}", body_label(t.root)), parent: None, child: t.root, q });
        }
        for e in &t.edges {
            let q = series(&e.joint, &obs.relative_sequence(e.parent, e.child));
            out.push(JointSeries { label: format!("{}->{}", body_label(e.parent), body_label(e.child)), parent: Some(e.parent), child: e.child, q });
        }
    }
    Ok(out)
}

impl WorldModel {
    pub fn edge_count(&self) -> usize {
        self.trees.iter().map(|t| t.edges.len()).sum()
    }

    /// World poses of all bodies at frame `t`, from the stored joint series
    /// (and the stored root poses of floating trees).
    pub fn forward_kinematics(&self, t: usize) -> Vec<Pose> {
        let mut out = vec![Pose::identity(); self.n_bodies];
        for tree in &self.trees {
            out[tree.root] = match &tree.base {
                TreeBase::Fixed { joint, q } => joint.pose_at(q[t]),
                TreeBase::Floating { poses } => poses[t],
            };
            for e in &tree.edges {
                out[e.child] = compose(&out[e.parent], &e.joint.pose_at(e.q[t]));
            }
        }
        out
    }

    /// One line per root-to-leaf path, e.g.
    /// `world -[prismatic]-> body0 -[revolute]-> body1`.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for tree in &self.trees {
            let base = match &tree.base {
                TreeBase::Fixed { joint, .. } => joint.joint_type().name(),
                TreeBase::Floating { .. } => "free",
            };
            let start = format!("world -[{base}]-> {}", body_label(tree.root));
            let mut stack = vec![(tree.root, start)];
            while let Some((b, path)) = stack.pop() {
                let children: Vec<&Edge> = tree.edges.iter().filter(|e| e.parent == b).collect();
                if children.is_empty() {
                    let _ = writeln!(s, "{path}");
                }
                for e in children.into_iter().rev() {
                    stack.push((e.child, format!("{path} -[{}]-> {}", e.joint.joint_type(), body_label(e.child))));
                }
            }
        }
        s
    }

    /// Undirected edges `(min, max, joint type)` including world joints
    /// (`None` stands for the world), sorted.
    pub fn adjacency(&self) -> Vec<(Option<usize>, usize, crate::JointType)> {
        let mut out = Vec::new();
        for tree in &self.trees {
            let jt = match &tree.base {
                TreeBase::Fixed { joint, .. } => joint.joint_type(),
                TreeBase::Floating { .. } => crate::JointType::Free,
            };
            out.push((None, tree.root, jt));
            for e in &tree.edges {
                out.push((Some(e.parent.min(e.child)), e.parent.max(e.child), e.joint.joint_type()));
            }
        }
        out.sort();
        out
    }

    /// Simulatable mechanism with the inferred kinematics and the inertial
    /// properties, joint damping, gravity and substeps of `template`, whose
    /// link `i` describes body `i`. Links are reordered parent-first; the
    /// returned `order[k]` is the body id of link `k`.
    ///
    /// Body frames must lie on (within 5 cm of) their revolute joint axes.
    pub fn to_mechanism(&self, template: &Mechanism) -> Result<(Mechanism, Vec<usize>), TopologyError> {
        if template.links.len() != self.n_bodies {
            return Err(TopologyError::BodyMismatch(format!("template has {} links, model {} bodies", template.links.len(), self.n_bodies)));
        }
        let mut order = Vec::with_capacity(self.n_bodies);
        let mut joints: Vec<(Option<usize>, &JointModel, Option<&TreeBase>)> = Vec::new();
        for tree in &self.trees {
            order.push(tree.root);
            joints.push((None, match &tree.base {
                TreeBase::Fixed { joint, .. } => joint,
                TreeBase::Floating { .. } => &JointModel::Free,
            }, Some(&tree.base)));
            for e in &tree.edges {
                order.push(e.child);
                joints.push((Some(e.parent), &e.joint, None));
            }
        }
        let mut slot = vec![usize::MAX; self.n_bodies];
        for (k, &b) in order.iter().enumerate() {
            slot[b] = k;
        }
        let mut mech = Mechanism { links: Vec::new(), joints: Vec::new(), gravity: template.gravity, substeps: template.substeps };
        for (k, &(parent, model, _)) in joints.iter().enumerate() {
            let body = order[k];
            let parent = parent.map(|p| slot[p]);
            let damping = template.joints[body].damping;
            let joint = match model {
                JointModel::Revolute { axis, pivot, zero } => {
                    let off = (zero.p - pivot).cross(axis).norm();
                    if off > 0.05 {
                        return Err(TopologyError::Mechanism(format!("body {body} frame is {off:.3e} off its joint axis")));
                    }
                    // Fit noise leaves the frame slightly off the axis; snap it on.
                    let on_axis = Pose::new(zero.r, pivot + axis * axis.dot(&(zero.p - pivot)));
                    Joint { kind: JointKind::Revolute, axis: on_axis.inverse().rotate(axis).into(), mount: on_axis, parent, damping }
                }
                JointModel::Prismatic { axis, zero } => {
                    Joint { kind: JointKind::Prismatic, axis: zero.inverse().rotate(axis).into(), mount: *zero, parent, damping }
                }
                JointModel::Static { pose } => Joint { kind: JointKind::Fixed, axis: [0.0, 0.0, 1.0], mount: *pose, parent, damping },
                JointModel::Free => Joint { kind: JointKind::Free, axis: [0.0, 0.0, 1.0], mount: Pose::identity(), parent, damping: 0.0 },
            };
            let mut joint = joint;
            let n = crate::Vec3::from(joint.axis).norm();
            joint.axis = joint.axis.map(|a| a / n);
            mech.links.push(template.links[body].clone());
            mech.joints.push(joint);
        }
        mech.validate().map_err(|e| TopologyError::Mechanism(e.to_string()))?;
        Ok((mech, order))
    }
}

/// Undirected joints of `mech` in the form of [`WorldModel::adjacency`],
/// reading link `i` as body `i`.
pub fn mechanism_adjacency(mech: &Mechanism) -> Vec<(Option<usize>, usize, crate::JointType)> {
    use crate::JointType;
    let mut out: Vec<_> = mech
        .joints
        .iter()
        .enumerate()
        .map(|(i, j)| {
            let jt = match j.kind {
                JointKind::Revolute => JointType::Revolute,
                JointKind::Prismatic => JointType::Prismatic,
                JointKind::Fixed => JointType::Static,
                JointKind::Free => JointType::Free,
            };
            match j.parent {
                Some(p) => (Some(p.min(i)), p.max(i), jt),
                None => (None, i, jt),
            }
        })
        .collect();
    out.sort();
    out
}

/// Inferred topology against a known mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyReport {
    /// Same joint types on the same body pairs (and world attachments).
    pub exact: bool,
    /// Largest angle (radians, sign-free) between an inferred revolute or
    /// prismatic axis and the true one; `None` without matched axes.
    pub max_axis_error: Option<f64>,
    pub max_revolute_axis_error: Option<f64>,
}

/// Compares `model` with `truth`, whose link `i` is body `i`. `poses0` are
/// the true body poses at frame 0, used to express axes in the world.
pub fn compare_topology(model: &WorldModel, truth: &Mechanism, poses0: &[Pose]) -> TopologyReport {
    let exact = model.adjacency() == mechanism_adjacency(truth);
    let mut all: Option<f64> = None;
    let mut rev: Option<f64> = None;
    let mut record = |joint: &JointModel, frame: Option<usize>, child: usize| {
        let Some(axis) = joint.axis() else { return };
        let tj = &truth.joints[child];
        if !matches!(tj.kind, JointKind::Revolute | JointKind::Prismatic) {
            return;
        }
        let world = |a: crate::Vec3, b: Option<usize>| b.map_or(a, |b| poses0[b].rotate(&a));
        let got = world(axis, frame).normalize();
        let want = poses0[child].rotate(&crate::Vec3::from(tj.axis)).normalize();
        let err = got.dot(&want).abs().min(1.0).acos();
        all = Some(all.map_or(err, |e: f64| e.max(err)));
        if tj.kind == JointKind::Revolute {
            rev = Some(rev.map_or(err, |e: f64| e.max(err)));
        }
    };
    for tree in &model.trees {
        if let TreeBase::Fixed { joint, .. } = &tree.base {
            if truth.joints.get(tree.root).is_some_and(|j| j.parent.is_none()) {
                record(joint, None, tree.root);
            }
        }
        for e in &tree.edges {
            // the true joint of the pair, whichever body is its child
            let child = [e.child, e.parent].into_iter().find(|&c| truth.joints.get(c).and_then(|j| j.parent) == Some(e.parent + e.child - c));
            if let Some(c) = child {
                record(&e.joint, Some(e.parent), c);
            }
        }
    }
    TopologyReport { exact, max_axis_error: all, max_revolute_axis_error: rev }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeJson {
    parent: usize,
    child: usize,
    joint: JointModel,
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BaseJson {
    #[serde(flatten)]
    joint: JointModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poses: Option<Vec<[f64; 6]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeJson {
    root: usize,
    base: BaseJson,
    edges: Vec<EdgeJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldJson {
    n_bodies: usize,
    trees: Vec<TreeJson>,
}

impl Serialize for WorldModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let trees = self
            .trees
            .iter()
            .map(|t| TreeJson {
                root: t.root,
                base: match &t.base {
                    TreeBase::Fixed { joint, q } => BaseJson { joint: joint.clone(), q: Some(q.clone()), poses: None },
                    TreeBase::Floating { poses } => {
                        BaseJson { joint: JointModel::Free, q: None, poses: Some(poses.iter().map(Pose::to_array).collect()) }
                    }
                },
                edges: t.edges.iter().map(|e| EdgeJson { parent: e.parent, child: e.child, joint: e.joint.clone(), q: e.q.clone() }).collect(),
            })
            .collect();
        WorldJson { n_bodies: self.n_bodies, trees }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for WorldModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let w = WorldJson::deserialize(d)?;
        let trees = w
            .trees
            .into_iter()
            .map(|t| {
                let base = match t.base.joint {
                    JointModel::Free => TreeBase::Floating {
                        poses: t.base.poses.ok_or_else(|| D::Error::missing_field("poses"))?.into_iter().map(Pose::from_array).collect(),
                    },
                    joint => TreeBase::Fixed { joint, q: t.base.q.ok_or_else(|| D::Error::missing_field("q"))? },
                };
                let edges = t.edges.into_iter().map(|e| Edge { parent: e.parent, child: e.child, joint: e.joint, q: e.q }).collect();
                Ok(KinematicTree { root: t.root, base, edges })
            })
            .collect::<Result<Vec<_>, D::Error>>()?;
        Ok(WorldModel { trees, n_bodies: w.n_bodies })
    }
}

#[cfg(test)]
mod tests;
