//! The 22-joint kinematic tree, forward kinematics, and the nested
//! 6/11/22-node scales used by the coarse-to-fine stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotmath::{chordal_mean, sixd_encode, Rot6, RotM, Vec3};

pub const JOINT_COUNT: usize = 22;

/// Canonical skeleton definition shipped with the crate.
pub const DEFAULT_SKELETON_TOML: &str = include_str!("skeleton.toml");

/// Which of the three body scales a quantity lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScaleId {
    S1,
    S2,
    S3,
}

impl ScaleId {
    pub const ALL: [ScaleId; 3] = [ScaleId::S1, ScaleId::S2, ScaleId::S3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn node_count(self) -> usize {
        match self {
            ScaleId::S1 => 6,
            ScaleId::S2 => 11,
            ScaleId::S3 => 22,
        }
    }
}

/// How a composite node's rotation is derived from its member joints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeMode {
    /// Chordal mean of the member local rotations.
    #[default]
    ChordalMean,
    /// Rotation of the member closest to the root (lowest index).
    Representative,
}

/// One partition of the 22 joints into composite nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSpec {
    pub id: ScaleId,
    pub names: Vec<String>,
    pub groups: Vec<Vec<usize>>,
    /// Parent node of each composite node; `None` for the node holding the root.
    pub coarse_parent: Vec<Option<usize>>,
    pub mode: CompositeMode,
}

impl ScaleSpec {
    pub fn node_count(&self) -> usize {
        self.groups.len()
    }

    /// Width of a per-frame 6D vector at this scale.
    pub fn dim(&self) -> usize {
        scale_dim(self)
    }

    /// Index of the node that contains `joint`.
    pub fn node_of(&self, joint: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&joint))
    }

    /// True when every group of `self` is a union of groups of `finer`.
    pub fn is_coarsening_of(&self, finer: &ScaleSpec) -> bool {
        finer.groups.iter().all(|fg| {
            self.groups
                .iter()
                .any(|cg| fg.iter().all(|j| cg.contains(j)))
        })
    }

    fn singletons(mode: CompositeMode, names: &[String], parents: &[Option<usize>]) -> Self {
        ScaleSpec {
            id: ScaleId::S3,
            names: names.to_vec(),
            groups: (0..JOINT_COUNT).map(|j| vec![j]).collect(),
            coarse_parent: parents.to_vec(),
            mode,
        }
    }
}

/// `node_count × 6`.
pub fn scale_dim(spec: &ScaleSpec) -> usize {
    spec.node_count() * 6
}

/// Kinematic tree with rest-pose bone offsets and the three scales.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonDef {
    pub names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<Vec3>,
    pub head_joint: usize,
    /// Joints carrying sparse observations: head, left wrist, right wrist.
    pub observed: [usize; 3],
    scales: [ScaleSpec; 3],
}

#[derive(Deserialize)]
struct JointEntry {
    name: String,
    parent: i64,
    offset: [f64; 3],
}

#[derive(Deserialize)]
struct ScaleEntry {
    names: Vec<String>,
    groups: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct ScaleTable {
    s1: ScaleEntry,
    s2: ScaleEntry,
}

#[derive(Deserialize)]
struct SkeletonFile {
    head_joint: usize,
    observed_joints: [usize; 3],
    #[serde(default)]
    composite: CompositeMode,
    joint: Vec<JointEntry>,
    scales: ScaleTable,
}

impl Default for SkeletonDef {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_SKELETON_TOML).expect("bundled skeleton is valid")
    }
}

impl SkeletonDef {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SkeletonFile =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("skeleton: {e}")))?;
        Self::from_file(file)
    }

    fn from_file(file: SkeletonFile) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("skeleton: {m}")));
        if file.joint.len() != JOINT_COUNT {
            return bad(format!("expected {JOINT_COUNT} joints, found {}", file.joint.len()));
        }
        let mut parents = Vec::with_capacity(JOINT_COUNT);
        for (j, e) in file.joint.iter().enumerate() {
            match (j, e.parent) {
                (0, -1) => parents.push(None),
                (0, p) => return bad(format!("joint 0 must be the root, has parent {p}")),
                (_, p) if p < 0 => return bad(format!("joint {j} ({}) is a second root", e.name)),
                (_, p) if p as usize >= j => {
                    return bad(format!("joint {j} has parent {p}; parents must precede children"))
                }
                (_, p) => parents.push(Some(p as usize)),
            }
            if e.offset.iter().any(|v| !v.is_finite()) {
                return bad(format!("joint {j} has a non-finite offset"));
            }
        }
        for &j in file.observed_joints.iter().chain([&file.head_joint]) {
            if j >= JOINT_COUNT {
                return bad(format!("observed joint {j} out of range"));
            }
        }
        let names: Vec<String> = file.joint.iter().map(|e| e.name.clone()).collect();
        let mode = file.composite;
        let s3 = ScaleSpec::singletons(mode, &names, &parents);
        let s1 = build_scale(ScaleId::S1, file.scales.s1, &parents, mode)?;
        let s2 = build_scale(ScaleId::S2, file.scales.s2, &parents, mode)?;
        if !s1.is_coarsening_of(&s2) {
            return bad("every s2 group must lie inside one s1 group".into());
        }
        Ok(SkeletonDef {
            names,
            parents,
            offsets: file.joint.iter().map(|e| Vec3::from(e.offset)).collect(),
            head_joint: file.head_joint,
            observed: file.observed_joints,
            scales: [s1, s2, s3],
        })
    }

    pub fn scale(&self, id: ScaleId) -> &ScaleSpec {
        &self.scales[id.index()]
    }

    /// Switches every scale to a different composite-value rule.
    pub fn with_composite_mode(mut self, mode: CompositeMode) -> Self {
        for s in &mut self.scales {
            s.mode = mode;
        }
        self
    }
}

fn build_scale(
    id: ScaleId,
    entry: ScaleEntry,
    parents: &[Option<usize>],
    mode: CompositeMode,
) -> Result<ScaleSpec> {
    let bad = |m: String| Err(Error::InvalidConfig(format!("scale {id:?}: {m}")));
    if entry.groups.len() != id.node_count() {
        return bad(format!(
            "expected {} groups, found {}",
            id.node_count(),
            entry.groups.len()
        ));
    }
    if entry.names.len() != entry.groups.len() {
        return bad("names and groups differ in length".into());
    }
    let mut seen = [false; JOINT_COUNT];
    for g in &entry.groups {
        if g.is_empty() {
            return bad("empty group".into());
        }
        for &j in g {
            if j >= JOINT_COUNT {
                return bad(format!("joint {j} out of range"));
            }
            if seen[j] {
                return bad(format!("joint {j} appears in two groups"));
            }
            seen[j] = true;
        }
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return bad(format!("joint {j} is not covered"));
    }
    let mut groups = entry.groups;
    for g in &mut groups {
        g.sort_unstable();
    }
    let node_of = |j: usize| groups.iter().position(|g| g.contains(&j)).unwrap();
    let coarse_parent = groups
        .iter()
        .map(|g| parents[g[0]].map(node_of))
        .collect();
    Ok(ScaleSpec {
        id,
        names: entry.names,
        groups,
        coarse_parent,
        mode,
    })
}

/// One frame of body pose: local joint rotations plus root translation.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub local_rot: [RotM; JOINT_COUNT],
    pub root_trans: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose {
            local_rot: [RotM::identity(); JOINT_COUNT],
            root_trans: Vec3::zeros(),
        }
    }
}

impl Pose {
    /// Decodes a flat 132-vector of 6D joint rotations.
    pub fn from_6d(flat: &[f64], root_trans: Vec3) -> Result<Self> {
        if flat.len() != JOINT_COUNT * 6 {
            return Err(Error::shape("Pose::from_6d", format!("{} values", flat.len())));
        }
        let mut local_rot = [RotM::identity(); JOINT_COUNT];
        for (j, r) in local_rot.iter_mut().enumerate() {
            *r = Rot6::from_slice(&flat[j * 6..]).decode()?;
        }
        Ok(Pose {
            local_rot,
            root_trans,
        })
    }

    /// Appends the 132-vector of 6D rotations to `out`.
    pub fn write_6d(&self, out: &mut Vec<f64>) {
        for r in &self.local_rot {
            out.extend_from_slice(&sixd_encode(r).0);
        }
    }

    pub fn to_6d(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(JOINT_COUNT * 6);
        self.write_6d(&mut v);
        v
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.local_rot.iter().all(|r| r.is_valid(tol)) && self.root_trans.iter().all(|v| v.is_finite())
    }
}

/// World-space joint rotations and positions.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalPose {
    pub global_rot: [RotM; JOINT_COUNT],
    pub global_pos: [Vec3; JOINT_COUNT],
}

pub fn forward_kinematics(pose: &Pose, skel: &SkeletonDef) -> GlobalPose {
    let mut global_rot = [RotM::identity(); JOINT_COUNT];
    let mut global_pos = [Vec3::zeros(); JOINT_COUNT];
    for j in 0..JOINT_COUNT {
        match skel.parents[j] {
            None => {
                global_rot[j] = pose.local_rot[j];
                global_pos[j] = pose.root_trans;
            }
            Some(p) => {
                global_rot[j] = global_rot[p] * pose.local_rot[j];
                global_pos[j] = global_pos[p] + global_rot[p].rotate(&skel.offsets[j]);
            }
        }
    }
    GlobalPose {
        global_rot,
        global_pos,
    }
}

/// Composite-node rotations of one frame at the given scale.
///
/// With chordal-mean composites a degenerate group (a mean matrix without
/// full rank) falls back to the representative joint.
pub fn project_to_scale(frame: &[RotM; JOINT_COUNT], spec: &ScaleSpec) -> Vec<Rot6> {
    spec.groups
        .iter()
        .map(|g| {
            let r = match (spec.mode, g.len()) {
                (_, 1) | (CompositeMode::Representative, _) => frame[g[0]],
                (CompositeMode::ChordalMean, _) => {
                    let members: Vec<RotM> = g.iter().map(|&j| frame[j]).collect();
                    chordal_mean(&members).unwrap_or(frame[g[0]])
                }
            };
            sixd_encode(&r)
        })
        .collect()
}

/// As [`project_to_scale`], flattened to `scale_dim` values.
pub fn project_to_scale_flat(frame: &[RotM; JOINT_COUNT], spec: &ScaleSpec, out: &mut Vec<f64>) {
    for r in project_to_scale(frame, spec) {
        out.extend_from_slice(&r.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotmath::{
        chordal_mean_weighted, geodesic_angle_deg, random_rotation, random_rotation_within,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pose(g: &mut ChaCha8Rng) -> Pose {
        let mut p = Pose::default();
        for r in &mut p.local_rot {
            *r = random_rotation(g);
        }
        p.root_trans = Vec3::new(0.4, 0.9, -1.2);
        p
    }

    #[test]
    fn default_skeleton_is_valid() {
        let s = SkeletonDef::default();
        assert_eq!(s.names.len(), 22);
        assert_eq!(s.parents[0], None);
        for j in 1..22 {
            assert!(s.parents[j].unwrap() < j);
        }
        assert_eq!(s.head_joint, 15);
        assert_eq!(s.observed, [15, 20, 21]);
    }

    #[test]
    fn scale_dims() {
        let s = SkeletonDef::default();
        assert_eq!(scale_dim(s.scale(ScaleId::S1)), 36);
        assert_eq!(scale_dim(s.scale(ScaleId::S2)), 66);
        assert_eq!(scale_dim(s.scale(ScaleId::S3)), 132);
    }

    #[test]
    fn partitions_nest() {
        let s = SkeletonDef::default();
        let (s1, s2, s3) = (s.scale(ScaleId::S1), s.scale(ScaleId::S2), s.scale(ScaleId::S3));
        assert!(s2.is_coarsening_of(s3));
        assert!(s1.is_coarsening_of(s2));
        assert!(s1.is_coarsening_of(s3));
        assert!(!s2.is_coarsening_of(s1));
        for spec in [s1, s2, s3] {
            let mut all: Vec<usize> = spec.groups.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..22).collect::<Vec<_>>());
        }
        // torso holds the root, so it is the only parentless composite
        assert_eq!(s1.coarse_parent.iter().filter(|p| p.is_none()).count(), 1);
        assert_eq!(s1.coarse_parent[s1.node_of(0).unwrap()], None);
        assert_eq!(s1.coarse_parent[s1.node_of(16).unwrap()], s1.node_of(13));
    }

    #[test]
    fn load_rejects_bad_configs() {
        let two_roots = DEFAULT_SKELETON_TOML.replacen("parent = 0\n", "parent = -1\n", 1);
        let e = SkeletonDef::from_toml_str(&two_roots).unwrap_err().to_string();
        assert!(e.contains("second root"), "{e}");

        let overlap = DEFAULT_SKELETON_TOML.replace("[[12, 15], [0, 3, 6", "[[12, 15, 3], [0, 3, 6");
        let e = SkeletonDef::from_toml_str(&overlap).unwrap_err().to_string();
        assert!(e.contains("two groups"), "{e}");

        let forward = DEFAULT_SKELETON_TOML.replacen("parent = 1\n", "parent = 9\n", 1);
        assert!(SkeletonDef::from_toml_str(&forward).is_err());

        assert!(SkeletonDef::from_toml_str("not = [toml").is_err());
    }

    #[test]
    fn fk_rest_pose_is_offset_sum() {
        let s = SkeletonDef::default();
        let g = forward_kinematics(&Pose::default(), &s);
        for j in 0..22 {
            let mut acc = Vec3::zeros();
            let mut k = j;
            while let Some(p) = s.parents[k] {
                acc += s.offsets[k];
                k = p;
            }
            assert!((g.global_pos[j] - acc).norm() < 1e-15);
        }
        assert_eq!(g.global_pos[0], Vec3::zeros());
    }

    #[test]
    fn fk_three_joint_chain_by_hand() {
        let mut s = SkeletonDef::default();
        for o in &mut s.offsets {
            *o = Vec3::new(0.0, 1.0, 0.0);
        }
        // chain 0 -> 3 -> 6
        let mut p = Pose::default();
        p.local_rot[0] = RotM::rz_deg(90.0);
        let g = forward_kinematics(&p, &s);
        assert!((g.global_pos[3] - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!((g.global_pos[6] - Vec3::new(-2.0, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn fk_equivariant_under_root_rotation() {
        let s = SkeletonDef::default();
        let mut g = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = random_pose(&mut g);
            let q = random_rotation(&mut g);
            let mut p2 = p.clone();
            p2.local_rot[0] = q * p.local_rot[0];
            let a = forward_kinematics(&p, &s);
            let b = forward_kinematics(&p2, &s);
            for j in 0..22 {
                let ra = q.rotate(&(a.global_pos[j] - a.global_pos[0]));
                let rb = b.global_pos[j] - b.global_pos[0];
                assert!((ra - rb).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn s3_projection_is_identity() {
        let s = SkeletonDef::default();
        let mut g = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut g);
        let out = project_to_scale(&p.local_rot, s.scale(ScaleId::S3));
        for (j, r) in out.iter().enumerate() {
            assert_eq!(*r, sixd_encode(&p.local_rot[j]));
        }
    }

    #[test]
    fn uniform_frame_projects_to_same_rotation() {
        let s = SkeletonDef::default();
        let r = RotM::rx_deg(35.0) * RotM::ry_deg(-70.0);
        let frame = [r; 22];
        for id in ScaleId::ALL {
            for node in project_to_scale(&frame, s.scale(id)) {
                let d = node.decode().unwrap();
                assert!((d.matrix() - r.matrix()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn s1_matches_per_group_mean() {
        let s = SkeletonDef::default();
        let mut g = ChaCha8Rng::seed_from_u64(8);
        let mut frame = [RotM::identity(); 22];
        for r in &mut frame {
            *r = random_rotation_within(&mut g, 70.0);
        }
        let spec = s.scale(ScaleId::S1);
        let out = project_to_scale(&frame, spec);
        for (node, grp) in out.iter().zip(&spec.groups) {
            let mut m = nalgebra::Matrix3::zeros();
            for &j in grp {
                m += frame[j].matrix();
            }
            let oracle = crate::rotmath::project_to_rotation(&(m / grp.len() as f64)).unwrap();
            let d = node.decode().unwrap();
            assert!((d.matrix() - oracle.matrix()).norm() < 1e-9);
        }
    }

    #[test]
    fn nesting_consistency_within_two_degrees() {
        let s = SkeletonDef::default();
        let mut g = ChaCha8Rng::seed_from_u64(9);
        let (s1, s2) = (s.scale(ScaleId::S1), s.scale(ScaleId::S2));
        for _ in 0..100 {
            let mut frame = [RotM::identity(); 22];
            for r in &mut frame {
                *r = random_rotation_within(&mut g, 30.0);
            }
            let direct = project_to_scale(&frame, s1);
            let mid: Vec<RotM> = project_to_scale(&frame, s2)
                .iter()
                .map(|r| r.decode().unwrap())
                .collect();
            for (k, grp) in s1.groups.iter().enumerate() {
                let (members, weights): (Vec<RotM>, Vec<f64>) = s2
                    .groups
                    .iter()
                    .enumerate()
                    .filter(|(_, g2)| grp.contains(&g2[0]))
                    .map(|(i, g2)| (mid[i], g2.len() as f64))
                    .unzip();
                let via = chordal_mean_weighted(&members, &weights).unwrap();
                let d = geodesic_angle_deg(&via, &direct[k].decode().unwrap());
                assert!(d < 2.0, "node {k}: {d}");
            }
        }
    }

    #[test]
    fn representative_mode_takes_lowest_member() {
        let s = SkeletonDef::default().with_composite_mode(CompositeMode::Representative);
        let mut g = ChaCha8Rng::seed_from_u64(10);
        let p = random_pose(&mut g);
        let spec = s.scale(ScaleId::S1);
        let out = project_to_scale(&p.local_rot, spec);
        for (node, grp) in out.iter().zip(&spec.groups) {
            assert_eq!(*node, sixd_encode(&p.local_rot[grp[0]]));
        }
    }
}
