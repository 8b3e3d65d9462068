//! Conversion between world-frame joint positions and the over-parameterized
//! per-frame pose feature vector consumed by the tokenizer.
//!
//! Per-frame layout, for a skeleton with `J` joints:
//!
//! | block              | width      | meaning                                        |
//! |--------------------|------------|------------------------------------------------|
//! | root yaw velocity  | 1          | change of facing angle about +Y (rad/frame)    |
//! | root velocity x, z | 2          | root XZ displacement expressed in root space   |
//! | root height        | 1          | world Y of the root joint                      |
//! | local positions    | 3 (J - 1)  | non-root joints relative to the root, root space |
//! | local velocities   | 3 J        | per-joint displacement, root space             |
//! | local rotations    | 6 (J - 1)  | bone swing rotations, first two matrix columns |
//! | foot contacts      | 4          | left heel, left toe, right heel, right toe     |
//!
//! Frame `k` of an encoded sequence describes input frame `k + 1`, with all
//! velocities taken as backward differences. Decoding integrates the root
//! velocities from the origin facing +Z, so a sequence whose first frame is
//! already canonical (see [`canonicalize`]) round-trips exactly.

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MOTION_FPS: f64 = 20.0;
/// Ten seconds at the fixed motion rate.
pub const MAX_FRAMES: usize = 200;
pub const STD_FLOOR: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootJoints {
    pub left_heel: usize,
    pub left_toe: usize,
    pub right_heel: usize,
    pub right_toe: usize,
}

impl FootJoints {
    fn slots(&self) -> [usize; 4] {
        [self.left_heel, self.left_toe, self.right_heel, self.right_toe]
    }
}

/// Kinematic description needed to build root-space features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// `parents[0]` is the root and must be `None`.
    pub parents: Vec<Option<usize>>,
    /// Rest-pose offset of each joint from its parent.
    pub rest_offsets: Vec<[f64; 3]>,
    /// `(left, right)` joint pairs whose difference spans the body's across axis.
    pub facing_pairs: Vec<(usize, usize)>,
    pub feet: FootJoints,
}

impl Skeleton {
    /// Five-joint skeleton: pelvis plus heel and toe of each foot.
    pub fn toy5() -> Self {
        Skeleton {
            parents: vec![None, Some(0), Some(1), Some(0), Some(3)],
            rest_offsets: vec![
                [0.0, 0.0, 0.0],
                [0.1, -0.85, -0.03],
                [0.0, -0.02, 0.16],
                [-0.1, -0.85, -0.03],
                [0.0, -0.02, 0.16],
            ],
            facing_pairs: vec![(1, 3), (2, 4)],
            feet: FootJoints {
                left_heel: 1,
                left_toe: 2,
                right_heel: 3,
                right_toe: 4,
            },
        }
    }

    /// The 22-joint body used by the common text-to-motion corpora.
    pub fn body22() -> Self {
        let parents = vec![
            None,
            Some(0),
            Some(0),
            Some(0),
            Some(1),
            Some(2),
            Some(3),
            Some(4),
            Some(5),
            Some(6),
            Some(7),
            Some(8),
            Some(9),
            Some(9),
            Some(9),
            Some(12),
            Some(13),
            Some(14),
            Some(16),
            Some(17),
            Some(18),
            Some(19),
        ];
        let rest_offsets = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, -1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, -1.0, 0.0],
        ];
        Skeleton {
            parents,
            rest_offsets,
            facing_pairs: vec![(1, 2), (16, 17)],
            feet: FootJoints {
                left_heel: 7,
                left_toe: 10,
                right_heel: 8,
                right_toe: 11,
            },
        }
    }

    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints();
        if j < 2 {
            return Err(Error::invalid("skeleton needs at least two joints"));
        }
        if self.rest_offsets.len() != j {
            return Err(Error::Shape {
                what: "skeleton rest offsets".into(),
                expected: j,
                found: self.rest_offsets.len(),
            });
        }
        if self.parents[0].is_some() {
            return Err(Error::invalid("joint 0 must be the root"));
        }
        for (i, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => return Err(Error::invalid(format!("joint {i} has invalid parent {p:?}"))),
            }
        }
        let in_range = |x: usize| x < j;
        if self.facing_pairs.is_empty()
            || !self.facing_pairs.iter().all(|&(l, r)| in_range(l) && in_range(r))
            || !self.feet.slots().iter().all(|&x| in_range(x))
        {
            return Err(Error::invalid("skeleton facing/foot joints out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactThresholds {
    /// Heel displacement in m/frame below which the heel is in contact.
    pub heel: f64,
    pub toe: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        ContactThresholds {
            heel: 2e-3,
            toe: 1e-3,
        }
    }
}

/// Raw world-frame joint positions, Y up, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSequence {
    frames: usize,
    joints: usize,
    positions: Vec<[f64; 3]>,
    fps: f64,
}

impl JointSequence {
    pub fn new(joints: usize, positions: Vec<[f64; 3]>, fps: f64) -> Result<Self> {
        if joints == 0 || positions.is_empty() || positions.len() % joints != 0 {
            return Err(Error::invalid(format!(
                "{} positions do not form whole frames of {joints} joints",
                positions.len()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("joint positions contain NaN or Inf"));
        }
        Ok(JointSequence {
            frames: positions.len() / joints,
            joints,
            positions,
            fps,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frame(&self, t: usize) -> &[[f64; 3]] {
        &self.positions[t * self.joints..(t + 1) * self.joints]
    }

    pub fn position(&self, t: usize, j: usize) -> [f64; 3] {
        self.positions[t * self.joints + j]
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    /// Same sequence shifted by a constant world offset.
    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let positions = self
            .positions
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        JointSequence {
            positions,
            ..self.clone()
        }
    }
}

/// Column offsets of each feature block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub joints: usize,
}

impl FeatureLayout {
    pub const ROOT_YAW_VEL: usize = 0;
    pub const ROOT_VEL_X: usize = 1;
    pub const ROOT_VEL_Z: usize = 2;
    pub const ROOT_HEIGHT: usize = 3;

    pub fn new(joints: usize) -> Self {
        FeatureLayout { joints }
    }

    pub fn from_dim(dim: usize) -> Result<Self> {
        if dim < 23 || (dim + 1) % 12 != 0 {
            return Err(Error::invalid(format!(
                "feature dimension {dim} is not 12 J - 1 for any skeleton with J >= 2"
            )));
        }
        Ok(FeatureLayout::new((dim + 1) / 12))
    }

    pub fn dim(&self) -> usize {
        4 + 3 * (self.joints - 1) + 3 * self.joints + 6 * (self.joints - 1) + 4
    }

    pub fn local_positions(&self) -> usize {
        4
    }

    pub fn local_velocities(&self) -> usize {
        self.local_positions() + 3 * (self.joints - 1)
    }

    pub fn rotations(&self) -> usize {
        self.local_velocities() + 3 * self.joints
    }

    pub fn contacts(&self) -> usize {
        self.rotations() + 6 * (self.joints - 1)
    }
}

/// Encoded motion at the fixed 20 FPS rate, row-major `frames x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl MotionSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || frames > MAX_FRAMES {
            return Err(Error::invalid(format!(
                "motion length {frames} outside [1, {MAX_FRAMES}]"
            )));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape {
                what: "motion feature buffer".into(),
                expected: frames * dim,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("motion features contain NaN or Inf"));
        }
        Ok(MotionSequence { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Result<Self> {
        Self::new(frames, dim, vec![0.0; frames * dim])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fps(&self) -> f64 {
        MOTION_FPS
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Contiguous sub-range of frames.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::invalid(format!(
                "window {start}..{} exceeds {} frames",
                start + len,
                self.frames
            )));
        }
        Self::new(
            len,
            self.dim,
            self.data[start * self.dim..(start + len) * self.dim].to_vec(),
        )
    }

    /// Forces the foot-contact block to {0, 1} by thresholding at 0.5.
    pub fn snap_contacts(&mut self) -> Result<()> {
        let layout = FeatureLayout::from_dim(self.dim)?;
        let c0 = layout.contacts();
        for t in 0..self.frames {
            for v in &mut self.row_mut(t)[c0..c0 + 4] {
                *v = if *v >= 0.5 { 1.0 } else { 0.0 };
            }
        }
        Ok(())
    }
}

/// Rotates `v` about +Y by `angle`; maps +Z to `(sin a, 0, cos a)`.
fn rotate_y(v: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [v[0] * c + v[2] * s, v[1], -v[0] * s + v[2] * c]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn wrap_angle(a: f64) -> f64 {
    a.sin().atan2(a.cos())
}

/// Facing angle about +Y, 0 when the body faces +Z.
pub fn facing_angle(skeleton: &Skeleton, frame: &[[f64; 3]]) -> f64 {
    let mut across = [0.0; 3];
    for &(l, r) in &skeleton.facing_pairs {
        let d = sub(frame[l], frame[r]);
        across[0] += d[0];
        across[2] += d[2];
    }
    // forward = across x up, restricted to the ground plane
    let fx = -across[2];
    let fz = across[0];
    fx.atan2(fz)
}

/// Moves the first root position to the XZ origin and turns the first frame to face +Z.
pub fn canonicalize(skeleton: &Skeleton, joints: &JointSequence) -> JointSequence {
    let root = joints.position(0, 0);
    let angle = facing_angle(skeleton, joints.frame(0));
    let positions = joints
        .positions
        .iter()
        .map(|&p| rotate_y([p[0] - root[0], p[1], p[2] - root[2]], -angle))
        .collect();
    JointSequence {
        positions,
        ..joints.clone()
    }
}

/// Minimal rotation carrying `from` onto `to`, as its first two matrix columns.
fn swing_6d(from: [f64; 3], to: [f64; 3]) -> [f64; 6] {
    let a = Vector3::from(from);
    let b = Vector3::from(to);
    let rot = if a.norm() < 1e-12 || b.norm() < 1e-12 {
        Rotation3::identity()
    } else {
        Rotation3::rotation_between(&a, &b).unwrap_or_else(|| {
            // antiparallel: half turn about any axis perpendicular to `a`
            let helper = if a.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            Rotation3::from_axis_angle(&Unit::new_normalize(a.cross(&helper)), std::f64::consts::PI)
        })
    };
    let m = rot.matrix();
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

pub fn encode_pose_sequence(
    skeleton: &Skeleton,
    joints: &JointSequence,
    thresholds: ContactThresholds,
) -> Result<MotionSequence> {
    skeleton.validate()?;
    if (joints.fps - MOTION_FPS).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "joint sequence is at {} FPS; resample to {MOTION_FPS} first",
            joints.fps
        )));
    }
    if joints.frames < 2 {
        return Err(Error::invalid("encoding needs at least two frames"));
    }
    let nj = skeleton.joints();
    if joints.joints != nj {
        return Err(Error::Shape {
            what: "joint count".into(),
            expected: nj,
            found: joints.joints,
        });
    }
    let layout = FeatureLayout::new(nj);
    let dim = layout.dim();
    let frames = joints.frames - 1;
    let angles: Vec<f64> = (0..joints.frames)
        .map(|t| facing_angle(skeleton, joints.frame(t)))
        .collect();
    let feet = skeleton.feet.slots();
    let feet_thresholds = [
        thresholds.heel,
        thresholds.toe,
        thresholds.heel,
        thresholds.toe,
    ];

    let mut data = Vec::with_capacity(frames * dim);
    for t in 1..joints.frames {
        let cur = joints.frame(t);
        let prev = joints.frame(t - 1);
        let theta = angles[t];
        let root = cur[0];
        let root_vel = rotate_y(sub(root, prev[0]), -theta);

        data.push(wrap_angle(theta - angles[t - 1]) as f32);
        data.push(root_vel[0] as f32);
        data.push(root_vel[2] as f32);
        data.push(root[1] as f32);

        let local: Vec<[f64; 3]> = cur
            .iter()
            .map(|&p| rotate_y([p[0] - root[0], p[1], p[2] - root[2]], -theta))
            .collect();
        for p in &local[1..] {
            data.extend(p.iter().map(|&v| v as f32));
        }
        for j in 0..nj {
            let v = rotate_y(sub(cur[j], prev[j]), -theta);
            data.extend(v.iter().map(|&v| v as f32));
        }
        for j in 1..nj {
            let parent = skeleton.parents[j].expect("validated non-root parent");
            let bone = sub(local[j], local[parent]);
            data.extend(swing_6d(skeleton.rest_offsets[j], bone).iter().map(|&v| v as f32));
        }
        for (slot, &joint) in feet.iter().enumerate() {
            let moved = norm(sub(cur[joint], prev[joint]));
            data.push(if moved < feet_thresholds[slot] { 1.0 } else { 0.0 });
        }
    }
    MotionSequence::new(frames, dim, data)
}

/// Recovers world joint positions; the root starts at the origin facing +Z.
pub fn decode_pose_sequence(motion: &MotionSequence) -> Result<JointSequence> {
    let layout = FeatureLayout::from_dim(motion.dim)?;
    let nj = layout.joints;
    let mut positions = Vec::with_capacity(motion.frames * nj);
    let mut theta = 0.0f64;
    let mut root_x = 0.0f64;
    let mut root_z = 0.0f64;
    for t in 0..motion.frames {
        let row = motion.row(t);
        theta += row[FeatureLayout::ROOT_YAW_VEL] as f64;
        let vel = rotate_y(
            [
                row[FeatureLayout::ROOT_VEL_X] as f64,
                0.0,
                row[FeatureLayout::ROOT_VEL_Z] as f64,
            ],
            theta,
        );
        root_x += vel[0];
        root_z += vel[2];
        let root_y = row[FeatureLayout::ROOT_HEIGHT] as f64;
        positions.push([root_x, root_y, root_z]);
        let lp = layout.local_positions();
        for j in 0..nj - 1 {
            let o = lp + 3 * j;
            let world = rotate_y([row[o] as f64, row[o + 1] as f64, row[o + 2] as f64], theta);
            positions.push([world[0] + root_x, world[1], world[2] + root_z]);
        }
    }
    JointSequence::new(nj, positions, MOTION_FPS)
}

/// Linear-interpolation resampling onto a new frame rate.
pub fn resample_fps(joints: &JointSequence, target_fps: f64) -> Result<JointSequence> {
    if !(target_fps.is_finite() && target_fps > 0.0) {
        return Err(Error::invalid(format!("target fps must be positive, got {target_fps}")));
    }
    let ratio = target_fps / joints.fps;
    let out_frames = (joints.frames as f64 * ratio + 1e-9).floor() as usize;
    if out_frames < 2 {
        return Err(Error::invalid(format!(
            "resampled duration is {out_frames} frames; at least 2 are required"
        )));
    }
    let nj = joints.joints;
    let last = joints.frames - 1;
    let mut positions = Vec::with_capacity(out_frames * nj);
    for k in 0..out_frames {
        let src = k as f64 / ratio;
        let i = (src.floor() as usize).min(last);
        let frac = if i >= last { 0.0 } else { src - i as f64 };
        let next = (i + 1).min(last);
        for j in 0..nj {
            let a = joints.position(i, j);
            let b = joints.position(next, j);
            positions.push([
                a[0] + (b[0] - a[0]) * frac,
                a[1] + (b[1] - a[1]) * frac,
                a[2] + (b[2] - a[2]) * frac,
            ]);
        }
    }
    JointSequence::new(nj, positions, target_fps)
}

/// Per-dimension Z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Population mean and standard deviation over every frame of every motion.
    pub fn compute<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut dim = None;
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        for m in motions {
            let d = *dim.get_or_insert(m.dim);
            if m.dim != d {
                return Err(Error::Shape {
                    what: "motion dimension".into(),
                    expected: d,
                    found: m.dim,
                });
            }
            if mean.is_empty() {
                mean = vec![0.0; d];
                m2 = vec![0.0; d];
            }
            for t in 0..m.frames {
                count += 1;
                for (i, &x) in m.row(t).iter().enumerate() {
                    let x = x as f64;
                    let delta = x - mean[i];
                    mean[i] += delta / count as f64;
                    m2[i] += delta * (x - mean[i]);
                }
            }
        }
        if count == 0 {
            return Err(Error::invalid("cannot compute statistics of an empty corpus"));
        }
        let std = m2
            .iter()
            .map(|&s| ((s / count as f64).sqrt() as f32).max(STD_FLOOR))
            .collect();
        Ok(NormStats {
            mean: mean.into_iter().map(|v| v as f32).collect(),
            std,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Shape {
                what: "normalization std".into(),
                expected: self.mean.len(),
                found: self.std.len(),
            });
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("normalization std must be positive and finite"));
        }
        Ok(())
    }

    fn check(&self, motion: &MotionSequence) -> Result<()> {
        if motion.dim != self.dim() {
            return Err(Error::Shape {
                what: "normalization dimension".into(),
                expected: self.dim(),
                found: motion.dim,
            });
        }
        Ok(())
    }

    pub fn normalize(&self, motion: &MotionSequence) -> Result<MotionSequence> {
        self.check(motion)?;
        let mut out = motion.clone();
        for t in 0..out.frames {
            for (i, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = (*v - self.mean[i]) / self.std[i];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, motion: &MotionSequence) -> Result<MotionSequence> {
        self.check(motion)?;
        let mut out = motion.clone();
        for t in 0..out.frames {
            for (i, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = *v * self.std[i] + self.mean[i];
            }
        }
        Ok(out)
    }
}
