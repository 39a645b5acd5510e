use std::f32::consts::{FRAC_PI_2, PI};

use super::motion::MotionClip;
use super::SynthError;

/// Joint tree shared by every embodiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    /// Parent joint per joint; the root has `-1`.
    pub parent: Vec<i32>,
    /// Absolute bone direction at zero pose for the bone ending at each joint.
    /// The root entry is unused.
    pub rest_angles: Vec<f32>,
}

impl Skeleton {
    pub fn new(parent: Vec<i32>, rest_angles: Vec<f32>) -> Result<Self, SynthError> {
        let n = parent.len();
        if n < 2 || rest_angles.len() != n {
            return Err(SynthError::InvalidSkeleton(format!(
                "{} parents, {} rest angles",
                n,
                rest_angles.len()
            )));
        }
        if parent[0] != -1 {
            return Err(SynthError::InvalidSkeleton("joint 0 must be the root".into()));
        }
        for (j, &p) in parent.iter().enumerate().skip(1) {
            // Parents precede children, which also rules out cycles.
            if p < 0 || p as usize >= j {
                return Err(SynthError::InvalidSkeleton(format!(
                    "joint {} has parent {}",
                    j, p
                )));
            }
        }
        Ok(Self {
            parent,
            rest_angles,
        })
    }

    /// A simple chain `0 → 1 → … → n-1` with every bone pointing along +x.
    pub fn chain(joints: usize) -> Result<Self, SynthError> {
        let parent = (0..joints as i32).map(|j| j - 1).collect();
        Self::new(parent, vec![0.0; joints])
    }

    /// Front-facing humanoid: pelvis root, torso, shoulder and hip stubs,
    /// two-bone arms and legs. Image coordinates (y grows downward).
    pub fn humanoid() -> Self {
        let parent = vec![-1, 0, 1, 2, 3, 1, 5, 6, 0, 8, 9, 0, 11, 12];
        let down = FRAC_PI_2;
        let rest = vec![
            0.0,
            -FRAC_PI_2, // neck: torso points up
            PI,         // left shoulder stub
            down + 0.25,
            down + 0.1,
            0.0, // right shoulder stub
            down - 0.25,
            down - 0.1,
            PI, // left hip stub
            down + 0.08,
            down,
            0.0, // right hip stub
            down - 0.08,
            down,
        ];
        Self::new(parent, rest).expect("humanoid skeleton is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn bone_count(&self) -> usize {
        self.parent.len() - 1
    }
}

/// Named joints of [`Skeleton::humanoid`].
pub mod joints {
    pub const PELVIS: usize = 0;
    pub const NECK: usize = 1;
    pub const L_SHOULDER: usize = 2;
    pub const L_ELBOW: usize = 3;
    pub const L_HAND: usize = 4;
    pub const R_SHOULDER: usize = 5;
    pub const R_ELBOW: usize = 6;
    pub const R_HAND: usize = 7;
    pub const L_HIP: usize = 8;
    pub const L_KNEE: usize = 9;
    pub const L_FOOT: usize = 10;
    pub const R_HIP: usize = 11;
    pub const R_KNEE: usize = 12;
    pub const R_FOOT: usize = 13;
}

/// Appearance and proportions of one humanoid body.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbodimentSpec {
    pub id: String,
    /// Length of the bone ending at joint `j + 1`, in pixels.
    pub limb_lengths: Vec<f32>,
    /// Stroke width of the same bones, in pixels.
    pub limb_widths: Vec<f32>,
    /// RGB per bone, plus one trailing entry for the head.
    pub colors: Vec<[f32; 3]>,
    pub head_radius: f32,
}

impl EmbodimentSpec {
    pub fn validate(&self, skeleton: &Skeleton) -> Result<(), SynthError> {
        let bones = skeleton.bone_count();
        if self.limb_lengths.len() != bones
            || self.limb_widths.len() != bones
            || self.colors.len() != bones + 1
        {
            return Err(SynthError::TopologyMismatch {
                expected: skeleton.joint_count(),
                found: self.limb_lengths.len() + 1,
            });
        }
        if self.limb_lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(SynthError::InvalidEmbodiment(format!(
                "{}: limb lengths must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// Per-frame joint positions, `frames × joints × 2` (x, y).
#[derive(Clone, Debug, PartialEq)]
pub struct JointTrack {
    pub frames: usize,
    pub joints: usize,
    pub xy: Vec<[f32; 2]>,
    /// Parent joint per joint (root entry unused); bones are drawn child ← parent.
    pub parents: Vec<usize>,
    pub motion_id: String,
    /// [`MotionClip::digest`] of the animation these positions came from.
    pub motion_digest: String,
}

impl JointTrack {
    /// A track with no figure at all.
    pub fn empty(frames: usize) -> Self {
        Self {
            frames,
            joints: 0,
            xy: Vec::new(),
            parents: Vec::new(),
            motion_id: String::new(),
            motion_digest: String::new(),
        }
    }

    pub fn at(&self, frame: usize, joint: usize) -> [f32; 2] {
        self.xy[frame * self.joints + joint]
    }
}

/// Forward kinematics of `motion` on `emb`'s proportions.
///
/// The bone ending at joint `c` points along `rest_angles[c]` rotated by the
/// summed motion angles of every ancestor of `c` (its parent included), so the
/// angle stored at a joint turns the bones below it.
pub fn retarget(
    motion: &MotionClip,
    skeleton: &Skeleton,
    emb: &EmbodimentSpec,
) -> Result<JointTrack, SynthError> {
    let j = skeleton.joint_count();
    if motion.joint_count != j {
        return Err(SynthError::TopologyMismatch {
            expected: j,
            found: motion.joint_count,
        });
    }
    emb.validate(skeleton)?;
    let mut xy = Vec::with_capacity(motion.frames * j);
    let mut cum = vec![0.0f32; j];
    let mut pos = vec![[0.0f32; 2]; j];
    for t in 0..motion.frames {
        let angles = motion.frame(t);
        pos[0] = motion.root_track[t];
        cum[0] = angles[0];
        for c in 1..j {
            let p = skeleton.parent[c] as usize;
            let dir = skeleton.rest_angles[c] + cum[p];
            let len = emb.limb_lengths[c - 1];
            pos[c] = [pos[p][0] + len * dir.cos(), pos[p][1] + len * dir.sin()];
            cum[c] = cum[p] + angles[c];
        }
        xy.extend_from_slice(&pos);
    }
    Ok(JointTrack {
        frames: motion.frames,
        joints: j,
        xy,
        parents: skeleton.parent.iter().map(|&p| p.max(0) as usize).collect(),
        motion_id: motion.id.clone(),
        motion_digest: motion.digest(),
    })
}
