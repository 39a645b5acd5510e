use std::f32::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::skeleton::joints::*;
use super::SynthError;

/// Joint-angle animation shared across embodiments.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub id: String,
    pub frames: usize,
    pub joint_count: usize,
    /// `frames × joint_count` radians, row-major.
    pub angles: Vec<f32>,
    /// Root translation per frame, pixels (relative to the scene anchor).
    pub root_track: Vec<[f32; 2]>,
}

impl MotionClip {
    pub fn new(
        id: impl Into<String>,
        frames: usize,
        joint_count: usize,
        angles: Vec<f32>,
        root_track: Vec<[f32; 2]>,
    ) -> Result<Self, SynthError> {
        let id = id.into();
        if frames < 2 {
            return Err(SynthError::InvalidMotion(format!("{}: needs at least 2 frames", id)));
        }
        if angles.len() != frames * joint_count || root_track.len() != frames {
            return Err(SynthError::InvalidMotion(format!("{}: buffer sizes", id)));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(SynthError::InvalidMotion(format!("{}: non-finite angle", id)));
        }
        Ok(Self {
            id,
            frames,
            joint_count,
            angles,
            root_track,
        })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.angles[t * self.joint_count..(t + 1) * self.joint_count]
    }

    /// SHA-256 over the angle and root buffers; equal digests mean the same animation.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.angles {
            h.update(a.to_le_bytes());
        }
        for r in &self.root_track {
            h.update(r[0].to_le_bytes());
            h.update(r[1].to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionFamily {
    Walk,
    Wave,
    Squat,
    Reach,
    Turn,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 5] = [
        MotionFamily::Walk,
        MotionFamily::Wave,
        MotionFamily::Squat,
        MotionFamily::Reach,
        MotionFamily::Turn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionFamily::Walk => "walk",
            MotionFamily::Wave => "wave",
            MotionFamily::Squat => "squat",
            MotionFamily::Reach => "reach",
            MotionFamily::Turn => "turn",
        }
    }
}

/// Sinusoidal joint trajectories for the humanoid skeleton.
///
/// `scale` converts the 32-pixel reference canvas to the target canvas for
/// root translations.
pub fn generate_motion(
    id: impl Into<String>,
    family: MotionFamily,
    frames: usize,
    scale: f32,
    rng: &mut ChaCha8Rng,
) -> Result<MotionClip, SynthError> {
    const J: usize = 14;
    let cycles: f32 = rng.random_range(0.6..1.6);
    let amp: f32 = rng.random_range(0.6..1.0);
    let phase: f32 = rng.random_range(0.0..2.0 * PI);
    let drift: f32 = rng.random_range(-2.5..2.5);
    let mut angles = vec![0.0f32; frames * J];
    let mut root = Vec::with_capacity(frames);
    for t in 0..frames {
        let u = t as f32 / (frames - 1) as f32;
        let w = 2.0 * PI * cycles * u + phase;
        let s = w.sin();
        let a = &mut angles[t * J..(t + 1) * J];
        let mut dy = 0.0;
        let mut dx = 0.0;
        match family {
            MotionFamily::Walk => {
                a[L_SHOULDER] = 0.7 * amp * s;
                a[R_SHOULDER] = -0.7 * amp * s;
                a[L_ELBOW] = -0.3 * amp * (1.0 + s);
                a[R_ELBOW] = 0.3 * amp * (1.0 - s);
                a[L_HIP] = -0.5 * amp * s;
                a[R_HIP] = 0.5 * amp * s;
                a[L_KNEE] = 0.5 * amp * (1.0 - s).max(0.0) * 0.6;
                a[R_KNEE] = -0.5 * amp * (1.0 + s).max(0.0) * 0.6;
                dx = drift * (2.0 * u - 1.0);
                dy = -0.5 * (2.0 * w).sin().abs();
            }
            MotionFamily::Wave => {
                a[R_SHOULDER] = -1.9 * amp;
                a[R_ELBOW] = -0.6 + 0.7 * amp * s;
                a[L_SHOULDER] = 0.15 * s;
                a[PELVIS] = 0.06 * s;
            }
            MotionFamily::Squat => {
                let depth = 0.5 * (1.0 - w.cos()) * amp;
                a[L_HIP] = -0.6 * depth;
                a[L_KNEE] = 1.2 * depth;
                a[R_HIP] = 0.6 * depth;
                a[R_KNEE] = -1.2 * depth;
                a[L_SHOULDER] = 1.1 * depth;
                a[R_SHOULDER] = -1.1 * depth;
                dy = 3.0 * depth;
            }
            MotionFamily::Reach => {
                let lift = 0.5 * (1.0 - w.cos());
                a[L_SHOULDER] = 1.6 * amp * lift;
                a[R_SHOULDER] = -1.6 * amp * lift;
                a[L_ELBOW] = -0.3 * lift;
                a[R_ELBOW] = 0.3 * lift;
                a[NECK] = 0.1 * s;
                dx = 0.5 * drift * s;
            }
            MotionFamily::Turn => {
                a[PELVIS] = 0.22 * amp * s;
                a[NECK] = -0.15 * amp * s;
                a[L_SHOULDER] = 0.5 * amp * (w + 1.0).sin();
                a[R_SHOULDER] = -0.5 * amp * (w + 1.0).sin();
                a[L_HIP] = -0.15 * s;
                a[R_HIP] = -0.15 * s;
                dx = drift * 0.6 * s;
            }
        }
        root.push([dx * scale, dy * scale]);
    }
    MotionClip::new(id, frames, J, angles, root)
}
