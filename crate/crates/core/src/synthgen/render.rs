use super::scene::SceneSpec;
use super::skeleton::{EmbodimentSpec, JointTrack};
use super::SynthError;

/// `T × H × W × C` frames in `[0, 1]` with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSequence {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    /// `T × H × W`; true where the figure was drawn.
    pub figure_mask: Vec<bool>,
    pub embodiment_id: String,
    pub motion_id: String,
    pub scene_id: String,
    pub motion_digest: String,
}

impl RenderedSequence {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    /// Same shape and provenance-free payload built from raw values.
    pub fn from_data(shape: [usize; 4], data: Vec<f32>) -> Self {
        let [t, h, w, c] = shape;
        assert_eq!(data.len(), t * h * w * c, "sequence payload size");
        Self {
            frames: t,
            height: h,
            width: w,
            channels: c,
            data,
            figure_mask: vec![false; t * h * w],
            embodiment_id: String::new(),
            motion_id: String::new(),
            scene_id: String::new(),
            motion_digest: String::new(),
        }
    }

    pub fn sequence_id(&self) -> String {
        format!("{}_{}_{}", self.embodiment_id, self.motion_id, self.scene_id)
    }

    /// First `frames` frames as a new sequence.
    pub fn prefix(&self, frames: usize) -> RenderedSequence {
        let n = self.frame_len();
        let hw = self.height * self.width;
        let mut out = self.clone();
        out.frames = frames;
        out.data.truncate(frames * n);
        out.figure_mask.truncate(frames * hw);
        out
    }
}

/// True when the pixel centre `(px, py)` lies on the bone `a → b` of stroke `width`.
///
/// Flat caps: the centre must project inside the segment and lie within half
/// the width of its axis.
pub fn on_segment(px: f32, py: f32, a: [f32; 2], b: [f32; 2], width: f32) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return false;
    }
    let (ux, uy) = (dx / len, dy / len);
    let (rx, ry) = (px - a[0], py - a[1]);
    let along = rx * ux + ry * uy;
    let across = (rx * uy - ry * ux).abs();
    (0.0..=len).contains(&along) && across <= 0.5 * width
}

/// Head centre for a track: beyond joint 1, continuing the bone from joint 0.
fn head_center(track: &JointTrack, t: usize, radius: f32) -> Option<[f32; 2]> {
    if track.joints < 2 || radius <= 0.0 {
        return None;
    }
    let a = track.at(t, 0);
    let b = track.at(t, 1);
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = (dx * dx + dy * dy).sqrt().max(1e-6);
    let reach = radius + 0.5;
    Some([b[0] + dx / len * reach, b[1] + dy / len * reach])
}

/// Hard rasterization of `positions` (translated by the scene's camera offset)
/// over the scene background.
pub fn render(
    positions: &JointTrack,
    emb: &EmbodimentSpec,
    scene: &SceneSpec,
    height: usize,
    width: usize,
) -> Result<RenderedSequence, SynthError> {
    const C: usize = 3;
    let t_len = positions.frames;
    let off = [scene.camera_offset[0] as f32, scene.camera_offset[1] as f32];
    let inside = |p: [f32; 2]| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < width as f32 && p[1] < height as f32;

    let mut data = vec![0.0f32; t_len * height * width * C];
    let mut mask = vec![false; t_len * height * width];
    let mut pts = Vec::with_capacity(positions.joints);
    for t in 0..t_len {
        pts.clear();
        for j in 0..positions.joints {
            let p = positions.at(t, j);
            let q = [p[0] + off[0], p[1] + off[1]];
            if !inside(q) {
                return Err(SynthError::OutOfFrame {
                    frame: t,
                    joint: j,
                    x: q[0],
                    y: q[1],
                });
            }
            pts.push(q);
        }
        let head = head_center(positions, t, emb.head_radius).map(|h| [h[0] + off[0], h[1] + off[1]]);
        if let Some(h) = head {
            if !inside(h) {
                return Err(SynthError::OutOfFrame {
                    frame: t,
                    joint: positions.joints,
                    x: h[0],
                    y: h[1],
                });
            }
        }
        for r in 0..height {
            for c in 0..width {
                let (px, py) = (c as f32 + 0.5, r as f32 + 0.5);
                let mut color = scene.background_pixel(r, c);
                let mut hit = false;
                // Bone j spans parent(j + 1) → j + 1; later bones paint over earlier ones.
                for bone in 0..positions.joints.saturating_sub(1) {
                    let child = bone + 1;
                    let parent = parent_of(positions, child);
                    if on_segment(px, py, pts[parent], pts[child], emb.limb_widths[bone]) {
                        color = emb.colors[bone];
                        hit = true;
                    }
                }
                if let Some(h) = head {
                    let (dx, dy) = (px - h[0], py - h[1]);
                    if dx * dx + dy * dy <= emb.head_radius * emb.head_radius {
                        color = *emb.colors.last().unwrap();
                        hit = true;
                    }
                }
                let base = ((t * height + r) * width + c) * C;
                data[base..base + C].copy_from_slice(&color);
                mask[(t * height + r) * width + c] = hit;
            }
        }
    }
    Ok(RenderedSequence {
        frames: t_len,
        height,
        width,
        channels: C,
        data,
        figure_mask: mask,
        embodiment_id: emb.id.clone(),
        motion_id: positions.motion_id.clone(),
        scene_id: scene.id.clone(),
        motion_digest: positions.motion_digest.clone(),
    })
}

fn parent_of(track: &JointTrack, child: usize) -> usize {
    track.parents.get(child).copied().unwrap_or(child - 1)
}
