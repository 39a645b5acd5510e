//! Browser bindings: render synthetic clips, draw attention masks and score
//! one clip against another. Images are returned as RGBA bytes.

use tape_core::eval::{psnr, ssim};
use tape_core::model::{build_branch_mask, Role, TextRule, TokenLayout};
use tape_core::streaming::{build_block_causal_mask, build_superchunk_layout};
use tape_core::substrate::AttentionMask;
use tape_core::synthgen::{Canvas, DataConfig, RenderedSequence, World};
use wasm_bindgen::prelude::*;

/// An RGBA image.
#[wasm_bindgen]
pub struct Image {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Image {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major RGBA bytes.
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

/// Frames side by side, one pixel of white between them.
fn filmstrip(seq: &RenderedSequence) -> Image {
    let (t, h, w, c) = (seq.frames, seq.height, seq.width, seq.channels);
    let width = t * w + t.saturating_sub(1);
    let mut rgba = vec![255u8; width * h * 4];
    for f in 0..t {
        let frame = seq.frame(f);
        for y in 0..h {
            for x in 0..w {
                let px = &frame[(y * w + x) * c..(y * w + x + 1) * c];
                let o = (y * width + f * (w + 1) + x) * 4;
                for k in 0..3 {
                    rgba[o + k] = (px[k.min(c - 1)].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Image { width, height: h, rgba }
}

fn role_color(role: Role) -> [u8; 3] {
    match role {
        Role::Text(_) => [214, 148, 40],
        Role::Cond => [52, 120, 200],
        Role::Den => [200, 70, 60],
        Role::Ref => [70, 160, 90],
    }
}

/// Visible entries coloured by the key token's role, hidden ones light grey.
fn mask_image(mask: &AttentionMask, layout: &TokenLayout) -> Image {
    let n = mask.rows();
    let mut rgba = Vec::with_capacity(n * n * 4);
    for i in 0..n {
        for j in 0..n {
            let [r, g, b] = if mask.visible(i, j) { role_color(layout.roles[j]) } else { [236, 236, 236] };
            rgba.extend_from_slice(&[r, g, b, 255]);
        }
    }
    Image {
        width: n,
        height: n,
        rgba,
    }
}

/// A small generated world: bodies, motions and scenes on a 16x16 canvas.
#[wasm_bindgen]
pub struct Demo {
    world: World,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, frames: usize) -> Result<Demo, JsError> {
        let cfg = DataConfig {
            canvas: Canvas {
                frames: frames.clamp(1, 32),
                height: 16,
                width: 16,
            },
            seed,
            ..DataConfig::default()
        };
        let world = World::generate(&cfg).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Demo { world })
    }

    pub fn embodiments(&self) -> Vec<String> {
        self.world.embodiments.iter().map(|e| e.id.clone()).collect()
    }

    pub fn motions(&self) -> Vec<String> {
        self.world.motions.iter().map(|m| m.id.clone()).collect()
    }

    pub fn scenes(&self) -> Vec<String> {
        self.world.scenes.iter().map(|s| s.id.clone()).collect()
    }

    fn clip(&self, body: &str, motion: &str, scene: &str) -> Result<RenderedSequence, JsError> {
        self.world
            .render_triple(body, motion, scene)
            .map_err(|e| JsError::new(&e.to_string()))
    }

    /// One body performing one motion in one scene, as a filmstrip.
    pub fn render(&self, body: &str, motion: &str, scene: &str) -> Result<Image, JsError> {
        Ok(filmstrip(&self.clip(body, motion, scene)?))
    }

    /// PSNR (dB) and SSIM of `source` body's clip scored against `target`
    /// body's clip of the same motion and scene: the copy-source baseline.
    pub fn copy_source_scores(&self, source: &str, target: &str, motion: &str, scene: &str) -> Result<Vec<f64>, JsError> {
        let a = self.clip(source, motion, scene)?;
        let b = self.clip(target, motion, scene)?;
        let err = |e: tape_core::eval::EvalError| JsError::new(&e.to_string());
        Ok(vec![psnr(&a, &b, 1.0).map_err(err)?, ssim(&a, &b).map_err(err)?])
    }
}

/// Branch mask of the bidirectional model over `[text | cond | den]`.
#[wasm_bindgen]
pub fn teacher_mask_image(text: usize, frames: usize, per_frame: usize, text_reads_den: bool) -> Result<Image, JsError> {
    let layout = TokenLayout::teacher(text, frames, frames, per_frame);
    let rule = if text_reads_den { TextRule::ReadsDen } else { TextRule::Isolated };
    let mask = build_branch_mask(&layout, rule).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(mask_image(&mask, &layout))
}

/// Block-causal mask of the streaming layout `[ref | cond_0 | tgt_0 | ...]`
/// with `chunks` chunks.
#[wasm_bindgen]
pub fn causal_mask_image(chunks: usize, ref_len: usize, chunk_len: usize) -> Result<Image, JsError> {
    let layout = build_superchunk_layout(chunks.saturating_sub(1), ref_len, chunk_len, chunk_len)
        .map_err(|e| JsError::new(&e.to_string()))?;
    Ok(mask_image(&build_block_causal_mask(&layout), &layout.tokens))
}
