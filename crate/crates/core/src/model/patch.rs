use crate::substrate::Tensor;
use crate::synthgen::RenderedSequence;

use super::config::ModelConfig;

/// Frames `first..first + count` of `seq` as `[count · tokens_per_frame, patch_dim]`
/// token rows with pixel values mapped from `[0, 1]` to `[-1, 1]`.
///
/// Tokens are frame-major, then row-major over the patch grid; each token
/// lists its pixels row-major with channels innermost.
pub fn patchify(cfg: &ModelConfig, seq: &RenderedSequence, first: usize, count: usize) -> Tensor {
    let (gh, gw) = cfg.grid();
    let p = cfg.patch;
    let c = seq.channels;
    let pd = cfg.patch_dim();
    let mut out = Vec::with_capacity(count * gh * gw * pd);
    for f in first..first + count {
        let frame = seq.frame(f);
        for pr in 0..gh {
            for pc in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (pr * p + dy, pc * p + dx);
                        let base = (y * seq.width + x) * c;
                        out.extend(frame[base..base + c].iter().map(|v| 2.0 * v - 1.0));
                    }
                }
            }
        }
    }
    Tensor::new(vec![count * gh * gw, pd], out).expect("patch rows")
}

/// Inverse of [`patchify`]: token rows back to `frames` frames in `[0, 1]`, clamped.
pub fn unpatchify(cfg: &ModelConfig, tokens: &Tensor, frames: usize) -> RenderedSequence {
    let (gh, gw) = cfg.grid();
    let p = cfg.patch;
    let c = cfg.channels;
    let (h, w) = (cfg.height, cfg.width);
    let mut data = vec![0.0f32; frames * h * w * c];
    let td = tokens.data();
    let pd = cfg.patch_dim();
    for f in 0..frames {
        for pr in 0..gh {
            for pc in 0..gw {
                let tok = (f * gh + pr) * gw + pc;
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (pr * p + dy, pc * p + dx);
                        for ch in 0..c {
                            let v = td[tok * pd + (dy * p + dx) * c + ch];
                            data[((f * h + y) * w + x) * c + ch] = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    RenderedSequence::from_data([frames, h, w, c], data)
}
