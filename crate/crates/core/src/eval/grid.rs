use std::io::Write;
use std::path::Path;

use crate::synthgen::RenderedSequence;

use super::EvalError;

/// Binary PPM of `rows` sequences stacked vertically, frames left to right,
/// separated by one-pixel white lines.
pub fn frame_grid_ppm(rows: &[&RenderedSequence]) -> Result<Vec<u8>, EvalError> {
    let first = rows.first().ok_or_else(|| EvalError::ShapeMismatch("empty grid".into()))?;
    if rows.iter().any(|r| r.shape() != first.shape()) || !(first.channels == 3 || first.channels == 1) {
        return Err(EvalError::ShapeMismatch("grid rows must share a 1- or 3-channel shape".into()));
    }
    let (t, h, w, c) = (first.frames, first.height, first.width, first.channels);
    let gw = t * w + t.saturating_sub(1);
    let gh = rows.len() * h + rows.len().saturating_sub(1);
    let mut img = vec![255u8; gw * gh * 3];
    for (ri, seq) in rows.iter().enumerate() {
        for f in 0..t {
            let frame = seq.frame(f);
            for y in 0..h {
                for x in 0..w {
                    let px = &frame[(y * w + x) * c..(y * w + x + 1) * c];
                    let gy = ri * (h + 1) + y;
                    let gx = f * (w + 1) + x;
                    for k in 0..3 {
                        let v = px[if c == 3 { k } else { 0 }];
                        img[(gy * gw + gx) * 3 + k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    let mut out = format!("P6\n{} {}\n255\n", gw, gh).into_bytes();
    out.extend_from_slice(&img);
    Ok(out)
}

pub fn write_frame_grid(path: &Path, rows: &[&RenderedSequence]) -> Result<(), EvalError> {
    let bytes = frame_grid_ppm(rows)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}
