use crate::synthgen::RenderedSequence;

use super::EvalError;

/// PSNR reported for identical inputs, so aggregates stay finite.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &RenderedSequence, b: &RenderedSequence) -> Result<(), EvalError> {
    if a.shape() != b.shape() {
        return Err(EvalError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared difference over every value.
pub fn mse(a: &RenderedSequence, b: &RenderedSequence) -> Result<f64, EvalError> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// `10·log10(peak² / mse)` over the flattened sequence, capped at [`PSNR_CAP`].
pub fn psnr(a: &RenderedSequence, b: &RenderedSequence, peak: f64) -> Result<f64, EvalError> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

/// Channel-mean grayscale of frame `t`.
fn gray(s: &RenderedSequence, t: usize) -> Vec<f64> {
    let c = s.channels;
    s.frame(t)
        .chunks_exact(c)
        .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / c as f64)
        .collect()
}

/// SSIM of one window from its sample statistics.
pub fn ssim_window(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cov /= n;
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Window origins along one axis: stride-spaced, window clipped to the image.
fn origins(len: usize) -> (usize, Vec<usize>) {
    let w = SSIM_WINDOW.min(len);
    let mut v: Vec<usize> = (0..=len - w).step_by(SSIM_STRIDE).collect();
    if v.is_empty() {
        v.push(0);
    }
    (w, v)
}

/// Mean over frames of the mean windowed SSIM of channel-mean grayscale images.
pub fn ssim(a: &RenderedSequence, b: &RenderedSequence) -> Result<f64, EvalError> {
    same_shape(a, b)?;
    let (h, w) = (a.height, a.width);
    let (wh, rows) = origins(h);
    let (ww, cols) = origins(w);
    let mut total = 0.0;
    for t in 0..a.frames {
        let (ga, gb) = (gray(a, t), gray(b, t));
        let mut sum = 0.0;
        let mut xs = Vec::with_capacity(wh * ww);
        let mut ys = Vec::with_capacity(wh * ww);
        for &r in &rows {
            for &c in &cols {
                xs.clear();
                ys.clear();
                for i in r..r + wh {
                    xs.extend_from_slice(&ga[i * w + c..i * w + c + ww]);
                    ys.extend_from_slice(&gb[i * w + c..i * w + c + ww]);
                }
                sum += ssim_window(&xs, &ys);
            }
        }
        total += sum / (rows.len() * cols.len()) as f64;
    }
    Ok(total / a.frames.max(1) as f64)
}
