//! Resampling and filtering of single-channel maps.

use crate::metrics::SaliencyMap;

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let k = -0.5 / (sigma * sigma);
    (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (k * d * d).exp()
        })
        .collect()
}

/// One separable pass; weights are renormalized over in-bounds taps so a
/// constant row stays constant up to the border.
fn blur_axis(
    src: &[f64],
    len: usize,
    stride: usize,
    count: usize,
    step: usize,
    taps: &[f64],
) -> Vec<f64> {
    let radius = taps.len() / 2;
    let mut out = vec![0.0; src.len()];
    for line in 0..count {
        let base = line * step;
        for i in 0..len {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(len - 1);
            let (mut acc, mut mass) = (0.0, 0.0);
            for j in lo..=hi {
                let w = taps[j + radius - i];
                acc += w * src[base + j * stride];
                mass += w;
            }
            out[base + i * stride] = acc / mass;
        }
    }
    out
}

/// Normalized Gaussian blur with standard deviation `sigma` pixels.
pub fn gaussian_blur(m: &SaliencyMap, sigma: f64) -> SaliencyMap {
    if sigma <= 0.0 {
        return m.clone();
    }
    let taps = gaussian_taps(sigma);
    let (w, h) = m.dims();
    let rows = blur_axis(&m.values, w, 1, h, w, &taps);
    let cols = blur_axis(&rows, h, w, w, 1, &taps);
    SaliencyMap::new(w, h, cols)
}

/// Bilinear sample at continuous pixel coordinates, clamped to the border.
pub fn sample_bilinear(m: &SaliencyMap, x: f64, y: f64) -> f64 {
    let (w, h) = m.dims();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = m.at(x0, y0) * (1.0 - fx) + m.at(x1, y0) * fx;
    let bottom = m.at(x0, y1) * (1.0 - fx) + m.at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// `out(x, y) = m(x - dx, y - dy)`.
pub fn shift(m: &SaliencyMap, dx: f64, dy: f64) -> SaliencyMap {
    SaliencyMap::from_fn(m.width, m.height, |x, y| {
        sample_bilinear(m, x as f64 - dx, y as f64 - dy)
    })
}

/// Bilinear resize with pixel centers aligned.
pub fn resample_bilinear(m: &SaliencyMap, width: usize, height: usize) -> SaliencyMap {
    if m.dims() == (width, height) {
        return m.clone();
    }
    let sx = m.width as f64 / width as f64;
    let sy = m.height as f64 / height as f64;
    SaliencyMap::from_fn(width, height, |x, y| {
        sample_bilinear(m, (x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
    })
}

/// Scales to max 1; an all-zero map is returned unchanged.
pub fn normalize_max(mut m: SaliencyMap) -> SaliencyMap {
    let max = m.max();
    if max > 0.0 {
        m.values.iter_mut().for_each(|v| *v /= max);
    }
    m
}
