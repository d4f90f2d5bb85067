use std::f64::consts::PI;

use super::SprayError;
use crate::tensor::Tensor;

/// `[H, W]` view of a heatmap; `[C, H, W]` maps are averaged over channels.
fn plane(heatmap: &Tensor) -> Result<(usize, usize, Vec<f64>), SprayError> {
    if heatmap.is_empty() {
        return Err(SprayError::EmptyHeatmap);
    }
    match *heatmap.shape() {
        [h, w] => Ok((h, w, heatmap.data().to_vec())),
        [c, h, w] => {
            let mut out = vec![0.0; h * w];
            for ch in heatmap.data().chunks(h * w) {
                out.iter_mut().zip(ch).for_each(|(o, v)| *o += v / c as f64);
            }
            Ok((h, w, out))
        }
        _ => Err(SprayError::NotAnImage(heatmap.shape().to_vec())),
    }
}

/// Overlap weights of each output cell with the input cells along one axis:
/// output cell `i` covers `[i * n / m, (i + 1) * n / m)` in input units.
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut cells = Vec::new();
            let mut j = lo.floor() as usize;
            while j < n && (j as f64) < hi {
                let overlap = hi.min(j as f64 + 1.0) - lo.max(j as f64);
                if overlap > 0.0 {
                    cells.push((j, overlap / scale));
                }
                j += 1;
            }
            cells
        })
        .collect()
}

/// Area-average resize: every output pixel is the mean of the input area it
/// covers (fractional overlaps weighted by area).
pub fn area_resize(heatmap: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, SprayError> {
    let (h, w, data) = plane(heatmap)?;
    if out_h == 0 || out_w == 0 {
        return Err(SprayError::EmptyHeatmap);
    }
    let (rows, cols) = (area_weights(h, out_h), area_weights(w, out_w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for rw in &rows {
        for cw in &cols {
            let mut v = 0.0;
            for &(r, a) in rw {
                for &(c, b) in cw {
                    v += a * b * data[r * w + c];
                }
            }
            out.push(v);
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w], out))
}

/// Magnitudes of the unnormalised 2D DFT of `map` (`[h, w]`, row-major).
pub fn dft_magnitude(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    // rows first, then columns
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for r in 0..h {
        for k in 0..w {
            let (mut a, mut b) = (0.0, 0.0);
            for c in 0..w {
                let t = -2.0 * PI * (k * c % w) as f64 / w as f64;
                a += map[r * w + c] * t.cos();
                b += map[r * w + c] * t.sin();
            }
            re[r * w + k] = a;
            im[r * w + k] = b;
        }
    }
    let mut out = vec![0.0; h * w];
    for k in 0..w {
        for l in 0..h {
            let (mut a, mut b) = (0.0, 0.0);
            for r in 0..h {
                let t = -2.0 * PI * (l * r % h) as f64 / h as f64;
                let (c, s) = (t.cos(), t.sin());
                a += re[r * w + k] * c - im[r * w + k] * s;
                b += re[r * w + k] * s + im[r * w + k] * c;
            }
            out[l * w + k] = a.hypot(b);
        }
    }
    out
}

/// Feature row for one heatmap: area-average downsize to `target`, then
/// the flattened DFT magnitude spectrum.
pub fn heatmap_spectrum(heatmap: &Tensor, target: (usize, usize)) -> Result<Vec<f64>, SprayError> {
    let small = area_resize(heatmap, target.0, target.1)?;
    Ok(dft_magnitude(small.data(), target.0, target.1))
}
