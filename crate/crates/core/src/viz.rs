//! Feature-map visualization.
//!
//! Token features on the grid are optionally low-pass filtered (a 3×3
//! Gaussian blur with σ = 1, blended 50/50 with the original), reduced to
//! three principal components, and mapped through LCh color space to sRGB:
//! component 1 drives lightness, component 2 chroma, component 3 hue. Each
//! component is min-max rescaled over the image to its channel's range; the
//! hue channel wraps. Out-of-gamut colors are clipped to `[0, 1]`.

use crate::error::{Error, Result};
use crate::imgproc::Image;
use crate::model::TokenFeatures;
use ndarray::{Array1, Array2, Array3};
use std::path::Path;

/// The normalized 3×3 Gaussian kernel with σ = 1.
pub fn gaussian_kernel3() -> Array2<f64> {
    let mut k = Array2::zeros((3, 3));
    for dy in 0..3usize {
        for dx in 0..3usize {
            let (fy, fx) = (dy as f64 - 1.0, dx as f64 - 1.0);
            k[[dy, dx]] = (-(fy * fy + fx * fx) / 2.0).exp();
        }
    }
    let z = k.sum();
    k / z
}

/// Reflect an out-of-range index back into `[0, n)` (mirror without
/// repeating the border sample; a 1-wide axis maps everything to 0).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// 3×3 Gaussian blur (σ = 1) of one channel on the token grid with
/// reflect padding, so grids smaller than the kernel still work.
pub fn gaussian_blur3(channel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = channel.dim();
    let k = gaussian_kernel3();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let sy = reflect(y as isize + dy, h);
                    let sx = reflect(x as isize + dx, w);
                    acc += k[[(dy + 1) as usize, (dx + 1) as usize]] * channel[[sy, sx]];
                }
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Low-pass filter of grid token features: per channel, half the original
/// plus half its 3×3 Gaussian blur. The class token is dropped.
pub fn lowpass_blend(features: &TokenFeatures) -> Result<TokenFeatures> {
    features.validate()?;
    let (gh, gw) = features.grid;
    let grid = features.grid_values(); // [B, gh*gw, width]
    let (b, _, width) = grid.dim();
    let mut out = grid.clone();
    for bi in 0..b {
        for c in 0..width {
            let channel = Array2::from_shape_fn((gh, gw), |(y, x)| grid[[bi, y * gw + x, c]]);
            let blurred = gaussian_blur3(&channel);
            for y in 0..gh {
                for x in 0..gw {
                    out[[bi, y * gw + x, c]] =
                        0.5 * channel[[y, x]] + 0.5 * blurred[[y, x]];
                }
            }
        }
    }
    Ok(TokenFeatures { values: out, grid: features.grid, has_class_token: false })
}

/// Three-component PCA of one token map.
#[derive(Debug, Clone)]
pub struct Pca3 {
    /// Per-token scores on the top three components, `[n_tok, 3]`.
    pub scores: Array2<f64>,
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 3],
}

/// Jacobi eigendecomposition of a symmetric matrix; returns eigenvalues and
/// column eigenvectors sorted by descending eigenvalue.
fn symmetric_eig(mat: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = mat.nrows();
    let mut a = mat.clone();
    let mut v = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-18 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vecs = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for row in 0..n {
            vecs[[row, col]] = v[[row, i]];
        }
    }
    (vals, vecs)
}

/// Top-3 principal components of mean-centered tokens (`[n_tok, width]`).
/// Each component's sign is fixed so its largest-magnitude loading is
/// positive; components beyond the data's rank are zero.
pub fn pca3(tokens: &Array2<f64>) -> Result<Pca3> {
    let (n, width) = tokens.dim();
    if n < 3 {
        return Err(Error::shape(format!("pca3 needs at least 3 tokens, got {n}")));
    }
    let mean = tokens.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = tokens - &mean.view().insert_axis(ndarray::Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let total_var: f64 = cov.diag().sum();
    let (vals, vecs) = symmetric_eig(&cov);
    let mut scores = Array2::zeros((n, 3));
    let mut explained = [0.0f64; 3];
    let rank_floor = 1e-12 * vals[0].abs().max(1e-300);
    for comp in 0..3.min(width) {
        if vals[comp] <= rank_floor {
            continue; // below rank: leave the component at zero
        }
        let mut axis: Array1<f64> = vecs.column(comp).to_owned();
        // sign convention: largest-|loading| entry positive
        let mut arg = 0usize;
        for (i, &x) in axis.iter().enumerate() {
            if x.abs() > axis[arg].abs() {
                arg = i;
            }
        }
        if axis[arg] < 0.0 {
            axis.mapv_inplace(|x| -x);
        }
        let proj = centered.dot(&axis);
        scores.column_mut(comp).assign(&proj);
        if total_var > 0.0 {
            explained[comp] = vals[comp] / total_var;
        }
    }
    Ok(Pca3 { scores, explained })
}

fn srgb_gamma(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// One LCh triple (L ∈ [0,100], C ≥ 0, h in degrees) to clipped sRGB.
pub fn lch_pixel_to_rgb(l: f64, c: f64, h: f64) -> [f64; 3] {
    let hr = h.to_radians();
    let (a, b) = (c * hr.cos(), c * hr.sin());
    // Lab -> XYZ under D65
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let finv = |t: f64| {
        let d = 6.0 / 29.0;
        if t > d {
            t * t * t
        } else {
            3.0 * d * d * (t - 4.0 / 29.0)
        }
    };
    let (xn, yn, zn) = (0.95047, 1.0, 1.08883);
    let (x, y, z) = (xn * finv(fx), yn * finv(fy), zn * finv(fz));
    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let bb = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;
    [
        srgb_gamma(r.max(0.0)).clamp(0.0, 1.0),
        srgb_gamma(g.max(0.0)).clamp(0.0, 1.0),
        srgb_gamma(bb.max(0.0)).clamp(0.0, 1.0),
    ]
}

/// Min-max rescale of one component to `[lo, hi]`; a constant component
/// maps to the midpoint.
fn rescale(xs: &ndarray::ArrayView1<f64>, lo: f64, hi: f64) -> Array1<f64> {
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span <= 0.0 {
        return Array1::from_elem(xs.len(), 0.5 * (lo + hi));
    }
    xs.mapv(|x| lo + (x - min) / span * (hi - lo))
}

/// Maps PCA scores to an RGB grid image `[gh, gw, 3]`: component 1 → L in
/// `[0, 100]`, component 2 → C in `[0, 100]`, component 3 → h in `[0, 360)`
/// (wrapping), then LCh → sRGB with gamut clipping.
pub fn lch_to_rgb(scores: &Array2<f64>, grid: (usize, usize)) -> Result<Array3<f64>> {
    let (gh, gw) = grid;
    if scores.nrows() != gh * gw || scores.ncols() != 3 {
        return Err(Error::shape(format!(
            "expected [{}x{}, 3] scores, got {:?}",
            gh,
            gw,
            scores.dim()
        )));
    }
    let l = rescale(&scores.column(0), 0.0, 100.0);
    let c = rescale(&scores.column(1), 0.0, 100.0);
    let mut h = rescale(&scores.column(2), 0.0, 360.0);
    h.mapv_inplace(|x| if x >= 360.0 { x - 360.0 } else { x });
    let mut out = Array3::zeros((gh, gw, 3));
    for y in 0..gh {
        for x in 0..gw {
            let i = y * gw + x;
            let rgb = lch_pixel_to_rgb(l[i], c[i], h[i]);
            for ch in 0..3 {
                out[[y, x, ch]] = rgb[ch];
            }
        }
    }
    Ok(out)
}

/// Full pipeline for one batch item: optional low-pass blend, PCA to three
/// components, LCh → RGB. Returns the `[gh, gw, 3]` color grid.
pub fn visualize_tokens(
    features: &TokenFeatures,
    batch_idx: usize,
    lowpass: bool,
) -> Result<Array3<f64>> {
    let feats =
        if lowpass { lowpass_blend(features)? } else { features.clone() };
    let grid = feats.grid_values();
    if batch_idx >= grid.shape()[0] {
        return Err(Error::shape(format!(
            "batch index {batch_idx} outside batch of {}",
            grid.shape()[0]
        )));
    }
    let tokens = grid.index_axis(ndarray::Axis(0), batch_idx).to_owned();
    let pca = pca3(&tokens)?;
    lch_to_rgb(&pca.scores, feats.grid)
}

/// Writes an RGB grid as a PNG, upscaling each cell to `cell_px` square
/// pixels with nearest-neighbor replication.
pub fn save_viz_png(rgb: &Array3<f64>, cell_px: usize, path: &Path) -> Result<()> {
    let (gh, gw, ch) = rgb.dim();
    if ch != 3 || cell_px == 0 {
        return Err(Error::shape("expected [gh, gw, 3] grid and cell_px >= 1"));
    }
    let img = Image::from_shape_fn((3, gh * cell_px, gw * cell_px), |(c, y, x)| {
        rgb[[y / cell_px, x / cell_px, c]]
    });
    crate::imgproc::save_png(&img, path)
}
