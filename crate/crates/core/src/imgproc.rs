//! Image processing primitives.
//!
//! Images are `[C, H, W]` arrays of `f64` in `[0, 1]`. Every resampling
//! routine is hand-rolled in f64 so results are identical across platforms:
//!
//! - [`resize`]: antialiased bilinear (separable triangle filter, PIL-style
//!   half-pixel centers). Used for every image-space resolution change.
//! - [`resize_grid_align_corners`]: plain bilinear with align-corners
//!   convention, used only for positional-embedding tables where preserving
//!   linear ramps matters more than antialiasing.
//! - [`area_downsample`]: exact box-overlap averaging onto a coarser grid,
//!   used to bring teacher label maps down to the token grid.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

/// `[C, H, W]` image with values nominally in `[0, 1]`.
pub type Image = Array3<f64>;

fn triangle(t: f64) -> f64 {
    (1.0 - t.abs()).max(0.0)
}

/// Precomputed 1-D resampling weights: for each output index, the input
/// window `[lo, lo+len)` and its normalized weights.
fn resample_weights(in_len: usize, out_len: usize) -> Vec<(usize, Vec<f64>)> {
    assert!(in_len > 0 && out_len > 0);
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    let mut rows = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let center = (o as f64 + 0.5) * scale;
        let lo = ((center - support).floor().max(0.0)) as usize;
        let hi = ((center + support).ceil() as usize).min(in_len);
        let mut weights = Vec::with_capacity(hi - lo);
        let mut sum = 0.0;
        for i in lo..hi {
            let w = triangle((i as f64 + 0.5 - center) / support);
            weights.push(w);
            sum += w;
        }
        if sum <= 0.0 {
            // degenerate window (can only happen at extreme clamping); fall
            // back to nearest pixel
            let nearest = (center as usize).min(in_len - 1);
            rows.push((nearest, vec![1.0]));
            continue;
        }
        for w in &mut weights {
            *w /= sum;
        }
        rows.push((lo, weights));
    }
    rows
}

/// Antialiased bilinear resize of `[C, H, W]` to `[C, out_h, out_w]`.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize with zero-sized dimension"));
    }
    if h == out_h && w == out_w {
        return Ok(img.clone());
    }
    let wx = resample_weights(w, out_w);
    let wy = resample_weights(h, out_h);
    // horizontal pass
    let mut tmp = Array3::<f64>::zeros((c, h, out_w));
    for ci in 0..c {
        for y in 0..h {
            for (ox, (lo, ws)) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for (k, wv) in ws.iter().enumerate() {
                    acc += wv * img[[ci, y, lo + k]];
                }
                tmp[[ci, y, ox]] = acc;
            }
        }
    }
    // vertical pass
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for ci in 0..c {
        for (oy, (lo, ws)) in wy.iter().enumerate() {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for (k, wv) in ws.iter().enumerate() {
                    acc += wv * tmp[[ci, lo + k, ox]];
                }
                out[[ci, oy, ox]] = acc;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resize for integer label maps, using the same half-pixel
/// center convention as [`resize`] so labels stay registered with pixels.
pub fn resize_nearest_labels(labels: &Array2<u32>, out_h: usize, out_w: usize) -> Array2<u32> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let sy = (((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).round().max(0.0) as usize)
            .min(h - 1);
        let sx = (((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).round().max(0.0) as usize)
            .min(w - 1);
        labels[[sy, sx]]
    })
}

/// Bilinear resample of a `[H, W, D]` grid with the align-corners convention:
/// corner samples map onto corner samples, so linear ramps are preserved
/// exactly. Meant for positional-embedding tables, not images.
pub fn resize_grid_align_corners(grid: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, d) = grid.dim();
    let src = |o: usize, out_len: usize, in_len: usize| -> f64 {
        if out_len <= 1 || in_len <= 1 {
            0.0
        } else {
            o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
        }
    };
    let mut out = Array3::<f64>::zeros((out_h, out_w, d));
    for oy in 0..out_h {
        let fy = src(oy, out_h, h);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = src(ox, out_w, w);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for di in 0..d {
                let v00 = grid[[y0, x0, di]];
                let v01 = grid[[y0, x1, di]];
                let v10 = grid[[y1, x0, di]];
                let v11 = grid[[y1, x1, di]];
                let top = v00 * (1.0 - tx) + v01 * tx;
                let bot = v10 * (1.0 - tx) + v11 * tx;
                out[[oy, ox, di]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Crop `[C, H, W]` to the window starting at `(top, left)`.
pub fn crop(img: &Image, top: usize, left: usize, ch: usize, cw: usize) -> Result<Image> {
    let (_, h, w) = img.dim();
    if top + ch > h || left + cw > w || ch == 0 || cw == 0 {
        return Err(Error::shape(format!(
            "crop window {}x{}+{}+{} outside {}x{} image",
            ch, cw, top, left, h, w
        )));
    }
    Ok(img.slice(ndarray::s![.., top..top + ch, left..left + cw]).to_owned())
}

/// Conventional evaluation crop: resize the short side to `size`, then take
/// the centered `size`×`size` window.
pub fn center_crop(img: &Image, size: usize) -> Result<Image> {
    let (_, h, w) = img.dim();
    let (rh, rw) = if h <= w {
        (size, (w as f64 * size as f64 / h as f64).round().max(size as f64) as usize)
    } else {
        ((h as f64 * size as f64 / w as f64).round().max(size as f64) as usize, size)
    };
    let resized = resize(img, rh, rw)?;
    let top = (rh - size) / 2;
    let left = (rw - size) / 2;
    crop(&resized, top, left, size, size)
}

/// Non-aspect-preserving resize straight to `size`×`size`.
pub fn squash(img: &Image, size: usize) -> Result<Image> {
    resize(img, size, size)
}

/// Horizontal mirror.
pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    out.invert_axis(Axis(2));
    out
}

/// Remove a `border_px`-wide strip from all four sides.
pub fn strip_border(img: &Image, border_px: usize) -> Result<Image> {
    let (_, h, w) = img.dim();
    if 2 * border_px >= h.min(w) {
        return Err(Error::shape(format!(
            "border {} leaves no interior in {}x{} image",
            border_px, h, w
        )));
    }
    crop(img, border_px, border_px, h - 2 * border_px, w - 2 * border_px)
}

/// 3-tap Gaussian blur (σ = 1) over the spatial axes of `[C, H, W]`, with
/// mirror padding at the edges.
pub fn gaussian_blur3(map: &Array3<f64>) -> Array3<f64> {
    let sigma: f64 = 1.0;
    let side = (-0.5 / (sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * side;
    let k = [side / norm, 1.0 / norm, side / norm];
    let (c, h, w) = map.dim();
    let reflect = |i: isize, n: usize| -> usize {
        if n == 1 {
            0
        } else if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * (n - 1) - i as usize
        } else {
            i as usize
        }
    };
    let mut tmp = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (d, kv) in k.iter().enumerate() {
                    acc += kv * map[[ci, y, reflect(x as isize + d as isize - 1, w)]];
                }
                tmp[[ci, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (d, kv) in k.iter().enumerate() {
                    acc += kv * tmp[[ci, reflect(y as isize + d as isize - 1, h), x]];
                }
                out[[ci, y, x]] = acc;
            }
        }
    }
    out
}

/// Exact area-weighted average pooling of `[C, H, W]` onto a `[C, gh, gw]`
/// grid. Each output cell averages the input pixels its box covers, with
/// fractional coverage at the box edges.
pub fn area_downsample(map: &Array3<f64>, gh: usize, gw: usize) -> Result<Array3<f64>> {
    let (c, h, w) = map.dim();
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(Error::shape(format!(
            "area_downsample {}x{} -> {}x{} is not a downsample",
            h, w, gh, gw
        )));
    }
    let spans = |n: usize, g: usize| -> Vec<Vec<(usize, f64)>> {
        let step = n as f64 / g as f64;
        (0..g)
            .map(|o| {
                let lo = o as f64 * step;
                let hi = (o + 1) as f64 * step;
                let mut cover = Vec::new();
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(n);
                for i in first..last {
                    let overlap = hi.min((i + 1) as f64) - lo.max(i as f64);
                    if overlap > 0.0 {
                        cover.push((i, overlap));
                    }
                }
                cover
            })
            .collect()
    };
    let ys = spans(h, gh);
    let xs = spans(w, gw);
    let mut out = Array3::<f64>::zeros((c, gh, gw));
    for ci in 0..c {
        for (oy, yc) in ys.iter().enumerate() {
            for (ox, xc) in xs.iter().enumerate() {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for &(y, wy) in yc {
                    for &(x, wx) in xc {
                        acc += wy * wx * map[[ci, y, x]];
                        wsum += wy * wx;
                    }
                }
                out[[ci, oy, ox]] = acc / wsum;
            }
        }
    }
    Ok(out)
}

/// Clamp all values into `[0, 1]` after photometric ops.
pub fn clamp01(img: &mut Image) {
    img.mapv_inplace(|x| x.clamp(0.0, 1.0));
}

/// Stack equal-shaped `[C, H, W]` images into a `[B, C, H, W]` batch.
pub fn stack_images(images: &[Image]) -> Result<ndarray::Array4<f64>> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("stack_images: empty image list"))?;
    let (c, h, w) = first.dim();
    let mut out = ndarray::Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::shape(format!(
                "image {i} is {:?}, expected {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    Ok(out)
}

/// Write a `[0,1]` image as an 8-bit RGB PNG.
pub fn save_png(img: &Image, path: &std::path::Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((img[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::shape("png buffer size mismatch"))?;
    rgb.save(path)?;
    Ok(())
}

/// Read an 8-bit RGB PNG into a `[3, H, W]` image in `[0, 1]`.
pub fn load_png(path: &std::path::Path) -> Result<Image> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Image::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = px[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}
