//! Image helpers on `[H×W×C]` tensors.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Contract(format!("expected an [H×W×C] image, got {s:?}"))),
    }
}

fn px(img: &[f64], w: usize, c: usize, y: usize, x: usize, ch: usize) -> f64 {
    img[(y * w + x) * c + ch]
}

/// Bilinear resampling with half-pixel centers and clamped borders.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let src = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for ch in 0..c {
                let top = px(src, w, c, y0, x0, ch) * (1.0 - tx) + px(src, w, c, y0, x1, ch) * tx;
                let bot = px(src, w, c, y1, x0, ch) * (1.0 - tx) + px(src, w, c, y1, x1, ch) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Bilinear upscale by an integer factor.
pub fn upscale(img: &Tensor, scale: usize) -> Result<Tensor> {
    let (h, w, _) = dims(img)?;
    resize_bilinear(img, h * scale, w * scale)
}

/// Mean over non-overlapping `scale × scale` blocks.
pub fn downsample_box(img: &Tensor, scale: usize) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::Config(format!(
            "image {h}×{w} not divisible by scale {scale}"
        )));
    }
    let (oh, ow) = (h / scale, w / scale);
    let src = img.data();
    let norm = (scale * scale) as f64;
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut s = 0.0;
                for dy in 0..scale {
                    for dx in 0..scale {
                        s += px(src, w, c, oy * scale + dy, ox * scale + dx, ch);
                    }
                }
                out[(oy * ow + ox) * c + ch] = s / norm;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

fn convolve_separable(img: &Tensor, kernel: &[f64]) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    let r = (kernel.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    s += kv * px(src, w, c, y, sx, ch);
                }
                tmp[(y * w + x) * c + ch] = s;
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    s += kv * px(&tmp, w, c, sy, x, ch);
                }
                out[(y * w + x) * c + ch] = s;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Gaussian blur with radius `ceil(3σ)` and replicate borders.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    convolve_separable(img, &k)
}

/// Mean over a `(2r+1)²` window, replicate borders.
pub fn box_blur(img: &Tensor, radius: usize) -> Result<Tensor> {
    let n = 2 * radius + 1;
    convolve_separable(img, &vec![1.0 / n as f64; n])
}

/// Sobel derivatives `(gx, gy)` of the channel mean.
pub fn sobel(img: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, w, c) = dims(img)?;
    let src = img.data();
    let lum = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        (0..c).map(|ch| px(src, w, c, yy, xx, ch)).sum::<f64>() / c as f64
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (lum(y - 1, x + 1) + 2.0 * lum(y, x + 1) + lum(y + 1, x + 1))
                - (lum(y - 1, x - 1) + 2.0 * lum(y, x - 1) + lum(y + 1, x - 1));
            gy[i] = (lum(y + 1, x - 1) + 2.0 * lum(y + 1, x) + lum(y + 1, x + 1))
                - (lum(y - 1, x - 1) + 2.0 * lum(y - 1, x) + lum(y - 1, x + 1));
        }
    }
    Ok((gx, gy))
}

/// Flat source index for each element of the `[N_p × p²C]` patch matrix of
/// an `[H×W×C]` image. Patches are row-major over the patch grid, elements
/// ordered `(dy, dx, c)`.
pub fn patchify_index(h: usize, w: usize, c: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Config(format!(
            "image {h}×{w} not divisible into {p}×{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * c);
    for py in 0..gh {
        for pxi in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        idx.push(((py * p + dy) * w + pxi * p + dx) * c + ch);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse permutation of [`patchify_index`].
pub fn depatchify_index(h: usize, w: usize, c: usize, p: usize) -> Result<Vec<usize>> {
    let fwd = patchify_index(h, w, c, p)?;
    let mut inv = vec![0; fwd.len()];
    for (patch_pos, &img_pos) in fwd.iter().enumerate() {
        inv[img_pos] = patch_pos;
    }
    Ok(inv)
}

pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w, c) = dims(img)?;
    let idx = patchify_index(h, w, c, p)?;
    let data = idx.iter().map(|&i| img.data()[i]).collect();
    Tensor::new(vec![(h / p) * (w / p), p * p * c], data)
}

pub fn depatchify(patches: &Tensor, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor> {
    let idx = depatchify_index(h, w, c, p)?;
    if patches.numel() != idx.len() {
        return Err(Error::dim("depatchify", patches.shape(), &[h, w, c]));
    }
    let data = idx.iter().map(|&i| patches.data()[i]).collect();
    Tensor::new(vec![h, w, c], data)
}

/// Mean of `values` (one per pixel) over each `p × p` patch.
pub fn pool_patches(values: &[f64], h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; gh * gw];
    for (i, o) in out.iter_mut().enumerate() {
        let (py, pxi) = (i / gw, i % gw);
        let mut s = 0.0;
        for dy in 0..p {
            for dx in 0..p {
                s += values[(py * p + dy) * w + pxi * p + dx];
            }
        }
        *o = s / (p * p) as f64;
    }
    out
}

/// 8-bit binary PGM (P5) of the channel mean, values clamped to `[0,1]`.
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, c) = dims(img)?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        let v = (0..c).map(|ch| img.data()[i * c + ch]).sum::<f64>() / c as f64;
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[h, w, c], |i| (i as f64 * 0.37).sin() * 0.5 + 0.5)
    }

    #[test]
    fn patchify_roundtrip() {
        let img = ramp(8, 12, 3);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[6, 48]);
        assert_eq!(depatchify(&p, 8, 12, 3, 4).unwrap(), img);
    }

    #[test]
    fn constant_images_survive_filters() {
        let img = Tensor::full(&[8, 8, 1], 0.3);
        for out in [
            gaussian_blur(&img, 1.3).unwrap(),
            box_blur(&img, 1).unwrap(),
            upscale(&img, 4).unwrap(),
            downsample_box(&img, 4).unwrap(),
        ] {
            for &v in out.data() {
                assert!((v - 0.3).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sobel_of_flat_is_zero() {
        let (gx, gy) = sobel(&Tensor::full(&[5, 5, 1], 0.7)).unwrap();
        assert!(gx.iter().chain(&gy).all(|&v| v == 0.0));
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, &Tensor::full(&[2, 3, 1], 1.0)).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&b[b.len() - 6..], &[255; 6]);
    }
}
