//! Label-consistent training augmentations and inference preprocessing.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_line, transform_point, HomogPoint, Homography};
use crate::model::ModelInput;
use crate::synth::LabeledSample;

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    /// Channel statistics of `images`.
    pub fn estimate<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0f64;
        for img in images {
            for p in img.pixels() {
                for k in 0..3 {
                    let v = p.0[k] as f64 / 255.0;
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / n);
        let mut std = [0f32; 3];
        for k in 0..3 {
            std[k] = (sq[k] / n - mean[k] * mean[k]).max(1e-6).sqrt() as f32;
        }
        Self {
            mean: mean.map(|m| m as f32),
            std,
        }
    }
}

/// Crop window `(x0, y0, width, height)` bringing `w × h` to a 3:2 aspect.
pub fn crop_bounds(w: u32, h: u32) -> (u32, u32, u32, u32) {
    let (w64, h64) = (w as u64, h as u64);
    if 2 * w64 < 3 * h64 {
        let ch = (2 * w64).div_ceil(3) as u32;
        (0, (h - ch) / 2, w, ch)
    } else if 2 * w64 > 3 * h64 {
        let cw = (3 * h64).div_ceil(2) as u32;
        ((w - cw) / 2, 0, cw, h)
    } else {
        (0, 0, w, h)
    }
}

/// Crops to 3:2 and resizes to `width × height` without normalizing.
pub fn crop_and_resize(img: &RgbImage, width: u32, height: u32) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    if w < 3 || h < 2 {
        return Err(Error::ImageTooSmall { width: w, height: h });
    }
    let (x0, y0, cw, ch) = crop_bounds(w, h);
    let cropped = imageops::crop_imm(img, x0, y0, cw, ch).to_image();
    if (cw, ch) == (width, height) {
        Ok(cropped)
    } else {
        Ok(imageops::resize(&cropped, width, height, FilterType::Triangle))
    }
}

/// Converts an already-sized image to a normalized `3 × h × w` tensor.
pub fn to_input(img: &RgbImage, norm: &Normalization) -> ModelInput {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for k in 0..3 {
            data[k * plane + i] = (p.0[k] as f32 / 255.0 - norm.mean[k]) / norm.std[k];
        }
    }
    ModelInput {
        height: h as usize,
        width: w as usize,
        data,
    }
}

pub fn preprocess(img: &RgbImage, width: u32, height: u32, norm: &Normalization) -> Result<ModelInput> {
    Ok(to_input(&crop_and_resize(img, width, height)?, norm))
}

fn rgb_to_hsv(c: [f64; 3]) -> [f64; 3] {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == c[0] {
        ((c[1] - c[2]) / d).rem_euclid(6.0)
    } else if max == c[1] {
        (c[2] - c[0]) / d + 2.0
    } else {
        (c[0] - c[1]) / d + 4.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h / 6.0, s, max]
}

fn hsv_to_rgb(c: [f64; 3]) -> [f64; 3] {
    let h = c[0].rem_euclid(1.0) * 6.0;
    let (s, v) = (c[1], c[2]);
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match h as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Brightness, contrast and saturation within `±0.3·strength`, hue within
/// `±0.05·strength` turns.
pub fn color_jitter(sample: &LabeledSample, seed: u64, strength: f64) -> LabeledSample {
    let mut out = sample.clone();
    if strength <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = 0.3 * strength;
    let brightness = 1.0 + rng.random_range(-a..=a);
    let contrast = 1.0 + rng.random_range(-a..=a);
    let saturation = 1.0 + rng.random_range(-a..=a);
    let hue = rng.random_range(-0.05 * strength..=0.05 * strength);
    let n = (out.image.width() * out.image.height()) as f64;
    let mean_luma = out
        .image
        .pixels()
        .map(|p| luma(p.0.map(|c| c as f64 / 255.0)))
        .sum::<f64>()
        / n
        * brightness;
    for p in out.image.pixels_mut() {
        let mut c = p.0.map(|v| v as f64 / 255.0 * brightness);
        c = c.map(|v| mean_luma + (v - mean_luma) * contrast);
        let y = luma(c);
        c = c.map(|v| y + (v - y) * saturation);
        if hue != 0.0 {
            let mut hsv = rgb_to_hsv(c.map(|v| v.clamp(0.0, 1.0)));
            hsv[0] += hue;
            c = hsv_to_rgb(hsv);
        }
        *p = Rgb(c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

/// Sampling ranges for [`homography_warp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpRanges {
    pub rotation_deg: f64,
    pub scale: [f64; 2],
    /// Translation bound as a fraction of each image dimension.
    pub translate: f64,
    pub perspective: f64,
}

impl Default for WarpRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 8.0,
            scale: [0.9, 1.1],
            translate: 0.05,
            perspective: 0.05,
        }
    }
}

/// Draws a homography in normalized image coordinates. Rotation and shear
/// act on pixel-proportional axes so a rotation stays rigid on screen.
pub fn sample_homography(rng: &mut impl Rng, ranges: &WarpRanges, aspect: f64) -> Result<Homography> {
    let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let theta = sym(rng, ranges.rotation_deg).to_radians();
    let (lo, hi) = (ranges.scale[0], ranges.scale[1]);
    let mut scale = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (sx, sy) = (scale(), scale());
    let (tx, ty) = (sym(rng, ranges.translate), sym(rng, ranges.translate));
    let (px, py) = (sym(rng, ranges.perspective), sym(rng, ranges.perspective));
    // Centered, aspect-corrected frame: x' = aspect·(u − 0.5), y' = v − 0.5.
    let to_frame = Matrix3::new(aspect, 0.0, -0.5 * aspect, 0.0, 1.0, -0.5, 0.0, 0.0, 1.0);
    let from_frame = Matrix3::new(1.0 / aspect, 0.0, 0.5, 0.0, 1.0, 0.5, 0.0, 0.0, 1.0);
    let (s, c) = theta.sin_cos();
    let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let scl = Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0);
    let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
    let shift = Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0);
    Homography::new(shift * from_frame * persp * rot * scl * to_frame)
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = img.dimensions();
    let (wf, hf) = (w as f64, h as f64);
    if !(x >= 0.0 && y >= 0.0 && x <= wf && y <= hf) {
        return Rgb([0, 0, 0]);
    }
    // Pixel centers sit at half-integers; taps clamp at the border.
    let fx = (x - 0.5).clamp(0.0, wf - 1.0);
    let fy = (y - 0.5).clamp(0.0, hf - 1.0);
    let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let mut out = [0u8; 3];
    for k in 0..3 {
        let p = |xx: u32, yy: u32| img.get_pixel(xx, yy).0[k] as f64;
        let top = p(x0, y0) * (1.0 - ax) + p(x1, y0) * ax;
        let bottom = p(x0, y1) * (1.0 - ax) + p(x1, y1) * ax;
        out[k] = (top * (1.0 - ay) + bottom * ay).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

/// Warps `img` by `h` (normalized coordinates, destination = `h · source`).
pub fn warp_image(img: &RgbImage, h: &Homography) -> RgbImage {
    let (w, ht) = img.dimensions();
    let inv = h.inverse();
    let m = inv.matrix();
    let mut out = RgbImage::new(w, ht);
    for y in 0..ht {
        let v = (y as f64 + 0.5) / ht as f64;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let sx = m[(0, 0)] * u + m[(0, 1)] * v + m[(0, 2)];
            let sy = m[(1, 0)] * u + m[(1, 1)] * v + m[(1, 2)];
            let sw = m[(2, 0)] * u + m[(2, 1)] * v + m[(2, 2)];
            let px = if sw.abs() > 1e-12 {
                bilinear(img, sx / sw * w as f64, sy / sw * ht as f64)
            } else {
                Rgb([0, 0, 0])
            };
            out.put_pixel(x, y, px);
        }
    }
    out
}

/// Applies `h` to the image and the VPL labels; lane counts are unchanged.
pub fn apply_homography(sample: &LabeledSample, h: &Homography) -> Result<LabeledSample> {
    let vp = transform_point(h, &sample.vp);
    let (u, v) = vp.uv().ok_or(Error::WarpDegenerate(1))?;
    let vl = transform_line(h, &sample.vl)?;
    let image = if *h.matrix() == Matrix3::identity() {
        sample.image.clone()
    } else {
        warp_image(&sample.image, h)
    };
    Ok(LabeledSample {
        image,
        vp: HomogPoint::from_uv(u, v).snapped(),
        vl: vl.snapped(),
        ..sample.clone()
    })
}

const WARP_TRIES: usize = 10;

/// Random projective warp that keeps the vanishing point within
/// `[-0.5, 1.5]²`.
pub fn homography_warp(sample: &LabeledSample, seed: u64, ranges: &WarpRanges) -> Result<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aspect = sample.image.width() as f64 / sample.image.height() as f64;
    for _ in 0..WARP_TRIES {
        let Ok(h) = sample_homography(&mut rng, ranges, aspect) else {
            continue;
        };
        let inside = transform_point(&h, &sample.vp)
            .uv()
            .is_some_and(|(u, v)| (-0.5..=1.5).contains(&u) && (-0.5..=1.5).contains(&v));
        if inside {
            if let Ok(out) = apply_homography(sample, &h) {
                return Ok(out);
            }
        }
    }
    Err(Error::WarpDegenerate(WARP_TRIES))
}

/// Paints 1–3 random-colored rectangles covering at most `max_frac` of the
/// image in total.
pub fn random_mask(sample: &LabeledSample, seed: u64, max_frac: f64) -> LabeledSample {
    let mut out = sample.clone();
    let max_frac = max_frac.clamp(0.0, 0.5);
    let (w, h) = out.image.dimensions();
    if max_frac == 0.0 || w == 0 || h == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=3);
    let budget = max_frac * (w * h) as f64 / count as f64;
    for _ in 0..count {
        let area = budget * rng.random_range(0.3..=1.0);
        let ratio: f64 = rng.random_range(0.5..=2.0);
        let rw = ((area * ratio).sqrt().floor() as u32).clamp(1, w);
        let rh = ((area / rw as f64).floor() as u32).min(h);
        if rh == 0 {
            continue;
        }
        let x0 = rng.random_range(0..=w - rw);
        let y0 = rng.random_range(0..=h - rh);
        let color = Rgb([rng.random(), rng.random(), rng.random()]);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                out.image.put_pixel(x, y, color);
            }
        }
    }
    out
}

/// Left-right mirror: swaps the heads and reflects `u ↦ 1 − u`.
pub fn mirror_flip(sample: &LabeledSample) -> Result<LabeledSample> {
    Ok(LabeledSample {
        image: imageops::flip_horizontal(&sample.image),
        label_left: sample.label_right,
        label_right: sample.label_left,
        vp: sample.vp.mirrored(),
        vl: sample.vl.mirrored(),
        meta: sample.meta.clone(),
    })
}

/// Augmentation settings used during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub jitter_strength: f64,
    pub warp_prob: f64,
    pub warp: WarpRanges,
    pub mask_prob: f64,
    pub mask_max_frac: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter_strength: 0.5,
            warp_prob: 0.5,
            warp: WarpRanges::default(),
            mask_prob: 0.3,
            mask_max_frac: 0.15,
            flip_prob: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            jitter_strength: 0.0,
            warp_prob: 0.0,
            warp: WarpRanges::default(),
            mask_prob: 0.0,
            mask_max_frac: 0.0,
            flip_prob: 0.0,
        }
    }
}

/// Full training pipeline for one sample. A failed warp leaves the geometry
/// untouched.
pub fn augment(sample: &LabeledSample, seed: u64, cfg: &AugmentConfig) -> Result<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: [u64; 3] = [rng.random(), rng.random(), rng.random()];
    let mut s = if rng.random_bool(cfg.warp_prob.clamp(0.0, 1.0)) {
        match homography_warp(sample, seeds[0], &cfg.warp) {
            Ok(s) => s,
            Err(Error::WarpDegenerate(_)) => sample.clone(),
            Err(e) => return Err(e),
        }
    } else {
        sample.clone()
    };
    if rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        s = mirror_flip(&s)?;
    }
    s = color_jitter(&s, seeds[1], cfg.jitter_strength);
    if rng.random_bool(cfg.mask_prob.clamp(0.0, 1.0)) {
        s = random_mask(&s, seeds[2], cfg.mask_max_frac);
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HomogLine;
    use crate::synth::{render_scene, render_scene_with, sample_scene, RenderOptions, SceneRanges, SceneSpec};
    use crate::testutil::marking_intersection;

    fn sample(seed: u64) -> LabeledSample {
        let s = sample_scene(seed, &SceneRanges::default()).unwrap();
        render_scene(&s, 48, 32).unwrap()
    }

    fn residual(s: &LabeledSample) -> f64 {
        let (u, v) = s.vp.uv().unwrap();
        s.vl.incidence(&HomogPoint::from_uv(u, v)).abs()
    }

    #[test]
    fn crop_bounds_square() {
        assert_eq!(crop_bounds(512, 512), (0, 85, 512, 342));
        assert_eq!(crop_bounds(384, 256), (0, 0, 384, 256));
        assert_eq!(crop_bounds(300, 200), (0, 0, 300, 200));
        assert_eq!(crop_bounds(1000, 200), (350, 0, 300, 200));
    }

    #[test]
    fn crop_bounds_match_scalar_reference() {
        for w in 3..120u32 {
            for h in 2..120u32 {
                let (x0, y0, cw, ch) = crop_bounds(w, h);
                // Reference: the largest centered window whose ratio is as close
                // to 3:2 as integer sizes allow, keeping the full other side.
                if 2 * w < 3 * h {
                    let mut r = 1;
                    while 3 * r < 2 * w {
                        r += 1;
                    }
                    assert_eq!((x0, cw, ch, y0), (0, w, r, (h - r) / 2));
                } else if 2 * w > 3 * h {
                    let mut c = 1;
                    while 2 * c < 3 * h {
                        c += 1;
                    }
                    assert_eq!((y0, ch, cw, x0), (0, h, c, (w - c) / 2));
                } else {
                    assert_eq!((x0, y0, cw, ch), (0, 0, w, h));
                }
            }
        }
    }

    #[test]
    fn preprocess_shapes_and_identity() {
        let norm = Normalization::default();
        let img = RgbImage::from_fn(384, 256, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let a = crop_and_resize(&img, 384, 256).unwrap();
        assert_eq!(a, img);
        let sq = RgbImage::new(512, 512);
        let t = preprocess(&sq, 384, 256, &norm).unwrap();
        assert_eq!((t.height, t.width, t.data.len()), (256, 384, 3 * 256 * 384));
        assert_eq!(
            crop_and_resize(&RgbImage::new(300, 200), 384, 256)
                .unwrap()
                .dimensions(),
            (384, 256)
        );
        assert!(matches!(
            preprocess(&RgbImage::new(2, 2), 96, 64, &norm),
            Err(Error::ImageTooSmall { .. })
        ));
        let px = to_input(&RgbImage::from_pixel(3, 2, Rgb([255, 0, 128])), &norm);
        assert_eq!(px.data[0], 2.0);
        assert_eq!(px.data[6], -2.0);
    }

    #[test]
    fn jitter_properties() {
        let s = sample(1);
        assert_eq!(color_jitter(&s, 5, 0.0), s);
        let a = color_jitter(&s, 5, 1.0);
        assert_eq!(a, color_jitter(&s, 5, 1.0));
        assert_ne!(a.image, s.image);
        assert_eq!(
            (a.label_left, a.label_right, a.vp, a.vl),
            (s.label_left, s.label_right, s.vp, s.vl)
        );
    }

    #[test]
    fn hsv_round_trip() {
        for c in [[0.2, 0.4, 0.9], [1.0, 0.0, 0.0], [0.5, 0.5, 0.5], [0.1, 0.9, 0.3]] {
            let back = hsv_to_rgb(rgb_to_hsv(c));
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_warp_is_exact() {
        let s = sample(2);
        assert_eq!(apply_homography(&s, &Homography::identity()).unwrap(), s);
    }

    #[test]
    fn warp_follows_transform_rules() {
        let s = sample(3);
        for seed in 0..30 {
            let w = homography_warp(&s, seed, &WarpRanges::default()).unwrap();
            assert_eq!((w.label_left, w.label_right), (s.label_left, s.label_right));
            let (u, v) = w.vp.uv().unwrap();
            assert!((-0.5..=1.5).contains(&u) && (-0.5..=1.5).contains(&v));
            assert!((residual(&w) - residual(&s)).abs() < 1e-6);
        }
    }

    #[test]
    fn extreme_ranges_give_warp_degenerate() {
        let s = sample(4);
        let wild = WarpRanges {
            rotation_deg: 0.0,
            scale: [1.0, 1.0],
            translate: 0.0,
            perspective: 0.0,
        };
        // Move the vanishing point far outside the safety margin.
        let mut far = s.clone();
        far.vp = HomogPoint::from_uv(5.0, 5.0);
        assert!(matches!(
            homography_warp(&far, 0, &wild),
            Err(Error::WarpDegenerate(10))
        ));
    }

    #[test]
    fn rotated_markings_meet_at_warped_vp() {
        let spec = SceneSpec {
            n_left: 0,
            n_right: 0,
            lane_width: 3.5,
            lateral_offset: 0.1,
            cam: crate::geometry::CameraModel {
                pitch: 6f64.to_radians(),
                yaw: 4f64.to_radians(),
                ..crate::geometry::CameraModel::forward(1.5)
            },
            style_seed: 9,
        };
        let clean = RenderOptions {
            noise: false,
            distractors: false,
            supersample: 4,
        };
        let s = render_scene_with(&spec, 384, 256, &clean).unwrap();
        // A pure rotation by 5° about the image center.
        let (sn, cs) = 5f64.to_radians().sin_cos();
        let to = Matrix3::new(1.5, 0.0, -0.75, 0.0, 1.0, -0.5, 0.0, 0.0, 1.0);
        let rot = Matrix3::new(cs, -sn, 0.0, sn, cs, 0.0, 0.0, 0.0, 1.0);
        let h = Homography::new(to.try_inverse().unwrap() * rot * to).unwrap();
        let w = apply_homography(&s, &h).unwrap();
        let (vu, vv) = w.vp.uv().unwrap();
        let (u, v) = marking_intersection(&w.image, (vv * 256.0) as u32 + 40);
        let err = (u - vu * 384.0).hypot(v - vv * 256.0);
        assert!(err < 2.0, "off by {err} px");
    }

    #[test]
    fn mask_properties() {
        let s = sample(5);
        assert_eq!(random_mask(&s, 3, 0.0), s);
        for seed in 0..50 {
            let base = LabeledSample {
                image: RgbImage::from_pixel(48, 32, Rgb([1, 2, 3])),
                ..s.clone()
            };
            let m = random_mask(&base, seed, 0.5);
            let changed = m.image.pixels().filter(|p| p.0 != [1, 2, 3]).count();
            assert!(changed as f64 <= 0.5 * 48.0 * 32.0);
            assert_eq!((m.label_left, m.vp, m.vl), (base.label_left, base.vp, base.vl));
        }
    }

    #[test]
    fn mirror_flip_rules() {
        let mut s = sample(6);
        s.label_left = 0;
        s.label_right = 2;
        s.vp = HomogPoint::from_uv(0.3, 0.4);
        s.vl = HomogLine::new(0.1, 1.0, -0.43).unwrap();
        let f = mirror_flip(&s).unwrap();
        assert_eq!((f.label_left, f.label_right), (2, 0));
        let (u, v) = f.vp.uv().unwrap();
        assert!((u - 0.7).abs() < 1e-15 && v == 0.4);
        assert!((residual(&f) - residual(&s)).abs() < 1e-12);
        // Vertical line u = 0.3 maps to u = 0.7.
        let mut vert = s.clone();
        vert.vl = HomogLine::new(1.0, 0.0, -0.3).unwrap();
        let g = mirror_flip(&vert).unwrap().vl.coords();
        assert!((g[0] - 1.0).abs() < 1e-15 && g[1] == 0.0 && (g[2] + 0.7).abs() < 1e-15);
    }

    #[test]
    fn mirror_flip_is_an_involution() {
        let warp = AugmentConfig {
            warp_prob: 1.0,
            ..AugmentConfig::none()
        };
        for seed in 0..40 {
            let s = if seed % 2 == 0 {
                sample(seed)
            } else {
                augment(&sample(seed), seed, &warp).unwrap()
            };
            let ff = mirror_flip(&mirror_flip(&s).unwrap()).unwrap();
            assert_eq!(ff.image, s.image);
            assert_eq!((ff.label_left, ff.label_right), (s.label_left, s.label_right));
            assert_eq!(ff, s);
        }
    }

    #[test]
    fn pipeline_preserves_labels_and_incidence() {
        let cfg = AugmentConfig {
            warp_prob: 1.0,
            mask_prob: 1.0,
            ..AugmentConfig::default()
        };
        for seed in 0..30 {
            let s = sample(seed);
            let a = augment(&s, seed, &cfg).unwrap();
            assert_eq!(a, augment(&s, seed, &cfg).unwrap());
            assert_eq!((a.label_left, a.label_right), (s.label_left, s.label_right));
            assert!((residual(&a) - residual(&s)).abs() < 1e-6);
        }
    }
}
