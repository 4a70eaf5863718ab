use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledSample, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::vanishing_geometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub noise: bool,
    pub distractors: bool,
    /// Samples per pixel along each axis.
    pub supersample: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            noise: true,
            distractors: true,
            supersample: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum MarkingKind {
    Center,
    Edge,
    Dashed,
}

#[derive(Debug, Clone, Copy)]
struct Marking {
    x: f64,
    kind: MarkingKind,
}

#[derive(Debug, Clone, Copy)]
struct Vehicle {
    x: f64,
    z: f64,
    half_width: f64,
    height: f64,
    color: [f64; 3],
}

struct Style {
    asphalt: [f64; 3],
    offroad: [f64; 3],
    sky_top: [f64; 3],
    sky_horizon: [f64; 3],
    yellow: [f64; 3],
    white: [f64; 3],
    marking_half_width: f64,
    dash_length: f64,
    dash_period: f64,
    dash_phase: f64,
    shoulder: f64,
    texture: f64,
    fog_distance: f64,
    noise_sigma: f64,
    texture_seed: u64,
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    let shift = rng.random_range(-amount..amount);
    base.map(|c| (c + shift + rng.random_range(-amount..amount) * 0.3).clamp(0.0, 1.0))
}

impl Style {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let grass = rng.random_bool(0.6);
        let offroad = if grass { [0.28, 0.42, 0.20] } else { [0.50, 0.43, 0.33] };
        Self {
            asphalt: jitter(rng, [0.34, 0.34, 0.35], 0.08),
            offroad: jitter(rng, offroad, 0.08),
            sky_top: jitter(rng, [0.35, 0.55, 0.85], 0.1),
            sky_horizon: jitter(rng, [0.82, 0.86, 0.90], 0.06),
            yellow: jitter(rng, [0.92, 0.75, 0.15], 0.05),
            white: jitter(rng, [0.93, 0.93, 0.93], 0.05),
            marking_half_width: rng.random_range(0.1..0.16),
            dash_length: rng.random_range(2.5..4.0),
            dash_period: rng.random_range(8.0..12.0),
            dash_phase: rng.random_range(0.0..12.0),
            shoulder: rng.random_range(0.3..1.0),
            texture: rng.random_range(0.01..0.05),
            fog_distance: rng.random_range(120.0..300.0),
            noise_sigma: rng.random_range(1.0..6.0),
            texture_seed: rng.random(),
        }
    }
}

fn hash_noise(ix: i64, iz: i64, seed: u64) -> f64 {
    let mut h =
        seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iz as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

struct Scene {
    height: f64,
    cam_to_world: Matrix3<f64>,
    markings: Vec<Marking>,
    road: (f64, f64),
    vehicles: Vec<Vehicle>,
    style: Style,
}

impl Scene {
    fn new(spec: &SceneSpec, opts: &RenderOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.style_seed);
        let style = Style::sample(&mut rng);
        let w = spec.lane_width;
        let ego_left = -spec.lateral_offset - w / 2.0;
        let left = ego_left - spec.n_left as f64 * w;
        let right = ego_left + w + spec.n_right as f64 * w;
        let lanes = spec.total_lanes();
        let mut markings = vec![Marking {
            x: left,
            kind: MarkingKind::Center,
        }];
        for k in 1..lanes {
            markings.push(Marking {
                x: left + k as f64 * w,
                kind: MarkingKind::Dashed,
            });
        }
        markings.push(Marking {
            x: right,
            kind: MarkingKind::Edge,
        });

        let mut vehicles = Vec::new();
        let count = rng.random_range(0..=3);
        for _ in 0..count {
            let lane = rng.random_range(0..lanes);
            let is_ego = lane == spec.n_left;
            let z = if is_ego {
                rng.random_range(14.0..60.0)
            } else {
                rng.random_range(7.0..60.0)
            };
            let center = left + (lane as f64 + 0.5) * w + rng.random_range(-0.3..0.3);
            let color = [
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
            ];
            let v = Vehicle {
                x: center,
                z,
                half_width: rng.random_range(0.8..1.0),
                height: rng.random_range(1.3..2.2),
                color,
            };
            if opts.distractors {
                vehicles.push(v);
            }
        }
        vehicles.sort_by(|a, b| a.z.total_cmp(&b.z));

        let k_inv = spec.cam.intrinsics().try_inverse().expect("validated intrinsics");
        Self {
            height: spec.cam.height,
            cam_to_world: spec.cam.rotation().transpose() * k_inv,
            markings,
            road: (left - style.shoulder, right + style.shoulder),
            vehicles,
            style,
        }
    }

    fn ground(&self, x: f64, z: f64) -> [f64; 3] {
        let s = &self.style;
        let on_road = x >= self.road.0 && x <= self.road.1;
        let mut c = if on_road { s.asphalt } else { s.offroad };
        let n = hash_noise((x * 3.0).floor() as i64, (z * 1.5).floor() as i64, s.texture_seed);
        let amp = if on_road { s.texture } else { 2.5 * s.texture };
        c = c.map(|v| v + amp * n);
        for m in &self.markings {
            if (x - m.x).abs() > s.marking_half_width {
                continue;
            }
            let painted = match m.kind {
                MarkingKind::Center => Some(s.yellow),
                MarkingKind::Edge => Some(s.white),
                MarkingKind::Dashed => {
                    let phase = (z + s.dash_phase).rem_euclid(s.dash_period);
                    (phase < s.dash_length).then_some(s.white)
                }
            };
            if let Some(p) = painted {
                c = p;
            }
        }
        c
    }

    fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        let s = &self.style;
        let ray: Vector3<f64> = self.cam_to_world * Vector3::new(u, v, 1.0);
        let t_ground = (ray.y > 1e-9).then(|| self.height / ray.y);
        if ray.z > 1e-9 {
            for veh in &self.vehicles {
                let t = veh.z / ray.z;
                if t_ground.is_some_and(|tg| tg < t) {
                    continue;
                }
                let x = t * ray.x;
                let y = t * ray.y;
                let top = self.height - veh.height;
                if (x - veh.x).abs() <= veh.half_width && y >= top && y <= self.height {
                    let rel = (y - top) / veh.height;
                    let shade = if rel > 0.85 {
                        0.25
                    } else if rel < 0.45 && rel > 0.1 {
                        0.55
                    } else {
                        1.0
                    };
                    let fog = 1.0 - (-veh.z / s.fog_distance).exp();
                    return mix(veh.color.map(|c| c * shade), s.sky_horizon, fog);
                }
            }
        }
        match t_ground {
            Some(t) => {
                let x = t * ray.x;
                let z = t * ray.z;
                let fog = 1.0 - (-z.max(0.0) / s.fog_distance).exp();
                mix(self.ground(x, z), s.sky_horizon, fog)
            }
            None => {
                let elevation = (-ray.y / ray.norm()).clamp(0.0, 1.0);
                mix(s.sky_horizon, s.sky_top, (elevation * 3.0).min(1.0))
            }
        }
    }
}

/// Renders `spec` with default options (noise and distractors on).
pub fn render_scene(spec: &SceneSpec, width: u32, height: u32) -> Result<LabeledSample> {
    render_scene_with(spec, width, height, &RenderOptions::default())
}

pub fn render_scene_with(spec: &SceneSpec, width: u32, height: u32, opts: &RenderOptions) -> Result<LabeledSample> {
    if width == 0 || height == 0 {
        return Err(Error::ImageTooSmall { width, height });
    }
    spec.validate(usize::MAX)?;
    let (vp, vl) = vanishing_geometry(&spec.cam)?;
    let (vp, vl) = (vp.snapped(), vl.snapped());
    let scene = Scene::new(spec, opts);
    let ss = opts.supersample.max(1);
    let inv = 1.0 / (ss * ss) as f64;
    let (wf, hf) = (width as f64, height as f64);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.style_seed ^ 0x5EED_0F_F00D);
    let noise = Normal::new(0.0, scene.style.noise_sigma).expect("positive sigma");
    let mut img = RgbImage::new(width, height);
    for py in 0..height {
        for px in 0..width {
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                let v = (py as f64 + (sy as f64 + 0.5) / ss as f64) / hf;
                for sx in 0..ss {
                    let u = (px as f64 + (sx as f64 + 0.5) / ss as f64) / wf;
                    let c = scene.shade(u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let mut rgb = [0u8; 3];
            for k in 0..3 {
                let mut val = acc[k] * inv * 255.0;
                if opts.noise {
                    val += noise.sample(&mut noise_rng);
                }
                rgb[k] = val.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(px, py, Rgb(rgb));
        }
    }
    Ok(LabeledSample {
        image: img,
        label_left: spec.n_left,
        label_right: spec.n_right,
        vp,
        vl,
        meta: spec.clone(),
    })
}
