//! Procedural road scenes with exact lane-count and VP/VL labels.

mod dataset;
mod render;

pub use dataset::{
    load_dataset, sample_seed, write_dataset, Dataset, ManifestHeader, ManifestRecord, ManifestSummary, SCHEMA_VERSION,
};
pub use render::{render_scene, render_scene_with, RenderOptions};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, HomogLine, HomogPoint};

/// Sampling ranges for [`sample_scene`]. Angles are in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneRanges {
    pub n_left: [usize; 2],
    pub n_right: [usize; 2],
    /// Upper bound on `n_left + n_right + 1` (twice the per-head class count).
    pub max_total_lanes: usize,
    pub lane_width: [f64; 2],
    /// Largest `|lateral_offset|` as a fraction of half the lane width.
    pub max_offset_frac: f64,
    pub pitch_deg: [f64; 2],
    pub yaw_deg: [f64; 2],
    pub roll_deg: [f64; 2],
    pub height: [f64; 2],
    /// Horizontal focal length in normalized units; `fy = fx · aspect`.
    pub focal: [f64; 2],
    /// When set, `yaw` is drawn from `±[yaw_deg]` magnitudes, i.e. the sign is
    /// random and the magnitude lies in `[yaw_deg[0], yaw_deg[1]]`.
    pub symmetric_yaw: bool,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            n_left: [0, 2],
            n_right: [0, 2],
            max_total_lanes: 6,
            lane_width: [3.0, 4.0],
            max_offset_frac: 0.7,
            pitch_deg: [0.0, 20.0],
            yaw_deg: [-15.0, 15.0],
            roll_deg: [-10.0, 10.0],
            height: [1.2, 2.0],
            focal: [0.3, 0.42],
            symmetric_yaw: false,
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, lo: f64, hi: f64| {
            if lo <= hi && lo.is_finite() && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidRanges(format!("{name}: min {lo} > max {hi}")))
            }
        };
        ordered("n_left", self.n_left[0] as f64, self.n_left[1] as f64)?;
        ordered("n_right", self.n_right[0] as f64, self.n_right[1] as f64)?;
        ordered("lane_width", self.lane_width[0], self.lane_width[1])?;
        ordered("pitch_deg", self.pitch_deg[0], self.pitch_deg[1])?;
        ordered("yaw_deg", self.yaw_deg[0], self.yaw_deg[1])?;
        ordered("roll_deg", self.roll_deg[0], self.roll_deg[1])?;
        ordered("height", self.height[0], self.height[1])?;
        ordered("focal", self.focal[0], self.focal[1])?;
        if self.n_left[0] + self.n_right[0] + 1 > self.max_total_lanes {
            return Err(Error::InvalidRanges(format!(
                "minimum lane count exceeds max_total_lanes = {}",
                self.max_total_lanes
            )));
        }
        if self.lane_width[0] <= 0.0 || self.height[0] <= 0.0 || self.focal[0] <= 0.0 {
            return Err(Error::InvalidRanges(
                "lane_width, height and focal must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.max_offset_frac) {
            return Err(Error::InvalidRanges("max_offset_frac must be in [0, 1)".into()));
        }
        if self.pitch_deg[0].abs().max(self.pitch_deg[1].abs()) >= 90.0
            || self.roll_deg[0].abs().max(self.roll_deg[1].abs()) >= 90.0
            || self.yaw_deg[0].abs().max(self.yaw_deg[1].abs()) >= 60.0
        {
            return Err(Error::InvalidRanges("angles out of the supported range".into()));
        }
        if self.symmetric_yaw && self.yaw_deg[0] < 0.0 {
            return Err(Error::InvalidRanges(
                "symmetric_yaw needs non-negative magnitudes".into(),
            ));
        }
        Ok(())
    }
}

/// Complete ground-truth description of one synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Full lanes between the ego lane and the left road boundary.
    pub n_left: usize,
    pub n_right: usize,
    pub lane_width: f64,
    /// Camera position within the ego lane, meters, positive to the right.
    pub lateral_offset: f64,
    pub cam: CameraModel,
    /// Drives colors, dash phase, noise and distractor placement.
    pub style_seed: u64,
}

impl SceneSpec {
    pub fn total_lanes(&self) -> usize {
        self.n_left + self.n_right + 1
    }

    pub fn validate(&self, max_total_lanes: usize) -> Result<()> {
        if self.total_lanes() > max_total_lanes {
            return Err(Error::InvalidScene(format!(
                "{} lanes exceeds the maximum of {max_total_lanes}",
                self.total_lanes()
            )));
        }
        if !(self.lane_width > 0.0) || !(self.lateral_offset.abs() < self.lane_width / 2.0) {
            return Err(Error::InvalidScene(format!(
                "lateral offset {} outside a {} m lane",
                self.lateral_offset, self.lane_width
            )));
        }
        self.cam.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: RgbImage,
    pub label_left: usize,
    pub label_right: usize,
    pub vp: HomogPoint,
    pub vl: HomogLine,
    pub meta: SceneSpec,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Deterministically draws a scene from `ranges` for `seed`.
pub fn sample_scene(seed: u64, ranges: &SceneRanges) -> Result<SceneSpec> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_left, n_right) = loop {
        let l = rng.random_range(ranges.n_left[0]..=ranges.n_left[1]);
        let r = rng.random_range(ranges.n_right[0]..=ranges.n_right[1]);
        if l + r < ranges.max_total_lanes {
            break (l, r);
        }
    };
    let lane_width = uniform(&mut rng, ranges.lane_width);
    let half = lane_width / 2.0 * ranges.max_offset_frac;
    let lateral_offset = if half > 0.0 { rng.random_range(-half..half) } else { 0.0 };
    let fx = uniform(&mut rng, ranges.focal);
    let yaw = if ranges.symmetric_yaw {
        let mag = uniform(&mut rng, ranges.yaw_deg);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    } else {
        uniform(&mut rng, ranges.yaw_deg)
    };
    let cam = CameraModel {
        fx,
        fy: fx * 1.5,
        cx: 0.5,
        cy: 0.5,
        height: uniform(&mut rng, ranges.height),
        pitch: uniform(&mut rng, ranges.pitch_deg).to_radians(),
        yaw: yaw.to_radians(),
        roll: uniform(&mut rng, ranges.roll_deg).to_radians(),
    };
    let spec = SceneSpec {
        n_left,
        n_right,
        lane_width,
        lateral_offset,
        cam,
        style_seed: rng.random(),
    };
    spec.validate(ranges.max_total_lanes)?;
    Ok(spec)
}

/// Scenes for an ego vehicle drifting one lane to the right, from the center
/// of its lane in `base` to the center of the next lane.
pub fn lane_change_sequence(base: &SceneSpec, frames: usize) -> Result<Vec<SceneSpec>> {
    if base.n_right == 0 {
        return Err(Error::InvalidScene("no lane to the right to change into".into()));
    }
    let w = base.lane_width;
    let total = base.total_lanes();
    let start = (base.n_left as f64 + 0.5) * w;
    (0..frames)
        .map(|i| {
            let s = if frames > 1 {
                i as f64 / (frames - 1) as f64
            } else {
                0.0
            };
            let x = start + s * w;
            let mut lane = (x / w).floor() as usize;
            let mut offset = x - (lane as f64 + 0.5) * w;
            // A frame exactly on a boundary belongs to the lane being entered.
            if offset <= -w / 2.0 + 1e-9 {
                offset = -w / 2.0 + 1e-6;
            }
            if offset >= w / 2.0 - 1e-9 {
                lane += 1;
                offset = -w / 2.0 + 1e-6;
            }
            let lane = lane.min(total - 1);
            Ok(SceneSpec {
                n_left: lane,
                n_right: total - 1 - lane,
                lateral_offset: offset,
                ..base.clone()
            })
        })
        .collect()
}
