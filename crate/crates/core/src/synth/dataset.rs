use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{render_scene_with, sample_scene, LabeledSample, RenderOptions, SceneRanges, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{HomogLine, HomogPoint};

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.jsonl";

/// First line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema: u32,
    pub count: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub ranges: SceneRanges,
    pub render: RenderOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub label_left: usize,
    pub label_right: usize,
    pub vp: [f64; 2],
    pub vl: [f64; 3],
    pub seed: u64,
    pub scene: SceneSpec,
}

impl ManifestRecord {
    pub fn vp_point(&self) -> HomogPoint {
        HomogPoint::from_uv(self.vp[0], self.vp[1]).snapped()
    }

    pub fn vl_line(&self) -> Result<HomogLine> {
        Ok(HomogLine::new(self.vl[0], self.vl[1], self.vl[2])?.snapped())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestSummary {
    pub count: usize,
    /// `histogram[l][r]` counts samples with those labels; lane counts above
    /// the table size are clamped into the last bucket.
    pub histogram: [[usize; 4]; 4],
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_image(&self, index: usize) -> Result<RgbImage> {
        let path = self.root.join(&self.records[index].image);
        Ok(image::open(path)?.to_rgb8())
    }

    pub fn load_sample(&self, index: usize) -> Result<LabeledSample> {
        let rec = &self.records[index];
        Ok(LabeledSample {
            image: self.load_image(index)?,
            label_left: rec.label_left,
            label_right: rec.label_right,
            vp: rec.vp_point(),
            vl: rec.vl_line()?,
            meta: rec.scene.clone(),
        })
    }

    /// Every sample, images included.
    pub fn load_all(&self) -> Result<Vec<LabeledSample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}

/// Seed of the `index`-th scene of a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders `count` scenes into `dir` as PNG files plus `manifest.jsonl`.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    seed: u64,
    ranges: &SceneRanges,
    width: u32,
    height: u32,
    render: &RenderOptions,
) -> Result<ManifestSummary> {
    ranges.validate()?;
    fs::create_dir_all(dir.join("images"))?;
    let mut out = BufWriter::new(File::create(dir.join(MANIFEST))?);
    let header = ManifestHeader {
        schema: SCHEMA_VERSION,
        count,
        width,
        height,
        seed,
        ranges: ranges.clone(),
        render: *render,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut histogram = [[0usize; 4]; 4];
    for i in 0..count {
        let s = sample_seed(seed, i as u64);
        let spec = sample_scene(s, ranges)?;
        let sample = render_scene_with(&spec, width, height, render)?;
        let name = format!("images/{i:06}.png");
        sample.image.save(dir.join(&name))?;
        let (u, v) = sample
            .vp
            .uv()
            .ok_or(Error::DegenerateView("vanishing point at infinity".into()))?;
        let rec = ManifestRecord {
            image: name,
            label_left: sample.label_left,
            label_right: sample.label_right,
            vp: [u, v],
            vl: sample.vl.coords(),
            seed: s,
            scene: spec,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        histogram[rec.label_left.min(3)][rec.label_right.min(3)] += 1;
    }
    out.flush()?;
    Ok(ManifestSummary { count, histogram })
}

fn schema_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::ManifestSchema {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Opens a dataset written by [`write_dataset`]; images are read lazily.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path).map_err(|e| schema_error(&path, 0, format!("cannot open manifest: {e}")))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: ManifestHeader = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| schema_error(&path, 1, format!("bad header: {e}")))?
        }
        None => return Err(schema_error(&path, 0, "manifest is empty")),
    };
    if header.schema != SCHEMA_VERSION {
        return Err(schema_error(
            &path,
            1,
            format!("unsupported schema {} (expected {SCHEMA_VERSION})", header.schema),
        ));
    }
    let mut records = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| schema_error(&path, lineno, format!("invalid JSON: {e}")))?;
        let name = value
            .get("image")
            .and_then(|v| v.as_str())
            .unwrap_or("<unnamed>")
            .to_string();
        let rec: ManifestRecord =
            serde_json::from_value(value).map_err(|e| schema_error(&path, lineno, format!("record {name}: {e}")))?;
        if rec.label_left + rec.label_right + 1 > header.ranges.max_total_lanes {
            return Err(schema_error(
                &path,
                lineno,
                format!("record {name}: lane count exceeds maximum"),
            ));
        }
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(schema_error(
            &path,
            0,
            format!("header announces {} records, found {}", header.count, records.len()),
        ));
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        header,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ranges = SceneRanges::default();
        let summary = write_dataset(dir.path(), 5, 9, &ranges, 48, 32, &RenderOptions::default()).unwrap();
        assert_eq!(summary.count, 5);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 5);
        for (i, rec) in ds.records.iter().enumerate() {
            let spec = sample_scene(sample_seed(9, i as u64), &ranges).unwrap();
            assert_eq!(rec.scene, spec);
            let direct = render_scene_with(&spec, 48, 32, &RenderOptions::default()).unwrap();
            assert_eq!(ds.load_image(i).unwrap(), direct.image);
            assert_eq!(rec.vl_line().unwrap(), direct.vl);
            assert_eq!((rec.label_left, rec.label_right), (spec.n_left, spec.n_right));
        }
    }

    #[test]
    fn empty_dir_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::ManifestSchema { .. })));
    }

    #[test]
    fn negative_label_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            2,
            1,
            &SceneRanges::default(),
            24,
            16,
            &RenderOptions::default(),
        )
        .unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        v["label_left"] = serde_json::json!(-1);
        lines[2] = v.to_string();
        fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::ManifestSchema { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("images/000001.png"), "{message}");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
