//! Scoring, uncertainty analyses and attention visualization.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{crop_and_resize, to_input, Normalization};
use crate::error::{Error, Result};
use crate::evidential::{predict, Head, Prediction};
use crate::geometry::occlusion_mask;
use crate::model::{Inference, Model, ModelInput};
use crate::synth::LabeledSample;

const EVAL_CHUNK: usize = 64;

/// Lane position counted from the leftmost lane. May fall outside
/// `[0, total)` for a wrong prediction.
pub fn canonical_index(pred: &Prediction, total: usize) -> i64 {
    match pred.head {
        Head::Left => pred.class_index as i64,
        Head::Right => total as i64 - 1 - pred.class_index as i64,
    }
}

pub fn is_correct(pred: &Prediction, label: (usize, usize)) -> bool {
    canonical_index(pred, label.0 + label.1 + 1) == label.0 as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassScore>,
}

/// Macro-F1 over canonical lane indices, averaged over the classes that
/// occur as labels. Predicting an index that no label carries, in range or
/// not, is a miss for the true class and adds no false positive.
pub fn macro_f1(preds: &[Prediction], labels: &[(usize, usize)]) -> Result<F1Report> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let classes = labels.iter().map(|&(l, _)| l + 1).max().unwrap_or(0);
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (p, &(l, r)) in preds.iter().zip(labels) {
        support[l] += 1;
        let c = canonical_index(p, l + r + 1);
        if c == l as i64 {
            tp[l] += 1;
        } else if (0..classes as i64).contains(&c) {
            fp[c as usize] += 1;
        }
    }
    let mut per_class = Vec::new();
    for c in (0..classes).filter(|&c| support[c] > 0) {
        let precision = if tp[c] + fp[c] > 0 {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        } else {
            0.0
        };
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = if tp[c] > 0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassScore {
            class: c,
            precision,
            recall,
            f1,
            support: support[c],
        });
    }
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|s| s.f1).sum::<f64>() / per_class.len() as f64
    };
    let accuracy = if labels.is_empty() {
        0.0
    } else {
        tp.iter().sum::<usize>() as f64 / labels.len() as f64
    };
    Ok(F1Report {
        macro_f1,
        accuracy,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpPoint {
    pub threshold: f64,
    /// `None` when no prediction is accepted.
    pub precision: Option<f64>,
    pub acceptance_rate: f64,
}

/// Precision and acceptance rate when keeping predictions whose selected-head
/// uncertainty is at most each threshold.
pub fn uncertainty_precision_curve(
    preds: &[Prediction],
    labels: &[(usize, usize)],
    thresholds: &[f64],
) -> Result<Vec<UpPoint>> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let n = preds.len().max(1) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let mut accepted = 0usize;
            let mut correct = 0usize;
            for (p, &l) in preds.iter().zip(labels) {
                if p.selected_uncertainty() <= t {
                    accepted += 1;
                    correct += is_correct(p, l) as usize;
                }
            }
            UpPoint {
                threshold: t,
                precision: (accepted > 0).then(|| correct as f64 / accepted as f64),
                acceptance_rate: accepted as f64 / n,
            }
        })
        .collect())
}

/// Batched inference over prepared inputs.
pub fn infer_inputs(model: &Model<f32>, inputs: &[ModelInput]) -> Result<Vec<Inference>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let refs: Vec<&ModelInput> = chunk.iter().collect();
        out.extend(model.forward(&refs)?);
    }
    Ok(out)
}

/// Inputs for images already at the model resolution, resized otherwise.
pub fn prepare(model: &Model<f32>, norm: &Normalization, images: &[&RgbImage]) -> Result<Vec<ModelInput>> {
    let cfg = model.config();
    let (w, h) = (cfg.input_width as u32, cfg.input_height as u32);
    images
        .iter()
        .map(|img| {
            if img.dimensions() == (w, h) {
                Ok(to_input(img, norm))
            } else {
                Ok(to_input(&crop_and_resize(img, w, h)?, norm))
            }
        })
        .collect()
}

pub fn predict_samples(model: &Model<f32>, norm: &Normalization, samples: &[LabeledSample]) -> Result<Vec<Prediction>> {
    let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
    let inputs = prepare(model, norm, &images)?;
    infer_inputs(model, &inputs)?
        .iter()
        .map(|i| predict(&i.output))
        .collect()
}

pub fn labels_of(samples: &[LabeledSample]) -> Vec<(usize, usize)> {
    samples.iter().map(|s| (s.label_left, s.label_right)).collect()
}

pub fn evaluate(
    model: &Model<f32>,
    norm: &Normalization,
    samples: &[LabeledSample],
) -> Result<(F1Report, Vec<Prediction>)> {
    let preds = predict_samples(model, norm, samples)?;
    Ok((macro_f1(&preds, &labels_of(samples))?, preds))
}

/// Fills the region outside the shrunken image quad with black.
pub fn occlude(sample: &LabeledSample, ratio: f64) -> RgbImage {
    let (w, h) = sample.image.dimensions();
    let mask = occlusion_mask(&sample.vp, ratio, w as usize, h as usize);
    let mut img = sample.image.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(x as usize, y as usize) {
                img.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionPoint {
    pub ratio: f64,
    pub mean_uncertainty: f64,
    pub accuracy: f64,
}

/// Mean selected-head uncertainty under increasing occlusion toward the
/// ground-truth vanishing point.
pub fn occlusion_sweep(
    model: &Model<f32>,
    norm: &Normalization,
    samples: &[LabeledSample],
    ratios: &[f64],
) -> Result<Vec<OcclusionPoint>> {
    let labels = labels_of(samples);
    let n = samples.len().max(1) as f64;
    ratios
        .iter()
        .map(|&ratio| {
            let images: Vec<RgbImage> = samples.iter().map(|s| occlude(s, ratio)).collect();
            let refs: Vec<&RgbImage> = images.iter().collect();
            let inputs = prepare(model, norm, &refs)?;
            let preds: Vec<Prediction> = infer_inputs(model, &inputs)?
                .iter()
                .map(|i| predict(&i.output))
                .collect::<Result<_>>()?;
            let mean_uncertainty = preds.iter().map(|p| p.selected_uncertainty()).sum::<f64>() / n;
            let correct = preds.iter().zip(&labels).filter(|(p, &l)| is_correct(p, l)).count();
            Ok(OcclusionPoint {
                ratio,
                mean_uncertainty,
                accuracy: correct as f64 / n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub frame: usize,
    pub p_left: Vec<f64>,
    pub p_right: Vec<f64>,
    pub u_left: f64,
    pub u_right: f64,
    pub head: Head,
    pub class_index: usize,
}

/// Per-frame beliefs of both heads, without temporal smoothing.
pub fn lane_change_trace(model: &Model<f32>, norm: &Normalization, frames: &[RgbImage]) -> Result<Vec<TraceFrame>> {
    let refs: Vec<&RgbImage> = frames.iter().collect();
    let inputs = prepare(model, norm, &refs)?;
    infer_inputs(model, &inputs)?
        .iter()
        .enumerate()
        .map(|(frame, inf)| {
            let p = predict(&inf.output)?;
            Ok(TraceFrame {
                frame,
                p_left: p.left.prob.clone(),
                p_right: p.right.prob.clone(),
                u_left: p.u_left,
                u_right: p.u_right,
                head: p.head,
                class_index: p.class_index,
            })
        })
        .collect()
}

fn heat_color(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Bilinear upsampling of an `hf × wf` grid to `w × h`, sampling at pixel
/// centers.
fn upsample(map: &[f64], hf: usize, wf: usize, w: u32, h: u32) -> Vec<f64> {
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * hf as f64 / h as f64 - 0.5).clamp(0.0, (hf - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(hf - 1);
        let ay = fy - y0 as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * wf as f64 / w as f64 - 0.5).clamp(0.0, (wf - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(wf - 1);
            let ax = fx - x0 as f64;
            let top = map[y0 * wf + x0] * (1.0 - ax) + map[y0 * wf + x1] * ax;
            let bottom = map[y1 * wf + x0] * (1.0 - ax) + map[y1 * wf + x1] * ax;
            out.push(top * (1.0 - ay) + bottom * ay);
        }
    }
    out
}

/// Heat-map overlay of `weights` (one per token) on `base`.
pub fn attention_overlay(base: &RgbImage, weights: &[f64], hf: usize, wf: usize) -> RgbImage {
    let (w, h) = base.dimensions();
    let up = upsample(weights, hf, wf, w, h);
    let max = up.iter().cloned().fold(0.0, f64::max);
    let mut out = base.clone();
    for (i, p) in out.pixels_mut().enumerate() {
        let t = if max > 0.0 { up[i] / max } else { 0.0 };
        let c = heat_color(t);
        for k in 0..3 {
            p.0[k] = (0.5 * p.0[k] as f64 + 0.5 * 255.0 * c[k]).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Attention weights of each head for `image`, reshaped to the feature grid.
pub fn attention_maps(model: &Model<f32>, norm: &Normalization, image: &RgbImage) -> Result<(RgbImage, Vec<Vec<f64>>)> {
    let cfg = model.config();
    let resized = crop_and_resize(image, cfg.input_width as u32, cfg.input_height as u32)?;
    let inf = model.forward_one(&to_input(&resized, norm))?;
    let (hf, wf) = cfg.feature_grid();
    let tokens = hf * wf;
    let maps = if inf.attention.is_empty() {
        vec![vec![1.0 / tokens as f64; tokens]; cfg.heads]
    } else {
        inf.attention.chunks(tokens).map(|c| c.to_vec()).collect()
    };
    Ok((resized, maps))
}

/// Writes one overlay per head plus their mean as `<stem>_head<i>.png` and
/// `<stem>_mean.png`.
pub fn export_attention(
    model: &Model<f32>,
    norm: &Normalization,
    image: &RgbImage,
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (base, maps) = attention_maps(model, norm, image)?;
    let (hf, wf) = model.config().feature_grid();
    let mut paths = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        let p = dir.join(format!("{stem}_head{i}.png"));
        attention_overlay(&base, m, hf, wf).save(&p)?;
        paths.push(p);
    }
    let mean: Vec<f64> = (0..hf * wf)
        .map(|t| maps.iter().map(|m| m[t]).sum::<f64>() / maps.len() as f64)
        .collect();
    let p = dir.join(format!("{stem}_mean.png"));
    attention_overlay(&base, &mean, hf, wf).save(&p)?;
    paths.push(p);
    Ok(paths)
}

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(23, 190, 207),
];

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Plot(format!("{e:?}"))
}

/// Line chart written as SVG.
pub fn line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    y_range: (f64, f64),
    series: &[Series],
) -> Result<()> {
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, _) in &s.points {
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y_range.0..y_range.1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

pub fn plot_up_curve(path: &Path, curve: &[UpPoint]) -> Result<()> {
    let precision = curve
        .iter()
        .filter_map(|p| p.precision.map(|v| (p.threshold, v)))
        .collect();
    let acceptance = curve.iter().map(|p| (p.threshold, p.acceptance_rate)).collect();
    line_plot(
        path,
        "Uncertainty-precision curve",
        "uncertainty threshold",
        "rate",
        (0.0, 1.05),
        &[
            Series {
                name: "precision",
                points: precision,
            },
            Series {
                name: "acceptance rate",
                points: acceptance,
            },
        ],
    )
}

pub fn plot_occlusion(path: &Path, sweep: &[OcclusionPoint]) -> Result<()> {
    line_plot(
        path,
        "Uncertainty under occlusion",
        "mask ratio",
        "value",
        (0.0, 1.05),
        &[
            Series {
                name: "mean uncertainty",
                points: sweep.iter().map(|p| (p.ratio, p.mean_uncertainty)).collect(),
            },
            Series {
                name: "accuracy",
                points: sweep.iter().map(|p| (p.ratio, p.accuracy)).collect(),
            },
        ],
    )
}

pub fn plot_lane_change(path: &Path, trace: &[TraceFrame]) -> Result<()> {
    let pick = |f: &dyn Fn(&TraceFrame) -> f64| trace.iter().map(|t| (t.frame as f64, f(t))).collect::<Vec<_>>();
    line_plot(
        path,
        "Lane change",
        "frame",
        "value",
        (0.0, 1.05),
        &[
            Series {
                name: "left p0",
                points: pick(&|t| t.p_left[0]),
            },
            Series {
                name: "left p1",
                points: pick(&|t| t.p_left.get(1).copied().unwrap_or(0.0)),
            },
            Series {
                name: "u left",
                points: pick(&|t| t.u_left),
            },
            Series {
                name: "u right",
                points: pick(&|t| t.u_right),
            },
        ],
    )
}

/// Markdown table of macro-F1 per model variant.
pub fn write_f1_table(path: &Path, rows: &[(String, F1Report)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "| variant | macro-F1 | accuracy |")?;
    writeln!(out, "|---|---|---|")?;
    for (name, r) in rows {
        writeln!(out, "| {name} | {:.4} | {:.4} |", r.macro_f1, r.accuracy)?;
    }
    out.flush()?;
    Ok(())
}
