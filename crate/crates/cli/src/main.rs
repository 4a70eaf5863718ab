use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use egolane::augment::preprocess;
use egolane::checkpoint::Checkpoint;
use egolane::evaluation::{
    evaluate, export_attention, labels_of, lane_change_trace, occlusion_sweep, plot_lane_change, plot_occlusion,
    plot_up_curve, uncertainty_precision_curve, write_f1_table, write_jsonl,
};
use egolane::evidential::predict;
use egolane::synth::{
    lane_change_sequence, load_dataset, render_scene, sample_scene, write_dataset, LabeledSample, RenderOptions,
    SceneRanges,
};
use egolane::training::{train, LogRecord, TrainConfig};

#[derive(Parser)]
#[command(
    name = "egolane",
    version,
    about = "Ego-lane estimation with evidential two-head classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Drop the geometric loss.
    Vpl,
    /// Replace attention with an evidence MLP on the context vector.
    Attention,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image size as WIDTHxHEIGHT.
        #[arg(long, default_value = "384x256", value_parser = parse_size)]
        size: (u32, u32),
        /// TOML file with scene sampling ranges.
        #[arg(long)]
        ranges: Option<PathBuf>,
        #[arg(long)]
        no_noise: bool,
        #[arg(long)]
        no_distractors: bool,
    },
    /// Train a model and write the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation dataset; by default the last tenth of --data is held out.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Metric log; defaults to the checkpoint path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',')]
        ablate: Vec<Ablation>,
    },
    /// Score a checkpoint on a dataset and write metrics and plots.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model variant the checkpoint is expected to be; checked against it.
        #[arg(long, value_enum, value_delimiter = ',')]
        ablate: Vec<Ablation>,
    },
    /// Classify a single image.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Mean uncertainty under increasing occlusion.
    SweepOcclusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"
        )]
        ratios: Vec<f64>,
    },
    /// Beliefs across a synthetic change into the right-hand lane.
    TraceLaneChange {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 41)]
        frames: usize,
    },
    /// Attention heat maps for one image.
    ExportAttention {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: u32 = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h: u32 = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn apply_ablation(cfg: &mut TrainConfig, ablate: &[Ablation]) {
    for a in ablate {
        match a {
            Ablation::Vpl => cfg.use_vpl = false,
            Ablation::Attention => cfg.use_attention = false,
            Ablation::None => {}
        }
    }
}

fn variant_name(use_vpl: bool, use_attention: bool) -> &'static str {
    match (use_vpl, use_attention) {
        (true, true) => "full",
        (false, true) => "no-vpl",
        (true, false) => "no-attention",
        (false, false) => "baseline",
    }
}

fn load_samples(dir: &Path) -> Result<Vec<LabeledSample>> {
    let ds = load_dataset(dir)?;
    Ok(ds.load_all()?)
}

fn load_ckpt(path: &Path) -> Result<(Checkpoint, egolane::model::Model<f32>)> {
    let ck = Checkpoint::load(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
    let model = ck.to_model()?;
    Ok((ck, model))
}

fn cmd_gen(
    out: &Path,
    count: usize,
    seed: u64,
    size: (u32, u32),
    ranges: Option<&Path>,
    render: RenderOptions,
) -> Result<()> {
    let ranges: SceneRanges = match ranges {
        Some(p) => {
            toml::from_str(&fs::read_to_string(p)?).with_context(|| format!("bad ranges file {}", p.display()))?
        }
        None => SceneRanges::default(),
    };
    let summary = write_dataset(out, count, seed, &ranges, size.0, size.1, &render)?;
    info!("wrote {} samples to {}", summary.count, out.display());
    println!(
        "{}",
        serde_json::json!({ "count": summary.count, "histogram": summary.histogram })
    );
    Ok(())
}

fn cmd_train(
    data: &Path,
    config: &Path,
    out: &Path,
    val: Option<&Path>,
    log: Option<&Path>,
    ablate: &[Ablation],
) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    apply_ablation(&mut cfg, ablate);
    let mut train_set = load_samples(data)?;
    let val_set = match val {
        Some(v) => load_samples(v)?,
        None => {
            let keep = train_set.len() - train_set.len() / 10;
            train_set.split_off(keep)
        }
    };
    info!(
        "training {} on {} samples, validating on {}",
        variant_name(cfg.use_vpl, cfg.use_attention),
        train_set.len(),
        val_set.len()
    );
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("log.jsonl"));
    let mut writer = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let mut io_err = None;
    let outcome = train(&cfg, &train_set, &val_set, &mut |rec| {
        use std::io::Write;
        if let Err(e) = serde_json::to_writer(&mut writer, rec)
            .map_err(std::io::Error::from)
            .and_then(|_| writer.write_all(b"\n"))
        {
            io_err.get_or_insert(e);
        }
        match rec {
            LogRecord::Step(s) if s.step % 50 == 0 => info!("step {} loss {:.4} lr {:.2e}", s.step, s.loss, s.lr),
            LogRecord::Eval(e) => info!("step {} val macro-F1 {:.4}", e.step, e.val_f1),
            _ => {}
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    outcome.best.save(out)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": out,
            "steps": outcome.steps_run,
            "best_step": outcome.best.step,
            "val_f1": outcome.best.val_f1,
            "stopped_early": outcome.stopped_early,
        })
    );
    Ok(())
}

const UP_THRESHOLDS: [f64; 20] = [
    0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0,
];

fn cmd_eval(data: &Path, ckpt: &Path, out: &Path, ablate: &[Ablation]) -> Result<()> {
    let (ck, model) = load_ckpt(ckpt)?;
    let mut expected = TrainConfig {
        use_vpl: true,
        use_attention: true,
        ..TrainConfig::default()
    };
    apply_ablation(&mut expected, ablate);
    let trained_vpl = ck.train_config.as_ref().map_or(ck.model.use_vpl, |c| c.use_vpl);
    if expected.use_attention != ck.model.use_attention || expected.use_vpl != trained_vpl {
        bail!(
            "checkpoint is the {} variant but {} was requested",
            variant_name(trained_vpl, ck.model.use_attention),
            variant_name(expected.use_vpl, expected.use_attention)
        );
    }
    let samples = load_samples(data)?;
    fs::create_dir_all(out)?;
    let (report, preds) = evaluate(&model, &ck.norm, &samples)?;
    let curve = uncertainty_precision_curve(&preds, &labels_of(&samples), &UP_THRESHOLDS)?;
    let name = variant_name(trained_vpl, ck.model.use_attention);
    write_jsonl(
        &out.join("f1.jsonl"),
        &[serde_json::json!({ "variant": name, "report": report })],
    )?;
    write_f1_table(&out.join("f1_table.md"), &[(name.to_string(), report.clone())])?;
    write_jsonl(&out.join("up_curve.jsonl"), &curve)?;
    plot_up_curve(&out.join("up_curve.svg"), &curve)?;
    println!(
        "{}",
        serde_json::json!({ "variant": name, "macro_f1": report.macro_f1, "accuracy": report.accuracy, "samples": samples.len() })
    );
    Ok(())
}

fn cmd_infer(image: &Path, ckpt: &Path) -> Result<()> {
    let (ck, model) = load_ckpt(ckpt)?;
    let img = image::open(image)
        .with_context(|| format!("cannot read image {}", image.display()))?
        .to_rgb8();
    let input = preprocess(
        &img,
        ck.model.input_width as u32,
        ck.model.input_height as u32,
        &ck.norm,
    )?;
    let p = predict(&model.forward_one(&input)?.output)?;
    println!(
        "head={} lane={} u_left={} u_right={}",
        p.head, p.class_index, p.u_left, p.u_right
    );
    Ok(())
}

fn cmd_sweep(data: &Path, ckpt: &Path, out: &Path, ratios: &[f64]) -> Result<()> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        bail!("ratio {r} outside [0, 1]");
    }
    let (ck, model) = load_ckpt(ckpt)?;
    let samples = load_samples(data)?;
    fs::create_dir_all(out)?;
    let sweep = occlusion_sweep(&model, &ck.norm, &samples, ratios)?;
    write_jsonl(&out.join("occlusion.jsonl"), &sweep)?;
    plot_occlusion(&out.join("occlusion.svg"), &sweep)?;
    for p in &sweep {
        println!("{}", serde_json::to_string(p)?);
    }
    Ok(())
}

fn cmd_trace(ckpt: &Path, out: &Path, seed: u64, frames: usize) -> Result<()> {
    let (ck, model) = load_ckpt(ckpt)?;
    let ranges = SceneRanges {
        n_left: [0, 0],
        n_right: [1, 2],
        ..SceneRanges::default()
    };
    let base = sample_scene(seed, &ranges)?;
    let seq = lane_change_sequence(&base, frames)?;
    let (w, h) = (ck.model.input_width as u32, ck.model.input_height as u32);
    let images = seq
        .iter()
        .map(|s| Ok(render_scene(s, w, h)?.image))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let trace = lane_change_trace(&model, &ck.norm, &images)?;
    write_jsonl(&out.join("lane_change.jsonl"), &trace)?;
    plot_lane_change(&out.join("lane_change.svg"), &trace)?;
    for t in &trace {
        println!("{}", serde_json::to_string(t)?);
    }
    Ok(())
}

fn cmd_attention(image: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let (ck, model) = load_ckpt(ckpt)?;
    let img = image::open(image)
        .with_context(|| format!("cannot read image {}", image.display()))?
        .to_rgb8();
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    for p in export_attention(&model, &ck.norm, &img, out, stem)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> (&'static str, Result<()>) {
    match cli.command {
        Command::Gen {
            out,
            count,
            seed,
            size,
            ranges,
            no_noise,
            no_distractors,
        } => {
            let render = RenderOptions {
                noise: !no_noise,
                distractors: !no_distractors,
                ..RenderOptions::default()
            };
            ("gen", cmd_gen(&out, count, seed, size, ranges.as_deref(), render))
        }
        Command::Train {
            data,
            config,
            out,
            val,
            log,
            ablate,
        } => (
            "train",
            cmd_train(&data, &config, &out, val.as_deref(), log.as_deref(), &ablate),
        ),
        Command::Eval {
            data,
            ckpt,
            out,
            ablate,
        } => ("eval", cmd_eval(&data, &ckpt, &out, &ablate)),
        Command::Infer { image, ckpt } => ("infer", cmd_infer(&image, &ckpt)),
        Command::SweepOcclusion {
            data,
            ckpt,
            out,
            ratios,
        } => ("sweep-occlusion", cmd_sweep(&data, &ckpt, &out, &ratios)),
        Command::TraceLaneChange {
            ckpt,
            out,
            seed,
            frames,
        } => ("trace-lane-change", cmd_trace(&ckpt, &out, seed, frames)),
        Command::ExportAttention { image, ckpt, out } => ("export-attention", cmd_attention(&image, &ckpt, &out)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, result) = run(cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {stage}: {}", chain.join(": "));
            ExitCode::from(1)
        }
    }
}
