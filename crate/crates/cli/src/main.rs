//! Batch command-line surface: accounting, ablation grids, training,
//! evaluation, saliency export and dataset splits.
//!
//! Every run writes `manifest.txt` (command, inputs, seed and the pinned
//! constants) into its output directory before any results, and identical
//! manifests plus seeds reproduce identical numeric outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ecoweed_core::data::{
    load_class_list, load_dataset, load_image, subset_indices, synth_corpus, Checkpoint, Sample,
    SynthSpec,
};
use ecoweed_core::detection::DEFAULT_REG_MAX;
use ecoweed_core::error::Error as CoreError;
use ecoweed_core::explain::{gradcam_pp, write_heatmap_png, write_overlay_png};
use ecoweed_core::graph::{ablation_grid, build_model, GraphConfig, Model};
use ecoweed_core::train::{evaluate_model, train, EpochMetrics, TrainConfig};

#[derive(Parser)]
#[command(name = "ecoweed", version, about = "Lightweight weed-detector construction kit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Generate the synthetic corpus instead of reading a dataset.
    #[arg(long)]
    synthetic: bool,
    /// Image directory (with --labels) when not using --synthetic.
    #[arg(long)]
    images: Option<PathBuf>,
    /// YOLO-style label directory.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Class list file (one name per line).
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Synthetic corpus size.
    #[arg(long, default_value_t = 200)]
    synth_images: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-layer parameter/MAC accounting for a graph config.
    Summarize {
        #[arg(long)]
        config: PathBuf,
        /// Accounting resolution; defaults to the config's.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Account a grid of (spab, simam) insertion rows against a base config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Grid file: one `spab=1,3 simam=8,11,15` row per line.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a dataset or the synthetic corpus; writes a checkpoint and a
    /// per-epoch metrics file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        /// Train on a uniform subset of this fraction of the data.
        #[arg(long)]
        subset_fraction: Option<f64>,
        /// Random horizontal flips.
        #[arg(long)]
        hflip: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a checkpoint; writes report.txt / report.kv / confusion.tsv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.25)]
        conf_thr: f64,
        #[arg(long, default_value_t = 0.5)]
        iou_thr: f64,
        /// Also render the confusion matrix as a heatmap image.
        #[arg(long)]
        heatmap: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Class-activation saliency for one image; writes heatmap and overlay.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        class: usize,
        /// Target base-graph node; defaults to the node feeding the
        /// stride-8 head.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic k-fold split listings.
    Split {
        #[arg(long, default_value_t = 5)]
        kfolds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
}

fn main() {
    if let Ok(threads) = std::env::var("ECOWEED_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e
                .downcast_ref::<CoreError>()
                .map(|c| matches!(c, CoreError::Parse { .. }))
                .unwrap_or(false)
            {
                2
            } else {
                1
            };
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Summarize { config, resolution } => {
            let cfg = parse_config(&config)?;
            let res = resolution.unwrap_or(cfg.resolution);
            let model = build_model::<f32>(&cfg, 0)?;
            print!("{}", model.summary(res)?.render());
            Ok(())
        }
        Cmd::Ablate { config, grid, out } => cmd_ablate(&config, &grid, out.as_deref()),
        Cmd::Train {
            config,
            out,
            seed,
            epochs,
            batch_size,
            lr,
            subset_fraction,
            hflip,
            data,
        } => cmd_train(&config, &out, seed, epochs, batch_size, lr, subset_fraction, hflip, &data),
        Cmd::Eval { checkpoint, out, seed, conf_thr, iou_thr, heatmap, data } => {
            cmd_eval(&checkpoint, &out, seed, conf_thr, iou_thr, heatmap, &data)
        }
        Cmd::Saliency { checkpoint, image, class, layer, out } => {
            cmd_saliency(&checkpoint, &image, class, layer, &out)
        }
        Cmd::Split { kfolds, seed, out, data } => cmd_split(kfolds, seed, &out, &data),
    }
}

fn parse_config(path: &Path) -> anyhow::Result<GraphConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    Ok(GraphConfig::parse(&text)?)
}

fn write_manifest(
    out: &Path,
    command: &str,
    fields: &[(&str, String)],
    seed: u64,
) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let mut text = String::new();
    text.push_str(&format!("command: {command}\n"));
    for (k, v) in fields {
        text.push_str(&format!("{k}: {v}\n"));
    }
    text.push_str(&format!("seed: {seed}\n"));
    text.push_str(&format!("simam_lambda: {}\n", ecoweed_core::attention::DEFAULT_LAMBDA));
    text.push_str("loss_weights: box=7.5 cls=0.5 dfl=1.5\n");
    text.push_str(&format!("dfl_bins: {DEFAULT_REG_MAX}\n"));
    text.push_str("gflops_convention: 2*MACs/1e9\n");
    text.push_str(&format!(
        "bn: eps={} momentum={}\n",
        ecoweed_core::blocks::BN_EPS,
        ecoweed_core::blocks::BN_MOMENTUM
    ));
    fs::write(out.join("manifest.txt"), text)?;
    Ok(())
}

/// Resolve the sample set for train/eval/split.
fn load_samples(
    data: &DataArgs,
    cfg_resolution: usize,
    num_classes: usize,
    seed: u64,
) -> anyhow::Result<(Vec<Sample<f32>>, Vec<String>)> {
    if data.synthetic {
        let spec = SynthSpec {
            n_images: data.synth_images,
            image_size: cfg_resolution,
            n_classes: num_classes,
            class_ratio: vec![1; num_classes],
            ..Default::default()
        };
        return Ok((synth_corpus::<f32>(seed, &spec), Vec::new()));
    }
    let (Some(images), Some(labels)) = (&data.images, &data.labels) else {
        bail!("provide --synthetic or both --images and --labels");
    };
    let (samples, diags) = load_dataset::<f32>(images, labels, num_classes)?;
    if samples.is_empty() {
        bail!("no images found in {}", images.display());
    }
    Ok((samples, diags))
}

fn class_names(data: &DataArgs, num_classes: usize) -> anyhow::Result<Vec<String>> {
    if let Some(path) = &data.classes {
        let names = load_class_list(path)?;
        if names.len() != num_classes {
            bail!(
                "class list has {} entries but the model expects {num_classes}",
                names.len()
            );
        }
        Ok(names)
    } else {
        Ok((0..num_classes).map(|c| format!("class{c}")).collect())
    }
}

fn cmd_ablate(config: &Path, grid: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = parse_config(config)?;
    let text = fs::read_to_string(grid)
        .with_context(|| format!("reading grid {}", grid.display()))?;
    let mut rows = Vec::new();
    for (li, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut spab = Vec::new();
        let mut simam = Vec::new();
        for tok in line.split_whitespace() {
            let Some((key, value)) = tok.split_once('=') else {
                bail!("grid line {}: expected key=value tokens, got '{tok}'", li + 1);
            };
            let list: Vec<usize> = value
                .split(',')
                .filter(|p| !p.is_empty())
                .map(|p| p.parse())
                .collect::<Result<_, _>>()
                .with_context(|| format!("grid line {}: bad index list '{value}'", li + 1))?;
            match key {
                "spab" => spab = list,
                "simam" => simam = list,
                other => bail!("grid line {}: unknown key '{other}'", li + 1),
            }
        }
        rows.push((spab, simam));
    }

    let outcomes = ablation_grid(&cfg, &rows);
    let mut report = String::from("spab\tsimam\tparams\tgflops\tstatus\n");
    for o in &outcomes {
        let spab = if o.spab.is_empty() { "-".into() } else { join(&o.spab) };
        let simam = if o.simam.is_empty() { "-".into() } else { join(&o.simam) };
        match &o.outcome {
            Ok(m) => report.push_str(&format!(
                "{spab}\t{simam}\t{}\t{:.3}\tok\n",
                m.params, m.gflops
            )),
            Err(e) => report.push_str(&format!("{spab}\t{simam}\t-\t-\terror: {e}\n")),
        }
    }
    print!("{report}");
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        fs::write(out.join("grid_report.tsv"), &report)?;
    }
    Ok(())
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Path,
    out: &Path,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    subset_fraction: Option<f64>,
    hflip: bool,
    data: &DataArgs,
) -> anyhow::Result<()> {
    let cfg = parse_config(config)?;
    write_manifest(
        out,
        "train",
        &[
            ("config", config.display().to_string()),
            ("epochs", epochs.to_string()),
            ("batch_size", batch_size.to_string()),
            ("lr", format!("{lr}")),
            ("subset_fraction", format!("{:?}", subset_fraction.unwrap_or(1.0))),
            ("hflip", hflip.to_string()),
            ("synthetic", data.synthetic.to_string()),
            ("out", out.display().to_string()),
        ],
        seed,
    )?;

    let (mut samples, diags) = load_samples(data, cfg.resolution, cfg.num_classes, seed)?;
    for d in &diags {
        eprintln!("warning: {d}");
    }
    if let Some(fraction) = subset_fraction {
        let keep = subset_indices(samples.len(), fraction, seed)?;
        samples = keep.into_iter().map(|i| samples[i].clone()).collect();
    }

    let mut model = build_model::<f32>(&cfg, seed)?;
    let tc = TrainConfig {
        epochs,
        batch_size,
        lr,
        seed,
        hflip,
        ..Default::default()
    };

    let metrics_path = out.join("metrics.tsv");
    let mut metrics_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    if metrics_file.metadata()?.len() == 0 {
        writeln!(metrics_file, "{}", EpochMetrics::tsv_header())?;
    }
    let run = train(&mut model, &samples, &tc, |m| {
        let _ = writeln!(metrics_file, "{}", m.tsv_line());
        let _ = metrics_file.flush();
        println!(
            "epoch {:>3}: box {:.4} cls {:.4} dfl {:.4} | P {:.3} R {:.3} mAP50 {:.3} mAP50-95 {:.3}",
            m.epoch, m.box_loss, m.cls_loss, m.dfl_loss, m.precision, m.recall, m.map50, m.map50_95
        );
    })?;
    for d in &run.diagnostics {
        eprintln!("warning: {d}");
    }

    let ck = Checkpoint::from_model(&model, epochs as u64, seed, tc.loss_weights);
    ck.write(&out.join("checkpoint.bin"))?;
    let best = run
        .epochs
        .iter()
        .max_by(|a, b| a.map50.total_cmp(&b.map50))
        .map(|m| (m.epoch, m.map50));
    if let Some((e, m)) = best {
        println!("done: best mAP50 {m:.3} at epoch {e}; checkpoint at {}", out.join("checkpoint.bin").display());
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    out: &Path,
    seed: u64,
    conf_thr: f64,
    iou_thr: f64,
    heatmap: bool,
    data: &DataArgs,
) -> anyhow::Result<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let model: Model<f32> = ck.restore()?;
    write_manifest(
        out,
        "eval",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("conf_thr", format!("{conf_thr}")),
            ("iou_thr", format!("{iou_thr}")),
            ("synthetic", data.synthetic.to_string()),
            ("out", out.display().to_string()),
        ],
        seed,
    )?;
    let (samples, diags) =
        load_samples(data, model.config.resolution, model.num_classes, seed)?;
    for d in &diags {
        eprintln!("warning: {d}");
    }
    let report = evaluate_model(&model, &samples, 0.001, 0.6, conf_thr)?;
    let names = class_names(data, model.num_classes)?;
    let table = report.render_table(&names);
    print!("{table}");
    fs::write(out.join("report.txt"), &table)?;
    fs::write(out.join("report.kv"), report.render_kv())?;
    fs::write(out.join("confusion.tsv"), report.render_confusion())?;
    if heatmap {
        write_confusion_heatmap(&report.confusion, &out.join("confusion.png"))?;
    }
    Ok(())
}

fn write_confusion_heatmap(m: &[Vec<usize>], path: &Path) -> anyhow::Result<()> {
    let n = m.len();
    let cell = 24u32;
    let max = m.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let mut img = ecoweed_core::FeatureMap::<f32>::zeros([1, 3, n * cell as usize, n * cell as usize]);
    for (r, row) in m.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let heat = (v as f64 / max).sqrt();
            for y in 0..cell as usize {
                for x in 0..cell as usize {
                    let border = y == 0 || x == 0;
                    let (rr, gg, bb) = if border {
                        (0.25, 0.25, 0.25)
                    } else {
                        (heat, 0.15 + 0.2 * heat, 1.0 - heat)
                    };
                    *img.at_mut(0, 0, r * cell as usize + y, c * cell as usize + x) = rr as f32;
                    *img.at_mut(0, 1, r * cell as usize + y, c * cell as usize + x) = gg as f32;
                    *img.at_mut(0, 2, r * cell as usize + y, c * cell as usize + x) = bb as f32;
                }
            }
        }
    }
    ecoweed_core::data::save_image(&img, path)?;
    Ok(())
}

fn cmd_saliency(
    checkpoint: &Path,
    image_path: &Path,
    class: usize,
    layer: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let ck = Checkpoint::read(checkpoint)?;
    let model: Model<f32> = ck.restore()?;
    write_manifest(
        out,
        "saliency",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("image", image_path.display().to_string()),
            ("class", class.to_string()),
            ("layer", format!("{layer:?}")),
            ("out", out.display().to_string()),
        ],
        ck.seed,
    )?;
    let image = load_image::<f32>(image_path)?;
    let map = gradcam_pp(&model, &image, class, layer)?;
    write_heatmap_png(&map, &out.join("heatmap.png"))?;
    write_overlay_png(&image, &map, &out.join("overlay.png"))?;
    println!(
        "saliency for class {class} at node {} written to {}",
        map.layer_base,
        out.display()
    );
    Ok(())
}

fn cmd_split(kfolds: usize, seed: u64, out: &Path, data: &DataArgs) -> anyhow::Result<()> {
    write_manifest(
        out,
        "split",
        &[
            ("kfolds", kfolds.to_string()),
            ("synthetic", data.synthetic.to_string()),
            ("out", out.display().to_string()),
        ],
        seed,
    )?;
    // splits only need sample names; classes are irrelevant here
    let (samples, _) = load_samples(data, 64, data_classes(data)?, seed)?;
    let names: Vec<&str> = samples.iter().map(|s| s.name.as_str()).collect();
    let folds = ecoweed_core::data::kfold_indices(names.len(), kfolds, seed)?;
    for (i, (train_idx, val_idx)) in folds.iter().enumerate() {
        let train_list: Vec<&str> = train_idx.iter().map(|&j| names[j]).collect();
        let val_list: Vec<&str> = val_idx.iter().map(|&j| names[j]).collect();
        fs::write(out.join(format!("fold_{i}_train.txt")), train_list.join("\n") + "\n")?;
        fs::write(out.join(format!("fold_{i}_val.txt")), val_list.join("\n") + "\n")?;
    }
    println!("{kfolds} folds over {} samples written to {}", names.len(), out.display());
    Ok(())
}

fn data_classes(data: &DataArgs) -> anyhow::Result<usize> {
    if let Some(path) = &data.classes {
        Ok(load_class_list(path)?.len().max(1))
    } else {
        Ok(2)
    }
}
