use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use segpaint::config::{Overrides, RunConfig, RUN_CONFIG_FILE};
use segpaint::depthlayer::{
    depth_accuracy, gt_pairs, infer_occlusions, layer_order, predicted_graph, Layering,
    ObjectMasks, OcclusionGraph,
};
use segpaint::evalsuite::{
    evaluate_model, object_iou, paint_target, write_grid, write_json, IoUReport, NnBaseline,
    ObjectPaint, PaintReport,
};
use segpaint::inference::Predictor;
use segpaint::rasterio::{load_mask, load_rgb, save_mask, save_rgb};
use segpaint::scenegen::{build_dataset, load_sample, DatasetManifest, Sample, Split};
use segpaint::trainer::{train, Checkpoint, TrainOptions, CHECKPOINT_FILE, METRICS_FILE};

/// Amodal segmentation and painting of occluded objects.
///
/// Every flag can also be set through an environment variable named
/// `SEGPAINT_<FLAG>`, e.g. `SEGPAINT_SEED=3`.
#[derive(Parser)]
#[command(name = "segpaint", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, env = "SEGPAINT_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "SEGPAINT_OUT")]
    out: PathBuf,
    /// Global seed, overriding the config file.
    #[arg(long, env = "SEGPAINT_SEED")]
    seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, env = "SEGPAINT_DEVICE")]
    device: Option<String>,
    /// Mask binarization threshold, overriding `eval.threshold`.
    #[arg(long, env = "SEGPAINT_THRESHOLD")]
    threshold: Option<f32>,
    /// Fail instead of overwriting existing outputs.
    #[arg(long, env = "SEGPAINT_NO_CLOBBER")]
    no_clobber: bool,
}

#[derive(Args, Clone, Debug)]
struct DataArgs {
    /// Dataset directory or its manifest file.
    #[arg(long, env = "SEGPAINT_DATA")]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test, env = "SEGPAINT_SPLIT")]
    split: SplitArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the train split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "SEGPAINT_DATA")]
        data: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Segmentation IoU report.
    EvalSeg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, env = "SEGPAINT_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        /// Score ground-truth masks instead of a model.
        #[arg(long, env = "SEGPAINT_ORACLE")]
        oracle: bool,
    },
    /// Painting L1/L2 report and image grid.
    EvalPaint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, env = "SEGPAINT_CHECKPOINT")]
        checkpoint: PathBuf,
    },
    /// Occlusion graphs, layering and depth accuracy.
    DepthOrder {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, env = "SEGPAINT_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        /// Use ground-truth full masks instead of predictions.
        #[arg(long, env = "SEGPAINT_ORACLE")]
        oracle: bool,
    },
    /// Segment and paint one object given its visible mask.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "SEGPAINT_CHECKPOINT")]
        checkpoint: PathBuf,
        /// RGB image (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Visible-region mask (PNG, same size as the image).
        #[arg(long)]
        sv: PathBuf,
    },
}

/// Output directory guard implementing `--no-clobber`.
struct Outputs {
    dir: PathBuf,
    no_clobber: bool,
}

impl Outputs {
    fn create(common: &Common) -> Result<Self> {
        std::fs::create_dir_all(&common.out)
            .with_context(|| format!("cannot create output directory {}", common.out.display()))?;
        Ok(Self {
            dir: common.out.clone(),
            no_clobber: common.no_clobber,
        })
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if self.no_clobber && p.exists() {
            bail!("refusing to overwrite {} (--no-clobber)", p.display());
        }
        Ok(p)
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let o = Overrides {
        seed: common.seed,
        device: common.device.clone(),
        threshold: common.threshold,
    };
    Ok(base.resolve(&o)?)
}

/// Resolves the config and records it in the output directory.
fn start(common: &Common) -> Result<(RunConfig, Outputs)> {
    let cfg = resolve_config(common)?;
    let out = Outputs::create(common)?;
    cfg.save(&out.path(RUN_CONFIG_FILE)?)?;
    Ok((cfg, out))
}

fn load_checkpoint(path: &Path, common: &Common, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if common.config.is_some() && ck.net != cfg.net {
        bail!(
            "checkpoint {} was trained with a different [net] config than {}",
            path.display(),
            common.config.as_deref().unwrap_or(Path::new("")).display()
        );
    }
    Ok(ck)
}

fn predictor<'a>(ck: &'a Checkpoint, cfg: &RunConfig) -> Predictor<'a> {
    let mut p = Predictor::new(&ck.params, &ck.net, cfg.eval.threshold);
    p.expansion = cfg.eval.expansion;
    p
}

fn load_split(manifest: &DatasetManifest, split: Split) -> Result<(Vec<usize>, Vec<Sample>)> {
    let ids = manifest.sample_indices(split);
    let samples = ids
        .iter()
        .map(|&i| load_sample(manifest, i))
        .collect::<segpaint::Result<Vec<_>>>()?;
    if samples.is_empty() {
        bail!("the {} split of the dataset has no samples", split.as_str());
    }
    Ok((ids, samples))
}

fn cmd_gen_data(common: &Common) -> Result<()> {
    let (cfg, out) = start(common)?;
    out.path(segpaint::scenegen::MANIFEST_FILE)?;
    let m = build_dataset(&cfg.dataset, &out.dir)?;
    println!(
        "wrote {} scenes, {} samples to {}",
        m.scenes.len(),
        m.samples.len(),
        out.dir.display()
    );
    Ok(())
}

fn cmd_train(common: &Common, data: &Path, resume: bool) -> Result<()> {
    let (cfg, out) = start(common)?;
    let manifest = DatasetManifest::open(data)?;
    let ck_path = out.dir.join(CHECKPOINT_FILE);
    let resume = if resume {
        Some(Checkpoint::load(&ck_path)?)
    } else {
        out.path(CHECKPOINT_FILE)?;
        let metrics = out.path(METRICS_FILE)?;
        if metrics.exists() {
            std::fs::remove_file(&metrics)
                .with_context(|| format!("cannot replace {}", metrics.display()))?;
        }
        None
    };
    let outcome = train(
        &cfg.train,
        &cfg.net,
        &manifest,
        TrainOptions {
            out_dir: Some(out.dir.clone()),
            resume,
            stop_after: None,
        },
    )?;
    let last = outcome.history.last();
    println!(
        "trained to step {}; final total loss {}; checkpoint {}",
        outcome.checkpoint.step,
        last.map_or("n/a".into(), |l| format!("{:.4}", l.losses.total)),
        ck_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SegOutput<'a> {
    split: &'static str,
    source: &'static str,
    threshold: f32,
    report: &'a IoUReport,
    copy_baseline: &'a IoUReport,
}

fn cmd_eval_seg(
    common: &Common,
    data: &DataArgs,
    checkpoint: Option<&Path>,
    oracle: bool,
) -> Result<()> {
    let (cfg, out) = start(common)?;
    let manifest = DatasetManifest::open(&data.data)?;
    let split: Split = data.split.into();
    let (ids, samples) = load_split(&manifest, split)?;
    let thr = cfg.eval.threshold;
    let report = if oracle {
        let records = ids
            .iter()
            .zip(&samples)
            .map(|(&id, s)| object_iou(id, &s.sf, s.into(), thr))
            .collect::<segpaint::Result<Vec<_>>>()?;
        IoUReport::from_records(records)
    } else {
        let path = checkpoint.context("--checkpoint is required unless --oracle is set")?;
        let ck = load_checkpoint(path, common, &cfg)?;
        evaluate_model(&predictor(&ck, &cfg), &samples, &ids)?.segmentation
    };
    let copy = IoUReport::from_records(
        ids.iter()
            .zip(&samples)
            .map(|(&id, s)| object_iou(id, &s.sv, s.into(), thr))
            .collect::<segpaint::Result<Vec<_>>>()?,
    );
    let doc = SegOutput {
        split: split.as_str(),
        source: if oracle { "oracle" } else { "model" },
        threshold: thr,
        report: &report,
        copy_baseline: &copy,
    };
    write_json(&out.path("seg_report.json")?, &doc)?;
    println!(
        "{} objects ({} occluded): IoU union {:.4} visible {:.4} invisible {:.4}",
        report.count, report.occluded, report.iou_union, report.iou_visible, report.iou_invisible
    );
    Ok(())
}

#[derive(Serialize)]
struct PaintOutput<'a> {
    split: &'static str,
    report: &'a PaintReport,
    nn_baseline: Option<&'a PaintReport>,
}

fn cmd_eval_paint(common: &Common, data: &DataArgs, checkpoint: &Path) -> Result<()> {
    let (cfg, out) = start(common)?;
    let manifest = DatasetManifest::open(&data.data)?;
    let split: Split = data.split.into();
    let (ids, samples) = load_split(&manifest, split)?;
    let ck = load_checkpoint(checkpoint, common, &cfg)?;
    let pr = predictor(&ck, &cfg);
    let ev = evaluate_model(&pr, &samples, &ids)?;

    let nn = if cfg.eval.nn_baseline {
        let (_, train) = load_split(&manifest, Split::Train)?;
        let index = NnBaseline::build(&ck.params, &ck.net, &train, cfg.eval.expansion)?;
        let mut rows = Vec::with_capacity(samples.len());
        for ((s, p), &id) in samples.iter().zip(&ev.predictions).zip(&ids) {
            let target = paint_target(s, p.canvas_box, &ck.net)?;
            let (l1, l2) = segpaint::evalsuite::eval_painting(index.paint(s)?, &target)?;
            rows.push(ObjectPaint { id, l1, l2 });
        }
        Some(PaintReport::from_records(rows))
    } else {
        None
    };
    let doc = PaintOutput {
        split: split.as_str(),
        report: &ev.painting,
        nn_baseline: nn.as_ref(),
    };
    write_json(&out.path("paint_report.json")?, &doc)?;
    let rows: Vec<_> = samples
        .iter()
        .zip(&ev.predictions)
        .take(cfg.eval.grid_rows)
        .collect();
    write_grid(&out.path("paint_grid.png")?, &rows, &ck.net)?;
    println!(
        "{} objects: L1 {:.4} L2 {:.4}{}",
        ev.painting.count,
        ev.painting.l1,
        ev.painting.l2,
        nn.map_or(String::new(), |r| format!(
            " (nearest-neighbor baseline L1 {:.4} L2 {:.4})",
            r.l1, r.l2
        ))
    );
    Ok(())
}

#[derive(Serialize)]
struct ImageGraphs {
    image: usize,
    predicted: OcclusionGraph,
    ground_truth: OcclusionGraph,
    layering: Layering,
}

fn cmd_depth_order(
    common: &Common,
    data: &DataArgs,
    checkpoint: Option<&Path>,
    oracle: bool,
) -> Result<()> {
    let (cfg, out) = start(common)?;
    let manifest = DatasetManifest::open(&data.data)?;
    let split: Split = data.split.into();
    let ck = match (oracle, checkpoint) {
        (true, _) => None,
        (false, Some(p)) => Some(load_checkpoint(p, common, &cfg)?),
        (false, None) => bail!("--checkpoint is required unless --oracle is set"),
    };
    let thr = cfg.eval.depth_threshold;
    let mut dumps = Vec::new();
    for scene in manifest.scene_indices(split) {
        let samples = manifest
            .samples_of_scene(scene)
            .into_iter()
            .map(|i| load_sample(&manifest, i))
            .collect::<segpaint::Result<Vec<_>>>()?;
        let ground_truth = gt_pairs(scene, &samples, thr)?;
        let predicted = match &ck {
            Some(ck) => predicted_graph(&predictor(ck, &cfg), scene, &samples, thr)?,
            None => {
                let objs: Vec<ObjectMasks> = samples
                    .iter()
                    .map(|s| ObjectMasks {
                        id: s.object_id,
                        sv: &s.sv,
                        sf: &s.sf,
                    })
                    .collect();
                infer_occlusions(scene, &objs, thr)?
            }
        };
        let layering = layer_order(&predicted);
        dumps.push(ImageGraphs {
            image: scene,
            predicted,
            ground_truth,
            layering,
        });
    }
    let pred: Vec<OcclusionGraph> = dumps.iter().map(|d| d.predicted.clone()).collect();
    let gt: Vec<OcclusionGraph> = dumps.iter().map(|d| d.ground_truth.clone()).collect();
    let report = depth_accuracy(&pred, &gt)?;
    write_json(&out.path("depth_graphs.json")?, &dumps)?;
    write_json(&out.path("depth_report.json")?, &report)?;
    let pairs: usize = gt.iter().map(|g| g.pairs.len()).sum();
    println!(
        "{} images, {pairs} ground-truth pairs: depth accuracy {:.4}",
        dumps.len(),
        report.accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct InferOutput {
    canvas_box: segpaint::maskops::BBox,
    visible_pixels: usize,
    full_pixels: usize,
    invisible_pixels: usize,
}

fn cmd_infer(common: &Common, checkpoint: &Path, image: &Path, sv: &Path) -> Result<()> {
    let (cfg, out) = start(common)?;
    let ck = load_checkpoint(checkpoint, common, &cfg)?;
    let img = load_rgb(image)?;
    let sv = load_mask(sv)?;
    if img.dims() != sv.dims() {
        bail!(
            "image is {:?} but the visible mask is {:?}",
            img.dims(),
            sv.dims()
        );
    }
    let pr = predictor(&ck, &cfg);
    let p = pr.predict(&img, &sv)?;
    save_mask(&out.path("sf.png")?, &p.sf)?;
    save_rgb(&out.path("painted_patch.png")?, &p.composite)?;
    save_rgb(&out.path("generator_patch.png")?, &p.painted)?;
    save_rgb(&out.path("painted.png")?, &p.paint_into(&img, &sv)?)?;
    let invisible = p.invisible(&sv)?;
    let doc = InferOutput {
        canvas_box: p.canvas_box,
        visible_pixels: sv.count(),
        full_pixels: p.sf.count(),
        invisible_pixels: invisible.count(),
    };
    write_json(&out.path("prediction.json")?, &doc)?;
    println!(
        "predicted {} hidden pixels inside box [{}, {}, {}, {}]",
        doc.invisible_pixels, p.canvas_box.x0, p.canvas_box.y0, p.canvas_box.x1, p.canvas_box.y1
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common } => cmd_gen_data(common),
        Command::Train {
            common,
            data,
            resume,
        } => cmd_train(common, data, *resume),
        Command::EvalSeg {
            common,
            data,
            checkpoint,
            oracle,
        } => cmd_eval_seg(common, data, checkpoint.as_deref(), *oracle),
        Command::EvalPaint {
            common,
            data,
            checkpoint,
        } => cmd_eval_paint(common, data, checkpoint),
        Command::DepthOrder {
            common,
            data,
            checkpoint,
            oracle,
        } => cmd_depth_order(common, data, checkpoint.as_deref(), *oracle),
        Command::Infer {
            common,
            checkpoint,
            image,
            sv,
        } => cmd_infer(common, checkpoint, image, sv),
    }
}

fn main() -> ExitCode {
    // timestamps go to stderr only; output files stay byte-reproducible
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
