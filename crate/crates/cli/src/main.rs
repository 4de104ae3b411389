//! `dcfl`: batch assignment, bias statistics, evaluation and oracle checks.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
//! 3 malformed input data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use dcfl_core::assign::assign_on_field;
use dcfl_core::bias::{bucket_stats_batch, SceneAssignment};
use dcfl_core::eval::{buckets_from_edges, evaluate};
use dcfl_core::io::{
    image_id, list_annotation_files, load_annotation_dir, load_config, load_offsets,
    parse_detections, parse_dota, parse_predictions, prediction_field, read_to_string,
    AssignmentDocument, ImageAssignment, PredictionRecord, RunConfig,
};
use dcfl_core::prior::{build_prior_field, synth_offsets_toward_gt, update_priors};
use dcfl_core::selfcheck::{run_all, Fault, SelfCheckOptions};
use dcfl_core::{
    maxiou_assign, AssignmentResult, GtInstance, OffsetField, PredictionField, PriorField,
};

#[derive(Parser)]
#[command(
    name = "dcfl",
    version,
    about = "Coarse-to-fine label assignment for oriented tiny objects"
)]
struct Cli {
    /// Worker threads for per-file work; 0 uses one per core.
    #[arg(long, global = true, env = "DCFL_JOBS", default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assign labels for every annotation file in a directory.
    Assign(AssignArgs),
    /// Positive-sample quantity and quality per scale and angle bucket.
    Stats(StatsArgs),
    /// Rotated-box AP of detections against annotations.
    Eval(EvalArgs),
    /// Run the oracle suites and print a pass/fail table.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct SceneInputs {
    /// Directory of DOTA `.txt` annotation files.
    #[arg(long)]
    ann: PathBuf,
    /// TOML run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Offset file applied to every image, or a directory of `<image>.off` /
    /// `<image>.json` files.
    #[arg(long, conflicts_with = "offsets_synth")]
    offsets: Option<PathBuf>,
    /// Synthetic offsets pulling each prior toward its nearest gt.
    #[arg(long, value_name = "GAIN")]
    offsets_synth: Option<f64>,
    /// Prediction JSONL; images without records use uniform predictions.
    #[arg(long)]
    pred: Option<PathBuf>,
}

#[derive(Args)]
struct AssignArgs {
    #[command(flatten)]
    inputs: SceneInputs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Assigner {
    Dcfl,
    Maxiou,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    inputs: SceneInputs,
    /// Reuse a previous `assign` output instead of assigning again.
    #[arg(long)]
    assignments: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dcfl")]
    assigner: Assigner,
    /// Bucket edges, e.g. `scale=2,8,16,32,64` or `angle=0,30,60,90`.
    #[arg(long = "buckets", value_name = "KIND=EDGES", value_parser = parse_buckets)]
    buckets: Vec<(BucketFlag, Vec<f64>)>,
    /// Output stem; writes `<stem>.json` and `<stem>.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BucketFlag {
    Scale,
    Angle,
}

fn parse_buckets(s: &str) -> Result<(BucketFlag, Vec<f64>), String> {
    let (kind, edges) = s.split_once('=').ok_or("expected KIND=EDGES")?;
    let kind = match kind {
        "scale" => BucketFlag::Scale,
        "angle" => BucketFlag::Angle,
        other => return Err(format!("unknown bucket kind {other:?}")),
    };
    let edges = edges
        .split(',')
        .map(|e| {
            e.trim()
                .parse::<f64>()
                .map_err(|_| format!("bad edge {e:?}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if edges
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err("edges must be ascending".into());
    }
    Ok((kind, edges))
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of DOTA `.txt` annotation files.
    #[arg(long)]
    gt: PathBuf,
    /// Detections JSONL: `{image_id, class, score, box}` per line.
    #[arg(long)]
    pred: PathBuf,
    /// Comma-separated IoU thresholds; defaults to the config's list.
    #[arg(long, value_delimiter = ',')]
    iou_thrs: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultFlag {
    Iou,
    Kld,
    Gjsd,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
    #[arg(long, default_value_t = 1_000_000)]
    mc_samples: usize,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultFlag>,
}

/// Maps an error to its exit code by the first engine error in its chain.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|c| c.downcast_ref::<dcfl_core::Error>())
        .map_or(2, |e| if e.is_parse() { 3 } else { 2 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome = pool.install(|| match cli.command {
        Command::Assign(a) => cmd_assign(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Selfcheck(a) => cmd_selfcheck(&a),
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn config_of(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

enum OffsetSource {
    Identity,
    Synth(f64),
    Shared(OffsetField),
    PerImage(PathBuf),
}

impl OffsetSource {
    fn from_inputs(inputs: &SceneInputs) -> Result<OffsetSource> {
        Ok(match (&inputs.offsets, inputs.offsets_synth) {
            (Some(p), _) if p.is_dir() => OffsetSource::PerImage(p.clone()),
            (Some(p), _) => OffsetSource::Shared(
                load_offsets(p).with_context(|| format!("offsets {}", p.display()))?,
            ),
            (None, Some(g)) if !g.is_finite() => bail!("--offsets-synth must be finite"),
            (None, Some(g)) => OffsetSource::Synth(g),
            (None, None) => OffsetSource::Identity,
        })
    }

    fn apply(&self, field: PriorField, id: &str, gts: &[GtInstance]) -> Result<PriorField> {
        let offsets = match self {
            OffsetSource::Identity => return Ok(field),
            OffsetSource::Synth(g) => {
                let boxes: Vec<_> = gts.iter().map(|g| g.obox).collect();
                synth_offsets_toward_gt(&field, &boxes, *g)
            }
            OffsetSource::Shared(o) => o.clone(),
            OffsetSource::PerImage(dir) => {
                let path = ["off", "json"]
                    .iter()
                    .map(|ext| dir.join(format!("{id}.{ext}")))
                    .find(|p| p.is_file())
                    .ok_or_else(|| anyhow!("no offsets for image {id} in {}", dir.display()))?;
                load_offsets(&path).with_context(|| format!("offsets {}", path.display()))?
            }
        };
        Ok(update_priors(&field, &offsets)?)
    }
}

/// Everything per image that assignment and statistics need.
struct Scene {
    id: String,
    gts: Vec<GtInstance>,
    priors: PriorField,
    predictions: PredictionField,
}

struct Loader {
    cfg: RunConfig,
    base: PriorField,
    offsets: OffsetSource,
    predictions: BTreeMap<String, Vec<PredictionRecord>>,
}

impl Loader {
    fn new(inputs: &SceneInputs) -> Result<Loader> {
        let cfg = config_of(inputs.config.as_deref())?;
        let (w, h) = cfg.image_size();
        let base = build_prior_field(w, h, &cfg.strides, cfg.scale_factor)?;
        let offsets = OffsetSource::from_inputs(inputs)?;
        let predictions = match &inputs.pred {
            Some(p) => parse_predictions(&read_to_string(p)?)
                .with_context(|| format!("predictions {}", p.display()))?,
            None => BTreeMap::new(),
        };
        Ok(Loader {
            cfg,
            base,
            offsets,
            predictions,
        })
    }

    fn scene(&self, path: &Path) -> Result<Scene> {
        let id = image_id(path);
        let gts = parse_dota(&read_to_string(path)?, &self.cfg.classes)
            .with_context(|| format!("annotation {}", path.display()))?;
        let priors = self.offsets.apply(self.base.clone(), &id, &gts)?;
        let predictions = match self.predictions.get(&id) {
            Some(recs) => prediction_field(recs, &priors, self.cfg.classes.len())
                .with_context(|| format!("predictions for image {id}"))?,
            None => PredictionField::Uniform,
        };
        Ok(Scene {
            id,
            gts,
            priors,
            predictions,
        })
    }
}

/// Runs `f` on every file in parallel and returns results in input order,
/// failing on the first error in that order.
fn per_file<T: Send>(files: &[PathBuf], f: impl Fn(&Path) -> Result<T> + Sync) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = files.par_iter().map(|p| f(p)).collect();
    results.into_iter().collect()
}

fn dcfl_on(loader: &Loader, scene: &Scene) -> Result<AssignmentResult> {
    assign_on_field(
        &scene.priors,
        &scene.gts,
        &scene.predictions,
        &loader.cfg.dcfl(),
    )
    .with_context(|| format!("assigning image {}", scene.id))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_assign(args: &AssignArgs) -> Result<ExitCode> {
    let loader = Loader::new(&args.inputs)?;
    let files = list_annotation_files(&args.inputs.ann)?;
    let images = per_file(&files, |path| {
        let scene = loader.scene(path)?;
        let result = dcfl_on(&loader, &scene)?;
        Ok(ImageAssignment {
            image_id: scene.id,
            num_priors: scene.priors.len(),
            result,
        })
    })?;
    let gts: usize = images.iter().map(|i| i.result.per_gt.len()).sum();
    let positives: usize = images.iter().map(|i| i.result.total_positives()).sum();
    let doc = AssignmentDocument {
        config: loader.cfg.dcfl(),
        images,
    };
    write(&args.out, &doc.to_json()?)?;
    println!(
        "assigned {} images, {gts} gts, {positives} positives -> {}",
        doc.images.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(args: &StatsArgs) -> Result<ExitCode> {
    let loader = Loader::new(&args.inputs)?;
    let files = list_annotation_files(&args.inputs.ann)?;
    let scenes = per_file(&files, |p| loader.scene(p))?;

    let results: Vec<AssignmentResult> = match (&args.assignments, args.assigner) {
        (Some(path), _) => {
            let doc = AssignmentDocument::from_json(&read_to_string(path)?)
                .with_context(|| format!("assignments {}", path.display()))?;
            let mut by_id: BTreeMap<String, ImageAssignment> = doc
                .images
                .into_iter()
                .map(|i| (i.image_id.clone(), i))
                .collect();
            scenes
                .iter()
                .map(|s| {
                    let img = by_id
                        .remove(&s.id)
                        .ok_or_else(|| anyhow!("image {} missing from {}", s.id, path.display()))?;
                    if img.num_priors != s.priors.len() {
                        bail!(
                            "image {}: assignments cover {} priors, config builds {}",
                            s.id,
                            img.num_priors,
                            s.priors.len()
                        );
                    }
                    Ok(img.result)
                })
                .collect::<Result<_>>()?
        }
        (None, Assigner::Dcfl) => scenes
            .par_iter()
            .map(|s| dcfl_on(&loader, s))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_>>()?,
        (None, Assigner::Maxiou) => scenes
            .par_iter()
            .map(|s| {
                maxiou_assign(&s.priors, &s.gts, loader.cfg.pos_thr, loader.cfg.neg_thr)
                    .map_err(anyhow::Error::from)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<_>>()?,
    };

    let mut scale_edges = loader.cfg.scale_edges.clone();
    let mut angle_edges = loader.cfg.angle_edges.clone();
    for (kind, edges) in &args.buckets {
        match kind {
            BucketFlag::Scale => scale_edges = edges.clone(),
            BucketFlag::Angle => angle_edges = edges.clone(),
        }
    }
    let batch: Vec<SceneAssignment> = scenes
        .iter()
        .zip(&results)
        .map(|(s, r)| SceneAssignment {
            assignment: r,
            priors: &s.priors,
            gts: &s.gts,
            predictions: &s.predictions,
        })
        .collect();
    let report = bucket_stats_batch(&batch, &scale_edges, &angle_edges)?;
    let json_path = args.out.with_extension("json");
    let csv_path = args.out.with_extension("csv");
    write(&json_path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write(&csv_path, &report.to_csv()?)?;
    println!(
        "{} gts over {} images -> {}, {}",
        report.gt_count,
        scenes.len(),
        json_path.display(),
        csv_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode> {
    let cfg = config_of(args.config.as_deref())?;
    let thresholds = if args.iou_thrs.is_empty() {
        cfg.iou_thrs.clone()
    } else {
        args.iou_thrs.clone()
    };
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        bail!("iou thresholds must lie in [0, 1]");
    }
    let images = load_annotation_dir(&args.gt, &cfg.classes)?;
    let dets = parse_detections(&read_to_string(&args.pred)?, &cfg.classes)
        .with_context(|| format!("detections {}", args.pred.display()))?;
    let report = evaluate(
        &dets,
        &images,
        cfg.classes.len(),
        &thresholds,
        &buckets_from_edges(&cfg.scale_edges),
    );
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(p) => {
            write(p, &json)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "AP={} AP50={} AP75={} -> {}",
                fmt(report.ap),
                fmt(report.ap_50),
                fmt(report.ap_75),
                p.display()
            );
        }
        None => print!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_selfcheck(args: &SelfcheckArgs) -> Result<ExitCode> {
    if args.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let opts = SelfCheckOptions {
        trials: args.trials,
        mc_samples: args.mc_samples,
        seed: args.seed,
        fault: match args.inject_fault {
            None => Fault::None,
            Some(FaultFlag::Iou) => Fault::IouBias,
            Some(FaultFlag::Kld) => Fault::KldBias,
            Some(FaultFlag::Gjsd) => Fault::GjsdSkew,
        },
    };
    let outcomes = run_all(&opts);
    for o in &outcomes {
        println!("{}", o.line());
    }
    Ok(if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
