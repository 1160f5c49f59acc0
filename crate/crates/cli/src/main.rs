//! `lgnet` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or model error.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lgnet::guidance::{iou, AffinityMode};
use lgnet::loss_metrics::MetricsReport;
use lgnet::proposals::{self, ProposalSet};
use lgnet::synthdata::{self, Split, SynthSpec, SPLITS};
use lgnet::tensor_autodiff::{sigmoid, Tensor};
use lgnet::training::{
    self, log_csv, proposal_path, run_ablation, AblationData, AblationName, Model, TrainConfig,
};
use lgnet::{BBox, LgError, Result};

#[derive(Parser)]
#[command(name = "lgnet", version, about = "Localization-guided attribute recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Clone)]
struct Common {
    /// RNG seed (overrides the config file's seed where one is used)
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config: a dataset spec for gen-data, a training config elsewhere
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AffinityArg {
    Iou,
    Overlap,
}

impl From<AffinityArg> for AffinityMode {
    fn from(a: AffinityArg) -> Self {
        match a {
            AffinityArg::Iou => AffinityMode::Iou,
            AffinityArg::Overlap => AffinityMode::OverlapArea,
        }
    }
}

/// Flags that override fields of the training config.
#[derive(Args, Clone)]
struct TrainOverrides {
    /// Number of training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Proposals kept per image
    #[arg(long = "top-k")]
    top_k: Option<usize>,
    /// NMS IoU threshold for generated proposals
    #[arg(long)]
    nms: Option<f64>,
    /// Decision threshold on sigmoid scores
    #[arg(long)]
    threshold: Option<f64>,
    /// Affinity between CAM boxes and proposals
    #[arg(long, value_enum)]
    affinity: Option<AffinityArg>,
    /// SGD momentum
    #[arg(long)]
    momentum: Option<f64>,
    /// Mini-batch size
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset root
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        val: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
    },
    /// Compute proposals for every image of a dataset
    Propose {
        #[command(flatten)]
        common: Common,
        /// Dataset root
        #[arg(long)]
        data: PathBuf,
        /// Output root; files go to OUT/{split}/{id}.proposals
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "top-k")]
        top_k: Option<usize>,
        #[arg(long)]
        nms: Option<f64>,
    },
    /// Train the global classifier
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log (default: OUT with a .log.csv suffix)
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Train the local branch and guidance head on a frozen stage-1 model
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint
        #[arg(long)]
        model: PathBuf,
        /// Proposal root written by `propose`
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Weight all proposals evenly instead of by affinity
        #[arg(long)]
        uniform: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint and print mA, Acc, Prec, Rec, F1 (percent)
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Proposal root (stage-2 models only)
        #[arg(long)]
        proposals: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Write each image's normalized affinity matrix as CSV into this directory
        #[arg(long = "dump-affinity")]
        dump_affinity: Option<PathBuf>,
    },
    /// Write activation boxes, top-5 proposals and overlays for a split
    Localize {
        #[command(flatten)]
        common: Common,
        /// Stage-2 checkpoint
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        proposals: PathBuf,
        /// Output directory for localize.jsonl and overlays/
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train and compare both arms of an ablation
    Ablate {
        #[command(flatten)]
        common: Common,
        /// resolution | dilation | affinity_mode | no_guidance
        #[arg(long)]
        name: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        /// Optional directory for report.json
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stage-1 epochs (default: same as stage 2)
        #[arg(long = "stage1-epochs")]
        stage1_epochs: Option<usize>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Render a training log as an SVG line chart
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn train_config(common: &Common, o: Option<&TrainOverrides>) -> Result<TrainConfig> {
    let mut c = match &common.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(o) = o {
        if let Some(v) = o.epochs {
            c.epochs = v;
        }
        if let Some(v) = o.top_k {
            c.top_k_proposals = v;
        }
        if let Some(v) = o.nms {
            c.nms_threshold = v;
        }
        if let Some(v) = o.threshold {
            c.threshold = v;
        }
        if let Some(v) = o.affinity {
            c.affinity_mode = v.into();
        }
        if let Some(v) = o.momentum {
            c.momentum = v;
        }
        if let Some(v) = o.batch_size {
            c.batch_size = v;
        }
    }
    c.validate()?;
    Ok(c)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LgError::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| LgError::Io { path: path.to_path_buf(), source: e })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| LgError::Io { path: path.to_path_buf(), source: e })
}

fn default_log(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    })
}

fn split_proposals(root: &Path, split: &Split) -> Result<Vec<ProposalSet>> {
    training::load_split_proposals(&root.join(&split.name), split)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, out, train, val, test } => {
            let spec = match &common.config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| LgError::Io { path: p.clone(), source: e })?;
                    serde_json::from_str::<SynthSpec>(&text)
                        .map_err(|e| LgError::Corrupt { path: p.clone(), detail: e.to_string() })?
                }
                None => SynthSpec::default(),
            };
            synthdata::generate_dataset(&spec, common.seed.unwrap_or(0), [train, val, test], &out)
        }
        Command::Propose { common, data, out, top_k, nms } => {
            let mut c = train_config(&common, None)?;
            if let Some(k) = top_k {
                c.top_k_proposals = k;
            }
            if let Some(t) = nms {
                c.nms_threshold = t;
            }
            c.validate()?;
            let pc = c.proposal_config();
            for name in SPLITS {
                let split = synthdata::load_split(&data, name)?;
                let dir = out.join(name);
                create_dir(&dir)?;
                for s in &split.samples {
                    let set = proposals::propose(&s.image, &pc)?;
                    proposals::write_proposals(&proposal_path(&dir, &s.id), &set)?;
                }
            }
            Ok(())
        }
        Command::TrainStage1 { common, data, out, log, overrides } => {
            let c = train_config(&common, Some(&overrides))?;
            let train = synthdata::load_split(&data, "train")?;
            let val = synthdata::load_split(&data, "val")?;
            let outcome = training::train_stage1(&train, &val, &c)?;
            Model::Stage1(outcome.model).save(&out)?;
            write_text(&default_log(&out, log), &log_csv(&outcome.log))?;
            println!("best epoch {} val mA {:.4}", outcome.best_epoch, outcome.best_val.ma);
            Ok(())
        }
        Command::TrainStage2 { common, data, model, proposals, out, log, uniform, overrides } => {
            let mut c = train_config(&common, Some(&overrides))?;
            c.uniform_affinity = c.uniform_affinity || uniform;
            let stage1 = match Model::load(&model)? {
                Model::Stage1(m) => m,
                Model::Stage2(m) => m.stage1(),
            };
            c.backbone = stage1.config.backbone;
            let train = synthdata::load_split(&data, "train")?;
            let val = synthdata::load_split(&data, "val")?;
            let tp = split_proposals(&proposals, &train)?;
            let vp = split_proposals(&proposals, &val)?;
            let outcome = training::train_stage2(&train, &val, &tp, &vp, &stage1, &c)?;
            Model::Stage2(outcome.model).save(&out)?;
            write_text(&default_log(&out, log), &log_csv(&outcome.log))?;
            println!("best epoch {} val mA {:.4}", outcome.best_epoch, outcome.best_val.ma);
            Ok(())
        }
        Command::Eval { common: _, model, data, split, proposals, threshold, dump_affinity } => {
            let mut model = Model::load(&model)?;
            if let Some(t) = threshold {
                set_threshold(&mut model, t)?;
            }
            let split = synthdata::load_split(&data, &split)?;
            let props = match (&model, &proposals) {
                (Model::Stage2(_), Some(root)) => Some(split_proposals(root, &split)?),
                (Model::Stage2(_), None) => {
                    return Err(LgError::InvalidArgument(
                        "stage-2 models need --proposals".into(),
                    ))
                }
                (Model::Stage1(_), _) => None,
            };
            if let (Some(dir), Model::Stage2(m), Some(p)) = (&dump_affinity, &model, &props) {
                create_dir(dir)?;
                for (s, set) in split.samples.iter().zip(p) {
                    let out = m.predict(&s.image, set)?;
                    write_text(&dir.join(format!("{}.csv", s.id)), &out.frozen.affinity.to_csv())?;
                }
            }
            let report = training::evaluate(&model, &split, props.as_deref())?;
            println!("{}", MetricsReport::TSV_HEADER);
            println!("{}", report.tsv_row());
            Ok(())
        }
        Command::Localize { common: _, model, data, split, proposals, out, threshold } => {
            let mut model = Model::load(&model)?;
            if let Some(t) = threshold {
                set_threshold(&mut model, t)?;
            }
            let Model::Stage2(m) = model else {
                return Err(LgError::InvalidArgument("localize needs a stage-2 model".into()));
            };
            let split = synthdata::load_split(&data, &split)?;
            let props = split_proposals(&proposals, &split)?;
            localize(&m, &split, &props, &out)
        }
        Command::Ablate { common, name, data, proposals, out, stage1_epochs, overrides } => {
            let name = AblationName::parse(&name)?;
            let c = train_config(&common, Some(&overrides))?;
            let train = synthdata::load_split(&data, "train")?;
            let val = synthdata::load_split(&data, "val")?;
            let test = synthdata::load_split(&data, "test")?;
            let tp = split_proposals(&proposals, &train)?;
            let vp = split_proposals(&proposals, &val)?;
            let sp = split_proposals(&proposals, &test)?;
            let d = AblationData {
                train: &train,
                val: &val,
                test: &test,
                train_proposals: &tp,
                val_proposals: &vp,
                test_proposals: &sp,
            };
            let report = run_ablation(name, &c, stage1_epochs, &d)?;
            print!("{}", report.to_tsv());
            if let Some(dir) = out {
                write_text(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
            Ok(())
        }
        Command::Plot { common: _, log, out } => {
            let text = fs::read_to_string(&log).map_err(|e| LgError::Io { path: log.clone(), source: e })?;
            let svg = plot::log_to_svg(&text).map_err(|d| LgError::Corrupt { path: log.clone(), detail: d })?;
            write_text(&out, &svg)
        }
    }
}

fn set_threshold(model: &mut Model, t: f64) -> Result<()> {
    let c = match model {
        Model::Stage1(m) => &mut m.config,
        Model::Stage2(m) => &mut m.config,
    };
    c.threshold = t;
    c.validate()
}

/// Up to five proposals by raw affinity, highest first; ties keep proposal order.
fn top5(affinity_row: &[f64], boxes: &[BBox]) -> Vec<(BBox, f64)> {
    let mut idx: Vec<usize> = (0..affinity_row.len()).collect();
    idx.sort_by(|&a, &b| affinity_row[b].total_cmp(&affinity_row[a]).then(a.cmp(&b)));
    idx.into_iter().take(5).map(|j| (boxes[j], affinity_row[j])).collect()
}

const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [0.0, 0.3, 1.0],
    [1.0, 0.6, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 1.0, 1.0],
];

fn draw_outline(img: &mut Tensor, b: &BBox, color: [f64; 3]) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let clampi = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
    let (x0, y0) = (clampi(b.x_min, w), clampi(b.y_min, h));
    let (x1, y1) = (clampi(b.x_max - 1e-9, w), clampi(b.y_max - 1e-9, h));
    let plane = h * w;
    let data = img.data_mut();
    let mut put = |x: usize, y: usize| {
        for (c, v) in color.iter().enumerate() {
            data[c * plane + y * w + x] = *v;
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn localize(model: &training::LgModel, split: &Split, props: &[ProposalSet], out: &Path) -> Result<()> {
    let overlays = out.join("overlays");
    create_dir(&overlays)?;
    let mut jsonl = String::new();
    for (s, set) in split.samples.iter().zip(props) {
        let o = model.predict(&s.image, set)?;
        let boxes: Vec<BBox> = set.boxes.iter().take(model.config.top_k_proposals).copied().collect();
        let mut overlay = s.image.clone();
        for (i, ab) in o.frozen.cam_boxes.iter().enumerate() {
            let top: Vec<_> = top5(o.frozen.raw_affinity.row(i), &boxes)
                .into_iter()
                .map(|(b, a)| json!({"box": b.coords(), "affinity": a}))
                .collect();
            let mut rec = json!({
                "image_id": s.id,
                "attribute_id": i,
                "attribute": split.attribute_names.get(i),
                "score": sigmoid(o.fused[i]),
                "predicted": sigmoid(o.fused[i]) > model.config.threshold,
                "box": ab.bbox.coords(),
                "degenerate": ab.degenerate,
                "top5": top,
            });
            if let Some(gt) = s.gt_box(i) {
                rec["iou_to_gt"] = json!(iou(&ab.bbox, gt));
            }
            jsonl.push_str(&rec.to_string());
            jsonl.push('\n');
            if sigmoid(o.fused[i]) > model.config.threshold {
                draw_outline(&mut overlay, &ab.bbox, PALETTE[i % PALETTE.len()]);
            }
        }
        synthdata::write_ppm(&overlays.join(format!("{}.ppm", s.id)), &overlay)?;
    }
    write_text(&out.join("localize.jsonl"), &jsonl)
}
