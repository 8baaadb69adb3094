//! `velofcn`: synthesize data, train, detect, evaluate, render and check
//! gradients.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use velofcn::config::{RunConfig, CONFIG_ENV};
use velofcn::detector::{detect, detections_csv, parse_detections_csv, Detection};
use velofcn::evalkit::{evaluate, metrics_csv, Criterion, Difficulty, EvalDetection, MetricsRow};
use velofcn::kittio::{project_box_to_image, Calibration, Dataset, Frame};
use velofcn::pointmap::{project_scan, ProjectionConfig};
use velofcn::render::{render_confidence, render_depth, BirdsEye};
use velofcn::synth::{generate_frames, write_dataset, SynthConfig};
use velofcn::tensornet::checkpoint;
use velofcn::tensornet::gradcheck::{check_network, jitter_biases, GradCheckReport, LinearProbe};
use velofcn::tensornet::{NetworkSpec, Parameters};
use velofcn::trainer::{
    build_labels, mean_vehicle_cells, sample_weights, train, TrainSample, WeightedLoss, LOSS_LOG_HEADER,
};
use velofcn::Error;

const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_FILE: &str = "model.ckpt";
const STATE_FILE: &str = "train_state.txt";
const LOSS_FILE: &str = "loss.csv";
const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser)]
#[command(name = "velofcn", version, about = "Vehicle detection in lidar range scans")]
struct Cli {
    /// Config file of `key = value` lines. Defaults to $VELOFCN_CONFIG.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in KITTI layout.
    Synth {
        #[arg(long)]
        count: usize,
        /// Defaults to `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the network; writes a checkpoint and a loss log.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from the checkpoint in `out_dir`.
        #[arg(long)]
        resume: bool,
    },
    /// Per-scan detection CSVs.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// AP, AOS and max recall per difficulty, plus PR curves.
    Eval {
        /// Directory of detection CSVs.
        #[arg(long)]
        detections: PathBuf,
        /// Dataset directory holding the labels.
        #[arg(long)]
        groundtruth: PathBuf,
        #[arg(long, value_enum, default_value_t = CriterionArg::Both)]
        criterion: CriterionArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Binary PPM images.
    Render {
        #[command(subcommand)]
        what: RenderCommand,
    },
    /// Finite-difference checks of the backward pass on a toy network.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_layer: Option<String>,
    },
}

#[derive(Subcommand)]
enum RenderCommand {
    /// The d channel of a scan's point map.
    Scan {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vehicle probability per cell.
    Confidence {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-down view of points, labeled boxes and detections.
    Detections {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        id: String,
        /// Detection CSV file or directory.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    World,
    Image,
    Both,
}

impl CriterionArg {
    fn criteria(self) -> Vec<Criterion> {
        match self {
            CriterionArg::World => vec![Criterion::World],
            CriterionArg::Image => vec![Criterion::Image],
            CriterionArg::Both => vec![Criterion::Image, Criterion::World],
        }
    }
}

/// Failure classes, one exit code each.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.into()),
            Error::NonFinite(_) | Error::Divergence { .. } => Failure::Numeric(e.into()),
            _ => Failure::Data(e.into()),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn data_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p).map_err(|e| match e {
            Error::Io { .. } => Failure::Usage(anyhow!(e)),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(data_err)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data_err)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Outcome {
    write_file(&dir.join(CONFIG_FILE), cfg.to_text())
}

fn load_frames(data_dir: &Path) -> Outcome<Vec<Frame>> {
    let ds = Dataset::open(data_dir)?;
    Ok(ds.ids.par_iter().map(|id| ds.load(id)).collect::<Result<Vec<_>, _>>()?)
}

fn load_frame(data_dir: &Path, id: &str) -> Outcome<Frame> {
    let ds = Dataset::open(data_dir)?;
    if !ds.ids.iter().any(|i| i == id) {
        return Err(data_err(anyhow!("no scan `{id}` in {}", data_dir.display())));
    }
    Ok(ds.load(id)?)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Outcome<(NetworkSpec, Parameters<f32>)> {
    let spec = cfg.network_spec()?;
    let params = checkpoint::load(path, &spec)?;
    Ok((spec, params))
}

fn cmd_synth(cfg: &mut RunConfig, count: usize, seed: Option<u64>, out_dir: &Path) -> Outcome {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let proj = cfg.projection()?;
    let frames = generate_frames(&cfg.synth, &proj, cfg.seed, count)?;
    create_dir(out_dir)?;
    write_dataset(&frames, out_dir, &Calibration::synthetic())?;
    write_config(out_dir, cfg)?;
    println!("wrote {count} scans to {}", out_dir.display());
    Ok(())
}

fn read_next_iteration(path: &Path) -> Outcome<usize> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(data_err)?;
    text.lines()
        .find_map(|l| l.strip_prefix("next_iteration = "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| data_err(anyhow!("{}: no next_iteration entry", path.display())))
}

fn cmd_train(cfg: &mut RunConfig, data_dir: &Path, out_dir: &Path, resume: bool) -> Outcome {
    let proj = cfg.projection()?;
    let spec = cfg.network_spec()?;
    let samples: Vec<TrainSample> = load_frames(data_dir)?
        .into_iter()
        .map(|f| TrainSample {
            boxes: f.boxes(),
            scan: f.scan,
        })
        .collect();
    let loss = cfg.loss(|| mean_vehicle_cells(&samples, &proj))?;
    cfg.n_bar = Some(loss.n_bar);

    create_dir(out_dir)?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let state = out_dir.join(STATE_FILE);
    let log_path = out_dir.join(LOSS_FILE);
    let (mut params, start) = if resume {
        (checkpoint::load(&ckpt, &spec)?, read_next_iteration(&state)?)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (Parameters::<f64>::init(&spec, cfg.init_gain, &mut rng).cast::<f32>(), 0)
    };
    write_config(out_dir, cfg)?;

    let mut file = OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))
        .map_err(data_err)?;
    if !resume || file.metadata().map(|m| m.len() == 0).unwrap_or(true) {
        writeln!(file, "{LOSS_LOG_HEADER}").map_err(data_err)?;
    }
    let mut log = BufWriter::new(file);
    let result = train(&spec, &mut params, &samples, &proj, &loss, &cfg.train(), start, &mut log);
    drop(log);
    let summary = result?;
    checkpoint::save(&params, &ckpt)?;
    write_file(&state, format!("next_iteration = {}\n", summary.next_iteration))?;
    println!(
        "trained to iteration {}; last loss {:.6} (objectness {:.6}, box {:.6})",
        summary.next_iteration, summary.last_loss.total, summary.last_loss.objectness, summary.last_loss.boxes
    );
    Ok(())
}

fn cmd_detect(cfg: &RunConfig, ckpt: &Path, data_dir: &Path, out_dir: &Path) -> Outcome {
    let proj = cfg.projection()?;
    let (spec, params) = load_model(cfg, ckpt)?;
    let ds = Dataset::open(data_dir)?;
    create_dir(out_dir)?;
    write_config(out_dir, cfg)?;
    let counts = ds
        .ids
        .par_iter()
        .map(|id| -> Outcome<usize> {
            let frame = ds.load(id)?;
            let out = detect(&spec, &params, &frame.scan, &proj, cfg.input_scale, &cfg.detector)?;
            write_file(&out_dir.join(format!("{id}.csv")), detections_csv(id, &out.detections))?;
            Ok(out.detections.len())
        })
        .collect::<Outcome<Vec<_>>>()?;
    println!(
        "{} detections over {} scans in {}",
        counts.iter().sum::<usize>(),
        counts.len(),
        out_dir.display()
    );
    Ok(())
}

/// Detections per scan id from a CSV file or every CSV in a directory.
fn read_detections(path: &Path) -> Outcome<BTreeMap<String, Vec<Detection>>> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(data_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for f in files {
        let text = fs::read_to_string(&f)
            .with_context(|| format!("reading {}", f.display()))
            .map_err(data_err)?;
        for (id, d) in parse_detections_csv(&text, &f)? {
            out.entry(id).or_default().push(d);
        }
    }
    Ok(out)
}

fn cmd_eval(cfg: &RunConfig, detections: &Path, groundtruth: &Path, which: CriterionArg, out_dir: &Path) -> Outcome {
    let mut dets = read_detections(detections)?;
    let frames = load_frames(groundtruth)?;
    let size = (cfg.image_width, cfg.image_height);
    let matched: Vec<_> = frames
        .iter()
        .map(|f| {
            let d = dets
                .remove(&f.id)
                .unwrap_or_default()
                .into_iter()
                .map(|d| EvalDetection {
                    rect: project_box_to_image(&d.bbox, &f.calib).ok().map(|r| r.clip(size.0, size.1)),
                    bbox: d.bbox,
                    confidence: d.confidence,
                })
                .collect();
            (d, f.groundtruth(&cfg.difficulty, Some(size)))
        })
        .collect();
    if let Some(id) = dets.keys().next() {
        return Err(data_err(anyhow!("detections for unknown scan `{id}`")));
    }
    create_dir(out_dir)?;
    write_config(out_dir, cfg)?;
    let mut rows = Vec::new();
    for criterion in which.criteria() {
        let threshold = match criterion {
            Criterion::World => cfg.world_iou,
            Criterion::Image => cfg.image_iou,
        };
        for level in Difficulty::ALL {
            let curve = evaluate(&matched, criterion, threshold, level);
            let name = format!("pr_{}_{}.csv", criterion.name(), level.name());
            write_file(&out_dir.join(name), curve.to_csv())?;
            rows.push(MetricsRow::from_curve(criterion, level, &curve));
        }
    }
    let report = metrics_csv(&rows);
    write_file(&out_dir.join(METRICS_FILE), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_render(cfg: &RunConfig, what: &RenderCommand) -> Outcome {
    let proj = cfg.projection()?;
    let (img, out) = match what {
        RenderCommand::Scan { data_dir, id, out } => {
            let frame = load_frame(data_dir, id)?;
            (render_depth(&project_scan(&frame.scan, &proj)?), out)
        }
        RenderCommand::Confidence {
            checkpoint,
            data_dir,
            id,
            out,
        } => {
            let (spec, params) = load_model(cfg, checkpoint)?;
            let frame = load_frame(data_dir, id)?;
            let d = detect(&spec, &params, &frame.scan, &proj, cfg.input_scale, &cfg.detector)?;
            (render_confidence(&d.probability, d.map.rows(), d.map.cols())?, out)
        }
        RenderCommand::Detections {
            data_dir,
            id,
            detections,
            out,
        } => {
            let frame = load_frame(data_dir, id)?;
            let dets = match detections {
                Some(p) => read_detections(p)?.remove(id).unwrap_or_default(),
                None => Vec::new(),
            };
            let truth: Vec<_> = frame.objects.iter().map(|o| o.bbox).collect();
            let found: Vec<_> = dets.iter().map(|d| d.bbox).collect();
            (BirdsEye::default().render(&frame.scan.points, &truth, &found), out)
        }
    };
    img.write_ppm(out)?;
    println!("{}x{} image written to {}", img.width, img.height, out.display());
    Ok(())
}

/// Projection of the gradient-check map: coarse cells pointing at the
/// ground ahead, so a nearby car covers part of the map.
fn gradcheck_projection(rows: usize, cols: usize) -> velofcn::Result<ProjectionConfig> {
    let (dt, dp) = (2.0, 1.0);
    let half = cols as f64 * dt / 2.0;
    ProjectionConfig::from_degrees(dt, dp, (-half, half), (1.0 - rows as f64 * dp, 1.0))
}

fn print_report(title: &str, report: &GradCheckReport) {
    println!("{title}");
    for l in &report.layers {
        println!(
            "  {:<10} checked {:>5}  max rel err {:.3e}{}",
            l.name,
            l.checked,
            l.max_rel_err,
            if l.max_rel_err < report.tolerance { "" } else { "  FAIL" }
        );
    }
}

fn cmd_gradcheck(cfg: &RunConfig, corrupt_layer: Option<String>) -> Outcome {
    let spec = NetworkSpec::fcn(&cfg.gradcheck_network())?;
    let proj = gradcheck_projection(cfg.gradcheck_rows, cfg.gradcheck_cols)?;
    let scene_cfg = SynthConfig {
        min_vehicles: 1,
        max_vehicles: 1,
        min_range: 10.0,
        max_range: 14.0,
        clutter: 1,
        ..cfg.synth
    };
    let frame = generate_frames(&scene_cfg, &proj, cfg.seed, 1)?.remove(0);
    let boxes = frame.scene.boxes();
    let scan = &frame.scan.scan;
    let map = project_scan(scan, &proj)?;
    let labels = build_labels(scan, &boxes, &map)?;
    let sample = [TrainSample {
        scan: scan.clone(),
        boxes: boxes.clone(),
    }];
    let loss = cfg.loss(|| mean_vehicle_cells(&sample, &proj))?;
    let weights = sample_weights(&labels, &loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Parameters::<f64>::init(&spec, cfg.init_gain, &mut rng);
    jitter_biases(&mut params, 0.1, &mut rng);
    let input = map.to_tensor::<f64>(cfg.input_scale);
    let mut opts = cfg.gradcheck();
    opts.corrupt_layer = corrupt_layer;

    let probe = LinearProbe::random(map.rows(), map.cols(), cfg.seed);
    let layers = check_network(&spec, &params, &input, &probe, &opts)?;
    print_report("per-layer (random linear probe)", &layers);
    let objective = WeightedLoss {
        labels: &labels,
        weights: &weights,
        cfg: loss,
    };
    let full = check_network(&spec, &params, &input, &objective, &opts)?;
    print_report("weighted loss", &full);

    let worst = layers.max_rel_err().max(full.max_rel_err());
    if layers.passed() && full.passed() {
        println!("PASS: max rel err {worst:.3e} < {:.1e}", opts.tolerance);
        Ok(())
    } else {
        Err(Failure::Numeric(anyhow!(
            "gradient check failed: max rel err {worst:.3e} >= {:.1e}",
            opts.tolerance
        )))
    }
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth { count, seed, out_dir } => cmd_synth(&mut cfg, count, seed, &out_dir),
        Command::Train {
            data_dir,
            out_dir,
            resume,
        } => cmd_train(&mut cfg, &data_dir, &out_dir, resume),
        Command::Detect {
            checkpoint,
            data_dir,
            out_dir,
        } => cmd_detect(&cfg, &checkpoint, &data_dir, &out_dir),
        Command::Eval {
            detections,
            groundtruth,
            criterion,
            out_dir,
        } => cmd_eval(&cfg, &detections, &groundtruth, criterion, &out_dir),
        Command::Render { what } => cmd_render(&cfg, &what),
        Command::Gradcheck { corrupt_layer } => cmd_gradcheck(&cfg, corrupt_layer),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e)) = f;
            let mut msg = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
