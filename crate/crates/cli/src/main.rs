//! sonarflow: synthetic sonar scenes, debris tracking, evaluation, rendering.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O error, 3 pipeline failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sonarflow_core::error::Error as CoreError;
use sonarflow_core::eval::{compare, format_report, EvalReport};
use sonarflow_core::flow::flow_between;
use sonarflow_core::io::{
    gt_path, load_gt, load_sequence, manifest_path, read_tracks, write_tracks, Sequence,
};
use sonarflow_core::preprocess::InpaintMethod;
use sonarflow_core::render::{render_flow, render_overlay, OverlayStyle};
use sonarflow_core::synth::{generate, preset, preset_names, SynthScene};
use sonarflow_core::tracking::{
    run_pipeline, smoothed_speed, track_records, tracks_from_records, PipelineConfig, Track,
};

#[derive(Parser)]
#[command(
    name = "sonarflow",
    version,
    about = "Marine-debris motion monitoring on acoustic-camera image sequences"
)]
struct Cli {
    /// Worker threads; 0 = one per core. Output is identical for any value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// off|error|warn|info|debug|trace
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    /// Overrides the scene seed for synth/demo; recorded in run metadata.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic sequence with ground truth
    Synth(SynthArgs),
    /// Run the tracking pipeline on a sequence
    Track(TrackArgs),
    /// Score a tracks.csv against ground truth
    Eval(EvalArgs),
    /// Draw trajectory overlays and flow quivers
    Render(RenderArgs),
    /// synth + track + eval + render over presets, with a summary table
    Demo(DemoArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// One of the built-in presets (see `demo --help` for the list)
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Scene JSON (same fields as the preset scenes)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Pipeline parameters as flags. Unset flags fall back to --config values,
/// then to defaults; flags always win.
#[derive(Args, Default, Clone)]
struct PipelineFlags {
    /// Pipeline config JSON (PipelineConfig fields, all optional)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frame gap of each flow pair
    #[arg(long)]
    stride: Option<usize>,
    /// Frames in the temporal-median background model
    #[arg(long)]
    bg_frames: Option<usize>,
    /// Hole intensity threshold in [0,1]
    #[arg(long)]
    hole_thresh: Option<f64>,
    /// telea | biharmonic | none
    #[arg(long)]
    inpaint: Option<String>,
    #[arg(long)]
    gf_radius: Option<usize>,
    #[arg(long)]
    gf_eps: Option<f64>,
    /// Saliency threshold quantile in (0,1)
    #[arg(long)]
    roi_quantile: Option<f64>,
    /// Minimum blob area, px
    #[arg(long)]
    min_blob_area: Option<usize>,
    #[arg(long)]
    fb_levels: Option<usize>,
    #[arg(long)]
    fb_win: Option<usize>,
    #[arg(long)]
    fb_iters: Option<usize>,
    #[arg(long)]
    fb_poly_n: Option<usize>,
    #[arg(long)]
    fb_poly_sigma: Option<f64>,
    #[arg(long)]
    max_assoc_dist: Option<f64>,
    #[arg(long)]
    max_gap: Option<usize>,
    #[arg(long)]
    speed_window: Option<usize>,
    #[arg(long)]
    no_crosstalk_rejection: bool,
    #[arg(long)]
    crosstalk_axis_ratio: Option<f64>,
    #[arg(long)]
    crosstalk_intensity_ratio: Option<f64>,
}

#[derive(Args)]
struct TrackArgs {
    /// Directory containing manifest.json and frames
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory with manifest.json (calibration) and the default gt.json
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    /// Ground truth; defaults to <input>/gt.json
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Report JSON path; defaults to report.json next to the tracks file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a flow quiver every N frame pairs
    #[arg(long)]
    flow_every: Option<usize>,
    /// Frame gap for the quiver flow pairs
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args)]
struct DemoArgs {
    /// Run a single preset instead of all of them
    #[arg(long)]
    preset: Option<String>,
    /// Output root; defaults to ./demo_<unix-time>
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a flow quiver every N frame pairs
    #[arg(long)]
    flow_every: Option<usize>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        msg: msg.into(),
    }
}

fn io_failure(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Io { .. }
            | CoreError::ImageFormat { .. }
            | CoreError::NonGrayscale { .. }
            | CoreError::Manifest(_)
            | CoreError::GroundTruth(_)
            | CoreError::GtBoxOutOfBounds { .. }
            | CoreError::DuplicateGtBox { .. }
            | CoreError::TrackRow { .. }
            | CoreError::DimensionMismatch { .. } => 2,
            CoreError::InvalidParam { .. } => 1,
            _ => 3,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl PipelineFlags {
    fn build(&self) -> Result<PipelineConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| io_failure(format!("cannot read {}: {e}", path.display())))?;
                serde_json::from_str::<PipelineConfig>(&text)
                    .map_err(|e| usage(format!("bad pipeline config {}: {e}", path.display())))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = self.bg_frames {
            cfg.bg_frames = v;
        }
        if let Some(v) = self.hole_thresh {
            cfg.hole_thresh = v;
        }
        if let Some(v) = &self.inpaint {
            cfg.inpaint = match v.as_str() {
                "telea" => Some(InpaintMethod::Telea),
                "biharmonic" => Some(InpaintMethod::Biharmonic),
                "none" => None,
                other => {
                    return Err(usage(format!(
                        "--inpaint must be telea, biharmonic, or none (got {other})"
                    )))
                }
            };
        }
        if let Some(v) = self.gf_radius {
            cfg.gf_radius = v;
        }
        if let Some(v) = self.gf_eps {
            cfg.gf_eps = v;
        }
        if let Some(v) = self.roi_quantile {
            cfg.roi_quantile = v;
        }
        if let Some(v) = self.min_blob_area {
            cfg.min_blob_area = v;
        }
        if let Some(v) = self.fb_levels {
            cfg.flow.levels = v;
        }
        if let Some(v) = self.fb_win {
            cfg.flow.win_size = v;
        }
        if let Some(v) = self.fb_iters {
            cfg.flow.iterations = v;
        }
        if let Some(v) = self.fb_poly_n {
            cfg.flow.poly_n = v;
        }
        if let Some(v) = self.fb_poly_sigma {
            cfg.flow.poly_sigma = v;
        }
        if let Some(v) = self.max_assoc_dist {
            cfg.tracker.max_assoc_dist = v;
        }
        if let Some(v) = self.max_gap {
            cfg.tracker.max_gap = v;
        }
        if let Some(v) = self.speed_window {
            cfg.tracker.speed_window = v;
        }
        if self.no_crosstalk_rejection {
            cfg.tracker.crosstalk_rejection = false;
        }
        if let Some(v) = self.crosstalk_axis_ratio {
            cfg.tracker.crosstalk_axis_ratio = v;
        }
        if let Some(v) = self.crosstalk_intensity_ratio {
            cfg.tracker.crosstalk_intensity_ratio = v;
        }
        cfg.validate().map_err(Failure::from)?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("sonarflow: cannot configure {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    }

    let result = match &cli.cmd {
        Cmd::Synth(args) => cmd_synth(&cli, args),
        Cmd::Track(args) => cmd_track(&cli, args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Render(args) => cmd_render(args),
        Cmd::Demo(args) => cmd_demo(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sonarflow: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_scene(cli: &Cli, args: &SynthArgs) -> Result<SynthScene, Failure> {
    let mut scene = match (&args.preset, &args.config) {
        (Some(name), None) => preset(name).ok_or_else(|| {
            usage(format!(
                "unknown preset '{name}'; valid presets: {}",
                preset_names().join(", ")
            ))
        })?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| io_failure(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("bad scene config {}: {e}", path.display())))?
        }
        _ => return Err(usage("synth needs exactly one of --preset or --config")),
    };
    if let Some(seed) = cli.seed {
        scene.rng_seed = seed;
    }
    Ok(scene)
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<(), Failure> {
    let scene = load_scene(cli, args)?;
    let (manifest, gt) = generate(&scene, &args.out)?;
    println!(
        "wrote {} frames, {}, {}",
        scene.duration_frames,
        manifest.display(),
        gt.display()
    );
    Ok(())
}

/// FNV-1a over the manifest, every listed frame file, and gt.json if present.
fn hash_input_dir(input: &Path) -> Result<String, Failure> {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    let manifest = manifest_path(input);
    let bytes = std::fs::read(&manifest)
        .map_err(|e| io_failure(format!("cannot read {}: {e}", manifest.display())))?;
    let names: Vec<String> = serde_json::from_slice::<serde_json::Value>(&bytes)
        .ok()
        .and_then(|v| {
            v.get("frames").and_then(|f| {
                f.as_array().map(|a| {
                    a.iter()
                        .filter_map(|s| s.as_str().map(str::to_owned))
                        .collect()
                })
            })
        })
        .unwrap_or_default();
    eat(&bytes);
    for name in names {
        let p = input.join(&name);
        let bytes = std::fs::read(&p)
            .map_err(|e| io_failure(format!("cannot read {}: {e}", p.display())))?;
        eat(&bytes);
    }
    if let Ok(bytes) = std::fs::read(gt_path(input)) {
        eat(&bytes);
    }
    Ok(format!("{h:016x}"))
}

fn write_run_metadata(
    out_dir: &Path,
    command: &str,
    input: &Path,
    input_hash: &str,
    cli: &Cli,
    cfg: &PipelineConfig,
) -> Result<PathBuf, Failure> {
    let meta = serde_json::json!({
        "tool": "sonarflow",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "input": input.display().to_string(),
        "input_hash_fnv1a64": input_hash,
        "seed": cli.seed,
        "threads": cli.threads,
        "config": cfg,
    });
    let path = out_dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| io_failure(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn run_track(
    cli: &Cli,
    input: &Path,
    out: &Path,
    flags: &PipelineFlags,
) -> Result<(Sequence, Vec<Track>, PipelineConfig, PathBuf), Failure> {
    let cfg = flags.build()?;
    let seq = load_sequence(&manifest_path(input))?;
    let input_hash = hash_input_dir(input)?;
    let tracks = run_pipeline(&seq, &cfg)?;
    std::fs::create_dir_all(out)
        .map_err(|e| io_failure(format!("cannot create {}: {e}", out.display())))?;
    let csv = out.join("tracks.csv");
    write_tracks(&track_records(&tracks), &csv)?;
    write_run_metadata(out, "track", input, &input_hash, cli, &cfg)?;
    Ok((seq, tracks, cfg, csv))
}

fn cmd_track(cli: &Cli, args: &TrackArgs) -> Result<(), Failure> {
    let (seq, tracks, cfg, csv) = run_track(cli, &args.input, &args.out, &args.pipeline)?;
    let points: usize = tracks.iter().map(|t| t.points.len()).sum();
    println!(
        "{} tracks, {points} points over {} frames -> {}",
        tracks.len(),
        seq.len(),
        csv.display()
    );
    for t in &tracks {
        let speed = smoothed_speed(t, &seq.calibration, cfg.tracker.speed_window).unwrap_or(0.0);
        println!(
            "  track {:>3}: frames {}..{}, {} points, smoothed speed {:.4} m/s",
            t.target_id,
            t.points.first().map_or(0, |p| p.frame_index),
            t.points.last().map_or(0, |p| p.frame_index),
            t.points.len(),
            speed
        );
    }
    Ok(())
}

fn eval_run(
    input: &Path,
    tracks_csv: &Path,
    gt_file: Option<&Path>,
    out: Option<&Path>,
) -> Result<EvalReport, Failure> {
    let seq = load_sequence(&manifest_path(input))?;
    let records = read_tracks(tracks_csv)?;
    let tracks = tracks_from_records(&records, &seq.calibration, seq.width(), seq.height());
    let default_gt = gt_path(input);
    let gt_file = gt_file.unwrap_or(&default_gt);
    let gt = load_gt(gt_file)?;
    let mut report = compare(&tracks, &gt, &seq.calibration);
    report.config = Some(serde_json::json!({
        "input": input.display().to_string(),
        "tracks": tracks_csv.display().to_string(),
        "gt": gt_file.display().to_string(),
    }));
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| tracks_csv.with_file_name("report.json"));
    std::fs::write(&out_path, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| io_failure(format!("cannot write {}: {e}", out_path.display())))?;
    print!("{}", format_report(&report));
    println!("report -> {}", out_path.display());
    Ok(report)
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    eval_run(
        &args.input,
        &args.tracks,
        args.gt.as_deref(),
        args.out.as_deref(),
    )?;
    Ok(())
}

fn render_run(
    seq: &Sequence,
    tracks: &[Track],
    gt: Option<&[sonarflow_core::io::GtBox]>,
    out: &Path,
    flow_every: Option<usize>,
    stride: usize,
) -> Result<usize, Failure> {
    let style = OverlayStyle::default();
    let written = render_overlay(seq, tracks, gt, &style, out)?;
    let mut n = written.len();
    if let Some(every) = flow_every {
        if every == 0 {
            return Err(usage("--flow-every must be >= 1"));
        }
        if stride == 0 || seq.len() < stride + 1 {
            return Err(usage("--stride must be >= 1 and shorter than the sequence"));
        }
        let params = sonarflow_core::flow::FlowParams::default();
        for i in (0..seq.len() - stride).step_by(every) {
            let flow = flow_between(seq, i, stride, &params)?;
            render_flow(&flow, &out.join(format!("flow_{i:04}.png")), &style)?;
            n += 1;
        }
    }
    Ok(n)
}

fn cmd_render(args: &RenderArgs) -> Result<(), Failure> {
    let seq = load_sequence(&manifest_path(&args.input))?;
    let records = read_tracks(&args.tracks)?;
    let tracks = tracks_from_records(&records, &seq.calibration, seq.width(), seq.height());
    let gt = match &args.gt {
        Some(p) => Some(load_gt(p)?),
        None => None,
    };
    let n = render_run(
        &seq,
        &tracks,
        gt.as_deref(),
        &args.out,
        args.flow_every,
        args.stride,
    )?;
    println!("wrote {n} images -> {}", args.out.display());
    Ok(())
}

fn cmd_demo(cli: &Cli, args: &DemoArgs) -> Result<(), Failure> {
    let selected: Vec<&'static str> = match &args.preset {
        Some(name) => {
            let name = preset_names()
                .into_iter()
                .find(|n| n == name)
                .ok_or_else(|| {
                    usage(format!(
                        "unknown preset '{name}'; valid presets: {}",
                        preset_names().join(", ")
                    ))
                })?;
            vec![name]
        }
        None => preset_names(),
    };
    let root = args.out.clone().unwrap_or_else(|| {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from(format!("demo_{secs}"))
    });

    struct Row {
        preset: &'static str,
        target: i64,
        gt_speed: f64,
        est_speed: f64,
        rel_err: f64,
        traj_rmse: f64,
    }
    let mut rows: Vec<Row> = Vec::new();

    for name in &selected {
        println!("== {name} ==");
        let scene_dir = root.join(name);
        let mut scene = preset(name).expect("selected from preset_names");
        if let Some(seed) = cli.seed {
            scene.rng_seed = seed;
        }
        generate(&scene, &scene_dir)?;
        let track_dir = scene_dir.join("out");
        let (seq, tracks, _cfg, csv) = run_track(cli, &scene_dir, &track_dir, &args.pipeline)?;
        let report = eval_run(&scene_dir, &csv, None, None)?;
        let gt = load_gt(&gt_path(&scene_dir))?;
        render_run(
            &seq,
            &tracks,
            Some(&gt),
            &scene_dir.join("render"),
            args.flow_every,
            1,
        )?;
        for r in &report.per_target {
            rows.push(Row {
                preset: name,
                target: r.target_id,
                gt_speed: r.gt_speed_mps,
                est_speed: r.est_speed_mps,
                rel_err: r.speed_rel_err,
                traj_rmse: r.traj_rmse_px,
            });
        }
    }

    println!();
    println!(
        "{:<18} {:>6} {:>13} {:>14} {:>8} {:>12}",
        "preset", "target", "scripted m/s", "estimated m/s", "rel err", "traj rmse"
    );
    for r in &rows {
        println!(
            "{:<18} {:>6} {:>13.4} {:>14.4} {:>7.1}% {:>9.2} px",
            r.preset,
            r.target,
            r.gt_speed,
            r.est_speed,
            100.0 * r.rel_err,
            r.traj_rmse
        );
    }
    println!("\nartifacts under {}", root.display());
    Ok(())
}
