//! `svsr`: phantom generation, k-space degradation, training, inference,
//! evaluation, the resolution sweep, agreement statistics and the
//! end-to-end desk run. Every subcommand writes one JSON run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use svsr::kspace::{degrade, make_training_pair, DegradeAxes, DegradeConfig, PairConfig};
use svsr::metrics::{write_metric_reports, EdgeConfig, SsimConfig};
use svsr::net::{read_weights, write_weights, NetworkWeights};
use svsr::phantom::CardiacOptions;
use svsr::pipeline::{
    contours_by_id, end_to_end, infer, phantom_corpus, read_corpus, read_rows, rois_by_id,
    write_phantom_corpus, E2eConfig, EvalAnnotations, RunManifest, VOLUME_EXT,
};
use svsr::stats::{AgreementReport, PairedMeasurements, RatingTable};
use svsr::sweep::run_sweep;
use svsr::train::{train, TrainOutputs, TrainingPair, TrainingSetup};
use svsr::volume::{read_volume, write_volume};
use svsr::Volume32;

#[derive(Parser)]
#[command(name = "svsr", version, about = "Single-volume 3D super-resolution pipeline")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-volume parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Where to write the run manifest (default: next to the main output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded phantom corpus with truth sidecars.
    Phantom(PhantomArgs),
    /// Simulate a low-resolution acquisition of one volume or a directory.
    Degrade(DegradeArgs),
    /// Train a network on a pair corpus or a high-resolution corpus.
    Train(TrainArgs),
    /// Super-resolve one volume or a directory.
    Infer(InferArgs),
    /// Score test volumes against truth volumes.
    Eval(EvalArgs),
    /// Degrade a corpus at fractions 0.1..1.0 and score a fixed network.
    Sweep(SweepArgs),
    /// Bland-Altman limits of agreement and one-way ICC.
    Stats(StatsArgs),
    /// Run phantom, degrade, train, infer, eval, sweep and stats.
    E2e(E2eArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Grid size as nx,ny,nz.
    #[arg(long, default_value = "64,64,32", value_parser = parse_dims)]
    dims: [usize; 3],
    /// Isotropic voxel spacing, mm.
    #[arg(long, default_value_t = 1.6)]
    spacing: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Edge blur, mm.
    #[arg(long, default_value_t = 0.4)]
    softness: f64,
}

#[derive(Args)]
struct DegradeArgs {
    /// Input volume, or a directory mirrored recursively.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    frac: f64,
    #[arg(long, default_value_t = 0.75)]
    pf: f64,
    /// Phase-encode axes to degrade: y, z or yz.
    #[arg(long, default_value = "yz")]
    axes: DegradeAxes,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with input/ and target/ volumes of matching ids, or a
    /// directory of high-resolution volumes to synthesize pairs from.
    #[arg(long)]
    corpus: PathBuf,
    /// Flat TOML with training and network keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Pair synthesis for high-resolution corpora: resolution fraction.
    #[arg(long, default_value_t = 0.5)]
    frac: f64,
    /// Pair synthesis for high-resolution corpora: partial Fourier factor.
    #[arg(long, default_value_t = 0.75)]
    pf: f64,
    /// Pair synthesis for high-resolution corpora: in-plane window nx,ny
    /// (default: full grid).
    #[arg(long, value_parser = parse_pair)]
    window: Option<[usize; 2]>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Input volume, or a directory mirrored recursively.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Contour vertices (id, point, x, y, z, normal_x, normal_y, normal_z).
    #[arg(long)]
    contours: Option<PathBuf>,
    /// ROI boxes (id, roi, lo_x, lo_y, lo_z, hi_x, hi_y, hi_z).
    #[arg(long)]
    rois: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    weights: PathBuf,
    /// High-resolution test volumes.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Partial Fourier factor kept fixed across fractions.
    #[arg(long, default_value_t = 0.75)]
    pf: f64,
}

#[derive(Args)]
struct StatsArgs {
    /// Paired measurements (id, reference, test).
    #[arg(long)]
    pairs: PathBuf,
    /// Ratings (subject, rater, value); the pairs act as two raters if absent.
    #[arg(long)]
    ratings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct E2eArgs {
    #[arg(long, default_value = "e2e_out")]
    out_dir: PathBuf,
    /// Nested TOML in the layout of the resolved config in the manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected nx,ny,nz, got {s:?}"))
}

fn parse_pair(s: &str) -> std::result::Result<[usize; 2], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected nx,ny, got {s:?}"))
}

/// `<file>.manifest.json` for file outputs, `<dir>/manifest.json` for
/// directories.
fn default_manifest(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

/// Volume files under `root`, as paths relative to it, sorted.
fn walk_volumes(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let dir = root.join(&rel);
        for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let entry = entry?;
            let name = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                stack.push(name);
            } else if name.extension().and_then(|e| e.to_str()) == Some(VOLUME_EXT) {
                out.push(name);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Applies `f` to one volume, or to every volume under a directory while
/// mirroring its layout. Returns the written (input, output) paths.
fn map_volumes(
    input: &Path,
    out: &Path,
    mut f: impl FnMut(&str, &Volume32) -> Result<Volume32>,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    let jobs: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        walk_volumes(input)?
            .into_iter()
            .map(|rel| (input.join(&rel), out.join(&rel)))
            .collect()
    } else {
        vec![(input.to_path_buf(), out.to_path_buf())]
    };
    if jobs.is_empty() {
        bail!("no .{VOLUME_EXT} volumes under {}", input.display());
    }
    for (src, dst) in &jobs {
        let v: Volume32 = read_volume(src)?;
        let id = src.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let result = f(id, &v).with_context(|| format!("processing {}", src.display()))?;
        if let Some(parent) = dst.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        write_volume(&result, dst)?;
    }
    Ok(jobs)
}

struct Run {
    manifest: RunManifest,
    path: PathBuf,
}

impl Run {
    fn finish(mut self, start: Instant) -> Result<()> {
        self.manifest.wall_time_s = start.elapsed().as_secs_f64();
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        self.manifest.write(&self.path)?;
        log::info!("manifest written to {}", self.path.display());
        Ok(())
    }
}

fn cmd_phantom(a: &PhantomArgs, seed: u64) -> Result<RunManifest> {
    let opts = CardiacOptions {
        dims: a.dims,
        spacing: [a.spacing; 3],
        noise: a.noise,
        softness: a.softness,
    };
    let entries = phantom_corpus::<f64>(&opts, a.count, seed)?;
    let written = write_phantom_corpus(&a.out_dir, &entries)?;
    let mut m = RunManifest::new("phantom", seed, json!({ "count": a.count, "options": opts }));
    for p in &written {
        m.add_output(p, show(p))?;
    }
    Ok(m)
}

fn cmd_degrade(a: &DegradeArgs, seed: u64) -> Result<RunManifest> {
    let cfg = DegradeConfig::with_axes(a.frac, a.pf, a.axes);
    cfg.validate()?;
    let jobs = map_volumes(&a.input, &a.out, |_, v| Ok(degrade(v, &cfg)?))?;
    let mut m = RunManifest::new("degrade", seed, json!({ "degrade": cfg }));
    for (src, dst) in &jobs {
        m.inputs.push(show(src));
        m.add_output(dst, show(dst))?;
    }
    Ok(m)
}

fn load_training_corpus(a: &TrainArgs) -> Result<(Vec<TrainingPair<f32>>, serde_json::Value)> {
    let (inputs, targets) = (a.corpus.join("input"), a.corpus.join("target"));
    if inputs.is_dir() && targets.is_dir() {
        let x = read_corpus::<f32>(&inputs)?;
        let y: BTreeMap<String, Volume32> = read_corpus::<f32>(&targets)?.into_iter().collect();
        let mut pairs = Vec::with_capacity(x.len());
        for (id, input) in x {
            let target = y
                .get(&id)
                .cloned()
                .with_context(|| format!("no target volume for input {id:?}"))?;
            pairs.push(TrainingPair { id, input, target });
        }
        return Ok((pairs, json!({ "layout": "pairs" })));
    }
    let hr = read_corpus::<f32>(&a.corpus)?;
    let grid = hr[0].1.dims();
    let cfg = PairConfig {
        degrade: DegradeConfig::uniform(a.frac, a.pf),
        grid,
        window: a.window.unwrap_or([grid[0], grid[1]]),
    };
    let pairs = hr
        .iter()
        .map(|(id, v)| {
            let (input, target) = make_training_pair(v, &cfg)?;
            Ok(TrainingPair {
                id: id.clone(),
                input,
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pairs, json!({ "layout": "high_resolution", "pairs": cfg })))
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<RunManifest> {
    let mut setup = match &a.config {
        Some(p) => TrainingSetup::read(p)?,
        None => TrainingSetup::default(),
    };
    if let Some(s) = seed {
        setup.train.seed = s;
    }
    let (pairs, corpus_info) = load_training_corpus(a)?;
    log::info!("training on {} pairs of {:?}", pairs.len(), pairs[0].input.dims());
    let init = NetworkWeights::init(setup.network, setup.train.seed)?;
    let res = train(
        &pairs,
        init,
        &setup.train,
        &TrainOutputs {
            loss_log: a.log.clone(),
            checkpoint_dir: a.checkpoint_dir.clone(),
        },
    )?;
    write_weights(&a.out, &res.weights)?;
    let mut m = RunManifest::new(
        "train",
        setup.train.seed,
        json!({ "train": setup.train, "network": setup.network, "corpus": corpus_info }),
    );
    m.inputs = pairs.iter().map(|p| p.id.clone()).collect();
    m.add_output(&a.out, show(&a.out))?;
    if let Some(log) = &a.log {
        m.add_output(log, show(log))?;
    }
    for c in &res.checkpoints {
        m.add_output(c, show(c))?;
    }
    Ok(m)
}

fn cmd_infer(a: &InferArgs, seed: u64) -> Result<RunManifest> {
    let weights: NetworkWeights<f32> = read_weights(&a.weights)?;
    let mut timings = BTreeMap::new();
    let mut normalized = Vec::new();
    let jobs = map_volumes(&a.input, &a.out, |id, v| {
        let r = infer(&weights, v)?;
        timings.insert(format!("infer/{id}"), r.seconds);
        if r.normalized_input {
            normalized.push(id.to_string());
        }
        Ok(r.output)
    })?;
    let mut m = RunManifest::new(
        "infer",
        seed,
        json!({ "network": weights.config(), "auto_normalized": normalized }),
    );
    m.inputs.push(show(&a.weights));
    m.timings = timings;
    for (src, dst) in &jobs {
        m.inputs.push(show(src));
        m.add_output(dst, show(dst))?;
    }
    Ok(m)
}

fn cmd_eval(a: &EvalArgs, seed: u64) -> Result<RunManifest> {
    let truth = read_corpus::<f64>(&a.truth)?;
    let test = read_corpus::<f64>(&a.test)?;
    let mut ann = EvalAnnotations::default();
    if let Some(p) = &a.contours {
        ann.contours = contours_by_id(&read_rows(p)?)?;
    }
    if let Some(p) = &a.rois {
        ann.rois = rois_by_id(&read_rows(p)?)?;
    }
    let (ssim_cfg, edge_cfg) = (SsimConfig::default(), EdgeConfig::default());
    let rows = svsr::pipeline::evaluate(&truth, &test, &ann, &ssim_cfg, &edge_cfg)?;
    write_metric_reports(&a.out, &rows)?;
    let mut m = RunManifest::new("eval", seed, json!({ "ssim": ssim_cfg, "edge": edge_cfg }));
    m.inputs = [Some(&a.truth), Some(&a.test), a.contours.as_ref(), a.rois.as_ref()]
        .into_iter()
        .flatten()
        .map(|p| show(p))
        .collect();
    m.add_output(&a.out, show(&a.out))?;
    Ok(m)
}

fn cmd_sweep(a: &SweepArgs, seed: u64) -> Result<RunManifest> {
    let weights: NetworkWeights<f32> = read_weights(&a.weights)?;
    let corpus = read_corpus::<f32>(&a.corpus)?;
    let grid = corpus[0].1.dims();
    let base = PairConfig {
        degrade: DegradeConfig::uniform(0.5, a.pf),
        grid,
        window: [grid[0], grid[1]],
    };
    let volumes: Vec<Volume32> = corpus.into_iter().map(|(_, v)| v).collect();
    let ssim_cfg = SsimConfig::default();
    let report = run_sweep(&weights, &volumes, &base, &ssim_cfg)?;
    report.write_csv(&a.out)?;
    let mut m = RunManifest::new("sweep", seed, json!({ "pairs": base, "ssim": ssim_cfg }));
    m.inputs = vec![show(&a.weights), show(&a.corpus)];
    m.add_output(&a.out, show(&a.out))?;
    Ok(m)
}

fn cmd_stats(a: &StatsArgs, seed: u64) -> Result<RunManifest> {
    let pairs = PairedMeasurements::read_csv(&a.pairs)?;
    let table = a.ratings.as_ref().map(RatingTable::read_csv).transpose()?;
    let report = AgreementReport::compute(&pairs, table.as_ref())?;
    report.write_csv(&a.out)?;
    let mut m = RunManifest::new("stats", seed, json!({ "loa_z": 1.96, "icc": "one-way single-rater" }));
    m.inputs = [Some(&a.pairs), a.ratings.as_ref()]
        .into_iter()
        .flatten()
        .map(|p| show(p))
        .collect();
    m.add_output(&a.out, show(&a.out))?;
    Ok(m)
}

fn cmd_e2e(a: &E2eArgs, seed: Option<u64>) -> Result<RunManifest> {
    let mut cfg = match &a.config {
        Some(p) => E2eConfig::read(p)?,
        None => E2eConfig::desk(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let (manifest, summary) = end_to_end(&cfg, &a.out_dir)?;
    log::info!(
        "SSIM {:.4} -> {:.4}, MSE {:.3e} -> {:.3e}, best sweep fraction {:.1}",
        summary.lr_ssim_mean,
        summary.sr_ssim_mean,
        summary.lr_mse_mean,
        summary.sr_mse_mean,
        summary.best_sweep_fraction
    );
    Ok(manifest)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let start = Instant::now();
    let seed = cli.seed.unwrap_or(0);
    let (manifest, default_path) = match &cli.command {
        Command::Phantom(a) => (cmd_phantom(a, seed)?, default_manifest(&a.out_dir, true)),
        Command::Degrade(a) => (cmd_degrade(a, seed)?, default_manifest(&a.out, a.input.is_dir())),
        Command::Train(a) => (cmd_train(a, cli.seed)?, default_manifest(&a.out, false)),
        Command::Infer(a) => (cmd_infer(a, seed)?, default_manifest(&a.out, a.input.is_dir())),
        Command::Eval(a) => (cmd_eval(a, seed)?, default_manifest(&a.out, false)),
        Command::Sweep(a) => (cmd_sweep(a, seed)?, default_manifest(&a.out, false)),
        Command::Stats(a) => (cmd_stats(a, seed)?, default_manifest(&a.out, false)),
        Command::E2e(a) => (cmd_e2e(a, cli.seed)?, default_manifest(&a.out_dir, true)),
    };
    if let (Command::E2e(a), Some(custom)) = (&cli.command, &cli.manifest) {
        // One manifest per run: drop the copy the library left in the
        // output directory.
        if *custom != default_path {
            fs::remove_file(a.out_dir.join("manifest.json")).ok();
        }
    }
    Run {
        manifest,
        path: cli.manifest.unwrap_or(default_path),
    }
    .finish(start)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
