use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use forgeloc::checkpoint;
use forgeloc::checks::{auc_checks, dssim_checks, grad_checks, roundtrip_checks, CheckResult};
use forgeloc::config::Config;
use forgeloc::dssim::gt_map_for_sample;
use forgeloc::error::{Error, Result};
use forgeloc::experiment::{run_ablation, run_pipeline, train_stage, AblationKind, PipelineOptions};
use forgeloc::imageio::{read_ppm, write_pgm};
use forgeloc::metrics::{auc, localization_report, read_scores, write_metrics, write_scores, MetricReport, ScoredSample};
use forgeloc::nets::Model;
use forgeloc::synth::{build_dataset, load_map, load_samples, read_manifest, save_map};
use forgeloc::train::{detector_features, detector_scores, fusion_scores, generate_maps, map_seed, write_timings, StageId, TrainData};
use forgeloc::Tensor;

/// Forgery-artifact localization with conditional diffusion on synthetic data.
///
/// All randomness derives from `--seed` through named streams: `data/*`
/// (synthesis), `init/*` (parameters), `shuffle/<stage>` (batch order),
/// `diffusion-t` (training timesteps and noise) and `sampling` (map generation).
#[derive(Parser, Debug)]
#[command(name = "forgeloc", version)]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (1 gives bit-exact reruns; default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Sectioned key = value config file (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<Config> {
        match &self.config {
            Some(p) => Config::load(p),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the train and test splits: images, masks, GT maps, manifests.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the GT DSSIM maps of a manifest from its image pairs.
    GtMaps {
        #[command(flatten)]
        config: ConfigArg,
        /// Manifest CSV.
        #[arg(long)]
        data: PathBuf,
        /// Compare against the stored maps instead of overwriting them.
        #[arg(long)]
        verify: bool,
    },
    /// Train one stage and write its checkpoint and loss curves.
    Train {
        /// Stage to train.
        #[arg(value_enum)]
        stage: StageArg,
        #[command(flatten)]
        config: ConfigArg,
        /// Training manifest CSV.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from (required after the detector stage).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Generate DSSIM maps with the diffusion sampler for every sample of a manifest.
    SampleMaps {
        #[command(flatten)]
        config: ConfigArg,
        /// Manifest CSV.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint with detector, projectors and U-Net.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for `<id>_map.dfft`, `<id>_map.pgm` and the localization report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate detection scores or generated maps.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Run an ablation grid and write its comparison CSV.
    Ablate {
        #[arg(value_enum)]
        kind: AblationArg,
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize, train every stage and evaluate in one run.
    Pipeline {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also train and evaluate the direct-regression baseline.
        #[arg(long)]
        regression: bool,
    },
    /// Run a self-check suite against reference computations.
    Check {
        #[arg(value_enum)]
        suite: Suite,
        /// Randomized trials per layer kind for `grad`.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// AUC of a score CSV (`id,label,score[,group_id]`).
    Detect {
        #[arg(long)]
        scores: PathBuf,
        /// Average scores per group before ranking.
        #[arg(long)]
        group_average: bool,
        /// Also score a manifest with a full checkpoint and write the scores here.
        #[arg(long, requires_all = ["checkpoint", "data"])]
        write: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        /// Metric CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PSNR/SSIM of generated maps (from `sample-maps`) against the GT maps of a manifest.
    Localize {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `<id>_map.dfft` files.
        #[arg(long)]
        maps: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Per-sample CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Detector,
    Diffusion,
    Fusion,
    Regression,
    SingleStage,
}

impl From<StageArg> for StageId {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Detector => StageId::Detector,
            StageArg::Diffusion => StageId::Diffusion,
            StageArg::Fusion => StageId::Fusion,
            StageArg::Regression => StageId::Regression,
            StageArg::SingleStage => StageId::SingleStage,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    Fusion,
    Steps,
    Seed,
    Strategy,
    Conditioning,
    GtFusion,
    RegressionVsDiffusion,
}

impl From<AblationArg> for AblationKind {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Fusion => AblationKind::Fusion,
            AblationArg::Steps => AblationKind::Steps,
            AblationArg::Seed => AblationKind::Seed,
            AblationArg::Strategy => AblationKind::Strategy,
            AblationArg::Conditioning => AblationKind::Conditioning,
            AblationArg::GtFusion => AblationKind::GtFusion,
            AblationArg::RegressionVsDiffusion => AblationKind::RegressionVsDiffusion,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    /// Finite-difference gradients of every layer kind.
    Grad,
    /// Forward noising then reverse step; schedule endpoints.
    Roundtrip,
    /// DSSIM against the window loop; AUC against pair counting.
    Oracle,
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_config(dir: &Path, cfg: &Config) -> Result<()> {
    let p = dir.join("config.toml");
    fs::write(&p, cfg.canonical()).map_err(|e| Error::io(&p, e))
}

fn model_and_params(cfg: &Config, ckpt: &Path) -> Result<(Model, forgeloc::Params32)> {
    Ok((Model::new(cfg.model.clone())?, checkpoint::load(ckpt)?))
}

fn scored(data: &TrainData<f32>, scores: &[f64]) -> Vec<ScoredSample> {
    (0..data.len())
        .map(|i| ScoredSample { id: data.ids[i], group_id: data.group_ids[i], label: data.labels[i], score: scores[i] })
        .collect()
}

fn gt_maps(cfg: &Config, manifest: &Path, verify: bool) -> Result<()> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let rows = read_manifest(manifest)?;
    let mut worst = 0.0f32;
    for r in &rows {
        let real = read_ppm(&dir.join(&r.real_path))?;
        let fake = r.fake_path.as_ref().map(|p| read_ppm(&dir.join(p))).transpose()?;
        let map = gt_map_for_sample(&real, fake.as_ref(), &cfg.data.dssim)?.values;
        let path = dir.join(&r.map_path);
        if verify {
            worst = worst.max(load_map(&path)?.max_abs_diff(&map)?);
        } else {
            save_map(&path, &map)?;
            write_pgm(&path.with_extension("pgm"), &map)?;
        }
    }
    if verify {
        println!("verified {} maps, max abs diff {worst:.3e}", rows.len());
        if worst > 1e-6 {
            return Err(Error::Format(format!("stored maps differ from recomputed maps by up to {worst}")));
        }
    } else {
        println!("wrote {} maps", rows.len());
    }
    Ok(())
}

fn train(seed: u64, stage: StageId, cfg: &Config, data: &Path, out: &Path, from: Option<&Path>) -> Result<()> {
    mkdir(out)?;
    write_config(out, cfg)?;
    let data = TrainData::new(&load_samples(data)?)?;
    let init = from.map(checkpoint::load).transpose()?;
    let (params, mut record) = train_stage(cfg, stage, &data, init, seed)?;
    let ckpt = out.join(format!("{stage}.ckpt"));
    checkpoint::save(&ckpt, &params)?;
    record.write_csv(&out.join(format!("train_{stage}.csv")))?;
    record.checkpoint = Some(ckpt.clone());
    write_timings(&out.join(format!("timing_{stage}.csv")), std::slice::from_ref(&record))?;
    println!("{stage}: final loss {:.6}, checkpoint {}", record.losses().last().copied().unwrap_or(f64::NAN), ckpt.display());
    Ok(())
}

fn sample_maps(seed: u64, cfg: &Config, data: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    mkdir(out)?;
    write_config(out, cfg)?;
    let (model, params) = model_and_params(cfg, ckpt)?;
    let data = TrainData::new(&load_samples(data)?)?;
    let pyramids = detector_features(&model, &params, &data.images, cfg.eval.batch_size)?;
    let seeds: Vec<u64> = data.ids.iter().map(|&id| map_seed(seed, id, 0)).collect();
    let maps = generate_maps(&model, &params, &pyramids, &seeds, &cfg.schedule()?, cfg.diffusion.sampler, cfg.diffusion.sample_batch)?;
    let mut flat = Vec::with_capacity(maps.len());
    for (id, m) in data.ids.iter().zip(maps) {
        let (h, w) = (m.shape()[2], m.shape()[3]);
        let m = m.reshape(&[h, w])?;
        save_map(&out.join(format!("{id:05}_map.dfft")), &m)?;
        write_pgm(&out.join(format!("{id:05}_map.pgm")), &m)?;
        flat.push(m);
    }
    let gt = gt_of(&data)?;
    let report = localization_report(&data.ids, &flat, &gt, "sampled", cfg.hash())?;
    report.write_csv(&out.join("localization.csv"))?;
    let (pm, _, inf) = report.psnr_summary();
    println!("{} maps, PSNR {pm:.4} dB ({inf} exact), SSIM {:.4}", flat.len(), report.ssim_summary().0);
    Ok(())
}

fn gt_of(data: &TrainData<f32>) -> Result<Vec<Tensor<f32>>> {
    data.maps
        .iter()
        .map(|m| {
            let (h, w) = (m.shape()[2], m.shape()[3]);
            m.clone().reshape(&[h, w])
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn eval_detect(
    seed: u64,
    cfg: &Config,
    scores: &Path,
    group_average: bool,
    write: bool,
    ckpt: Option<&Path>,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    if write {
        let (model, params) = model_and_params(cfg, ckpt.expect("required by clap"))?;
        let data = TrainData::new(&load_samples(data.expect("required by clap"))?)?;
        let batch = cfg.eval.batch_size;
        let pyramids = detector_features(&model, &params, &data.images, batch)?;
        let seeds: Vec<u64> = data.ids.iter().map(|&id| map_seed(seed, id, 0)).collect();
        let maps = generate_maps(&model, &params, &pyramids, &seeds, &cfg.schedule()?, cfg.diffusion.sampler, cfg.diffusion.sample_batch)?;
        let fused = fusion_scores(&model, &params, &maps, &pyramids, batch)?;
        write_scores(scores, &scored(&data, &fused))?;
        let det = detector_scores(&model, &params, &data.images, batch)?;
        write_scores(&scores.with_extension("detector.csv"), &scored(&data, &det))?;
    }
    let samples = read_scores(scores)?;
    let value = auc(&samples, group_average)?;
    println!("AUC {value:.6}");
    if let Some(out) = out {
        let split = if group_average { "group-average" } else { "sample" };
        write_metrics(out, &[MetricReport::new("auc", split, cfg.hash(), value)])?;
    }
    Ok(())
}

fn eval_localize(cfg: &Config, data: &Path, maps: &Path, out: Option<&Path>) -> Result<()> {
    let data = TrainData::<f32>::new(&load_samples(data)?)?;
    let generated = data.ids.iter().map(|id| load_map(&maps.join(format!("{id:05}_map.dfft")))).collect::<Result<Vec<_>>>()?;
    let report = localization_report(&data.ids, &generated, &gt_of(&data)?, "eval", cfg.hash())?;
    for m in report.metrics() {
        println!("{} {}", m.metric, forgeloc::metrics::fmt_value(m.value));
    }
    if let Some(out) = out {
        report.write_csv(out)?;
    }
    Ok(())
}

fn print_checks(results: &[CheckResult]) -> Result<()> {
    for r in results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(Error::InvalidParam(format!("{n} check(s) failed"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = config.load()?;
            let files = build_dataset(&cfg.data, seed, &out)?;
            write_config(&out, &cfg)?;
            println!("wrote {} and {}", files.train_manifest.display(), files.test_manifest.display());
            Ok(())
        }
        Command::GtMaps { config, data, verify } => gt_maps(&config.load()?, &data, verify),
        Command::Train { stage, config, data, out, from } => train(seed, stage.into(), &config.load()?, &data, &out, from.as_deref()),
        Command::SampleMaps { config, data, checkpoint, out } => sample_maps(seed, &config.load()?, &data, &checkpoint, &out),
        Command::Eval { what } => match what {
            EvalCommand::Detect { scores, group_average, write, checkpoint, data, config, out } => {
                eval_detect(seed, &config.load()?, &scores, group_average, write, checkpoint.as_deref(), data.as_deref(), out.as_deref())
            }
            EvalCommand::Localize { data, maps, config, out } => eval_localize(&config.load()?, &data, &maps, out.as_deref()),
        },
        Command::Ablate { kind, config, out } => {
            let cfg = config.load()?;
            let kind: AblationKind = kind.into();
            let rows = run_ablation(kind, &cfg, seed, Some(&out))?;
            for r in &rows {
                let cols: Vec<String> = r.values.iter().map(|(m, v)| format!("{m}={}", forgeloc::metrics::fmt_value(*v))).collect();
                println!("{kind} {}: {}", r.cell, cols.join(" "));
            }
            Ok(())
        }
        Command::Pipeline { config, out, regression } => {
            let cfg = config.load()?;
            let outcome = run_pipeline(&cfg, seed, &out, PipelineOptions { regression })?;
            for m in &outcome.metrics {
                println!("{} {} {}", m.metric, m.split, forgeloc::metrics::fmt_value(m.value));
            }
            Ok(())
        }
        Command::Check { suite, trials } => {
            let results = match suite {
                Suite::Grad => grad_checks(trials, seed)?,
                Suite::Roundtrip => {
                    let cfg = Config::default();
                    roundtrip_checks(cfg.diffusion.steps, cfg.diffusion.beta_start, cfg.diffusion.beta_end, seed)?
                }
                Suite::Oracle => {
                    let mut r = dssim_checks(200, seed)?;
                    r.extend(auc_checks(1000, seed)?);
                    r
                }
            };
            print_checks(&results)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
