//! `spotocc`: scene generation, training, inference, benchmarking and
//! ablations for the sparse prototype-guided occupancy decoder.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use spot_core::bench::{emit_report, run_bench, Precision};
use spot_core::decoder::{write_prediction_csv, Decoder};
use spot_core::losses::{write_loss_csv, LossRecord};
use spot_core::metrics::{write_lm_iou_csv, write_metrics_csv};
use spot_core::spotca::Backend;
use spot_core::train::{evaluate, Evaluation, TrainScene, Trainer};
use spot_core::voxel::{generate_scene, load_scene, save_scene, SceneGroundTruth, SparseVoxelGrid};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "spotocc", version, about = "Sparse prototype-guided occupancy decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Floating-point width of the benchmark kernels.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Attention backend for the model and the benchmark.
    #[arg(long, global = true)]
    backend: Option<BackendArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Dense,
    Masked,
    Prototype,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Dense => Backend::Dense,
            BackendArg::Masked => Backend::Masked,
            BackendArg::Prototype => Backend::Prototype,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and write `scene.bin`.
    SceneGen,
    /// Decode a scene and score it against its ground truth.
    Infer {
        /// Scene file; defaults to `data.scene` or a generated scene.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Checkpoint; defaults to freshly initialized parameters.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Train on a single scene, then evaluate on it.
    TrainTiny,
    /// Time the attention backends over the configured sweep.
    Bench,
    /// Train and evaluate the SPOT-CA x DN grid and a rho sweep.
    Ablate,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    if let Some(p) = &cli.precision {
        cfg.bench.precision = if p == "32" { Precision::F32 } else { Precision::F64 };
        if p == "32" && !matches!(cli.command, Command::Bench) {
            bail!("--precision 32 applies to bench only; training and inference run in 64-bit");
        }
    }
    if let Some(b) = cli.backend {
        cfg.model.backend = b.into();
        cfg.bench.backends = vec![b.into()];
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.resolved.toml");
    std::fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
    println!("resolved config: {}", path.display());
    Ok(())
}

fn scene(cfg: &RunConfig, path: Option<&Path>) -> Result<(SparseVoxelGrid, SceneGroundTruth)> {
    let (grid, gt) = match path.or(cfg.data.scene.as_deref()) {
        Some(p) => load_scene(p).with_context(|| format!("loading scene {}", p.display()))?,
        None => generate_scene(&cfg.scene_spec())?,
    };
    if grid.channels() != cfg.model.channels {
        bail!(
            "scene has {} feature channels but model.channels = {}",
            grid.channels(),
            cfg.model.channels
        );
    }
    Ok((grid, gt))
}

fn decoder(cfg: &RunConfig, gt: &SceneGroundTruth) -> Result<Decoder> {
    let mut model = cfg.model.clone();
    model.n_classes = gt.n_classes as usize;
    Ok(Decoder::new(model, cfg.seed)?)
}

fn write_eval(dir: &Path, eval: &Evaluation) -> Result<()> {
    write_metrics_csv(create(&dir.join("metrics.csv"))?, &eval.confusion)?;
    write_lm_iou_csv(create(&dir.join("lm_iou.csv"))?, &eval.lm_iou)?;
    Ok(())
}

fn scene_gen(cfg: &RunConfig) -> Result<()> {
    let (grid, gt) = generate_scene(&cfg.scene_spec())?;
    let path = cfg.output.dir.join("scene.bin");
    save_scene(&path, &grid, &gt).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "scene: {} ({} voxels, {} objects)",
        path.display(),
        grid.nv(),
        gt.objects.len()
    );
    Ok(())
}

fn infer(cfg: &RunConfig, scene_path: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    let (grid, gt) = scene(cfg, scene_path)?;
    let mut dec = decoder(cfg, &gt)?;
    if let Some(p) = ckpt {
        dec.params
            .load(p)
            .with_context(|| format!("loading checkpoint {}", p.display()))?;
    }
    let levels = dec.cfg.pyramid_levels;
    let eval = evaluate(&dec, &TrainScene::new(&grid, gt, levels))?;
    let dir = &cfg.output.dir;
    write_prediction_csv(create(&dir.join("predictions.csv"))?, &grid, &eval.labels)?;
    write_eval(dir, &eval)?;
    println!("miou {:.6}", eval.miou());
    Ok(())
}

struct TrainedRun {
    trainer: Trainer,
    scene: TrainScene,
    losses: Vec<LossRecord>,
}

fn train_run(cfg: &RunConfig, grid: &SparseVoxelGrid, gt: &SceneGroundTruth) -> Result<TrainedRun> {
    let dec = decoder(cfg, gt)?;
    let scene = TrainScene::new(grid, gt.clone(), dec.cfg.pyramid_levels);
    let mut trainer = Trainer::new(dec, cfg.dn.clone(), cfg.loss.clone(), cfg.train.clone(), cfg.seed)?;
    let losses = trainer.run(&scene)?;
    Ok(TrainedRun { trainer, scene, losses })
}

fn train_tiny(cfg: &RunConfig) -> Result<()> {
    let (grid, gt) = scene(cfg, None)?;
    let TrainedRun { trainer, scene, losses } = train_run(cfg, &grid, &gt)?;
    let dir = &cfg.output.dir;
    write_loss_csv(create(&dir.join("loss.csv"))?, &losses)?;
    trainer.decoder.params.save(dir.join("checkpoint.bin"))?;
    let eval = evaluate(&trainer.decoder, &scene)?;
    write_eval(dir, &eval)?;
    println!("trained {} steps, miou {:.6}", trainer.steps_taken(), eval.miou());
    Ok(())
}

fn bench(cfg: &RunConfig) -> Result<()> {
    let mut bc = cfg.bench.clone();
    bc.seed = cfg.seed;
    let records = run_bench(&bc)?;
    emit_report(&records, &cfg.output.dir)?;
    for r in &records {
        println!(
            "{:>9} Nv={:<7} rho={:<5} median {:>12.1} us  post-scoring {:>12.1} us",
            r.backend.name(),
            r.nv,
            r.rho,
            r.median_us,
            r.post_scoring_median_us
        );
    }
    Ok(())
}

fn median_latency_us(dec: &Decoder, scene: &TrainScene, repeats: usize) -> Result<f64> {
    let mut t = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        dec.infer(&scene.pyramid)?;
        t.push(start.elapsed().as_secs_f64() * 1e6);
    }
    t.sort_by(f64::total_cmp);
    let n = t.len();
    Ok(if n % 2 == 1 {
        t[n / 2]
    } else {
        0.5 * (t[n / 2 - 1] + t[n / 2])
    })
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let (grid, gt) = scene(cfg, None)?;
    let mut variants = Vec::new();
    for (spot, dn) in [(true, true), (true, false), (false, true), (false, false)] {
        let mut c = cfg.clone();
        c.model.backend = if spot { Backend::Prototype } else { Backend::Masked };
        c.dn.enabled = dn;
        variants.push(c);
    }
    for &rho in &cfg.ablate.rho {
        let mut c = cfg.clone();
        c.model.backend = Backend::Prototype;
        c.model.rho = rho;
        variants.push(c);
    }
    // Training runs are independent and seeded, so they can overlap;
    // latency is measured afterwards, one model at a time.
    let trained: Vec<Result<TrainedRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = variants.iter().map(|c| s.spawn(|| train_run(c, &grid, &gt))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    let mut rows = Vec::new();
    for run in trained {
        let TrainedRun { trainer, scene, .. } = run?;
        let miou = evaluate(&trainer.decoder, &scene)?.miou();
        let latency = median_latency_us(&trainer.decoder, &scene, cfg.ablate.latency_repeats)?;
        rows.push((miou, latency));
    }

    let dir = &cfg.output.dir;
    let mut w = create(&dir.join("ablation.csv"))?;
    writeln!(w, "spot_ca,dn,miou,median_us")?;
    println!("{:<8} {:<4} {:>8} {:>14}", "SPOT-CA", "DN", "mIoU", "median_us");
    for (c, (miou, lat)) in variants.iter().zip(&rows).take(4) {
        let spot = if c.model.backend == Backend::Prototype {
            "on"
        } else {
            "off"
        };
        let dn = if c.dn.enabled { "on" } else { "off" };
        writeln!(w, "{spot},{dn},{miou:.6},{lat:.1}")?;
        println!("{spot:<8} {dn:<4} {miou:>8.4} {lat:>14.1}");
    }
    w.flush()?;
    let mut w = create(&dir.join("rho_sweep.csv"))?;
    writeln!(w, "rho,miou,median_us")?;
    println!("{:<8} {:>8} {:>14}", "rho", "mIoU", "median_us");
    for (c, (miou, lat)) in variants.iter().zip(&rows).skip(4) {
        writeln!(w, "{},{miou:.6},{lat:.1}", c.model.rho)?;
        println!("{:<8} {miou:>8.4} {lat:>14.1}", c.model.rho);
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    prepare_output(&cfg)?;
    match &cli.command {
        Command::SceneGen => scene_gen(&cfg),
        Command::Infer { scene, ckpt } => infer(&cfg, scene.as_deref(), ckpt.as_deref()),
        Command::TrainTiny => train_tiny(&cfg),
        Command::Bench => bench(&cfg),
        Command::Ablate => ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("spotocc: error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("spotocc: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
