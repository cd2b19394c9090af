//! The `ulda` command line.

pub mod config;
pub mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::autodiff::Fault;
use crate::data::io::{load_dataset, write_png_gray, write_png_preview, KSPACE_PREFIX, MASK_STEM, TRUTH_PREFIX};
use crate::data::metrics::{normalized_metrics, psnr, ssim, MetricEntry, MetricReport};
use crate::error::{Error, Result};
use crate::mri::{make_cartesian_mask, CartesianMask, Measurement};
use crate::network::model_file::{ModelFile, Role};
use crate::network::{ExtractorParams, QNet, SmoothedRelu};
use crate::selfcheck::{run_all, SelfcheckOptions};
use crate::solver::{solve, SolverTrace};
use crate::tensor::ctf::{load_image, save_image};
use crate::tensor::ComplexImage;
use crate::training::unrolled::TaskParams;
use crate::training::{save_extractor, save_task, staged_training, train_step1, train_step2, TaskBundle, TrainOutputs};
use config::RunConfig;

pub const EXIT_USER: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;

pub const EXTRACTOR_FILE: &str = "extractor.ulda";
pub const ADAPTER_FILE: &str = "adapter.ulda";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const RECON_PREFIX: &str = "recon_";
pub const TRACE_PREFIX: &str = "trace_";

#[derive(Debug, Parser)]
#[command(name = "ulda", version, about = "Learnable descent MRI reconstruction with transferable regularizers")]
pub struct Cli {
    /// TOML configuration with [solver], [train], [mask], [data] and [metrics] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides every seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "ULDA_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes phantoms, masks and measurements of the configured scenario.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes one Cartesian mask from the [mask] section.
    MakeMask {
        #[arg(long)]
        out: PathBuf,
    },
    /// Step 1: trains the shared extractor and one adapter per source dataset.
    TrainBase {
        /// Dataset directory, or a directory of dataset directories. Repeatable.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Step 2: trains an adapter for a new task with the extractor frozen.
    TrainAdapter {
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Runs the augmentation curriculum of [train].stages.
        #[arg(long)]
        staged: bool,
        /// Warm start from an existing adapter file.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Reconstructs measurements (kspace_*.ctf files or dataset directories).
    Reconstruct {
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Scores reconstructions against ground truth.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// JSON report; a text table goes next to it with extension .txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the gradient and invariant checks.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Parses `args`, runs the command and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USER })
        }
    }
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.override_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    set_threads(cli.threads)?;
    let mut cfg = resolve_config(&cli)?;
    match cli.command {
        Command::GenData { out } => {
            cfg.echo(&out)?;
            let m = scenario::gen_data(&cfg.data, &out)?;
            println!(
                "wrote {} sets ({} files) to {}",
                m.sets.len(),
                m.sets.iter().map(|s| s.files.len()).sum::<usize>(),
                out.display()
            );
        }
        Command::MakeMask { out } => {
            cfg.echo(&out)?;
            let mask = make_cartesian_mask(cfg.mask.size, cfg.mask.ratio, cfg.mask.seed)?;
            mask.save(&out, MASK_STEM)?;
            let n = mask.height();
            let flags = mask.row_flags();
            let px: Vec<f64> = (0..n * n).map(|i| if flags[i / n] { 1.0 } else { 0.0 }).collect();
            write_png_gray(&px, n, n, false, out.join(format!("{MASK_STEM}.png")))?;
            println!("{} of {n} rows sampled (ratio {:.3})", mask.count(), mask.ratio());
        }
        Command::TrainBase { data, out } => {
            cfg.echo(&out)?;
            let mut sets = Vec::new();
            for d in &data {
                sets.extend(dataset_dirs(d)?);
            }
            let tasks = sets
                .iter()
                .map(|(name, dir)| TaskBundle::from_samples(name.clone(), load_dataset(dir)?))
                .collect::<Result<Vec<_>>>()?;
            let outputs = train_outputs(&out, &cfg);
            let res = train_step1(&tasks, &cfg.train, &cfg.solver, &outputs)?;
            save_extractor(&out.join(EXTRACTOR_FILE), &res.extractor, &cfg.train)?;
            for (t, p) in tasks.iter().zip(&res.tasks) {
                save_task(&out.join(format!("adapter_{}.ulda", t.name)), p, &cfg.train)?;
            }
            println!(
                "trained on {} datasets; extractor {} parameters",
                tasks.len(),
                res.extractor.param_count()
            );
        }
        Command::TrainAdapter {
            extractor,
            task,
            out,
            staged,
            init,
        } => {
            let (ext, delta) = load_extractor(&extractor)?;
            if delta != cfg.train.delta {
                log::warn!("using the extractor's activation width {delta} instead of {}", cfg.train.delta);
                cfg.train.delta = delta;
            }
            let init = match &init {
                Some(p) => Some(load_task(p, &cfg)?.0),
                None => None,
            };
            cfg.echo(&out)?;
            let name = task
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "task".into());
            let bundle = TaskBundle::from_samples(name, load_dataset(&task)?)?;
            let outputs = train_outputs(&out, &cfg);
            let (params, history) = if staged {
                staged_training(&bundle, &ext, init, &cfg.train, &cfg.solver, &outputs)?
            } else {
                train_step2(&bundle, &ext, init, &cfg.train, &cfg.solver, &outputs)?
            };
            save_task(&out.join(ADAPTER_FILE), &params, &cfg.train)?;
            if let Some(last) = history.last() {
                println!("final train PSNR {:.2} dB after {} epochs", last.mean_psnr_train, history.len());
            }
        }
        Command::Reconstruct {
            extractor,
            adapter,
            out,
            inputs,
        } => {
            let (ext, delta) = load_extractor(&extractor)?;
            let (task, adelta) = load_task(&adapter, &cfg)?;
            if adelta != delta {
                log::warn!("adapter activation width {adelta} differs from the extractor's {delta}");
            }
            if cfg.solver.max_iters.is_none() {
                cfg.solver.max_iters = Some(task.phases());
            }
            cfg.echo(&out)?;
            let jobs = collect_measurements(&inputs)?;
            let act = SmoothedRelu::new(delta)?;
            let net = QNet::new(&ext, &task.adapter, act);
            let steps = task.steps();
            let results: Vec<Result<()>> = jobs
                .par_iter()
                .map(|(stem, m)| {
                    let trace_path = out.join(format!("{TRACE_PREFIX}{stem}.jsonl"));
                    match solve(m, &net, None, &cfg.solver, Some(&steps)) {
                        Ok((x, trace)) => {
                            trace.save_jsonl(&trace_path)?;
                            save_image(&x, out.join(format!("{RECON_PREFIX}{stem}.ctf")))?;
                            write_png_preview(&x, out.join(format!("{RECON_PREFIX}{stem}.png")))
                        }
                        Err(e) => {
                            if let Some(t) = solver_trace(&e) {
                                t.save_jsonl(&trace_path)?;
                            }
                            Err(e)
                        }
                    }
                })
                .collect();
            let failed: Vec<&Error> = results.iter().filter_map(|r| r.as_ref().err()).collect();
            for e in &failed {
                eprintln!("error: {e}");
            }
            println!("reconstructed {} of {}", jobs.len() - failed.len(), jobs.len());
            if let Some(e) = failed.first() {
                let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USER };
                return Ok(ExitCode::from(code));
            }
        }
        Command::Evaluate { recon, truth, out } => {
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                cfg.echo(dir)?;
            } else {
                cfg.echo(Path::new("."))?;
            }
            let report = evaluate_dirs(&recon, &truth, cfg.metrics.normalize)?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            std::fs::write(&out, json).map_err(|e| Error::io(&out, e))?;
            let table = report.to_table();
            let tpath = out.with_extension("txt");
            std::fs::write(&tpath, &table).map_err(|e| Error::io(&tpath, e))?;
            print!("{table}");
        }
        Command::Selfcheck { inject_fault } => {
            let fault = inject_fault.as_deref().map(str::parse::<Fault>).transpose()?;
            let opts = SelfcheckOptions {
                seed: cli.seed.unwrap_or(0),
                fault,
                ..Default::default()
            };
            let checks = run_all(&opts);
            for c in &checks {
                println!("{c}");
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            if !failed.is_empty() {
                eprintln!("selfcheck failed: {}", failed.join(", "));
                return Ok(ExitCode::from(EXIT_NUMERICAL));
            }
            println!("selfcheck passed");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn train_outputs(out: &Path, cfg: &RunConfig) -> TrainOutputs {
    TrainOutputs {
        history_path: Some(out.join(HISTORY_FILE)),
        checkpoint_dir: (cfg.train.checkpoint_every > 0).then(|| out.join("checkpoints")),
    }
}

fn is_dataset(dir: &Path) -> bool {
    dir.join(format!("{MASK_STEM}.ctf")).is_file()
}

/// `(name, dir)` of `path` itself or of its dataset subdirectories.
fn dataset_dirs(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let name = |p: &Path| {
        p.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into())
    };
    if is_dataset(path) {
        return Ok(vec![(name(path), path.to_path_buf())]);
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_dataset(p))
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no dataset", path.display())));
    }
    Ok(subs.into_iter().map(|p| (name(&p), p)).collect())
}

fn load_model(path: &Path, role: Role) -> Result<ModelFile> {
    let f = ModelFile::load(path)?;
    if f.role != role {
        return Err(Error::format(path, format!("expected a {role:?} file, found {:?}", f.role)));
    }
    Ok(f)
}

fn load_extractor(path: &Path) -> Result<(ExtractorParams, f64)> {
    let f = load_model(path, Role::Extractor)?;
    Ok((ExtractorParams::from_bundle(&f.params)?, f.delta))
}

fn load_task(path: &Path, cfg: &RunConfig) -> Result<(TaskParams, f64)> {
    let f = load_model(path, Role::Adapter)?;
    let t = TaskParams::from_bundle(&f.params, cfg.train.phases, cfg.train.step_init)?;
    Ok((t, f.delta))
}

fn solver_trace(e: &Error) -> Option<&SolverTrace> {
    match e {
        Error::LineSearchExhausted { trace, .. } | Error::Diverged { trace, .. } => Some(trace),
        _ => None,
    }
}

/// `(stem, measurement)` for each k-space file, sorted per input. The mask
/// is read from the file's directory.
fn collect_measurements(inputs: &[PathBuf]) -> Result<Vec<(String, Measurement)>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut v: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "ctf")
                        && f.file_name().is_some_and(|n| n.to_string_lossy().starts_with(KSPACE_PREFIX))
                })
                .collect();
            v.sort();
            if v.is_empty() {
                return Err(Error::InvalidArgument(format!("no {KSPACE_PREFIX}*.ctf in {}", p.display())));
            }
            files.extend(v);
        } else {
            files.push(p.clone());
        }
    }
    let mut masks: Vec<(PathBuf, CartesianMask)> = Vec::new();
    let mut out = Vec::new();
    for f in files {
        let dir = f.parent().map(Path::to_path_buf).unwrap_or_default();
        let mask = match masks.iter().find(|(d, _)| *d == dir) {
            Some((_, m)) => m.clone(),
            None => {
                let m = CartesianMask::load(&dir, MASK_STEM)?;
                masks.push((dir.clone(), m.clone()));
                m
            }
        };
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let stem = stem.strip_prefix(KSPACE_PREFIX).unwrap_or(&stem).to_string();
        out.push((stem, Measurement::new(load_image(&f)?, mask, 0.0)?));
    }
    Ok(out)
}

/// Pairs `recon_X.ctf` of `recon` with `truth_X` of `truth`.
pub fn evaluate_dirs(recon: &Path, truth: &Path, normalize: bool) -> Result<MetricReport> {
    let mut recons: Vec<(String, ComplexImage)> = Vec::new();
    let entries = std::fs::read_dir(recon).map_err(|e| Error::io(recon, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if let (Some(key), Some("ctf")) = (stem.strip_prefix(RECON_PREFIX), p.extension().and_then(|e| e.to_str())) {
            recons.push((key.to_string(), load_image(&p)?));
        }
    }
    let truths: Vec<(String, ComplexImage)> = load_dataset(truth)?
        .into_iter()
        .map(|s| (s.name.strip_prefix(TRUTH_PREFIX).unwrap_or(&s.name).to_string(), s.image))
        .collect();
    if recons.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstructions but {} ground-truth images",
            recons.len(),
            truths.len()
        )));
    }
    let mut entries = Vec::with_capacity(truths.len());
    for ((rk, r), (tk, t)) in recons.iter().zip(&truths) {
        if rk != tk {
            return Err(Error::InvalidArgument(format!("reconstruction '{rk}' has no truth (found '{tk}')")));
        }
        let (p, s) = if normalize {
            normalized_metrics(t, r)?
        } else {
            (psnr(t, r)?, ssim(t, r)?)
        };
        entries.push(MetricEntry {
            name: tk.clone(),
            psnr: p,
            ssim: s,
        });
    }
    Ok(MetricReport::from_entries(entries))
}
