//! Training the unrolled network: the two-step transfer scheme (shared
//! extractor with per-task adapters, then adapter-only training on a new
//! task) and the staged augmentation curriculum.

pub mod adam;
pub mod unrolled;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use unrolled::{
    phase_config, record_loss, sample_gradient, training_loss, unrolled_forward, unrolled_tape,
    Learn, SampleGrad, TapeWorkspace, TaskParams, Unrolled,
};

use crate::data::io::Sample;
use crate::data::metrics::normalized_metrics;
use crate::error::{Error, Result};
use crate::mri::{artificial_undersample, Measurement};
use crate::network::model_file::{ModelFile, Role};
use crate::network::params::ParamBundle;
use crate::network::{AdapterParams, ExtractorParams, InitScheme, SmoothedRelu};
use crate::solver::SolverConfig;
use crate::tensor::{substream, ComplexImage};

/// One step of the augmentation curriculum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Stage {
    /// Every measurement further halved with this seed.
    Augmented {
        seed: u64,
    },
    Original,
}

impl Stage {
    fn label(&self, index: usize) -> String {
        match self {
            Stage::Augmented { seed } => format!("stage{}:augmented-{seed}", index + 1),
            Stage::Original => format!("stage{}:original", index + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Phase count `T`.
    #[serde(rename = "T", alias = "t")]
    pub phases: usize,
    pub alpha_ssim: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Epochs of per-dataset extractor pre-training before joint training.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub learn_extractor: bool,
    pub learn_adapters: bool,
    pub learn_steps: bool,
    /// Initial `alpha_t` and `beta_t`.
    pub step_init: f64,
    /// Smoothing width of the activation.
    pub delta: f64,
    pub init: InitScheme,
    /// Write model checkpoints every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phases: 15,
            alpha_ssim: 0.01,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            pretrain_epochs: 5,
            batch_size: 4,
            seed: 0,
            stages: vec![
                Stage::Augmented { seed: 1 },
                Stage::Augmented { seed: 2 },
                Stage::Original,
            ],
            learn_extractor: true,
            learn_adapters: true,
            learn_steps: true,
            step_init: 0.1,
            delta: crate::network::activation::DEFAULT_DELTA,
            init: InitScheme::GlorotLike,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.phases == 0 {
            return bad("T must be at least 1".into());
        }
        if !(self.alpha_ssim >= 0.0 && self.alpha_ssim.is_finite()) {
            return bad(format!(
                "alpha_ssim = {} must be nonnegative",
                self.alpha_ssim
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            ));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} = {v} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps = {} must be positive", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.step_init > 0.0 && self.step_init.is_finite()) {
            return bad(format!("step_init = {} must be positive", self.step_init));
        }
        SmoothedRelu::new(self.delta).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn activation(&self) -> SmoothedRelu {
        SmoothedRelu::new(self.delta).expect("validated")
    }

    pub fn learn(&self) -> Learn {
        Learn {
            extractor: self.learn_extractor,
            adapter: self.learn_adapters,
            steps: self.learn_steps,
        }
    }

    pub fn initial_task(&self, adapter: AdapterParams) -> TaskParams {
        TaskParams::new(adapter, self.phases, self.step_init)
    }
}

/// A measurement with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub name: String,
    pub measurement: Measurement,
    pub truth: ComplexImage,
}

/// The training pairs of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBundle {
    pub name: String,
    pub samples: Vec<TrainSample>,
}

impl TaskBundle {
    pub fn new(name: impl Into<String>, samples: Vec<TrainSample>) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "task '{name}' has no samples"
            )));
        }
        for s in &samples {
            if s.truth.shape() != s.measurement.shape() {
                return Err(Error::Shape(format!(
                    "sample '{}': truth {:?} vs measurement {:?}",
                    s.name,
                    s.truth.shape(),
                    s.measurement.shape()
                )));
            }
        }
        Ok(TaskBundle { name, samples })
    }

    /// Pairs loaded samples; every one must carry a measurement.
    pub fn from_samples(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let name = name.into();
        let pairs = samples
            .into_iter()
            .map(|s| match s.measurement {
                Some(m) => Ok(TrainSample {
                    name: s.name,
                    measurement: m,
                    truth: s.image,
                }),
                None => Err(Error::InvalidArgument(format!(
                    "sample '{}' in task '{name}' has no measurement",
                    s.name
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, pairs)
    }

    /// The same task with every measurement further halved.
    pub fn augmented(&self, seed: u64) -> Result<TaskBundle> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(TrainSample {
                    name: s.name.clone(),
                    measurement: artificial_undersample(&s.measurement, seed)?,
                    truth: s.truth.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskBundle {
            name: format!("{}+aug{seed}", self.name),
            samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub stage: String,
    pub mean_loss: f64,
    pub mean_psnr_train: f64,
    pub wall_s: f64,
}

/// Where training writes its side outputs. History lines are appended as
/// they are produced so a failed run keeps them.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub history_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

struct Recorder<'a> {
    out: &'a TrainOutputs,
    history: Vec<HistoryRecord>,
    start: Instant,
}

impl<'a> Recorder<'a> {
    fn new(out: &'a TrainOutputs) -> Result<Self> {
        if let Some(p) = &out.history_path {
            std::fs::write(p, b"").map_err(|e| Error::io(p, e))?;
        }
        Ok(Recorder {
            out,
            history: Vec::new(),
            start: Instant::now(),
        })
    }

    fn push(
        &mut self,
        epoch: usize,
        stage: &str,
        mean_loss: f64,
        mean_psnr_train: f64,
    ) -> Result<()> {
        let rec = HistoryRecord {
            epoch,
            stage: stage.to_string(),
            mean_loss,
            mean_psnr_train,
            wall_s: self.start.elapsed().as_secs_f64(),
        };
        log::info!(
            "[{stage}] epoch {epoch}: loss {mean_loss:.6e}, train PSNR {mean_psnr_train:.2} dB"
        );
        if let Some(p) = &self.out.history_path {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(p, e))?;
        }
        self.history.push(rec);
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        Ok(())
    }

    fn checkpoint(
        &self,
        epoch: usize,
        stage: &str,
        cfg: &TrainConfig,
        ext: &ExtractorParams,
        tasks: &[(&str, &TaskParams)],
    ) -> Result<()> {
        let Some(dir) = &self.out.checkpoint_dir else {
            return Ok(());
        };
        if cfg.checkpoint_every == 0 || (epoch + 1) % cfg.checkpoint_every != 0 {
            return Ok(());
        }
        let dir = dir.join(format!("{}-epoch{:04}", stage.replace(':', "_"), epoch + 1));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_extractor(&dir.join("extractor.ulda"), ext, cfg)?;
        for (name, t) in tasks {
            save_task(&dir.join(format!("adapter_{name}.ulda")), t, cfg)?;
        }
        Ok(())
    }
}

pub fn save_extractor(path: &Path, ext: &ExtractorParams, cfg: &TrainConfig) -> Result<()> {
    ModelFile {
        role: Role::Extractor,
        delta: cfg.delta,
        seed: cfg.seed,
        params: ext.to_bundle(),
    }
    .save(path)
}

pub fn save_task(path: &Path, task: &TaskParams, cfg: &TrainConfig) -> Result<()> {
    ModelFile {
        role: Role::Adapter,
        delta: cfg.delta,
        seed: cfg.seed,
        params: task.to_bundle(),
    }
    .save(path)
}

/// Mean loss, PSNR and gradients over a batch. Per-sample tapes run in
/// parallel; gradients are summed in sample order.
struct BatchResult {
    losses: Vec<f64>,
    psnrs: Vec<f64>,
    extractor: Option<ParamBundle>,
    task: ParamBundle,
}

fn sum_bundles(list: impl Iterator<Item = ParamBundle>, scale: f64) -> Option<ParamBundle> {
    let mut acc: Option<ParamBundle> = None;
    for b in list {
        match &mut acc {
            None => acc = Some(b),
            Some(a) => {
                for (name, t) in a.iter_mut() {
                    let src = b.get(name).expect("same layout");
                    for (x, y) in t.data.iter_mut().zip(&src.data) {
                        *x += y;
                    }
                }
            }
        }
    }
    if let Some(a) = &mut acc {
        for (_, t) in a.iter_mut() {
            t.data.iter_mut().for_each(|v| *v *= scale);
        }
    }
    acc
}

struct Ctx<'a> {
    cfg: &'a TrainConfig,
    solver: &'a SolverConfig,
}

impl Ctx<'_> {
    fn batch(
        &self,
        samples: &[&TrainSample],
        ext: &ExtractorParams,
        task: &TaskParams,
        learn: Learn,
    ) -> Result<BatchResult> {
        let act = self.cfg.activation();
        let results = samples
            .par_iter()
            .map(|s| {
                let g = sample_gradient(
                    &s.measurement,
                    &s.truth,
                    ext,
                    task,
                    act,
                    self.solver,
                    self.cfg.alpha_ssim,
                    learn,
                )?;
                let psnr = normalized_metrics(&s.truth, &g.recon)?.0;
                Ok((g, psnr))
            })
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / samples.len() as f64;
        let losses = results.iter().map(|(g, _)| g.loss).collect();
        let psnrs = results.iter().map(|(_, p)| *p).collect();
        let mut extractor_parts = Vec::new();
        let mut task_parts = Vec::new();
        for (g, _) in results {
            if let Some(e) = g.extractor {
                extractor_parts.push(e);
            }
            task_parts.push(g.task);
        }
        Ok(BatchResult {
            losses,
            psnrs,
            extractor: sum_bundles(extractor_parts.into_iter(), scale),
            task: sum_bundles(task_parts.into_iter(), scale).unwrap_or_default(),
        })
    }

    /// Shuffled mini-batches of sample indices for one epoch.
    fn batches(&self, n: usize, stream: u64, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = substream(
            self.cfg.seed ^ stream.wrapping_mul(0x9e37_79b9),
            epoch as u64,
        );
        order.shuffle(&mut rng);
        order
            .chunks(self.cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Mutable training state of one task.
struct TaskTrainer<'t> {
    bundle: &'t TaskBundle,
    params: TaskParams,
    adam: AdamState,
    losses: Vec<f64>,
    psnrs: Vec<f64>,
}

impl<'t> TaskTrainer<'t> {
    fn new(bundle: &'t TaskBundle, params: TaskParams) -> Self {
        let n = bundle.samples.len();
        TaskTrainer {
            bundle,
            params,
            adam: AdamState::new(),
            losses: vec![f64::NAN; n],
            psnrs: vec![f64::NAN; n],
        }
    }

    fn apply(&mut self, grads: &ParamBundle, cfg: &AdamConfig) -> Result<()> {
        if grads.is_empty() {
            return Ok(());
        }
        let mut b = self.params.to_bundle();
        adam_step(&mut b, grads, &mut self.adam, cfg)?;
        self.params = TaskParams::from_bundle(&b, self.params.phases(), 1.0)?;
        Ok(())
    }

    /// Per-sample means in sample order, so the epoch figure does not
    /// depend on the batch order.
    fn epoch_means(&self) -> (f64, f64) {
        let n = self.losses.len() as f64;
        (
            self.losses.iter().sum::<f64>() / n,
            self.psnrs.iter().sum::<f64>() / n,
        )
    }
}

struct SharedExtractor {
    params: ExtractorParams,
    adam: AdamState,
}

impl SharedExtractor {
    fn apply(&mut self, grads: Option<&ParamBundle>, cfg: &AdamConfig) -> Result<()> {
        let Some(g) = grads else { return Ok(()) };
        let mut b = self.params.to_bundle();
        adam_step(&mut b, g, &mut self.adam, cfg)?;
        self.params = ExtractorParams::from_bundle(&b)?;
        Ok(())
    }
}

/// Runs epochs over several tasks with a shared extractor. Batches are
/// drawn round-robin across tasks so each batch belongs to one task.
fn train_tasks(
    ctx: &Ctx,
    ext: &mut SharedExtractor,
    tasks: &mut [TaskTrainer],
    learn: Learn,
    epochs: usize,
    stage: &str,
    rec: &mut Recorder,
    first_epoch: usize,
) -> Result<()> {
    let adam = ctx.cfg.adam();
    for e in 0..epochs {
        let epoch = first_epoch + e;
        let plans: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| ctx.batches(t.bundle.samples.len(), i as u64 + 1, epoch))
            .collect();
        let rounds = plans.iter().map(Vec::len).max().unwrap_or(0);
        for r in 0..rounds {
            for (ti, plan) in plans.iter().enumerate() {
                let Some(idx) = plan.get(r) else { continue };
                let task = &mut tasks[ti];
                let samples: Vec<&TrainSample> =
                    idx.iter().map(|&i| &task.bundle.samples[i]).collect();
                let res = ctx.batch(&samples, &ext.params, &task.params, learn)?;
                for (k, &i) in idx.iter().enumerate() {
                    task.losses[i] = res.losses[k];
                    task.psnrs[i] = res.psnrs[k];
                }
                if res.losses.iter().any(|l| !l.is_finite()) {
                    let psnr = task.epoch_means().1;
                    rec.push(epoch, stage, f64::NAN, psnr)?;
                    return Err(Error::TrainingDiverged { epoch });
                }
                ext.apply(res.extractor.as_ref(), &adam)?;
                task.apply(&res.task, &adam)?;
            }
        }
        let (mut loss, mut psnr) = (0.0, 0.0);
        let total: usize = tasks.iter().map(|t| t.losses.len()).sum();
        for t in tasks.iter() {
            loss += t.losses.iter().sum::<f64>();
            psnr += t.psnrs.iter().sum::<f64>();
        }
        rec.push(epoch, stage, loss / total as f64, psnr / total as f64)?;
        let named: Vec<(&str, &TaskParams)> = tasks
            .iter()
            .map(|t| (t.bundle.name.as_str(), &t.params))
            .collect();
        rec.checkpoint(epoch, stage, ctx.cfg, &ext.params, &named)?;
    }
    Ok(())
}

/// Output of the first training step.
#[derive(Debug, Clone)]
pub struct Step1Output {
    pub extractor: ExtractorParams,
    /// Adapter and step sizes per dataset, in input order.
    pub tasks: Vec<TaskParams>,
    pub history: Vec<HistoryRecord>,
}

/// Per-dataset pre-training with frozen identity adapters, averaging of the
/// pre-trained extractors, then joint training of the extractor, adapters
/// and step sizes.
pub fn train_step1(
    datasets: &[TaskBundle],
    cfg: &TrainConfig,
    solver: &SolverConfig,
    out: &TrainOutputs,
) -> Result<Step1Output> {
    cfg.validate()?;
    solver.validate()?;
    if datasets.is_empty() {
        return Err(Error::InvalidArgument(
            "step 1 needs at least one dataset".into(),
        ));
    }
    let ctx = Ctx { cfg, solver };
    let mut rec = Recorder::new(out)?;
    let init = ExtractorParams::init(cfg.seed, cfg.init);

    let mut pretrained = Vec::with_capacity(datasets.len());
    let mut pre_tasks = Vec::with_capacity(datasets.len());
    for d in datasets {
        let mut ext = SharedExtractor {
            params: init.clone(),
            adam: AdamState::new(),
        };
        let mut tasks = [TaskTrainer::new(
            d,
            cfg.initial_task(AdapterParams::identity()),
        )];
        let learn = Learn {
            extractor: cfg.learn_extractor,
            adapter: false,
            steps: cfg.learn_steps,
        };
        let stage = format!("pretrain:{}", d.name);
        train_tasks(
            &ctx,
            &mut ext,
            &mut tasks,
            learn,
            cfg.pretrain_epochs,
            &stage,
            &mut rec,
            0,
        )?;
        pretrained.push(ext.params);
        let [t] = tasks;
        pre_tasks.push(t.params);
    }

    let mut ext = SharedExtractor {
        params: ExtractorParams::average(&pretrained)?,
        adam: AdamState::new(),
    };
    let mut tasks: Vec<TaskTrainer> = datasets
        .iter()
        .zip(pre_tasks)
        .map(|(d, p)| TaskTrainer::new(d, p))
        .collect();
    train_tasks(
        &ctx,
        &mut ext,
        &mut tasks,
        cfg.learn(),
        cfg.epochs,
        "joint",
        &mut rec,
        0,
    )?;
    Ok(Step1Output {
        extractor: ext.params,
        tasks: tasks.into_iter().map(|t| t.params).collect(),
        history: rec.history,
    })
}

fn train_adapter_stage(
    ctx: &Ctx,
    task: &TaskBundle,
    extractor: &ExtractorParams,
    init: TaskParams,
    stage: &str,
    rec: &mut Recorder,
) -> Result<TaskParams> {
    let digest = extractor.to_bundle().digest();
    let mut ext = SharedExtractor {
        params: extractor.clone(),
        adam: AdamState::new(),
    };
    let mut tasks = [TaskTrainer::new(task, init)];
    let learn = Learn {
        extractor: false,
        ..ctx.cfg.learn()
    };
    train_tasks(
        ctx,
        &mut ext,
        &mut tasks,
        learn,
        ctx.cfg.epochs,
        stage,
        rec,
        0,
    )?;
    assert_eq!(
        ext.params.to_bundle().digest(),
        digest,
        "frozen extractor changed"
    );
    let [t] = tasks;
    Ok(t.params)
}

/// Trains the adapter and step sizes of a new task with the extractor
/// frozen. Starts from `init` or from an identity adapter.
pub fn train_step2(
    task: &TaskBundle,
    extractor: &ExtractorParams,
    init: Option<TaskParams>,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    out: &TrainOutputs,
) -> Result<(TaskParams, Vec<HistoryRecord>)> {
    cfg.validate()?;
    solver.validate()?;
    let ctx = Ctx { cfg, solver };
    let mut rec = Recorder::new(out)?;
    let init = init.unwrap_or_else(|| cfg.initial_task(AdapterParams::identity()));
    let p = train_adapter_stage(&ctx, task, extractor, init, "adapter", &mut rec)?;
    Ok((p, rec.history))
}

/// Step 2 run through the configured stages, each warm-started from the
/// previous one.
pub fn staged_training(
    task: &TaskBundle,
    extractor: &ExtractorParams,
    init: Option<TaskParams>,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    out: &TrainOutputs,
) -> Result<(TaskParams, Vec<HistoryRecord>)> {
    cfg.validate()?;
    solver.validate()?;
    if cfg.stages.is_empty() {
        return Err(Error::Config(
            "staged training needs at least one stage".into(),
        ));
    }
    let ctx = Ctx { cfg, solver };
    let mut rec = Recorder::new(out)?;
    let mut params = init.unwrap_or_else(|| cfg.initial_task(AdapterParams::identity()));
    for (i, stage) in cfg.stages.iter().enumerate() {
        let data = match stage {
            Stage::Augmented { seed } => task.augmented(*seed)?,
            Stage::Original => task.clone(),
        };
        params = train_adapter_stage(&ctx, &data, extractor, params, &stage.label(i), &mut rec)?;
    }
    Ok((params, rec.history))
}
