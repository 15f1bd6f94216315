//! SGD with momentum over the full detector, checkpoints, metric logs and
//! ablation runs.
//!
//! Batches are a pure function of `(seed, step)`: the sample stream is a
//! sequence of seeded epoch permutations, and step `s` takes positions
//! `s·B .. s·B + B` of it. Resuming from a checkpoint therefore replays
//! exactly the batches an uninterrupted run would have seen.
//!
//! Checkpoint directory:
//!
//! ```text
//! manifest.txt        name, shape, role and stage of every parameter
//! params/*.dtns       parameter tensors
//! momentum/*.dtns     optimiser velocity
//! model.txt           model config, `key = value`
//! state.txt           `step = N`
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::bbox::{Detection, CLASS_NAMES};
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::init::named_rng;
use crate::loss::LossValue;
use crate::model::{build_detector, Detector, ModelConfig};
use crate::neck::NeckKind;
use crate::params::{load_params, save_params, Manifest, Parameters};
use crate::synth::{Dataset, Sample, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub clip_grad_norm: Option<f64>,
    pub model: ModelConfig,
    pub data: PathBuf,
    /// `None` trains on every image in the manifest.
    pub train_split: Option<Split>,
    pub val_split: Option<Split>,
    pub out: PathBuf,
    /// Validation interval in steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    /// Worker threads for evaluation. Training itself is single-threaded.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            clip_grad_norm: Some(10.0),
            model: ModelConfig::default(),
            data: PathBuf::from("data"),
            train_split: Some(Split::Train),
            val_split: Some(Split::Val),
            out: PathBuf::from("run"),
            eval_every: 0,
            checkpoint_every: 0,
            score_thresh: 0.05,
            nms_iou: 0.5,
            threads: 1,
        }
    }
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    if s == "all" {
        return Ok(None);
    }
    Split::parse(s)
        .map(Some)
        .ok_or_else(|| Error::Config(format!("unknown split `{s}`, expected train, val, test or all")))
}

fn split_name(s: Option<Split>) -> &'static str {
    s.map_or("all", |s| s.as_str())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.threads == 0 {
            return bad("batch_size and threads must be positive".into());
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        self.model.validate()
    }

    pub fn from_kv(mut kv: KvFile, base_dir: &Path) -> Result<Self> {
        let d = Self::default();
        let path = |p: Option<String>, default: PathBuf| p.map_or(default, |p| base_dir.join(p));
        let clip = match kv.take_str("clip_grad_norm") {
            None => d.clip_grad_norm,
            Some(s) if s == "none" => None,
            Some(s) => Some(
                s.parse()
                    .map_err(|_| Error::Config(format!("clip_grad_norm: cannot parse `{s}`")))?,
            ),
        };
        let cfg = Self {
            lr: kv.take_or("lr", d.lr)?,
            momentum: kv.take_or("momentum", d.momentum)?,
            steps: kv.take_or("steps", d.steps)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            seed: kv.take_or("seed", d.seed)?,
            clip_grad_norm: clip,
            data: path(kv.take_str("data"), d.data),
            train_split: kv.take_str("train_split").map_or(Ok(d.train_split), |s| parse_split(&s))?,
            val_split: kv.take_str("val_split").map_or(Ok(d.val_split), |s| parse_split(&s))?,
            out: path(kv.take_str("out"), d.out),
            eval_every: kv.take_or("eval_every", d.eval_every)?,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
            score_thresh: kv.take_or("score_thresh", d.score_thresh)?,
            nms_iou: kv.take_or("nms_iou", d.nms_iou)?,
            threads: kv.take_or("threads", d.threads)?,
            model: ModelConfig::from_kv(&mut kv)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative `data` and `out` paths resolve against the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(KvFile::read(path)?, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        Self::from_kv(KvFile::parse(text, "config")?, base_dir)
    }

    pub fn to_text(&self) -> String {
        let clip = self.clip_grad_norm.map_or("none".into(), |c| c.to_string());
        let mut s = String::new();
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "clip_grad_norm = {clip}");
        let _ = writeln!(s, "data = {}", self.data.display());
        let _ = writeln!(s, "train_split = {}", split_name(self.train_split));
        let _ = writeln!(s, "val_split = {}", split_name(self.val_split));
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "score_thresh = {}", self.score_thresh);
        let _ = writeln!(s, "nms_iou = {}", self.nms_iou);
        let _ = writeln!(s, "threads = {}", self.threads);
        s + &self.model.to_text()
    }
}

/// Indices into a dataset of `n` samples for training step `step`.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut perms: HashMap<usize, Vec<usize>> = HashMap::new();
    (step * batch_size..(step + 1) * batch_size)
        .map(|pos| {
            let epoch = pos / n;
            let perm = perms.entry(epoch).or_insert_with(|| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut named_rng(seed, &format!("epoch{epoch}")));
                p
            });
            perm[pos % n]
        })
        .collect()
}

pub fn grad_norm(g: &Detector) -> f64 {
    g.param_list().iter().map(|p| p.value.sum_sq()).sum::<f64>().sqrt()
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Detector,
    pub velocity: Detector,
    /// Updates applied so far.
    pub step: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = build_detector(&config.model, config.seed)?;
        let velocity = model.zeroed();
        Ok(Self {
            config: config.clone(),
            model,
            velocity,
            step: 0,
        })
    }

    /// One update on the batch selected for the current step.
    pub fn train_step(&mut self, samples: &[Sample]) -> Result<LossValue> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let idx = batch_indices(self.config.seed, self.step, self.config.batch_size, samples.len());
        let images = Tensor::stack(&idx.iter().map(|&i| samples[i].image.clone()).collect::<Vec<_>>())?;
        let gts: Vec<_> = idx.iter().map(|&i| samples[i].boxes.clone()).collect();
        let (loss, mut grad) = self.model.loss_and_grad(&images, &gts)?;
        let norm = grad_norm(&grad);
        if !loss.total.is_finite() || !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                detail: format!(
                    "loss {} (cls {}, box {}), gradient norm {norm}",
                    loss.total, loss.cls, loss.boxes
                ),
            });
        }
        if let Some(max) = self.config.clip_grad_norm {
            if norm > max {
                for t in grad.param_list_mut() {
                    t.scale(max / norm);
                }
            }
        }
        let (lr, mu) = (self.config.lr, self.config.momentum);
        for ((p, v), g) in self
            .model
            .param_list_mut()
            .into_iter()
            .zip(self.velocity.param_list_mut())
            .zip(grad.param_list())
        {
            for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.value.data()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        self.step += 1;
        Ok(loss)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_params(&self.model, dir, "params")?;
        save_params(&self.velocity, dir, "momentum")?;
        write_file(&dir.join("model.txt"), &self.model.config.to_text())?;
        write_file(&dir.join("state.txt"), &format!("step = {}\n", self.step))
    }

    /// Resumes from a checkpoint written by [`save`](Self::save). The model
    /// config stored in the checkpoint must match `config.model`.
    pub fn resume(config: &TrainConfig, dir: &Path) -> Result<Self> {
        let mut t = Self::new(config)?;
        let stored = read_model_config(dir)?;
        if stored != config.model {
            return Err(Error::Config(format!(
                "{}: checkpoint model config differs from the training config",
                dir.display()
            )));
        }
        load_params(&mut t.model, dir, "params")?;
        load_params(&mut t.velocity, dir, "momentum")?;
        let mut kv = KvFile::read(&dir.join("state.txt"))?;
        t.step = kv
            .take("step")?
            .ok_or_else(|| Error::Config("state.txt has no step".into()))?;
        kv.finish()?;
        Ok(t)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_model_config(dir: &Path) -> Result<ModelConfig> {
    let mut kv = KvFile::read(&dir.join("model.txt"))?;
    let cfg = ModelConfig::from_kv(&mut kv)?;
    kv.finish()?;
    Ok(cfg)
}

/// Rebuilds the detector stored in a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Detector> {
    let cfg = read_model_config(dir)?;
    let mut model = build_detector(&cfg, 0)?;
    load_params(&mut model, dir, "params")?;
    Ok(model)
}

/// Detections for each sample, one image at a time, spread over `threads`.
pub fn detect_all(
    model: &Detector,
    samples: &[Sample],
    score_thresh: f64,
    nms_iou: f64,
    threads: usize,
) -> Result<Vec<Vec<Detection>>> {
    let run = |s: &Sample| -> Result<Vec<Detection>> {
        Ok(model.detect(&s.image, score_thresh, nms_iou)?.remove(0))
    };
    if threads <= 1 || samples.len() < 2 {
        return samples.iter().map(run).collect();
    }
    let chunk = samples.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(samples.len());
        for h in handles {
            out.extend(h.join().expect("detection worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate_model(
    model: &Detector,
    samples: &[Sample],
    score_thresh: f64,
    nms_iou: f64,
    eval: &EvalConfig,
    threads: usize,
) -> Result<EvalReport> {
    let dets = detect_all(model, samples, score_thresh, nms_iou, threads)?;
    let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
    evaluate(&dets, &gts, model.config.num_classes, eval)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Detector,
    pub losses: Vec<LossValue>,
    /// `(step, map50, map5095)` for every validation pass.
    pub evals: Vec<(usize, f64, f64)>,
}

struct Logs {
    train: File,
    eval: File,
}

impl Logs {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        let open = |name: &str| {
            let p = dir.join(name);
            OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(&p)
                .map_err(|e| Error::io(&p, e))
        };
        Ok(Self {
            train: open("train.log")?,
            eval: open("eval.log")?,
        })
    }
}

fn log_line(f: &mut File, dir: &Path, line: String) -> Result<()> {
    writeln!(f, "{line}").map_err(|e| Error::io(dir, e))
}

/// Runs `trainer` up to `trainer.config.steps`. With `out` set, writes
/// `train.log` (`step total cls box`), `eval.log` (`step map50 map5095`) and
/// the checkpoint under `out/checkpoint`.
pub fn run_training(
    mut trainer: Trainer,
    train: &[Sample],
    val: &[Sample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = trainer.config.clone();
    let mut logs = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(Logs::open(dir, trainer.step > 0)?)
        }
        None => None,
    };
    let eval_cfg = EvalConfig::default();
    let mut outcome = TrainOutcome {
        model: trainer.model.clone(),
        losses: vec![],
        evals: vec![],
    };
    while trainer.step < cfg.steps {
        let loss = trainer.train_step(train)?;
        let step = trainer.step;
        outcome.losses.push(loss);
        if let (Some(l), Some(dir)) = (logs.as_mut(), out) {
            log_line(&mut l.train, dir, format!("{step} {} {} {}", loss.total, loss.cls, loss.boxes))?;
        }
        let last = step == cfg.steps;
        let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if !val.is_empty() && (due || last) {
            let r = evaluate_model(&trainer.model, val, cfg.score_thresh, cfg.nms_iou, &eval_cfg, cfg.threads)?;
            outcome.evals.push((step, r.map50, r.map5095));
            if let (Some(l), Some(dir)) = (logs.as_mut(), out) {
                log_line(&mut l.eval, dir, format!("{step} {} {}", r.map50, r.map5095))?;
            }
        }
        if let Some(dir) = out {
            if last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
                trainer.save(&dir.join("checkpoint"))?;
            }
        }
    }
    outcome.model = trainer.model;
    Ok(outcome)
}

fn load_split(ds: &Dataset, split: Option<Split>, num_classes: usize) -> Result<Vec<Sample>> {
    ds.load_split(split, num_classes)
}

/// Trains from the dataset and output directory named in `config`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let ds = Dataset::open(&config.data)?;
    let nc = config.model.num_classes;
    let train = load_split(&ds, config.train_split, nc)?;
    if train.is_empty() {
        return Err(Error::Config(format!(
            "{}: split `{}` is empty",
            config.data.display(),
            split_name(config.train_split)
        )));
    }
    let val = load_split(&ds, config.val_split, nc)?;
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    write_file(&config.out.join("config.txt"), &config.to_text())?;
    run_training(Trainer::new(config)?, &train, &val, Some(&config.out))
}

/// Continues a run from `out/checkpoint` up to `config.steps`.
pub fn resume_training(config: &TrainConfig) -> Result<TrainOutcome> {
    let ds = Dataset::open(&config.data)?;
    let nc = config.model.num_classes;
    let train = load_split(&ds, config.train_split, nc)?;
    let val = load_split(&ds, config.val_split, nc)?;
    let trainer = Trainer::resume(config, &config.out.join("checkpoint"))?;
    run_training(trainer, &train, &val, Some(&config.out))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub dc_stages: Vec<u8>,
    pub neck: NeckKind,
}

impl Variant {
    pub fn new(name: &str, dc_stages: &[u8], neck: NeckKind) -> Self {
        Self {
            name: name.to_string(),
            dc_stages: dc_stages.to_vec(),
            neck,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut m = base.clone();
        m.backbone.set_dc_stages(&self.dc_stages)?;
        m.neck.kind = self.neck;
        m.validate()?;
        Ok(m)
    }
}

/// The baseline, `+DC`, `+DFPN` and combined rows.
pub fn neck_dc_variants() -> Vec<Variant> {
    vec![
        Variant::new("baseline", &[], NeckKind::Pafpn),
        Variant::new("dc", &[4, 5], NeckKind::Pafpn),
        Variant::new("dfpn", &[], NeckKind::Dfpn),
        Variant::new("dc_dfpn", &[4, 5], NeckKind::Dfpn),
    ]
}

/// Deformable stages `{2,3,4,5}`, `{3,4,5}`, `{4,5}`, `{5}` with a dense neck.
pub fn stage_variants() -> Vec<Variant> {
    [&[2u8, 3, 4, 5][..], &[3, 4, 5], &[4, 5], &[5]]
        .iter()
        .map(|s| {
            let name = format!("dc{}", s.iter().map(u8::to_string).collect::<String>());
            Variant::new(&name, s, NeckKind::Dfpn)
        })
        .collect()
}

/// One variant per line: `name dc_stages neck`, with `-` for no deformable
/// stages, e.g. `dc45 4,5 dfpn`.
pub fn parse_variants(text: &str, path: &str) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        let [name, stages, neck] = f[..] else {
            return Err(bad(format!("expected `name dc_stages neck`, got `{line}`")));
        };
        let dc_stages = crate::config::parse_list::<u8>(stages).map_err(bad)?;
        let neck = NeckKind::parse(neck).ok_or_else(|| bad(format!("unknown neck `{neck}`")))?;
        if out.iter().any(|v| v.name == name) {
            return Err(bad(format!("duplicate variant `{name}`")));
        }
        out.push(Variant {
            name: name.to_string(),
            dc_stages,
            neck,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{path}: no variants")));
    }
    Ok(out)
}

pub fn format_variants(variants: &[Variant]) -> String {
    variants
        .iter()
        .map(|v| format!("{} {} {}\n", v.name, crate::config::format_list(&v.dc_stages), v.neck))
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub manifest: Manifest,
    pub num_params: usize,
    pub final_loss: LossValue,
    pub report: EvalReport,
}

/// Trains every variant from the same seed and data, then evaluates each on
/// `eval_samples`.
pub fn ablation_run(
    base: &TrainConfig,
    variants: &[Variant],
    train: &[Sample],
    eval_samples: &[Sample],
) -> Result<Vec<AblationRow>> {
    let eval_cfg = EvalConfig::default();
    variants
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.model = v.apply(&base.model)?;
            let trainer = Trainer::new(&cfg)?;
            let manifest = trainer.model.manifest();
            let num_params = trainer.model.num_params();
            let outcome = run_training(trainer, train, &[], None)?;
            let report = evaluate_model(
                &outcome.model,
                eval_samples,
                cfg.score_thresh,
                cfg.nms_iou,
                &eval_cfg,
                cfg.threads,
            )?;
            Ok(AblationRow {
                variant: v.clone(),
                manifest,
                num_params,
                final_loss: *outcome.losses.last().expect("at least one step"),
                report,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,dc_stages,neck,params,final_loss,mAP50,mAP50_95");
    for name in CLASS_NAMES {
        let _ = write!(s, ",{name}");
    }
    s.push('\n');
    for r in rows {
        let stages: Vec<String> = r.variant.dc_stages.iter().map(u8::to_string).collect();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant.name,
            stages.join(" "),
            r.variant.neck,
            r.num_params,
            r.final_loss.total,
            r.report.map50,
            r.report.map5095
        );
        for c in 0..CLASS_NAMES.len() {
            match r.report.class_ap50(c) {
                Some(ap) => {
                    let _ = write!(s, ",{ap}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}
