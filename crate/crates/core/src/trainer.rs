//! Training loop, checkpoint plumbing and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::augment::{strong_augment, weak_augment};
use crate::checkpoint::Checkpoint;
use crate::config::{EvalModel, Precision, TrainConfig};
use crate::contrast::{
    cross_contrast_loss, estimate_prototypes, BatchPrototypes, ContrastInput, Directions, PrototypeBank, View,
};
use crate::data::{load_dataset, load_split, BatchStream, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::labels::{argmax_channels, LabelMap};
use crate::metrics::{evaluate_masks, MetricReport};
use crate::model::{Mode, SegModel, TeacherModel};
use crate::numerics::{BatchStats, Graph, Sgd, Tensor};
use crate::objectives::{consistency_loss, ramp_up, supervised_loss, total_loss, LossParts};
use crate::scalar::Scalar;
use crate::sdb::{blend_batch, BlendBatchPair};
use crate::seeding::{derive_seed, purpose, rng_for};

pub const LOG_HEADER: &str = "iteration,sup,con,ctr,s2w,lambda,lr,total";
const EVAL_HEADER: &str = "iteration,mean_dsc,mean_asd";
const EVAL_CHUNK: usize = 8;

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub t: u64,
    pub student: SegModel<T>,
    pub teacher: TeacherModel<T>,
    pub opt: Sgd<T>,
    pub bank: PrototypeBank<T>,
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub lr: f64,
    pub parts: LossParts,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration, p.sup, p.con, p.ctr, p.s2w, p.lambda, self.lr, p.total
        )
    }
}

/// Inputs of one step: blended labeled images and the two unlabeled views.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch<T> {
    /// `[n, 1, H, W]`
    pub labeled: Tensor<T>,
    pub masks: Vec<LabelMap>,
    pub weak: Tensor<T>,
    pub strong: Tensor<T>,
}

pub fn model_config(cfg: &TrainConfig) -> crate::model::ModelConfig {
    let mut m = cfg.model.clone();
    m.init_seed = cfg.seed;
    m
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let student = SegModel::new(model_config(cfg))?;
        let teacher = TeacherModel::from_student(&student, T::lit(cfg.ema_decay))?;
        let bank = PrototypeBank::new(cfg.model.num_classes, cfg.model.embed_dim, cfg.effective_bank_size())?;
        Ok(Self {
            t: 0,
            student,
            teacher,
            opt: Sgd::new(T::lit(cfg.weight_decay), T::lit(cfg.momentum)),
            bank,
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut c = Checkpoint {
            digest: cfg.digest(),
            iteration: self.t,
            config_json: cfg.to_json()?,
            tensors: Default::default(),
        };
        for (prefix, model) in [("student", &self.student), ("teacher", self.teacher.model())] {
            for (name, p) in model.param_names().iter().zip(model.params()) {
                c.insert(format!("{prefix}.{name}"), p);
            }
            for (i, r) in model.running_stats().iter().enumerate() {
                c.insert_vec(format!("{prefix}.running.{i}.mean"), &r.mean);
                c.insert_vec(format!("{prefix}.running.{i}.var"), &r.var);
            }
        }
        for (i, v) in self.opt.velocity().iter().enumerate() {
            c.insert_vec(format!("opt.velocity.{i}"), v);
        }
        let d = self.bank.dim();
        for view in [View::Weak, View::Strong] {
            for class in 0..self.bank.classes() {
                let entries = self.bank.entries(view, class);
                let protos: Vec<T> = entries.iter().flat_map(|(p, _)| p.iter().copied()).collect();
                let weights: Vec<T> = entries.iter().map(|(_, w)| *w).collect();
                let key = bank_key(view, class);
                c.insert(format!("{key}.protos"), &Tensor::new(vec![entries.len(), d], protos)?);
                c.insert_vec(format!("{key}.weights"), &weights);
            }
        }
        Ok(c)
    }

    pub fn from_checkpoint(cfg: &TrainConfig, c: &Checkpoint) -> Result<Self> {
        let mut s = Self::new(cfg)?;
        s.t = c.iteration;
        restore_model(&mut s.student, c, "student")?;
        restore_model(s.teacher.model_mut(), c, "teacher")?;
        let mut velocity = Vec::new();
        while c.contains(&format!("opt.velocity.{}", velocity.len())) {
            velocity.push(c.vec::<T>(&format!("opt.velocity.{}", velocity.len()))?);
        }
        if !velocity.is_empty() && velocity.len() != s.student.params().len() {
            return Err(Error::StructureMismatch(format!(
                "{} momentum buffers for {} parameters",
                velocity.len(),
                s.student.params().len()
            )));
        }
        s.opt.set_velocity(velocity);
        let d = s.bank.dim();
        for view in [View::Weak, View::Strong] {
            for class in 0..s.bank.classes() {
                let key = bank_key(view, class);
                let protos = c.tensor::<T>(&format!("{key}.protos"))?;
                let weights = c.vec::<T>(&format!("{key}.weights"))?;
                if protos.shape() != [weights.len(), d] {
                    return Err(Error::shape("bank restore", &[weights.len(), d], protos.shape()));
                }
                let entries = protos.data().chunks(d.max(1)).map(|p| p.to_vec()).zip(weights).collect();
                s.bank.set_entries(view, class, entries)?;
            }
        }
        Ok(s)
    }
}

fn bank_key(view: View, class: usize) -> String {
    let v = match view {
        View::Weak => "weak",
        View::Strong => "strong",
    };
    format!("bank.{v}.{class}")
}

fn restore_model<T: Scalar>(model: &mut SegModel<T>, c: &Checkpoint, prefix: &str) -> Result<()> {
    let names = model.param_names().to_vec();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let t = c.tensor::<T>(&format!("{prefix}.{name}"))?;
        if t.shape() != p.shape() {
            return Err(Error::shape("checkpoint restore", p.shape(), t.shape()));
        }
        *p = t;
    }
    for (i, r) in model.running_stats_mut().iter_mut().enumerate() {
        let mean = c.vec::<T>(&format!("{prefix}.running.{i}.mean"))?;
        let var = c.vec::<T>(&format!("{prefix}.running.{i}.var"))?;
        if mean.len() != r.mean.len() || var.len() != r.var.len() {
            return Err(Error::StructureMismatch(format!("{prefix} running statistics {i}")));
        }
        r.mean = mean;
        r.var = var;
    }
    Ok(())
}

fn stack_images<T: Scalar>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    let s = Tensor::stack(images)?;
    let (n, h, w) = match *s.shape() {
        [n, h, w] => (n, h, w),
        ref other => return Err(Error::InvalidShape { op: "stack_images", msg: format!("{other:?}") }),
    };
    s.reshape(vec![n, 1, h, w])
}

/// Augments and blends the samples drawn for iteration `t`.
pub fn prepare_batch<T: Scalar>(cfg: &TrainConfig, data: &Dataset, stream: &BatchStream, t: u64) -> Result<StepBatch<T>> {
    let (li, ui) = stream.batch(t);
    let mut labeled = Vec::with_capacity(li.len());
    for (j, &i) in li.iter().enumerate() {
        let s = &data.labeled[i];
        let mask = s.mask.as_ref().ok_or_else(|| Error::Empty(format!("labeled sample {} has no mask", s.id)))?;
        let seed = derive_seed(cfg.seed, &[purpose::WEAK_LABELED, t, j as u64]);
        let (img, m, _) = weak_augment(&s.image.cast::<T>(), Some(mask), seed, &cfg.augment.weak)?;
        labeled.push((img, m.expect("mask given")));
    }
    let mut weak = Vec::with_capacity(ui.len());
    let mut strong = Vec::with_capacity(ui.len());
    for (j, &i) in ui.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[purpose::WEAK_UNLABELED, t, j as u64]);
        let (w, _, _) = weak_augment(&data.unlabeled[i].image.cast::<T>(), None, seed, &cfg.augment.weak)?;
        let seed = derive_seed(cfg.seed, &[purpose::STRONG, t, j as u64]);
        let (s, _) = strong_augment(&w, seed, &cfg.augment.strong)?;
        weak.push(w);
        strong.push(s);
    }
    if cfg.sdb_on {
        let mut rng = rng_for(cfg.seed, &[purpose::BLEND, t]);
        let pair = BlendBatchPair {
            labeled: &labeled,
            unlabeled: &weak,
        };
        labeled = blend_batch(pair, &cfg.sdb.eta, T::lit(cfg.sdb.eps), &mut rng)?
            .into_iter()
            .map(|b| (b.image, b.mask))
            .collect();
    }
    let (images, masks): (Vec<_>, Vec<_>) = labeled.into_iter().unzip();
    Ok(StepBatch {
        labeled: stack_images(&images)?,
        masks,
        weak: stack_images(&weak)?,
        strong: stack_images(&strong)?,
    })
}

fn confidence_keep<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Result<Option<Vec<Vec<bool>>>> {
    if threshold <= 0.0 {
        return Ok(None);
    }
    let (n, c, h, w) = probs.dims4()?;
    let plane = h * w;
    let thr = T::lit(threshold);
    let d = probs.data();
    Ok(Some(
        (0..n)
            .map(|i| {
                (0..plane)
                    .map(|k| (0..c).map(|ch| d[(i * c + ch) * plane + k]).fold(T::zero(), T::max) >= thr)
                    .collect()
            })
            .collect(),
    ))
}

/// Loss components and student gradients of one step, before any update.
#[derive(Clone, Debug)]
pub struct StepGradients<T> {
    pub parts: LossParts,
    /// In [`SegModel::params`] order, summed over the labeled and unlabeled passes.
    pub grads: Vec<Tensor<T>>,
    bn_stats: Vec<Vec<Option<BatchStats<T>>>>,
    fresh: Option<(BatchPrototypes<T>, BatchPrototypes<T>)>,
}

/// Forward and backward pass of one step without touching `state`.
pub fn step_gradients<T: Scalar>(state: &TrainState<T>, batch: &StepBatch<T>, cfg: &TrainConfig) -> Result<StepGradients<T>> {
    let t = state.t;
    let first = cfg.first_dice_class();
    let (alpha, beta) = (cfg.loss.alpha, cfg.loss.beta);
    let lambda = ramp_up(t, cfg.loss.w_max, cfg.loss.ramp_length(cfg.iterations));
    let n = batch.weak.shape()[0];
    let need_weak = cfg.ctr_on || cfg.pixel_s2w_on;
    let unsup = cfg.con_on || need_weak;

    let mut g = Graph::new();
    let xl = g.constant(batch.labeled.clone());
    let lab = state.student.forward(&mut g, xl, Mode::Train, true, None)?;
    let pl = g.softmax(lab.logits)?;
    let sup = supervised_loss(&mut g, pl, &batch.masks, first)?;
    let mut parts = LossParts {
        sup: g.value(sup).item().to_f64_lossy(),
        lambda,
        ..LossParts::default()
    };

    let mut unsup_terms = Vec::new();
    let mut ctr = None;
    let mut unl = None;
    let mut fresh = None;
    if unsup {
        let x = if need_weak {
            Tensor::concat0(&[&batch.strong, &batch.weak])?
        } else {
            batch.strong.clone()
        };
        let rows = x.shape()[0];
        let xu = g.constant(x);
        let out = state
            .student
            .forward(&mut g, xu, Mode::Train, true, cfg.ctr_on.then_some(0..rows))?;
        let pu = g.softmax(out.logits)?;
        let (ps, pw) = if need_weak {
            (g.narrow0(pu, 0, n)?, Some(g.narrow0(pu, n, n)?))
        } else {
            (pu, None)
        };
        let teacher_in = if need_weak {
            Tensor::concat0(&[&batch.weak, &batch.strong])?
        } else {
            batch.weak.clone()
        };
        let tp = state.teacher.model().predict_probs(&teacher_in, Mode::Eval)?;
        let tw = tp.narrow0(0, n)?;
        if cfg.con_on {
            let c = consistency_loss(&mut g, ps, &tw, first)?;
            parts.con = g.value(c).item().to_f64_lossy();
            unsup_terms.push(c);
        }
        if need_weak {
            let ts = tp.narrow0(n, n)?;
            let pw = pw.expect("weak rows");
            if cfg.pixel_s2w_on {
                let c = consistency_loss(&mut g, pw, &ts, first)?;
                parts.s2w = g.value(c).item().to_f64_lossy();
                unsup_terms.push(c);
            }
            if cfg.ctr_on {
                let z = out.embedding.expect("embedding rows requested");
                let zs = g.narrow0(z, 0, n)?;
                let zw = g.narrow0(z, n, n)?;
                let agg = cfg.contrast.aggregation;
                let protos_weak = state.bank.aggregate_all(View::Weak, agg);
                let protos_strong = state.bank.aggregate_all(View::Strong, agg);
                let labels_weak = argmax_channels(&tw)?;
                let labels_strong = argmax_channels(&ts)?;
                let keep_weak = confidence_keep(&tw, cfg.contrast.confidence_threshold)?;
                let keep_strong = confidence_keep(&ts, cfg.contrast.confidence_threshold)?;
                let input = ContrastInput {
                    z_weak: zw,
                    z_strong: zs,
                    protos_weak: &protos_weak,
                    protos_strong: &protos_strong,
                    labels_weak: &labels_weak,
                    labels_strong: &labels_strong,
                    keep_weak: keep_weak.as_deref(),
                    keep_strong: keep_strong.as_deref(),
                };
                let dirs = Directions {
                    weak: cfg.ctr_w_on,
                    strong: cfg.ctr_s_on,
                };
                if let Some(l) = cross_contrast_loss(&mut g, &input, dirs, &cfg.contrast)?.loss {
                    parts.ctr = g.value(l).item().to_f64_lossy();
                    ctr = Some(l);
                }
                let (zv, pv) = (g.value(z), g.value(pu));
                let strong_protos = estimate_prototypes(&zv.narrow0(0, n)?, &pv.narrow0(0, n)?)?;
                let weak_protos = estimate_prototypes(&zv.narrow0(n, n)?, &pv.narrow0(n, n)?)?;
                fresh = Some((weak_protos, strong_protos));
            }
        }
        unl = Some(out);
    }
    let mut parts = parts.compose(alpha, beta, t)?;

    let total = total_loss(&mut g, sup, &unsup_terms, ctr, lambda, alpha, beta)?;
    parts.total = g.value(total).item().to_f64_lossy();
    g.backward(total)?;
    let grads = lab
        .params
        .iter()
        .enumerate()
        .map(|(i, &pv)| {
            let mut grad = g.grad(pv).unwrap_or_else(|| Tensor::zeros(g.shape(pv).to_vec()));
            if let Some(gu) = unl.as_ref().and_then(|u| g.grad(u.params[i])) {
                for (a, &b) in grad.data_mut().iter_mut().zip(gu.data()) {
                    *a += b;
                }
            }
            grad
        })
        .collect::<Vec<_>>();
    let mut bn_stats = vec![lab.bn_stats];
    bn_stats.extend(unl.map(|u| u.bn_stats));
    Ok(StepGradients {
        parts,
        grads,
        bn_stats,
        fresh,
    })
}

/// One optimisation step; returns the logged loss components.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &StepBatch<T>, cfg: &TrainConfig) -> Result<LossParts> {
    let step = step_gradients(state, batch, cfg)?;
    state.opt.step(state.student.params_mut(), &step.grads, T::lit(cfg.lr_at(state.t)))?;
    for stats in &step.bn_stats {
        state.student.update_running_stats(stats);
    }
    state.teacher.update(&state.student)?;
    if let Some((w, s)) = &step.fresh {
        state.bank.push(View::Weak, w)?;
        state.bank.push(View::Strong, s)?;
    }
    state.t += 1;
    Ok(step.parts)
}

/// Hard predictions of `model` on labeled samples, scored against their masks.
pub fn evaluate_model<T: Scalar>(model: &SegModel<T>, samples: &[Sample], symmetric_asd: bool) -> Result<MetricReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let images: Vec<Tensor<T>> = chunk.iter().map(|s| s.image.cast()).collect();
        preds.extend(model.hard_prediction(&stack_images(&images)?)?);
    }
    let truth = samples
        .iter()
        .map(|s| s.mask.clone().ok_or_else(|| Error::Empty(format!("sample {} has no mask to score against", s.id))))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    evaluate_masks(&ids, &preds, &truth, model.config().num_classes, symmetric_asd)
}

fn check_dataset(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.labeled.is_empty() || data.unlabeled.is_empty() {
        return Err(Error::Empty(format!(
            "training needs labeled and unlabeled samples under {}",
            cfg.data_root.display()
        )));
    }
    let want = [cfg.model.height, cfg.model.width];
    for s in data.labeled.iter().chain(&data.unlabeled).chain(&data.test) {
        if s.image.shape() != want {
            return Err(Error::shape("dataset", &want, s.image.shape()));
        }
    }
    Ok(())
}

/// A training run held in memory.
pub struct Trainer<T> {
    cfg: TrainConfig,
    data: Dataset,
    stream: BatchStream,
    state: TrainState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Self::with_state(cfg, data, state)
    }

    pub fn with_state(cfg: TrainConfig, data: Dataset, state: TrainState<T>) -> Result<Self> {
        cfg.validate()?;
        check_dataset(&cfg, &data)?;
        let stream = BatchStream::new(data.labeled.len(), data.unlabeled.len(), cfg.batch_size, cfg.seed)?;
        Ok(Self { cfg, data, stream, state })
    }

    pub fn resume(cfg: TrainConfig, data: Dataset, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.digest != cfg.digest() {
            log::warn!("checkpoint was written under a different configuration");
        }
        let state = TrainState::from_checkpoint(&cfg, ckpt)?;
        Self::with_state(cfg, data, state)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn iteration(&self) -> u64 {
        self.state.t
    }

    pub fn batch(&self, t: u64) -> Result<StepBatch<T>> {
        prepare_batch(&self.cfg, &self.data, &self.stream, t)
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.state.t;
        let batch = self.batch(t)?;
        let parts = train_step(&mut self.state, &batch, &self.cfg)?;
        Ok(StepRecord {
            iteration: t,
            lr: self.cfg.lr_at(t),
            parts,
        })
    }

    /// Steps until `t` reaches `until` (capped at the configured iterations).
    pub fn run_until(&mut self, until: u64, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let until = until.min(self.cfg.iterations);
        let mut out = Vec::new();
        while self.state.t < until {
            let rec = self.step()?;
            on_step(self, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    pub fn eval_model(&self) -> &SegModel<T> {
        match self.cfg.eval_model {
            EvalModel::Teacher => self.state.teacher.model(),
            EvalModel::Student => &self.state.student,
        }
    }

    pub fn evaluate(&self, split: Split) -> Result<MetricReport> {
        if split == Split::Unlabeled {
            return Err(Error::InvalidArgument("the unlabeled split has no masks to score against".into()));
        }
        evaluate_model(self.eval_model(), self.data.split(split), self.cfg.symmetric_asd)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.state.to_checkpoint(&self.cfg)
    }
}

/// Result of a full run written to `out_dir`.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub report: MetricReport,
    pub log: Vec<StepRecord>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Keeps the header and rows before iteration `t` of an existing CSV log.
fn reopen_log(path: &Path, header: &str, t: u64) -> Result<fs::File> {
    let mut kept = format!("{header}\n");
    if t > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let it = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if it.is_some_and(|i| i < t) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    write_file(path, kept)?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

fn append(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

fn opt_str(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trains with precision `T`, writing logs, checkpoints and the final test
/// report into `cfg.out_dir`.
pub fn train_with<T: Scalar>(cfg: &TrainConfig, data: Dataset, resume: Option<&Path>) -> Result<TrainOutcome> {
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_file(&out.join("config.json"), cfg.to_json()?)?;
    let mut trainer = match resume {
        Some(p) => Trainer::<T>::resume(cfg.clone(), data, &Checkpoint::load(p)?)?,
        None => Trainer::<T>::new(cfg.clone(), data)?,
    };
    let t0 = trainer.iteration();
    let log_path = out.join("train_log.csv");
    let eval_path = out.join("eval_log.csv");
    let mut log_file = reopen_log(&log_path, LOG_HEADER, t0)?;
    let mut eval_file = if cfg.eval_every > 0 {
        Some(reopen_log(&eval_path, EVAL_HEADER, t0)?)
    } else {
        None
    };
    log::info!(
        "training {} iterations from t={t0} ({}, {} parameters)",
        cfg.iterations,
        T::NAME,
        trainer.state().student.param_count()
    );
    let log = trainer.run_until(cfg.iterations, |tr, rec| {
        append(&mut log_file, &log_path, &rec.csv_row())?;
        let t = tr.iteration();
        if t % 50 == 0 {
            let p = &rec.parts;
            log::info!("t={t} sup={:.4} con={:.4} ctr={:.4} total={:.4}", p.sup, p.con, p.ctr, p.total);
        }
        if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 && t < cfg.iterations {
            tr.checkpoint()?.save(&out.join(format!("checkpoint_{t:06}.bin")))?;
        }
        if let Some(f) = eval_file.as_mut() {
            if t % cfg.eval_every == 0 {
                let r = tr.evaluate(Split::Test)?;
                log::info!("t={t} test DSC {:.4}", r.mean_dsc);
                append(f, &eval_path, &format!("{t},{},{}", r.mean_dsc, opt_str(r.mean_asd)))?;
            }
        }
        Ok(())
    })?;
    let final_checkpoint = out.join("checkpoint_final.bin");
    trainer.checkpoint()?.save(&final_checkpoint)?;
    let report = trainer.evaluate(Split::Test)?;
    write_file(&out.join("metrics.json"), report.to_json()?)?;
    write_file(&out.join("metrics.csv"), report.to_csv())?;
    log::info!("final test DSC {:.4}", report.mean_dsc);
    Ok(TrainOutcome {
        final_checkpoint,
        report,
        log,
    })
}

/// Loads the dataset from `cfg.data_root` and trains at the configured precision.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data_root, cfg.model.num_classes)?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, data, resume),
        Precision::F64 => train_with::<f64>(cfg, data, resume),
    }
}

/// Scores a checkpoint on one split. The configuration embedded in the
/// checkpoint is used unless `cfg` is given; a digest mismatch only warns.
pub fn evaluate(ckpt_path: &Path, split: Split, cfg: Option<&TrainConfig>) -> Result<MetricReport> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let cfg = match cfg {
        Some(c) => {
            if c.digest() != ckpt.digest {
                log::warn!("{} was written under a different configuration", ckpt_path.display());
            }
            c.clone()
        }
        None => TrainConfig::from_json(&ckpt.config_json)?,
    };
    if split == Split::Unlabeled {
        return Err(Error::InvalidArgument("the unlabeled split has no masks to score against".into()));
    }
    let samples = load_split(&cfg.data_root, split, cfg.model.num_classes)?;
    if samples.is_empty() {
        return Err(Error::Empty(format!("no {split} samples under {}", cfg.data_root.display())));
    }
    fn score<T: Scalar>(cfg: &TrainConfig, ckpt: &Checkpoint, samples: &[Sample]) -> Result<MetricReport> {
        let state = TrainState::<T>::from_checkpoint(cfg, ckpt)?;
        let model = match cfg.eval_model {
            EvalModel::Teacher => state.teacher.model(),
            EvalModel::Student => &state.student,
        };
        evaluate_model(model, samples, cfg.symmetric_asd)
    }
    match cfg.precision {
        Precision::F32 => score::<f32>(&cfg, &ckpt, &samples),
        Precision::F64 => score::<f64>(&cfg, &ckpt, &samples),
    }
}
