//! Teacher pretraining, binary-weight fine-tuning and knowledge-transfer
//! training with the composite loss
//! `λ1·l_cls + λ2·l_loc + λ3·Σ_k L2(F_t^k, F_s^k)`.

use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasynth::Dataset;
use crate::detect::{self, GroundTruth, ImageEval, MapReport};
use crate::error::{Error, Result};
use crate::network::{init_student_from_teacher, nonstage_schedule, BinarizationSchedule, BnMode, Model};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;
pub const EVAL_BATCH: usize = 16;
pub const MAP_IOU: f64 = 0.5;
pub const METRICS_HEADER: &str = "epoch,stage,l_cls,l_loc,l2_sum,total,val_mAP";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KTConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Layers whose post-activation outputs are matched; empty means every
    /// binarized conv layer.
    pub kt_layers: Vec<String>,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub normalize_l2: bool,
    /// Clear the Adam moments whenever a new stage starts.
    pub reset_moments: bool,
}

impl Default for KTConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            kt_layers: Vec::new(),
            learning_rate: 1e-4,
            batch_size: 8,
            seed: 0,
            normalize_l2: true,
            reset_moments: true,
        }
    }
}

impl KTConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::Config("lambda1 and lambda2 cannot both be zero".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Tap layers for `student`: the configured set, or all binarized layers.
    pub fn resolve_layers(&self, student: &Model) -> Result<Vec<String>> {
        let binarized = student.binarized_layers();
        if self.kt_layers.is_empty() {
            return Ok(binarized.into_iter().map(String::from).collect());
        }
        for k in &self.kt_layers {
            if student.layer(k).is_none() {
                return Err(Error::invalid(format!("knowledge-transfer layer {k} does not exist")));
            }
            if !binarized.contains(&k.as_str()) {
                return Err(Error::invalid(format!("knowledge-transfer layer {k} is not binarized")));
            }
        }
        Ok(self.kt_layers.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_loc: f64,
    pub l2_per_layer: Vec<(String, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn l2_sum(&self) -> f64 {
        self.l2_per_layer.iter().map(|(_, v)| v).sum()
    }
}

/// `Σ (f_s − f_t)²`, divided by the element count when `normalize`.
pub fn feature_l2(f_teacher: &Tensor, f_student: &Tensor, normalize: bool) -> Result<f64> {
    if f_teacher.shape() != f_student.shape() {
        return Err(Error::shape(format!(
            "teacher feature {:?} vs student feature {:?}",
            f_teacher.shape(),
            f_student.shape()
        )));
    }
    let s: f64 = f_teacher
        .data()
        .iter()
        .zip(f_student.data())
        .map(|(&t, &s)| {
            let d = f64::from(s) - f64::from(t);
            d * d
        })
        .sum();
    Ok(if normalize { s / f_teacher.len() as f64 } else { s })
}

fn feature_l2_grad(f_teacher: &Tensor, f_student: &Tensor, normalize: bool, weight: f64) -> Result<Tensor> {
    let k = (2.0 * weight / if normalize { f_teacher.len() as f64 } else { 1.0 }) as f32;
    f_student.zip_map(f_teacher, |s, t| k * (s - t))
}

pub fn composite_loss(l_cls: f64, l_loc: f64, l2_terms: Vec<(String, f64)>, cfg: &KTConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let parts = [l_cls, l_loc].into_iter().chain(l2_terms.iter().map(|(_, v)| *v));
    if parts.into_iter().any(|v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::NonFinite(format!(
            "loss components must be finite and non-negative: cls {l_cls}, loc {l_loc}"
        )));
    }
    let l2: f64 = l2_terms.iter().map(|(_, v)| v).sum();
    let total = cfg.lambda1 * l_cls + cfg.lambda2 * l_loc + cfg.lambda3 * l2;
    Ok(LossBreakdown { l_cls, l_loc, l2_per_layer: l2_terms, total })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimizerState {
    pub fn new(shapes: &[&[usize]], lr: f32) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn for_model(model: &Model, lr: f32) -> Self {
        let shapes: Vec<Vec<usize>> = model.trainables().iter().map(|(_, _, t)| t.shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        Self::new(&refs, lr)
    }

    pub fn reset(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().fill(0.0);
        }
        self.step = 0;
    }

    /// One update. Returns `false`, leaving everything untouched, when any
    /// gradient is non-finite.
    pub fn adam_step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<bool> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients, {} optimizer slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            warn!("non-finite gradient in parameter {i}; update {} skipped", self.step + 1);
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(true)
    }
}

/// One mini-batch: images `[N, 3, H, W]` and their boxes.
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<Vec<GroundTruth>>,
}

impl Batch {
    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Result<Self> {
        let (images, labels) = data.batch(indices)?;
        Ok(Self { images, labels })
    }
}

fn apply_update(model: &mut Model, opt: &mut OptimizerState, grads: &[Tensor]) -> Result<bool> {
    let params: Vec<&mut Tensor> = model.trainables_mut().into_iter().map(|(_, _, t)| t).collect();
    opt.adam_step(params, grads)
}

struct StepOutcome {
    loss: LossBreakdown,
}

/// Forward, loss, backward and update for the student. With `teacher`
/// features and a positive `λ3` the feature terms join the loss.
fn train_step(
    model: &mut Model,
    batch: &Batch,
    cfg: &KTConfig,
    opt: &mut OptimizerState,
    teacher_feats: Option<(&[String], Vec<Tensor>)>,
) -> Result<StepOutcome> {
    let layout = model.head_layout()?;
    let taps: Vec<String> = teacher_feats.as_ref().map(|(k, _)| k.to_vec()).unwrap_or_default();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &batch.images, BnMode::Train, &taps)?;
    let det = detect::detection_loss_and_grad(tape.value(fwd.head), &batch.labels, &layout, cfg.lambda1, cfg.lambda2)?;
    let mut seeds: Vec<(Var, Tensor)> = vec![(fwd.head, det.grad)];
    let mut l2_terms = Vec::new();
    if let Some((names, feats)) = &teacher_feats {
        for (name, ft) in names.iter().zip(feats) {
            let v = fwd.tap(name).ok_or_else(|| Error::invalid(format!("missing tap {name}")))?;
            let fs = tape.value(v);
            l2_terms.push((name.clone(), feature_l2(ft, fs, cfg.normalize_l2)?));
            if cfg.lambda3 > 0.0 {
                seeds.push((v, feature_l2_grad(ft, fs, cfg.normalize_l2, cfg.lambda3)?));
            }
        }
    }
    let loss = composite_loss(det.l_cls, det.l_loc, l2_terms, cfg)?;
    let grads = tape.backward(seeds)?;
    let grads = model.gradients(&fwd, &tape, &grads)?;
    drop(tape);
    apply_update(model, opt, &grads)?;
    model.update_running_stats(&fwd);
    Ok(StepOutcome { loss })
}

/// One binary-weight fine-tuning step: re-binarize, forward with `αB`,
/// backward, map gradients onto latent weights, update.
pub fn bwn_finetune_step(
    model: &mut Model,
    batch: &Batch,
    cfg: &KTConfig,
    opt: &mut OptimizerState,
) -> Result<LossBreakdown> {
    if model.binarized_layers().is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one binarized layer"));
    }
    let plain = KTConfig { lambda3: 0.0, ..cfg.clone() };
    Ok(train_step(model, batch, &plain, opt, None)?.loss)
}

/// Teacher features at `layers` with batch statistics and no gradient record.
pub fn teacher_features(teacher: &Model, images: &Tensor, layers: &[String]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::no_grad();
    let fwd = teacher.forward(&mut tape, images, BnMode::BatchStats, layers)?;
    layers
        .iter()
        .map(|k| Ok(tape.value(fwd.tap(k).ok_or_else(|| Error::invalid(format!("missing tap {k}")))?).clone()))
        .collect()
}

fn kt_step_unchecked(
    teacher: &Model,
    student: &mut Model,
    batch: &Batch,
    cfg: &KTConfig,
    opt: &mut OptimizerState,
    layers: &[String],
) -> Result<LossBreakdown> {
    let feats = teacher_features(teacher, &batch.images, layers)?;
    Ok(train_step(student, batch, cfg, opt, Some((layers, feats)))?.loss)
}

/// One knowledge-transfer step. The teacher runs without a tape and is
/// never modified; only the student is updated.
pub fn kt_train_step(
    teacher: &Model,
    student: &mut Model,
    batch: &Batch,
    cfg: &KTConfig,
    opt: &mut OptimizerState,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if let Some(name) = teacher.binarized_layers().first() {
        return Err(Error::invalid(format!("teacher layer {name} is binarized")));
    }
    if student.binarized_layers().is_empty() {
        return Err(Error::invalid("knowledge transfer starts from a binarized student"));
    }
    let layers = cfg.resolve_layers(student)?;
    kt_step_unchecked(teacher, student, batch, cfg, opt, &layers)
}

/// Per-epoch record written to the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: String,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l2_sum: f64,
    pub total: f64,
    pub val_map: Option<f64>,
    pub binarized_layers: usize,
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for e in log {
        let map = e.val_map.map_or(String::new(), |m| format!("{m:.6}"));
        let _ =
            writeln!(s, "{},{},{:.6},{:.6},{:.6},{:.6},{map}", e.epoch, e.stage, e.l_cls, e.l_loc, e.l2_sum, e.total);
    }
    s
}

/// Per-image detections at the evaluation threshold and the resulting mAP.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(MapReport, Vec<ImageEval>)> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if let Some(g) = data.samples.iter().flat_map(|s| &s.labels).find(|g| g.class_id >= model.meta.classes) {
        return Err(Error::Config(format!(
            "label class {} outside the model's {} classes",
            g.class_id, model.meta.classes
        )));
    }
    let mut images = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = Batch::from_dataset(data, chunk)?;
        let dets = model.detect(&batch.images, detect::EVAL_CONF_THRESH, detect::DEFAULT_NMS_IOU)?;
        for (d, gts) in dets.into_iter().zip(batch.labels) {
            images.push(ImageEval { dets: d, gts });
        }
    }
    Ok((detect::mean_ap(&images, model.meta.classes, MAP_IOU), images))
}

/// Source of per-epoch mini-batch orders.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::datasynth::splitmix64(seed ^ (epoch as u64).rotate_left(32)));
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StepKind {
    Teacher,
    Finetune,
    Kt,
}

struct EpochRunner<'a> {
    train: &'a Dataset,
    val: Option<&'a Dataset>,
    cfg: &'a KTConfig,
    epoch: usize,
    log: Vec<EpochLog>,
}

impl EpochRunner<'_> {
    fn run(
        &mut self,
        model: &mut Model,
        teacher: Option<&Model>,
        kind: StepKind,
        stage: &str,
        opt: &mut OptimizerState,
    ) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let layers = match (kind, teacher) {
            (StepKind::Kt, Some(_)) => self.cfg.resolve_layers(model)?,
            _ => Vec::new(),
        };
        let epoch = self.epoch;
        let order = epoch_order(self.cfg.seed, epoch, self.train.len());
        let (mut cls, mut loc, mut l2, mut total, mut steps) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(self.cfg.batch_size) {
            let batch = Batch::from_dataset(self.train, idx)?;
            let loss = match (kind, teacher) {
                (StepKind::Kt, Some(t)) => kt_step_unchecked(t, model, &batch, self.cfg, opt, &layers),
                (StepKind::Finetune, _) => bwn_finetune_step(model, &batch, self.cfg, opt),
                _ => {
                    train_step(model, &batch, &KTConfig { lambda3: 0.0, ..self.cfg.clone() }, opt, None).map(|o| o.loss)
                }
            }
            .map_err(|e| match e {
                Error::NonFinite(d) => Error::Divergence { epoch, detail: d },
                e => e,
            })?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence { epoch, detail: format!("loss {} at step {}", loss.total, steps + 1) });
            }
            cls += loss.l_cls;
            loc += loss.l_loc;
            l2 += loss.l2_sum();
            total += loss.total;
            steps += 1;
        }
        let k = steps as f64;
        let val_map = match self.val {
            Some(v) => Some(evaluate(model, v)?.0.map),
            None => None,
        };
        info!(
            "epoch {epoch} [{stage}] cls {:.4} loc {:.4} l2 {:.4} total {:.4} val mAP {}",
            cls / k,
            loc / k,
            l2 / k,
            total / k,
            val_map.map_or("-".into(), |m| format!("{m:.4}"))
        );
        self.log.push(EpochLog {
            epoch,
            stage: stage.to_string(),
            l_cls: cls / k,
            l_loc: loc / k,
            l2_sum: l2 / k,
            total: total / k,
            val_map,
            binarized_layers: model.binarized_layers().len(),
        });
        self.epoch += 1;
        Ok(())
    }
}

/// Trains a full-precision model on the detection loss alone.
pub fn train_teacher(
    model: &Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &KTConfig,
    epochs: usize,
) -> Result<(Model, Vec<EpochLog>)> {
    cfg.validate()?;
    if let Some(name) = model.binarized_layers().first() {
        return Err(Error::invalid(format!("teacher layer {name} is binarized")));
    }
    let mut model = model.clone();
    let mut opt = OptimizerState::for_model(&model, cfg.learning_rate);
    let mut runner = EpochRunner { train, val, cfg, epoch: 1, log: Vec::new() };
    for _ in 0..epochs {
        runner.run(&mut model, None, StepKind::Teacher, "FP", &mut opt)?;
    }
    Ok((model, runner.log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurriculumMode {
    /// M0 → M1 → M2 with plain fine-tuning.
    Stage,
    /// Full binarization from the start, same total budget.
    NonStage,
    /// M0 fine-tuning, then knowledge transfer at full binarization.
    Kt,
    /// M0 fine-tuning, then knowledge transfer through every later stage.
    KtStagewise,
}

impl CurriculumMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stage" => Some(Self::Stage),
            "nonstage" | "non-stage" => Some(Self::NonStage),
            "kt" => Some(Self::Kt),
            "kt-stagewise" => Some(Self::KtStagewise),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Stage => "stage",
            Self::NonStage => "nonstage",
            Self::Kt => "kt",
            Self::KtStagewise => "kt-stagewise",
        }
    }
}

pub struct CurriculumResult {
    pub student: Model,
    pub log: Vec<EpochLog>,
    pub teacher_hash: String,
}

/// Runs one training regime from a trained teacher. Every mode spends the
/// schedule's total epoch budget and logs one row per epoch.
pub fn run_curriculum(
    teacher: &Model,
    train: &Dataset,
    val: Option<&Dataset>,
    schedule: &BinarizationSchedule,
    cfg: &KTConfig,
    mode: CurriculumMode,
) -> Result<CurriculumResult> {
    cfg.validate()?;
    schedule.validate()?;
    let teacher_hash = teacher.param_hash();
    let mut student = init_student_from_teacher(teacher)?;
    let mut opt = OptimizerState::for_model(&student, cfg.learning_rate);
    let mut runner = EpochRunner { train, val, cfg, epoch: 1, log: Vec::new() };
    let last = schedule.stages.len() - 1;
    let enter =
        |student: &mut Model, sched: &BinarizationSchedule, idx: usize, opt: &mut OptimizerState| -> Result<()> {
            student.apply_stage(sched, idx)?;
            if cfg.reset_moments {
                opt.reset();
            }
            Ok(())
        };
    match mode {
        CurriculumMode::Stage => {
            for (i, st) in schedule.stages.iter().enumerate() {
                enter(&mut student, schedule, i, &mut opt)?;
                for _ in 0..st.epochs {
                    runner.run(&mut student, None, StepKind::Finetune, &st.name, &mut opt)?;
                }
            }
        }
        CurriculumMode::NonStage => {
            let all = nonstage_schedule(schedule.total_epochs());
            enter(&mut student, &all, 0, &mut opt)?;
            for _ in 0..schedule.total_epochs() {
                runner.run(&mut student, None, StepKind::Finetune, "M2", &mut opt)?;
            }
        }
        CurriculumMode::Kt | CurriculumMode::KtStagewise => {
            let first = &schedule.stages[0];
            enter(&mut student, schedule, 0, &mut opt)?;
            for _ in 0..first.epochs {
                runner.run(&mut student, None, StepKind::Finetune, &first.name, &mut opt)?;
            }
            if mode == CurriculumMode::Kt {
                let rest: usize = schedule.stages[1..].iter().map(|s| s.epochs).sum();
                if last > 0 {
                    enter(&mut student, schedule, last, &mut opt)?;
                }
                let name = format!("{}-KT", schedule.stages[last].name);
                for _ in 0..rest {
                    runner.run(&mut student, Some(teacher), StepKind::Kt, &name, &mut opt)?;
                }
            } else {
                for (i, st) in schedule.stages.iter().enumerate().skip(1) {
                    enter(&mut student, schedule, i, &mut opt)?;
                    let name = format!("{}-KT", st.name);
                    for _ in 0..st.epochs {
                        runner.run(&mut student, Some(teacher), StepKind::Kt, &name, &mut opt)?;
                    }
                }
            }
        }
    }
    if teacher.param_hash() != teacher_hash {
        return Err(Error::invalid("teacher parameters changed during training"));
    }
    Ok(CurriculumResult { student, log: runner.log, teacher_hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{generate, SceneConfig};
    use crate::network::{build_minidark, default_schedule, DEFAULT_ANCHORS};
    use rand::Rng;

    fn tiny(n: usize, seed: u64) -> Dataset {
        generate(&SceneConfig { seed, ..SceneConfig::default() }, n).unwrap()
    }

    #[test]
    fn feature_l2_examples() {
        let fs = Tensor::from_vec(vec![1.0, 2.0]);
        let ft = Tensor::from_vec(vec![0.0, 0.0]);
        assert_eq!(feature_l2(&ft, &fs, false).unwrap(), 5.0);
        assert_eq!(feature_l2(&ft, &fs, true).unwrap(), 2.5);
        assert_eq!(feature_l2(&fs, &fs, false).unwrap(), 0.0);
        assert!(feature_l2(&ft, &Tensor::from_vec(vec![1.0]), false).is_err());
    }

    #[test]
    fn feature_l2_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(1..500);
            let a = Tensor::from_fn(&[n], |_| rng.random_range(-3.0f32..3.0));
            let b = Tensor::from_fn(&[n], |_| rng.random_range(-3.0f32..3.0));
            let mut want = 0.0f64;
            for i in 0..n {
                want += (f64::from(b.data()[i]) - f64::from(a.data()[i])).powi(2);
            }
            let got = feature_l2(&a, &b, false).unwrap();
            assert!((got - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn composite_examples() {
        let cfg = KTConfig { lambda3: 0.1, ..KTConfig::default() };
        let l = composite_loss(2.0, 3.0, vec![("a".into(), 4.0), ("b".into(), 6.0)], &cfg).unwrap();
        assert!((l.total - 6.0).abs() < 1e-12);
        let plain = KTConfig { lambda3: 0.0, ..KTConfig::default() };
        assert_eq!(composite_loss(2.0, 3.0, vec![("a".into(), 4.0)], &plain).unwrap().total, 5.0);
        let none = KTConfig { lambda1: 0.0, lambda2: 0.0, ..KTConfig::default() };
        assert!(composite_loss(1.0, 1.0, vec![], &none).is_err());
        assert!(composite_loss(-1.0, 1.0, vec![], &cfg).is_err());
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut opt = OptimizerState::new(&[&[1]], 0.1);
        let mut p = Tensor::from_vec(vec![1.0f32]);
        assert!(opt.adam_step(vec![&mut p], &[Tensor::from_vec(vec![1.0])]).unwrap());
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        let mut opt = OptimizerState::new(&[&[1]], 0.1);
        let mut q = Tensor::from_vec(vec![2.0f32]);
        opt.adam_step(vec![&mut q], &[Tensor::from_vec(vec![0.0])]).unwrap();
        assert_eq!(q.data()[0], 2.0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut opt = OptimizerState::new(&[&[1]], 0.1);
        let mut x = Tensor::from_vec(vec![1.0f32]);
        // scalar reference of the same recurrence
        let (mut m, mut v, mut xr) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=5 {
            let before = x.data()[0];
            let g = x.scale(2.0);
            opt.adam_step(vec![&mut x], &[g]).unwrap();
            assert!(x.data()[0] < before);
            let gr = 2.0 * xr;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            xr -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((f64::from(x.data()[0]) - xr).abs() < 1e-5);
        }
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut opt = OptimizerState::new(&[&[2]], 0.1);
        let mut p = Tensor::from_vec(vec![1.0f32, 1.0]);
        assert!(!opt.adam_step(vec![&mut p], &[Tensor::from_vec(vec![f32::NAN, 0.0])]).unwrap());
        assert_eq!(p.data(), [1.0, 1.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn zero_lr_step_is_a_no_op() {
        let data = tiny(4, 1);
        let mut m = build_minidark(3, &DEFAULT_ANCHORS, 3).unwrap();
        m.apply_stage(&default_schedule(), 0).unwrap();
        let cfg = KTConfig { learning_rate: 0.0, ..KTConfig::default() };
        let mut opt = OptimizerState::for_model(&m, 0.0);
        let batch = Batch::from_dataset(&data, &[0, 1, 2, 3]).unwrap();
        let weights: Vec<Tensor> = m.trainables().iter().map(|(_, _, t)| (*t).clone()).collect();
        let a = bwn_finetune_step(&mut m, &batch, &cfg, &mut opt).unwrap();
        let b = bwn_finetune_step(&mut m, &batch, &cfg, &mut opt).unwrap();
        assert_eq!(a, b);
        let after: Vec<Tensor> = m.trainables().iter().map(|(_, _, t)| (*t).clone()).collect();
        assert_eq!(weights, after);
    }

    #[test]
    fn full_precision_taps_have_zero_gap() {
        let data = tiny(4, 2);
        let teacher = build_minidark(3, &DEFAULT_ANCHORS, 4).unwrap();
        let mut student = init_student_from_teacher(&teacher).unwrap();
        let cfg = KTConfig::default();
        let mut opt = OptimizerState::for_model(&student, 1e-4);
        let batch = Batch::from_dataset(&data, &[0, 1, 2, 3]).unwrap();
        let layers: Vec<String> = ["conv6", "conv7", "conv8"].map(String::from).to_vec();
        let loss = kt_step_unchecked(&teacher, &mut student, &batch, &cfg, &mut opt, &layers).unwrap();
        assert_eq!(loss.l2_per_layer.len(), 3);
        assert!(loss.l2_per_layer.iter().all(|(_, v)| *v == 0.0));
        assert!(kt_train_step(&teacher, &mut student, &batch, &cfg, &mut opt).is_err());
    }

    #[test]
    fn kt_rejects_bad_layers() {
        let data = tiny(2, 2);
        let teacher = build_minidark(3, &DEFAULT_ANCHORS, 4).unwrap();
        let mut student = init_student_from_teacher(&teacher).unwrap();
        student.apply_stage(&default_schedule(), 0).unwrap();
        let batch = Batch::from_dataset(&data, &[0, 1]).unwrap();
        let mut opt = OptimizerState::for_model(&student, 1e-4);
        for bad in ["conv2", "nope"] {
            let cfg = KTConfig { kt_layers: vec![bad.into()], ..KTConfig::default() };
            assert!(kt_train_step(&teacher, &mut student, &batch, &cfg, &mut opt).is_err());
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let log = vec![EpochLog {
            epoch: 1,
            stage: "M0".into(),
            l_cls: 1.0,
            l_loc: 2.0,
            l2_sum: 0.0,
            total: 3.0,
            val_map: Some(0.5),
            binarized_layers: 3,
        }];
        assert_eq!(metrics_csv(&log), format!("{METRICS_HEADER}\n1,M0,1.000000,2.000000,0.000000,3.000000,0.500000\n"));
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(5, 1, 50);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(5, 1, 50));
        assert_ne!(a, epoch_order(5, 2, 50));
    }
}
