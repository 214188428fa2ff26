//! The miniature detector: layer graph, stage-wise binarization schedule,
//! forward pass on a tape, and parameter bookkeeping.

mod format;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::binarize::{binarize_layer, effective_layer, ste_backward_layer, BinarizedFilter};
use crate::detect::{self, DetectionBox, HeadLayout};
use crate::error::{Error, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

pub use format::{load_model, read_model, save_model, size_report, write_model, LayerSize, SizeReport};

pub const DEFAULT_ANCHORS: [(f64, f64); 5] = [(0.16, 0.16), (0.26, 0.26), (0.36, 0.36), (0.2, 0.36), (0.36, 0.2)];
pub const LEAKY_SLOPE: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;
pub const INPUT_SIDE: usize = 96;
pub const GRID: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    First,
    A,
    B,
    C,
    Last,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::First, Group::A, Group::B, Group::C, Group::Last];

    pub fn binarizable(self) -> bool {
        matches!(self, Group::A | Group::B | Group::C)
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "FIRST" => Some(Group::First),
            "A" => Some(Group::A),
            "B" => Some(Group::B),
            "C" => Some(Group::C),
            "LAST" => Some(Group::Last),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::First => "FIRST",
            Group::A => "A",
            Group::B => "B",
            Group::C => "C",
            Group::Last => "LAST",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    ConvFp,
    ConvBin,
    MaxPool,
    Reorg,
    Concat,
    DetectHead,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::ConvFp,
        LayerKind::ConvBin,
        LayerKind::MaxPool,
        LayerKind::Reorg,
        LayerKind::Concat,
        LayerKind::DetectHead,
    ];

    pub fn tag(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::ConvFp | LayerKind::ConvBin | LayerKind::DetectHead)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::ConvFp => "conv-fp",
            LayerKind::ConvBin => "conv-bin",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Reorg => "reorg",
            LayerKind::Concat => "concat",
            LayerKind::DetectHead => "detect-head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }

    /// Weights per output filter.
    pub fn filter_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Where a layer reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Image,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub group: Group,
    pub inputs: Vec<Source>,
    pub conv: Option<ConvSpec>,
    pub binarized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
}

impl BatchNorm {
    fn identity(c: usize) -> Self {
        Self {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            mean: Tensor::zeros(&[c]),
            var: Tensor::full(&[c], 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// Latent real weights; for a layer loaded from a file these are `αB`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Option<ConvParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub classes: usize,
    pub anchors: Vec<(f64, f64)>,
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub meta: ModelMeta,
    /// Index of the last schedule stage applied.
    pub stage: Option<usize>,
}

/// How batch norm layers normalize during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; the caller may fold them into the running averages.
    Train,
    /// Batch statistics, running averages left alone.
    BatchStats,
    /// Running averages.
    Infer,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    /// Groups binarized for the first time at this stage.
    pub groups: Vec<Group>,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct BinarizationSchedule {
    pub stages: Vec<Stage>,
}

fn depth(g: Group) -> u8 {
    g.tag()
}

impl BinarizationSchedule {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let s = Self { stages };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("schedule without stages"));
        }
        let mut seen: Vec<Group> = Vec::new();
        for st in &self.stages {
            if st.groups.is_empty() {
                return Err(Error::invalid(format!("stage {} binarizes nothing new", st.name)));
            }
            for &g in &st.groups {
                if !g.binarizable() {
                    return Err(Error::invalid(format!("stage {} would binarize group {g}", st.name)));
                }
                if seen.contains(&g) {
                    return Err(Error::invalid(format!("group {g} binarized twice")));
                }
                if let Some(&shallowest) = seen.iter().min_by_key(|&&g| depth(g)) {
                    if depth(g) >= depth(shallowest) {
                        return Err(Error::invalid(format!(
                            "stage {} binarizes group {g} after the shallower group {shallowest}",
                            st.name
                        )));
                    }
                }
            }
            seen.extend(&st.groups);
        }
        Ok(())
    }

    /// Groups binarized once stage `index` has been applied.
    pub fn cumulative(&self, index: usize) -> Result<Vec<Group>> {
        if index >= self.stages.len() {
            return Err(Error::invalid(format!("stage index {index} out of range for {} stages", self.stages.len())));
        }
        let mut out: Vec<Group> = self.stages[..=index].iter().flat_map(|s| s.groups.iter().copied()).collect();
        out.sort();
        Ok(out)
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }
}

/// M0 = {C}, M1 = {C, B}, M2 = {C, B, A}.
pub fn default_schedule() -> BinarizationSchedule {
    schedule_with_epochs([2, 15, 30])
}

pub fn schedule_with_epochs(epochs: [usize; 3]) -> BinarizationSchedule {
    let stage = |name: &str, g: Group, epochs: usize| Stage { name: name.into(), groups: vec![g], epochs };
    BinarizationSchedule {
        stages: vec![
            stage("M0", Group::C, epochs[0]),
            stage("M1", Group::B, epochs[1]),
            stage("M2", Group::A, epochs[2]),
        ],
    }
}

/// Single stage binarizing every group at once.
pub fn nonstage_schedule(epochs: usize) -> BinarizationSchedule {
    BinarizationSchedule {
        stages: vec![Stage { name: "M2".into(), groups: vec![Group::C, Group::B, Group::A], epochs }],
    }
}

/// Output of [`Model::forward`]: the head node, requested taps, and the
/// bookkeeping needed to turn tape gradients into parameter gradients.
pub struct Forward {
    pub head: Var,
    pub taps: Vec<(String, Var)>,
    params: Vec<Var>,
    filters: Vec<Option<Vec<BinarizedFilter<f32>>>>,
    batch_stats: Vec<(usize, Tensor, Tensor)>,
}

impl Forward {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Identifies one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl Model {
    pub fn head_layout(&self) -> Result<HeadLayout> {
        HeadLayout::new(GRID, self.meta.anchors.clone(), self.meta.classes)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.spec.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.spec.name == name)
    }

    pub fn binarized_layers(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| l.spec.binarized).map(|l| l.spec.name.as_str()).collect()
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.spec.kind.is_conv())
    }

    pub fn parameter_count(&self) -> usize {
        self.trainables().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Output `(channels, height, width)` of every layer.
    pub fn infer_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let input = |s: &Source| -> Result<(usize, usize, usize)> {
                match *s {
                    Source::Image => Ok(self.meta.input),
                    Source::Layer(j) if j < i => Ok(shapes[j]),
                    Source::Layer(j) => {
                        Err(Error::invalid(format!("layer {} reads layer {j}, which does not precede it", l.spec.name)))
                    }
                }
            };
            let arity = if l.spec.kind == LayerKind::Concat { 2 } else { 1 };
            if l.spec.inputs.len() != arity {
                return Err(Error::invalid(format!("layer {} needs {arity} input(s)", l.spec.name)));
            }
            let x = input(&l.spec.inputs[0])?;
            let out = match l.spec.kind {
                k if k.is_conv() => {
                    let c = l
                        .spec
                        .conv
                        .ok_or_else(|| Error::invalid(format!("conv layer {} without geometry", l.spec.name)))?;
                    if c.c_in != x.0 {
                        return Err(Error::shape(format!(
                            "layer {} expects {} channels, receives {}",
                            l.spec.name, c.c_in, x.0
                        )));
                    }
                    let oh = crate::ops::conv_out_dim(x.1, c.kernel, c.stride, c.pad)?;
                    let ow = crate::ops::conv_out_dim(x.2, c.kernel, c.stride, c.pad)?;
                    (c.c_out, oh, ow)
                }
                LayerKind::MaxPool | LayerKind::Reorg if x.1 % 2 != 0 || x.2 % 2 != 0 => {
                    return Err(Error::shape(format!("layer {} needs even spatial size, got {x:?}", l.spec.name)));
                }
                LayerKind::MaxPool => (x.0, x.1 / 2, x.2 / 2),
                LayerKind::Reorg => (x.0 * 4, x.1 / 2, x.2 / 2),
                _ => {
                    let y = input(&l.spec.inputs[1])?;
                    if (x.1, x.2) != (y.1, y.2) {
                        return Err(Error::shape(format!("concat {} joins {x:?} and {y:?}", l.spec.name)));
                    }
                    (x.0 + y.0, x.1, x.2)
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// Checks the structural invariants: single image input, a detection
    /// head as the only sink, consistent channels, FIRST/LAST in full
    /// precision, and parameters matching their layer geometry.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.infer_shapes()?;
        let mut names: Vec<&str> = self.layers.iter().map(|l| l.spec.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("layer names are not unique"));
        }
        let image_readers = self.layers.iter().filter(|l| l.spec.inputs.contains(&Source::Image)).count();
        if image_readers != 1 {
            return Err(Error::invalid(format!("{image_readers} layers read the image, expected exactly one")));
        }
        let last = self.layers.last().ok_or_else(|| Error::invalid("model without layers"))?;
        if last.spec.kind != LayerKind::DetectHead
            || self.layers.iter().filter(|l| l.spec.kind == LayerKind::DetectHead).count() != 1
        {
            return Err(Error::invalid("the final layer must be the only detection head"));
        }
        for (i, l) in self.layers.iter().enumerate().take(self.layers.len() - 1) {
            if !self.layers.iter().any(|m| m.spec.inputs.contains(&Source::Layer(i))) {
                return Err(Error::invalid(format!("layer {} has no consumer", l.spec.name)));
            }
        }
        let expect = (self.meta.anchors.len() * (5 + self.meta.classes), GRID, GRID);
        if shapes.last() != Some(&expect) {
            return Err(Error::shape(format!("head produces {:?}, expected {expect:?}", shapes.last())));
        }
        for l in &self.layers {
            let s = &l.spec;
            if s.binarized && (!s.group.binarizable() || s.kind != LayerKind::ConvBin) {
                return Err(Error::invalid(format!(
                    "layer {} ({}, group {}) cannot be binarized",
                    s.name,
                    s.kind.name(),
                    s.group
                )));
            }
            if s.kind == LayerKind::ConvBin && !s.binarized {
                return Err(Error::invalid(format!("layer {} is conv-bin but not flagged binarized", s.name)));
            }
            match (s.conv, &l.params) {
                (Some(c), Some(p)) => {
                    let co = c.c_out;
                    let ok = p.weight.shape() == c.weight_shape()
                        && p.bias.as_ref().is_none_or(|b| b.shape() == [co])
                        && p.bn.as_ref().is_none_or(|bn| {
                            [&bn.gamma, &bn.beta, &bn.mean, &bn.var].iter().all(|t| t.shape() == [co])
                        });
                    if !ok {
                        return Err(Error::shape(format!("parameters of {} do not match its geometry", s.name)));
                    }
                    if (s.kind == LayerKind::DetectHead) != p.bn.is_none() {
                        return Err(Error::invalid(format!("layer {}: only the head runs without batch norm", s.name)));
                    }
                }
                (None, None) => {}
                _ => return Err(Error::invalid(format!("layer {}: parameters and geometry disagree", s.name))),
            }
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order: per conv layer its weight, bias,
    /// BN scale and BN shift (those present).
    pub fn trainables(&self) -> Vec<(usize, ParamSlot, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let Some(p) = &l.params else { continue };
            out.push((i, ParamSlot::Weight, &p.weight));
            if let Some(b) = &p.bias {
                out.push((i, ParamSlot::Bias, b));
            }
            if let Some(bn) = &p.bn {
                out.push((i, ParamSlot::Gamma, &bn.gamma));
                out.push((i, ParamSlot::Beta, &bn.beta));
            }
        }
        out
    }

    pub fn trainables_mut(&mut self) -> Vec<(usize, ParamSlot, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let Some(p) = &mut l.params else { continue };
            out.push((i, ParamSlot::Weight, &mut p.weight));
            if let Some(b) = &mut p.bias {
                out.push((i, ParamSlot::Bias, b));
            }
            if let Some(bn) = &mut p.bn {
                out.push((i, ParamSlot::Gamma, &mut bn.gamma));
                out.push((i, ParamSlot::Beta, &mut bn.beta));
            }
        }
        out
    }

    /// SHA-256 over every parameter and running statistic, hex encoded.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update(l.spec.name.as_bytes());
            h.update([l.spec.binarized as u8]);
            let Some(p) = &l.params else { continue };
            let mut tensors = vec![&p.weight];
            tensors.extend(&p.bias);
            if let Some(bn) = &p.bn {
                tensors.extend([&bn.gamma, &bn.beta, &bn.mean, &bn.var]);
            }
            for t in tensors {
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Flags exactly the conv layers of `groups` as binarized.
    pub fn set_binarized_groups(&mut self, groups: &[Group]) -> Result<()> {
        for l in &mut self.layers {
            if !matches!(l.spec.kind, LayerKind::ConvFp | LayerKind::ConvBin) {
                continue;
            }
            let on = groups.contains(&l.spec.group);
            if on && !l.spec.group.binarizable() {
                return Err(Error::invalid(format!("group {} must stay full precision", l.spec.group)));
            }
            l.spec.binarized = on;
            l.spec.kind = if on { LayerKind::ConvBin } else { LayerKind::ConvFp };
        }
        Ok(())
    }

    /// Binarizes the cumulative group set of `schedule.stages[index]`.
    /// Stages may be re-applied but never rolled back.
    pub fn apply_stage(&mut self, schedule: &BinarizationSchedule, index: usize) -> Result<()> {
        schedule.validate()?;
        let groups = schedule.cumulative(index)?;
        if let Some(cur) = self.stage {
            if index < cur {
                return Err(Error::invalid(format!(
                    "stage {} cannot follow stage {}",
                    schedule.stages[index].name,
                    schedule.stages.get(cur).map_or("?", |s| s.name.as_str())
                )));
            }
        }
        let before: Vec<String> = self.binarized_layers().into_iter().map(String::from).collect();
        self.set_binarized_groups(&groups)?;
        if let Some(lost) = before.iter().find(|n| !self.binarized_layers().contains(&n.as_str())) {
            return Err(Error::invalid(format!(
                "stage {} would restore layer {lost} to full precision",
                schedule.stages[index].name
            )));
        }
        self.stage = Some(index);
        Ok(())
    }

    /// Per-layer binarized filters of the current latent weights.
    pub fn binarized_snapshot(&self) -> Result<Vec<(String, Vec<BinarizedFilter<f32>>)>> {
        self.layers
            .iter()
            .filter(|l| l.spec.binarized)
            .map(|l| Ok((l.spec.name.clone(), binarize_layer(&l.params.as_ref().unwrap().weight)?)))
            .collect()
    }

    /// Records the network on `tape`. Binarized layers are re-binarized from
    /// their latent weights and use `αB`.
    pub fn forward(&self, tape: &mut Tape<f32>, input: &Tensor, mode: BnMode, taps: &[String]) -> Result<Forward> {
        let (n, c, h, w) = input.nchw()?;
        if (c, h, w) != self.meta.input {
            return Err(Error::shape(format!(
                "input {:?} does not match model input {:?}",
                input.shape(),
                self.meta.input
            )));
        }
        for t in taps {
            if !self.layer(t).is_some_and(|l| l.spec.kind.is_conv()) {
                return Err(Error::invalid(format!("tap {t} is not a conv layer of this model")));
            }
        }
        let image = tape.constant(input.clone().reshape(&[n, c, h, w])?);
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut fwd =
            Forward { head: image, taps: Vec::new(), params: Vec::new(), filters: Vec::new(), batch_stats: Vec::new() };
        for (i, l) in self.layers.iter().enumerate() {
            let src = |s: Source| match s {
                Source::Image => image,
                Source::Layer(j) => outs[j],
            };
            let x = src(l.spec.inputs[0]);
            let y = match l.spec.kind {
                LayerKind::MaxPool => tape.max_pool2(x)?,
                LayerKind::Reorg => tape.reorg2(x)?,
                LayerKind::Concat => tape.concat(x, src(l.spec.inputs[1]))?,
                _ => self.conv_block(tape, i, x, mode, &mut fwd)?,
            };
            if taps.contains(&l.spec.name) {
                fwd.taps.push((l.spec.name.clone(), y));
            }
            outs.push(y);
        }
        fwd.head = *outs.last().unwrap();
        Ok(fwd)
    }

    fn conv_block(&self, tape: &mut Tape<f32>, i: usize, x: Var, mode: BnMode, fwd: &mut Forward) -> Result<Var> {
        let l = &self.layers[i];
        let spec = l.spec.conv.unwrap();
        let p = l.params.as_ref().unwrap();
        let (weight, filters) = if l.spec.binarized {
            let f = binarize_layer(&p.weight)?;
            (effective_layer(&f)?, Some(f))
        } else {
            (p.weight.clone(), None)
        };
        let wv = tape.param(weight);
        fwd.params.push(wv);
        fwd.filters.push(filters);
        let bv = match &p.bias {
            Some(b) => {
                let v = tape.param(b.clone());
                fwd.params.push(v);
                fwd.filters.push(None);
                v
            }
            None => tape.constant(Tensor::zeros(&[spec.c_out])),
        };
        let y = tape.conv2d(x, wv, bv, spec.stride, spec.pad)?;
        let Some(bn) = &p.bn else { return Ok(y) };
        let g = tape.param(bn.gamma.clone());
        let b = tape.param(bn.beta.clone());
        fwd.params.extend([g, b]);
        fwd.filters.extend([None, None]);
        let y = match mode {
            BnMode::Infer => tape.batch_norm_infer(y, g, b, &bn.mean, &bn.var, BN_EPS)?,
            BnMode::Train | BnMode::BatchStats => {
                let o = tape.batch_norm_train(y, g, b, BN_EPS)?;
                if mode == BnMode::Train {
                    fwd.batch_stats.push((i, o.mean, o.var));
                }
                o.out
            }
        };
        tape.leaky_relu(y, LEAKY_SLOPE)
    }

    /// Gradients w.r.t. [`Model::trainables`], with binarized weights mapped
    /// back onto their latent values.
    pub fn gradients(&self, fwd: &Forward, tape: &Tape<f32>, grads: &Grads<f32>) -> Result<Vec<Tensor>> {
        let trainables = self.trainables();
        if trainables.len() != fwd.params.len() {
            return Err(Error::invalid("forward record does not belong to this model"));
        }
        trainables
            .iter()
            .zip(fwd.params.iter().zip(&fwd.filters))
            .map(|((_, _, latent), (&v, filters))| {
                let g = grads.get_or_zeros(v, tape.value(v));
                match filters {
                    Some(f) => ste_backward_layer(&g, latent, f),
                    None => Ok(g),
                }
            })
            .collect()
    }

    /// Folds the batch statistics of a [`BnMode::Train`] forward into the
    /// running averages.
    pub fn update_running_stats(&mut self, fwd: &Forward) {
        for (i, mean, var) in &fwd.batch_stats {
            let bn = self.layers[*i].params.as_mut().and_then(|p| p.bn.as_mut()).expect("batch norm layer");
            let m = BN_MOMENTUM;
            for (r, &b) in bn.mean.data_mut().iter_mut().zip(mean.data()) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, &b) in bn.var.data_mut().iter_mut().zip(var.data()) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Head output in inference mode.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let fwd = self.forward(&mut tape, input, BnMode::Infer, &[])?;
        Ok(tape.value(fwd.head).clone())
    }

    /// Decoded, suppressed detections for each image of a batch.
    pub fn detect(&self, input: &Tensor, conf_thresh: f64, nms_iou: f64) -> Result<Vec<Vec<DetectionBox>>> {
        let head = self.predict(input)?;
        let layout = self.head_layout()?;
        let (n, c, h, w) = head.nchw()?;
        let per = c * h * w;
        (0..n)
            .map(|i| {
                let one = Tensor::new(&[c, h, w], head.data()[i * per..(i + 1) * per].to_vec())?;
                detect::nms(&detect::decode(&one, &layout, conf_thresh)?, nms_iou)
            })
            .collect()
    }
}

/// Builds the fixed miniature detector with weights drawn uniformly from
/// `±sqrt(2/fan_in)`.
pub fn build_minidark(classes: usize, anchors: &[(f64, f64)], seed: u64) -> Result<Model> {
    if classes == 0 || anchors.is_empty() {
        return Err(Error::invalid("need at least one class and one anchor"));
    }
    let mut layers = Vec::new();
    let conv = |name: &str, group: Group, input: Source, c_in: usize, c_out: usize, kernel: usize| {
        let kind = if group == Group::Last { LayerKind::DetectHead } else { LayerKind::ConvFp };
        LayerSpec {
            name: name.into(),
            kind,
            group,
            inputs: vec![input],
            conv: Some(ConvSpec { c_in, c_out, kernel, stride: 1, pad: kernel / 2 }),
            binarized: false,
        }
    };
    let other = |name: &str, kind: LayerKind, group: Group, inputs: Vec<Source>| LayerSpec {
        name: name.into(),
        kind,
        group,
        inputs,
        conv: None,
        binarized: false,
    };
    let l = Source::Layer;
    let head_c = anchors.len() * (5 + classes);
    let specs = vec![
        conv("conv1", Group::First, Source::Image, 3, 16, 3),
        other("pool1", LayerKind::MaxPool, Group::First, vec![l(0)]),
        conv("conv2", Group::A, l(1), 16, 32, 3),
        conv("conv3", Group::A, l(2), 32, 32, 3),
        other("pool2", LayerKind::MaxPool, Group::A, vec![l(3)]),
        conv("conv4", Group::B, l(4), 32, 64, 3),
        conv("conv5", Group::B, l(5), 64, 64, 3),
        other("pool3", LayerKind::MaxPool, Group::B, vec![l(6)]),
        conv("conv6", Group::C, l(7), 64, 128, 3),
        conv("conv7", Group::C, l(8), 128, 128, 3),
        other("pool4", LayerKind::MaxPool, Group::C, vec![l(9)]),
        other("reorg", LayerKind::Reorg, Group::C, vec![l(7)]),
        other("concat", LayerKind::Concat, Group::C, vec![l(11), l(10)]),
        conv("conv8", Group::C, l(12), 384, 128, 3),
        conv("pred", Group::Last, l(13), 128, head_c, 1),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for spec in specs {
        let params = spec.conv.map(|c| {
            let limit = (2.0 / c.filter_len() as f64).sqrt() as f32;
            let weight = Tensor::from_fn(&c.weight_shape(), |_| rng.random_range(-limit..=limit));
            if spec.kind == LayerKind::DetectHead {
                ConvParams { weight, bias: Some(Tensor::zeros(&[c.c_out])), bn: None }
            } else {
                ConvParams { weight, bias: None, bn: Some(BatchNorm::identity(c.c_out)) }
            }
        });
        layers.push(Layer { spec, params });
    }
    let model = Model {
        layers,
        meta: ModelMeta { classes, anchors: anchors.to_vec(), input: (3, INPUT_SIDE, INPUT_SIDE) },
        stage: None,
    };
    model.validate()?;
    Ok(model)
}

/// A deep copy of a full-precision teacher, ready for binarization.
pub fn init_student_from_teacher(teacher: &Model) -> Result<Model> {
    if let Some(name) = teacher.binarized_layers().first() {
        return Err(Error::invalid(format!("teacher layer {name} is binarized")));
    }
    let mut student = teacher.clone();
    student.stage = None;
    Ok(student)
}
