//! Fine-tuning: FT, TP-FT, LP-FT and the context-regularised objective
//! `CE(W_f^T h'(x), y) + alpha * KL[p_ctx(x; ref) || p_ctx(x; tuned)]`.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, Classifier, ClassifierHead, DualEncoder, ImageEncoder, Metadata, Params};
use crate::numerics::{cross_entropy, kl_divergence, softmax, KlClamp, Matrix, EPS_KL};
use crate::prompts::{ContextVariant, PromptSet};
use crate::worldgen::Dataset;

use super::optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
use super::probe::{linear_probe, LinearProbeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Random head, cross-entropy only.
    Ft,
    /// Head initialised from the zero-shot class weights.
    TpFt,
    /// Linear probe first, then full fine-tuning.
    LpFt,
    /// Zero-shot head plus the context KL regulariser.
    CarFt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ft, Method::TpFt, Method::LpFt, Method::CarFt];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::TpFt => "tp-ft",
            Method::LpFt => "lp-ft",
            Method::CarFt => "car-ft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected ft, tp-ft, lp-ft or car-ft)")))
    }
}

/// Which context weights the KL term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextMode {
    #[default]
    Averaged,
    /// Context prompts of each example's ground-truth class.
    PerClass,
}

/// Argument order of the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL[reference || tuned]`.
    #[default]
    Forward,
    /// `KL[tuned || reference]`, an ablation.
    Reverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub method: Method,
    pub alpha: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub context_mode: ContextMode,
    /// Multiply head logits by the logit scale.
    pub scale_head: bool,
    pub head_bias: bool,
    /// Memoise reference context distributions per example.
    pub cache_reference: bool,
    pub kl_direction: KlDirection,
    /// Stage-one settings for LP-FT.
    pub probe: LinearProbeConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            method: Method::CarFt,
            alpha: 1.0,
            lr: 1e-3,
            lr_min: 0.0,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            context_mode: ContextMode::Averaged,
            scale_head: true,
            head_bias: false,
            cache_reference: false,
            kl_direction: KlDirection::Forward,
            probe: LinearProbeConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr >= 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= lr_min <= lr, got {} and {}",
                self.lr_min, self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={dataset_len}",
                self.batch_size
            )));
        }
        Ok(())
    }

    fn uses_kl(&self) -> bool {
        self.method == Method::CarFt
    }
}

/// Context weights shared by all examples or selected per class.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextWeights {
    Shared(Matrix),
    PerClass(Vec<Matrix>),
}

impl ContextWeights {
    pub fn from_prompts(pre: &DualEncoder, prompts: &PromptSet, mode: ContextMode) -> Result<Self> {
        let w = pre.encode_prompts(&prompts.templates, &prompts.classes)?;
        Ok(match mode {
            ContextMode::Averaged => ContextWeights::Shared(w.context_weights(ContextVariant::Averaged)?),
            ContextMode::PerClass => ContextWeights::PerClass(
                (0..prompts.classes.len())
                    .map(|y| w.context_weights(ContextVariant::PerClass(y)))
                    .collect::<Result<_>>()?,
            ),
        })
    }

    pub fn for_label(&self, y: usize) -> &Matrix {
        match self {
            ContextWeights::Shared(m) => m,
            ContextWeights::PerClass(ms) => &ms[y],
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        match self {
            ContextWeights::Shared(m) => vec![m],
            ContextWeights::PerClass(ms) => ms.iter().collect(),
        }
    }
}

/// Loss terms and (optionally) gradients for one batch.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub loss: f64,
    pub grad_image: ImageEncoder,
    pub grad_head: ClassifierHead,
}

/// The fine-tuning objective over a frozen reference encoder.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub reference: &'a ImageEncoder,
    /// Absent when no prompts were supplied; the KL term is then zero.
    pub context: Option<ContextWeights>,
    /// Scale inside the context softmax.
    pub context_scale: f64,
    pub head_scale: f64,
    pub alpha: f64,
    pub direction: KlDirection,
    reference_cache: Option<Vec<Vec<f64>>>,
}

impl<'a> Objective<'a> {
    pub fn new(
        reference: &'a ImageEncoder,
        context: Option<ContextWeights>,
        context_scale: f64,
        head_scale: f64,
        alpha: f64,
        direction: KlDirection,
    ) -> Self {
        Self {
            reference,
            context,
            context_scale,
            head_scale,
            alpha,
            direction,
            reference_cache: None,
        }
    }

    fn reference_distribution(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        let w = self.context.as_ref().expect("context checked by caller").for_label(y);
        let h = self.reference.encode(x)?;
        softmax(&crate::model::scaled_similarities(w, &h, self.context_scale)?)
    }

    /// Precomputes reference distributions for every example of `data`.
    pub fn cache_reference(&mut self, data: &Dataset) -> Result<()> {
        if self.context.is_none() {
            return Ok(());
        }
        let cache = data
            .iter()
            .map(|e| self.reference_distribution(&e.x, e.y))
            .collect::<Result<Vec<_>>>()?;
        self.reference_cache = Some(cache);
        Ok(())
    }

    /// Mean loss over `indices` of `data`, with gradients for the tuned
    /// encoder and head.
    pub fn evaluate(
        &self,
        image: &ImageEncoder,
        head: &ClassifierHead,
        data: &Dataset,
        indices: &[usize],
    ) -> Result<ObjectiveOutput> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let inv_b = 1.0 / indices.len() as f64;
        let mut grad_image = image.zeros_like();
        let mut grad_head = head.zeros_like();
        let (mut sum_ce, mut sum_kl) = (0.0, 0.0);
        for &idx in indices {
            let e = &data.examples[idx];
            let fwd = image.forward(&e.x)?;
            let h = &fwd.feature;
            let logits = head.logits(h, self.head_scale)?;
            sum_ce += cross_entropy(&logits, e.y)?;
            let mut g_logits = softmax(&logits)?;
            g_logits[e.y] -= 1.0;
            g_logits.iter_mut().for_each(|g| *g *= inv_b);
            let mut g_h = head.backward(h, self.head_scale, &g_logits, &mut grad_head);

            if let Some(ctx) = &self.context {
                let w = ctx.for_label(e.y);
                let p_ref = match &self.reference_cache {
                    Some(cache) => cache[idx].clone(),
                    None => self.reference_distribution(&e.x, e.y)?,
                };
                let q = softmax(&crate::model::scaled_similarities(w, h, self.context_scale)?)?;
                let (kl, g_s) = match self.direction {
                    KlDirection::Forward => {
                        let kl = kl_divergence(&p_ref, &q, KlClamp::Clamp)?;
                        let g: Vec<f64> = q.iter().zip(&p_ref).map(|(qi, pi)| qi - pi).collect();
                        (kl, g)
                    }
                    KlDirection::Reverse => {
                        let kl = kl_divergence(&q, &p_ref, KlClamp::Clamp)?;
                        let g: Vec<f64> = q
                            .iter()
                            .zip(&p_ref)
                            .map(|(qi, pi)| qi * (qi.max(EPS_KL).ln() - pi.max(EPS_KL).ln() - kl))
                            .collect();
                        (kl, g)
                    }
                };
                sum_kl += kl;
                if self.alpha != 0.0 {
                    let coef = self.alpha * self.context_scale * inv_b;
                    let g_from_kl = w.matvec(&g_s)?;
                    for (a, b) in g_h.iter_mut().zip(&g_from_kl) {
                        *a += coef * b;
                    }
                }
            }
            image.backward(&e.x, &fwd, &g_h, &mut grad_image);
        }
        let loss_ce = sum_ce * inv_b;
        let loss_kl = sum_kl * inv_b;
        Ok(ObjectiveOutput {
            loss_ce,
            loss_kl,
            loss: loss_ce + self.alpha * loss_kl,
            grad_image,
            grad_head,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub metrics: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<EpochSnapshot>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_ce,loss_kl,lr\n");
        for s in &self.steps {
            let _ = writeln!(out, "{},{:.16e},{:.16e},{:.16e}", s.step, s.loss_ce, s.loss_kl, s.lr);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Bitwise equality of every logged value.
    pub fn bit_eq(&self, other: &TrainLog) -> bool {
        self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.step == b.step
                    && a.loss_ce.to_bits() == b.loss_ce.to_bits()
                    && a.loss_kl.to_bits() == b.loss_kl.to_bits()
                    && a.lr.to_bits() == b.lr.to_bits()
            })
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Classifier,
    pub log: TrainLog,
}

impl FinetuneOutcome {
    pub fn checkpoint(&self, config: &FinetuneConfig) -> Checkpoint {
        Checkpoint::from_classifier(&self.model, finetune_metadata(config, self.log.steps.len()))
    }
}

pub fn finetune_metadata(config: &FinetuneConfig, steps: usize) -> Metadata {
    let mut meta = Metadata::new();
    meta.insert("method".into(), config.method.to_string());
    meta.insert("alpha".into(), format!("{}", config.alpha));
    meta.insert("seed".into(), config.seed.to_string());
    meta.insert("step".into(), steps.to_string());
    meta
}

/// Per-epoch callback; returned metrics are stored in the log's snapshots.
pub type Monitor<'m> = dyn FnMut(usize, &Classifier) -> Result<Vec<(String, f64)>> + 'm;

pub fn finetune(
    pretrained: &DualEncoder,
    data: &Dataset,
    prompts: Option<&PromptSet>,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    finetune_with_monitor(pretrained, data, prompts, config, &mut |_, _| Ok(Vec::new()))
}

fn initial_head(
    pretrained: &DualEncoder,
    data: &Dataset,
    class_weights: Option<&Matrix>,
    num_classes: usize,
    config: &FinetuneConfig,
    head_scale: f64,
) -> Result<ClassifierHead> {
    let d = pretrained.image.embed_dim();
    match config.method {
        Method::Ft => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(1);
            let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
            let w = Matrix::from_fn(d, num_classes, |_, _| normal.sample(&mut rng));
            Ok(ClassifierHead::new(w, config.head_bias))
        }
        Method::TpFt | Method::CarFt => Ok(ClassifierHead::new(
            class_weights.expect("prompts checked").clone(),
            config.head_bias,
        )),
        Method::LpFt => {
            let init = ClassifierHead::new(class_weights.expect("prompts checked").clone(), config.head_bias);
            Ok(linear_probe(&pretrained.image, data, &init, head_scale, &config.probe)?.head)
        }
    }
}

/// Runs one fine-tuning job. `pretrained` is never modified: the reference
/// encoder, text tower and context weights stay frozen.
pub fn finetune_with_monitor(
    pretrained: &DualEncoder,
    data: &Dataset,
    prompts: Option<&PromptSet>,
    config: &FinetuneConfig,
    monitor: &mut Monitor<'_>,
) -> Result<FinetuneOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate(data.len())?;
    if data.d_in() != pretrained.image.d_in() {
        return Err(Error::Dimension(format!(
            "dataset has {} features, encoder expects {}",
            data.d_in(),
            pretrained.image.d_in()
        )));
    }
    if prompts.is_none() && config.method != Method::Ft {
        return Err(Error::Config(format!("{} needs templates and class names", config.method)));
    }
    let num_classes = match prompts {
        Some(p) => p.classes.len(),
        None => data.iter().map(|e| e.y).max().unwrap_or(0) + 1,
    };
    if let Some(e) = data.iter().find(|e| e.y >= num_classes) {
        return Err(Error::Index {
            index: e.y,
            len: num_classes,
        });
    }

    let tau = pretrained.logit_scale.get();
    let head_scale = if config.scale_head { tau } else { 1.0 };
    let class_weights = prompts
        .map(|p| pretrained.encode_prompts(&p.templates, &p.classes)?.class_weights())
        .transpose()?;
    let context = prompts
        .map(|p| ContextWeights::from_prompts(pretrained, p, config.context_mode))
        .transpose()?;
    let alpha = if config.uses_kl() { config.alpha } else { 0.0 };
    let mut objective = Objective::new(&pretrained.image, context, tau, head_scale, alpha, config.kl_direction);
    if config.cache_reference {
        objective.cache_reference(data)?;
    }

    let head = initial_head(pretrained, data, class_weights.as_ref(), num_classes, config, head_scale)?;
    let mut model = Classifier::from_pretrained(pretrained, head, config.scale_head);

    let hp = AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut state = {
        let mut p = model.image.tensors();
        p.extend(model.head.tensors());
        OptimizerState::for_params(&p)
    };

    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ epoch as u64));
        for batch in order.chunks(config.batch_size) {
            let lr = cosine_lr(step, total, config.lr, config.lr_min)?;
            let out = objective
                .evaluate(&model.image, &model.head, data, batch)
                .map_err(|e| match e {
                    Error::Numeric(_) | Error::DegenerateFeature { .. } => Error::TrainingDiverged {
                        step,
                        detail: e.to_string(),
                    },
                    other => other,
                })?;
            if !out.loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    detail: format!("loss is {}", out.loss),
                });
            }
            log.steps.push(StepRecord {
                step,
                loss_ce: out.loss_ce,
                loss_kl: out.loss_kl,
                lr,
            });
            let Classifier { image, head, .. } = &mut model;
            let mut params = image.tensors_mut();
            params.extend(head.tensors_mut());
            let mut grads = out.grad_image.tensors();
            grads.extend(out.grad_head.tensors());
            adamw_step(&mut params, &grads, &mut state, lr, &hp)?;
            if !model.image.tensors().iter().chain(model.head.tensors().iter()).all(|t| t.is_finite()) {
                return Err(Error::TrainingDiverged {
                    step,
                    detail: "parameters became non-finite".into(),
                });
            }
            step += 1;
        }
        let metrics = monitor(epoch, &model)?;
        if !metrics.is_empty() {
            log.snapshots.push(EpochSnapshot { epoch, metrics });
        }
    }
    Ok(FinetuneOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::numerics::grad_check;
    use crate::worldgen::{generate_world, sample_split, WorldConfig, WorldSpec};
    use rand::Rng;

    fn small_world() -> WorldSpec {
        generate_world(&WorldConfig {
            num_classes: 4,
            num_contexts: 2,
            d_lat: 4,
            d_in: 8,
            sigma: 0.1,
            seed: 5,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn setup() -> (WorldSpec, DualEncoder, Dataset, PromptSet) {
        let world = small_world();
        let dims = ModelDims {
            d_in: 8,
            d_hidden: 10,
            embed_dim: 8,
        };
        let pre = DualEncoder::init(dims, world.vocabulary(), &mut ChaCha8Rng::seed_from_u64(1));
        let data = sample_split(&world, &[0, 1], 96, 3).unwrap();
        let prompts = PromptSet::new(world.templates(), world.class_name_set());
        (world, pre, data, prompts)
    }

    fn perturbed(image: &ImageEncoder, seed: u64, scale: f64) -> ImageEncoder {
        let mut out = image.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in out.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v += scale * rng.random_range(-1.0..1.0));
        }
        out
    }

    fn check_objective(mode: ContextMode, direction: KlDirection, with_bias: bool) -> f64 {
        let (_, pre, data, prompts) = setup();
        let ctx = ContextWeights::from_prompts(&pre, &prompts, mode).unwrap();
        let tau = pre.logit_scale.get();
        let objective = Objective::new(&pre.image, Some(ctx), tau, tau, 0.7, direction);
        let w_cls = pre.encode_prompts(&prompts.templates, &prompts.classes).unwrap().class_weights().unwrap();
        let mut head = ClassifierHead::new(w_cls, with_bias);
        if let Some(b) = head.bias.as_mut() {
            b.as_mut_slice().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        }
        let image = perturbed(&pre.image, 2, 0.2);
        let idx: Vec<usize> = (0..24).collect();
        let out = objective.evaluate(&image, &head, &data, &idx).unwrap();
        assert!(out.loss_kl > 0.0);
        let grads = (out.grad_image, out.grad_head).flatten();
        let template = (image.clone(), head.clone());
        let f = |flat: &[f64]| {
            let mut p = template.clone();
            p.assign_flat(flat);
            Ok(objective.evaluate(&p.0, &p.1, &data, &idx)?.loss)
        };
        grad_check(f, &template.flatten(), &grads, 1e-6).unwrap()
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        let err = check_objective(ContextMode::Averaged, KlDirection::Forward, false);
        assert!(err < 1e-4, "relative error {err:e}");
    }

    #[test]
    fn per_class_and_reverse_gradients_match() {
        for (mode, dir, bias) in [
            (ContextMode::PerClass, KlDirection::Forward, true),
            (ContextMode::Averaged, KlDirection::Reverse, false),
            (ContextMode::PerClass, KlDirection::Reverse, true),
        ] {
            let err = check_objective(mode, dir, bias);
            assert!(err < 1e-4, "{mode:?} {dir:?}: {err:e}");
        }
    }

    fn config(method: Method) -> FinetuneConfig {
        FinetuneConfig {
            method,
            batch_size: 16,
            epochs: 2,
            lr: 1e-2,
            seed: 11,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn zero_alpha_reproduces_tp_ft() {
        let (_, pre, data, prompts) = setup();
        let car = finetune(&pre, &data, Some(&prompts), &FinetuneConfig { alpha: 0.0, ..config(Method::CarFt) }).unwrap();
        let tp = finetune(&pre, &data, Some(&prompts), &config(Method::TpFt)).unwrap();
        assert!(car.log.bit_eq(&tp.log));
        assert_eq!(car.model.image.checksum(), tp.model.image.checksum());
        assert_eq!(car.model.head.checksum(), tp.model.head.checksum());
    }

    #[test]
    fn first_step_has_zero_kl() {
        let (_, pre, data, prompts) = setup();
        for mode in [ContextMode::Averaged, ContextMode::PerClass] {
            let out = finetune(&pre, &data, Some(&prompts), &FinetuneConfig { context_mode: mode, ..config(Method::CarFt) }).unwrap();
            assert_eq!(out.log.steps[0].loss_kl, 0.0);
            assert!(out.log.steps.last().unwrap().loss_kl > 0.0);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (_, pre, data, prompts) = setup();
        let cfg = FinetuneConfig {
            lr: 0.0,
            weight_decay: 0.1,
            ..config(Method::CarFt)
        };
        let out = finetune(&pre, &data, Some(&prompts), &cfg).unwrap();
        assert_eq!(out.model.image.checksum(), pre.image.checksum());
        let w_cls = pre.encode_prompts(&prompts.templates, &prompts.classes).unwrap().class_weights().unwrap();
        assert!(out.model.head.weight.bit_eq(&w_cls));
    }

    #[test]
    fn cached_reference_agrees_bitwise() {
        let (_, pre, data, prompts) = setup();
        let a = finetune(&pre, &data, Some(&prompts), &config(Method::CarFt)).unwrap();
        let b = finetune(&pre, &data, Some(&prompts), &FinetuneConfig { cache_reference: true, ..config(Method::CarFt) }).unwrap();
        assert!(a.log.bit_eq(&b.log));
        assert_eq!(a.model.image.checksum(), b.model.image.checksum());
    }

    #[test]
    fn frozen_parts_are_untouched() {
        let (_, pre, data, prompts) = setup();
        let before = pre.clone();
        for method in Method::ALL {
            let out = finetune(&pre, &data, Some(&prompts), &config(method)).unwrap();
            assert_eq!(pre, before);
            assert_eq!(out.model.text.checksum(), pre.text.checksum());
            assert_eq!(out.model.logit_scale, pre.logit_scale);
            assert_ne!(out.model.image.checksum(), pre.image.checksum(), "{method}");
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let (_, pre, data, prompts) = setup();
        for method in Method::ALL {
            let a = finetune(&pre, &data, Some(&prompts), &config(method)).unwrap();
            let b = finetune(&pre, &data, Some(&prompts), &config(method)).unwrap();
            assert!(a.log.bit_eq(&b.log));
            let cfg = config(method);
            assert!(a.checkpoint(&cfg).bit_eq(&b.checkpoint(&cfg)));
        }
    }

    #[test]
    fn log_has_one_row_per_step() {
        let (_, pre, data, prompts) = setup();
        let out = finetune(&pre, &data, Some(&prompts), &config(Method::CarFt)).unwrap();
        assert_eq!(out.log.steps.len(), 2 * 96 / 16);
        assert_eq!(out.log.steps[0].lr, 1e-2);
        let csv = out.log.to_csv();
        assert!(csv.starts_with("step,loss_ce,loss_kl,lr\n"));
        assert_eq!(csv.lines().count(), 13);
    }

    #[test]
    fn tp_ft_and_lp_ft_start_from_prompts() {
        let (_, pre, data, prompts) = setup();
        let w_cls = pre.encode_prompts(&prompts.templates, &prompts.classes).unwrap().class_weights().unwrap();
        let out = finetune(&pre, &data, Some(&prompts), &config(Method::TpFt)).unwrap();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(11));
        let first: f64 = order[..16]
            .iter()
            .map(|&i| {
                let e = &data.examples[i];
                cross_entropy(&crate::model::zero_shot_logits(&pre.image, &w_cls, pre.logit_scale, &e.x).unwrap(), e.y).unwrap()
            })
            .sum::<f64>()
            / 16.0;
        assert!((out.log.steps[0].loss_ce - first).abs() < 1e-12);
        let lp = finetune(&pre, &data, Some(&prompts), &config(Method::LpFt)).unwrap();
        assert!(lp.log.steps[0].loss_ce < out.log.steps[0].loss_ce);
    }

    #[test]
    fn configuration_errors() {
        let (_, pre, data, prompts) = setup();
        assert!(matches!(finetune(&pre, &data, None, &config(Method::CarFt)), Err(Error::Config(_))));
        assert!(finetune(&pre, &data, None, &config(Method::Ft)).is_ok());
        let big = FinetuneConfig {
            batch_size: 1000,
            ..config(Method::Ft)
        };
        assert!(matches!(finetune(&pre, &data, Some(&prompts), &big), Err(Error::Config(_))));
        let neg = FinetuneConfig {
            alpha: -1.0,
            ..config(Method::CarFt)
        };
        assert!(matches!(finetune(&pre, &data, Some(&prompts), &neg), Err(Error::Config(_))));
        let idle = FinetuneConfig {
            epochs: 0,
            ..config(Method::Ft)
        };
        assert!(matches!(finetune(&pre, &data, None, &idle), Err(Error::Config(_))));
        assert!("sgd".parse::<Method>().is_err());
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
    }

    #[test]
    fn divergence_reports_the_step() {
        let (_, pre, data, prompts) = setup();
        let cfg = FinetuneConfig {
            lr: 1e300,
            weight_decay: 0.0,
            ..config(Method::TpFt)
        };
        match finetune(&pre, &data, Some(&prompts), &cfg) {
            Err(Error::TrainingDiverged { step, .. }) => assert!(step < 12),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn monitor_snapshots_every_epoch() {
        let (_, pre, data, prompts) = setup();
        let mut calls = 0;
        let out = finetune_with_monitor(&pre, &data, Some(&prompts), &config(Method::Ft), &mut |epoch, _| {
            calls += 1;
            Ok(vec![("epoch".into(), epoch as f64)])
        })
        .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(out.log.snapshots.len(), 2);
        assert_eq!(out.log.snapshots[1].metrics[0].1, 1.0);
    }
}
