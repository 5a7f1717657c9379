//! Symmetric InfoNCE pre-training of the dual encoder on world captions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{accuracy, context_probe, ZeroShot};
use crate::model::{DualEncoder, LogitScale, ModelDims, Params};
use crate::numerics::{dot, log_sum_exp, softmax, Matrix};
use crate::prompts::ContextVariant;
use crate::worldgen::{sample_split, WorldSpec};

use super::optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub dims: ModelDims,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub n_pairs: usize,
    /// Held-out examples used by the quality gate.
    pub n_gate: usize,
    pub seed: u64,
    /// Seeds tried before giving up on the quality gate.
    pub max_attempts: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims::default(),
            epochs: 30,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 64,
            n_pairs: 4096,
            n_gate: 1024,
            seed: 0,
            max_attempts: 3,
        }
    }
}

/// Loss value and gradients of the symmetric InfoNCE objective.
#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_image: Vec<Vec<f64>>,
    pub grad_text: Vec<Vec<f64>>,
    /// Derivative with respect to `ln(tau)`.
    pub grad_log_scale: f64,
}

/// `0.5 * (CE over rows + CE over columns)` of `tau * H G^T`, averaged over the batch.
pub fn info_nce(image: &[Vec<f64>], text: &[Vec<f64>], tau: f64) -> Result<InfoNceOutput> {
    let b = image.len();
    if b < 2 {
        return Err(Error::ContrastiveBatch(b));
    }
    if text.len() != b {
        return Err(Error::Dimension(format!("{b} images but {} captions", text.len())));
    }
    let sim: Vec<Vec<f64>> = image
        .iter()
        .map(|h| text.iter().map(|g| tau * dot(h, g)).collect())
        .collect();
    let mut d_sim = vec![vec![0.0; b]; b];
    let mut loss = 0.0;
    let w = 0.5 / b as f64;
    for i in 0..b {
        let row = &sim[i];
        loss += log_sum_exp(row)? - row[i];
        for (j, p) in softmax(row)?.into_iter().enumerate() {
            d_sim[i][j] += w * (p - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..b {
        let col: Vec<f64> = (0..b).map(|i| sim[i][j]).collect();
        loss += log_sum_exp(&col)? - col[j];
        for (i, p) in softmax(&col)?.into_iter().enumerate() {
            d_sim[i][j] += w * (p - if i == j { 1.0 } else { 0.0 });
        }
    }
    let d = image[0].len();
    let mut grad_image = vec![vec![0.0; d]; b];
    let mut grad_text = vec![vec![0.0; d]; b];
    let mut grad_log_scale = 0.0;
    for i in 0..b {
        for j in 0..b {
            let g = d_sim[i][j];
            grad_log_scale += g * sim[i][j];
            for k in 0..d {
                grad_image[i][k] += tau * g * text[j][k];
                grad_text[j][k] += tau * g * image[i][k];
            }
        }
    }
    Ok(InfoNceOutput {
        loss: loss * w,
        grad_image,
        grad_text,
        grad_log_scale,
    })
}

/// The pre-trained model together with the gate measurements.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: DualEncoder,
    /// Seed that produced the accepted model.
    pub seed: u64,
    pub zero_shot_accuracy: f64,
    pub probe_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

fn pretrain_once(world: &WorldSpec, config: &PretrainConfig, seed: u64) -> Result<(DualEncoder, Vec<f64>)> {
    if config.batch_size < 2 {
        return Err(Error::ContrastiveBatch(config.batch_size));
    }
    let all: Vec<usize> = (0..world.num_contexts()).collect();
    let data = sample_split(world, &all, config.n_pairs, seed ^ 0xA11C_0DE5)?;
    if data.d_in() != config.dims.d_in {
        return Err(Error::Config(format!(
            "world inputs have {} dims but the encoder expects {}",
            data.d_in(),
            config.dims.d_in
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DualEncoder::init(config.dims, world.vocabulary(), &mut rng);
    let mut log_scale = Matrix::from_vec(1, 1, vec![model.logit_scale.get().ln()])?;

    let hp = AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let no_decay = AdamWConfig {
        weight_decay: 0.0,
        ..hp
    };
    let mut state = {
        let mut p = model.image.tensors();
        p.extend(model.text.tensors());
        OptimizerState::for_params(&p)
    };
    let mut scale_state = OptimizerState::for_params(&[&log_scale]);

    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut step = 0;
    let mut losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let tau = model.logit_scale.get();
            let captions: Vec<Vec<usize>> = chunk.iter().map(|&i| world.caption(data.examples[i].y, data.examples[i].c)).collect();
            let img_fwd = chunk
                .iter()
                .map(|&i| model.image.forward(&data.examples[i].x))
                .collect::<Result<Vec<_>>>()?;
            let txt_fwd = captions.iter().map(|c| model.text.forward(c)).collect::<Result<Vec<_>>>()?;
            let out = info_nce(
                &img_fwd.iter().map(|f| f.feature.clone()).collect::<Vec<_>>(),
                &txt_fwd.iter().map(|f| f.feature.clone()).collect::<Vec<_>>(),
                tau,
            )?;
            if !out.loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    detail: "contrastive loss is not finite".into(),
                });
            }
            let mut g_img = model.image.zeros_like();
            let mut g_txt = model.text.zeros_like();
            for (k, &i) in chunk.iter().enumerate() {
                model.image.backward(&data.examples[i].x, &img_fwd[k], &out.grad_image[k], &mut g_img);
                model.text.backward(&captions[k], &txt_fwd[k], &out.grad_text[k], &mut g_txt);
            }
            let lr = cosine_lr(step, total, config.lr, 0.0)?;
            {
                let DualEncoder { image, text, .. } = &mut model;
                let mut params: Vec<&mut Matrix> = image.tensors_mut();
                params.extend(text.tensors_mut());
                let mut grads = g_img.tensors();
                grads.extend(g_txt.tensors());
                adamw_step(&mut params, &grads, &mut state, lr, &hp)?;
            }
            let g_scale = Matrix::from_vec(1, 1, vec![out.grad_log_scale])?;
            adamw_step(&mut [&mut log_scale], &[&g_scale], &mut scale_state, lr, &no_decay)?;
            let clamped = log_scale.get(0, 0).clamp(LogitScale::MIN.ln(), LogitScale::MAX.ln());
            log_scale.set(0, 0, clamped);
            model.logit_scale = LogitScale::clamped(clamped.exp());
            epoch_loss += out.loss;
            batches += 1;
            step += 1;
        }
        losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok((model, losses))
}

/// Contrastive pre-training over every context of the world, retried with
/// fresh seeds until the zero-shot class and context accuracies both exceed
/// twice chance.
pub fn pretrain_contrastive(world: &WorldSpec, config: &PretrainConfig) -> Result<PretrainOutcome> {
    if config.batch_size < 2 {
        return Err(Error::ContrastiveBatch(config.batch_size));
    }
    let classes = world.class_name_set();
    let templates = world.templates();
    let all: Vec<usize> = (0..world.num_contexts()).collect();
    let gate_data = sample_split(world, &all, config.n_gate, config.seed ^ 0x6A7E)?;
    let k = world.num_classes() as f64;
    let m = world.num_contexts() as f64;
    let mut failures = Vec::new();
    for attempt in 0..config.max_attempts.max(1) {
        let seed = config.seed.wrapping_add(attempt as u64);
        let (model, losses) = pretrain_once(world, config, seed)?;
        let w = model.encode_prompts(&templates, &classes)?;
        let w_cls = w.class_weights()?;
        let w_ctx = w.context_weights(ContextVariant::Averaged)?;
        let zs = accuracy(&ZeroShot::new(&model.image, &w_cls, model.logit_scale), &gate_data)?;
        let probe = context_probe(&model.image, &w_ctx, model.logit_scale, &gate_data, world.num_contexts())?;
        if zs > 2.0 / k && probe > 2.0 / m {
            return Ok(PretrainOutcome {
                model,
                seed,
                zero_shot_accuracy: zs,
                probe_accuracy: probe,
                epoch_losses: losses,
            });
        }
        failures.push(format!("seed {seed}: zero-shot {zs:.3}, probe {probe:.3}"));
    }
    Err(Error::PretrainQuality {
        attempts: failures.len(),
        detail: failures.join("; "),
    })
}
