//! The end-to-end pipeline shared by the command-line demo and the
//! desk-scale reproductions: world, splits, pre-training, every
//! fine-tuning method, the context probe, WiSE-FT curves and soups.

use std::path::Path;

use crate::ensemble::{
    greedy_soup, uniform_grid, uniform_soup, wise_curve, zero_shot_classifier, InterpolationCurve, DEFAULT_GRID_POINTS,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy, alpha_sweep, context_probe, write_report, AlphaRow, EvalReport, ZeroShot};
use crate::model::{save_checkpoint, Checkpoint, Classifier, Metadata};
use crate::numerics::Matrix;
use crate::prompts::{ContextVariant, PromptSet};
use crate::trainer::{
    finetune, finetune_with_monitor, FinetuneConfig, Method, PretrainConfig, PretrainOutcome, TrainLog,
};
use crate::worldgen::{export_dataset, generate_world, SplitPlan, Splits, WorldConfig, WorldSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    /// Held-out contexts; the rest are used for fine-tuning.
    pub ood_contexts: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            ood_contexts: vec![world.num_contexts - 1],
            world,
            n_train: 4096,
            n_val: 1024,
            n_test: 1024,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The same experiment with every seed set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.world.seed = seed;
        c.pretrain.seed = seed;
        c.finetune.seed = seed;
        c
    }
}

/// A world with its splits, prompts and pre-trained dual encoder.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub world: WorldSpec,
    pub splits: Splits,
    pub prompts: PromptSet,
    pub pretrained: PretrainOutcome,
    /// Averaged context weights of the pre-trained text tower.
    pub context_weights: Matrix,
}

impl Prepared {
    pub fn probe(&self, model: &Classifier) -> Result<f64> {
        context_probe(
            &model.image,
            &self.context_weights,
            model.logit_scale,
            &self.splits.probe_set(),
            self.world.num_contexts(),
        )
    }

    pub fn pretrained_probe(&self) -> Result<f64> {
        let pre = &self.pretrained.model;
        context_probe(
            &pre.image,
            &self.context_weights,
            pre.logit_scale,
            &self.splits.probe_set(),
            self.world.num_contexts(),
        )
    }

    pub fn zero_shot(&self, config: &FinetuneConfig) -> Result<Classifier> {
        zero_shot_classifier(&self.pretrained.model, &self.prompts, config.head_bias, config.scale_head)
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let world = generate_world(&config.world)?;
    let mut plan = SplitPlan::holding_out(world.num_contexts(), &config.ood_contexts, config.world.seed)?;
    plan.n_train = config.n_train;
    plan.n_val = config.n_val;
    plan.n_test = config.n_test;
    let splits = Splits::sample(&world, &plan)?;
    let prompts = PromptSet::new(world.templates(), world.class_name_set());
    let pretrained = crate::trainer::pretrain_contrastive(&world, &config.pretrain)?;
    let context_weights = pretrained
        .model
        .encode_prompts(&prompts.templates, &prompts.classes)?
        .context_weights(ContextVariant::Averaged)?;
    Ok(Prepared {
        world,
        splits,
        prompts,
        pretrained,
        context_weights,
    })
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub id_acc: f64,
    pub ood_acc: f64,
    pub probe_acc: f64,
    pub model: Classifier,
    pub log: TrainLog,
}

/// Fine-tunes with `method`, recording the context probe after every epoch.
pub fn run_method(prepared: &Prepared, config: &FinetuneConfig, method: Method) -> Result<MethodResult> {
    let cfg = FinetuneConfig {
        method,
        ..config.clone()
    };
    let probe_set = prepared.splits.probe_set();
    let m = prepared.world.num_contexts();
    let out = finetune_with_monitor(
        &prepared.pretrained.model,
        &prepared.splits.train,
        Some(&prepared.prompts),
        &cfg,
        &mut |_, model| {
            let p = context_probe(&model.image, &prepared.context_weights, model.logit_scale, &probe_set, m)?;
            Ok(vec![("probe_acc".into(), p)])
        },
    )?;
    Ok(MethodResult {
        method,
        id_acc: accuracy(&out.model, &prepared.splits.id_test)?,
        ood_acc: accuracy(&out.model, &prepared.splits.ood_test)?,
        probe_acc: prepared.probe(&out.model)?,
        model: out.model,
        log: out.log,
    })
}

pub const DEMO_ALPHAS: [f64; 5] = [0.0, 0.25, 1.0, 4.0, 16.0];

/// Everything `carft demo` produces for one seed.
#[derive(Debug, Clone)]
pub struct DemoRun {
    pub seed: u64,
    pub methods: Vec<MethodResult>,
    pub wise: Vec<(Method, InterpolationCurve)>,
    pub alpha_rows: Vec<AlphaRow>,
    pub greedy_members: Vec<String>,
}

fn tag(meta: &mut Metadata, key: &str, value: impl ToString) {
    meta.insert(key.into(), value.to_string());
}

/// Runs the whole pipeline for each seed, writing checkpoints, curves and
/// `report.csv` under `out_dir`.
pub fn run_demo(config: &ExperimentConfig, seeds: &[u64], out_dir: &Path) -> Result<(EvalReport, Vec<DemoRun>)> {
    if seeds.is_empty() {
        return Err(Error::Config("demo needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = EvalReport::new();
    let mut runs = Vec::new();
    for &seed in seeds {
        let cfg = config.with_seed(seed);
        let dir = out_dir.join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let prepared = prepare(&cfg)?;
        let pre = &prepared.pretrained.model;
        let mut meta = Metadata::new();
        tag(&mut meta, "seed", prepared.pretrained.seed);
        save_checkpoint(&Checkpoint::from_dual(pre, meta.clone()), &dir.join("pretrained.ckpt"))?;
        export_dataset(&prepared.splits.train, &dir.join("train.csv"))?;
        export_dataset(&prepared.splits.id_test, &dir.join("id_test.csv"))?;
        export_dataset(&prepared.splits.ood_test, &dir.join("ood_test.csv"))?;

        let zs = prepared.zero_shot(&cfg.finetune)?;
        let zs_ckpt = Checkpoint::from_classifier(&zs, meta);
        save_checkpoint(&zs_ckpt, &dir.join("zeroshot.ckpt"))?;
        let w_cls = zs.head.weight.clone();
        let zero_shot = ZeroShot::new(&pre.image, &w_cls, pre.logit_scale);
        report.record("zero-shot", "id", "acc", accuracy(&zero_shot, &prepared.splits.id_test)?, seed)?;
        report.record("zero-shot", "ood", "acc", accuracy(&zero_shot, &prepared.splits.ood_test)?, seed)?;
        report.record("zero-shot", "all", "probe_acc", prepared.pretrained_probe()?, seed)?;

        let mut methods = Vec::new();
        let mut wise = Vec::new();
        for method in Method::ALL {
            let res = run_method(&prepared, &cfg.finetune, method)?;
            let name = method.as_str();
            report.record(name, "id", "acc", res.id_acc, seed)?;
            report.record(name, "ood", "acc", res.ood_acc, seed)?;
            report.record(name, "all", "probe_acc", res.probe_acc, seed)?;
            for snap in &res.log.snapshots {
                for (metric, value) in &snap.metrics {
                    report.record(name, "all", &format!("{metric}_epoch{}", snap.epoch + 1), *value, seed)?;
                }
            }
            let mut meta = Metadata::new();
            tag(&mut meta, "method", name);
            tag(&mut meta, "seed", seed);
            let ckpt = Checkpoint::from_classifier(&res.model, meta);
            save_checkpoint(&ckpt, &dir.join(format!("{name}.ckpt")))?;
            res.log.write_csv(&dir.join(format!("{name}_log.csv")))?;

            let curve = wise_curve(
                &zs_ckpt,
                &ckpt,
                &prepared.splits.id_test,
                &prepared.splits.ood_test,
                &uniform_grid(DEFAULT_GRID_POINTS)?,
            )?;
            curve.write_csv(&dir.join(format!("wise_{name}.csv")))?;
            let best = curve.best_id();
            let wise_name = format!("wise-{name}");
            report.record(&wise_name, "id", "acc", best.id_acc, seed)?;
            report.record(&wise_name, "ood", "acc", best.ood_acc, seed)?;
            report.record(&wise_name, "id", "mix_weight", best.w, seed)?;
            methods.push(res);
            wise.push((method, curve));
        }

        let alpha_rows = alpha_sweep(
            pre,
            &prepared.splits.train,
            &prepared.prompts,
            &prepared.splits.id_test,
            &prepared.splits.ood_test,
            &DEMO_ALPHAS,
            &cfg.finetune,
        )?;
        for row in &alpha_rows {
            let name = format!("car-ft-alpha{}", row.alpha);
            report.record(&name, "id", "acc", row.id_acc, seed)?;
            report.record(&name, "ood", "acc", row.ood_acc, seed)?;
        }

        // soup ingredients: CAR-FT under a few learning rates and shuffles
        let mut ingredients = Vec::new();
        for (i, scale) in [0.5, 1.0, 2.0, 4.0].into_iter().enumerate() {
            let ft_cfg = FinetuneConfig {
                method: Method::CarFt,
                lr: cfg.finetune.lr * scale,
                seed: seed.wrapping_add(1000 + i as u64),
                ..cfg.finetune.clone()
            };
            let out = finetune(pre, &prepared.splits.train, Some(&prepared.prompts), &ft_cfg)?;
            ingredients.push((format!("ingredient{i}"), Checkpoint::from_classifier(&out.model, Metadata::new())));
        }
        let plain: Vec<Checkpoint> = ingredients.iter().map(|(_, c)| c.clone()).collect();
        let uniform = uniform_soup(&plain)?.to_classifier()?;
        report.record("uniform-soup", "id", "acc", accuracy(&uniform, &prepared.splits.id_test)?, seed)?;
        report.record("uniform-soup", "ood", "acc", accuracy(&uniform, &prepared.splits.ood_test)?, seed)?;
        let greedy = greedy_soup(&ingredients, &prepared.splits.val)?;
        let g = greedy.checkpoint.to_classifier()?;
        report.record("greedy-soup", "id", "acc", accuracy(&g, &prepared.splits.id_test)?, seed)?;
        report.record("greedy-soup", "ood", "acc", accuracy(&g, &prepared.splits.ood_test)?, seed)?;
        report.record("greedy-soup", "val", "acc", greedy.val_accuracy, seed)?;
        report.record("greedy-soup", "val", "members", greedy.members.len() as f64, seed)?;

        runs.push(DemoRun {
            seed,
            methods,
            wise,
            alpha_rows,
            greedy_members: greedy.members,
        });
    }
    write_report(&report, &out_dir.join("report.csv"))?;
    Ok((report, runs))
}
