use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use carft::ensemble::{greedy_soup, soup_metadata, uniform_grid, uniform_soup, wise_curve, zero_shot_classifier};
use carft::eval::{accuracy, alpha_sweep, context_probe, write_report, EvalReport};
use carft::experiment::{run_demo, ExperimentConfig};
use carft::model::{load_checkpoint, save_checkpoint, Checkpoint, Metadata, ModelDims};
use carft::prompts::{ClassNameSet, ContextVariant, PromptSet, TemplateSet};
use carft::trainer::{
    finetune, pretrain_contrastive, ContextMode, FinetuneConfig, KlDirection, LinearProbeConfig,
    Method, PretrainConfig,
};
use carft::worldgen::{export_dataset, generate_world, import_dataset, SplitPlan, Splits, WorldConfig};
use carft::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "carft", version, about = "Context-aware robust fine-tuning on a toy dual encoder")]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for default output paths.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a world, pre-train the dual encoder and export splits and prompts.
    Pretrain(PretrainArgs),
    /// Fine-tune a pre-trained checkpoint.
    Finetune(FinetuneArgs),
    /// Classification accuracy of a checkpoint with a head.
    Eval(EvalArgs),
    /// Zero-shot context recognition accuracy of a checkpoint's image tower.
    ProbeContext(ProbeArgs),
    /// One CAR-FT run per alpha.
    SweepAlpha(SweepAlphaArgs),
    /// ID/OOD accuracy along the zero-shot to fine-tuned interpolation path.
    SweepWise(SweepWiseArgs),
    /// Average fine-tuned checkpoints.
    Soup(SoupArgs),
    /// The full pipeline on the default world.
    Demo(DemoArgs),
}

#[derive(Args, Debug, Clone)]
struct WorldArgs {
    /// World seed; defaults to --seed.
    #[arg(long)]
    world_seed: Option<u64>,
    /// Number of classes K.
    #[arg(long, default_value_t = WorldConfig::default().num_classes)]
    classes: usize,
    /// Number of contexts M.
    #[arg(long, default_value_t = WorldConfig::default().num_contexts)]
    contexts: usize,
    /// Held-out context ids, comma separated; defaults to the last context.
    #[arg(long, value_delimiter = ',')]
    ood_contexts: Option<Vec<usize>>,
    #[arg(long, default_value_t = WorldConfig::default().sigma)]
    sigma: f64,
    #[arg(long, default_value_t = WorldConfig::default().class_scale)]
    class_scale: f64,
    #[arg(long, default_value_t = WorldConfig::default().context_scale)]
    context_scale: f64,
    #[arg(long, default_value_t = WorldConfig::default().d_lat)]
    d_lat: usize,
    #[arg(long, default_value_t = ModelDims::default().d_in)]
    d_in: usize,
    #[arg(long, default_value_t = ModelDims::default().d_hidden)]
    d_hidden: usize,
    #[arg(long, default_value_t = ModelDims::default().embed_dim)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4096)]
    n_train: usize,
    #[arg(long, default_value_t = 1024)]
    n_val: usize,
    #[arg(long, default_value_t = 1024)]
    n_test: usize,
}

impl WorldArgs {
    fn world(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            num_classes: self.classes,
            num_contexts: self.contexts,
            d_lat: self.d_lat,
            d_in: self.d_in,
            sigma: self.sigma,
            class_scale: self.class_scale,
            context_scale: self.context_scale,
            seed: self.world_seed.unwrap_or(seed),
        }
    }

    fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.d_in,
            d_hidden: self.d_hidden,
            embed_dim: self.embed_dim,
        }
    }

    fn ood(&self) -> Vec<usize> {
        self.ood_contexts.clone().unwrap_or_else(|| vec![self.contexts.saturating_sub(1)])
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long, default_value_t = PretrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = PretrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = PretrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = PretrainConfig::default().n_pairs)]
    n_pairs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ContextVariantArg {
    Averaged,
    PerClass,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = FinetuneConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = FinetuneConfig::default().lr_min)]
    lr_min: f64,
    #[arg(long, default_value_t = FinetuneConfig::default().weight_decay)]
    weight_decay: f64,
    #[arg(long, default_value_t = FinetuneConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = FinetuneConfig::default().epochs)]
    epochs: usize,
    /// Context weights used by the KL term.
    #[arg(long, value_enum, default_value = "averaged")]
    context_variant: ContextVariantArg,
    /// Leave head logits unscaled by the logit scale.
    #[arg(long)]
    no_tau_head: bool,
    /// Give the head a bias vector.
    #[arg(long)]
    head_bias: bool,
    /// Memoise the frozen reference context distributions.
    #[arg(long)]
    cache_reference: bool,
    /// Use KL[tuned || reference] instead of KL[reference || tuned].
    #[arg(long)]
    reverse_kl: bool,
    /// Newton iterations of the LP-FT probing stage.
    #[arg(long, default_value_t = LinearProbeConfig::default().max_iters)]
    probe_iters: usize,
}

impl TrainArgs {
    fn config(&self, method: Method, alpha: f64, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            method,
            alpha,
            lr: self.lr,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            context_mode: match self.context_variant {
                ContextVariantArg::Averaged => ContextMode::Averaged,
                ContextVariantArg::PerClass => ContextMode::PerClass,
            },
            scale_head: !self.no_tau_head,
            head_bias: self.head_bias,
            cache_reference: self.cache_reference,
            kl_direction: if self.reverse_kl {
                KlDirection::Reverse
            } else {
                KlDirection::Forward
            },
            probe: LinearProbeConfig {
                max_iters: self.probe_iters,
                ..LinearProbeConfig::default()
            },
        }
    }
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    ckpt_in: PathBuf,
    /// Defaults to <out-dir>/<method>.ckpt.
    #[arg(long)]
    ckpt_out: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    classes: Option<PathBuf>,
    /// Defaults to <out-dir>/<method>_log.csv.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data_id: Option<PathBuf>,
    #[arg(long)]
    data_ood: Option<PathBuf>,
    /// Method tag written to the report; defaults to the checkpoint's.
    #[arg(long)]
    method: Option<String>,
    /// Defaults to <out-dir>/eval_report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    templates: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    /// Use the context prompts of this class instead of the class average.
    #[arg(long)]
    class_index: Option<usize>,
    /// Number of contexts in the world; defaults to the number of templates.
    #[arg(long)]
    contexts: Option<usize>,
    #[arg(long, default_value = "model")]
    method: String,
    /// Defaults to <out-dir>/probe_report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepAlphaArgs {
    #[arg(long)]
    ckpt_in: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    data_id: PathBuf,
    #[arg(long)]
    data_ood: PathBuf,
    #[arg(long)]
    templates: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,1,4,16")]
    alphas: Vec<f64>,
    /// Defaults to <out-dir>/alpha_sweep.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct SweepWiseArgs {
    #[arg(long)]
    zero_shot: PathBuf,
    #[arg(long)]
    finetuned: PathBuf,
    #[arg(long)]
    data_id: PathBuf,
    #[arg(long)]
    data_ood: PathBuf,
    #[arg(long, default_value_t = carft::ensemble::DEFAULT_GRID_POINTS)]
    grid: usize,
    /// Defaults to <out-dir>/wise_curve.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Policy {
    Uniform,
    Greedy,
}

#[derive(Args, Debug)]
struct SoupArgs {
    #[arg(long, value_enum)]
    policy: Policy,
    /// Validation data; required by the greedy policy.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Defaults to <out-dir>/soup.ckpt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[command(flatten)]
    world: WorldArgs,
    #[command(flatten)]
    train: TrainArgs,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn or_default(path: &Option<PathBuf>, out_dir: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out_dir.join(name))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_prompts(templates: &Path, classes: &Path) -> anyhow::Result<PromptSet> {
    Ok(PromptSet::new(TemplateSet::load(templates)?, ClassNameSet::load(classes)?))
}

fn pretrain(cli: &Cli, args: &PretrainArgs) -> anyhow::Result<()> {
    ensure_dir(&cli.out_dir)?;
    let world_cfg = args.world.world(cli.seed);
    let world = generate_world(&world_cfg)?;
    let mut plan = SplitPlan::holding_out(world.num_contexts(), &args.world.ood(), world_cfg.seed)?;
    plan.n_train = args.world.n_train;
    plan.n_val = args.world.n_val;
    plan.n_test = args.world.n_test;
    let splits = Splits::sample(&world, &plan)?;
    let config = PretrainConfig {
        dims: args.world.dims(),
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        n_pairs: args.n_pairs,
        seed: cli.seed,
        ..PretrainConfig::default()
    };
    let outcome = pretrain_contrastive(&world, &config)?;
    let dir = &cli.out_dir;
    let mut meta = Metadata::new();
    meta.insert("seed".into(), outcome.seed.to_string());
    meta.insert("world_seed".into(), world_cfg.seed.to_string());
    save_checkpoint(&Checkpoint::from_dual(&outcome.model, meta.clone()), &dir.join("pretrained.ckpt"))?;
    let prompts = PromptSet::new(world.templates(), world.class_name_set());
    let zs = zero_shot_classifier(&outcome.model, &prompts, false, true)?;
    save_checkpoint(&Checkpoint::from_classifier(&zs, meta), &dir.join("zeroshot.ckpt"))?;
    for (name, ds) in [
        ("train.csv", &splits.train),
        ("val.csv", &splits.val),
        ("id_test.csv", &splits.id_test),
        ("ood_test.csv", &splits.ood_test),
    ] {
        export_dataset(ds, &dir.join(name))?;
    }
    let write = |name: &str, text: String| -> anyhow::Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("templates.tsv", prompts.templates.to_text())?;
    write("classes.txt", prompts.classes.to_text())?;
    let mut report = EvalReport::new();
    report.record("zero-shot", "gate", "acc", outcome.zero_shot_accuracy, outcome.seed)?;
    report.record("zero-shot", "gate", "probe_acc", outcome.probe_accuracy, outcome.seed)?;
    write_report(&report, &dir.join("pretrain_report.csv"))?;
    println!(
        "pre-trained with seed {}: zero-shot accuracy {:.4}, context probe {:.4}, logit scale {:.3}",
        outcome.seed,
        outcome.zero_shot_accuracy,
        outcome.probe_accuracy,
        outcome.model.logit_scale.get()
    );
    Ok(())
}

fn run_finetune(cli: &Cli, args: &FinetuneArgs) -> anyhow::Result<()> {
    ensure_dir(&cli.out_dir)?;
    let pre = load_checkpoint(&args.ckpt_in)?.to_dual()?;
    let data = import_dataset(&args.data)?;
    let prompts = match (&args.templates, &args.classes) {
        (Some(t), Some(c)) => Some(load_prompts(t, c)?),
        (None, None) => None,
        _ => return Err(Error::Config("--templates and --classes go together".into()).into()),
    };
    let config = args.train.config(args.method, args.alpha, cli.seed);
    let out = finetune(&pre, &data, prompts.as_ref(), &config)?;
    let name = args.method.as_str();
    let ckpt_out = or_default(&args.ckpt_out, &cli.out_dir, &format!("{name}.ckpt"));
    let log = or_default(&args.log, &cli.out_dir, &format!("{name}_log.csv"));
    save_checkpoint(&out.checkpoint(&config), &ckpt_out)?;
    out.log.write_csv(&log)?;
    let last = out.log.steps.last().expect("at least one step");
    println!(
        "{name}: {} steps, final loss_ce {:.6}, loss_kl {:.6}; wrote {}",
        out.log.steps.len(),
        last.loss_ce,
        last.loss_kl,
        ckpt_out.display()
    );
    Ok(())
}

fn eval(cli: &Cli, args: &EvalArgs) -> anyhow::Result<()> {
    if args.data_id.is_none() && args.data_ood.is_none() {
        return Err(Error::Config("give --data-id and/or --data-ood".into()).into());
    }
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = ckpt.to_classifier()?;
    let method = args
        .method
        .clone()
        .or_else(|| ckpt.meta.get("method").cloned())
        .unwrap_or_else(|| "model".into());
    let seed = ckpt.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(cli.seed);
    let mut report = EvalReport::new();
    for (split, path) in [("id", &args.data_id), ("ood", &args.data_ood)] {
        if let Some(p) = path {
            let acc = accuracy(&model, &import_dataset(p)?)?;
            println!("{method} {split} accuracy {acc:.4}");
            report.record(&method, split, "acc", acc, seed)?;
        }
    }
    ensure_dir(&cli.out_dir)?;
    write_report(&report, &or_default(&args.out, &cli.out_dir, "eval_report.csv"))?;
    Ok(())
}

fn probe_context(cli: &Cli, args: &ProbeArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = ckpt.to_dual()?;
    let prompts = load_prompts(&args.templates, &args.classes)?;
    let w = model.encode_prompts(&prompts.templates, &prompts.classes)?;
    let variant = match args.class_index {
        Some(k) => ContextVariant::PerClass(k),
        None => ContextVariant::Averaged,
    };
    let w_ctx = w.context_weights(variant)?;
    let data = import_dataset(&args.data)?;
    let contexts = args.contexts.unwrap_or(prompts.templates.len());
    let seen = data.iter().map(|e| e.c).max().unwrap_or(0) + 1;
    if seen > contexts {
        return Err(Error::ProbeAlignment {
            templates: prompts.templates.len(),
            contexts: seen,
        }
        .into());
    }
    let acc = context_probe(&model.image, &w_ctx, model.logit_scale, &data, contexts)?;
    println!("context probe accuracy {acc:.4}");
    let mut report = EvalReport::new();
    report.record(&args.method, "probe", "probe_acc", acc, cli.seed)?;
    ensure_dir(&cli.out_dir)?;
    write_report(&report, &or_default(&args.out, &cli.out_dir, "probe_report.csv"))?;
    Ok(())
}

fn sweep_alpha(cli: &Cli, args: &SweepAlphaArgs) -> anyhow::Result<()> {
    let pre = load_checkpoint(&args.ckpt_in)?.to_dual()?;
    let prompts = load_prompts(&args.templates, &args.classes)?;
    let (train, id, ood) = (
        import_dataset(&args.data)?,
        import_dataset(&args.data_id)?,
        import_dataset(&args.data_ood)?,
    );
    let base = args.train.config(Method::CarFt, 1.0, cli.seed);
    let rows = alpha_sweep(&pre, &train, &prompts, &id, &ood, &args.alphas, &base)?;
    let mut csv = String::from("alpha,id_acc,ood_acc\n");
    for r in &rows {
        csv.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", r.alpha, r.id_acc, r.ood_acc));
        println!("alpha {:<6} id {:.4} ood {:.4}", r.alpha, r.id_acc, r.ood_acc);
    }
    ensure_dir(&cli.out_dir)?;
    let out = or_default(&args.out, &cli.out_dir, "alpha_sweep.csv");
    std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn sweep_wise(cli: &Cli, args: &SweepWiseArgs) -> anyhow::Result<()> {
    let zs = load_checkpoint(&args.zero_shot)?;
    let ft = load_checkpoint(&args.finetuned)?;
    if !zs.has_head() {
        return Err(Error::Config(format!(
            "{} has no classification head; pass the zero-shot checkpoint written by `carft pretrain`",
            args.zero_shot.display()
        ))
        .into());
    }
    let curve = wise_curve(
        &zs,
        &ft,
        &import_dataset(&args.data_id)?,
        &import_dataset(&args.data_ood)?,
        &uniform_grid(args.grid)?,
    )?;
    for p in &curve.points {
        println!("w {:.2} id {:.4} ood {:.4}", p.w, p.id_acc, p.ood_acc);
    }
    ensure_dir(&cli.out_dir)?;
    curve.write_csv(&or_default(&args.out, &cli.out_dir, "wise_curve.csv"))?;
    Ok(())
}

fn soup(cli: &Cli, args: &SoupArgs) -> anyhow::Result<()> {
    // members are named by file name so the output does not depend on where
    // the inputs live; full paths only when file names collide
    let short: Vec<String> = args
        .checkpoints
        .iter()
        .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned()))
        .collect();
    let unique = short.iter().collect::<std::collections::BTreeSet<_>>().len() == short.len();
    let named = args
        .checkpoints
        .iter()
        .zip(short)
        .map(|(p, n)| Ok((if unique { n } else { p.display().to_string() }, load_checkpoint(p)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let (ckpt, members, policy) = match args.policy {
        Policy::Uniform => {
            let plain: Vec<Checkpoint> = named.iter().map(|(_, c)| c.clone()).collect();
            (uniform_soup(&plain)?, named.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(), "uniform")
        }
        Policy::Greedy => {
            let Some(val) = &args.val else {
                return Err(Error::Config("the greedy policy needs --val".into()).into());
            };
            let g = greedy_soup(&named, &import_dataset(val)?)?;
            println!("greedy soup validation accuracy {:.4}", g.val_accuracy);
            (g.checkpoint, g.members, "greedy")
        }
    };
    let meta = soup_metadata(&ckpt.meta, policy, &members);
    let ckpt = Checkpoint::new(ckpt.tensors().to_vec(), meta)?;
    ensure_dir(&cli.out_dir)?;
    let out = or_default(&args.out, &cli.out_dir, "soup.ckpt");
    save_checkpoint(&ckpt, &out)?;
    println!("{} of {} candidates in the soup; wrote {}", members.len(), named.len(), out.display());
    Ok(())
}

fn demo(cli: &Cli, args: &DemoArgs) -> anyhow::Result<()> {
    if args.seeds == 0 {
        bail!(Error::Config("--seeds must be at least 1".into()));
    }
    let base = ExperimentConfig::default();
    let config = ExperimentConfig {
        world: args.world.world(cli.seed),
        ood_contexts: args.world.ood(),
        n_train: args.world.n_train,
        n_val: args.world.n_val,
        n_test: args.world.n_test,
        pretrain: PretrainConfig {
            dims: args.world.dims(),
            ..base.pretrain
        },
        finetune: args.train.config(Method::CarFt, 1.0, cli.seed),
    };
    let seeds: Vec<u64> = (cli.seed..cli.seed + args.seeds).collect();
    let (report, _) = run_demo(&config, &seeds, &cli.out_dir)?;
    println!("{:<14} {:>10} {:>10} {:>10}", "method", "id acc", "ood acc", "probe acc");
    let mut methods: Vec<&str> = Vec::new();
    for r in report.rows() {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for m in methods {
        let cell = |split: &str, metric: &str| {
            report
                .summary(m, split, metric)
                .map_or_else(|| "-".to_string(), |(mean, sd)| format!("{mean:.3}±{sd:.3}"))
        };
        println!(
            "{m:<14} {:>10} {:>10} {:>10}",
            cell("id", "acc"),
            cell("ood", "acc"),
            cell("all", "probe_acc")
        );
    }
    println!("report written to {}", cli.out_dir.join("report.csv").display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numeric) => 4,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => pretrain(&cli, a),
        Command::Finetune(a) => run_finetune(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::ProbeContext(a) => probe_context(&cli, a),
        Command::SweepAlpha(a) => sweep_alpha(&cli, a),
        Command::SweepWise(a) => sweep_wise(&cli, a),
        Command::Soup(a) => soup(&cli, a),
        Command::Demo(a) => demo(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already render their causes
            match e.downcast_ref::<Error>() {
                Some(inner) => eprintln!("error: {inner}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
