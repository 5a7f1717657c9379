//! Synthetic class x context world.
//!
//! Every input is `x = U mu_y + V nu_c + eps` where `mu_y` is a class latent,
//! `nu_c` a context latent and `eps ~ N(0, sigma^2 I)`. Captions are the token
//! pair `[context, class]`, so a prompt "a <context> of <class>." tokenizes to
//! the same bag of words as the caption of a matching input.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Vocabulary;
use crate::numerics::{dot, normalize, Matrix};
use crate::prompts::{ClassNameSet, PromptTemplate, TemplateSet};

const CLASS_NAMES: [&str; 12] = [
    "dog", "elephant", "giraffe", "guitar", "horse", "house", "person", "car", "bird", "chair", "tree", "boat",
];
const CONTEXT_NAMES: [&str; 8] = [
    "photo", "sketch", "cartoon", "painting", "clipart", "infograph", "product", "quickdraw",
];
const MAX_RETRIES: usize = 100;
/// Latents within this angle of each other (or of each other's negation) are rejected.
const MIN_ANGLE_DEG: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub num_contexts: usize,
    pub d_lat: usize,
    pub d_in: usize,
    pub sigma: f64,
    /// Typical norm of `U mu_y`.
    pub class_scale: f64,
    /// Typical norm of `V nu_c`.
    pub context_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_contexts: 4,
            d_lat: 8,
            d_in: 32,
            sigma: 0.15,
            class_scale: 1.0,
            context_scale: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub class_latents: Vec<Vec<f64>>,
    pub context_latents: Vec<Vec<f64>>,
    /// `d_in x d_lat`
    pub class_map: Matrix,
    /// `d_in x d_lat`
    pub context_map: Matrix,
    pub class_names: Vec<String>,
    pub context_names: Vec<String>,
}

fn unit_vectors(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
    let min_cos = MIN_ANGLE_DEG.to_radians().cos();
    let vs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            normalize(&raw).map(|(v, _)| v)
        })
        .collect::<Option<_>>()?;
    for i in 0..n {
        for j in 0..i {
            if dot(&vs[i], &vs[j]).abs() >= min_cos {
                return None;
            }
        }
    }
    Some(vs)
}

fn names(pool: &[&str], prefix: &str, n: usize) -> Vec<String> {
    if n <= pool.len() {
        pool[..n].iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }
}

/// Builds a world deterministically from `config.seed`.
pub fn generate_world(config: &WorldConfig) -> Result<WorldSpec> {
    if config.num_classes < 2 || config.num_contexts < 2 {
        return Err(Error::Precondition(format!(
            "need at least 2 classes and 2 contexts, got {} and {}",
            config.num_classes, config.num_contexts
        )));
    }
    if config.d_lat == 0 || config.d_lat > config.d_in {
        return Err(Error::Precondition(format!(
            "latent dim {} must be in 1..={}",
            config.d_lat, config.d_in
        )));
    }
    if !(config.sigma >= 0.0) || !(config.class_scale > 0.0) || !(config.context_scale > 0.0) {
        return Err(Error::Precondition("sigma must be >= 0 and scales > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..MAX_RETRIES {
        let Some(class_latents) = unit_vectors(config.num_classes, config.d_lat, &mut rng) else {
            continue;
        };
        let Some(context_latents) = unit_vectors(config.num_contexts, config.d_lat, &mut rng) else {
            continue;
        };
        let map = |scale: f64, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, scale / (config.d_in as f64).sqrt()).expect("positive scale");
            Matrix::from_fn(config.d_in, config.d_lat, |_, _| normal.sample(rng))
        };
        let class_map = map(config.class_scale, &mut rng);
        let context_map = map(config.context_scale, &mut rng);
        return Ok(WorldSpec {
            config: config.clone(),
            class_latents,
            context_latents,
            class_map,
            context_map,
            class_names: names(&CLASS_NAMES, "class", config.num_classes),
            context_names: names(&CONTEXT_NAMES, "context", config.num_contexts),
        });
    }
    Err(Error::WorldGeneration(format!(
        "could not draw pairwise non-collinear latents in {} dims after {MAX_RETRIES} tries",
        config.d_lat
    )))
}

impl WorldSpec {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_contexts(&self) -> usize {
        self.config.num_contexts
    }

    /// Class words followed by context words.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.class_names.iter().chain(&self.context_names).cloned().collect())
            .expect("generated names are valid words")
    }

    /// Caption tokens `[context, class]` under [`WorldSpec::vocabulary`].
    pub fn caption(&self, y: usize, c: usize) -> Vec<usize> {
        vec![self.num_classes() + c, y]
    }

    pub fn class_name_set(&self) -> ClassNameSet {
        ClassNameSet::new(self.class_names.clone()).expect("generated names are unique")
    }

    /// One "a <context> of [CLASS]." template per context, in context order.
    pub fn templates(&self) -> TemplateSet {
        TemplateSet::new(
            self.context_names
                .iter()
                .map(|c| PromptTemplate::new(c.clone(), format!("a {c} of [CLASS].")).expect("valid template"))
                .collect(),
        )
        .expect("unique context names")
    }

    /// Noise-free input for `(y, c)`.
    pub fn clean_input(&self, y: usize, c: usize) -> Vec<f64> {
        let a = self.class_map.matvec(&self.class_latents[y]).expect("d_lat matches");
        let b = self.context_map.matvec(&self.context_latents[c]).expect("d_lat matches");
        a.iter().zip(&b).map(|(p, q)| p + q).collect()
    }
}

/// One labelled input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
    pub c: usize,
}

/// An ordered list of examples sharing one input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let first = examples.first().ok_or(Error::EmptyDataset)?;
        let d = first.x.len();
        if examples.iter().any(|e| e.x.len() != d) {
            return Err(Error::Dimension("examples have unequal input sizes".into()));
        }
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.examples[0].x.len()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// Concatenation of two datasets.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut ex = self.examples.clone();
        ex.extend(other.examples.iter().cloned());
        Dataset::new(ex)
    }
}

/// Which contexts are seen during fine-tuning and which are held out.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub train_contexts: Vec<usize>,
    pub ood_contexts: Vec<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SplitPlan {
    /// Holds out `ood` and trains on the remaining contexts.
    pub fn holding_out(num_contexts: usize, ood: &[usize], seed: u64) -> Result<Self> {
        let plan = Self {
            train_contexts: (0..num_contexts).filter(|c| !ood.contains(c)).collect(),
            ood_contexts: ood.to_vec(),
            n_train: 4096,
            n_val: 1024,
            n_test: 1024,
            seed,
        };
        plan.validate(num_contexts)?;
        Ok(plan)
    }

    pub fn validate(&self, num_contexts: usize) -> Result<()> {
        if self.train_contexts.is_empty() || self.ood_contexts.is_empty() {
            return Err(Error::Precondition("train and OOD context sets must both be nonempty".into()));
        }
        if let Some(c) = self.train_contexts.iter().chain(&self.ood_contexts).find(|c| **c >= num_contexts) {
            return Err(Error::Precondition(format!("context {c} out of range for {num_contexts} contexts")));
        }
        if self.train_contexts.iter().any(|c| self.ood_contexts.contains(c)) {
            return Err(Error::Precondition("train and OOD contexts overlap".into()));
        }
        Ok(())
    }
}

/// Draws `n` examples with labels uniform over classes and contexts uniform over `contexts`.
pub fn sample_split(world: &WorldSpec, contexts: &[usize], n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if contexts.is_empty() || contexts.iter().any(|c| *c >= world.num_contexts()) {
        return Err(Error::Precondition(format!("invalid context set {contexts:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, world.config.sigma.max(0.0)).map_err(|e| Error::Numeric(e.to_string()))?;
    let examples = (0..n)
        .map(|_| {
            let y = rng.random_range(0..world.num_classes());
            let c = *contexts.choose(&mut rng).expect("nonempty");
            let mut x = world.clean_input(y, c);
            if world.config.sigma > 0.0 {
                x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            Example { x, y, c }
        })
        .collect();
    Dataset::new(examples)
}

/// The standard splits of one experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub id_test: Dataset,
    pub ood_test: Dataset,
}

impl Splits {
    pub fn sample(world: &WorldSpec, plan: &SplitPlan) -> Result<Self> {
        plan.validate(world.num_contexts())?;
        let s = plan.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(Self {
            train: sample_split(world, &plan.train_contexts, plan.n_train, s ^ 1)?,
            val: sample_split(world, &plan.train_contexts, plan.n_val, s ^ 2)?,
            id_test: sample_split(world, &plan.train_contexts, plan.n_test, s ^ 3)?,
            ood_test: sample_split(world, &plan.ood_contexts, plan.n_test, s ^ 4)?,
        })
    }

    /// ID and OOD test sets together, covering every context.
    pub fn probe_set(&self) -> Dataset {
        self.id_test.concat(&self.ood_test).expect("same input size")
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = String::from("y,c");
    for i in 0..ds.d_in() {
        let _ = write!(out, ",x{i}");
    }
    out.push('\n');
    for e in ds.iter() {
        let _ = write!(out, "{},{}", e.y, e.c);
        for v in &e.x {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::EmptyDataset);
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "y" || cols[1] != "c" || cols[2..].iter().enumerate().any(|(i, c)| *c != format!("x{i}")) {
        return Err(Error::Parse {
            line: 1,
            reason: "header must be y,c,x0,...".into(),
        });
    }
    let width = cols.len();
    let mut examples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("expected {width} columns, found {}", fields.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: lineno,
            reason: format!("invalid {what}"),
        };
        let y = fields[0].parse().map_err(|_| bad("class label"))?;
        let c = fields[1].parse().map_err(|_| bad("context label"))?;
        let x = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("feature value")))
            .collect::<Result<Vec<_>>>()?;
        examples.push(Example { x, y, c });
    }
    Dataset::new(examples)
}

pub fn export_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_csv(ds)).map_err(|e| Error::io(path, e))
}

pub fn import_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn world(sigma: f64) -> WorldSpec {
        generate_world(&WorldConfig {
            sigma,
            seed: 11,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_world() {
        assert_eq!(world(0.05), world(0.05));
        let other = generate_world(&WorldConfig {
            seed: 12,
            ..WorldConfig::default()
        })
        .unwrap();
        assert_ne!(world(0.05), other);
    }

    #[test]
    fn latents_are_unit_and_spread() {
        let w = world(0.05);
        let min_cos = MIN_ANGLE_DEG.to_radians().cos();
        for set in [&w.class_latents, &w.context_latents] {
            for (i, a) in set.iter().enumerate() {
                assert!((dot(a, a) - 1.0).abs() < 1e-12);
                for b in &set[..i] {
                    assert!(dot(a, b).abs() < min_cos);
                }
            }
        }
    }

    #[test]
    fn two_by_two_noiseless_world_has_four_inputs() {
        let w = generate_world(&WorldConfig {
            num_classes: 2,
            num_contexts: 2,
            sigma: 0.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let ds = sample_split(&w, &[0, 1], 200, 3).unwrap();
        let mut distinct: Vec<Vec<u64>> = ds.iter().map(|e| e.x.iter().map(|v| v.to_bits()).collect()).collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn preconditions() {
        let bad = WorldConfig {
            d_lat: 40,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&bad), Err(Error::Precondition(_))));
        let one_class = WorldConfig {
            num_classes: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&one_class), Err(Error::Precondition(_))));
        // three directions cannot be pairwise non-collinear on a line
        let line = WorldConfig {
            num_classes: 3,
            d_lat: 1,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_world(&line), Err(Error::WorldGeneration(_))));
    }

    #[test]
    fn noiseless_repeats_are_identical() {
        let w = world(0.0);
        let ds = sample_split(&w, &[0, 1, 2], 300, 5).unwrap();
        for a in ds.iter() {
            for b in ds.iter().filter(|b| b.y == a.y && b.c == a.c) {
                assert_eq!(a.x, b.x);
            }
        }
    }

    #[test]
    fn ood_split_only_holds_out_contexts() {
        let w = world(0.05);
        let plan = SplitPlan::holding_out(4, &[3], 9).unwrap();
        let s = Splits::sample(&w, &plan).unwrap();
        assert!(s.ood_test.iter().all(|e| e.c == 3));
        assert!(s.train.iter().all(|e| e.c != 3));
        assert!(SplitPlan::holding_out(4, &[0, 1, 2, 3], 0).is_err());
        assert!(SplitPlan::holding_out(4, &[], 0).is_err());
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(matches!(sample_split(&world(0.05), &[0], 0, 1), Err(Error::EmptyDataset)));
    }

    #[test]
    fn class_counts_within_binomial_bounds() {
        // n = 4000, p = 1/4: sd = sqrt(4000 * 0.25 * 0.75) ~ 27.4, so [900, 1100] is ~3.6 sd
        let w = generate_world(&WorldConfig {
            num_classes: 4,
            ..WorldConfig::default()
        })
        .unwrap();
        let ds = sample_split(&w, &[0, 1, 2], 4000, 21).unwrap();
        for k in 0..4 {
            let n = ds.iter().filter(|e| e.y == k).count();
            assert!((900..=1100).contains(&n), "class {k}: {n}");
        }
    }

    #[test]
    fn labels_pass_chi_square() {
        let w = world(0.05);
        let ds = sample_split(&w, &[0, 1, 2], 2000, 4).unwrap();
        let chi = |counts: Vec<usize>| {
            let e = ds.len() as f64 / counts.len() as f64;
            counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum::<f64>()
        };
        let ys = (0..8).map(|k| ds.iter().filter(|e| e.y == k).count()).collect();
        let cs = (0..3).map(|k| ds.iter().filter(|e| e.c == k).count()).collect();
        // 0.999 quantiles: chi2(7) = 24.32, chi2(2) = 13.82
        assert!(chi(ys) < 24.32);
        assert!(chi(cs) < 13.82);
    }

    #[test]
    fn captions_and_templates_share_tokens() {
        let w = world(0.05);
        let vocab = w.vocabulary();
        let prompt = w.templates().templates()[2].fill(&w.class_names[5]);
        let mut a = vocab.tokenize(&prompt);
        let mut b = w.caption(5, 2);
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(dataset_from_csv(""), Err(Error::EmptyDataset)));
        assert!(matches!(dataset_from_csv("y,c,x0\n"), Err(Error::EmptyDataset)));
        assert!(matches!(
            dataset_from_csv("y,c,x0,x1\n0,1,0.5,0.25\n1,0,0.5\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(dataset_from_csv("a,b\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = sample_split(&world(0.05), &[0, 1], 50, 2).unwrap();
        export_dataset(&ds, &path).unwrap();
        assert_eq!(import_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn context_is_linearly_decodable() {
        // least-squares one-vs-rest probe on raw inputs
        let w = world(0.1);
        let train = sample_split(&w, &[0, 1, 2, 3], 2000, 31).unwrap();
        let test = sample_split(&w, &[0, 1, 2, 3], 1000, 32).unwrap();
        let d = train.d_in() + 1;
        let mut xtx = nalgebra::DMatrix::<f64>::identity(d, d) * 1e-6;
        let mut xty = nalgebra::DMatrix::<f64>::zeros(d, 4);
        for e in train.iter() {
            let mut f = e.x.clone();
            f.push(1.0);
            let v = nalgebra::DVector::from_vec(f);
            xtx += &v * v.transpose();
            for c in 0..4 {
                let t = if c == e.c { 1.0 } else { 0.0 };
                for i in 0..d {
                    xty[(i, c)] += v[i] * t;
                }
            }
        }
        let beta = xtx.cholesky().unwrap().solve(&xty);
        let correct = test
            .iter()
            .filter(|e| {
                let mut f = e.x.clone();
                f.push(1.0);
                let s: Vec<f64> = (0..4).map(|c| (0..d).map(|i| f[i] * beta[(i, c)]).sum()).collect();
                crate::numerics::argmax(&s) == e.c
            })
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.95);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn csv_round_trip(seed in any::<u64>(), n in 1usize..20) {
            let w = world(0.3);
            let ds = sample_split(&w, &[0, 2], n, seed).unwrap();
            prop_assert_eq!(dataset_from_csv(&dataset_to_csv(&ds)).unwrap(), ds);
        }
    }
}
