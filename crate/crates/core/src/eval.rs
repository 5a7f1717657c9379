//! Accuracy, the zero-shot context probe, the alpha sweep and CSV reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{scaled_similarities, Classifier, DualEncoder, ImageEncoder, LogitScale};
use crate::numerics::{argmax, Matrix};
use crate::prompts::PromptSet;
use crate::trainer::{finetune, FinetuneConfig, Method};
use crate::worldgen::Dataset;

/// Anything that maps an input to class logits.
pub trait Predictor: Sync {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl Predictor for Classifier {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.head_logits(x)
    }
}

/// Zero-shot classifier `tau * W^T h(x)` over a fixed weight matrix.
#[derive(Debug, Clone, Copy)]
pub struct ZeroShot<'a> {
    pub image: &'a ImageEncoder,
    pub weights: &'a Matrix,
    pub tau: LogitScale,
}

impl<'a> ZeroShot<'a> {
    pub fn new(image: &'a ImageEncoder, weights: &'a Matrix, tau: LogitScale) -> Self {
        Self { image, weights, tau }
    }
}

impl Predictor for ZeroShot<'_> {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        scaled_similarities(self.weights, &self.image.encode(x)?, self.tau.get())
    }
}

fn hit_rate<F>(data: &Dataset, hit: F) -> Result<f64>
where
    F: Fn(&crate::worldgen::Example) -> Result<bool> + Sync,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = data
        .examples
        .par_iter()
        .map(|e| hit(e).map(usize::from))
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(hits as f64 / data.len() as f64)
}

/// Top-1 accuracy against the class labels; ties go to the lowest index.
pub fn accuracy(model: &impl Predictor, data: &Dataset) -> Result<f64> {
    hit_rate(data, |e| Ok(argmax(&model.logits(&e.x)?) == e.y))
}

/// Zero-shot context recognition accuracy against the context labels.
pub fn context_probe(
    image: &ImageEncoder,
    context_weights: &Matrix,
    tau: LogitScale,
    data: &Dataset,
    num_contexts: usize,
) -> Result<f64> {
    if context_weights.cols() != num_contexts {
        return Err(Error::ProbeAlignment {
            templates: context_weights.cols(),
            contexts: num_contexts,
        });
    }
    let probe = ZeroShot::new(image, context_weights, tau);
    hit_rate(data, |e| Ok(argmax(&probe.logits(&e.x)?) == e.c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaRow {
    pub alpha: f64,
    pub id_acc: f64,
    pub ood_acc: f64,
}

/// One CAR-FT run per alpha with the rest of `base` held fixed.
pub fn alpha_sweep(
    pretrained: &DualEncoder,
    train: &Dataset,
    prompts: &PromptSet,
    id_test: &Dataset,
    ood_test: &Dataset,
    alphas: &[f64],
    base: &FinetuneConfig,
) -> Result<Vec<AlphaRow>> {
    if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0) || !a.is_finite()) {
        return Err(Error::Config(format!("alpha values must be finite and >= 0, got {a}")));
    }
    if alphas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("alpha values must be sorted".into()));
    }
    alphas
        .par_iter()
        .map(|&alpha| {
            let cfg = FinetuneConfig {
                method: Method::CarFt,
                alpha,
                ..base.clone()
            };
            let run = || -> Result<AlphaRow> {
                let out = finetune(pretrained, train, Some(prompts), &cfg)?;
                Ok(AlphaRow {
                    alpha,
                    id_acc: accuracy(&out.model, id_test)?,
                    ood_acc: accuracy(&out.model, ood_test)?,
                })
            };
            run().map_err(|e| Error::Sweep {
                alpha,
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl ReportRow {
    fn key(&self) -> (String, String, String, u64) {
        (self.method.clone(), self.split.clone(), self.metric.clone(), self.seed)
    }
}

/// Result rows keyed uniquely by (method, split, metric, seed).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    rows: Vec<ReportRow>,
    keys: BTreeSet<(String, String, String, u64)>,
}

const REPORT_HEADER: &str = "method,split,metric,value,seed";

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        for field in [&row.method, &row.split, &row.metric] {
            if field.is_empty() || field.contains([',', '\n', '\r']) {
                return Err(Error::Config(format!("report field {field:?} must be non-empty without commas")));
            }
        }
        if !row.value.is_finite() {
            return Err(Error::Numeric(format!("report value {} for {}", row.value, row.metric)));
        }
        if row.metric.ends_with("acc") && !(0.0..=1.0).contains(&row.value) {
            return Err(Error::Range(format!("accuracy {} outside [0, 1]", row.value)));
        }
        let key = row.key();
        if !self.keys.insert(key.clone()) {
            return Err(Error::DuplicateKey(format!("{}/{}/{}/{}", key.0, key.1, key.2, key.3)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn record(&mut self, method: &str, split: &str, metric: &str, value: f64, seed: u64) -> Result<()> {
        self.push(ReportRow {
            method: method.into(),
            split: split.into(),
            metric: metric.into(),
            value,
            seed,
        })
    }

    pub fn get(&self, method: &str, split: &str, metric: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.split == split && r.metric == metric && r.seed == seed)
            .map(|r| r.value)
    }

    /// Mean and sample standard deviation across seeds.
    pub fn summary(&self, method: &str, split: &str, metric: &str) -> Option<(f64, f64)> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some((mean, var.sqrt()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.16e},{}", r.method, r.split, r.metric, r.value, r.seed);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == REPORT_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    reason: format!("expected header {REPORT_HEADER:?}"),
                })
            }
        }
        let mut report = EvalReport::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            let bad = |reason: String| Error::Parse { line: line_no, reason };
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", fields.len())));
            }
            let value: f64 = fields[3].parse().map_err(|_| bad(format!("bad value {:?}", fields[3])))?;
            let seed: u64 = fields[4].parse().map_err(|_| bad(format!("bad seed {:?}", fields[4])))?;
            report
                .record(fields[0], fields[1], fields[2], value, seed)
                .map_err(|e| match e {
                    Error::DuplicateKey(_) => e,
                    other => bad(other.to_string()),
                })?;
        }
        Ok(report)
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EvalReport::from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierHead, ModelDims};
    use crate::worldgen::Example;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixed(Vec<f64>);

    impl Predictor for Fixed {
        fn logits(&self, _: &[f64]) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    struct Oracle;

    impl Predictor for Oracle {
        fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
            let mut l = vec![0.0; 3];
            l[x[0] as usize] = 1.0;
            Ok(l)
        }
    }

    fn labelled(labels: &[usize]) -> Dataset {
        Dataset::new(
            labels
                .iter()
                .map(|&y| Example {
                    x: vec![y as f64, 0.5],
                    y,
                    c: y % 2,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let ds = labelled(&[0, 1, 2, 1, 0]);
        assert_eq!(accuracy(&Oracle, &ds).unwrap(), 1.0);
        let ds2 = labelled(&[0, 1, 0, 1]);
        assert_eq!(accuracy(&Fixed(vec![1.0, 1.0]), &ds2).unwrap(), 0.5);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = Dataset { examples: vec![] };
        assert!(matches!(accuracy(&Oracle, &ds), Err(Error::EmptyDataset)));
    }

    fn toy_classifier(seed: u64) -> (Classifier, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            d_in: 5,
            d_hidden: 7,
            embed_dim: 4,
        };
        let vocab = crate::model::Vocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let pre = DualEncoder::init(dims, vocab, &mut rng);
        let head = ClassifierHead::new(Matrix::from_fn(4, 3, |r, c| ((r * 3 + c) as f64).sin()), true);
        let model = Classifier::from_pretrained(&pre, head, true);
        let ds = crate::worldgen::Dataset::new(
            (0..60)
                .map(|i| Example {
                    x: (0..5).map(|j| ((i * 7 + j * 3) as f64 * 0.37).cos()).collect(),
                    y: i % 3,
                    c: i % 2,
                })
                .collect(),
        )
        .unwrap();
        (model, ds)
    }

    #[test]
    fn accuracy_matches_brute_force_scoring() {
        let (model, ds) = toy_classifier(3);
        // independent scoring path: explicit feature, dot products, first maximum
        let mut correct = 0;
        for e in ds.iter() {
            let h = model.image.encode(&e.x).unwrap();
            let tau = model.logit_scale.get();
            let mut best = (f64::NEG_INFINITY, 0);
            for k in 0..3 {
                let s: f64 = (0..4).map(|d| model.head.weight.get(d, k) * h[d]).sum::<f64>() * tau
                    + model.head.bias.as_ref().unwrap().get(k, 0);
                if s > best.0 {
                    best = (s, k);
                }
            }
            correct += usize::from(best.1 == e.y);
        }
        assert_eq!(accuracy(&model, &ds).unwrap(), correct as f64 / ds.len() as f64);
    }

    #[test]
    fn constant_encoder_probe_is_chance() {
        // zero first layer: every input maps to the same feature
        let (mut model, _) = toy_classifier(5);
        model.image.w1.fill(0.0);
        model.image.b1.fill(0.3);
        let ds = labelled(&[0, 1, 0, 1, 0, 1, 0, 1]);
        let ds = Dataset::new(
            ds.iter()
                .map(|e| Example {
                    x: vec![0.1; 5],
                    ..e.clone()
                })
                .collect(),
        )
        .unwrap();
        let w_ctx = Matrix::from_fn(4, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        let acc = context_probe(&model.image, &w_ctx, model.logit_scale, &ds, 2).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn probe_alignment_is_checked() {
        let (model, ds) = toy_classifier(1);
        let w_ctx = Matrix::from_fn(4, 3, |_, _| 0.5);
        assert!(matches!(
            context_probe(&model.image, &w_ctx, model.logit_scale, &ds, 2),
            Err(Error::ProbeAlignment { templates: 3, contexts: 2 })
        ));
    }

    #[test]
    fn report_round_trip_and_uniqueness() {
        let mut r = EvalReport::new();
        r.record("car-ft", "ood", "acc", 0.1 + 0.2, 0).unwrap();
        r.record("ft", "id", "acc", 1.0 / 3.0, 7).unwrap();
        r.record("ft", "id", "loss", 1e-300, 7).unwrap();
        let back = EvalReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        for (a, b) in back.rows().iter().zip(r.rows()) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
        assert!(matches!(r.record("ft", "id", "acc", 0.5, 7), Err(Error::DuplicateKey(_))));
        assert_eq!(EvalReport::new().to_csv(), "method,split,metric,value,seed\n");
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let text = "method,split,metric,value,seed\nft,id,acc,0.5,0\nft,id,acc,abc,1\n";
        assert!(matches!(EvalReport::from_csv(text), Err(Error::Parse { line: 3, .. })));
        let text = "method,split,metric,value,seed\nft,id,acc,0.5\n";
        assert!(matches!(EvalReport::from_csv(text), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(EvalReport::from_csv("nope\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn summary_aggregates_seeds() {
        let mut r = EvalReport::new();
        for (s, v) in [(0, 0.2), (1, 0.4), (2, 0.6)] {
            r.record("ft", "id", "acc", v, s).unwrap();
        }
        let (m, sd) = r.summary("ft", "id", "acc").unwrap();
        assert!((m - 0.4).abs() < 1e-15);
        assert!((sd - 0.2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn accuracy_is_permutation_invariant(seed in 0u64..1000, rot in 0usize..60) {
            let (model, ds) = toy_classifier(seed);
            let mut ex = ds.examples.clone();
            ex.rotate_left(rot);
            ex.reverse();
            let shuffled = Dataset::new(ex).unwrap();
            prop_assert_eq!(accuracy(&model, &ds).unwrap(), accuracy(&model, &shuffled).unwrap());
        }

        #[test]
        fn report_values_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
            let mut r = EvalReport::new();
            for (i, v) in values.iter().enumerate() {
                r.record("m", "s", "loss", *v, i as u64).unwrap();
            }
            let back = EvalReport::from_csv(&r.to_csv()).unwrap();
            for (a, b) in back.rows().iter().zip(r.rows()) {
                prop_assert_eq!(a.value.to_bits(), b.value.to_bits());
            }
        }
    }
}
