//! The toy dual encoder: a tanh-MLP image tower, a mean-pooling text tower,
//! a logit scale and the downstream classifier head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Metadata, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, EPS_NORM};
use crate::prompts::{build_prompt_set, ClassNameSet, PromptWeightTensor, TemplateSet};

/// Anything exposing its tensors in a fixed order, so optimizers and
/// ensembling can walk parameters and gradients in lockstep.
pub trait Params {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.as_slice().iter().copied()).collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.as_slice().len();
            t.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// SHA-256 over the little-endian bytes of every tensor.
    fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            hasher.update((t.rows() as u64).to_le_bytes());
            hasher.update((t.cols() as u64).to_le_bytes());
            hasher.update(t.to_le_bytes());
        }
        hasher.finalize().into()
    }
}

impl Params for Matrix {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![self]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![self]
    }
}

impl<A: Params, B: Params> Params for (A, B) {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.0.tensors();
        v.extend(self.1.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.0.tensors_mut();
        v.extend(self.1.tensors_mut());
        v
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

/// Backpropagates through `h = u / ||u||`.
fn normalize_backward(h: &[f64], u_norm: f64, g_h: &[f64]) -> Vec<f64> {
    let proj: f64 = h.iter().zip(g_h).map(|(a, b)| a * b).sum();
    g_h.iter().zip(h).map(|(g, hv)| (g - hv * proj) / u_norm).collect()
}

/// Layer sizes of the dual encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub embed_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_hidden: 64,
            embed_dim: 16,
        }
    }
}

/// Two-layer tanh MLP followed by L2 normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ImageForward {
    hidden: Vec<f64>,
    pre_norm: f64,
    pub feature: Vec<f64>,
}

impl ImageEncoder {
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Self {
        Self {
            w1: gaussian(dims.d_hidden, dims.d_in, 1.0 / (dims.d_in as f64).sqrt(), rng),
            b1: Matrix::zeros(dims.d_hidden, 1),
            w2: gaussian(dims.embed_dim, dims.d_hidden, 1.0 / (dims.d_hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(dims.embed_dim, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(self.b1.rows(), 1),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(self.b2.rows(), 1),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ImageForward> {
        check_len("image input", x.len(), self.d_in())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image input is not finite".into()));
        }
        let mut hidden = self.w1.matvec(x)?;
        for (a, b) in hidden.iter_mut().zip(self.b1.as_slice()) {
            *a = (*a + b).tanh();
        }
        let mut out = self.w2.matvec(&hidden)?;
        for (o, b) in out.iter_mut().zip(self.b2.as_slice()) {
            *o += b;
        }
        let n = crate::numerics::norm(&out);
        if !(n > EPS_NORM) || !n.is_finite() {
            return Err(Error::DegenerateFeature { norm: n });
        }
        out.iter_mut().for_each(|v| *v /= n);
        Ok(ImageForward {
            hidden,
            pre_norm: n,
            feature: out,
        })
    }

    /// Unit-norm image feature `h(x)`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.feature)
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d h`.
    pub fn backward(&self, x: &[f64], fwd: &ImageForward, g_feature: &[f64], grad: &mut ImageEncoder) {
        let g_out = normalize_backward(&fwd.feature, fwd.pre_norm, g_feature);
        grad.w2.add_outer(1.0, &g_out, &fwd.hidden);
        for (g, v) in grad.b2.as_mut_slice().iter_mut().zip(&g_out) {
            *g += v;
        }
        let mut g_hidden = self.w2.matvec_t(&g_out).expect("shape checked in forward");
        for (g, z) in g_hidden.iter_mut().zip(&fwd.hidden) {
            *g *= 1.0 - z * z;
        }
        grad.w1.add_outer(1.0, &g_hidden, x);
        for (g, v) in grad.b1.as_mut_slice().iter_mut().zip(&g_hidden) {
            *g += v;
        }
    }
}

impl Params for ImageEncoder {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Whitespace vocabulary. Tokens are lower-cased and stripped of surrounding
/// punctuation; words outside the vocabulary are dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let words: Vec<String> = words.into_iter().map(|w| w.to_lowercase()).collect();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) || w.contains(',') {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if words[..i].contains(w) {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter_map(|w| self.id(&w))
            .collect()
    }
}

/// Token embedding table, mean pooling, linear projection, L2 normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    /// `vocab x D`
    pub embed: Matrix,
    /// `D x D`
    pub proj: Matrix,
}

#[derive(Debug, Clone)]
pub struct TextForward {
    pooled: Vec<f64>,
    pre_norm: f64,
    pub feature: Vec<f64>,
}

impl TextEncoder {
    pub fn init(vocab_size: usize, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            embed: gaussian(vocab_size, embed_dim, 1.0, rng),
            proj: gaussian(embed_dim, embed_dim, 1.0 / (embed_dim as f64).sqrt(), rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embed: Matrix::zeros(self.embed.rows(), self.embed.cols()),
            proj: Matrix::zeros(self.proj.rows(), self.proj.cols()),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.rows()
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<TextForward> {
        if tokens.is_empty() {
            return Err(Error::Precondition("prompt has no in-vocabulary tokens".into()));
        }
        let d = self.embed.cols();
        let mut pooled = vec![0.0; d];
        for &t in tokens {
            if t >= self.embed.rows() {
                return Err(Error::Index {
                    index: t,
                    len: self.embed.rows(),
                });
            }
            for (p, e) in pooled.iter_mut().zip(self.embed.row(t)) {
                *p += e;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);
        let mut out = self.proj.matvec(&pooled)?;
        let n = crate::numerics::norm(&out);
        if !(n > EPS_NORM) || !n.is_finite() {
            return Err(Error::DegenerateFeature { norm: n });
        }
        out.iter_mut().for_each(|v| *v /= n);
        Ok(TextForward {
            pooled,
            pre_norm: n,
            feature: out,
        })
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.forward(tokens)?.feature)
    }

    pub fn backward(&self, tokens: &[usize], fwd: &TextForward, g_feature: &[f64], grad: &mut TextEncoder) {
        let g_out = normalize_backward(&fwd.feature, fwd.pre_norm, g_feature);
        grad.proj.add_outer(1.0, &g_out, &fwd.pooled);
        let g_pooled = self.proj.matvec_t(&g_out).expect("shape checked in forward");
        let inv = 1.0 / tokens.len() as f64;
        let d = self.embed.cols();
        for &t in tokens {
            let row = &mut grad.embed.as_mut_slice()[t * d..(t + 1) * d];
            for (r, g) in row.iter_mut().zip(&g_pooled) {
                *r += g * inv;
            }
        }
    }
}

impl Params for TextEncoder {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.embed, &self.proj]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.embed, &mut self.proj]
    }
}

/// Positive logit scale applied to cosine similarities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitScale(f64);

impl LogitScale {
    pub const MIN: f64 = 1.0;
    pub const MAX: f64 = 100.0;

    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::Numeric(format!("logit scale must be positive, got {value}")));
        }
        Ok(Self(value))
    }

    /// Clamps into `[MIN, MAX]`, the range used while learning the scale.
    pub fn clamped(value: f64) -> Self {
        Self(value.clamp(Self::MIN, Self::MAX))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Linear classifier `W_f` (D x K) with an optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Matrix,
    pub bias: Option<Matrix>,
}

impl ClassifierHead {
    pub fn new(weight: Matrix, with_bias: bool) -> Self {
        let k = weight.cols();
        Self {
            weight,
            bias: with_bias.then(|| Matrix::zeros(k, 1)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: self.bias.as_ref().map(|b| Matrix::zeros(b.rows(), 1)),
        }
    }

    /// `scale * W^T h (+ b)`.
    pub fn logits(&self, feature: &[f64], scale: f64) -> Result<Vec<f64>> {
        let mut out = self.weight.matvec_t(feature)?;
        out.iter_mut().for_each(|v| *v *= scale);
        if let Some(b) = &self.bias {
            for (o, bv) in out.iter_mut().zip(b.as_slice()) {
                *o += bv;
            }
        }
        Ok(out)
    }

    /// Accumulates head gradients and returns `d loss / d h`.
    pub fn backward(&self, feature: &[f64], scale: f64, g_logits: &[f64], grad: &mut ClassifierHead) -> Vec<f64> {
        grad.weight.add_outer(scale, feature, g_logits);
        if let Some(b) = grad.bias.as_mut() {
            for (g, v) in b.as_mut_slice().iter_mut().zip(g_logits) {
                *g += v;
            }
        }
        let mut g_h = self.weight.matvec(g_logits).expect("shape checked in logits");
        g_h.iter_mut().for_each(|v| *v *= scale);
        g_h
    }
}

impl Params for ClassifierHead {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = self.bias.as_mut() {
            v.push(b);
        }
        v
    }
}

/// `scale * W^T h` for a weight matrix `D x n`.
pub fn scaled_similarities(weights: &Matrix, feature: &[f64], scale: f64) -> Result<Vec<f64>> {
    if weights.rows() != feature.len() {
        return Err(Error::Dimension(format!(
            "weights have {} rows, feature has {} entries",
            weights.rows(),
            feature.len()
        )));
    }
    let mut s = weights.matvec_t(feature)?;
    s.iter_mut().for_each(|v| *v *= scale);
    Ok(s)
}

/// Zero-shot class logits `tau * W_cls^T h(x)`.
pub fn zero_shot_logits(image: &ImageEncoder, class_weights: &Matrix, tau: LogitScale, x: &[f64]) -> Result<Vec<f64>> {
    scaled_similarities(class_weights, &image.encode(x)?, tau.get())
}

/// Context distribution `softmax(tau * W_ctx^T h(x))`.
pub fn context_distribution(
    image: &ImageEncoder,
    context_weights: &Matrix,
    tau: LogitScale,
    x: &[f64],
) -> Result<Vec<f64>> {
    softmax(&scaled_similarities(context_weights, &image.encode(x)?, tau.get())?)
}

/// The pre-trained dual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub logit_scale: LogitScale,
    pub vocab: Vocabulary,
}

impl DualEncoder {
    pub fn init(dims: ModelDims, vocab: Vocabulary, rng: &mut impl Rng) -> Self {
        let image = ImageEncoder::init(dims, rng);
        let text = TextEncoder::init(vocab.len(), dims.embed_dim, rng);
        Self {
            image,
            text,
            logit_scale: LogitScale::clamped(1.0 / 0.07),
            vocab,
        }
    }

    pub fn encode_text(&self, prompt: &str) -> Result<Vec<f64>> {
        self.text.encode(&self.vocab.tokenize(prompt))
    }

    /// Encodes every prompt of `templates x classes` through the frozen text tower.
    pub fn encode_prompts(&self, templates: &TemplateSet, classes: &ClassNameSet) -> Result<PromptWeightTensor> {
        let prompts = build_prompt_set(templates, classes);
        let columns = prompts
            .iter()
            .map(|p| {
                self.encode_text(p).map_err(|e| match e {
                    Error::Precondition(_) => Error::Template {
                        template: p.clone(),
                        reason: "no in-vocabulary tokens".into(),
                    },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        PromptWeightTensor::new(Matrix::from_columns(&columns)?, templates.len(), classes.len())
    }
}

/// A downstream classifier: (fine-tuned) image tower plus head, with the
/// frozen text tower and logit scale carried along.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub image: ImageEncoder,
    pub head: ClassifierHead,
    pub text: TextEncoder,
    pub logit_scale: LogitScale,
    pub vocab: Vocabulary,
    /// Whether head logits are multiplied by the logit scale.
    pub scale_head: bool,
}

impl Classifier {
    pub fn from_pretrained(pre: &DualEncoder, head: ClassifierHead, scale_head: bool) -> Self {
        Self {
            image: pre.image.clone(),
            head,
            text: pre.text.clone(),
            logit_scale: pre.logit_scale,
            vocab: pre.vocab.clone(),
            scale_head,
        }
    }

    pub fn head_scale(&self) -> f64 {
        if self.scale_head {
            self.logit_scale.get()
        } else {
            1.0
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// `tau * W_f^T h(x) (+ b)`.
    pub fn head_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.image.encode(x)?;
        if self.head.weight.rows() != h.len() {
            return Err(Error::Dimension(format!(
                "head expects features of size {}, encoder yields {}",
                self.head.weight.rows(),
                h.len()
            )));
        }
        self.head.logits(&h, self.head_scale())
    }

    pub fn dual_encoder(&self) -> DualEncoder {
        DualEncoder {
            image: self.image.clone(),
            text: self.text.clone(),
            logit_scale: self.logit_scale,
            vocab: self.vocab.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, norm, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> ModelDims {
        ModelDims {
            d_in: 6,
            d_hidden: 5,
            embed_dim: 4,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(["dog", "cat", "photo", "sketch"].iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_encoder_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ImageEncoder::init(small_dims(), &mut rng).zeros_like();
        assert!(matches!(enc.encode(&[0.5; 6]), Err(Error::DegenerateFeature { .. })));
    }

    #[test]
    fn image_features_are_unit_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ImageEncoder::init(small_dims(), &mut rng);
        for _ in 0..50 {
            let x = input(&mut rng, 6);
            let a = enc.encode(&x).unwrap();
            assert!((norm(&a) - 1.0).abs() < 1e-9);
            assert_eq!(a, enc.encode(&x).unwrap());
        }
        assert!(matches!(enc.encode(&[0.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn text_pooling_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let text = TextEncoder::init(4, 4, &mut rng);
        let single = text.encode(&[2]).unwrap();
        let want = text.proj.matvec(text.embed.row(2)).unwrap();
        let n = norm(&want);
        for (a, b) in single.iter().zip(&want) {
            assert!((a - b / n).abs() < 1e-15);
        }
        let ab = text.encode(&[0, 3, 2]).unwrap();
        let ba = text.encode(&[2, 0, 3]).unwrap();
        for (a, b) in ab.iter().zip(&ba) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(text.encode(&[]).is_err());
    }

    #[test]
    fn tokenizer_drops_filler_words() {
        let v = vocab();
        assert_eq!(v.tokenize("a Photo of dog."), vec![2, 0]);
        assert_eq!(v.tokenize("a sketch of [CLASS]"), vec![3]);
        assert!(v.tokenize("nothing known").is_empty());
    }

    #[test]
    fn zero_shot_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ImageEncoder::init(small_dims(), &mut rng);
        let x = input(&mut rng, 6);
        let h = enc.encode(&x).unwrap();
        // class 0 aligned with h, class 1 orthogonal to it
        let mut other = vec![1.0, 0.0, 0.0, 0.0];
        let p = crate::numerics::dot(&other, &h);
        for (o, hv) in other.iter_mut().zip(&h) {
            *o -= p * hv;
        }
        let other = crate::numerics::normalize(&other).unwrap().0;
        let w = Matrix::from_columns(&[h.clone(), other]).unwrap();
        let tau = LogitScale::new(10.0).unwrap();
        let logits = zero_shot_logits(&enc, &w, tau, &x).unwrap();
        assert_eq!(crate::numerics::argmax(&logits), 0);
        let doubled = zero_shot_logits(&enc, &w, LogitScale::new(20.0).unwrap(), &x).unwrap();
        for (a, b) in logits.iter().zip(&doubled) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        let same = Matrix::from_columns(&[h.clone(), h.clone(), h]).unwrap();
        let flat = zero_shot_logits(&enc, &same, tau, &x).unwrap();
        assert!(flat.iter().all(|v| *v == flat[0]));
        assert!(matches!(
            zero_shot_logits(&enc, &Matrix::zeros(3, 2), tau, &x),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn head_initialised_from_class_weights_matches_zero_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pre = DualEncoder::init(small_dims(), vocab(), &mut rng);
        let w_cls = crate::numerics::l2_normalize_columns(&Matrix::from_fn(4, 3, |r, c| (r + 2 * c) as f64 + 0.5)).unwrap();
        let clf = Classifier::from_pretrained(&pre, ClassifierHead::new(w_cls.clone(), false), true);
        let x = input(&mut rng, 6);
        let a = clf.head_logits(&x).unwrap();
        let b = zero_shot_logits(&pre.image, &w_cls, pre.logit_scale, &x).unwrap();
        assert_eq!(a, b);
        let zero = Classifier::from_pretrained(&pre, ClassifierHead::new(Matrix::zeros(4, 3), false), true);
        assert!(zero.head_logits(&x).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn context_distribution_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = ImageEncoder::init(small_dims(), &mut rng);
        let x = input(&mut rng, 6);
        let h = enc.encode(&x).unwrap();
        let equal = Matrix::from_columns(&[h.clone(), h.clone(), h.clone()]).unwrap();
        let p = context_distribution(&enc, &equal, LogitScale::new(50.0).unwrap(), &x).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        // column 2 aligned with h, the rest at cosine 0
        let e: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut cols = Vec::new();
        for v in &e {
            let mut o = v.clone();
            let d = crate::numerics::dot(&o, &h);
            for (a, hv) in o.iter_mut().zip(&h) {
                *a -= d * hv;
            }
            if let Some((u, _)) = crate::numerics::normalize(&o) {
                if cols.len() < 2 {
                    cols.push(u);
                }
            }
        }
        cols.insert(2, h.clone());
        let w = Matrix::from_columns(&cols).unwrap();
        let tau = LogitScale::new(100.0).unwrap();
        let p = context_distribution(&enc, &w, tau, &x).unwrap();
        // brute force: exp(100 * cos) normalised
        let cos: Vec<f64> = cols.iter().map(|c| crate::numerics::dot(c, &h)).collect();
        let z: f64 = cos.iter().map(|c| (100.0 * c).exp()).sum();
        for (pi, c) in p.iter().zip(&cos) {
            assert!((pi - (100.0 * c).exp() / z).abs() < 1e-12);
        }
        assert!(p[2] > 1.0 - 1e-12);
    }

    #[test]
    fn image_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = ImageEncoder::init(small_dims(), &mut rng);
        let x = input(&mut rng, 6);
        let probe: Vec<f64> = input(&mut rng, 4);
        let fwd = enc.forward(&x).unwrap();
        let mut grad = enc.zeros_like();
        enc.backward(&x, &fwd, &probe, &mut grad);
        let f = |flat: &[f64]| {
            let mut e = enc.clone();
            e.assign_flat(flat);
            Ok(crate::numerics::dot(&e.encode(&x)?, &probe))
        };
        let err = grad_check(f, &enc.flatten(), &grad.flatten(), 1e-6).unwrap();
        assert!(err < 1e-7, "{err:e}");
    }

    #[test]
    fn text_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let text = TextEncoder::init(4, 4, &mut rng);
        let tokens = [1, 3, 3];
        let probe: Vec<f64> = input(&mut rng, 4);
        let fwd = text.forward(&tokens).unwrap();
        let mut grad = text.zeros_like();
        text.backward(&tokens, &fwd, &probe, &mut grad);
        let f = |flat: &[f64]| {
            let mut t = text.clone();
            t.assign_flat(flat);
            Ok(crate::numerics::dot(&t.encode(&tokens)?, &probe))
        };
        let err = grad_check(f, &text.flatten(), &grad.flatten(), 1e-6).unwrap();
        assert!(err < 1e-7, "{err:e}");
    }

    #[test]
    fn logit_scale_must_be_positive() {
        assert!(LogitScale::new(0.0).is_err());
        assert!(LogitScale::new(-1.0).is_err());
        assert_eq!(LogitScale::clamped(500.0).get(), 100.0);
        assert_eq!(LogitScale::clamped(0.1).get(), 1.0);
    }
}
