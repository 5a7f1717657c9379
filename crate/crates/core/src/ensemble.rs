//! Weight-space ensembles: WiSE-FT interpolation and model soups.
//!
//! Only trainable tensors (`image.*`, `head.*`) are combined. Frozen
//! tensors must agree bit for bit across inputs.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::model::{Checkpoint, Classifier, ClassifierHead, DualEncoder, Metadata};
use crate::numerics::Matrix;
use crate::prompts::PromptSet;
use crate::worldgen::Dataset;

/// The zero-shot classifier: pre-trained encoder with head `W_cls`.
pub fn zero_shot_classifier(
    pretrained: &DualEncoder,
    prompts: &PromptSet,
    head_bias: bool,
    scale_head: bool,
) -> Result<Classifier> {
    let w_cls = pretrained
        .encode_prompts(&prompts.templates, &prompts.classes)?
        .class_weights()?;
    Ok(Classifier::from_pretrained(
        pretrained,
        ClassifierHead::new(w_cls, head_bias),
        scale_head,
    ))
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::EnsembleCompatibility(msg.into())
}

fn check_compatible(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    if a.tensors().len() != b.tensors().len() {
        return Err(incompatible(format!(
            "{} tensors vs {} tensors",
            a.tensors().len(),
            b.tensors().len()
        )));
    }
    for ((na, ta), (nb, tb)) in a.tensors().iter().zip(b.tensors()) {
        if na != nb {
            return Err(incompatible(format!("tensor {na} vs {nb}")));
        }
        if ta.shape() != tb.shape() {
            return Err(incompatible(format!("{na} has shapes {:?} and {:?}", ta.shape(), tb.shape())));
        }
        if !Checkpoint::is_trainable(na) && !ta.bit_eq(tb) {
            return Err(incompatible(format!("frozen tensor {na} differs")));
        }
    }
    let flag = |c: &Checkpoint| c.meta.get("scale_head").cloned();
    if flag(a) != flag(b) {
        return Err(incompatible("checkpoints disagree on scaling head logits"));
    }
    Ok(())
}

/// A missing head bias on the zero-shot side is read as zeros.
fn align_bias(zero_shot: &Checkpoint, fine_tuned: &Checkpoint) -> Result<Checkpoint> {
    let mut have = zero_shot.tensors().to_vec();
    if zero_shot.get("head.bias").is_none() {
        if let Some(b) = fine_tuned.get("head.bias") {
            have.push(("head.bias".into(), Matrix::zeros(b.rows(), b.cols())));
        }
    }
    Checkpoint::new(have, zero_shot.meta.clone())
}

/// Coefficient pair `(1 - w, w)` computed so that swapping the arguments and
/// using `1 - w` yields the same pair swapped.
fn mix_coefficients(w: f64) -> (f64, f64) {
    if w >= 0.5 {
        (1.0 - w, w)
    } else {
        let v = 1.0 - w;
        (v, 1.0 - v)
    }
}

/// `(1 - w) * zero_shot + w * fine_tuned` on trainable tensors; frozen
/// tensors and metadata come from `zero_shot`.
pub fn interpolate(zero_shot: &Checkpoint, fine_tuned: &Checkpoint, w: f64) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Range(format!("mix weight {w} outside [0, 1]")));
    }
    let zs = align_bias(zero_shot, fine_tuned)?;
    check_compatible(&zs, fine_tuned)?;
    let (ca, cb) = mix_coefficients(w);
    let tensors = zs
        .tensors()
        .iter()
        .zip(fine_tuned.tensors())
        .map(|((name, a), (_, b))| {
            let t = if !Checkpoint::is_trainable(name) || w == 0.0 {
                a.clone()
            } else if w == 1.0 {
                b.clone()
            } else {
                let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| ca * x + cb * y).collect();
                Matrix::from_vec(a.rows(), a.cols(), data)?
            };
            Ok((name.clone(), t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = zs.meta.clone();
    meta.insert("wise_w".into(), format!("{w}"));
    Checkpoint::new(tensors, meta)
}

/// Elementwise mean of trainable tensors, as `t_0 + sum(t_i - t_0) / n`;
/// frozen tensors and metadata come from the first candidate.
pub fn uniform_soup(candidates: &[Checkpoint]) -> Result<Checkpoint> {
    let first = candidates.first().ok_or(Error::EmptySoup)?;
    for c in &candidates[1..] {
        check_compatible(first, c)?;
    }
    let n = candidates.len() as f64;
    let tensors = first
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, (name, t0))| {
            if !Checkpoint::is_trainable(name) || candidates.len() == 1 {
                return Ok((name.clone(), t0.clone()));
            }
            let mut acc = vec![0.0; t0.as_slice().len()];
            for c in &candidates[1..] {
                for ((s, x), x0) in acc.iter_mut().zip(c.tensors()[i].1.as_slice()).zip(t0.as_slice()) {
                    *s += x - x0;
                }
            }
            let data = t0.as_slice().iter().zip(&acc).map(|(x0, s)| x0 + s / n).collect();
            Ok((name.clone(), Matrix::from_vec(t0.rows(), t0.cols(), data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Checkpoint::new(tensors, first.meta.clone())
}

fn checkpoint_accuracy(ckpt: &Checkpoint, data: &Dataset) -> Result<f64> {
    accuracy(&ckpt.to_classifier()?, data)
}

#[derive(Debug, Clone)]
pub struct GreedySoup {
    pub checkpoint: Checkpoint,
    /// Names of the accepted candidates, in acceptance order.
    pub members: Vec<String>,
    pub val_accuracy: f64,
}

/// Greedy soup: candidates in order of validation accuracy (descending,
/// then name ascending), each kept iff the soup's accuracy does not drop.
pub fn greedy_soup(candidates: &[(String, Checkpoint)], val: &Dataset) -> Result<GreedySoup> {
    if candidates.is_empty() {
        return Err(Error::EmptySoup);
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (_, c) in &candidates[1..] {
        check_compatible(&candidates[0].1, c)?;
    }
    let scores = candidates
        .par_iter()
        .map(|(_, c)| checkpoint_accuracy(c, val))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| candidates[a].0.cmp(&candidates[b].0))
    });
    let mut chosen = vec![candidates[order[0]].1.clone()];
    let mut members = vec![candidates[order[0]].0.clone()];
    let mut soup = chosen[0].clone();
    let mut best = scores[order[0]];
    for &i in &order[1..] {
        chosen.push(candidates[i].1.clone());
        let trial = uniform_soup(&chosen)?;
        let acc = checkpoint_accuracy(&trial, val)?;
        if acc >= best {
            best = acc;
            soup = trial;
            members.push(candidates[i].0.clone());
        } else {
            chosen.pop();
        }
    }
    Ok(GreedySoup {
        checkpoint: soup,
        members,
        val_accuracy: best,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub w: f64,
    pub id_acc: f64,
    pub ood_acc: f64,
}

/// ID/OOD accuracy along the WiSE-FT path; weights strictly increasing
/// from 0 to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationCurve {
    pub points: Vec<CurvePoint>,
}

impl InterpolationCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("w,id_acc,ood_acc\n");
        for p in &self.points {
            let _ = writeln!(out, "{:.16e},{:.16e},{:.16e}", p.w, p.id_acc, p.ood_acc);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// The point with the best OOD accuracy (lowest weight on ties).
    pub fn best_ood(&self) -> CurvePoint {
        *self
            .points
            .iter()
            .reduce(|a, b| if b.ood_acc > a.ood_acc { b } else { a })
            .expect("curve has endpoints")
    }

    /// The point with the best ID accuracy (lowest weight on ties).
    pub fn best_id(&self) -> CurvePoint {
        *self
            .points
            .iter()
            .reduce(|a, b| if b.id_acc > a.id_acc { b } else { a })
            .expect("curve has endpoints")
    }
}

/// `n` evenly spaced weights `0, 1/(n-1), ..., 1`.
pub fn uniform_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Config(format!("grid needs at least 2 points, got {n}")));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

pub const DEFAULT_GRID_POINTS: usize = 11;

pub fn wise_curve(
    zero_shot: &Checkpoint,
    fine_tuned: &Checkpoint,
    id_data: &Dataset,
    ood_data: &Dataset,
    grid: &[f64],
) -> Result<InterpolationCurve> {
    if grid.first() != Some(&0.0) || grid.last() != Some(&1.0) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("grid must increase strictly from 0 to 1".into()));
    }
    let points = grid
        .par_iter()
        .map(|&w| {
            let model = interpolate(zero_shot, fine_tuned, w)?.to_classifier()?;
            Ok(CurvePoint {
                w,
                id_acc: accuracy(&model, id_data)?,
                ood_acc: accuracy(&model, ood_data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterpolationCurve { points })
}

/// Metadata tag recording how a soup was built.
pub fn soup_metadata(base: &Metadata, policy: &str, members: &[String]) -> Metadata {
    let mut meta = base.clone();
    meta.insert("soup_policy".into(), policy.into());
    meta.insert("soup_members".into(), members.join(" "));
    meta
}
