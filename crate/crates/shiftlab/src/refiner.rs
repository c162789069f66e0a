//! Batch-signature-driven prediction refinement.
//!
//! A refiner maps the signature of a test batch, its mean prediction `p_bar`
//! and mean divergence-from-uniform `d`, to an affine transform `(W, b)` of
//! the logits. Trained on simulated label-distribution shift at intermediate
//! time, it steers predictions back toward the incoming label mix at test
//! time without touching the classifier.
//!
//! Two variants:
//!
//! * [`UnifiedRefiner`]: one MLP on `concat(p_bar, d - ln K)` outputs the
//!   full transform. Anchored to the identity on balanced batches by an
//!   auxiliary loss.
//! * [`SplitRefiner`]: a scalar severity detector on `d` gates a transform
//!   MLP on `p_bar`. Batches judged balanced pass through untouched.
//!
//! Both start as the exact identity: the output head has zero weights and an
//! identity bias, so an untrained refiner never changes a prediction.

use crate::adapt::MlpClassifier;
use crate::datagen::{make_stream, LabeledDataset, ShiftSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss;
use crate::nn::{BnMode, Layer, LinearLayer, Network, ParamFilter};
use crate::optim::Optimizer;
use crate::rng::{derive_seed, rng_from};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const REFINER_FORMAT: &str = "dart-refiner/1";

/// What a refiner sees of a test batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSignature {
    /// Mean softmax prediction over the batch.
    pub p_bar: Vec<f64>,
    /// Mean divergence of per-sample predictions from uniform. Bounded below
    /// by `ln K` (uniform predictions); grows with prediction confidence.
    pub d: f64,
}

pub fn signature_from_logits(logits: &Matrix) -> Result<BatchSignature> {
    let probs = loss::stable_softmax(logits)?;
    Ok(BatchSignature {
        p_bar: probs.column_means(),
        d: loss::uniform_divergence_mean(&probs),
    })
}

/// Signature of a batch under a frozen classifier, batch-statistics mode.
pub fn batch_signature(
    frozen: &MlpClassifier,
    x: &Matrix,
    logit_scale: f64,
) -> Result<BatchSignature> {
    let mut logits = frozen.logits(x, BnMode::Replace)?;
    logits.scale(logit_scale);
    signature_from_logits(&logits)
}

/// Affine logit transform: `z -> z W + b` per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Refinement {
    pub fn identity(k: usize) -> Self {
        Refinement { w: Matrix::identity(k), b: vec![0.0; k] }
    }

    pub fn is_identity(&self) -> bool {
        self.w == Matrix::identity(self.w.rows()) && self.b.iter().all(|&v| v == 0.0)
    }
}

/// Apply a refinement to a logit matrix. With `preserve_norm`, each refined
/// row is rescaled back to the Euclidean norm of its input row; rows whose
/// refined logits vanish are left alone.
pub fn apply_refinement(
    logits: &Matrix,
    refinement: &Refinement,
    preserve_norm: bool,
) -> Result<Matrix> {
    let k = logits.cols();
    if refinement.w.shape() != (k, k) || refinement.b.len() != k {
        return Err(Error::Shape(format!(
            "refinement for {:?}/{} classes applied to {k}-class logits",
            refinement.w.shape(),
            refinement.b.len()
        )));
    }
    let mut refined = logits.matmul(&refinement.w);
    for r in 0..refined.rows() {
        for (v, b) in refined.row_mut(r).iter_mut().zip(&refinement.b) {
            *v += b;
        }
    }
    if preserve_norm {
        for r in 0..refined.rows() {
            let target = norm2(logits.row(r));
            let actual = norm2(refined.row(r));
            if actual > 0.0 {
                let f = target / actual;
                for v in refined.row_mut(r) {
                    *v *= f;
                }
            }
        }
    }
    Ok(refined)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Single MLP from the full signature to the full transform.
#[derive(Clone, Debug)]
pub struct UnifiedRefiner {
    net: Network,
    k: usize,
    hidden: usize,
    d_offset: f64,
}

impl UnifiedRefiner {
    /// Fresh refiner computing the exact identity: hidden layer He-normal,
    /// output head zero weights with `[vec(I), 0]` bias.
    pub fn new(k: usize, hidden: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("refiner needs at least 2 classes, got {k}")));
        }
        if hidden == 0 {
            return Err(Error::Config("refiner hidden width must be positive".into()));
        }
        let mut rng = rng_from(derive_seed(seed, "unified-refiner-init", 0));
        let l1 = LinearLayer::he_init(k + 1, hidden, &mut rng);
        let mut l2 = LinearLayer::zeros(hidden, k * k + k);
        for i in 0..k {
            l2.b[i * k + i] = 1.0;
        }
        Ok(UnifiedRefiner {
            net: Network::new(vec![Layer::Linear(l1), Layer::Relu, Layer::Linear(l2)]),
            k,
            hidden,
            d_offset: (k as f64).ln(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn d_offset(&self) -> f64 {
        self.d_offset
    }

    fn input_row(&self, sig: &BatchSignature) -> Result<Matrix> {
        if sig.p_bar.len() != self.k {
            return Err(Error::Shape(format!(
                "signature has {} classes, refiner expects {}",
                sig.p_bar.len(),
                self.k
            )));
        }
        let mut data = sig.p_bar.clone();
        data.push(sig.d - self.d_offset);
        Ok(Matrix::from_vec(1, self.k + 1, data))
    }

    fn decode(&self, out: &[f64]) -> Refinement {
        let k = self.k;
        let w = Matrix::from_vec(k, k, out[..k * k].to_vec());
        Refinement { w, b: out[k * k..].to_vec() }
    }

    pub fn refine(&self, sig: &BatchSignature) -> Result<Refinement> {
        let input = self.input_row(sig)?;
        let (out, _) = self.net.forward(&input, BnMode::Eval)?;
        Ok(self.decode(out.row(0)))
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.params_mut(ParamFilter::All)
    }

    pub fn param_bits(&self) -> Vec<u64> {
        self.net.param_bits(ParamFilter::All)
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct UnifiedLosses {
    /// Cross-entropy of true labels against refined predictions on the
    /// imbalanced batch.
    pub refine: f64,
    /// Identity anchor on the balanced signature, unweighted.
    pub anchor: f64,
    /// `refine + alpha * anchor`.
    pub total: f64,
}

/// Gradients aligned with `UnifiedRefiner::params_mut` order.
#[derive(Clone, Debug)]
pub struct UnifiedGrads {
    slots: Vec<Vec<f64>>,
}

impl UnifiedGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.slots.iter().map(|s| s.as_slice()).collect()
    }
}

/// Squared distance of a refinement from the identity transform:
/// `|W - I|_F^2 + |b|^2`. Summed, not averaged, so the anchor's pull per
/// entry stays commensurate with the cross-entropy term as K grows.
fn identity_gap(r: &Refinement) -> f64 {
    let k = r.b.len();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            let delta = if i == j { 1.0 } else { 0.0 };
            let e = r.w.get(i, j) - delta;
            acc += e * e;
        }
    }
    for b in &r.b {
        acc += b * b;
    }
    acc
}

/// Training objective for one paired step: cross-entropy on the refined
/// imbalanced batch plus `alpha` times an identity anchor (squared Frobenius
/// distance from `(I, 0)`) evaluated at the balanced batch's signature.
/// Logits and signatures are constants here; only the refiner parameters
/// carry gradient.
pub fn unified_loss(
    refiner: &UnifiedRefiner,
    imb_logits: &Matrix,
    imb_labels: &[usize],
    imb_sig: &BatchSignature,
    bal_sig: &BatchSignature,
    alpha: f64,
) -> Result<UnifiedLosses> {
    let r_imb = refiner.refine(imb_sig)?;
    let refined = apply_refinement(imb_logits, &r_imb, false)?;
    let probs = loss::stable_softmax(&refined)?;
    let refine = loss::cross_entropy_labels(imb_labels, &probs);
    let anchor = identity_gap(&refiner.refine(bal_sig)?);
    Ok(UnifiedLosses { refine, anchor, total: refine + alpha * anchor })
}

pub fn unified_loss_and_grads(
    refiner: &UnifiedRefiner,
    imb_logits: &Matrix,
    imb_labels: &[usize],
    imb_sig: &BatchSignature,
    bal_sig: &BatchSignature,
    alpha: f64,
) -> Result<(UnifiedLosses, UnifiedGrads)> {
    let k = refiner.k;
    if imb_logits.rows() != imb_labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            imb_logits.rows(),
            imb_labels.len()
        )));
    }
    let imb_in = refiner.input_row(imb_sig)?;
    let (imb_out, imb_tape) = refiner.net.forward(&imb_in, BnMode::Eval)?;
    let r_imb = refiner.decode(imb_out.row(0));
    let refined = apply_refinement(imb_logits, &r_imb, false)?;
    let probs = loss::stable_softmax(&refined)?;
    let refine = loss::cross_entropy_labels(imb_labels, &probs);

    // dZ = (softmax - onehot) / M, then dW = logits^T dZ, db = column sums
    let m = imb_labels.len() as f64;
    let mut dz = probs.clone();
    for (r, &y) in imb_labels.iter().enumerate() {
        let v = dz.get(r, y) - 1.0;
        dz.set(r, y, v);
    }
    dz.scale(1.0 / m);
    let dw = imb_logits.t_matmul(&dz);
    let mut d_out_imb = vec![0.0; k * k + k];
    d_out_imb[..k * k].copy_from_slice(dw.as_slice());
    for row in dz.iter_rows() {
        for (d, v) in d_out_imb[k * k..].iter_mut().zip(row) {
            *d += v;
        }
    }
    let g_imb = refiner.net.backward(&imb_tape, &Matrix::from_vec(1, k * k + k, d_out_imb));

    let bal_in = refiner.input_row(bal_sig)?;
    let (bal_out, bal_tape) = refiner.net.forward(&bal_in, BnMode::Eval)?;
    let r_bal = refiner.decode(bal_out.row(0));
    let anchor = identity_gap(&r_bal);

    // d anchor / dW = 2 (W - I), d anchor / db = 2 b
    let mut d_out_bal = vec![0.0; k * k + k];
    for i in 0..k {
        for j in 0..k {
            let delta = if i == j { 1.0 } else { 0.0 };
            d_out_bal[i * k + j] = alpha * 2.0 * (r_bal.w.get(i, j) - delta);
        }
    }
    for (d, b) in d_out_bal[k * k..].iter_mut().zip(&r_bal.b) {
        *d = alpha * 2.0 * b;
    }
    let g_bal = refiner.net.backward(&bal_tape, &Matrix::from_vec(1, k * k + k, d_out_bal));

    let slots = g_imb
        .slices(ParamFilter::All)
        .iter()
        .zip(g_bal.slices(ParamFilter::All))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    Ok((
        UnifiedLosses { refine, anchor, total: refine + alpha * anchor },
        UnifiedGrads { slots },
    ))
}

/// Severity detector plus gated transform.
#[derive(Clone, Debug)]
pub struct SplitRefiner {
    /// Severity affine on `d - d_offset`: `[slope, intercept]`, zero at init
    /// so the gate starts undecided and the refiner acts as the identity.
    g1: [f64; 2],
    g2: Network,
    k: usize,
    hidden: usize,
    diagonal: bool,
    d_offset: f64,
}

impl SplitRefiner {
    pub fn new(k: usize, hidden: usize, diagonal: bool, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("refiner needs at least 2 classes, got {k}")));
        }
        if hidden == 0 {
            return Err(Error::Config("refiner hidden width must be positive".into()));
        }
        let mut rng = rng_from(derive_seed(seed, "split-refiner-init", 0));
        let l1 = LinearLayer::he_init(k, hidden, &mut rng);
        let out = if diagonal { 2 * k } else { k * k + k };
        let mut l2 = LinearLayer::zeros(hidden, out);
        if diagonal {
            for i in 0..k {
                l2.b[i] = 1.0;
            }
        } else {
            for i in 0..k {
                l2.b[i * k + i] = 1.0;
            }
        }
        Ok(SplitRefiner {
            g1: [0.0, 0.0],
            g2: Network::new(vec![Layer::Linear(l1), Layer::Relu, Layer::Linear(l2)]),
            k,
            hidden,
            diagonal,
            d_offset: (k as f64).ln(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn d_offset(&self) -> f64 {
        self.d_offset
    }

    fn severity_logit(&self, d: f64) -> f64 {
        self.g1[0] * (d - self.d_offset) + self.g1[1]
    }

    /// Probability that the batch is severely imbalanced. Exactly 0.5 on a
    /// fresh refiner, which keeps the gate closed.
    pub fn severity(&self, d: f64) -> f64 {
        sigmoid(self.severity_logit(d))
    }

    fn decode(&self, out: &[f64]) -> Refinement {
        let k = self.k;
        if self.diagonal {
            let mut w = Matrix::zeros(k, k);
            for i in 0..k {
                w.set(i, i, out[i]);
            }
            Refinement { w, b: out[k..].to_vec() }
        } else {
            Refinement { w: Matrix::from_vec(k, k, out[..k * k].to_vec()), b: out[k * k..].to_vec() }
        }
    }

    /// Transform from `p_bar` alone, ignoring the gate.
    pub fn refinement_ungated(&self, p_bar: &[f64]) -> Result<Refinement> {
        if p_bar.len() != self.k {
            return Err(Error::Shape(format!(
                "signature has {} classes, refiner expects {}",
                p_bar.len(),
                self.k
            )));
        }
        let input = Matrix::from_vec(1, self.k, p_bar.to_vec());
        let (out, _) = self.g2.forward(&input, BnMode::Eval)?;
        Ok(self.decode(out.row(0)))
    }

    /// Gated refinement: the transform applies only when the detector calls
    /// the batch severely imbalanced, otherwise the exact identity.
    pub fn refine(&self, sig: &BatchSignature) -> Result<Refinement> {
        if self.severity(sig.d) > 0.5 {
            self.refinement_ungated(&sig.p_bar)
        } else {
            Ok(Refinement::identity(self.k))
        }
    }

    pub fn param_bits(&self) -> Vec<u64> {
        let mut bits = vec![self.g1[0].to_bits(), self.g1[1].to_bits()];
        bits.extend(self.g2.param_bits(ParamFilter::All));
        bits
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinerVariant {
    Unified,
    Split,
}

impl RefinerVariant {
    pub fn name(&self) -> &'static str {
        match self {
            RefinerVariant::Unified => "unified",
            RefinerVariant::Split => "split",
        }
    }
}

impl std::str::FromStr for RefinerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(RefinerVariant::Unified),
            "split" => Ok(RefinerVariant::Split),
            other => Err(Error::Config(format!(
                "unknown refiner variant {other:?}, expected \"unified\" or \"split\""
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Refiner {
    Unified(UnifiedRefiner),
    Split(SplitRefiner),
}

impl Refiner {
    pub fn k(&self) -> usize {
        match self {
            Refiner::Unified(r) => r.k(),
            Refiner::Split(r) => r.k(),
        }
    }

    pub fn variant(&self) -> RefinerVariant {
        match self {
            Refiner::Unified(_) => RefinerVariant::Unified,
            Refiner::Split(_) => RefinerVariant::Split,
        }
    }

    pub fn refine(&self, sig: &BatchSignature) -> Result<Refinement> {
        match self {
            Refiner::Unified(r) => r.refine(sig),
            Refiner::Split(r) => r.refine(sig),
        }
    }

    pub fn param_bits(&self) -> Vec<u64> {
        match self {
            Refiner::Unified(r) => r.param_bits(),
            Refiner::Split(r) => r.param_bits(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    /// Dirichlet concentration for the simulated imbalanced batches; lower
    /// means more severe shift.
    pub dirichlet_delta: f64,
    /// Weight of the identity anchor (unified variant only).
    pub alpha: f64,
    pub lr: f64,
    /// Step size for the split variant's severity detector. The detector is
    /// a two-parameter logistic on a scalar, so it takes a much larger rate
    /// than the transform network to converge within the same epoch budget.
    pub detector_lr: f64,
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for RefinerTrainConfig {
    fn default() -> Self {
        RefinerTrainConfig {
            epochs: 20,
            batch_size: 64,
            hidden: 64,
            dirichlet_delta: 0.1,
            alpha: 0.1,
            lr: 1e-3,
            detector_lr: 5e-2,
            logit_scale: 1.0,
            seed: 0,
        }
    }
}

impl RefinerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("refiner batch size must be positive".into()));
        }
        if !(self.dirichlet_delta > 0.0 && self.dirichlet_delta.is_finite()) {
            return Err(Error::Config(format!(
                "dirichlet delta must be positive, got {}",
                self.dirichlet_delta
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("anchor weight must be >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("refiner lr must be positive, got {}", self.lr)));
        }
        if !(self.detector_lr > 0.0 && self.detector_lr.is_finite()) {
            return Err(Error::Config(format!(
                "detector lr must be positive, got {}",
                self.detector_lr
            )));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config(format!(
                "logit scale must be positive, got {}",
                self.logit_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub step: usize,
    /// Cross-entropy on the refined imbalanced batch.
    pub refine_loss: f64,
    /// Identity anchor (unified) or severity-detector loss (split), unweighted.
    pub aux_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedRefiner {
    pub refiner: Refiner,
    pub loss_curve: Vec<LossPoint>,
}

fn scaled_logits(frozen: &MlpClassifier, x: &Matrix, scale: f64) -> Result<Matrix> {
    let mut logits = frozen.logits(x, BnMode::Replace)?;
    logits.scale(scale);
    Ok(logits)
}

fn check_train_inputs(
    frozen: &MlpClassifier,
    data: &LabeledDataset,
    cfg: &RefinerTrainConfig,
) -> Result<()> {
    cfg.validate()?;
    frozen.validate()?;
    data.validate()?;
    if data.k != frozen.k {
        return Err(Error::Config(format!(
            "dataset has {} classes, classifier has {}",
            data.k, frozen.k
        )));
    }
    Ok(())
}

/// Per-epoch pair of streams: simulated-shift batches and balanced
/// with-replacement companions of matching sizes.
fn epoch_streams(
    data: &LabeledDataset,
    cfg: &RefinerTrainConfig,
    epoch: usize,
) -> Result<(Vec<(Matrix, Vec<usize>)>, Vec<Matrix>)> {
    let n_chunks = (data.n() / cfg.batch_size).max(2);
    let shift = ShiftSpec::Dirichlet { delta: cfg.dirichlet_delta, n_chunks };
    let stream = make_stream(
        data,
        &shift,
        cfg.batch_size,
        derive_seed(cfg.seed, "refiner-imbalanced", epoch as u64),
    )?;
    let mut bal_rng = rng_from(derive_seed(cfg.seed, "refiner-balanced", epoch as u64));
    let mut imb = Vec::with_capacity(stream.batches.len());
    let mut bal = Vec::with_capacity(stream.batches.len());
    for batch in stream.batches {
        let idx: Vec<usize> = (0..batch.y.len()).map(|_| bal_rng.gen_range(0..data.n())).collect();
        bal.push(data.subset(&idx).x);
        imb.push((batch.x, batch.y));
    }
    Ok((imb, bal))
}

/// Train a unified refiner against a frozen classifier. Each step pairs one
/// simulated-shift batch with one balanced batch; Adam with cosine annealing
/// over the full step budget. The classifier is never touched.
pub fn train_unified(
    frozen: &MlpClassifier,
    data: &LabeledDataset,
    cfg: &RefinerTrainConfig,
) -> Result<TrainedRefiner> {
    check_train_inputs(frozen, data, cfg)?;
    let mut refiner = UnifiedRefiner::new(frozen.k, cfg.hidden, cfg.seed)?;
    let batches_per_epoch = data.n().div_ceil(cfg.batch_size);
    let mut opt = Optimizer::adam(cfg.lr).with_cosine((cfg.epochs * batches_per_epoch).max(1));
    let mut curve = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let (imb, bal) = epoch_streams(data, cfg, epoch)?;
        for ((x_imb, y_imb), x_bal) in imb.iter().zip(&bal) {
            let imb_logits = scaled_logits(frozen, x_imb, cfg.logit_scale)?;
            let bal_logits = scaled_logits(frozen, x_bal, cfg.logit_scale)?;
            let imb_sig = signature_from_logits(&imb_logits)?;
            let bal_sig = signature_from_logits(&bal_logits)?;
            let (losses, grads) =
                unified_loss_and_grads(&refiner, &imb_logits, y_imb, &imb_sig, &bal_sig, cfg.alpha)?;
            opt.step(&mut refiner.params_mut(), &grads.slices())?;
            curve.push(LossPoint {
                epoch,
                step,
                refine_loss: losses.refine,
                aux_loss: losses.anchor,
                total: losses.total,
            });
            step += 1;
        }
    }
    Ok(TrainedRefiner { refiner: Refiner::Unified(refiner), loss_curve: curve })
}

/// Train a split refiner: binary cross-entropy teaches the detector to call
/// simulated-shift batches severe and balanced ones benign, while the
/// transform trains on refined cross-entropy alone. Independent Adam
/// optimizers for the two parts.
pub fn train_split(
    frozen: &MlpClassifier,
    data: &LabeledDataset,
    cfg: &RefinerTrainConfig,
    diagonal: bool,
) -> Result<TrainedRefiner> {
    check_train_inputs(frozen, data, cfg)?;
    let mut refiner = SplitRefiner::new(frozen.k, cfg.hidden, diagonal, cfg.seed)?;
    let batches_per_epoch = data.n().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut opt_detect = Optimizer::adam(cfg.detector_lr).with_cosine(total_steps);
    let mut opt_transform = Optimizer::adam(cfg.lr).with_cosine(total_steps);
    let mut curve = Vec::new();
    let mut step = 0;
    let k = refiner.k;
    for epoch in 0..cfg.epochs {
        let (imb, bal) = epoch_streams(data, cfg, epoch)?;
        for ((x_imb, y_imb), x_bal) in imb.iter().zip(&bal) {
            let imb_logits = scaled_logits(frozen, x_imb, cfg.logit_scale)?;
            let bal_logits = scaled_logits(frozen, x_bal, cfg.logit_scale)?;
            let imb_sig = signature_from_logits(&imb_logits)?;
            let bal_sig = signature_from_logits(&bal_logits)?;

            // detector: balanced batches target 0, imbalanced target 1
            let x_b = bal_sig.d - refiner.d_offset;
            let x_i = imb_sig.d - refiner.d_offset;
            let z_b = refiner.severity_logit(bal_sig.d);
            let z_i = refiner.severity_logit(imb_sig.d);
            let detect_loss = loss::bce_with_logit(0.0, z_b) + loss::bce_with_logit(1.0, z_i);
            let e_b = sigmoid(z_b);
            let e_i = sigmoid(z_i) - 1.0;
            let g1_grad = [e_b * x_b + e_i * x_i, e_b + e_i];
            opt_detect.step(&mut [&mut refiner.g1], &[&g1_grad])?;

            // transform: refined cross-entropy on the imbalanced batch,
            // gate ignored during training
            let input = Matrix::from_vec(1, k, imb_sig.p_bar.clone());
            let (out, tape) = refiner.g2.forward(&input, BnMode::Eval)?;
            let r = refiner.decode(out.row(0));
            let refined = apply_refinement(&imb_logits, &r, false)?;
            let probs = loss::stable_softmax(&refined)?;
            let refine_loss = loss::cross_entropy_labels(y_imb, &probs);
            let m = y_imb.len() as f64;
            let mut dz = probs;
            for (row, &y) in y_imb.iter().enumerate() {
                let v = dz.get(row, y) - 1.0;
                dz.set(row, y, v);
            }
            dz.scale(1.0 / m);
            let out_dim = if diagonal { 2 * k } else { k * k + k };
            let mut d_out = vec![0.0; out_dim];
            if diagonal {
                for (row, l_row) in dz.iter_rows().zip(imb_logits.iter_rows()) {
                    for j in 0..k {
                        d_out[j] += row[j] * l_row[j];
                        d_out[k + j] += row[j];
                    }
                }
            } else {
                let dw = imb_logits.t_matmul(&dz);
                d_out[..k * k].copy_from_slice(dw.as_slice());
                for row in dz.iter_rows() {
                    for (d, v) in d_out[k * k..].iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            let grads = refiner.g2.backward(&tape, &Matrix::from_vec(1, out_dim, d_out));
            let slices = grads.slices(ParamFilter::All);
            opt_transform.step(&mut refiner.g2.params_mut(ParamFilter::All), &slices)?;

            curve.push(LossPoint {
                epoch,
                step,
                refine_loss,
                aux_loss: detect_loss,
                total: refine_loss + detect_loss,
            });
            step += 1;
        }
    }
    Ok(TrainedRefiner { refiner: Refiner::Split(refiner), loss_curve: curve })
}

#[derive(Serialize, Deserialize)]
struct RefinerFile {
    format: String,
    variant: RefinerVariant,
    #[serde(rename = "K")]
    k: usize,
    hidden: usize,
    d_offset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diagonal: Option<bool>,
    parameters: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnifiedParams {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitParams {
    g1_w: f64,
    g1_b: f64,
    g2_w1: Matrix,
    g2_b1: Vec<f64>,
    g2_w2: Matrix,
    g2_b2: Vec<f64>,
}

fn linear_parts(net: &Network) -> (&LinearLayer, &LinearLayer) {
    let mut linears = net.layers.iter().filter_map(|l| match l {
        Layer::Linear(lin) => Some(lin),
        _ => None,
    });
    let first = linears.next().expect("refiner network has two linear layers");
    let second = linears.next().expect("refiner network has two linear layers");
    (first, second)
}

pub fn save_refiner(path: &Path, refiner: &Refiner) -> Result<()> {
    let file = match refiner {
        Refiner::Unified(r) => {
            let (l1, l2) = linear_parts(&r.net);
            RefinerFile {
                format: REFINER_FORMAT.to_string(),
                variant: RefinerVariant::Unified,
                k: r.k,
                hidden: r.hidden,
                d_offset: r.d_offset,
                diagonal: None,
                parameters: serde_json::to_value(UnifiedParams {
                    w1: l1.w.clone(),
                    b1: l1.b.clone(),
                    w2: l2.w.clone(),
                    b2: l2.b.clone(),
                })?,
            }
        }
        Refiner::Split(r) => {
            let (l1, l2) = linear_parts(&r.g2);
            RefinerFile {
                format: REFINER_FORMAT.to_string(),
                variant: RefinerVariant::Split,
                k: r.k,
                hidden: r.hidden,
                d_offset: r.d_offset,
                diagonal: Some(r.diagonal),
                parameters: serde_json::to_value(SplitParams {
                    g1_w: r.g1[0],
                    g1_b: r.g1[1],
                    g2_w1: l1.w.clone(),
                    g2_b1: l1.b.clone(),
                    g2_w2: l2.w.clone(),
                    g2_b2: l2.b.clone(),
                })?,
            }
        }
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn check_matrix(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if !m.is_consistent() {
        return Err(Error::Shape(format!("refiner parameter {name} is internally inconsistent")));
    }
    if m.shape() != (rows, cols) {
        return Err(Error::Shape(format!(
            "refiner parameter {name} is {:?}, expected ({rows}, {cols})",
            m.shape()
        )));
    }
    Ok(())
}

fn check_vec(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Shape(format!(
            "refiner parameter {name} has length {}, expected {len}",
            v.len()
        )));
    }
    Ok(())
}

pub fn load_refiner(path: &Path) -> Result<Refiner> {
    let text = std::fs::read_to_string(path)?;
    let file: RefinerFile = serde_json::from_str(&text)?;
    if file.format != REFINER_FORMAT {
        return Err(Error::Config(format!(
            "{} declares format {:?}, this build reads {:?}",
            path.display(),
            file.format,
            REFINER_FORMAT
        )));
    }
    if file.k < 2 || file.hidden == 0 {
        return Err(Error::Config(format!(
            "refiner file declares K={} hidden={}",
            file.k, file.hidden
        )));
    }
    let k = file.k;
    let hidden = file.hidden;
    match file.variant {
        RefinerVariant::Unified => {
            if file.diagonal.is_some() {
                return Err(Error::Config(
                    "diagonal flag only applies to the split variant".into(),
                ));
            }
            let p: UnifiedParams = serde_json::from_value(file.parameters)?;
            check_matrix("w1", &p.w1, k + 1, hidden)?;
            check_vec("b1", &p.b1, hidden)?;
            check_matrix("w2", &p.w2, hidden, k * k + k)?;
            check_vec("b2", &p.b2, k * k + k)?;
            Ok(Refiner::Unified(UnifiedRefiner {
                net: Network::new(vec![
                    Layer::Linear(LinearLayer { w: p.w1, b: p.b1 }),
                    Layer::Relu,
                    Layer::Linear(LinearLayer { w: p.w2, b: p.b2 }),
                ]),
                k,
                hidden,
                d_offset: file.d_offset,
            }))
        }
        RefinerVariant::Split => {
            let diagonal = file.diagonal.unwrap_or(false);
            let out = if diagonal { 2 * k } else { k * k + k };
            let p: SplitParams = serde_json::from_value(file.parameters)?;
            check_matrix("g2_w1", &p.g2_w1, k, hidden)?;
            check_vec("g2_b1", &p.g2_b1, hidden)?;
            check_matrix("g2_w2", &p.g2_w2, hidden, out)?;
            check_vec("g2_b2", &p.g2_b2, out)?;
            Ok(Refiner::Split(SplitRefiner {
                g1: [p.g1_w, p.g1_b],
                g2: Network::new(vec![
                    Layer::Linear(LinearLayer { w: p.g2_w1, b: p.g2_b1 }),
                    Layer::Relu,
                    Layer::Linear(LinearLayer { w: p.g2_w2, b: p.g2_b2 }),
                ]),
                k,
                hidden,
                diagonal,
                d_offset: file.d_offset,
            }))
        }
    }
}

/// Per-batch logit statistics: mean top logit and mean of the others.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitStats {
    pub max_mean: f64,
    pub rest_mean: f64,
}

pub fn batch_logit_stats(logits: &Matrix) -> Result<LogitStats> {
    let k = logits.cols();
    if k < 2 {
        return Err(Error::Shape(format!("logit statistics need at least 2 classes, got {k}")));
    }
    if logits.rows() == 0 {
        return Err(Error::Shape("logit statistics of an empty batch".into()));
    }
    let mut max_mean = 0.0;
    let mut rest_mean = 0.0;
    for row in logits.iter_rows() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().sum();
        max_mean += mx;
        rest_mean += (sum - mx) / (k - 1) as f64;
    }
    let m = logits.rows() as f64;
    Ok(LogitStats { max_mean: max_mean / m, rest_mean: rest_mean / m })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Temperature {
    pub t: f64,
    /// The closed form was undefined for these statistics and 1 was returned.
    pub degenerate: bool,
}

/// Closed-form temperature matching test-batch logit statistics to the
/// training distribution. Equal statistics give exactly 1; scaling the test
/// logits scales the temperature with them.
pub fn temperature_from_stats(k: usize, train: LogitStats, test: LogitStats) -> Temperature {
    let kf = k as f64;
    let denom_a = kf + train.rest_mean;
    if denom_a.abs() < 1e-12 {
        return Temperature { t: 1.0, degenerate: true };
    }
    let a = (1.0 + train.max_mean) / denom_a;
    let denom = kf * a - 1.0;
    if !denom.is_finite() || denom.abs() < 1e-12 {
        return Temperature { t: 1.0, degenerate: true };
    }
    Temperature { t: (test.max_mean - test.rest_mean * a) / denom, degenerate: false }
}

/// Running mean of per-batch temperatures; 1 before any batch arrives.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningTemperature {
    sum: f64,
    n: usize,
}

impl RunningTemperature {
    pub fn push(&mut self, t: f64) {
        self.sum += t;
        self.n += 1;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            1.0
        } else {
            self.sum / self.n as f64
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::{build_classifier, pretrain, PretrainConfig};
    use crate::check::grad_relative_error;
    use crate::datagen::{paired_clusters_spec, sample_balanced};

    #[test]
    fn uniform_predictions_sit_at_the_divergence_floor() {
        let logits = Matrix::zeros(6, 5);
        let sig = signature_from_logits(&logits).unwrap();
        let floor = (5.0f64).ln();
        assert!((sig.d - floor).abs() < 1e-12, "uniform d {} vs ln K {floor}", sig.d);
        for p in &sig.p_bar {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_predictions_raise_the_divergence() {
        let mut rng = rng_from(3);
        for _ in 0..20 {
            let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let logits = Matrix::from_vec(8, 5, data);
            let sig = signature_from_logits(&logits).unwrap();
            assert!(sig.d > (5.0f64).ln(), "d {} fell below the uniform floor", sig.d);
            let total: f64 = sig.p_bar.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "p_bar sums to {total}");
        }
    }

    #[test]
    fn identity_refinement_is_a_bitwise_no_op() {
        let mut rng = rng_from(4);
        let logits = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let refined = apply_refinement(&logits, &Refinement::identity(4), false).unwrap();
        assert_eq!(refined, logits);
        let rescaled = apply_refinement(&logits, &Refinement::identity(4), true).unwrap();
        for (a, b) in rescaled.as_slice().iter().zip(logits.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_preservation_keeps_row_norms() {
        let mut rng = rng_from(5);
        let logits = Matrix::from_vec(6, 4, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mut w = Matrix::identity(4);
        for v in w.as_mut_slice() {
            *v += rng.gen_range(-0.4..0.4);
        }
        let r = Refinement { w, b: vec![0.3, -0.2, 0.1, 0.5] };
        let refined = apply_refinement(&logits, &r, true).unwrap();
        for i in 0..6 {
            let a = super::norm2(logits.row(i));
            let b = super::norm2(refined.row(i));
            assert!((a - b).abs() < 1e-9, "row {i}: {a} vs {b}");
        }
    }

    #[test]
    fn vanished_refined_rows_skip_the_rescale() {
        let logits = Matrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 1.0, -1.0]);
        let r = Refinement { w: Matrix::zeros(3, 3), b: vec![0.0; 3] };
        let refined = apply_refinement(&logits, &r, true).unwrap();
        assert!(refined.as_slice().iter().all(|&v| v == 0.0), "zero transform stays zero");
    }

    #[test]
    fn fresh_unified_refiner_is_the_exact_identity() {
        let refiner = UnifiedRefiner::new(6, 32, 9).unwrap();
        let mut rng = rng_from(10);
        for _ in 0..10 {
            let logits = Matrix::from_vec(4, 6, (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let sig = signature_from_logits(&logits).unwrap();
            let r = refiner.refine(&sig).unwrap();
            assert!(r.is_identity(), "untrained refiner must not move predictions");
        }
    }

    #[test]
    fn fresh_refiner_has_zero_anchor_loss() {
        let refiner = UnifiedRefiner::new(4, 16, 0).unwrap();
        let mut rng = rng_from(11);
        let logits = Matrix::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let labels = vec![0, 1, 2, 3, 0];
        let sig = signature_from_logits(&logits).unwrap();
        let losses = unified_loss(&refiner, &logits, &labels, &sig, &sig, 0.1).unwrap();
        assert_eq!(losses.anchor, 0.0, "identity output must have zero anchor loss");
        let probs = loss::stable_softmax(&logits).unwrap();
        let plain = loss::cross_entropy_labels(&labels, &probs);
        assert!((losses.refine - plain).abs() < 1e-12);
    }

    fn random_signature(k: usize, rng: &mut impl Rng) -> BatchSignature {
        let logits = Matrix::from_vec(6, k, (0..6 * k).map(|_| rng.gen_range(-3.0..3.0)).collect());
        signature_from_logits(&logits).unwrap()
    }

    #[test]
    fn unified_gradients_match_central_differences() {
        for seed in 0..3 {
            let mut rng = rng_from(100 + seed);
            let mut refiner = UnifiedRefiner::new(4, 8, seed).unwrap();
            // move off the zero-weight initialization so all paths are live
            for slot in refiner.params_mut() {
                for v in slot.iter_mut() {
                    *v += rng.gen_range(-0.2..0.2);
                }
            }
            let logits =
                Matrix::from_vec(7, 4, (0..28).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let labels: Vec<usize> = (0..7).map(|_| rng.gen_range(0..4)).collect();
            let imb_sig = random_signature(4, &mut rng);
            let bal_sig = random_signature(4, &mut rng);
            let (_, grads) =
                unified_loss_and_grads(&refiner, &logits, &labels, &imb_sig, &bal_sig, 0.1)
                    .unwrap();
            let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
            let h = 1e-5;
            for slot in 0..analytic.len() {
                for i in 0..analytic[slot].len() {
                    let orig = refiner.params_mut()[slot][i];
                    refiner.params_mut()[slot][i] = orig + h;
                    let up = unified_loss(&refiner, &logits, &labels, &imb_sig, &bal_sig, 0.1)
                        .unwrap()
                        .total;
                    refiner.params_mut()[slot][i] = orig - h;
                    let down = unified_loss(&refiner, &logits, &labels, &imb_sig, &bal_sig, 0.1)
                        .unwrap()
                        .total;
                    refiner.params_mut()[slot][i] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let rel = grad_relative_error(analytic[slot][i], numeric);
                    assert!(
                        rel < 1e-4,
                        "seed {seed} slot {slot} index {i}: analytic {} numeric {numeric}",
                        analytic[slot][i]
                    );
                }
            }
        }
    }

    fn trained_setup(seed: u64) -> (MlpClassifier, LabeledDataset) {
        let spec = paired_clusters_spec(4, 4, 2.0, 0.8, 0.5).unwrap();
        let data = sample_balanced(&spec, 128, seed).unwrap();
        let mut model = build_classifier(4, &[16], 4, seed);
        let cfg = PretrainConfig { epochs: 15, batch_size: 64, seed, ..Default::default() };
        pretrain(&mut model, &data, &cfg).unwrap();
        (model, data)
    }

    /// A class-0-heavy batch the training streams never saw, plus a balanced
    /// signature, for before/after loss comparisons. Relies on the
    /// class-blocked sample layout.
    fn held_out_eval(
        model: &MlpClassifier,
        data: &LabeledDataset,
    ) -> (Matrix, Vec<usize>, BatchSignature, BatchSignature) {
        let per_class = data.n() / 4;
        let mut idx: Vec<usize> = (0..40).collect();
        for c in 1..4 {
            idx.extend([c * per_class, c * per_class + 1]);
        }
        let imb = data.subset(&idx);
        let imb_logits = model.logits(&imb.x, BnMode::Replace).unwrap();
        let imb_sig = signature_from_logits(&imb_logits).unwrap();
        let bal_idx: Vec<usize> = (0..46).map(|i| (i * 11) % data.n()).collect();
        let bal = data.subset(&bal_idx);
        let bal_logits = model.logits(&bal.x, BnMode::Replace).unwrap();
        let bal_sig = signature_from_logits(&bal_logits).unwrap();
        (imb_logits, imb.y, imb_sig, bal_sig)
    }

    #[test]
    fn unified_training_reduces_the_loss_and_leaves_the_classifier_alone() {
        let (model, data) = trained_setup(20);
        let before = model.net.state_bits();
        let cfg = RefinerTrainConfig {
            epochs: 20,
            batch_size: 32,
            hidden: 16,
            dirichlet_delta: 0.05,
            seed: 20,
            ..Default::default()
        };
        let trained = train_unified(&model, &data, &cfg).unwrap();
        assert_eq!(model.net.state_bits(), before, "refiner training touched the classifier");
        assert_eq!(trained.loss_curve.len(), 20 * 16, "one loss point per step");
        let refiner = match &trained.refiner {
            Refiner::Unified(r) => r,
            _ => unreachable!(),
        };
        let (imb_logits, imb_y, imb_sig, bal_sig) = held_out_eval(&model, &data);
        let identity = UnifiedRefiner::new(4, 16, 20).unwrap();
        let loss_before =
            unified_loss(&identity, &imb_logits, &imb_y, &imb_sig, &bal_sig, 0.1).unwrap();
        let loss_after =
            unified_loss(refiner, &imb_logits, &imb_y, &imb_sig, &bal_sig, 0.1).unwrap();
        assert!(
            loss_after.refine < loss_before.refine,
            "training should cut held-out refined cross-entropy: {} vs {}",
            loss_after.refine,
            loss_before.refine
        );
        // the refiner should now react to a skewed signature
        let r = trained.refiner.refine(&imb_sig).unwrap();
        assert!(!r.is_identity(), "trained refiner still outputs the identity");
    }

    #[test]
    fn unified_training_is_deterministic() {
        let (model, data) = trained_setup(21);
        let cfg = RefinerTrainConfig {
            epochs: 3,
            batch_size: 32,
            hidden: 8,
            seed: 21,
            ..Default::default()
        };
        let a = train_unified(&model, &data, &cfg).unwrap();
        let b = train_unified(&model, &data, &cfg).unwrap();
        assert_eq!(a.refiner.param_bits(), b.refiner.param_bits());
    }

    #[test]
    fn fresh_split_refiner_gates_everything_to_identity() {
        let refiner = SplitRefiner::new(5, 16, false, 3).unwrap();
        assert_eq!(refiner.severity(1.0), 0.5, "zero detector must sit on the fence");
        assert_eq!(refiner.severity(5.0), 0.5);
        let sig = BatchSignature { p_bar: vec![0.2; 5], d: 1.61 };
        let r = refiner.refine(&sig).unwrap();
        assert!(r.is_identity(), "closed gate must pass logits through");
    }

    #[test]
    fn split_training_learns_a_negative_severity_slope() {
        let (model, data) = trained_setup(22);
        let before = model.net.state_bits();
        let cfg = RefinerTrainConfig {
            epochs: 10,
            batch_size: 32,
            hidden: 16,
            dirichlet_delta: 0.03,
            seed: 22,
            ..Default::default()
        };
        let trained = train_split(&model, &data, &cfg, false).unwrap();
        assert_eq!(model.net.state_bits(), before, "refiner training touched the classifier");
        let split = match &trained.refiner {
            Refiner::Split(s) => s,
            _ => unreachable!(),
        };
        assert!(
            split.g1[0] < 0.0,
            "imbalance lowers d, so the detector slope should be negative, got {}",
            split.g1[0]
        );
        // severities ordered on fresh streams of each kind
        let imb_stream = make_stream(
            &data,
            &ShiftSpec::Dirichlet { delta: 0.03, n_chunks: 2 },
            32,
            500,
        )
        .unwrap();
        let bal_stream = make_stream(&data, &ShiftSpec::Balanced, 32, 501).unwrap();
        let mean_sev = |batches: &[crate::datagen::Batch]| {
            let mut total = 0.0;
            let mut n = 0;
            for b in batches {
                if b.y.len() < 32 {
                    continue;
                }
                let sig = batch_signature(&model, &b.x, 1.0).unwrap();
                total += split.severity(sig.d);
                n += 1;
            }
            total / n as f64
        };
        let sev_imb = mean_sev(&imb_stream.batches);
        let sev_bal = mean_sev(&bal_stream.batches);
        assert!(
            sev_imb > sev_bal,
            "detector should rank imbalanced batches above balanced: {sev_imb} vs {sev_bal}"
        );
    }

    #[test]
    fn diagonal_split_refiner_keeps_off_diagonals_at_zero() {
        let (model, data) = trained_setup(23);
        let cfg = RefinerTrainConfig {
            epochs: 3,
            batch_size: 32,
            hidden: 8,
            dirichlet_delta: 0.05,
            seed: 23,
            ..Default::default()
        };
        let trained = train_split(&model, &data, &cfg, true).unwrap();
        let split = match &trained.refiner {
            Refiner::Split(s) => s,
            _ => unreachable!(),
        };
        let r = split.refinement_ungated(&[0.7, 0.1, 0.1, 0.1]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(r.w.get(i, j), 0.0, "off-diagonal ({i},{j}) must stay zero");
                }
            }
        }
    }

    #[test]
    fn refiner_files_round_trip_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let (model, data) = trained_setup(24);
        let cfg = RefinerTrainConfig {
            epochs: 2,
            batch_size: 32,
            hidden: 8,
            seed: 24,
            ..Default::default()
        };
        for (name, trained) in [
            ("unified.json", train_unified(&model, &data, &cfg).unwrap()),
            ("split.json", train_split(&model, &data, &cfg, false).unwrap()),
            ("diag.json", train_split(&model, &data, &cfg, true).unwrap()),
        ] {
            let path = dir.path().join(name);
            save_refiner(&path, &trained.refiner).unwrap();
            let loaded = load_refiner(&path).unwrap();
            assert_eq!(
                loaded.param_bits(),
                trained.refiner.param_bits(),
                "{name}: parameters drifted through the file"
            );
            assert_eq!(loaded.variant(), trained.refiner.variant());
            let resaved = dir.path().join(format!("re-{name}"));
            save_refiner(&resaved, &loaded).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&resaved).unwrap(),
                "{name}: save-load-save must reproduce the same bytes"
            );
        }
    }

    #[test]
    fn refiner_files_reject_foreign_and_damaged_content() {
        let dir = tempfile::tempdir().unwrap();
        let refiner = Refiner::Unified(UnifiedRefiner::new(3, 4, 0).unwrap());
        let path = dir.path().join("refiner.json");
        save_refiner(&path, &refiner).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        let wrong_format = text.replace(REFINER_FORMAT, "dart-refiner/9");
        let p = dir.path().join("format.json");
        std::fs::write(&p, wrong_format).unwrap();
        assert!(matches!(load_refiner(&p), Err(Error::Config(_))));

        // claim the other variant over unified parameters
        let cross = text.replace("\"unified\"", "\"split\"");
        let p = dir.path().join("cross.json");
        std::fs::write(&p, cross).unwrap();
        assert!(load_refiner(&p).is_err(), "split variant cannot parse unified parameters");

        // shrink the declared hidden width under the stored matrices
        let tampered = text.replace("\"hidden\": 4", "\"hidden\": 3");
        let p = dir.path().join("shape.json");
        std::fs::write(&p, tampered).unwrap();
        assert!(matches!(load_refiner(&p), Err(Error::Shape(_))));
    }

    #[test]
    fn logit_stats_split_max_from_rest() {
        let logits = Matrix::from_vec(2, 3, vec![3.0, 1.0, 2.0, 0.0, -1.0, 1.0]);
        let stats = batch_logit_stats(&logits).unwrap();
        assert!((stats.max_mean - 2.0).abs() < 1e-12);
        assert!((stats.rest_mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn temperature_matches_frozen_fixtures() {
        let t = temperature_from_stats(
            10,
            LogitStats { max_mean: 5.0, rest_mean: 0.0 },
            LogitStats { max_mean: 10.0, rest_mean: 0.0 },
        );
        assert!(!t.degenerate);
        assert!((t.t - 2.0).abs() < 1e-12, "got {}", t.t);
        let t = temperature_from_stats(
            4,
            LogitStats { max_mean: 2.5, rest_mean: -0.8 },
            LogitStats { max_mean: 6.1, rest_mean: 2.3 },
        );
        assert!((t.t - 1.06203703703703704).abs() < 1e-12, "got {}", t.t);
    }

    #[test]
    fn matched_statistics_give_unit_temperature() {
        let mut rng = rng_from(30);
        for k in [3usize, 10, 50] {
            for _ in 0..20 {
                let stats = LogitStats {
                    max_mean: rng.gen_range(0.5..8.0),
                    rest_mean: rng.gen_range(-2.0..0.5),
                };
                let t = temperature_from_stats(k, stats, stats);
                assert!(!t.degenerate);
                assert!((t.t - 1.0).abs() < 1e-12, "K={k} stats {stats:?} gave {}", t.t);
            }
        }
    }

    #[test]
    fn temperature_scales_linearly_with_test_logits() {
        let train = LogitStats { max_mean: 3.7, rest_mean: 1.2 };
        let test = LogitStats { max_mean: 6.1, rest_mean: 2.3 };
        let base = temperature_from_stats(10, train, test).t;
        for c in [0.5, 2.0, 7.5] {
            let scaled = temperature_from_stats(
                10,
                train,
                LogitStats { max_mean: c * test.max_mean, rest_mean: c * test.rest_mean },
            )
            .t;
            assert!(
                (scaled - c * base).abs() < 1e-12 * c.max(1.0),
                "c={c}: {scaled} vs {}",
                c * base
            );
        }
    }

    #[test]
    fn degenerate_statistics_fall_back_to_unit_temperature() {
        let zero = LogitStats { max_mean: 0.0, rest_mean: 0.0 };
        let t = temperature_from_stats(10, zero, LogitStats { max_mean: 4.0, rest_mean: 1.0 });
        assert!(t.degenerate);
        assert_eq!(t.t, 1.0);
    }

    #[test]
    fn running_temperature_averages_pushes() {
        let mut rt = RunningTemperature::default();
        assert_eq!(rt.mean(), 1.0, "empty average defaults to 1");
        rt.push(2.0);
        rt.push(1.0);
        rt.push(0.6);
        assert!((rt.mean() - 1.2).abs() < 1e-12);
        assert_eq!(rt.count(), 3);
    }
}
