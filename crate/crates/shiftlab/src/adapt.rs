//! Classifier pretraining and test-time adaptation baselines.
//!
//! The adaptation methods share one protocol per batch: compute the batch
//! signature with a frozen copy of the pretrained classifier (batch-statistics
//! mode), refine the scoring logits if a refiner is attached, record
//! predictions, and only then let the method update its parameters. Methods:
//!
//! * `NoAdapt`: running-statistics forward, no updates.
//! * `BnAdapt`: batch-statistics forward, no parameter updates.
//! * `Tent`: batch-statistics forward, entropy minimization on the batch-norm
//!   affine parameters. With a refiner attached the entropy is taken on
//!   refined logits rescaled back to each row's original norm.
//! * `Pl`: confident-prediction pseudo-labels (on refined logits when a
//!   refiner is attached), one cross-entropy step on the batch-norm affine
//!   parameters.

use crate::datagen::{BatchStream, LabeledDataset, StreamMeta};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss;
use crate::nn::{mlp, BnMode, Network, ParamFilter};
use crate::optim::Optimizer;
use crate::refiner::{batch_signature, Refinement, Refiner};
use crate::rng::{derive_seed, rng_from};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Multi-layer perceptron classifier with batch-norm blocks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpClassifier {
    pub net: Network,
    pub k: usize,
    pub dim: usize,
    pub hidden: Vec<usize>,
}

pub fn build_classifier(dim: usize, hidden: &[usize], k: usize, seed: u64) -> MlpClassifier {
    let mut rng = rng_from(derive_seed(seed, "classifier-init", 0));
    MlpClassifier {
        net: mlp(dim, hidden, k, &mut rng),
        k,
        dim,
        hidden: hidden.to_vec(),
    }
}

impl MlpClassifier {
    pub fn logits(&self, x: &Matrix, mode: BnMode) -> Result<Matrix> {
        Ok(self.net.forward(x, mode)?.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.input_dim() != Some(self.dim) || self.net.output_dim() != Some(self.k) {
            return Err(Error::Shape(format!(
                "network is {:?} -> {:?}, classifier claims {} -> {}",
                self.net.input_dim(),
                self.net.output_dim(),
                self.dim,
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Final train accuracy below this is reported as a failed run.
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 40, batch_size: 64, lr: 1e-3, seed: 0, min_accuracy: 0.5 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_train_accuracy: f64,
    /// Mean cross-entropy per epoch.
    pub loss_curve: Vec<f64>,
}

/// Gradient of mean cross-entropy wrt logits: `(softmax - onehot) / M`.
fn ce_grad(probs: &Matrix, labels: &[usize]) -> Matrix {
    let mut d = probs.clone();
    let m = labels.len() as f64;
    for (r, &y) in labels.iter().enumerate() {
        let v = d.get(r, y) - 1.0;
        d.set(r, y, v);
    }
    d.scale(1.0 / m);
    d
}

/// Gradient of mean Shannon entropy wrt logits.
fn entropy_grad(probs: &Matrix) -> Matrix {
    let m = probs.rows() as f64;
    let mut d = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let h: f64 = row.iter().map(|p| if *p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
        let dr = d.row_mut(r);
        for (j, &p) in row.iter().enumerate() {
            dr[j] = -p * (p.max(loss::PROB_CLAMP).ln() + h) / m;
        }
    }
    d
}

/// Train the full network with cross-entropy and Adam.
pub fn pretrain(
    model: &mut MlpClassifier,
    data: &LabeledDataset,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    model.validate()?;
    data.validate()?;
    if data.k != model.k {
        return Err(Error::Config(format!(
            "dataset has {} classes, classifier has {}",
            data.k, model.k
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch size must be positive".into()));
    }
    let mut opt = Optimizer::adam(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.n()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from(derive_seed(cfg.seed, "pretrain-epoch", epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.subset(idx);
            let (logits, tape) = model.net.forward_train(&batch.x)?;
            let probs = loss::stable_softmax(&logits)?;
            epoch_loss += loss::cross_entropy_labels(&batch.y, &probs);
            batches += 1;
            let grads = model.net.backward(&tape, &ce_grad(&probs, &batch.y));
            let slices = grads.slices(ParamFilter::All);
            opt.step(&mut model.net.params_mut(ParamFilter::All), &slices)?;
        }
        curve.push(epoch_loss / batches as f64);
    }
    let acc = evaluate(model, data, BnMode::Eval)?;
    if cfg.epochs > 0 && acc < cfg.min_accuracy {
        return Err(Error::Divergence(format!(
            "train accuracy {acc:.3} below the {:.3} floor",
            cfg.min_accuracy
        )));
    }
    Ok(PretrainReport { epochs: cfg.epochs, final_train_accuracy: acc, loss_curve: curve })
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &MlpClassifier, data: &LabeledDataset, mode: BnMode) -> Result<f64> {
    let logits = model.logits(&data.x, mode)?;
    Ok(accuracy(&logits, &data.y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoAdapt,
    BnAdapt,
    Tent,
    Pl,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::NoAdapt => "no_adapt",
            Method::BnAdapt => "bn_adapt",
            Method::Tent => "tent",
            Method::Pl => "pl",
        }
    }

    /// Batch-norm statistics mode used for scoring.
    pub fn scoring_mode(&self) -> BnMode {
        match self {
            Method::NoAdapt => BnMode::Eval,
            _ => BnMode::Replace,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub method: Method,
    pub lr: f64,
    pub pl_threshold: f64,
    /// Multiplies logits before signature computation and refinement; has no
    /// effect when no refiner is attached.
    pub logit_scale: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { method: Method::BnAdapt, lr: 1e-3, pl_threshold: 0.95, logit_scale: 1.0 }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("adaptation lr must be positive, got {}", self.lr)));
        }
        if !(self.pl_threshold > 0.0 && self.pl_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "pseudo-label threshold must lie in (0, 1], got {}",
                self.pl_threshold
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

/// Refined logits used for scoring and pseudo-labeling: plain affine
/// transform of the scaled logits, no norm correction.
fn scored_logits(logits: &Matrix, refinement: Option<&Refinement>, scale: f64) -> Result<Matrix> {
    match refinement {
        None => Ok(logits.clone()),
        Some(r) => {
            let mut scaled = logits.clone();
            scaled.scale(scale);
            crate::refiner::apply_refinement(&scaled, r, false)
        }
    }
}

/// One entropy-minimization step on the batch-norm affine parameters.
///
/// With a refinement attached, the objective is the entropy of
/// `softmax(|z| * (zW + b) / |zW + b|)` per row (`z` the scaled logits), so
/// the refinement steers class proportions while each row keeps its original
/// confidence scale. Rows whose refined logits vanish skip the rescale.
pub fn tent_step(
    model: &mut MlpClassifier,
    x: &Matrix,
    refinement: Option<&Refinement>,
    cfg: &AdaptConfig,
    opt: &mut Optimizer,
) -> Result<f64> {
    let (logits, tape) = model.net.forward(x, BnMode::Replace)?;
    let (objective_logits, d_obj_to_d_logits): (Matrix, Box<dyn Fn(&Matrix) -> Matrix>) =
        match refinement {
            None => (logits.clone(), Box::new(|g: &Matrix| g.clone())),
            Some(r) => {
                let s = cfg.logit_scale;
                let mut z0 = logits.clone();
                z0.scale(s);
                let refined = crate::refiner::apply_refinement(&z0, r, false)?;
                let mut rescaled = refined.clone();
                let rows = z0.rows();
                let k = z0.cols();
                let mut a_norms = vec![0.0; rows];
                let mut v_norms = vec![0.0; rows];
                for row in 0..rows {
                    let a = norm2(z0.row(row));
                    let vn = norm2(refined.row(row));
                    a_norms[row] = a;
                    v_norms[row] = vn;
                    if vn > 0.0 {
                        let f = a / vn;
                        for v in rescaled.row_mut(row) {
                            *v *= f;
                        }
                    }
                }
                let w = r.w.clone();
                let z0 = z0.clone();
                let refined = refined.clone();
                let back = move |g: &Matrix| -> Matrix {
                    // chain rule through z = a * v / |v|, v = z0 W + b, a = |z0|
                    let mut dz0 = Matrix::zeros(rows, k);
                    for row in 0..rows {
                        let gr = g.row(row);
                        let a = a_norms[row];
                        let vn = v_norms[row];
                        let out = dz0.row_mut(row);
                        if vn == 0.0 {
                            // rescale skipped: z = v, dz0 = W g
                            for i in 0..k {
                                let mut acc = 0.0;
                                for j in 0..k {
                                    acc += w.get(i, j) * gr[j];
                                }
                                out[i] = acc;
                            }
                            continue;
                        }
                        let vr = refined.row(row);
                        let zr = z0.row(row);
                        let g_dot_u: f64 =
                            gr.iter().zip(vr).map(|(gj, vj)| gj * vj).sum::<f64>() / vn;
                        // g - (g.u) u, in v coordinates
                        let mut adj = vec![0.0; k];
                        for j in 0..k {
                            adj[j] = gr[j] - g_dot_u * vr[j] / vn;
                        }
                        for i in 0..k {
                            let mut acc = 0.0;
                            for j in 0..k {
                                acc += w.get(i, j) * adj[j];
                            }
                            out[i] = (a / vn) * acc;
                            if a > 0.0 {
                                out[i] += g_dot_u * zr[i] / a;
                            }
                        }
                    }
                    dz0.scale(s);
                    dz0
                };
                (rescaled, Box::new(back))
            }
        };
    let probs = loss::stable_softmax(&objective_logits)?;
    let loss_value = loss::entropy_mean(&probs);
    let d_logits = d_obj_to_d_logits(&entropy_grad(&probs));
    let grads = model.net.backward(&tape, &d_logits);
    let slices = grads.slices(ParamFilter::BnAffine);
    opt.step(&mut model.net.params_mut(ParamFilter::BnAffine), &slices)?;
    Ok(loss_value)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PlOutcome {
    pub loss: f64,
    pub n_selected: usize,
}

/// One pseudo-label step: select rows whose refined softmax confidence meets
/// the threshold, take their argmax as labels, and make one cross-entropy
/// step on the batch-norm affine parameters. No confident rows, no step.
pub fn pl_step(
    model: &mut MlpClassifier,
    x: &Matrix,
    refinement: Option<&Refinement>,
    cfg: &AdaptConfig,
    opt: &mut Optimizer,
) -> Result<PlOutcome> {
    let (logits, tape) = model.net.forward(x, BnMode::Replace)?;
    let scored = scored_logits(&logits, refinement, cfg.logit_scale)?;
    let probs = loss::stable_softmax(&scored)?;
    let mut selected = Vec::new();
    let mut pseudo = Vec::new();
    for (r, row) in probs.iter_rows().enumerate() {
        let y = argmax(row);
        if row[y] >= cfg.pl_threshold {
            selected.push(r);
            pseudo.push(y);
        }
    }
    if selected.is_empty() {
        return Ok(PlOutcome { loss: 0.0, n_selected: 0 });
    }
    // mean cross-entropy over the selected rows only
    let m = selected.len() as f64;
    let mut loss_value = 0.0;
    let mut d_scored = Matrix::zeros(probs.rows(), probs.cols());
    for (&r, &y) in selected.iter().zip(&pseudo) {
        loss_value -= probs.get(r, y).max(loss::PROB_CLAMP).ln();
        let dst = d_scored.row_mut(r);
        for (j, &p) in probs.row(r).iter().enumerate() {
            dst[j] = (p - if j == y { 1.0 } else { 0.0 }) / m;
        }
    }
    loss_value /= m;
    let d_logits = match refinement {
        None => d_scored,
        Some(r) => {
            // scored = scale * logits * W + b
            let mut d = d_scored.matmul_t(&r.w);
            d.scale(cfg.logit_scale);
            d
        }
    };
    let grads = model.net.backward(&tape, &d_logits);
    let slices = grads.slices(ParamFilter::BnAffine);
    opt.step(&mut model.net.params_mut(ParamFilter::BnAffine), &slices)?;
    Ok(PlOutcome { loss: loss_value, n_selected: selected.len() })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TracePoint {
    pub batch: usize,
    pub batch_size: usize,
    pub d: f64,
    pub p_bar: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub refined: bool,
    pub n_samples: usize,
    pub n_batches: usize,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    /// Row-normalized confusion (true class x predicted class); all-zero rows
    /// for classes absent from the stream.
    pub confusion: Matrix,
    pub trace: Vec<TracePoint>,
    pub stream: StreamMeta,
}

impl RunResult {
    pub fn mean_signature_d(&self) -> f64 {
        if self.trace.is_empty() {
            return 0.0;
        }
        self.trace.iter().map(|t| t.d).sum::<f64>() / self.trace.len() as f64
    }
}

/// Run one adaptation method over a batch stream.
///
/// Per batch: signature from a frozen copy of the incoming model
/// (batch-statistics mode), refinement lookup, scoring and recording, then
/// the method's parameter update. The incoming model is never mutated.
pub fn run_stream(
    model: &MlpClassifier,
    refiner: Option<&Refiner>,
    stream: &BatchStream,
    cfg: &AdaptConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    model.validate()?;
    if let Some(r) = refiner {
        if r.k() != model.k {
            return Err(Error::Shape(format!(
                "refiner is for {} classes, classifier has {}",
                r.k(),
                model.k
            )));
        }
    }
    let frozen = model.clone();
    let mut adapted = model.clone();
    let mut opt = Optimizer::adam(cfg.lr);
    let k = model.k;
    let mut confusion_counts = Matrix::zeros(k, k);
    let mut class_counts = vec![0usize; k];
    let mut correct_per_class = vec![0usize; k];
    let mut trace = Vec::with_capacity(stream.batches.len());
    let mut n_samples = 0;
    let mut n_correct = 0;
    for (bi, batch) in stream.batches.iter().enumerate() {
        if batch.y.is_empty() {
            continue;
        }
        let sig = batch_signature(&frozen, &batch.x, cfg.logit_scale)?;
        let refinement = match refiner {
            Some(r) => Some(r.refine(&sig)?),
            None => None,
        };
        let logits = adapted.logits(&batch.x, cfg.method.scoring_mode())?;
        let scored = scored_logits(&logits, refinement.as_ref(), cfg.logit_scale)?;
        let mut batch_correct = 0;
        for (row, &y) in scored.iter_rows().zip(&batch.y) {
            let pred = argmax(row);
            let c = confusion_counts.get(y, pred) + 1.0;
            confusion_counts.set(y, pred, c);
            class_counts[y] += 1;
            if pred == y {
                correct_per_class[y] += 1;
                batch_correct += 1;
            }
        }
        n_samples += batch.y.len();
        n_correct += batch_correct;
        trace.push(TracePoint {
            batch: bi,
            batch_size: batch.y.len(),
            d: sig.d,
            p_bar: sig.p_bar.clone(),
            accuracy: batch_correct as f64 / batch.y.len() as f64,
        });
        match cfg.method {
            Method::NoAdapt | Method::BnAdapt => {}
            Method::Tent => {
                tent_step(&mut adapted, &batch.x, refinement.as_ref(), cfg, &mut opt)?;
            }
            Method::Pl => {
                pl_step(&mut adapted, &batch.x, refinement.as_ref(), cfg, &mut opt)?;
            }
        }
    }
    let mut confusion = confusion_counts;
    for r in 0..k {
        let total: f64 = confusion.row(r).iter().sum();
        if total > 0.0 {
            for v in confusion.row_mut(r) {
                *v /= total;
            }
        }
    }
    let per_class_accuracy = class_counts
        .iter()
        .zip(&correct_per_class)
        .map(|(&n, &c)| if n > 0 { Some(c as f64 / n as f64) } else { None })
        .collect();
    Ok(RunResult {
        method: cfg.method,
        refined: refiner.is_some(),
        n_samples,
        n_batches: trace.len(),
        overall_accuracy: n_correct as f64 / n_samples.max(1) as f64,
        per_class_accuracy,
        class_counts,
        confusion,
        trace,
        stream: stream.meta.clone(),
    })
}
