//! Minimal feed-forward stack: linear layers, batch normalization with three
//! statistics modes, and ReLU, with hand-written backward passes.
//!
//! Batch-norm modes:
//! * `Train`: normalize by current batch statistics and fold them into the
//!   running estimates (`new = (1 - momentum) * old + momentum * batch`).
//! * `Eval`: normalize by the stored running statistics; nothing is updated.
//! * `Replace`: normalize by current batch statistics, running estimates
//!   untouched. This is the test-time adaptation mode.
//!
//! The normalization denominator is `sqrt(max(var, eps))`: for any batch with
//! variance above eps the output has exactly unit batch variance (up to
//! rounding), and eps only guards degenerate batches (size 1, or a constant
//! feature), which are allowed but documented as an epsilon-variance path.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
    Replace,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearLayer {
    /// in x out
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl LinearLayer {
    /// He-normal initialization, std = sqrt(2 / fan_in), zero bias.
    pub fn he_init(fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        LinearLayer { w: Matrix::from_vec(fan_in, fan_out, data), b: vec![0.0; fan_out] }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        LinearLayer { w: Matrix::zeros(fan_in, fan_out), b: vec![0.0; fan_out] }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.w);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        y
    }

    /// Returns (dw, db, dx).
    fn backward(&self, x: &Matrix, dy: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
        let dw = x.t_matmul(dy);
        let mut db = vec![0.0; self.b.len()];
        for r in 0..dy.rows() {
            for (d, v) in db.iter_mut().zip(dy.row(r)) {
                *d += v;
            }
        }
        let dx = dy.matmul_t(&self.w);
        (dw, db, dx)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(width: usize) -> Self {
        BatchNormLayer {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Biased per-feature batch mean and variance.
    fn batch_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let mean = x.column_means();
        let mut var = vec![0.0; x.cols()];
        for row in x.iter_rows() {
            for ((v, &m), &xv) in var.iter_mut().zip(&mean).zip(row) {
                let d = xv - m;
                *v += d * d;
            }
        }
        let inv = 1.0 / x.rows() as f64;
        for v in &mut var {
            *v *= inv;
        }
        (mean, var)
    }

    fn normalize(&self, x: &Matrix, mean: &[f64], var: &[f64], batch_stats: bool) -> (Matrix, BnCache) {
        let width = self.width();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / v.max(self.eps).sqrt()).collect();
        let degenerate: Vec<bool> = var.iter().map(|v| *v <= self.eps).collect();
        let mut xhat = Matrix::zeros(x.rows(), width);
        let mut y = Matrix::zeros(x.rows(), width);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let hr = xhat.row_mut(r);
            for f in 0..width {
                hr[f] = (xr[f] - mean[f]) * inv_std[f];
            }
            let yr = y.row_mut(r);
            for f in 0..width {
                yr[f] = self.gamma[f] * xhat.get(r, f) + self.beta[f];
            }
        }
        (y, BnCache { xhat, inv_std, batch_stats, degenerate })
    }

    fn forward(&self, x: &Matrix, mode: BnMode) -> (Matrix, BnCache, Option<(Vec<f64>, Vec<f64>)>) {
        match mode {
            BnMode::Eval => {
                let (y, cache) = self.normalize(x, &self.running_mean, &self.running_var, false);
                (y, cache, None)
            }
            BnMode::Train | BnMode::Replace => {
                let (mean, var) = Self::batch_stats(x);
                let (y, cache) = self.normalize(x, &mean, &var, true);
                let stats = if mode == BnMode::Train { Some((mean, var)) } else { None };
                (y, cache, stats)
            }
        }
    }

    fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        for (r, m) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - self.momentum) * *r + self.momentum * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - self.momentum) * *r + self.momentum * v;
        }
    }

    /// Returns (dgamma, dbeta, dx).
    fn backward(&self, cache: &BnCache, dy: &Matrix) -> (Vec<f64>, Vec<f64>, Matrix) {
        let width = self.width();
        let m = dy.rows() as f64;
        let mut dgamma = vec![0.0; width];
        let mut dbeta = vec![0.0; width];
        for r in 0..dy.rows() {
            let dr = dy.row(r);
            let hr = cache.xhat.row(r);
            for f in 0..width {
                dgamma[f] += dr[f] * hr[f];
                dbeta[f] += dr[f];
            }
        }
        let mut dx = Matrix::zeros(dy.rows(), width);
        if !cache.batch_stats {
            // running statistics are constants
            for r in 0..dy.rows() {
                let dr = dy.row(r);
                let xr = dx.row_mut(r);
                for f in 0..width {
                    xr[f] = dr[f] * self.gamma[f] * cache.inv_std[f];
                }
            }
            return (dgamma, dbeta, dx);
        }
        // batch statistics: mean (always) and variance (unless the denominator
        // was pinned at eps) are functions of x
        let mut mean_dxhat = vec![0.0; width];
        let mut mean_dxhat_xhat = vec![0.0; width];
        for r in 0..dy.rows() {
            let dr = dy.row(r);
            let hr = cache.xhat.row(r);
            for f in 0..width {
                let dxhat = dr[f] * self.gamma[f];
                mean_dxhat[f] += dxhat;
                mean_dxhat_xhat[f] += dxhat * hr[f];
            }
        }
        for f in 0..width {
            mean_dxhat[f] /= m;
            mean_dxhat_xhat[f] /= m;
        }
        for r in 0..dy.rows() {
            let dr = dy.row(r);
            let hr = cache.xhat.row(r);
            let xr = dx.row_mut(r);
            for f in 0..width {
                let dxhat = dr[f] * self.gamma[f];
                let centered = dxhat - mean_dxhat[f];
                let var_term = if cache.degenerate[f] { 0.0 } else { hr[f] * mean_dxhat_xhat[f] };
                xr[f] = cache.inv_std[f] * (centered - var_term);
            }
        }
        (dgamma, dbeta, dx)
    }
}

#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    batch_stats: bool,
    degenerate: Vec<bool>,
}

impl BnCache {
    pub fn normalized(&self) -> &Matrix {
        &self.xhat
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Layer {
    Linear(LinearLayer),
    BatchNorm(BatchNormLayer),
    Relu,
}

#[derive(Clone, Debug)]
pub enum LayerGrad {
    Linear { dw: Matrix, db: Vec<f64> },
    BatchNorm { dgamma: Vec<f64>, dbeta: Vec<f64> },
    Relu,
}

/// Which parameter tensors an optimizer or gradient walk should see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    /// Only batch-norm gamma/beta (the TENT/PL trainable subset).
    BnAffine,
}

/// Per-layer forward caches needed by `backward`.
pub struct Tape {
    inputs: Vec<Matrix>,
    bn: Vec<Option<BnCache>>,
}

impl Tape {
    /// Cache of the i-th layer if it is a batch-norm layer.
    pub fn bn_cache(&self, layer: usize) -> Option<&BnCache> {
        self.bn.get(layer).and_then(|c| c.as_ref())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Linear(lin) => Some(lin.w.rows()),
            _ => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Linear(lin) => Some(lin.w.cols()),
            _ => None,
        })
    }

    /// Structural soundness of (possibly deserialized) layers: consistent
    /// matrix buffers, matching bias widths, and a connectable layer chain.
    pub fn validate(&self) -> Result<()> {
        let mut width: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(lin) => {
                    if !lin.w.is_consistent() {
                        return Err(Error::Shape(format!("layer {i}: inconsistent weight buffer")));
                    }
                    if lin.w.cols() != lin.b.len() {
                        return Err(Error::Shape(format!(
                            "layer {i}: {} outputs but {} biases",
                            lin.w.cols(),
                            lin.b.len()
                        )));
                    }
                    if let Some(w) = width {
                        if lin.w.rows() != w {
                            return Err(Error::Shape(format!(
                                "layer {i}: expects {} inputs, previous layer emits {w}",
                                lin.w.rows()
                            )));
                        }
                    }
                    width = Some(lin.w.cols());
                }
                Layer::BatchNorm(bn) => {
                    let w = bn.width();
                    if bn.beta.len() != w
                        || bn.running_mean.len() != w
                        || bn.running_var.len() != w
                    {
                        return Err(Error::Shape(format!("layer {i}: ragged batch-norm vectors")));
                    }
                    if let Some(expect) = width {
                        if w != expect {
                            return Err(Error::Shape(format!(
                                "layer {i}: batch-norm width {w}, previous layer emits {expect}"
                            )));
                        }
                    }
                }
                Layer::Relu => {}
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::Shape("forward on an empty batch".into()));
        }
        if let Some(d) = self.input_dim() {
            if x.cols() != d {
                return Err(Error::Shape(format!("input width {} != network input {}", x.cols(), d)));
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Shared forward walk. Train mode collects pending running-stat updates
    /// instead of mutating, so the walk itself needs only `&self`.
    fn forward_impl(
        &self,
        x: &Matrix,
        mode: BnMode,
    ) -> Result<(Matrix, Tape, Vec<(usize, Vec<f64>, Vec<f64>)>)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut bn_caches = Vec::with_capacity(self.layers.len());
        let mut pending = Vec::new();
        let mut cur = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let mut cache = None;
            cur = match layer {
                Layer::Linear(lin) => {
                    if cur.cols() != lin.w.rows() {
                        return Err(Error::Shape(format!(
                            "layer {}: width {} != linear fan-in {}",
                            li,
                            cur.cols(),
                            lin.w.rows()
                        )));
                    }
                    lin.forward(&cur)
                }
                Layer::BatchNorm(bn) => {
                    if cur.cols() != bn.width() {
                        return Err(Error::Shape(format!(
                            "layer {}: width {} != batch-norm width {}",
                            li,
                            cur.cols(),
                            bn.width()
                        )));
                    }
                    let (y, c, stats) = bn.forward(&cur, mode);
                    cache = Some(c);
                    if let Some((mean, var)) = stats {
                        pending.push((li, mean, var));
                    }
                    y
                }
                Layer::Relu => {
                    let mut y = cur.clone();
                    for v in y.as_mut_slice() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    y
                }
            };
            bn_caches.push(cache);
        }
        if !cur.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok((cur, Tape { inputs, bn: bn_caches }, pending))
    }

    /// Forward pass in `Eval` or `Replace` mode; the network is not mutated.
    pub fn forward(&self, x: &Matrix, mode: BnMode) -> Result<(Matrix, Tape)> {
        assert!(mode != BnMode::Train, "Train mode requires forward_train");
        let (y, tape, _) = self.forward_impl(x, mode)?;
        Ok((y, tape))
    }

    /// Training forward: batch statistics are used and folded into the running
    /// estimates.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, Tape)> {
        let (y, tape, pending) = self.forward_impl(x, BnMode::Train)?;
        for (li, mean, var) in pending {
            match &mut self.layers[li] {
                Layer::BatchNorm(bn) => bn.update_running(&mean, &var),
                _ => unreachable!(),
            }
        }
        Ok((y, tape))
    }

    /// Backpropagate `d_out` (dLoss/dOutput) through the tape.
    pub fn backward(&self, tape: &Tape, d_out: &Matrix) -> Gradients {
        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        let mut dy = d_out.clone();
        for li in (0..self.layers.len()).rev() {
            let x = &tape.inputs[li];
            match &self.layers[li] {
                Layer::Linear(lin) => {
                    let (dw, db, dx) = lin.backward(x, &dy);
                    grads.push(LayerGrad::Linear { dw, db });
                    dy = dx;
                }
                Layer::BatchNorm(bn) => {
                    let cache = tape.bn[li].as_ref().expect("tape missing batch-norm cache");
                    let (dgamma, dbeta, dx) = bn.backward(cache, &dy);
                    grads.push(LayerGrad::BatchNorm { dgamma, dbeta });
                    dy = dx;
                }
                Layer::Relu => {
                    let mut dx = dy.clone();
                    for (v, &xin) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        if xin <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    grads.push(LayerGrad::Relu);
                    dy = dx;
                }
            }
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    /// Mutable views of the selected parameter tensors, in a stable order
    /// (layer order; linear emits weight then bias, batch-norm gamma then
    /// beta). Matches `Gradients::slices` with the same filter.
    pub fn params_mut(&mut self, filter: ParamFilter) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Linear(lin) => {
                    if filter == ParamFilter::All {
                        out.push(lin.w.as_mut_slice());
                        out.push(&mut lin.b);
                    }
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Bit patterns of every learnable parameter (selected by filter), for
    /// exact change tracking.
    pub fn param_bits(&self, filter: ParamFilter) -> Vec<u64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(lin) => {
                    if filter == ParamFilter::All {
                        out.extend(lin.w.as_slice().iter().map(|v| v.to_bits()));
                        out.extend(lin.b.iter().map(|v| v.to_bits()));
                    }
                }
                Layer::BatchNorm(bn) => {
                    out.extend(bn.gamma.iter().map(|v| v.to_bits()));
                    out.extend(bn.beta.iter().map(|v| v.to_bits()));
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Bit patterns of the full state including batch-norm running statistics.
    pub fn state_bits(&self) -> Vec<u64> {
        let mut out = self.param_bits(ParamFilter::All);
        for layer in &self.layers {
            if let Layer::BatchNorm(bn) = layer {
                out.extend(bn.running_mean.iter().map(|v| v.to_bits()));
                out.extend(bn.running_var.iter().map(|v| v.to_bits()));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    /// Gradient slices in the order matching `Network::params_mut(filter)`.
    pub fn slices(&self, filter: ParamFilter) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::Linear { dw, db } => {
                    if filter == ParamFilter::All {
                        out.push(dw.as_slice());
                        out.push(db);
                    }
                }
                LayerGrad::BatchNorm { dgamma, dbeta } => {
                    out.push(dgamma);
                    out.push(dbeta);
                }
                LayerGrad::Relu => {}
            }
        }
        out
    }
}

/// Linear -> BatchNorm -> ReLU blocks for each hidden width, then a final
/// linear head. The standard classifier shape used across the crate.
pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut ChaCha20Rng) -> Network {
    let mut layers = Vec::new();
    let mut prev = input_dim;
    for &h in hidden {
        layers.push(Layer::Linear(LinearLayer::he_init(prev, h, rng)));
        layers.push(Layer::BatchNorm(BatchNormLayer::new(h)));
        layers.push(Layer::Relu);
        prev = h;
    }
    layers.push(Layer::Linear(LinearLayer::he_init(prev, output_dim, rng)));
    Network::new(layers)
}
