//! MLP and Elman-RNN forecasters over a flat parameter vector with a
//! structure mask.
//!
//! Parameters are laid out layer by layer; within layer `h` the input
//! weights `w^h` (row-major, `L_h x L_{h-1}`) come first, then for recurrent
//! layers the hidden-to-hidden weights `v^h` (`L_h x L_h`), then the bias.
//! The output layer is linear and never recurrent. Hidden states start at
//! zero:
//!
//! ```text
//! z_t^h = act_h(w^h z_t^{h-1} + v^h z_{t-1}^h + b^h),   z_t^0 = x_t,  z_0^h = 0
//! out_t = w^H z_t^{H-1} + b^H
//! ```

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, NodeId, Tape, Tensor};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn is_bounded(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    fn on_tape(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Mlp,
    ElmanRnn,
}

/// Architecture of a forecaster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    /// `L_0 .. L_H`: input width (lag window plus exogenous columns), hidden
    /// widths, output width.
    pub layer_widths: Vec<usize>,
    /// One activation per hidden layer.
    pub activations: Vec<Activation>,
    /// Steps of hidden-state accumulation before outputs are usable.
    #[serde(default)]
    pub warmup: usize,
    /// Trailing exogenous columns of the input; they are not lags.
    #[serde(default)]
    pub exog_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    InputWeight,
    RecurrentWeight,
    Bias,
}

/// Location of one entry of the flat parameter vector. `layer` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamIndex {
    pub layer: usize,
    pub kind: ParamKind,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerBlock {
    rows: usize,
    cols: usize,
    w: usize,
    v: Option<usize>,
    b: usize,
}

impl NetworkSpec {
    pub fn mlp(widths: Vec<usize>, activations: Vec<Activation>) -> Self {
        Self { kind: NetworkKind::Mlp, layer_widths: widths, activations, warmup: 0, exog_dim: 0 }
    }

    pub fn elman(widths: Vec<usize>, activations: Vec<Activation>, warmup: usize) -> Self {
        Self { kind: NetworkKind::ElmanRnn, layer_widths: widths, activations, warmup, exog_dim: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.layer_widths;
        if w.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output widths".into()));
        }
        if w.contains(&0) {
            return Err(Error::InvalidArgument(format!("layer widths must be >= 1: {w:?}")));
        }
        if self.activations.len() != w.len() - 2 {
            return Err(Error::InvalidArgument(format!(
                "{} activations for {} hidden layers",
                self.activations.len(),
                w.len() - 2
            )));
        }
        if self.exog_dim >= w[0] {
            return Err(Error::InvalidArgument("exogenous columns leave no lag inputs".into()));
        }
        if self.kind == NetworkKind::ElmanRnn {
            match self.activations.first() {
                None => {
                    return Err(Error::InvalidArgument("an Elman RNN needs a hidden layer".into()))
                }
                Some(a) if !a.is_bounded() => {
                    return Err(Error::InvalidArgument(
                        "first hidden activation of an Elman RNN must be bounded".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Number of layers with weights, `H`.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    /// Lag-window size `W`.
    pub fn window(&self) -> usize {
        self.layer_widths[0] - self.exog_dim
    }

    fn is_recurrent(&self, layer: usize) -> bool {
        self.kind == NetworkKind::ElmanRnn && layer < self.depth()
    }

    fn blocks(&self) -> Vec<LayerBlock> {
        let mut off = 0;
        (1..=self.depth())
            .map(|h| {
                let rows = self.layer_widths[h];
                let cols = self.layer_widths[h - 1];
                let w = off;
                off += rows * cols;
                let v = self.is_recurrent(h).then(|| {
                    let v = off;
                    off += rows * rows;
                    v
                });
                let b = off;
                off += rows;
                LayerBlock { rows, cols, w, v, b }
            })
            .collect()
    }

    /// Total parameter count `K_n`.
    pub fn num_params(&self) -> usize {
        (1..=self.depth())
            .map(|h| {
                let (r, c) = (self.layer_widths[h], self.layer_widths[h - 1]);
                r * c + r + if self.is_recurrent(h) { r * r } else { 0 }
            })
            .sum()
    }

    /// Location of every entry of the flat parameter vector.
    pub fn index_map(&self) -> Vec<ParamIndex> {
        let mut out = Vec::with_capacity(self.num_params());
        for (h, blk) in self.blocks().iter().enumerate() {
            let layer = h + 1;
            for row in 0..blk.rows {
                for col in 0..blk.cols {
                    out.push(ParamIndex { layer, kind: ParamKind::InputWeight, row, col });
                }
            }
            if blk.v.is_some() {
                for row in 0..blk.rows {
                    for col in 0..blk.rows {
                        out.push(ParamIndex { layer, kind: ParamKind::RecurrentWeight, row, col });
                    }
                }
            }
            for row in 0..blk.rows {
                out.push(ParamIndex { layer, kind: ParamKind::Bias, row, col: 0 });
            }
        }
        out
    }

    /// Flat-vector ranges of the recurrent blocks.
    pub fn recurrent_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.blocks()
            .iter()
            .filter_map(|b| b.v.map(|v| v..v + b.rows * b.rows))
            .collect()
    }

    /// Uniform initialization in `+-1/sqrt(fan_in)` per layer, where a
    /// recurrent layer's fan-in includes its own hidden state.
    pub fn init_params(&self, rng: &mut SeededRng) -> ParamVector {
        let mut values = vec![0.0; self.num_params()];
        for blk in self.blocks() {
            let fan_in = blk.cols + if blk.v.is_some() { blk.rows } else { 0 };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[blk.w..blk.b + blk.rows] {
                *v = rng.uniform_range(-bound, bound);
            }
        }
        ParamVector { values }
    }
}

/// Flat vector of all weights and biases, ordered as `NetworkSpec::index_map`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Binary structure indicator aligned with the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StructureMask {
    pub bits: Vec<u8>,
}

impl StructureMask {
    pub fn ones(len: usize) -> Self {
        Self { bits: vec![1; len] }
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    pub fn from_bools(b: impl IntoIterator<Item = bool>) -> Self {
        Self { bits: b.into_iter().map(u8::from).collect() }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.bits[i] != 0
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.bits.len() as f64
    }

    /// Indices of the set bits.
    pub fn active(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.is_set(i)).collect()
    }

    /// Elementwise `params * mask`.
    pub fn apply(&self, params: &[f64]) -> Vec<f64> {
        params
            .iter()
            .zip(&self.bits)
            .map(|(&p, &b)| if b != 0 { p } else { 0.0 })
            .collect()
    }

    /// Zeroes masked entries in place.
    pub fn zero_masked(&self, values: &mut [f64]) {
        for (v, &b) in values.iter_mut().zip(&self.bits) {
            if b == 0 {
                *v = 0.0;
            }
        }
    }
}

/// A forecaster: architecture, parameters and structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamVector,
    pub mask: StructureMask,
}

impl Network {
    pub fn new(spec: NetworkSpec, params: ParamVector, mask: StructureMask) -> Result<Self> {
        spec.validate()?;
        check_lengths(&spec, &params, &mask)?;
        Ok(Self { spec, params, mask })
    }

    /// Dense network with freshly initialized parameters.
    pub fn init(spec: NetworkSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let params = spec.init_params(rng);
        let mask = StructureMask::ones(params.len());
        Ok(Self { spec, params, mask })
    }

    /// Effective parameters with masked entries set to zero.
    pub fn effective_params(&self) -> Vec<f64> {
        self.mask.apply(&self.params.values)
    }

    /// Final-step prediction for one sample.
    pub fn predict(&self, sample: &Sample) -> Result<Vec<f64>> {
        match self.spec.kind {
            NetworkKind::Mlp => {
                let x = sample
                    .steps
                    .last()
                    .ok_or_else(|| Error::InvalidArgument("sample has no input steps".into()))?;
                mlp_forward(&self.spec, &self.params, &self.mask, x)
            }
            NetworkKind::ElmanRnn => {
                let outs = rnn_forward(&self.spec, &self.params, &self.mask, &sample.steps)?;
                Ok(outs.into_iter().last().expect("window is non-empty").output)
            }
        }
    }

    pub fn predict_all(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let out = build_outputs(&mut tape, &self.spec, samples)?;
        tape.evaluate_flat(&self.effective_params())?;
        let vals = tape.value(out)?;
        let b = samples.len();
        Ok((0..b)
            .map(|j| (0..self.spec.output_dim()).map(|r| vals[r * b + j]).collect())
            .collect())
    }
}

fn check_lengths(spec: &NetworkSpec, params: &ParamVector, mask: &StructureMask) -> Result<()> {
    let k = spec.num_params();
    if params.len() != k {
        return Err(Error::Shape(format!("{} parameters for a network with K = {k}", params.len())));
    }
    if mask.len() != k {
        return Err(Error::Shape(format!("mask of length {} for K = {k}", mask.len())));
    }
    Ok(())
}

/// One recurrent step's output.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub output: Vec<f64>,
    /// False for steps inside the warm-up period.
    pub usable: bool,
}

fn affine(
    beta: &[f64],
    blk: &LayerBlock,
    input: &[f64],
    prev: Option<&[f64]>,
) -> Vec<f64> {
    (0..blk.rows)
        .map(|r| {
            let w = &beta[blk.w + r * blk.cols..blk.w + (r + 1) * blk.cols];
            let mut s: f64 = w.iter().zip(input).map(|(a, b)| a * b).sum();
            if let (Some(v0), Some(z)) = (blk.v, prev) {
                let v = &beta[v0 + r * blk.rows..v0 + (r + 1) * blk.rows];
                s += v.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
            }
            s + beta[blk.b + r]
        })
        .collect()
}

/// Runs the recurrence over `window` and returns every step's output.
pub fn rnn_forward(
    spec: &NetworkSpec,
    params: &ParamVector,
    mask: &StructureMask,
    window: &[Vec<f64>],
) -> Result<Vec<StepOutput>> {
    spec.validate()?;
    check_lengths(spec, params, mask)?;
    if spec.kind != NetworkKind::ElmanRnn {
        return Err(Error::InvalidArgument("rnn_forward needs an Elman RNN spec".into()));
    }
    if window.len() < spec.warmup + 1 {
        return Err(Error::InvalidArgument(format!(
            "window of length {} is shorter than warmup + 1 = {}",
            window.len(),
            spec.warmup + 1
        )));
    }
    let beta = mask.apply(&params.values);
    let blocks = spec.blocks();
    let h_n = spec.depth();
    let mut hidden: Vec<Vec<f64>> = (1..h_n).map(|h| vec![0.0; spec.layer_widths[h]]).collect();
    let mut outs = Vec::with_capacity(window.len());
    for (t, x) in window.iter().enumerate() {
        check_input(spec, x)?;
        let mut below = x.clone();
        for h in 0..h_n - 1 {
            let pre = affine(&beta, &blocks[h], &below, Some(&hidden[h]));
            let act = spec.activations[h];
            hidden[h] = pre.into_iter().map(|v| act.apply(v)).collect();
            below = hidden[h].clone();
        }
        let output = affine(&beta, &blocks[h_n - 1], &below, None);
        outs.push(StepOutput { output, usable: t >= spec.warmup });
    }
    Ok(outs)
}

fn check_input(spec: &NetworkSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input of length {} for input width {}",
            x.len(),
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Feed-forward evaluation on one lag vector.
pub fn mlp_forward(
    spec: &NetworkSpec,
    params: &ParamVector,
    mask: &StructureMask,
    input: &[f64],
) -> Result<Vec<f64>> {
    spec.validate()?;
    check_lengths(spec, params, mask)?;
    if spec.kind != NetworkKind::Mlp {
        return Err(Error::InvalidArgument("mlp_forward needs an MLP spec".into()));
    }
    check_input(spec, input)?;
    let beta = mask.apply(&params.values);
    let blocks = spec.blocks();
    let mut z = input.to_vec();
    for (h, blk) in blocks.iter().enumerate() {
        let pre = affine(&beta, blk, &z, None);
        z = match spec.activations.get(h) {
            Some(act) => pre.into_iter().map(|v| act.apply(v)).collect(),
            None => pre,
        };
    }
    Ok(z)
}

/// Declares the parameter slots of `spec` on `tape` (in flat-vector order)
/// and builds the batched final-step output node (`m x B`).
pub fn build_outputs(tape: &mut Tape, spec: &NetworkSpec, samples: &[Sample]) -> Result<NodeId> {
    spec.validate()?;
    let b = samples.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let steps = samples[0].steps.len();
    if steps == 0 || samples.iter().any(|s| s.steps.len() != steps) {
        return Err(Error::Shape("batch windows must share a non-zero length".into()));
    }
    if spec.kind == NetworkKind::ElmanRnn && steps < spec.warmup + 1 {
        return Err(Error::InvalidArgument(format!(
            "window of length {steps} is shorter than warmup + 1"
        )));
    }
    let blocks = spec.blocks();
    let mut slots = Vec::with_capacity(blocks.len());
    for blk in &blocks {
        let w = tape.param(&[blk.rows, blk.cols]);
        let v = blk.v.map(|_| tape.param(&[blk.rows, blk.rows]));
        let bias = tape.param(&[blk.rows]);
        slots.push((w, v, bias));
    }
    let l0 = spec.input_dim();
    let input_at = |tape: &mut Tape, t: usize| -> Result<NodeId> {
        let mut data = vec![0.0; l0 * b];
        for (j, s) in samples.iter().enumerate() {
            let x = &s.steps[t];
            check_input(spec, x)?;
            for (r, v) in x.iter().enumerate() {
                data[r * b + j] = *v;
            }
        }
        Ok(tape.constant(Tensor::matrix(l0, b, data)?))
    };
    let h_n = blocks.len();
    let head = |tape: &mut Tape, z: NodeId| -> Result<NodeId> {
        let (w, _, bias) = slots[h_n - 1];
        let o = tape.matmul(w, z)?;
        tape.add_bias(o, bias)
    };
    match spec.kind {
        NetworkKind::Mlp => {
            let mut z = input_at(tape, steps - 1)?;
            for h in 0..h_n - 1 {
                let (w, _, bias) = slots[h];
                let a = tape.matmul(w, z)?;
                let a = tape.add_bias(a, bias)?;
                z = spec.activations[h].on_tape(tape, a)?;
            }
            head(tape, z)
        }
        NetworkKind::ElmanRnn => {
            let mut hidden: Vec<Option<NodeId>> = vec![None; h_n - 1];
            let mut top = None;
            for t in 0..steps {
                let mut z = input_at(tape, t)?;
                for h in 0..h_n - 1 {
                    let (w, v, bias) = slots[h];
                    let mut a = tape.matmul(w, z)?;
                    if let Some(prev) = hidden[h] {
                        let r = tape.matmul(v.expect("recurrent layer"), prev)?;
                        a = tape.add(a, r)?;
                    }
                    let a = tape.add_bias(a, bias)?;
                    z = spec.activations[h].on_tape(tape, a)?;
                    hidden[h] = Some(z);
                }
                top = Some(z);
            }
            head(tape, top.expect("at least one step"))
        }
    }
}

/// Number of active recurrent (hidden-to-hidden) connections.
pub fn count_hidden_links(mask: &StructureMask, spec: &NetworkSpec) -> Result<usize> {
    if spec.kind != NetworkKind::ElmanRnn {
        return Err(Error::InvalidArgument("hidden links are only defined for an Elman RNN".into()));
    }
    if mask.len() != spec.num_params() {
        return Err(Error::Shape("mask length does not match the spec".into()));
    }
    Ok(spec
        .recurrent_ranges()
        .into_iter()
        .map(|r| mask.bits[r].iter().filter(|&&b| b != 0).count())
        .sum())
}

/// Lags `j in 1..=W` with at least one active first-layer input weight.
pub fn selected_input_lags(mask: &StructureMask, spec: &NetworkSpec) -> Result<BTreeSet<usize>> {
    if mask.len() != spec.num_params() {
        return Err(Error::Shape("mask length does not match the spec".into()));
    }
    let blk = spec.blocks()[0];
    let w = spec.window();
    let mut lags = BTreeSet::new();
    for r in 0..blk.rows {
        for c in 0..w {
            if mask.is_set(blk.w + r * blk.cols + c) {
                lags.insert(c + 1);
            }
        }
    }
    Ok(lags)
}

/// AR-order estimate: the largest selected lag, 0 when none.
pub fn ar_order(lags: &BTreeSet<usize>) -> usize {
    lags.iter().next_back().copied().unwrap_or(0)
}

/// Observed and bounding sums of absolute layer outputs at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerBound {
    pub layer: usize,
    pub observed: f64,
    pub bound: f64,
}

/// Sums of absolute outputs of every layer at step `t` (1-based), next to
/// the bound `t^i (prod r_w)(prod r_v)^(t-1) E^(t i)` (hidden layers) and
/// `t^H (prod r_w)(prod r_v)^(t-1) E^(t(H-1)+1)` (output layer). Biases
/// count as connection weights of their layer; `E` is the largest active
/// absolute weight.
pub fn lemma_output_bound(
    spec: &NetworkSpec,
    params: &ParamVector,
    mask: &StructureMask,
    window: &[Vec<f64>],
    t: usize,
) -> Result<Vec<LayerBound>> {
    spec.validate()?;
    check_lengths(spec, params, mask)?;
    if spec.kind != NetworkKind::ElmanRnn {
        return Err(Error::InvalidArgument("the output bound is stated for an Elman RNN".into()));
    }
    if t == 0 || t > window.len() {
        return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", window.len())));
    }
    let beta = mask.apply(&params.values);
    let e_n = beta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let blocks = spec.blocks();
    let h_n = spec.depth();
    let count = |r: std::ops::Range<usize>| beta[r].iter().filter(|v| **v != 0.0).count() as f64;
    let r_w: Vec<f64> = blocks
        .iter()
        .map(|b| count(b.w..b.w + b.rows * b.cols) + count(b.b..b.b + b.rows))
        .collect();
    let r_v: Vec<f64> = blocks
        .iter()
        .map(|b| b.v.map_or(0.0, |v| count(v..v + b.rows * b.rows)))
        .collect();

    let mut hidden: Vec<Vec<f64>> = (1..h_n).map(|h| vec![0.0; spec.layer_widths[h]]).collect();
    let mut sums = vec![0.0; h_n];
    for x in &window[..t] {
        check_input(spec, x)?;
        let mut below = x.clone();
        for h in 0..h_n - 1 {
            let pre = affine(&beta, &blocks[h], &below, Some(&hidden[h]));
            hidden[h] = pre.into_iter().map(|v| spec.activations[h].apply(v)).collect();
            below = hidden[h].clone();
            sums[h] = below.iter().map(|v| v.abs()).sum();
        }
        sums[h_n - 1] = affine(&beta, &blocks[h_n - 1], &below, None).iter().map(|v| v.abs()).sum();
    }
    let tf = t as f64;
    Ok((1..=h_n)
        .map(|i| {
            let prod_w: f64 = r_w[..i].iter().product();
            let bound = if i < h_n {
                let prod_v: f64 = r_v[..i].iter().product();
                tf.powi(i as i32) * prod_w * prod_v.powi(t as i32 - 1) * e_n.powi((t * i) as i32)
            } else {
                let prod_v: f64 = r_v[..h_n - 1].iter().product();
                tf.powi(h_n as i32)
                    * prod_w
                    * prod_v.powi(t as i32 - 1)
                    * e_n.powi((t * (h_n - 1) + 1) as i32)
            };
            LayerBound { layer: i, observed: sums[i - 1], bound }
        })
        .collect())
}

/// Training metadata stored next to a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    #[serde(default)]
    pub seed: u64,
    /// Recurrent steps per training window.
    #[serde(default)]
    pub m_l: usize,
    #[serde(default)]
    pub n_train: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<crate::data::Standardization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

/// Model checkpoint document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamVector,
    pub mask: StructureMask,
    #[serde(default)]
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn from_network(net: &Network, meta: TrainingMeta) -> Self {
        Self { spec: net.spec.clone(), params: net.params.clone(), mask: net.mask.clone(), meta }
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(self.spec.clone(), self.params.clone(), self.mask.clone())
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ck.network()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;

    fn rand_params(spec: &NetworkSpec, rng: &mut SeededRng, scale: f64) -> ParamVector {
        ParamVector {
            values: (0..spec.num_params()).map(|_| rng.uniform_range(-scale, scale)).collect(),
        }
    }

    fn rand_mask(len: usize, rng: &mut SeededRng, keep: f64) -> StructureMask {
        StructureMask::from_bools((0..len).map(|_| rng.uniform() < keep))
    }

    fn rand_window(len: usize, dim: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        (0..len).map(|_| (0..dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).collect()
    }

    #[test]
    fn param_count_matches_formula() {
        let s = NetworkSpec::elman(vec![3, 5, 4, 2], vec![Activation::Tanh, Activation::Relu], 0);
        assert_eq!(s.num_params(), 5 * 3 + 25 + 5 + 4 * 5 + 16 + 4 + 2 * 4 + 2);
        assert_eq!(s.index_map().len(), s.num_params());
        let m = NetworkSpec::mlp(vec![3, 5, 2], vec![Activation::Tanh]);
        assert_eq!(m.num_params(), 15 + 5 + 10 + 2);
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::elman(vec![1, 4, 1], vec![Activation::Relu], 0).validate().is_err());
        assert!(NetworkSpec::elman(vec![1, 1], vec![], 0).validate().is_err());
        assert!(NetworkSpec::mlp(vec![1, 0, 1], vec![Activation::Tanh]).validate().is_err());
        assert!(NetworkSpec::mlp(vec![2, 3, 1], vec![]).validate().is_err());
        assert!(NetworkSpec::mlp(vec![1, 1], vec![]).validate().is_ok());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let s = NetworkSpec::elman(vec![2, 4, 1], vec![Activation::Tanh], 1);
        let p = ParamVector::zeros(s.num_params());
        let m = StructureMask::ones(s.num_params());
        let mut rng = SeededRng::new(1);
        let outs = rnn_forward(&s, &p, &m, &rand_window(4, 2, &mut rng)).unwrap();
        assert!(outs.iter().all(|o| o.output == vec![0.0]));
        assert!(!outs[0].usable && outs[1].usable);
        let ms = NetworkSpec::mlp(vec![3, 4, 1], vec![Activation::Tanh]);
        let out = mlp_forward(&ms, &ParamVector::zeros(ms.num_params()), &StructureMask::ones(ms.num_params()), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn forward_errors() {
        let s = NetworkSpec::elman(vec![2, 4, 1], vec![Activation::Tanh], 3);
        let p = ParamVector::zeros(s.num_params());
        let m = StructureMask::ones(s.num_params());
        assert!(rnn_forward(&s, &p, &m, &vec![vec![0.0; 2]; 3]).is_err());
        assert!(rnn_forward(&s, &p, &StructureMask::ones(3), &vec![vec![0.0; 2]; 4]).is_err());
        assert!(rnn_forward(&s, &ParamVector::zeros(2), &m, &vec![vec![0.0; 2]; 4]).is_err());
        assert!(rnn_forward(&s, &p, &m, &vec![vec![0.0; 3]; 4]).is_err());
    }

    #[test]
    fn warmup_m_minus_one_gives_single_usable_output() {
        let s = NetworkSpec::elman(vec![1, 3, 1], vec![Activation::Tanh], 4);
        let mut rng = SeededRng::new(2);
        let p = rand_params(&s, &mut rng, 0.5);
        let outs = rnn_forward(&s, &p, &StructureMask::ones(s.num_params()), &rand_window(5, 1, &mut rng)).unwrap();
        assert_eq!(outs.iter().filter(|o| o.usable).count(), 1);
    }

    /// Hand-unrolled Elman evaluator for two hidden layers, written without
    /// loops over layers or the index map.
    fn unrolled_two_layer(
        beta: &[f64],
        l0: usize,
        l1: usize,
        l2: usize,
        window: &[Vec<f64>],
    ) -> f64 {
        let mut o = 0;
        let w1 = &beta[o..o + l1 * l0];
        o += l1 * l0;
        let v1 = &beta[o..o + l1 * l1];
        o += l1 * l1;
        let b1 = &beta[o..o + l1];
        o += l1;
        let w2 = &beta[o..o + l2 * l1];
        o += l2 * l1;
        let v2 = &beta[o..o + l2 * l2];
        o += l2 * l2;
        let b2 = &beta[o..o + l2];
        o += l2;
        let w3 = &beta[o..o + l2];
        o += l2;
        let b3 = beta[o];
        let mut z1 = vec![0.0; l1];
        let mut z2 = vec![0.0; l2];
        let mut out = 0.0;
        for x in window {
            let mut n1 = vec![0.0; l1];
            for i in 0..l1 {
                let mut s = b1[i];
                for k in 0..l0 {
                    s += w1[i * l0 + k] * x[k];
                }
                for k in 0..l1 {
                    s += v1[i * l1 + k] * z1[k];
                }
                n1[i] = s.tanh();
            }
            let mut n2 = vec![0.0; l2];
            for i in 0..l2 {
                let mut s = b2[i];
                for k in 0..l1 {
                    s += w2[i * l1 + k] * n1[k];
                }
                for k in 0..l2 {
                    s += v2[i * l2 + k] * z2[k];
                }
                n2[i] = s.max(0.0);
            }
            z1 = n1;
            z2 = n2;
            out = b3 + (0..l2).map(|k| w3[k] * z2[k]).sum::<f64>();
        }
        out
    }

    #[test]
    fn rnn_matches_unrolled_oracle() {
        let mut rng = SeededRng::new(11);
        for _ in 0..20 {
            let (l0, l1, l2) = (3, 5, 4);
            let s = NetworkSpec::elman(vec![l0, l1, l2, 1], vec![Activation::Tanh, Activation::Relu], 5);
            let p = rand_params(&s, &mut rng, 0.8);
            let m = rand_mask(s.num_params(), &mut rng, 0.6);
            let win = rand_window(6, l0, &mut rng);
            let got = rnn_forward(&s, &p, &m, &win).unwrap().last().unwrap().output[0];
            let want = unrolled_two_layer(&m.apply(&p.values), l0, l1, l2, &win);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            // the batched tape path agrees too
            let net = Network::new(s, p, m).unwrap();
            let sample = Sample { steps: win, target: vec![0.0], index: 0 };
            let batched = net.predict_all(&[sample.clone(), sample]).unwrap();
            assert!((batched[1][0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_mask_and_idempotence() {
        let mut rng = SeededRng::new(5);
        let s = NetworkSpec::elman(vec![2, 6, 1], vec![Activation::Sigmoid], 0);
        let p = rand_params(&s, &mut rng, 1.0);
        let win = rand_window(4, 2, &mut rng);
        let ones = StructureMask::ones(s.num_params());
        let a = rnn_forward(&s, &p, &ones, &win).unwrap();
        let masked = ParamVector { values: ones.apply(&p.values) };
        let b = rnn_forward(&s, &masked, &ones, &win).unwrap();
        assert_eq!(a, b);
        let m = rand_mask(s.num_params(), &mut rng, 0.5);
        let once = ParamVector { values: m.apply(&p.values) };
        let c = rnn_forward(&s, &p, &m, &win).unwrap();
        let d = rnn_forward(&s, &once, &m, &win).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn mlp_hand_evaluation() {
        // one hidden ReLU unit with positive pre-activation, then a linear head
        let s = NetworkSpec::mlp(vec![2, 1, 1], vec![Activation::Relu]);
        let p = ParamVector { values: vec![0.5, 2.0, 0.25, 3.0, -1.0] };
        let out = mlp_forward(&s, &p, &StructureMask::ones(5), &[1.0, 1.5]).unwrap();
        let hidden: f64 = 0.5 * 1.0 + 2.0 * 1.5 + 0.25;
        assert_eq!(out, vec![3.0 * hidden - 1.0]);
    }

    #[test]
    fn masking_a_neuron_equals_deleting_it() {
        let mut rng = SeededRng::new(8);
        let wide = NetworkSpec::mlp(vec![3, 4, 1], vec![Activation::Tanh]);
        let p = rand_params(&wide, &mut rng, 1.0);
        // drop hidden neuron 2: its input row, its bias, its output weight
        let mut mask = StructureMask::ones(wide.num_params());
        for c in 0..3 {
            mask.bits[2 * 3 + c] = 0;
        }
        mask.bits[12 + 2] = 0;
        mask.bits[16 + 2] = 0;
        let narrow = NetworkSpec::mlp(vec![3, 3, 1], vec![Activation::Tanh]);
        let keep = [0usize, 1, 3];
        let mut q = Vec::new();
        for &r in &keep {
            q.extend_from_slice(&p.values[r * 3..r * 3 + 3]);
        }
        for &r in &keep {
            q.push(p.values[12 + r]);
        }
        for &r in &keep {
            q.push(p.values[16 + r]);
        }
        q.push(p.values[20]);
        let x = [0.2, -0.7, 1.3];
        let a = mlp_forward(&wide, &p, &mask, &x).unwrap()[0];
        let b = mlp_forward(&narrow, &ParamVector { values: q }, &StructureMask::ones(16), &x).unwrap()[0];
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn hidden_link_counting() {
        let s = NetworkSpec::elman(vec![2, 7, 1], vec![Activation::Tanh], 0);
        let k = s.num_params();
        assert_eq!(count_hidden_links(&StructureMask::zeros(k), &s).unwrap(), 0);
        assert_eq!(count_hidden_links(&StructureMask::ones(k), &s).unwrap(), 49);
        let mut rng = SeededRng::new(3);
        for _ in 0..10 {
            let m = rand_mask(k, &mut rng, 0.3);
            let brute = s
                .index_map()
                .iter()
                .zip(&m.bits)
                .filter(|(ix, b)| ix.kind == ParamKind::RecurrentWeight && **b == 1)
                .count();
            assert_eq!(count_hidden_links(&m, &s).unwrap(), brute);
        }
        let mlp = NetworkSpec::mlp(vec![2, 3, 1], vec![Activation::Tanh]);
        assert!(count_hidden_links(&StructureMask::ones(mlp.num_params()), &mlp).is_err());
    }

    #[test]
    fn lag_selection() {
        let mut s = NetworkSpec::elman(vec![6, 4, 1], vec![Activation::Tanh], 0);
        s.exog_dim = 1;
        let k = s.num_params();
        assert!(selected_input_lags(&StructureMask::zeros(k), &s).unwrap().is_empty());
        assert_eq!(ar_order(&BTreeSet::new()), 0);
        let mut m = StructureMask::zeros(k);
        m.bits[3 * 6 + 2] = 1; // row 3, column 2 -> lag 3
        assert_eq!(selected_input_lags(&m, &s).unwrap(), BTreeSet::from([3]));
        m.bits[5] = 1; // exogenous column, not a lag
        assert_eq!(selected_input_lags(&m, &s).unwrap(), BTreeSet::from([3]));
        let mut rng = SeededRng::new(4);
        for _ in 0..10 {
            let m = rand_mask(k, &mut rng, 0.1);
            let brute: BTreeSet<usize> = s
                .index_map()
                .iter()
                .zip(&m.bits)
                .filter(|(ix, b)| {
                    ix.layer == 1 && ix.kind == ParamKind::InputWeight && ix.col < 5 && **b == 1
                })
                .map(|(ix, _)| ix.col + 1)
                .collect();
            assert_eq!(selected_input_lags(&m, &s).unwrap(), brute);
        }
    }

    #[test]
    fn lemma_bound_zero_and_first_step() {
        let s = NetworkSpec::elman(vec![2, 3, 1], vec![Activation::Tanh], 0);
        let k = s.num_params();
        let win = vec![vec![0.5, -0.5]; 3];
        let zero = lemma_output_bound(&s, &ParamVector::zeros(k), &StructureMask::ones(k), &win, 2).unwrap();
        assert!(zero.iter().all(|b| b.observed == 0.0));
        let mut rng = SeededRng::new(9);
        let p = rand_params(&s, &mut rng, 1.5);
        let m = StructureMask::ones(k);
        let b = lemma_output_bound(&s, &p, &m, &win, 1).unwrap();
        let e = m.apply(&p.values).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // 3x2 input weights plus 3 biases in the first layer
        assert!((b[0].bound - e * 9.0).abs() < 1e-12);
        assert!(b.iter().all(|l| l.observed <= l.bound));
    }

    #[test]
    fn permuting_hidden_neurons_preserves_outputs() {
        let mut rng = SeededRng::new(12);
        let (l0, l1) = (2, 5);
        let s = NetworkSpec::elman(vec![l0, l1, 1], vec![Activation::Tanh], 0);
        let p = rand_params(&s, &mut rng, 0.9);
        let perm = [3usize, 0, 4, 1, 2];
        let mut q = p.values.clone();
        let (w1, v1, b1, w2) = (0, l1 * l0, l1 * l0 + l1 * l1, l1 * l0 + l1 * l1 + l1);
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..l0 {
                q[w1 + new * l0 + c] = p.values[w1 + old * l0 + c];
            }
            for (newc, &oldc) in perm.iter().enumerate() {
                q[v1 + new * l1 + newc] = p.values[v1 + old * l1 + oldc];
            }
            q[b1 + new] = p.values[b1 + old];
            q[w2 + new] = p.values[w2 + old];
        }
        let win = rand_window(5, l0, &mut rng);
        let ones = StructureMask::ones(s.num_params());
        let a = rnn_forward(&s, &p, &ones, &win).unwrap();
        let b = rnn_forward(&s, &ParamVector { values: q }, &ones, &win).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.output[0] - y.output[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_gradient_of_network_output() {
        let mut rng = SeededRng::new(21);
        let s = NetworkSpec::elman(vec![2, 4, 2], vec![Activation::Tanh], 0);
        let p = rand_params(&s, &mut rng, 0.7);
        let samples: Vec<Sample> = (0..3)
            .map(|i| Sample { steps: rand_window(3, 2, &mut rng), target: vec![0.0, 0.0], index: i })
            .collect();
        let mut tape = Tape::new();
        let out = build_outputs(&mut tape, &s, &samples).unwrap();
        let sq = tape.square(out).unwrap();
        tape.sum(sq).unwrap();
        let r = check_gradient(&mut tape, &p.values, 1e-5, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = SeededRng::new(1);
        let net = Network::init(NetworkSpec::elman(vec![1, 3, 1], vec![Activation::Tanh], 1), &mut rng).unwrap();
        let ck = Checkpoint::from_network(&net, TrainingMeta { seed: 4, m_l: 2, ..Default::default() });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["mask"].as_array().unwrap().len(), net.spec.num_params());
        assert_eq!(v["params"].as_array().unwrap().len(), net.spec.num_params());
    }
}
