//! A small multilayer classifier trained with sharpness-aware minimization in
//! two stages: head only, then the whole network.
//!
//! The backbone is a stack of affine + ReLU layers; the head is one affine
//! layer followed by softmax. Training is single-threaded and fully
//! determined by the configured seed. Cross-validation folds run in
//! parallel, each with its own generator.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmotionLabel, FoldPlan, Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::imagebuf::{resize_bilinear, ImageBuffer};
use crate::pipeline::Condition;

/// Affine layer; `weights` is row-major with `rows` outputs and `cols` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            biases: vec![0.0; rows],
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            rows,
            cols,
            weights: (0..rows * cols)
                .map(|_| rng.random_range(-limit..=limit))
                .collect(),
            biases: vec![0.0; rows],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.biases
                .iter()
                .zip(self.weights.chunks_exact(self.cols))
                .map(|(b, row)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.biases)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub backbone: Vec<Dense>,
    pub head: Dense,
}

/// Which parameters a gradient or update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    HeadOnly,
    All,
}

impl ModelParams {
    pub fn new(backbone: Vec<Dense>, head: Dense) -> Result<Self> {
        let mut width = backbone.first().map_or(head.cols, |l| l.cols);
        for layer in backbone.iter().chain(std::iter::once(&head)) {
            if layer.cols != width
                || layer.weights.len() != layer.rows * layer.cols
                || layer.biases.len() != layer.rows
            {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    actual: layer.cols,
                });
            }
            width = layer.rows;
        }
        let params = Self { backbone, head };
        if !params.is_finite() {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        Ok(params)
    }

    pub fn init(input_dim: usize, hidden: &[usize], classes: usize, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut backbone = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            backbone.push(Dense::glorot(h, width, &mut rng));
            width = h;
        }
        let head = Dense::glorot(classes, width, &mut rng);
        Self { backbone, head }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self
                .backbone
                .iter()
                .map(|l| Dense::zeros(l.rows, l.cols))
                .collect(),
            head: Dense::zeros(self.head.rows, self.head.cols),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.first().map_or(self.head.cols, |l| l.cols)
    }

    pub fn num_classes(&self) -> usize {
        self.head.rows
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone.iter().chain(std::iter::once(&self.head))
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(|l| l.values().all(|v| v.is_finite()))
    }

    pub fn flatten(&self, scope: Scope) -> Vec<f64> {
        match scope {
            Scope::HeadOnly => self.head.values().copied().collect(),
            Scope::All => self.layers().flat_map(|l| l.values().copied()).collect(),
        }
    }

    /// Writes `values` (in [`Self::flatten`] order) back into the parameters.
    pub fn assign_flat(&mut self, scope: Scope, values: &[f64]) {
        let mut it = values.iter();
        let mut fill = |layer: &mut Dense| {
            for (dst, src) in layer.values_mut().zip(&mut it) {
                *dst = *src;
            }
        };
        if scope == Scope::All {
            self.backbone.iter_mut().for_each(&mut fill);
        }
        fill(&mut self.head);
    }

    /// Bytes of the backbone parameters, for freeze checks.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        self.backbone
            .iter()
            .flat_map(|l| l.values().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    const MAGIC: &'static [u8; 4] = b"FPMD";
    const VERSION: u32 = 1;

    /// Binary layout, little-endian: magic `FPMD`, version `u32`, layer count
    /// `u32`, then per layer `rows u32`, `cols u32`, row-major `f64` weights
    /// and `f64` biases. The last layer is the head.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.backbone.len() as u32 + 1).to_le_bytes())?;
        for layer in self.layers() {
            w.write_all(&(layer.rows as u32).to_le_bytes())?;
            w.write_all(&(layer.cols as u32).to_le_bytes())?;
            for v in layer.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        let mut buf4 = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut buf4).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(buf4))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        if count == 0 {
            return Err(bad("no layers"));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut layer = Dense::zeros(rows, cols);
            let mut buf8 = [0u8; 8];
            for v in layer.values_mut() {
                r.read_exact(&mut buf8).map_err(|_| bad("truncated"))?;
                *v = f64::from_le_bytes(buf8);
            }
            layers.push(layer);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|_| bad("read failed"))? != 0 {
            return Err(bad("trailing bytes"));
        }
        let head = layers.pop().expect("count > 0");
        Self::new(layers, head)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)
            .expect("writing to a Vec cannot fail");
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

/// Flattened image, channel values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(
                "feature values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self(values))
    }

    /// Resizes to `edge x edge` and scales samples by 1/255.
    pub fn from_image(img: &ImageBuffer, edge: u32) -> Result<Self> {
        let resized = resize_bilinear(img, edge, edge)?;
        Ok(Self(
            resized.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        ))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureVector,
    /// Index into the model's class list.
    pub class: usize,
}

fn check_dim(params: &ModelParams, x: &[f64]) -> Result<()> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    Ok(())
}

/// Post-activation output of every backbone layer, plus the logits.
struct Activations {
    hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn run_layers(params: &ModelParams, x: &[f64]) -> Activations {
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(params.backbone.len());
    for layer in &params.backbone {
        let input = hidden.last().map_or(x, |h| h.as_slice());
        let mut out = Vec::with_capacity(layer.rows);
        layer.affine(input, &mut out);
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        hidden.push(out);
    }
    let mut logits = Vec::with_capacity(params.head.rows);
    params
        .head
        .affine(hidden.last().map_or(x, |h| h.as_slice()), &mut logits);
    Activations { hidden, logits }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Class probabilities.
pub fn forward(params: &ModelParams, x: &FeatureVector) -> Result<Vec<f64>> {
    check_dim(params, x.as_slice())?;
    Ok(softmax(&run_layers(params, x.as_slice()).logits))
}

/// Index of the most probable class; ties go to the lower index.
pub fn predict(params: &ModelParams, x: &FeatureVector) -> Result<usize> {
    let probs = forward(params, x)?;
    Ok(argmax(&probs))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_batch(params: &ModelParams, batch: &[&Example], weights: &[f64]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    if weights.len() != params.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: params.num_classes(),
            actual: weights.len(),
        });
    }
    for ex in batch {
        check_dim(params, ex.features.as_slice())?;
        if ex.class >= params.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: params.num_classes(),
                actual: ex.class + 1,
            });
        }
    }
    Ok(())
}

fn weighted_loss(params: &ModelParams, batch: &[&Example], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ex in batch {
        let w = weights[ex.class];
        if w == 0.0 {
            continue;
        }
        let z = run_layers(params, ex.features.as_slice()).logits;
        num += w * (log_sum_exp(&z) - z[ex.class]);
        den += w;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Class-weighted cross-entropy: `sum(w_y * -ln p_y) / sum(w_y)` over the batch.
pub fn loss(params: &ModelParams, batch: &[Example], weights: &[f64]) -> Result<f64> {
    let refs: Vec<&Example> = batch.iter().collect();
    check_batch(params, &refs, weights)?;
    Ok(weighted_loss(params, &refs, weights))
}

fn accumulate_grad(
    params: &ModelParams,
    batch: &[&Example],
    weights: &[f64],
    scope: Scope,
) -> ModelParams {
    let mut g = params.zeros_like();
    let den: f64 = batch.iter().map(|ex| weights[ex.class]).sum();
    if den == 0.0 {
        return g;
    }
    let mut delta_prev = Vec::new();
    for ex in batch {
        let w = weights[ex.class];
        if w == 0.0 {
            continue;
        }
        let scale = w / den;
        let x = ex.features.as_slice();
        let acts = run_layers(params, x);
        let mut delta = softmax(&acts.logits);
        delta[ex.class] -= 1.0;
        delta.iter_mut().for_each(|d| *d *= scale);

        let n_hidden = params.backbone.len();
        for layer_idx in (0..=n_hidden).rev() {
            let (layer, grad) = if layer_idx == n_hidden {
                (&params.head, &mut g.head)
            } else {
                (&params.backbone[layer_idx], &mut g.backbone[layer_idx])
            };
            let input = if layer_idx == 0 {
                x
            } else {
                acts.hidden[layer_idx - 1].as_slice()
            };
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad.biases[r] += d;
                let row = &mut grad.weights[r * layer.cols..(r + 1) * layer.cols];
                for (gw, &a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            let stop = layer_idx == 0 || (scope == Scope::HeadOnly && layer_idx == n_hidden);
            if stop {
                break;
            }
            delta_prev.clear();
            delta_prev.resize(layer.cols, 0.0);
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                for (dp, &wv) in delta_prev.iter_mut().zip(row) {
                    *dp += wv * d;
                }
            }
            // ReLU: pass gradient only where the activation was positive
            for (dp, &a) in delta_prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *dp = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut delta_prev);
        }
    }
    g
}

/// Exact gradient of [`loss`], congruent to `params`.
pub fn grad(params: &ModelParams, batch: &[Example], weights: &[f64]) -> Result<ModelParams> {
    let refs: Vec<&Example> = batch.iter().collect();
    check_batch(params, &refs, weights)?;
    Ok(accumulate_grad(params, &refs, weights, Scope::All))
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Outcome of one sharpness-aware step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamStep {
    /// Euclidean norm of the ascent perturbation.
    pub perturbation_norm: f64,
    pub grad_norm: f64,
}

/// One sharpness-aware minimization step on a flat parameter vector with a
/// plain gradient-descent base rule:
///
/// `g = grad(w)`, `e = rho * g / |g|` (zero when `|g| = 0`),
/// `w <- w - lr * grad(w + e)`.
pub fn sam_step(
    params: &mut [f64],
    rho: f64,
    lr: f64,
    mut grad_fn: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<SamStep> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidConfig(format!("rho must be >= 0, got {rho}")));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    let g = grad_fn(params)?;
    let grad_norm = l2_norm(&g);
    if !grad_norm.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    let mut perturbed = params.to_vec();
    let mut perturbation_norm = 0.0;
    if grad_norm > 0.0 && rho > 0.0 {
        let eps: Vec<f64> = g.iter().map(|gi| rho * gi / grad_norm).collect();
        perturbation_norm = l2_norm(&eps);
        for (p, e) in perturbed.iter_mut().zip(&eps) {
            *p += e;
        }
    }
    let g_sharp = grad_fn(&perturbed)?;
    if g_sharp.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged(
            "non-finite gradient at perturbed point".into(),
        ));
    }
    for (p, gs) in params.iter_mut().zip(&g_sharp) {
        *p -= lr * gs;
    }
    Ok(SamStep {
        perturbation_norm,
        grad_norm,
    })
}

fn sam_update_scoped(
    params: &ModelParams,
    batch: &[&Example],
    weights: &[f64],
    rho: f64,
    lr: f64,
    scope: Scope,
) -> Result<(ModelParams, SamStep)> {
    let mut flat = params.flatten(scope);
    let mut scratch = params.clone();
    let step = sam_step(&mut flat, rho, lr, |w| {
        scratch.assign_flat(scope, w);
        Ok(accumulate_grad(&scratch, batch, weights, scope).flatten(scope))
    })?;
    scratch.assign_flat(scope, &flat);
    Ok((scratch, step))
}

/// Sharpness-aware update of every parameter.
pub fn sam_update(
    params: &ModelParams,
    batch: &[Example],
    weights: &[f64],
    rho: f64,
    lr: f64,
) -> Result<(ModelParams, SamStep)> {
    let refs: Vec<&Example> = batch.iter().collect();
    check_batch(params, &refs, weights)?;
    sam_update_scoped(params, &refs, weights, rho, lr, Scope::All)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    InverseFrequency,
}

impl std::str::FromStr for ClassWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(ClassWeighting::None),
            "inverse_frequency" | "inverse" => Ok(ClassWeighting::InverseFrequency),
            other => Err(Error::InvalidConfig(format!("unknown weighting {other:?}"))),
        }
    }
}

/// Per-class loss weights. Inverse frequency uses `N / (K * n_c)`; classes
/// absent from the data get weight 0.
pub fn class_weights(examples: &[Example], classes: usize, mode: ClassWeighting) -> Vec<f64> {
    match mode {
        ClassWeighting::None => vec![1.0; classes],
        ClassWeighting::InverseFrequency => {
            let mut counts = vec![0usize; classes];
            for ex in examples {
                counts[ex.class] += 1;
            }
            let n = examples.len() as f64;
            counts
                .iter()
                .map(|&c| {
                    if c == 0 {
                        0.0
                    } else {
                        n / (classes as f64 * c as f64)
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage_a_epochs: usize,
    pub stage_b_epochs: usize,
    pub learning_rate: f64,
    pub sam_rho: f64,
    pub class_weighting: ClassWeighting,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Whether early stopping also applies while only the head trains.
    pub early_stop_stage_a: bool,
    pub seed: u64,
    pub input_edge: u32,
    pub hidden_widths: Vec<usize>,
    /// Share of each training split held out per class for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            stage_a_epochs: 20,
            stage_b_epochs: 50,
            learning_rate: 0.05,
            sam_rho: 0.05,
            class_weighting: ClassWeighting::InverseFrequency,
            early_stop_patience: 5,
            early_stop_stage_a: false,
            seed: 0,
            input_edge: 64,
            hidden_widths: vec![128, 64],
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        if !(self.sam_rho >= 0.0 && self.sam_rho.is_finite()) {
            return fail(format!("rho must be >= 0, got {}", self.sam_rho));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.input_edge == 0 {
            return fail("input edge must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!(
                "val fraction must be in [0, 1), got {}",
                self.val_fraction
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_edge as usize * self.input_edge as usize * 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
}

impl Stage {
    pub fn scope(self) -> Scope {
        match self {
            Stage::A => Scope::HeadOnly,
            Stage::B => Scope::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,epoch,train_loss,val_loss,val_accuracy\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.9}"));
        for e in &self.epochs {
            out.push_str(&format!(
                "{:?},{},{:.9},{},{}\n",
                e.stage,
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.val_accuracy)
            ));
        }
        out
    }
}

/// Early-stopping bookkeeping shared by both stages.
struct Tracker {
    best_loss: f64,
    best: Option<ModelParams>,
}

fn evaluate(params: &ModelParams, data: &[&Example], weights: &[f64]) -> (f64, f64) {
    let loss = weighted_loss(params, data, weights);
    let correct = data
        .iter()
        .filter(|ex| argmax(&run_layers(params, ex.features.as_slice()).logits) == ex.class)
        .count();
    (loss, correct as f64 / data.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    params: &mut ModelParams,
    train: &[&Example],
    val: &[&Example],
    weights: &[f64],
    cfg: &TrainConfig,
    stage: Stage,
    rng: &mut Xoshiro256PlusPlus,
    history: &mut TrainHistory,
    tracker: &mut Tracker,
) -> Result<()> {
    let epochs = match stage {
        Stage::A => cfg.stage_a_epochs,
        Stage::B => cfg.stage_b_epochs,
    };
    let stopping = !val.is_empty()
        && cfg.early_stop_patience > 0
        && (stage == Stage::B || cfg.early_stop_stage_a);
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch: Vec<&Example> = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            let (next, _) = sam_update_scoped(
                params,
                &batch,
                weights,
                cfg.sam_rho,
                cfg.learning_rate,
                stage.scope(),
            )?;
            *params = next;
        }
        let train_loss = weighted_loss(params, train, weights);
        if !train_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite training loss in stage {stage:?}, epoch {epoch}"
            )));
        }
        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(params, val, weights);
            (Some(l), Some(a))
        };
        history.epochs.push(EpochRecord {
            stage,
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if let Some(vl) = val_loss {
            if vl < tracker.best_loss {
                tracker.best_loss = vl;
                tracker.best = Some(params.clone());
                stale = 0;
            } else {
                stale += 1;
                if stopping && stale >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    Ok(())
}

/// Trains a single stage from `init`, without best-parameter restoration.
pub fn train_stage(
    init: &ModelParams,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    let train: Vec<&Example> = train.iter().collect();
    let val: Vec<&Example> = val.iter().collect();
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    check_batch(init, &train, &vec![1.0; init.num_classes()])?;
    let owned: Vec<Example> = train.iter().map(|e| (*e).clone()).collect();
    let weights = class_weights(&owned, init.num_classes(), cfg.class_weighting);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let mut history = TrainHistory::default();
    let mut tracker = Tracker {
        best_loss: f64::INFINITY,
        best: None,
    };
    run_stage(
        &mut params,
        &train,
        &val,
        &weights,
        cfg,
        stage,
        &mut rng,
        &mut history,
        &mut tracker,
    )?;
    Ok((params, history))
}

/// Head-only stage followed by a full-network stage. With a non-empty
/// validation set the parameters with the lowest validation loss seen are
/// returned; otherwise the final ones.
pub fn train_two_stage(
    init: &ModelParams,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let train_refs: Vec<&Example> = train.iter().collect();
    let val_refs: Vec<&Example> = val.iter().collect();
    let unit = vec![1.0; init.num_classes()];
    check_batch(init, &train_refs, &unit)?;
    if !val_refs.is_empty() {
        check_batch(init, &val_refs, &unit)?;
    }
    let weights = class_weights(train, init.num_classes(), cfg.class_weighting);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let mut history = TrainHistory::default();
    let mut tracker = Tracker {
        best_loss: f64::INFINITY,
        best: None,
    };
    for stage in [Stage::A, Stage::B] {
        run_stage(
            &mut params,
            &train_refs,
            &val_refs,
            &weights,
            cfg,
            stage,
            &mut rng,
            &mut history,
            &mut tracker,
        )?;
    }
    Ok((tracker.best.unwrap_or(params), history))
}

/// Supplies the normalized image of a record for one face condition.
pub trait ImageSource: Sync {
    fn load(&self, record: &SampleRecord, condition: Condition) -> Result<ImageBuffer>;
}

/// Normalized images on disk, named `<id><suffix>.png`.
#[derive(Debug, Clone)]
pub struct DirImageSource {
    pub dir: std::path::PathBuf,
}

impl ImageSource for DirImageSource {
    fn load(&self, record: &SampleRecord, condition: Condition) -> Result<ImageBuffer> {
        let path = self.dir.join(condition.file_name(&record.id));
        if !path.is_file() {
            return Err(Error::MissingImage {
                id: record.id.clone(),
                path,
            });
        }
        ImageBuffer::load_png(path)
    }
}

/// In-memory images keyed by record id; masking is applied on load.
#[derive(Debug, Clone, Default)]
pub struct MemoryImageSource {
    pub images: BTreeMap<String, ImageBuffer>,
}

impl ImageSource for MemoryImageSource {
    fn load(&self, record: &SampleRecord, condition: Condition) -> Result<ImageBuffer> {
        let img = self
            .images
            .get(&record.id)
            .ok_or_else(|| Error::MissingImage {
                id: record.id.clone(),
                path: "<memory>".into(),
            })?;
        Ok(condition.apply(img))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub classes: Vec<EmotionLabel>,
    /// Record ids in manifest order, aligned with `pairs`.
    pub ids: Vec<String>,
    /// `(predicted, true)` for every record, each predicted by the model of
    /// the fold that held it out.
    pub pairs: Vec<(EmotionLabel, EmotionLabel)>,
    pub histories: Vec<TrainHistory>,
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    seed ^ (stream + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Splits training indices into (fit, validation), holding out
/// `floor(fraction * n_c)` records of every class.
fn holdout(
    examples: &[Example],
    ids: &[&str],
    indices: &[usize],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    if fraction <= 0.0 {
        return (indices.to_vec(), Vec::new());
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(examples[i].class).or_default().push(i);
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut val = Vec::new();
    for (_, mut members) in by_class {
        members.sort_by_key(|&i| ids[i]);
        members.shuffle(&mut rng);
        let take = (fraction * members.len() as f64).floor() as usize;
        val.extend_from_slice(&members[..take]);
    }
    val.sort_unstable();
    let fit = indices
        .iter()
        .copied()
        .filter(|i| val.binary_search(i).is_err())
        .collect();
    (fit, val)
}

/// K-fold cross-validation: for every fold, trains on the remaining folds
/// and predicts the held-out one. All images are loaded before training.
pub fn run_cv(
    m: &Manifest,
    folds: &FoldPlan,
    cfg: &TrainConfig,
    condition: Condition,
    source: &dyn ImageSource,
) -> Result<CvOutcome> {
    cfg.validate()?;
    if m.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    let classes = m.classes();
    let mut examples = Vec::with_capacity(m.len());
    let mut fold_of = Vec::with_capacity(m.len());
    for r in m.records() {
        let label = r.label().ok_or_else(|| {
            Error::InvalidConfig(format!("record {:?} is not single-label", r.id))
        })?;
        let class = classes
            .iter()
            .position(|&c| c == label)
            .ok_or_else(|| Error::UnknownClass(label.to_string()))?;
        let fold = folds.fold_of(&r.id).ok_or_else(|| {
            Error::InvalidConfig(format!("record {:?} is missing from the fold plan", r.id))
        })?;
        fold_of.push(fold);
        let img = source.load(r, condition)?;
        examples.push(Example {
            features: FeatureVector::from_image(&img, cfg.input_edge)?,
            class,
        });
    }
    let ids: Vec<&str> = m.records().iter().map(|r| r.id.as_str()).collect();

    type FoldResult = Result<(Vec<(usize, usize)>, TrainHistory)>;
    let per_fold: Vec<FoldResult> = (0..folds.k)
        .into_par_iter()
        .map(|fold| {
            let test: Vec<usize> = (0..examples.len())
                .filter(|&i| fold_of[i] == fold)
                .collect();
            if test.is_empty() {
                return Ok((Vec::new(), TrainHistory::default()));
            }
            let rest: Vec<usize> = (0..examples.len())
                .filter(|&i| fold_of[i] != fold)
                .collect();
            let fold_seed = mix_seed(cfg.seed, fold as u64);
            let (fit_idx, val_idx) = holdout(&examples, &ids, &rest, cfg.val_fraction, fold_seed);
            let fit: Vec<Example> = fit_idx.iter().map(|&i| examples[i].clone()).collect();
            let val: Vec<Example> = val_idx.iter().map(|&i| examples[i].clone()).collect();
            let init = ModelParams::init(
                cfg.input_dim(),
                &cfg.hidden_widths,
                classes.len(),
                fold_seed,
            );
            let fold_cfg = TrainConfig {
                seed: fold_seed,
                ..cfg.clone()
            };
            let (params, history) = train_two_stage(&init, &fit, &val, &fold_cfg)?;
            let preds = test
                .iter()
                .map(|&i| Ok((i, predict(&params, &examples[i].features)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok((preds, history))
        })
        .collect();

    let mut predicted = vec![None; examples.len()];
    let mut histories = Vec::with_capacity(folds.k);
    for result in per_fold {
        let (preds, history) = result?;
        for (i, p) in preds {
            predicted[i] = Some(p);
        }
        histories.push(history);
    }
    let pairs = predicted
        .iter()
        .zip(&examples)
        .map(|(p, ex)| {
            let p = p.expect("every record belongs to exactly one fold");
            (classes[p], classes[ex.class])
        })
        .collect();
    Ok(CvOutcome {
        classes,
        ids: ids.iter().map(|s| s.to_string()).collect(),
        pairs,
        histories,
    })
}

/// Trains one model on every record of the manifest.
pub fn train_full(
    m: &Manifest,
    cfg: &TrainConfig,
    condition: Condition,
    source: &dyn ImageSource,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if m.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    let classes = m.classes();
    let mut examples = Vec::with_capacity(m.len());
    for r in m.records() {
        let label = r.label().ok_or_else(|| {
            Error::InvalidConfig(format!("record {:?} is not single-label", r.id))
        })?;
        let class = classes
            .iter()
            .position(|&c| c == label)
            .expect("label in universe");
        examples.push(Example {
            features: FeatureVector::from_image(&source.load(r, condition)?, cfg.input_edge)?,
            class,
        });
    }
    let ids: Vec<&str> = m.records().iter().map(|r| r.id.as_str()).collect();
    let all: Vec<usize> = (0..examples.len()).collect();
    let (fit_idx, val_idx) = holdout(&examples, &ids, &all, cfg.val_fraction, cfg.seed);
    let fit: Vec<Example> = fit_idx.iter().map(|&i| examples[i].clone()).collect();
    let val: Vec<Example> = val_idx.iter().map(|&i| examples[i].clone()).collect();
    let init = ModelParams::init(cfg.input_dim(), &cfg.hidden_widths, classes.len(), cfg.seed);
    train_two_stage(&init, &fit, &val, cfg)
}
