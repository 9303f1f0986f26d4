//! One-hidden-layer backbone: `linear -> batch norm -> relu`, followed by a
//! bias-free linear classifier whose weight stays fixed at test time.
//!
//! Only the batch-norm affine parameters (`gamma`, `beta`) are exposed for
//! test-time updates; see [`TinyModel::trainable_parameters`].

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{contract, LabError, Result};
use crate::mathcore::{argmax, entropy_raw, softmax_in_place};
use crate::stream::{substream, LabeledBatch};

pub const DEFAULT_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &str = "rosetta-lab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;
const TAG_INIT: u64 = 0x696e_6974;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

impl Activation {
    fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
        }
    }
}

/// Which statistics normalize the hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatMode {
    Running,
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
}

impl BatchNormState {
    pub fn identity(dim: usize, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    /// `d_in × d_feat`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub bn: BatchNormState,
    pub activation: Activation,
    /// Classifier weight, `d_feat × K`. Column `k` is the weight vector of class `k`.
    pub w_l: Array2<f64>,
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub normalized: Array2<f64>,
    pub pre_activation: Array2<f64>,
    pub inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B × d_feat` hidden features.
    pub features: Array2<f64>,
    /// `B × K`, equal to `features · W_L`.
    pub logits: Array2<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
    pub mode: StatMode,
    pub cache: BnCache,
}

impl ForwardOutput {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self) -> Array2<f64> {
        let mut p = self.logits.clone();
        for mut row in p.rows_mut() {
            softmax_in_place(row.as_slice_mut().unwrap());
        }
        p
    }

    /// Argmax class per sample, ties toward the lower index.
    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().unwrap()))
            .collect()
    }
}

/// Gradient with respect to the batch-norm affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BnGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl BnGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    /// `[gamma.., beta..]`, same layout as [`TinyModel::trainable_parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.gamma.iter().chain(self.beta.iter()).copied().collect()
    }

    pub fn scaled_add(&mut self, weight: f64, other: &BnGrad) {
        self.gamma.scaled_add(weight, &other.gamma);
        self.beta.scaled_add(weight, &other.beta);
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.iter().chain(self.beta.iter()).all(|v| v.is_finite())
    }
}

impl TinyModel {
    /// Random initialization: `W1 ~ N(0, 2/d_in)`, `W_L ~ N(0, 1/d_feat)`, identity batch norm.
    pub fn new(d_in: usize, d_feat: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = substream(seed, &[TAG_INIT]);
        let s1 = (2.0 / d_in as f64).sqrt();
        let w1 = Array2::from_shape_fn((d_in, d_feat), |_| s1 * rng.sample::<f64, _>(StandardNormal));
        let sl = (1.0 / d_feat as f64).sqrt();
        let w_l = Array2::from_shape_fn((d_feat, num_classes), |_| {
            sl * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            w1,
            b1: Array1::zeros(d_feat),
            bn: BatchNormState::identity(d_feat, DEFAULT_EPS),
            activation: Activation::Relu,
            w_l,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_feat(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.w_l.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_feat();
        let bn = &self.bn;
        if self.b1.len() != d
            || bn.gamma.len() != d
            || bn.beta.len() != d
            || bn.running_mean.len() != d
            || bn.running_var.len() != d
            || self.w_l.nrows() != d
        {
            return Err(contract("model shapes are inconsistent"));
        }
        if !(bn.eps > 0.0) {
            return Err(contract("batch-norm eps must be positive"));
        }
        if bn.running_var.iter().any(|&v| v < 0.0) {
            return Err(contract("negative running variance"));
        }
        let finite = self
            .w1
            .iter()
            .chain(&self.b1)
            .chain(&bn.gamma)
            .chain(&bn.beta)
            .chain(&bn.running_mean)
            .chain(&bn.running_var)
            .chain(&self.w_l)
            .all(|v| v.is_finite());
        if !finite {
            return Err(contract("model holds non-finite parameters"));
        }
        Ok(())
    }

    /// Forward pass that never mutates the model.
    pub fn infer(&self, batch: &Array2<f64>, mode: StatMode) -> Result<ForwardOutput> {
        if batch.ncols() != self.d_in() {
            return Err(contract(format!(
                "input has {} columns, model expects {}",
                batch.ncols(),
                self.d_in()
            )));
        }
        if batch.nrows() == 0 {
            return Err(contract("empty batch"));
        }
        let z = batch.dot(&self.w1) + &self.b1;
        let (mean, var) = match mode {
            StatMode::Batch => {
                let mean = z.mean_axis(Axis(0)).unwrap();
                let var = z.var_axis(Axis(0), 0.0);
                (mean, var)
            }
            StatMode::Running => (self.bn.running_mean.clone(), self.bn.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.bn.eps).sqrt());
        let normalized = (&z - &mean) * &inv_std;
        let pre_activation = &normalized * &self.bn.gamma + &self.bn.beta;
        let features = match self.activation {
            Activation::Relu => pre_activation.mapv(|v| v.max(0.0)),
        };
        let logits = features.dot(&self.w_l);
        Ok(ForwardOutput {
            features,
            logits,
            batch_mean: mean,
            batch_var: var,
            mode,
            cache: BnCache {
                normalized,
                pre_activation,
                inv_std,
            },
        })
    }

    /// Forward pass; in batch mode the running statistics are replaced by the batch's.
    pub fn forward(&mut self, batch: &Array2<f64>, mode: StatMode) -> Result<ForwardOutput> {
        let out = self.infer(batch, mode)?;
        if mode == StatMode::Batch {
            self.bn.running_mean.assign(&out.batch_mean);
            self.bn.running_var.assign(&out.batch_var);
        }
        Ok(out)
    }

    /// `[gamma.., beta..]`: the only parameters adapted at test time.
    pub fn trainable_parameters(&self) -> Vec<f64> {
        self.bn.gamma.iter().chain(self.bn.beta.iter()).copied().collect()
    }

    pub fn set_trainable_parameters(&mut self, params: &[f64]) -> Result<()> {
        let d = self.d_feat();
        if params.len() != 2 * d {
            return Err(contract(format!(
                "expected {} trainable parameters, got {}",
                2 * d,
                params.len()
            )));
        }
        self.bn.gamma.assign(&Array1::from(params[..d].to_vec()));
        self.bn.beta.assign(&Array1::from(params[d..].to_vec()));
        Ok(())
    }

    /// Backpropagates `dL/dfeatures` to the affine parameters. The normalized
    /// activations do not depend on `gamma`/`beta`, so the batch statistics drop out.
    pub fn backward_affine(&self, out: &ForwardOutput, d_features: &Array2<f64>) -> BnGrad {
        let d_pre = self.relu_backward(out, d_features);
        BnGrad {
            gamma: (&d_pre * &out.cache.normalized).sum_axis(Axis(0)),
            beta: d_pre.sum_axis(Axis(0)),
        }
    }

    fn relu_backward(&self, out: &ForwardOutput, d_features: &Array2<f64>) -> Array2<f64> {
        let mut d_pre = d_features.clone();
        ndarray::Zip::from(&mut d_pre)
            .and(&out.cache.pre_activation)
            .for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
        d_pre
    }

    /// Full-parameter gradients of a loss given `dL/dlogits`, through batch-mode BN.
    fn backward_full(
        &self,
        inputs: &Array2<f64>,
        out: &ForwardOutput,
        d_logits: &Array2<f64>,
    ) -> FullGrad {
        let w_l = out.features.t().dot(d_logits);
        let d_features = d_logits.dot(&self.w_l.t());
        let d_pre = self.relu_backward(out, &d_features);
        let gamma = (&d_pre * &out.cache.normalized).sum_axis(Axis(0));
        let beta = d_pre.sum_axis(Axis(0));
        let d_norm = &d_pre * &self.bn.gamma;
        let n = inputs.nrows() as f64;
        let sum_d = d_norm.sum_axis(Axis(0));
        let sum_dx = (&d_norm * &out.cache.normalized).sum_axis(Axis(0));
        let d_z = match out.mode {
            StatMode::Batch => {
                let centered = &d_norm * n - &sum_d - &(&out.cache.normalized * &sum_dx);
                centered * &(&out.cache.inv_std / n)
            }
            StatMode::Running => &d_norm * &out.cache.inv_std,
        };
        FullGrad {
            w1: inputs.t().dot(&d_z),
            b1: d_z.sum_axis(Axis(0)),
            gamma,
            beta,
            w_l,
        }
    }

    /// Serializes to the versioned text checkpoint format. Values use shortest
    /// round-trip exponent notation, so loading reproduces every bit.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(w, "activation {}", self.activation.as_str())?;
        writeln!(w, "dims {} {} {}", self.d_in(), self.d_feat(), self.num_classes())?;
        writeln!(w, "eps {:e}", self.bn.eps)?;
        write_matrix(&mut w, "w1", &self.w1)?;
        write_vector(&mut w, "b1", &self.b1)?;
        write_vector(&mut w, "gamma", &self.bn.gamma)?;
        write_vector(&mut w, "beta", &self.bn.beta)?;
        write_vector(&mut w, "running_mean", &self.bn.running_mean)?;
        write_vector(&mut w, "running_var", &self.bn.running_var)?;
        write_matrix(&mut w, "w_l", &self.w_l)?;
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = CheckpointLines {
            inner: r.lines(),
            line: 0,
        };
        let head = lines.next_line()?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(LabError::Checkpoint("missing checkpoint header".into()));
        }
        let version: u32 = parse_token(parts.next(), "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(LabError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let act = lines.keyed("activation")?;
        let activation = match act.as_str() {
            "relu" => Activation::Relu,
            other => {
                return Err(LabError::Checkpoint(format!("unknown activation {other:?}")))
            }
        };
        let dims = lines.keyed("dims")?;
        let mut it = dims.split_whitespace();
        let d_in: usize = parse_token(it.next(), "d_in")?;
        let d_feat: usize = parse_token(it.next(), "d_feat")?;
        let k: usize = parse_token(it.next(), "classes")?;
        let eps: f64 = parse_token(Some(lines.keyed("eps")?.trim()), "eps")?;
        let w1 = lines.matrix("w1", d_in, d_feat)?;
        let b1 = lines.vector("b1", d_feat)?;
        let gamma = lines.vector("gamma", d_feat)?;
        let beta = lines.vector("beta", d_feat)?;
        let running_mean = lines.vector("running_mean", d_feat)?;
        let running_var = lines.vector("running_var", d_feat)?;
        let w_l = lines.matrix("w_l", d_feat, k)?;
        let model = Self {
            w1,
            b1,
            bn: BatchNormState {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            },
            activation,
            w_l,
        };
        model
            .validate()
            .map_err(|e| LabError::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn save_file(&self, path: &std::path::Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(f)
    }

    pub fn load_file(path: &std::path::Path) -> Result<Self> {
        Self::load(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

struct FullGrad {
    w1: Array2<f64>,
    b1: Array1<f64>,
    gamma: Array1<f64>,
    beta: Array1<f64>,
    w_l: Array2<f64>,
}

fn write_vector<W: Write>(w: &mut W, name: &str, v: &Array1<f64>) -> Result<()> {
    writeln!(w, "{name} {}", v.len())?;
    write_row(w, v.iter())
}

fn write_matrix<W: Write>(w: &mut W, name: &str, m: &Array2<f64>) -> Result<()> {
    writeln!(w, "{name} {} {}", m.nrows(), m.ncols())?;
    for row in m.rows() {
        write_row(w, row.iter())?;
    }
    Ok(())
}

fn write_row<'a, W: Write>(w: &mut W, vals: impl Iterator<Item = &'a f64>) -> Result<()> {
    let line: Vec<String> = vals.map(|v| format!("{v:e}")).collect();
    writeln!(w, "{}", line.join(" "))?;
    Ok(())
}

fn parse_token<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| LabError::Checkpoint(format!("bad or missing {what}")))
}

struct CheckpointLines<B: BufRead> {
    inner: std::io::Lines<B>,
    line: usize,
}

impl<B: BufRead> CheckpointLines<B> {
    fn next_line(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(LabError::Checkpoint(format!(
                "unexpected end of file at line {}",
                self.line
            ))),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<String> {
        let l = self.next_line()?;
        l.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| {
                LabError::Checkpoint(format!("line {}: expected {key:?}", self.line))
            })
    }

    fn row(&mut self, n: usize) -> Result<Vec<f64>> {
        let l = self.next_line()?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LabError::Checkpoint(format!("line {}: {e}", self.line)))?;
        if vals.len() != n {
            return Err(LabError::Checkpoint(format!(
                "line {}: expected {n} values, got {}",
                self.line,
                vals.len()
            )));
        }
        Ok(vals)
    }

    fn vector(&mut self, key: &str, n: usize) -> Result<Array1<f64>> {
        let len: usize = parse_token(Some(self.keyed(key)?.trim()), key)?;
        if len != n {
            return Err(LabError::Checkpoint(format!("{key}: length {len}, expected {n}")));
        }
        Ok(Array1::from(self.row(n)?))
    }

    fn matrix(&mut self, key: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let shape = self.keyed(key)?;
        let mut it = shape.split_whitespace();
        let r: usize = parse_token(it.next(), key)?;
        let c: usize = parse_token(it.next(), key)?;
        if (r, c) != (rows, cols) {
            return Err(LabError::Checkpoint(format!(
                "{key}: shape {r}x{c}, expected {rows}x{cols}"
            )));
        }
        let mut flat = Vec::with_capacity(r * c);
        for _ in 0..r {
            flat.extend(self.row(c)?);
        }
        Ok(Array2::from_shape_vec((r, c), flat).expect("shape checked"))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Clean accuracy of the final model with running statistics.
    pub final_accuracy: f64,
    pub warnings: Vec<String>,
}

fn cross_entropy(out: &ForwardOutput, labels: &[usize]) -> (f64, Array2<f64>, f64) {
    let probs = out.probabilities();
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut d_logits = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(f64::MIN_POSITIVE).ln();
        d_logits[[i, y]] -= 1.0;
        if argmax(probs.row(i).as_slice().unwrap()) == y {
            correct += 1;
        }
    }
    (loss / n, d_logits / n, correct as f64 / n)
}

/// Full-batch gradient descent on cross-entropy over every parameter, with
/// batch-mode normalization; running statistics are then set from the whole set.
pub fn pretrain(
    model: &mut TinyModel,
    clean: &[LabeledBatch],
    epochs: usize,
    lr: f64,
) -> Result<TrainingLog> {
    let data = LabeledBatch::concat(clean)?;
    let labels = data
        .true_class
        .iter()
        .map(|c| c.ok_or_else(|| contract("pretraining data must be in-distribution only")))
        .collect::<Result<Vec<usize>>>()?;
    if labels.iter().any(|&c| c >= model.num_classes()) {
        return Err(contract("label outside the model's class range"));
    }
    let mut log = TrainingLog {
        epochs: Vec::with_capacity(epochs),
        final_accuracy: 0.0,
        warnings: Vec::new(),
    };
    if epochs == 0 {
        let out = model.infer(&data.inputs, StatMode::Running)?;
        log.final_accuracy = cross_entropy(&out, &labels).2;
        return Ok(log);
    }
    let mut prev = f64::INFINITY;
    for epoch in 0..epochs {
        let out = model.infer(&data.inputs, StatMode::Batch)?;
        let (loss, d_logits, acc) = cross_entropy(&out, &labels);
        if !loss.is_finite() {
            return Err(LabError::Numeric {
                component: "pretrain".into(),
                detail: format!("non-finite loss at epoch {epoch}"),
            });
        }
        if loss >= prev {
            let msg = format!("epoch {epoch}: loss {loss:.6} did not decrease from {prev:.6}");
            log::warn!("{msg}");
            log.warnings.push(msg);
        }
        prev = loss;
        log.epochs.push(EpochLog {
            epoch,
            loss,
            accuracy: acc,
        });
        let g = model.backward_full(&data.inputs, &out, &d_logits);
        model.w1.scaled_add(-lr, &g.w1);
        model.b1.scaled_add(-lr, &g.b1);
        model.bn.gamma.scaled_add(-lr, &g.gamma);
        model.bn.beta.scaled_add(-lr, &g.beta);
        model.w_l.scaled_add(-lr, &g.w_l);
    }
    model.forward(&data.inputs, StatMode::Batch)?;
    let out = model.infer(&data.inputs, StatMode::Running)?;
    log.final_accuracy = cross_entropy(&out, &labels).2;
    Ok(log)
}

/// Mean entropy of the softmax outputs, used in tests and diagnostics.
pub fn mean_prediction_entropy(out: &ForwardOutput) -> f64 {
    let p = out.probabilities();
    p.rows()
        .into_iter()
        .map(|r| entropy_raw(r.as_slice().unwrap()))
        .sum::<f64>()
        / p.nrows() as f64
}
