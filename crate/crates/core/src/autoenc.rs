//! Dense autoencoder `d -> h -> z -> h -> d` with tanh hidden layers and a
//! linear output, trained by momentum SGD on standardized features.
//! Reconstruction error is the anomaly score; a 2-D principal-component
//! projection is provided for plotting.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::stats::{mean_sd, quantile};

pub const MODEL_HEADER: &str = "trade-forensics/autoenc v1";

#[derive(Debug, Error)]
pub enum AutoencError {
    #[error("need at least 10 rows to train, got {0}")]
    TooFewRows(usize),
    #[error("non-finite value in row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("row has {got} columns, model expects {expected}")]
    Arity { got: usize, expected: usize },
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub bottleneck: usize,
    /// Training-error quantile used as the anomaly threshold.
    pub threshold_quantile: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            hidden: 8,
            bottleneck: 2,
            threshold_quantile: 0.95,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), AutoencError> {
        let bad = |m: &str| Err(AutoencError::Config(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size < 1 || self.hidden < 1 || self.bottleneck < 1 {
            return bad("batch_size, hidden and bottleneck must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.threshold_quantile) {
            return bad("threshold_quantile must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Fully connected layer; `w` is row-major `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    fn init(n_in: usize, n_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let mut d = Self::zeros(n_in, n_out);
        for w in &mut d.w {
            *w = (2.0 * rng.uniform() - 1.0) * bound;
        }
        d
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.n_out {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            out.push(self.b[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Trained model plus the standardization it was fitted with.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    pub feature_names: Vec<String>,
    /// Indices of the raw features kept (non-zero variance).
    pub used: Vec<usize>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub layers: Vec<Dense>,
    pub threshold: f64,
}

/// Per-layer activations of one forward pass; `acts[0]` is the input.
struct Trace {
    acts: Vec<Vec<f64>>,
}

impl AutoencoderModel {
    /// Untrained model with identity standardization over `d` features.
    pub fn with_widths(widths: &[usize]) -> Self {
        let d = widths[0];
        Self {
            feature_names: (0..d).map(|i| format!("x{i}")).collect(),
            used: (0..d).collect(),
            mean: vec![0.0; d],
            sd: vec![1.0; d],
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            threshold: 0.0,
        }
    }

    pub fn input_width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>, AutoencError> {
        if x.len() != self.input_width() {
            return Err(AutoencError::Arity {
                got: x.len(),
                expected: self.input_width(),
            });
        }
        Ok(self
            .used
            .iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(&i, (m, s))| (x[i] - m) / s)
            .collect())
    }

    fn trace(&self, z: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(z.to_vec());
        let last = self.layers.len().saturating_sub(1);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(&acts[l], &mut out);
            if l < last {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            acts.push(out);
        }
        Trace { acts }
    }

    /// Reconstruction of a standardized row.
    pub fn reconstruct_standardized(&self, z: &[f64]) -> Vec<f64> {
        self.trace(z).acts.pop().unwrap_or_default()
    }

    /// Mean squared error on an already standardized row.
    pub fn error_standardized(&self, z: &[f64]) -> f64 {
        if z.is_empty() {
            return 0.0;
        }
        let y = self.reconstruct_standardized(z);
        z.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / z.len() as f64
    }

    /// Bottleneck activations of a standardized row.
    pub fn encode_standardized(&self, z: &[f64]) -> Vec<f64> {
        let mid = self.layers.len() / 2;
        self.trace(z).acts.swap_remove(mid)
    }

    pub fn reconstruction_error(&self, x: &[f64]) -> Result<f64, AutoencError> {
        Ok(self.error_standardized(&self.standardize(x)?))
    }

    pub fn errors(&self, x: &[Vec<f64>]) -> Result<Vec<f64>, AutoencError> {
        x.par_iter().map(|r| self.reconstruction_error(r)).collect()
    }

    pub fn latent(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AutoencError> {
        x.par_iter()
            .map(|r| Ok(self.encode_standardized(&self.standardize(r)?)))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All weights then biases, layer by layer.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }

    /// Mean reconstruction MSE over standardized rows.
    pub fn batch_loss(&self, batch: &[&[f64]]) -> f64 {
        batch.iter().map(|z| self.error_standardized(z)).sum::<f64>() / batch.len() as f64
    }

    /// Analytic gradient of [`Self::batch_loss`] for every parameter, laid out
    /// like [`Self::params_flat`]. Also returns the loss.
    pub fn loss_gradients(&self, batch: &[&[f64]]) -> (Vec<Dense>, f64) {
        let mut grads: Vec<Dense> = self.layers.iter().map(|l| Dense::zeros(l.n_in, l.n_out)).collect();
        let n_layers = self.layers.len();
        let mut loss = 0.0;
        if batch.is_empty() || n_layers == 0 {
            return (grads, loss);
        }
        let scale = 2.0 / (batch.len() as f64 * self.layers[0].n_in as f64);
        for z in batch {
            let t = self.trace(z);
            let out = &t.acts[n_layers];
            let mut delta: Vec<f64> = out.iter().zip(z.iter()).map(|(y, x)| scale * (y - x)).collect();
            loss += out.iter().zip(z.iter()).map(|(y, x)| (y - x).powi(2)).sum::<f64>() / z.len() as f64;
            for l in (0..n_layers).rev() {
                let layer = &self.layers[l];
                let prev = &t.acts[l];
                let g = &mut grads[l];
                for o in 0..layer.n_out {
                    g.b[o] += delta[o];
                    let row = &mut g.w[o * layer.n_in..(o + 1) * layer.n_in];
                    for (gw, a) in row.iter_mut().zip(prev) {
                        *gw += delta[o] * a;
                    }
                }
                if l > 0 {
                    let mut back = vec![0.0; layer.n_in];
                    for o in 0..layer.n_out {
                        let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                        for (bk, w) in back.iter_mut().zip(row) {
                            *bk += w * delta[o];
                        }
                    }
                    // prev is a tanh activation: d tanh = 1 - a^2.
                    for (bk, a) in back.iter_mut().zip(prev) {
                        *bk *= 1.0 - a * a;
                    }
                    delta = back;
                }
            }
        }
        (grads, loss / batch.len() as f64)
    }

    /// Gradients flattened like [`Self::params_flat`].
    pub fn loss_gradients_flat(&self, batch: &[&[f64]]) -> Vec<f64> {
        let (grads, _) = self.loss_gradients(batch);
        let mut out = Vec::with_capacity(self.param_count());
        for g in grads {
            out.extend(g.w);
            out.extend(g.b);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_HEADER}");
        let _ = writeln!(
            s,
            "features {} {}",
            self.feature_names.len(),
            self.feature_names.join(" ")
        );
        let used: Vec<String> = self.used.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "used {} {}", self.used.len(), used.join(" "));
        let _ = writeln!(s, "mean {}", join(&self.mean));
        let _ = writeln!(s, "sd {}", join(&self.sd));
        let _ = writeln!(s, "threshold {}", self.threshold);
        let _ = writeln!(s, "layers {}", self.layers.len());
        for l in &self.layers {
            let _ = writeln!(s, "layer {} {}", l.n_in, l.n_out);
            let _ = writeln!(s, "w {}", join(&l.w));
            let _ = writeln!(s, "b {}", join(&l.b));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, AutoencError> {
        let mut lines = text.lines().enumerate();
        let mut next = |tag: &str| -> Result<(usize, Vec<String>), AutoencError> {
            let (i, line) = lines.next().ok_or(AutoencError::Format {
                line: 0,
                msg: format!("missing `{tag}` line"),
            })?;
            let mut parts = line.split_whitespace().map(str::to_string);
            if parts.next().as_deref() != Some(tag) {
                return Err(AutoencError::Format {
                    line: i + 1,
                    msg: format!("expected `{tag}`"),
                });
            }
            Ok((i + 1, parts.collect()))
        };
        fn nums<T: std::str::FromStr>(line: usize, v: &[String]) -> Result<Vec<T>, AutoencError> {
            v.iter()
                .map(|s| {
                    s.parse().map_err(|_| AutoencError::Format {
                        line,
                        msg: format!("bad number `{s}`"),
                    })
                })
                .collect()
        }
        let (line, header) = next("trade-forensics/autoenc")?;
        if header != ["v1"] {
            return Err(AutoencError::Format {
                line,
                msg: "unsupported model version".into(),
            });
        }
        let (_, features) = next("features")?;
        let feature_names = features.get(1..).unwrap_or_default().to_vec();
        let (line, used) = next("used")?;
        let used: Vec<usize> = nums(line, used.get(1..).unwrap_or_default())?;
        let (line, mean) = next("mean")?;
        let mean = nums(line, &mean)?;
        let (line, sd) = next("sd")?;
        let sd = nums(line, &sd)?;
        let (line, threshold) = next("threshold")?;
        let threshold = *nums::<f64>(line, &threshold)?.first().unwrap_or(&0.0);
        let (line, count) = next("layers")?;
        let count = *nums::<usize>(line, &count)?.first().unwrap_or(&0);
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (line, shape) = next("layer")?;
            let shape: Vec<usize> = nums(line, &shape)?;
            let (wl, w) = next("w")?;
            let (bl, b) = next("b")?;
            let (w, b) = (nums::<f64>(wl, &w)?, nums::<f64>(bl, &b)?);
            if shape.len() != 2 || w.len() != shape[0] * shape[1] || b.len() != shape[1] {
                return Err(AutoencError::Format {
                    line,
                    msg: "layer shape does not match parameters".into(),
                });
            }
            layers.push(Dense {
                n_in: shape[0],
                n_out: shape[1],
                w,
                b,
            });
        }
        if mean.len() != used.len() || sd.len() != used.len() || used.iter().any(|&i| i >= feature_names.len()) {
            return Err(AutoencError::Format {
                line: 0,
                msg: "standardization does not match feature list".into(),
            });
        }
        Ok(Self {
            feature_names,
            used,
            mean,
            sd,
            layers,
            threshold,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: AutoencoderModel,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub dropped: Vec<String>,
}

fn check_finite(x: &[Vec<f64>]) -> Result<(), AutoencError> {
    for (row, r) in x.iter().enumerate() {
        if let Some(column) = r.iter().position(|v| !v.is_finite()) {
            return Err(AutoencError::NonFinite { row, column });
        }
    }
    Ok(())
}

/// Train on raw rows; zero-variance columns are dropped before standardizing.
pub fn train(
    x: &[Vec<f64>],
    feature_names: &[&str],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, AutoencError> {
    cfg.validate()?;
    if x.len() < 10 {
        return Err(AutoencError::TooFewRows(x.len()));
    }
    check_finite(x)?;
    let width = feature_names.len();
    if let Some(r) = x.iter().find(|r| r.len() != width) {
        return Err(AutoencError::Arity {
            got: r.len(),
            expected: width,
        });
    }
    let mut used = Vec::new();
    let (mut means, mut sds, mut dropped) = (Vec::new(), Vec::new(), Vec::new());
    for (k, name) in feature_names.iter().enumerate() {
        let col: Vec<f64> = x.iter().map(|r| r[k]).collect();
        let (m, s) = mean_sd(&col);
        if s > 1e-12 * m.abs().max(1.0) {
            used.push(k);
            means.push(m);
            sds.push(s);
        } else {
            log::warn!("autoencoder: dropping zero-variance feature {name}");
            dropped.push(name.to_string());
        }
    }
    let d = used.len();
    let mut rng = SeededRng::new(seed);
    let widths = [d, cfg.hidden, cfg.bottleneck, cfg.hidden, d];
    let mut model = AutoencoderModel {
        feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
        used,
        mean: means,
        sd: sds,
        layers: Vec::new(),
        threshold: 0.0,
    };
    if d == 0 {
        return Ok(TrainOutcome {
            model,
            loss_curve: vec![0.0; cfg.epochs],
            dropped,
        });
    }
    model.layers = widths.windows(2).map(|w| Dense::init(w[0], w[1], &mut rng)).collect();
    let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r).expect("arity checked")).collect();

    let mut velocity = vec![0.0; model.param_count()];
    let mut params = model.params_flat();
    let mut order: Vec<usize> = (0..z.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| z[i].as_slice()).collect();
            let grads = model.loss_gradients_flat(&batch);
            epoch_loss += model.batch_loss(&batch) * batch.len() as f64;
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grads) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *p += *v;
            }
            model.set_params_flat(&params);
        }
        let mean_loss = epoch_loss / z.len() as f64;
        if !mean_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(AutoencError::Diverged(epoch));
        }
        log::debug!("autoencoder epoch {epoch}: loss {mean_loss}");
        loss_curve.push(mean_loss);
    }
    let errors: Vec<f64> = z.par_iter().map(|r| model.error_standardized(r)).collect();
    model.threshold = quantile(&errors, cfg.threshold_quantile).unwrap_or(0.0);
    Ok(TrainOutcome {
        model,
        loss_curve,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    pub axes: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Principal-axis projection of the standardized matrix by power iteration
/// with deflation. Axes beyond the numerical rank are zero-filled.
pub fn pca_project(x: &[Vec<f64>], dims: usize) -> Result<Projection, AutoencError> {
    check_finite(x)?;
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    let mut warnings = Vec::new();
    let mut stats = Vec::with_capacity(d);
    for k in 0..d {
        let col: Vec<f64> = x.iter().map(|r| r[k]).collect();
        stats.push(mean_sd(&col));
    }
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| {
            r.iter()
                .zip(&stats)
                .map(|(v, &(m, s))| if s > 0.0 { (v - m) / s } else { 0.0 })
                .collect()
        })
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &z {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n.max(1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let mut axes = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for a in 0..dims {
        let (lambda, v) = top_eigen(&cov);
        if d == 0 || trace <= 0.0 || lambda <= 1e-12 * trace {
            let msg = format!("projection axis {} exceeds data rank; zero-filled", a + 1);
            log::warn!("{msg}");
            warnings.push(msg);
            axes.push(vec![0.0; d]);
            explained.push(0.0);
            continue;
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        explained.push(lambda / trace);
        axes.push(v);
    }
    let coords = z
        .iter()
        .map(|r| {
            axes.iter()
                .map(|ax| ax.iter().zip(r).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Projection {
        coords,
        explained_ratio: explained,
        axes,
        warnings,
    })
}

/// Dominant eigenpair of a symmetric PSD matrix. Start vector `(1, 2, ..., d)`
/// normalised; stops when successive vectors differ by < 1e-9. The sign is
/// fixed so the largest-magnitude component is positive.
fn top_eigen(m: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let d = m.len();
    if d == 0 {
        return (0.0, Vec::new());
    }
    let normalize = |v: &mut Vec<f64>| {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            for a in v.iter_mut() {
                *a /= norm;
            }
        }
        norm
    };
    let mut v: Vec<f64> = (1..=d).map(|i| i as f64).collect();
    normalize(&mut v);
    for _ in 0..100_000 {
        let mut next: Vec<f64> = m
            .iter()
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        if normalize(&mut next) == 0.0 {
            return (0.0, v);
        }
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = next;
        if diff < 1e-9 {
            break;
        }
    }
    let pivot = v
        .iter()
        .copied()
        .fold(0.0f64, |acc, a| if a.abs() > acc.abs() { a } else { acc });
    if pivot < 0.0 {
        for a in &mut v {
            *a = -*a;
        }
    }
    let mv: Vec<f64> = m
        .iter()
        .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
        .collect();
    let lambda = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
    (lambda, v)
}

pub fn write_errors<W: Write>(ids: &[String], errors: &[f64], threshold: f64, sink: W) -> Result<(), AutoencError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["record_id", "error", "flag"])?;
    for (id, e) in ids.iter().zip(errors) {
        w.write_record([id.as_str(), &e.to_string(), &(*e > threshold).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_coords<W: Write>(
    ids: &[String],
    latent: &[Vec<f64>],
    pca: &Projection,
    sink: W,
) -> Result<(), AutoencError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["record_id", "latent_1", "latent_2", "pc_1", "pc_2"])?;
    let cell = |v: &[f64], i: usize| v.get(i).map(f64::to_string).unwrap_or_default();
    for ((id, l), p) in ids.iter().zip(latent).zip(&pca.coords) {
        w.write_record([id.clone(), cell(l, 0), cell(l, 1), cell(p, 0), cell(p, 1)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::roc_auc;

    const NAMES: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

    /// Points on a random plane in 6-D plus `outliers` pushed off it.
    fn planted(n: usize, outliers: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = SeededRng::new(seed);
        let basis: Vec<[f64; 2]> = (0..6).map(|_| [rng.normal(), rng.normal()]).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n + outliers {
            let (u, v) = (rng.normal(), rng.normal());
            let mut row: Vec<f64> = basis.iter().map(|b| b[0] * u + b[1] * v).collect();
            let out = i >= n;
            if out {
                for x in &mut row {
                    *x += 4.0 * rng.normal();
                }
            }
            rows.push(row);
            labels.push(out);
        }
        (rows, labels)
    }

    fn random_model(seed: u64) -> AutoencoderModel {
        let mut rng = SeededRng::new(seed);
        let mut m = AutoencoderModel::with_widths(&[6, 8, 2, 8, 6]);
        for l in &mut m.layers {
            for w in l.w.iter_mut().chain(l.b.iter_mut()) {
                *w = rng.normal() * 0.5;
            }
        }
        m
    }

    #[test]
    fn zero_model_error_is_one_over_d() {
        let m = AutoencoderModel::with_widths(&[6, 8, 2, 8, 6]);
        let e = m.reconstruction_error(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((e - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn arity_mismatch_is_rejected() {
        let m = AutoencoderModel::with_widths(&[6, 8, 2, 8, 6]);
        assert!(matches!(
            m.reconstruction_error(&[1.0]),
            Err(AutoencError::Arity { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [1, 2, 3] {
            let model = random_model(seed);
            let (x, _) = planted(16, 0, seed + 10);
            let batch: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
            let analytic = model.loss_gradients_flat(&batch);
            let params = model.params_flat();
            let h = 1e-5;
            let mut probe = model.clone();
            for (k, &g) in analytic.iter().enumerate() {
                let mut p = params.clone();
                p[k] += h;
                probe.set_params_flat(&p);
                let up = probe.batch_loss(&batch);
                p[k] -= 2.0 * h;
                probe.set_params_flat(&p);
                let down = probe.batch_loss(&batch);
                let numeric = (up - down) / (2.0 * h);
                let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "seed {seed} param {k}: {g} vs {numeric}");
            }
        }
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        // All weights zero and the output bias equal to the input.
        let mut m = AutoencoderModel::with_widths(&[3, 4, 2, 4, 3]);
        m.layers[3].b = vec![0.5, -1.0, 2.0];
        let row = [0.5, -1.0, 2.0];
        let g = m.loss_gradients_flat(&[&row]);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dead_unit_gets_no_gradient() {
        let mut m = random_model(4);
        // Hidden unit 0 of the first layer feeds nothing downstream.
        let next = &mut m.layers[1];
        for o in 0..next.n_out {
            next.w[o * next.n_in] = 0.0;
        }
        let (x, _) = planted(8, 0, 5);
        let batch: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let (grads, _) = m.loss_gradients(&batch);
        let first = &grads[0];
        assert!(first.w[..first.n_in].iter().all(|&g| g == 0.0));
        assert_eq!(first.b[0], 0.0);
    }

    #[test]
    fn constant_rows_reconstruct_exactly() {
        let x = vec![vec![3.0, -2.0, 7.5, 1.0, 0.0, 4.0]; 40];
        let out = train(&x, &NAMES, &TrainConfig::default(), 1).unwrap();
        assert_eq!(out.dropped.len(), 6);
        let e = out.model.reconstruction_error(&x[0]).unwrap();
        assert!(e < 1e-6);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, _) = planted(200, 0, 8);
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train(&x, &NAMES, &cfg, 99).unwrap();
        let b = train(&x, &NAMES, &cfg, 99).unwrap();
        assert_eq!(a.model.to_text(), b.model.to_text());
        assert_eq!(a, b);
    }

    #[test]
    fn planted_outliers_stand_out() {
        let (x, labels) = planted(1000, 20, 21);
        let cfg = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        let out = train(&x, &NAMES, &cfg, 42).unwrap();
        assert!(out.loss_curve.last().unwrap() < &(0.5 * out.loss_curve[0]));
        let errors = out.model.errors(&x).unwrap();
        let inlier: Vec<f64> = errors
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| !l)
            .map(|(e, _)| *e)
            .collect();
        let p95 = quantile(&inlier, 0.95).unwrap();
        let caught = errors.iter().zip(&labels).filter(|(e, &l)| l && **e > p95).count();
        assert!(caught >= 19, "caught {caught} of 20");
        assert!(roc_auc(&errors, &labels).unwrap() >= 0.95);
    }

    #[test]
    fn error_ignores_feature_units() {
        let (x, _) = planted(100, 0, 3);
        let scaled: Vec<Vec<f64>> = x
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(k, v)| if k == 2 { v * 10.0 } else { *v })
                    .collect()
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train(&x, &NAMES, &cfg, 5).unwrap().model;
        let b = train(&scaled, &NAMES, &cfg, 5).unwrap().model;
        let ea = a.reconstruction_error(&x[7]).unwrap();
        let eb = b.reconstruction_error(&scaled[7]).unwrap();
        assert!((ea - eb).abs() < 1e-9 * ea.max(1.0));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert!(matches!(
            train(&vec![vec![0.0; 6]; 5], &NAMES, &TrainConfig::default(), 0),
            Err(AutoencError::TooFewRows(5))
        ));
        let mut x = vec![vec![1.0; 6]; 12];
        x[3][1] = f64::NAN;
        assert!(matches!(
            train(&x, &NAMES, &TrainConfig::default(), 0),
            Err(AutoencError::NonFinite { row: 3, column: 1 })
        ));
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&vec![vec![1.0; 6]; 12], &NAMES, &cfg, 0),
            Err(AutoencError::Config(_))
        ));
    }

    #[test]
    fn divergence_reports_epoch() {
        let (x, _) = planted(50, 0, 1);
        let cfg = TrainConfig {
            learning_rate: 1e6,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&x, &NAMES, &cfg, 0), Err(AutoencError::Diverged(_))));
    }

    #[test]
    fn model_text_round_trips() {
        let (x, _) = planted(60, 0, 2);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let m = train(&x, &NAMES, &cfg, 3).unwrap().model;
        let back = AutoencoderModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(AutoencoderModel::from_text("garbage").is_err());
    }

    #[test]
    fn pca_exact_rank_two() {
        let (x, _) = planted(300, 0, 6);
        let p = pca_project(&x, 2).unwrap();
        let total: f64 = p.explained_ratio.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn pca_isotropic_components_are_balanced() {
        let mut rng = SeededRng::new(77);
        let x: Vec<Vec<f64>> = (0..10_000).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
        let p = pca_project(&x, 2).unwrap();
        assert!(p.explained_ratio[0] / p.explained_ratio[1] < 1.5);
    }

    #[test]
    fn pca_mean_row_maps_to_origin() {
        let (mut x, _) = planted(100, 3, 9);
        let d = x[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|k| x.iter().map(|r| r[k]).sum::<f64>() / x.len() as f64)
            .collect();
        x.push(mean);
        // Appending the mean row leaves the mean unchanged.
        let p = pca_project(&x, 2).unwrap();
        assert!(p.coords.last().unwrap().iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn pca_beyond_rank_zero_fills() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let p = pca_project(&x, 2).unwrap();
        assert_eq!(p.explained_ratio[1], 0.0);
        assert_eq!(p.warnings.len(), 1);
        assert!(p.coords.iter().all(|c| c[1] == 0.0));
    }
}
