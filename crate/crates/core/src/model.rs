//! Graph convolution, the hierarchical multiscale stack and its baselines.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atlas::{pool, MappingMatrix, PoolingScheme};
use crate::connectome::{check_descending, normalize_adjacency, DegreeMode, ScaleStack};
use crate::diffcore::{BatchNormStats, Mode, Tape, Tensor2D, Var};
use crate::error::{Error, Result};
use crate::io::{read_text, write_atomic};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// GCNs chained through atlas-guided pooling.
    #[default]
    Mahgcn,
    /// Independent per-scale GCNs, no pooling.
    Magcn,
    /// One GCN on the finest configured scale.
    Gcn,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahgcn" => Ok(Self::Mahgcn),
            "magcn" => Ok(Self::Magcn),
            "gcn" => Ok(Self::Gcn),
            other => Err(Error::Usage(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mahgcn => "mahgcn",
            Self::Magcn => "magcn",
            Self::Gcn => "gcn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scales: Vec<usize>,
    pub pooling_scheme: PoolingScheme,
    pub th: f64,
    pub dropout_rate: f64,
    pub skip_connections: bool,
    pub hidden_units: usize,
    pub num_classes: usize,
    pub degree_mode: DegreeMode,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scales: vec![500, 400, 300, 200, 100],
            pooling_scheme: PoolingScheme::Sum,
            th: 0.0,
            dropout_rate: 0.3,
            skip_connections: true,
            hidden_units: 64,
            num_classes: 2,
            degree_mode: DegreeMode::Raw,
            variant: Variant::Mahgcn,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_descending(&self.scales).map_err(|e| Error::Config(format!("scales: {e}")))?;
        if self.variant == Variant::Mahgcn && self.scales.len() < 2 {
            return Err(Error::Config(
                "scales: mahgcn needs at least two scales".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.th) {
            return Err(Error::Config(format!("th: {} outside [0, 1)", self.th)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate: {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.hidden_units == 0 {
            return Err(Error::Config("hidden_units: must be at least 1".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "num_classes: only 2 is supported, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Scales the variant actually consumes; `gcn` keeps only the finest.
    pub fn effective_scales(&self) -> &[usize] {
        match self.variant {
            Variant::Gcn => &self.scales[..1],
            _ => &self.scales,
        }
    }

    /// Length of the vector fed to the first fully connected layer.
    pub fn fused_len(&self) -> usize {
        let s = self.effective_scales();
        if self.skip_connections {
            s.iter().sum()
        } else {
            s[s.len() - 1]
        }
    }

    /// Input width of each GCN's weight vector.
    pub fn theta_rows(&self) -> Vec<usize> {
        let s = self.effective_scales();
        match self.variant {
            Variant::Mahgcn => (0..s.len()).map(|k| if k == 0 { s[0] } else { 1 }).collect(),
            Variant::Magcn | Variant::Gcn => s.to_vec(),
        }
    }
}

/// Every trainable weight plus the batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MahgcnParams<T> {
    pub thetas: Vec<Tensor2D<T>>,
    pub fl1_w: Tensor2D<T>,
    pub fl1_b: Tensor2D<T>,
    pub bn_gamma: Tensor2D<T>,
    pub bn_beta: Tensor2D<T>,
    pub bn_stats: BatchNormStats<T>,
    pub fl2_w: Tensor2D<T>,
    pub fl2_b: Tensor2D<T>,
}

/// Half-width of the Glorot uniform range.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D<T> {
    let b = glorot_bound(rows, cols);
    Tensor2D::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-b..=b)))
}

/// Glorot-uniform weights, zero biases, unit batch-norm scale.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<MahgcnParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.hidden_units;
    let thetas = cfg
        .theta_rows()
        .into_iter()
        .map(|r| glorot(&mut rng, r, 1))
        .collect();
    let fl1_w = glorot(&mut rng, cfg.fused_len(), h);
    let fl2_w = glorot(&mut rng, h, cfg.num_classes);
    Ok(MahgcnParams {
        thetas,
        fl1_w,
        fl1_b: Tensor2D::zeros(1, h),
        bn_gamma: Tensor2D::ones(1, h),
        bn_beta: Tensor2D::zeros(1, h),
        bn_stats: BatchNormStats::new(h),
        fl2_w,
        fl2_b: Tensor2D::zeros(1, cfg.num_classes),
    })
}

impl<T: Real> MahgcnParams<T> {
    /// Trainable tensors in a fixed order: thetas, fl1 w/b, bn gamma/beta,
    /// fl2 w/b.
    pub fn trainable(&self) -> Vec<&Tensor2D<T>> {
        let mut v: Vec<&Tensor2D<T>> = self.thetas.iter().collect();
        v.extend([
            &self.fl1_w,
            &self.fl1_b,
            &self.bn_gamma,
            &self.bn_beta,
            &self.fl2_w,
            &self.fl2_b,
        ]);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor2D<T>> {
        let mut v: Vec<&mut Tensor2D<T>> = self.thetas.iter_mut().collect();
        v.extend([
            &mut self.fl1_w,
            &mut self.fl1_b,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.fl2_w,
            &mut self.fl2_b,
        ]);
        v
    }

    /// Canonical names matching [`trainable`](Self::trainable).
    pub fn trainable_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.thetas.len()).map(|k| format!("gcn.{k}.theta")).collect();
        v.extend(
            ["fl1.w", "fl1.b", "bn1.gamma", "bn1.beta", "fl2.w", "fl2.b"]
                .iter()
                .map(|s| s.to_string()),
        );
        v
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let h = cfg.hidden_units;
        let rows = cfg.theta_rows();
        let mut want: Vec<(usize, usize)> = rows.iter().map(|&r| (r, 1)).collect();
        want.extend([
            (cfg.fused_len(), h),
            (1, h),
            (1, h),
            (1, h),
            (h, cfg.num_classes),
            (1, cfg.num_classes),
        ]);
        let got: Vec<(usize, usize)> = self.trainable().iter().map(|t| t.shape()).collect();
        if got != want || self.bn_stats.features() != h {
            return Err(Error::Config(format!(
                "parameter shapes {got:?} do not match the model config {want:?}"
            )));
        }
        Ok(())
    }
}

/// `relu(s · h · θ)`.
pub fn gcn_forward<T: Real>(tape: &mut Tape<T>, s: Var, h: Var, theta: Var) -> Result<Var> {
    let ht = tape.matmul(h, theta)?;
    let sh = tape.matmul(s, ht)?;
    Ok(tape.relu(sh))
}

/// [`gcn_forward`] with identity input, `relu(s · θ)`.
fn gcn_forward_one_hot<T: Real>(tape: &mut Tape<T>, s: Var, theta: Var) -> Result<Var> {
    let sh = tape.matmul(s, theta)?;
    Ok(tape.relu(sh))
}

/// Normalised adjacencies of one subject at the scales a model consumes.
#[derive(Clone, Debug)]
pub struct SampleGraphs<T> {
    scales: Vec<usize>,
    adj: Vec<Arc<Tensor2D<T>>>,
}

impl<T: Real> SampleGraphs<T> {
    pub fn prepare(cfg: &ModelConfig, stack: &ScaleStack<T>) -> Result<Self> {
        let scales = cfg.effective_scales().to_vec();
        let adj = scales
            .iter()
            .map(|&s| {
                let fcn = stack
                    .get(s)
                    .ok_or_else(|| Error::Data(format!("scale {s} missing from subject stack")))?;
                normalize_adjacency(fcn.values(), cfg.degree_mode).map(Arc::new)
            })
            .collect::<Result<_>>()?;
        Ok(Self { scales, adj })
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn adjacency(&self, k: usize) -> &Arc<Tensor2D<T>> {
        &self.adj[k]
    }
}

/// Tape handles of the parameters inside one forward pass.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub thetas: Vec<Var>,
    pub fl1_w: Var,
    pub fl1_b: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
    pub fl2_w: Var,
    pub fl2_b: Var,
}

impl ParamVars {
    /// Same order as [`MahgcnParams::trainable`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.thetas.clone();
        v.extend([
            self.fl1_w,
            self.fl1_b,
            self.bn_gamma,
            self.bn_beta,
            self.fl2_w,
            self.fl2_b,
        ]);
        v
    }
}

/// A batch forward pass with its tape kept alive for backward passes.
pub struct BatchForward<T> {
    pub tape: Tape<T>,
    pub params: ParamVars,
    /// `h[b][k]`: post-ReLU GCN output of sample `b` at scale `k`.
    pub h: Vec<Vec<Var>>,
    /// Batch × fused length.
    pub fused: Var,
    pub logits: Var,
    pub probs: Var,
    /// Running statistics after this pass (updated in train mode).
    pub bn_stats: BatchNormStats<T>,
}

/// Per-sample view of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub h: Vec<Tensor2D<T>>,
    pub fused: Vec<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> BatchForward<T> {
    pub fn trace(&self, b: usize) -> ForwardTrace<T> {
        let row = |v: Var| self.tape.value(v).row(b).to_vec();
        ForwardTrace {
            h: self.h[b].iter().map(|&v| self.tape.value(v).clone()).collect(),
            fused: row(self.fused),
            logits: row(self.logits),
            probs: row(self.probs),
        }
    }

    /// Probability of class 1 for each sample.
    pub fn positive_scores(&self) -> Vec<T> {
        let p = self.tape.value(self.probs);
        (0..p.rows()).map(|b| p.get(b, 1)).collect()
    }
}

fn check_maps(cfg: &ModelConfig, maps: &[MappingMatrix]) -> Result<()> {
    let s = cfg.effective_scales();
    if maps.len() != s.len() - 1 {
        return Err(Error::Config(format!(
            "{} mapping matrices supplied for {} scales",
            maps.len(),
            s.len()
        )));
    }
    for (k, m) in maps.iter().enumerate() {
        if (m.fine(), m.coarse()) != (s[k], s[k + 1]) {
            return Err(Error::Config(format!(
                "mapping {k} is {}->{}, expected {}->{}",
                m.fine(),
                m.coarse(),
                s[k],
                s[k + 1]
            )));
        }
    }
    Ok(())
}

/// Runs the configured variant on a batch. `maps` holds one mapping per
/// consecutive configured scale pair and is only read by `mahgcn`.
pub fn forward_batch<T: Real, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &MahgcnParams<T>,
    graphs: &[&SampleGraphs<T>],
    maps: &[MappingMatrix],
    mode: Mode,
    rng: &mut R,
) -> Result<BatchForward<T>> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    if graphs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if cfg.variant == Variant::Mahgcn {
        check_maps(cfg, maps)?;
    }
    for g in graphs {
        if g.scales() != cfg.effective_scales() {
            return Err(Error::Data(format!(
                "sample graphs at scales {:?}, model expects {:?}",
                g.scales(),
                cfg.effective_scales()
            )));
        }
    }

    let mut tape = Tape::new();
    let pv = ParamVars {
        thetas: params.thetas.iter().map(|t| tape.param(t.clone())).collect(),
        fl1_w: tape.param(params.fl1_w.clone()),
        fl1_b: tape.param(params.fl1_b.clone()),
        bn_gamma: tape.param(params.bn_gamma.clone()),
        bn_beta: tape.param(params.bn_beta.clone()),
        fl2_w: tape.param(params.fl2_w.clone()),
        fl2_b: tape.param(params.fl2_b.clone()),
    };

    let mut all_h = Vec::with_capacity(graphs.len());
    let mut rows = Vec::with_capacity(graphs.len());
    for g in graphs {
        let (h, dropped) = match cfg.variant {
            Variant::Mahgcn => mahgcn_features(&mut tape, cfg, &pv, g, maps, mode, rng)?,
            Variant::Magcn | Variant::Gcn => independent_features(&mut tape, cfg, &pv, g, mode, rng)?,
        };
        let fused = if cfg.skip_connections {
            tape.concat_cols_as_stack(&dropped)?
        } else {
            dropped[dropped.len() - 1]
        };
        rows.push(tape.transpose(fused));
        all_h.push(h);
    }
    let fused = tape.vstack(&rows)?;

    let z1 = tape.matmul(fused, pv.fl1_w)?;
    let z1 = tape.add_row(z1, pv.fl1_b)?;
    let mut bn_stats = params.bn_stats.clone();
    let z1 = match mode {
        Mode::Train => tape.batchnorm_train(z1, pv.bn_gamma, pv.bn_beta, &mut bn_stats)?,
        Mode::Eval => tape.batchnorm_eval(z1, pv.bn_gamma, pv.bn_beta, &bn_stats)?,
    };
    let a1 = tape.relu(z1);
    let z2 = tape.matmul(a1, pv.fl2_w)?;
    let logits = tape.add_row(z2, pv.fl2_b)?;
    let probs = tape.softmax_rows(logits);
    Ok(BatchForward {
        tape,
        params: pv,
        h: all_h,
        fused,
        logits,
        probs,
        bn_stats,
    })
}

/// Returns the GCN outputs and their dropped-out copies.
fn mahgcn_features<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    g: &SampleGraphs<T>,
    maps: &[MappingMatrix],
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut hs = Vec::new();
    let mut dropped = Vec::new();
    let s0 = tape.constant_shared(Arc::clone(g.adjacency(0)));
    let mut h = gcn_forward_one_hot(tape, s0, pv.thetas[0])?;
    for k in 0..g.scales().len() {
        if k > 0 {
            let input = dropped[k - 1];
            let pooled = pool(tape, &maps[k - 1], input, cfg.pooling_scheme)?;
            let s = tape.constant_shared(Arc::clone(g.adjacency(k)));
            h = gcn_forward(tape, s, pooled, pv.thetas[k])?;
        }
        hs.push(h);
        dropped.push(tape.dropout(h, cfg.dropout_rate, mode, rng)?);
    }
    Ok((hs, dropped))
}

fn independent_features<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    g: &SampleGraphs<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut hs = Vec::new();
    let mut dropped = Vec::new();
    for k in 0..g.scales().len() {
        let s = tape.constant_shared(Arc::clone(g.adjacency(k)));
        let h = gcn_forward_one_hot(tape, s, pv.thetas[k])?;
        hs.push(h);
        dropped.push(tape.dropout(h, cfg.dropout_rate, mode, rng)?);
    }
    Ok((hs, dropped))
}

/// Eval-mode forward of a single subject.
pub fn forward_one<T: Real>(
    cfg: &ModelConfig,
    params: &MahgcnParams<T>,
    graphs: &SampleGraphs<T>,
    maps: &[MappingMatrix],
) -> Result<BatchForward<T>> {
    // eval mode never draws from the stream
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward_batch(cfg, params, &[graphs], maps, Mode::Eval, &mut rng)
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredCheckpoint {
    config: ModelConfig,
    params: BTreeMap<String, StoredTensor>,
}

/// Model configuration and parameters as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: MahgcnParams<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_json(&self) -> String {
        let store = |t: &Tensor2D<T>| StoredTensor {
            shape: [t.rows(), t.cols()],
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        };
        let mut params: BTreeMap<String, StoredTensor> = self
            .params
            .trainable_names()
            .into_iter()
            .zip(self.params.trainable())
            .map(|(n, t)| (n, store(t)))
            .collect();
        params.insert("bn1.run_mean".into(), store(&self.params.bn_stats.running_mean));
        params.insert("bn1.run_var".into(), store(&self.params.bn_stats.running_var));
        let stored = StoredCheckpoint {
            config: self.config.clone(),
            params,
        };
        let mut s = serde_json::to_string_pretty(&stored).expect("checkpoint serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut stored: StoredCheckpoint =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        stored.config.validate()?;
        let mut take = |name: &str| -> Result<Tensor2D<T>> {
            let t = stored
                .params
                .remove(name)
                .ok_or_else(|| Error::Data(format!("checkpoint: missing parameter {name}")))?;
            let data = t.data.into_iter().map(T::lit).collect();
            Tensor2D::new(t.shape[0], t.shape[1], data)
                .map_err(|e| Error::Data(format!("checkpoint: parameter {name}: {e}")))
        };
        let n = stored.config.theta_rows().len();
        let thetas = (0..n)
            .map(|k| take(&format!("gcn.{k}.theta")))
            .collect::<Result<Vec<_>>>()?;
        let params = MahgcnParams {
            thetas,
            fl1_w: take("fl1.w")?,
            fl1_b: take("fl1.b")?,
            bn_gamma: take("bn1.gamma")?,
            bn_beta: take("bn1.beta")?,
            bn_stats: BatchNormStats {
                running_mean: take("bn1.run_mean")?,
                running_var: take("bn1.run_var")?,
            },
            fl2_w: take("fl2.w")?,
            fl2_b: take("fl2.b")?,
        };
        if let Some(extra) = stored.params.keys().next() {
            return Err(Error::Data(format!("checkpoint: unknown parameter {extra}")));
        }
        params
            .check_shapes(&stored.config)
            .map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        Ok(Self {
            config: stored.config,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?).map_err(|e| match e {
            Error::Data(m) => Error::parse(path, m),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests;
