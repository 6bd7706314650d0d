//! Loss weighting, Adam, fold training and repeated holdout evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::MappingMatrix;
use crate::dataset::{build_maps, Dataset};
use crate::diffcore::{Mode, Tensor2D};
use crate::error::{Error, Result};
use crate::io::{read_text, round_g12, write_atomic};
use crate::model::{forward_batch, init_params, Checkpoint, MahgcnParams, ModelConfig, SampleGraphs};
use crate::scalar::Real;
use crate::seed::{derive_seed, stream, Role};
use crate::stats::MetricRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of the gradient.
    pub decoupled_weight_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub repeats: usize,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.001,
            batch_size: 30,
            weight_decay: 0.01,
            decoupled_weight_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            repeats: 5,
            test_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2 for batch normalisation".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", format!("{} must be finite and >= 0", self.weight_decay));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(key, format!("{v} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps", format!("{} must be > 0", self.eps));
        }
        if self.repeats == 0 {
            return bad("repeats", "must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction", format!("{} outside (0, 1)", self.test_fraction));
        }
        Ok(())
    }
}

/// `w_c = N / N_c`.
pub fn class_weights(labels: &[usize]) -> Result<[f64; 2]> {
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.iter().filter(|&&l| l == 0).count();
    if n0 + n1 != labels.len() {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    if n0 == 0 || n1 == 0 {
        return Err(Error::Data("training set contains a single class".into()));
    }
    let n = labels.len() as f64;
    Ok([n / n0 as f64, n / n1 as f64])
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor2D<T>]) -> Self {
        let zeros = |t: &&Tensor2D<T>| vec![T::zero(); t.len()];
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    /// Number of completed steps.
    pub fn step(&self) -> i32 {
        self.step
    }
}

/// One bias-corrected Adam update with L2 weight decay.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor2D<T>],
    grads: &[Tensor2D<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient {k} shape {:?} vs {:?}", g.shape(), p.shape())));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in parameter {k} at element {i}")));
        }
    }
    state.step += 1;
    let t = state.step;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let lr = T::lit(cfg.learning_rate);
    let wd = T::lit(cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, &raw)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = if cfg.decoupled_weight_decay { raw } else { raw + wd * *w };
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            if cfg.decoupled_weight_decay {
                *w = *w - lr * wd * *w;
            }
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
        if let Some(i) = p.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {k} became non-finite at element {i}")));
        }
    }
    Ok(())
}

/// Splits shuffled indices into batches of `size`; a trailing batch of one
/// joins the batch before it.
pub fn make_batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Seeds for one fold's stochastic consumers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FoldSeeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
}

impl FoldSeeds {
    pub fn derive(base: u64, repeat: usize) -> Self {
        let r = repeat as u64;
        Self {
            init: derive_seed(base, Role::Init, r),
            shuffle: derive_seed(base, Role::Shuffle, r),
            dropout: derive_seed(base, Role::Dropout, r),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedFold<T> {
    pub params: MahgcnParams<T>,
    /// Sample-weighted mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains one model from scratch on `graphs`/`labels`.
pub fn train_fold<T: Real>(
    model: &ModelConfig,
    train: &TrainConfig,
    graphs: &[&SampleGraphs<T>],
    labels: &[usize],
    maps: &[MappingMatrix],
    seeds: FoldSeeds,
) -> Result<TrainedFold<T>> {
    model.validate()?;
    train.validate()?;
    if graphs.len() != labels.len() {
        return Err(Error::Input(format!("{} samples, {} labels", graphs.len(), labels.len())));
    }
    for c in 0..2 {
        if labels.iter().filter(|&&l| l == c).count() < 2 {
            return Err(Error::Data(format!("training set needs at least 2 samples of class {c}")));
        }
    }
    let weights = class_weights(labels)?;
    let weights = [T::lit(weights[0]), T::lit(weights[1])];
    let mut params = init_params::<T>(model, seeds.init)?;
    let mut adam = AdamState::new(&params.trainable());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seeds.dropout);
    let n = graphs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in make_batches(&order, train.batch_size) {
            let bg: Vec<&SampleGraphs<T>> = batch.iter().map(|&i| graphs[i]).collect();
            let bl: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut out = forward_batch(model, &params, &bg, maps, Mode::Train, &mut dropout_rng)?;
            let loss = out.tape.weighted_cross_entropy(out.logits, &bl, &weights)?;
            let value = out.tape.value(loss).get(0, 0).as_f64();
            total += value * batch.len() as f64;
            let g = out.tape.backward(loss)?;
            let grads: Vec<Tensor2D<T>> = out.params.all().iter().map(|&v| g.wrt(v)).collect();
            adam_step(&mut params.trainable_mut(), &grads, &mut adam, train).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            params.bn_stats = out.bn_stats;
        }
        curve.push(total / n as f64);
    }
    Ok(TrainedFold {
        params,
        loss_curve: curve,
    })
}

/// Eval-mode class-1 probabilities.
pub fn predict_scores<T: Real>(
    model: &ModelConfig,
    params: &MahgcnParams<T>,
    graphs: &[&SampleGraphs<T>],
    maps: &[MappingMatrix],
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward_batch(model, params, graphs, maps, Mode::Eval, &mut rng)?;
    Ok(out.positive_scores().into_iter().map(Real::as_f64).collect())
}

/// Stratified split: each class contributes `round(n_c · fraction)` test
/// samples, at least one, leaving at least two for training.
pub fn stratified_split<R: Rng + ?Sized>(
    labels: &[usize],
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..2 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < 3 {
            return Err(Error::Data(format!(
                "class {c} has {} samples; need at least 3 for a holdout split",
                idx.len()
            )));
        }
        idx.shuffle(rng);
        let k = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 2);
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Results of repeated holdout evaluation, ordered by repeat.
#[derive(Clone, Debug)]
pub struct CvResult<T> {
    pub records: Vec<MetricRecord>,
    pub checkpoints: Vec<Checkpoint<T>>,
}

/// Prepares normalised adjacencies for every sample.
pub fn prepare_graphs<T: Real>(model: &ModelConfig, ds: &Dataset<T>) -> Result<Vec<SampleGraphs<T>>> {
    ds.samples
        .par_iter()
        .map(|s| {
            SampleGraphs::prepare(model, &s.stack).map_err(|e| match e {
                Error::DegenerateDegree { node, degree } => {
                    Error::Numeric(format!("subject {}: degree {degree} at node {node}", s.id))
                }
                other => other,
            })
        })
        .collect()
}

/// Stratified repeated 80/20 holdout. Repeats run on `jobs` threads; the
/// result does not depend on `jobs`.
pub fn holdout_cv<T: Real>(
    model: &ModelConfig,
    train: &TrainConfig,
    ds: &Dataset<T>,
    seed: u64,
    jobs: usize,
) -> Result<CvResult<T>> {
    model.validate()?;
    train.validate()?;
    let labels = ds.labels();
    let maps = build_maps(model, &ds.atlases)?;
    let graphs = prepare_graphs(model, ds)?;
    let run = |r: usize| -> Result<(MetricRecord, Checkpoint<T>)> {
        let mut split_rng = stream(seed, Role::Split, r as u64);
        let (tr, te) = stratified_split(&labels, train.test_fraction, &mut split_rng)?;
        let tr_g: Vec<&SampleGraphs<T>> = tr.iter().map(|&i| &graphs[i]).collect();
        let tr_l: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
        let fold = train_fold(model, train, &tr_g, &tr_l, &maps, FoldSeeds::derive(seed, r))?;
        let te_g: Vec<&SampleGraphs<T>> = te.iter().map(|&i| &graphs[i]).collect();
        let scores = predict_scores(model, &fold.params, &te_g, &maps)?;
        let te_l: Vec<usize> = te.iter().map(|&i| labels[i]).collect();
        let ids = te.iter().map(|&i| ds.samples[i].id.clone()).collect();
        let mut rec = MetricRecord::from_scores(scores, te_l, ids)
            .map_err(|e| Error::Data(format!("repeat {r}: {e}")))?;
        rec.train_loss = fold.loss_curve;
        log::info!("repeat {r}: acc {:.3} auc {:.3}", rec.acc, rec.auc);
        Ok((
            rec,
            Checkpoint {
                config: model.clone(),
                params: fold.params,
            },
        ))
    };
    let results: Vec<Result<(MetricRecord, Checkpoint<T>)>> = if jobs <= 1 {
        (0..train.repeats).map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {jobs} worker threads: {e}")))?;
        pool.install(|| (0..train.repeats).into_par_iter().map(run).collect())
    };
    let mut records = Vec::with_capacity(results.len());
    let mut checkpoints = Vec::with_capacity(results.len());
    for r in results {
        let (rec, ck) = r?;
        records.push(rec);
        checkpoints.push(ck);
    }
    Ok(CvResult { records, checkpoints })
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub seed: u64,
    pub config: serde_json::Value,
    pub repeats: Vec<MetricRecord>,
}

impl MetricsFile {
    /// Copy with every float rounded to 12 significant digits.
    pub fn rounded(&self) -> Self {
        let r = |v: &[f64]| v.iter().map(|&x| round_g12(x)).collect();
        let repeats = self
            .repeats
            .iter()
            .map(|m| MetricRecord {
                acc: round_g12(m.acc),
                sen: m.sen.map(round_g12),
                spe: m.spe.map(round_g12),
                auc: round_g12(m.auc),
                scores: r(&m.scores),
                labels: m.labels.clone(),
                test_ids: m.test_ids.clone(),
                train_loss: r(&m.train_loss),
            })
            .collect();
        Self {
            seed: self.seed,
            config: self.config.clone(),
            repeats,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.rounded()).expect("metrics serialise");
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        for (i, rec) in m.repeats.iter().enumerate() {
            let err = rec.recompute_error().map_err(|e| Error::parse(path, format!("repeat {i}: {e}")))?;
            if err > 1e-9 {
                return Err(Error::parse(
                    path,
                    format!("repeat {i}: stored metrics differ from scores by {err:e}"),
                ));
            }
        }
        Ok(m)
    }
}
