//! Synthetic hierarchical connectomes with a planted class effect.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{LabelVolume, RsnAssignment, Voxel};
use crate::connectome::{check_descending, pearson_fcn, RoiTimeSeries, ScaleStack};
use crate::dataset::{Dataset, LabeledSample};
use crate::diffcore::Tensor2D;
use crate::error::{Error, Result};
use crate::seed::{stream, Role};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// ROI counts, finest first; each must be divisible by `modules`.
    pub scales: Vec<usize>,
    /// Number of latent modules.
    pub modules: usize,
    pub timepoints: usize,
    pub samples_per_class: usize,
    /// Strength of the shared signal added to the effect modules in class 1.
    pub delta: f64,
    /// ROI-level noise standard deviation.
    pub sigma: f64,
    /// Weight of a whole-brain signal shared by every ROI. Keeps FCN row
    /// sums positive so raw degrees stay valid.
    pub global_weight: f64,
    /// Log-scale spread of a per-subject, per-ROI lognormal factor (mean 1)
    /// on the effect loading. Large values leave the effect coherent only in
    /// module averages.
    pub effect_jitter: f64,
    /// Modules receiving the class effect.
    pub effect_modules: Vec<usize>,
    /// Voxels per finest-scale ROI in the generated atlases.
    pub voxels_per_roi: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scales: vec![100, 80, 60, 40, 20],
            modules: 10,
            timepoints: 120,
            samples_per_class: 100,
            delta: 0.8,
            sigma: 1.0,
            global_weight: 0.5,
            effect_jitter: 0.0,
            effect_modules: vec![0, 1],
            voxels_per_roi: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_descending(&self.scales).map_err(|e| Error::Config(format!("synth.scales: {e}")))?;
        if self.modules == 0 {
            return Err(Error::Config("synth.modules: must be positive".into()));
        }
        if let Some(s) = self.scales.iter().find(|&&s| s % self.modules != 0) {
            return Err(Error::Config(format!(
                "synth.scales: scale {s} is not divisible by {} modules",
                self.modules
            )));
        }
        if self.timepoints < 3 {
            return Err(Error::Config("synth.timepoints: need at least 3".into()));
        }
        if self.samples_per_class < 1 {
            return Err(Error::Config("synth.samples_per_class: must be positive".into()));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("synth.delta: {} must be finite and >= 0", self.delta)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("synth.sigma: {} must be finite and > 0", self.sigma)));
        }
        if !(self.global_weight >= 0.0 && self.global_weight.is_finite()) {
            return Err(Error::Config(format!(
                "synth.global_weight: {} must be finite and >= 0",
                self.global_weight
            )));
        }
        if !(self.effect_jitter >= 0.0 && self.effect_jitter.is_finite()) {
            return Err(Error::Config(format!(
                "synth.effect_jitter: {} must be finite and >= 0",
                self.effect_jitter
            )));
        }
        if let Some(m) = self.effect_modules.iter().find(|&&m| m >= self.modules) {
            return Err(Error::Config(format!("synth.effect_modules: module {m} does not exist")));
        }
        if self.voxels_per_roi == 0 {
            return Err(Error::Config("synth.voxels_per_roi: must be positive".into()));
        }
        Ok(())
    }

    fn local(&self, k: usize) -> usize {
        self.scales[k] / self.modules
    }

    pub fn total_subjects(&self) -> usize {
        2 * self.samples_per_class
    }
}

/// 0-based label of every finest ROI at scale index `k`. Within a module,
/// local index `i` at one scale maps to `i · n_next / n_this` at the next,
/// so labels are nested across all scale pairs.
fn finest_to_scale(sc: &SynthConfig) -> Vec<Vec<usize>> {
    let n0 = sc.local(0);
    let mut out = Vec::with_capacity(sc.scales.len());
    let mut local: Vec<usize> = (0..n0).collect();
    for k in 0..sc.scales.len() {
        if k > 0 {
            let (a, b) = (sc.local(k - 1), sc.local(k));
            local = local.iter().map(|&i| i * b / a).collect();
        }
        let nk = sc.local(k);
        let labels = (0..sc.modules)
            .flat_map(|m| local.iter().map(move |&i| m * nk + i))
            .collect();
        out.push(labels);
    }
    out
}

/// Nested atlases on a 1-D strip of `voxels_per_roi` voxels per finest ROI.
pub fn synth_atlases(sc: &SynthConfig) -> Result<BTreeMap<usize, LabelVolume>> {
    sc.validate()?;
    let k = sc.voxels_per_roi;
    let n_vox = sc.scales[0] * k;
    finest_to_scale(sc)
        .into_iter()
        .zip(&sc.scales)
        .map(|(labels, &s)| {
            let voxels = (0..n_vox)
                .map(|x| Voxel {
                    x,
                    y: 0,
                    z: 0,
                    label: labels[x / k] + 1,
                })
                .collect();
            Ok((s, LabelVolume::new([n_vox, 1, 1], s, voxels)?))
        })
        .collect()
}

/// RSN id of each ROI: module index mod 7, 1-based.
pub fn synth_rsn(sc: &SynthConfig) -> Result<BTreeMap<usize, RsnAssignment>> {
    sc.validate()?;
    sc.scales
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let nk = sc.local(k);
            let ids = (0..s).map(|r| ((r / nk) % 7 + 1) as u8).collect();
            Ok((s, RsnAssignment::new(ids)?))
        })
        .collect()
}

/// Label of subject `index`; classes alternate.
pub fn synth_label(index: usize) -> usize {
    index % 2
}

pub fn synth_id(index: usize) -> String {
    format!("sub-{:04}", index + 1)
}

/// Time series of one subject at every scale, finest first.
pub fn synth_subject(sc: &SynthConfig, seed: u64, index: usize) -> Result<Vec<RoiTimeSeries<f64>>> {
    sc.validate()?;
    let mut rng = stream(seed, Role::Synth, index as u64);
    let t = sc.timepoints;
    let n0 = sc.local(0);
    let r0 = sc.scales[0];
    let label = synth_label(index);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let latent: Vec<f64> = (0..t * sc.modules).map(|_| normal()).collect();
    let shared: Vec<f64> = (0..t).map(|_| normal()).collect();
    let global: Vec<f64> = (0..t).map(|_| normal()).collect();
    let loading: Vec<f64> = if sc.effect_jitter > 0.0 {
        (0..r0)
            .map(|_| sc.delta * (sc.effect_jitter * normal() - 0.5 * sc.effect_jitter.powi(2)).exp())
            .collect()
    } else {
        vec![sc.delta; r0]
    };
    let mut finest = vec![0.0; t * r0];
    for ti in 0..t {
        for r in 0..r0 {
            let m = r / n0;
            let mut v = latent[ti * sc.modules + m] + sc.global_weight * global[ti] + sc.sigma * normal();
            if label == 1 && sc.effect_modules.contains(&m) {
                v += loading[r] * shared[ti];
            }
            finest[ti * r0 + r] = v;
        }
    }
    finest_to_scale(sc)
        .iter()
        .zip(&sc.scales)
        .map(|(labels, &s)| {
            // voxel average over finest descendants
            let mut counts = vec![0usize; s];
            for &l in labels {
                counts[l] += 1;
            }
            let mut data = vec![0.0; t * s];
            for ti in 0..t {
                for (r, &l) in labels.iter().enumerate() {
                    data[ti * s + l] += finest[ti * r0 + r];
                }
                for (l, &c) in counts.iter().enumerate() {
                    data[ti * s + l] /= c as f64;
                }
            }
            RoiTimeSeries::new(Tensor2D::new(t, s, data)?)
        })
        .collect()
}

/// Builds the full synthetic dataset: FCNs, atlases and RSN tables.
pub fn synth_generate(sc: &SynthConfig, seed: u64) -> Result<Dataset<f64>> {
    sc.validate()?;
    let samples = (0..sc.total_subjects())
        .into_par_iter()
        .map(|i| {
            let fcns = synth_subject(sc, seed, i)?
                .iter()
                .map(|ts| pearson_fcn(ts).map(|p| p.fcn))
                .collect::<Result<Vec<_>>>()?;
            Ok(LabeledSample {
                id: synth_id(i),
                label: synth_label(i),
                stack: ScaleStack::new(fcns)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        atlases: synth_atlases(sc)?,
        rsn: synth_rsn(sc)?,
    })
}
