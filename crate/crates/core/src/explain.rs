//! Grad-CAM attribution over the per-scale GCN outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{MappingMatrix, RsnAssignment, RSN_NAMES};
use crate::error::{Error, Result};
use crate::io::{fmt_g12, write_atomic};
use crate::model::{forward_one, MahgcnParams, ModelConfig, SampleGraphs};
use crate::scalar::Real;

/// Quantity whose gradient drives the attribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamTarget {
    /// Pre-softmax score of the target class.
    #[default]
    Logit,
    /// Softmax probability of the target class.
    Probability,
}

impl std::str::FromStr for CamTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Self::Logit),
            "probability" | "prob" => Ok(Self::Probability),
            _ => Err(Error::Usage(format!("unknown CAM target {s:?}; expected logit or probability"))),
        }
    }
}

/// Non-negative class activation per ROI at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CamVector {
    pub scale: usize,
    pub values: Vec<f64>,
}

/// `relu(∂y/∂h_k ⊙ h_k)` for every configured scale of one subject.
pub fn grad_cam<T: Real>(
    cfg: &ModelConfig,
    params: &MahgcnParams<T>,
    graphs: &SampleGraphs<T>,
    maps: &[MappingMatrix],
    target_class: usize,
    target: CamTarget,
) -> Result<Vec<CamVector>> {
    if target_class >= cfg.num_classes {
        return Err(Error::Usage(format!(
            "target class {target_class} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let mut fwd = forward_one(cfg, params, graphs, maps)?;
    let y = match target {
        CamTarget::Logit => fwd.logits,
        CamTarget::Probability => fwd.probs,
    };
    let y = fwd.tape.select(y, 0, target_class)?;
    let grads = fwd.tape.backward(y)?;
    let hs = fwd
        .h
        .first()
        .ok_or_else(|| Error::Usage("forward pass retained no GCN features".into()))?;
    Ok(hs
        .iter()
        .zip(graphs.scales())
        .map(|(&h, &scale)| {
            let g = grads.wrt(h);
            let values = fwd
                .tape
                .value(h)
                .data()
                .iter()
                .zip(g.data())
                .map(|(&a, &b)| (a * b).as_f64().max(0.0))
                .collect();
            CamVector { scale, values }
        })
        .collect())
}

/// CAMs of many subjects, computed in parallel, returned in input order.
pub fn subject_cams<T: Real>(
    cfg: &ModelConfig,
    params: &MahgcnParams<T>,
    graphs: &[&SampleGraphs<T>],
    maps: &[MappingMatrix],
    target_class: usize,
    target: CamTarget,
) -> Result<Vec<Vec<CamVector>>> {
    graphs
        .par_iter()
        .map(|g| grad_cam(cfg, params, g, maps, target_class, target))
        .collect()
}

fn check_aligned(cams: &[&[CamVector]]) -> Result<()> {
    let first: Vec<(usize, usize)> = cams[0].iter().map(|c| (c.scale, c.values.len())).collect();
    for c in &cams[1..] {
        let shape: Vec<(usize, usize)> = c.iter().map(|c| (c.scale, c.values.len())).collect();
        if shape != first {
            return Err(Error::Shape(format!("CAM scales {shape:?} vs {first:?}")));
        }
    }
    Ok(())
}

fn weighted_sum(cams: &[&[CamVector]], weights: &[f64]) -> Vec<CamVector> {
    cams[0]
        .iter()
        .enumerate()
        .map(|(k, c0)| {
            let mut values = vec![0.0; c0.values.len()];
            for (cam, &w) in cams.iter().zip(weights) {
                for (acc, v) in values.iter_mut().zip(&cam[k].values) {
                    *acc += w * v;
                }
            }
            CamVector {
                scale: c0.scale,
                values,
            }
        })
        .collect()
}

/// Per-ROI mean over the subjects of one group.
pub fn group_cam(cams: &[Vec<CamVector>]) -> Result<Vec<CamVector>> {
    if cams.is_empty() {
        return Err(Error::Data("group contains no subjects".into()));
    }
    let refs: Vec<&[CamVector]> = cams.iter().map(Vec::as_slice).collect();
    check_aligned(&refs)?;
    let mut out = weighted_sum(&refs, &vec![1.0; cams.len()]);
    let n = cams.len() as f64;
    for c in &mut out {
        c.values.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// `Σ_m (auc_m / Σ auc) · cam_m`.
pub fn auc_weighted_cam(cams: &[Vec<CamVector>], aucs: &[f64]) -> Result<Vec<CamVector>> {
    if cams.is_empty() || cams.len() != aucs.len() {
        return Err(Error::Data(format!("{} model CAMs with {} AUCs", cams.len(), aucs.len())));
    }
    if let Some(a) = aucs.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Data(format!("AUC {a} outside [0, 1]")));
    }
    let total: f64 = aucs.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data("every model has AUC 0; weights undefined".into()));
    }
    let refs: Vec<&[CamVector]> = cams.iter().map(Vec::as_slice).collect();
    check_aligned(&refs)?;
    let w: Vec<f64> = aucs.iter().map(|a| a / total).collect();
    Ok(weighted_sum(&refs, &w))
}

/// Mean activation per RSN in legend order; `None` marks an RSN without ROIs.
#[derive(Clone, Debug, PartialEq)]
pub struct RsnProfile {
    pub scale: usize,
    pub means: [Option<f64>; 7],
}

pub fn rsn_profile(cam: &CamVector, rsn: &RsnAssignment) -> Result<RsnProfile> {
    if rsn.scale() != cam.values.len() {
        return Err(Error::Data(format!(
            "RSN table covers {} ROIs but the CAM has {}",
            rsn.scale(),
            cam.values.len()
        )));
    }
    let mut sum = [0.0; 7];
    let mut count = [0usize; 7];
    for (&id, v) in rsn.ids().iter().zip(&cam.values) {
        sum[id as usize - 1] += v;
        count[id as usize - 1] += 1;
    }
    let mut means = [None; 7];
    for i in 0..7 {
        if count[i] > 0 {
            means[i] = Some(sum[i] / count[i] as f64);
        }
    }
    Ok(RsnProfile {
        scale: cam.scale,
        means,
    })
}

pub fn cam_path(dir: &Path, scale: usize) -> PathBuf {
    dir.join(format!("cam_{scale}.csv"))
}

/// One `cam_<scale>.csv` per scale with rows `roi,activation`.
pub fn write_cams(dir: &Path, cams: &[CamVector]) -> Result<Vec<PathBuf>> {
    cams.iter()
        .map(|c| {
            let mut out = String::from("roi,activation\n");
            for (i, v) in c.values.iter().enumerate() {
                let _ = writeln!(out, "{},{}", i + 1, fmt_g12(*v));
            }
            let p = cam_path(dir, c.scale);
            write_atomic(&p, out.as_bytes())?;
            Ok(p)
        })
        .collect()
}

/// `rsn_profile.csv`; absent RSNs are written as `NA`.
pub fn write_rsn_profiles(path: &Path, profiles: &[RsnProfile]) -> Result<()> {
    let mut out = String::from("scale,rsn_id,rsn_name,mean_activation\n");
    for p in profiles {
        for (i, m) in p.means.iter().enumerate() {
            let v = m.map_or_else(|| "NA".to_string(), fmt_g12);
            let _ = writeln!(out, "{},{},{},{v}", p.scale, i + 1, RSN_NAMES[i]);
        }
    }
    write_atomic(path, out.as_bytes())
}
