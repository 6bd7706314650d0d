//! Labelled subjects on disk and the atlas files that travel with them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::atlas::{compute_overlap, mapping_matrix, LabelVolume, MappingMatrix, RsnAssignment};
use crate::connectome::{pearson_fcn, read_fcn_csv, read_timeseries_csv, write_fcn_csv, ScaleStack};
use crate::error::{Error, Result};
use crate::io::{read_text, write_atomic};
use crate::model::ModelConfig;
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct LabeledSample<T> {
    pub id: String,
    /// 0 for controls, 1 for patients.
    pub label: usize,
    pub stack: ScaleStack<T>,
}

/// Subjects plus per-scale atlas volumes and RSN tables.
#[derive(Clone, Debug, Default)]
pub struct Dataset<T> {
    pub samples: Vec<LabeledSample<T>>,
    pub atlases: BTreeMap<usize, LabelVolume>,
    pub rsn: BTreeMap<usize, RsnAssignment>,
}

impl<T: Real> Dataset<T> {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

pub fn subject_fcn_path(dir: &Path, id: &str, scale: usize) -> PathBuf {
    dir.join(id).join(format!("fcn_{scale}.csv"))
}

pub fn subject_ts_path(dir: &Path, id: &str, scale: usize) -> PathBuf {
    dir.join(id).join(format!("ts_{scale}.csv"))
}

pub fn atlas_path(dir: &Path, scale: usize) -> PathBuf {
    dir.join("atlas").join(format!("atlas_{scale}.tsv"))
}

pub fn rsn_path(dir: &Path, scale: usize) -> PathBuf {
    dir.join("atlas").join(format!("rsn_{scale}.tsv"))
}

/// Reads `subjects.tsv`: header `id<TAB>label`, then one subject per line.
pub fn read_subjects(dir: &Path) -> Result<Vec<(String, usize)>> {
    let path = dir.join("subjects.tsv");
    let text = read_text(&path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if n == 0 && line.starts_with("id") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        let label = match (f.len(), f.get(1).map(|s| s.parse::<usize>())) {
            (2, Some(Ok(l))) if l <= 1 => l,
            _ => {
                return Err(Error::parse(
                    &path,
                    format!("line {}: expected `id<TAB>0|1`", n + 1),
                ))
            }
        };
        if f[0].is_empty() || f[0].contains(['/', '\\']) || f[0] == "atlas" {
            return Err(Error::parse(&path, format!("line {}: invalid subject id {:?}", n + 1, f[0])));
        }
        out.push((f[0].to_string(), label));
    }
    let mut ids: Vec<&str> = out.iter().map(|(id, _)| id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::parse(&path, format!("duplicate subject id {:?}", w[0])));
    }
    if out.is_empty() {
        return Err(Error::parse(&path, "no subjects"));
    }
    Ok(out)
}

/// Loads the subjects at `scales`. Each scale comes from `fcn_<s>.csv`,
/// or from `ts_<s>.csv` through Pearson correlation when no FCN exists.
/// Atlas and RSN files are loaded when present.
pub fn load_dataset(dir: &Path, scales: &[usize]) -> Result<Dataset<f64>> {
    let subjects = read_subjects(dir)?;
    let samples = subjects
        .par_iter()
        .map(|(id, label)| {
            let fcns = scales
                .iter()
                .map(|&s| {
                    let fcn_path = subject_fcn_path(dir, id, s);
                    let fcn = if fcn_path.exists() {
                        read_fcn_csv(&fcn_path)?
                    } else {
                        let ts_path = subject_ts_path(dir, id, s);
                        if !ts_path.exists() {
                            return Err(Error::Data(format!(
                                "subject {id}: neither {} nor {} exists",
                                fcn_path.display(),
                                ts_path.display()
                            )));
                        }
                        let p = pearson_fcn(&read_timeseries_csv(&ts_path)?)?;
                        if p.has_warning() {
                            log::warn!("subject {id} scale {s}: zero-variance ROIs {:?}", p.zero_variance);
                        }
                        p.fcn
                    };
                    if fcn.scale() != s {
                        return Err(Error::Data(format!(
                            "subject {id}: {} has {} ROIs",
                            fcn_path.display(),
                            fcn.scale()
                        )));
                    }
                    Ok(fcn)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LabeledSample {
                id: id.clone(),
                label: *label,
                stack: ScaleStack::new(fcns)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut atlases = BTreeMap::new();
    let mut rsn = BTreeMap::new();
    for &s in scales {
        let p = atlas_path(dir, s);
        if p.exists() {
            let v = LabelVolume::read(&p)?;
            if v.scale() != s {
                return Err(Error::parse(&p, format!("declares scale {}", v.scale())));
            }
            atlases.insert(s, v);
        }
        let p = rsn_path(dir, s);
        if p.exists() {
            let r = RsnAssignment::read(&p)?;
            if r.scale() != s {
                return Err(Error::parse(&p, format!("covers {} ROIs", r.scale())));
            }
            rsn.insert(s, r);
        }
    }
    Ok(Dataset { samples, atlases, rsn })
}

/// Writes subjects, FCNs and atlas files; returns the written paths.
pub fn write_dataset(dir: &Path, ds: &Dataset<f64>) -> Result<Vec<PathBuf>> {
    let mut subjects = String::from("id\tlabel\n");
    for s in &ds.samples {
        let _ = writeln!(subjects, "{}\t{}", s.id, s.label);
    }
    let mut written = vec![dir.join("subjects.tsv")];
    write_atomic(&written[0], subjects.as_bytes())?;
    let per_subject = ds
        .samples
        .par_iter()
        .map(|s| {
            s.stack
                .fcns()
                .iter()
                .map(|f| {
                    let p = subject_fcn_path(dir, &s.id, f.scale());
                    write_fcn_csv(&p, f)?;
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    written.extend(per_subject.into_iter().flatten());
    for (s, v) in &ds.atlases {
        let p = atlas_path(dir, *s);
        v.write(&p)?;
        written.push(p);
    }
    for (s, r) in &ds.rsn {
        let p = rsn_path(dir, *s);
        r.write(&p)?;
        written.push(p);
    }
    Ok(written)
}

/// Mapping matrices between consecutive configured scales.
pub fn build_maps(cfg: &ModelConfig, atlases: &BTreeMap<usize, LabelVolume>) -> Result<Vec<MappingMatrix>> {
    let scales = cfg.effective_scales();
    scales
        .windows(2)
        .map(|w| {
            let get = |s: usize| {
                atlases
                    .get(&s)
                    .ok_or_else(|| Error::Data(format!("atlas for scale {s} is missing")))
            };
            let t = compute_overlap(get(w[0])?, get(w[1])?)?;
            let m = mapping_matrix(&t, cfg.th)?;
            let zero = m.zero_rows();
            if !zero.is_empty() {
                log::warn!(
                    "mapping {}->{} at th={}: {} fine ROIs have no coarse assignment",
                    w[0],
                    w[1],
                    cfg.th,
                    zero.len()
                );
            }
            Ok(m)
        })
        .collect()
}
