//! Functional connectivity networks and the graph operators derived from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor2D;
use crate::error::{Error, Result};
use crate::io::{fmt_g12, parse_numeric_csv, read_text, write_atomic};
use crate::scalar::Real;

/// Smallest degree accepted under [`DegreeMode::Raw`].
pub const MIN_RAW_DEGREE: f64 = 1e-6;

/// ROI signals, one column per ROI and one row per time point.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiTimeSeries<T> {
    values: Tensor2D<T>,
}

impl<T: Real> RoiTimeSeries<T> {
    pub fn new(values: Tensor2D<T>) -> Result<Self> {
        if values.rows() < 3 {
            return Err(Error::Input(format!(
                "time series needs at least 3 time points, got {}",
                values.rows()
            )));
        }
        Ok(Self { values })
    }

    pub fn timepoints(&self) -> usize {
        self.values.rows()
    }

    pub fn rois(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor2D<T> {
        &self.values
    }
}

/// Pearson correlation matrix at one atlas scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FcnMatrix<T> {
    values: Tensor2D<T>,
}

impl<T: Real> FcnMatrix<T> {
    /// Validates a square, symmetric matrix with entries in `[-1, 1]`.
    pub fn new(values: Tensor2D<T>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::Input(format!(
                "FCN must be square, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        if !values.is_symmetric(T::lit(1e-12)) {
            return Err(Error::Input("FCN is not symmetric".into()));
        }
        let tol = T::lit(1e-12);
        if values.data().iter().any(|v| v.abs() > T::one() + tol) {
            return Err(Error::Input("FCN entry outside [-1, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn scale(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Tensor2D<T> {
        &self.values
    }
}

/// Output of [`pearson_fcn`]; `zero_variance` lists ROIs whose signal was
/// constant and whose correlations were set to zero.
#[derive(Clone, Debug)]
pub struct PearsonFcn<T> {
    pub fcn: FcnMatrix<T>,
    pub zero_variance: Vec<usize>,
}

impl<T> PearsonFcn<T> {
    pub fn has_warning(&self) -> bool {
        !self.zero_variance.is_empty()
    }
}

/// Pairwise Pearson correlation of ROI signals.
pub fn pearson_fcn<T: Real>(ts: &RoiTimeSeries<T>) -> Result<PearsonFcn<T>> {
    let x = ts.values();
    let (t, r) = x.shape();
    if t < 3 {
        return Err(Error::Input(format!("need at least 3 time points, got {t}")));
    }
    let tt = T::from_usize(t).unwrap();
    let mut centered = vec![T::zero(); t * r];
    let mut norms = vec![T::zero(); r];
    for j in 0..r {
        let mean = (0..t).map(|i| x.get(i, j)).sum::<T>() / tt;
        let mut ss = T::zero();
        for i in 0..t {
            let d = x.get(i, j) - mean;
            centered[j * t + i] = d;
            ss = ss + d * d;
        }
        norms[j] = ss.sqrt();
    }
    // zero variance relative to signal magnitude
    let zero_variance: Vec<usize> = (0..r)
        .filter(|&j| {
            let scale = (0..t).map(|i| x.get(i, j).abs()).fold(T::zero(), T::max);
            norms[j] <= T::epsilon() * T::lit(16.0) * scale.max(T::min_positive_value())
                * T::from_usize(t).unwrap().sqrt()
                || norms[j] == T::zero()
        })
        .collect();
    let mut out = vec![T::zero(); r * r];
    for i in 0..r {
        out[i * r + i] = T::one();
        if zero_variance.contains(&i) {
            continue;
        }
        let ci = &centered[i * t..(i + 1) * t];
        for j in i + 1..r {
            if zero_variance.contains(&j) {
                continue;
            }
            let cj = &centered[j * t..(j + 1) * t];
            let dot: T = ci.iter().zip(cj).map(|(&a, &b)| a * b).sum();
            let v = (dot / (norms[i] * norms[j])).max(-T::one()).min(T::one());
            out[i * r + j] = v;
            out[j * r + i] = v;
        }
    }
    let fcn = FcnMatrix {
        values: Tensor2D::from_op(r, r, out, "pearson")?,
    };
    Ok(PearsonFcn { fcn, zero_variance })
}

/// How node degrees are formed from possibly negative edge weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegreeMode {
    /// Plain row sums; a degree at or below [`MIN_RAW_DEGREE`] is an error.
    #[default]
    Raw,
    /// Row sums of absolute weights.
    Absolute,
}

/// Row sums, summed in sorted order so that the result does not depend on
/// node ordering.
fn degrees<T: Real>(a: &Tensor2D<T>, self_loop: bool, mode: DegreeMode) -> Vec<T> {
    let n = a.rows();
    let mut row = Vec::with_capacity(n + 1);
    (0..n)
        .map(|i| {
            row.clear();
            row.extend(a.row(i).iter().map(|&v| match mode {
                DegreeMode::Raw => v,
                DegreeMode::Absolute => v.abs(),
            }));
            if self_loop {
                row[i] = row[i] + T::one();
            }
            row.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
            row.iter().copied().sum()
        })
        .collect()
}

fn checked_degrees<T: Real>(d: Vec<T>, mode: DegreeMode) -> Result<Vec<T>> {
    d.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let bad = match mode {
                DegreeMode::Raw => v <= T::lit(MIN_RAW_DEGREE),
                DegreeMode::Absolute => v <= T::zero(),
            };
            if bad {
                Err(Error::DegenerateDegree {
                    node: i,
                    degree: v.as_f64(),
                })
            } else {
                Ok(v)
            }
        })
        .collect()
}

fn check_square<T: Real>(a: &Tensor2D<T>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "adjacency must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(())
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
pub fn normalize_adjacency<T: Real>(a: &Tensor2D<T>, mode: DegreeMode) -> Result<Tensor2D<T>> {
    check_square(a)?;
    let n = a.rows();
    let d = checked_degrees(degrees(a, true, mode), mode)?;
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let w = if i == j { a.get(i, j) + T::one() } else { a.get(i, j) };
            // d_i * d_j commutes exactly, which keeps the result symmetric
            out[i * n + j] = w / (d[i] * d[j]).sqrt();
        }
    }
    Tensor2D::from_op(n, n, out, "normalize_adjacency")
}

/// Symmetric normalised Laplacian `I − D^{-1/2} A D^{-1/2}`.
pub fn laplacian<T: Real>(a: &Tensor2D<T>, mode: DegreeMode) -> Result<Tensor2D<T>> {
    check_square(a)?;
    let n = a.rows();
    let d = checked_degrees(degrees(a, false, mode), mode)?;
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let w = a.get(i, j) / (d[i] * d[j]).sqrt();
            out[i * n + j] = if i == j { T::one() - w } else { -w };
        }
    }
    Tensor2D::from_op(n, n, out, "laplacian")
}

/// Per-subject FCNs across atlas scales, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleStack<T> {
    scales: Vec<usize>,
    fcns: Vec<FcnMatrix<T>>,
}

impl<T: Real> ScaleStack<T> {
    pub fn new(fcns: Vec<FcnMatrix<T>>) -> Result<Self> {
        if fcns.is_empty() {
            return Err(Error::Input("scale stack is empty".into()));
        }
        let scales: Vec<usize> = fcns.iter().map(FcnMatrix::scale).collect();
        check_descending(&scales)?;
        Ok(Self { scales, fcns })
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn fcns(&self) -> &[FcnMatrix<T>] {
        &self.fcns
    }

    pub fn get(&self, scale: usize) -> Option<&FcnMatrix<T>> {
        self.scales
            .iter()
            .position(|&s| s == scale)
            .map(|k| &self.fcns[k])
    }

    /// Sub-stack for the requested scales, which need not be adjacent.
    pub fn select(&self, scales: &[usize]) -> Result<Self> {
        check_descending(scales)?;
        let fcns = scales
            .iter()
            .map(|&s| {
                self.get(s)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("scale {s} missing from stack")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scales: scales.to_vec(),
            fcns,
        })
    }
}

pub(crate) fn check_descending(scales: &[usize]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::Config("scale list is empty".into()));
    }
    if scales.iter().any(|&s| s == 0) {
        return Err(Error::Config("scales must be positive".into()));
    }
    if scales.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config(format!(
            "scales must be strictly descending, got {scales:?}"
        )));
    }
    Ok(())
}

/// Reads a time-series CSV with a `roi_1..roi_R` header.
pub fn read_timeseries_csv(path: &Path) -> Result<RoiTimeSeries<f64>> {
    let text = read_text(path)?;
    let header = text
        .lines()
        .next()
        .ok_or_else(|| Error::parse(path, "empty file"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    for (k, name) in names.iter().enumerate() {
        if *name != format!("roi_{}", k + 1) {
            return Err(Error::parse(
                path,
                format!("header column {} is {name:?}, expected roi_{}", k + 1, k + 1),
            ));
        }
    }
    let rows = parse_numeric_csv(path, &text, true)?;
    if rows.iter().any(|r| r.len() != names.len()) {
        return Err(Error::parse(path, "row length differs from header"));
    }
    let t = rows.len();
    let values = Tensor2D::new(t, names.len(), rows.into_iter().flatten().collect())
        .map_err(|e| Error::parse(path, e.to_string()))?;
    RoiTimeSeries::new(values)
}

pub fn write_timeseries_csv<T: Real>(path: &Path, ts: &RoiTimeSeries<T>) -> Result<()> {
    let r = ts.rois();
    let mut out = (1..=r).map(|k| format!("roi_{k}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    write_rows(&mut out, ts.values());
    write_atomic(path, out.as_bytes())
}

fn write_rows<T: Real>(out: &mut String, m: &Tensor2D<T>) {
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| fmt_g12(v.as_f64())).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
}

/// Writes an FCN as headerless CSV with `%.12g` values.
pub fn write_fcn_csv<T: Real>(path: &Path, fcn: &FcnMatrix<T>) -> Result<()> {
    let mut out = String::new();
    write_rows(&mut out, fcn.values());
    write_atomic(path, out.as_bytes())
}

pub fn read_fcn_csv(path: &Path) -> Result<FcnMatrix<f64>> {
    let text = read_text(path)?;
    let rows = parse_numeric_csv(path, &text, false)?;
    let values = Tensor2D::from_rows(&rows).map_err(|e| Error::parse(path, e.to_string()))?;
    FcnMatrix::new(values).map_err(|e| Error::parse(path, e.to_string()))
}
