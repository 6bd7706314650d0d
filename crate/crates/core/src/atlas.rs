//! Multiscale parcellations, inter-scale overlap and atlas-guided pooling.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::connectome::check_descending;
use crate::diffcore::{GroupIndex, Tape, Tensor2D, Var};
use crate::error::{Error, Result};
use crate::io::{read_text, write_atomic};
use crate::scalar::Real;

/// Resting-state network names, indexed by `rsn_id - 1`.
pub const RSN_NAMES: [&str; 7] = ["DMN", "FP", "LIM", "SAL", "ATT", "SM", "VIS"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Voxel {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub label: usize,
}

/// A hard parcellation of a voxel grid into ROIs `1..=scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    scale: usize,
    voxels: Vec<Voxel>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], scale: usize, voxels: Vec<Voxel>) -> Result<Self> {
        if scale == 0 {
            return Err(Error::Input("atlas scale must be positive".into()));
        }
        let mut seen = vec![false; dims.iter().product()];
        let mut counts = vec![0usize; scale];
        for v in &voxels {
            if v.x >= dims[0] || v.y >= dims[1] || v.z >= dims[2] {
                return Err(Error::Input(format!(
                    "voxel ({}, {}, {}) outside grid {dims:?}",
                    v.x, v.y, v.z
                )));
            }
            if v.label == 0 || v.label > scale {
                return Err(Error::Input(format!(
                    "label {} outside 1..{scale}",
                    v.label
                )));
            }
            let idx = linear_index(dims, v);
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::Input(format!(
                    "duplicate voxel ({}, {}, {})",
                    v.x, v.y, v.z
                )));
            }
            counts[v.label - 1] += 1;
        }
        if let Some(r) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Input(format!("ROI {} has no voxels", r + 1)));
        }
        Ok(Self { dims, scale, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    /// Dense label grid, 0 for unlabelled voxels.
    fn grid(&self) -> Vec<usize> {
        let mut g = vec![0; self.dims.iter().product()];
        for v in &self.voxels {
            g[linear_index(self.dims, v)] = v.label;
        }
        g
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, "empty file"))?;
        let f: Vec<&str> = header.trim_start_matches('#').split_whitespace().collect();
        if !header.starts_with('#') || f.len() != 6 || f[0] != "dims" || f[4] != "scale" {
            return Err(Error::parse(path, "expected header `# dims X Y Z scale R`"));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(path, format!("invalid header field {s:?}")))
        };
        let dims = [num(f[1])?, num(f[2])?, num(f[3])?];
        let scale = num(f[5])?;
        let mut voxels = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(Error::parse(path, format!("line {}: expected 4 fields", n + 1)));
            }
            let v = parts
                .iter()
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::parse(path, format!("line {}: invalid integer {p:?}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            voxels.push(Voxel {
                x: v[0],
                y: v[1],
                z: v[2],
                label: v[3],
            });
        }
        Self::new(dims, scale, voxels).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let [x, y, z] = self.dims;
        let mut out = format!("# dims {x} {y} {z} scale {}\n", self.scale);
        for v in &self.voxels {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", v.x, v.y, v.z, v.label);
        }
        write_atomic(path, out.as_bytes())
    }
}

fn linear_index(dims: [usize; 3], v: &Voxel) -> usize {
    v.x + dims[0] * (v.y + dims[1] * v.z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OverlapRow {
    /// 1-based fine ROI.
    pub fine: usize,
    /// 1-based coarse ROI.
    pub coarse: usize,
    pub overlap: usize,
}

/// Voxel overlap counts between a fine and a coarse parcellation.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapTable {
    fine_scale: usize,
    coarse_scale: usize,
    rows: Vec<OverlapRow>,
    fine_totals: Vec<usize>,
}

impl OverlapTable {
    pub fn new(
        fine_scale: usize,
        coarse_scale: usize,
        mut rows: Vec<OverlapRow>,
        fine_totals: Vec<usize>,
    ) -> Result<Self> {
        if fine_totals.len() != fine_scale {
            return Err(Error::Input(format!(
                "{} fine totals for scale {fine_scale}",
                fine_totals.len()
            )));
        }
        rows.sort_by_key(|r| (r.fine, r.coarse));
        let mut covered = vec![0usize; fine_scale];
        for (k, r) in rows.iter().enumerate() {
            if r.fine == 0 || r.fine > fine_scale || r.coarse == 0 || r.coarse > coarse_scale {
                return Err(Error::Input(format!(
                    "overlap row ({}, {}) outside {fine_scale}x{coarse_scale}",
                    r.fine, r.coarse
                )));
            }
            if r.overlap == 0 {
                return Err(Error::Input(format!("zero overlap stored for ({}, {})", r.fine, r.coarse)));
            }
            if k > 0 && rows[k - 1].fine == r.fine && rows[k - 1].coarse == r.coarse {
                return Err(Error::Input(format!("duplicate overlap row ({}, {})", r.fine, r.coarse)));
            }
            covered[r.fine - 1] += r.overlap;
        }
        for (i, (&c, &t)) in covered.iter().zip(&fine_totals).enumerate() {
            if c > t {
                return Err(Error::Input(format!(
                    "fine ROI {} overlaps {c} voxels but has only {t}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            fine_scale,
            coarse_scale,
            rows,
            fine_totals,
        })
    }

    pub fn fine_scale(&self) -> usize {
        self.fine_scale
    }

    pub fn coarse_scale(&self) -> usize {
        self.coarse_scale
    }

    /// Rows sorted by (fine, coarse).
    pub fn rows(&self) -> &[OverlapRow] {
        &self.rows
    }

    /// Voxel count of the 1-based fine ROI `roi`.
    pub fn fine_total(&self, roi: usize) -> usize {
        self.fine_totals[roi - 1]
    }

    pub fn fine_totals(&self) -> &[usize] {
        &self.fine_totals
    }

    /// Writes the table. Fine ROIs without any overlap get a placeholder
    /// row with coarse ROI 0 so that their voxel total survives.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "# fine {} coarse {}\nfine\tcoarse\toverlap\tfine_total\n",
            self.fine_scale, self.coarse_scale
        );
        let mut k = 0;
        for i in 1..=self.fine_scale {
            let total = self.fine_totals[i - 1];
            let start = k;
            while k < self.rows.len() && self.rows[k].fine == i {
                let r = self.rows[k];
                let _ = writeln!(out, "{i}\t{}\t{}\t{total}", r.coarse, r.overlap);
                k += 1;
            }
            if k == start {
                let _ = writeln!(out, "{i}\t0\t0\t{total}");
            }
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut lines = text.lines().enumerate();
        let bad_header = || Error::parse(path, "expected header `# fine R coarse P`");
        let (_, first) = lines.next().ok_or_else(bad_header)?;
        let f: Vec<&str> = first.trim_start_matches('#').split_whitespace().collect();
        if !first.starts_with('#') || f.len() != 4 || f[0] != "fine" || f[2] != "coarse" {
            return Err(bad_header());
        }
        let fine_scale: usize = f[1].parse().map_err(|_| bad_header())?;
        let coarse_scale: usize = f[3].parse().map_err(|_| bad_header())?;
        let mut totals: Vec<Option<usize>> = vec![None; fine_scale];
        let mut rows = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() || line.starts_with("fine") {
                continue;
            }
            let v = line
                .split('\t')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::parse(path, format!("line {}: invalid integer {p:?}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if v.len() != 4 || v[0] == 0 || v[0] > fine_scale {
                return Err(Error::parse(path, format!("line {}: malformed row", n + 1)));
            }
            match totals[v[0] - 1] {
                Some(t) if t != v[3] => {
                    return Err(Error::parse(path, format!("line {}: inconsistent fine_total", n + 1)))
                }
                _ => totals[v[0] - 1] = Some(v[3]),
            }
            if v[1] != 0 {
                rows.push(OverlapRow {
                    fine: v[0],
                    coarse: v[1],
                    overlap: v[2],
                });
            }
        }
        let fine_totals = totals
            .iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::parse(path, format!("fine ROI {} missing", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(fine_scale, coarse_scale, rows, fine_totals).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Counts voxels shared by each (fine, coarse) ROI pair.
pub fn compute_overlap(fine: &LabelVolume, coarse: &LabelVolume) -> Result<OverlapTable> {
    if fine.dims != coarse.dims {
        return Err(Error::Input(format!(
            "grid mismatch: {:?} vs {:?}",
            fine.dims, coarse.dims
        )));
    }
    let coarse_grid = coarse.grid();
    let mut fine_totals = vec![0usize; fine.scale];
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for v in &fine.voxels {
        fine_totals[v.label - 1] += 1;
        let c = coarse_grid[linear_index(fine.dims, v)];
        if c != 0 {
            *counts.entry((v.label, c)).or_default() += 1;
        }
    }
    let rows = counts
        .into_iter()
        .map(|((f, c), overlap)| OverlapRow {
            fine: f,
            coarse: c,
            overlap,
        })
        .collect();
    OverlapTable::new(fine.scale, coarse.scale, rows, fine_totals)
}

/// Binary fine→coarse assignment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingMatrix {
    fine: usize,
    coarse: usize,
    th: f64,
    entries: Vec<bool>,
    groups: Arc<GroupIndex>,
}

impl MappingMatrix {
    /// Builds a mapping from a row-major 0/1 matrix.
    pub fn from_binary(fine: usize, coarse: usize, th: f64, entries: Vec<bool>) -> Result<Self> {
        if entries.len() != fine * coarse || fine == 0 || coarse == 0 {
            return Err(Error::Shape(format!(
                "{} entries for a {fine}x{coarse} mapping",
                entries.len()
            )));
        }
        if fine <= coarse {
            return Err(Error::Input(format!(
                "mapping must go from more to fewer nodes, got {fine}->{coarse}"
            )));
        }
        let members = (0..coarse)
            .map(|j| (0..fine).filter(|&i| entries[i * coarse + j]).collect())
            .collect();
        let groups = Arc::new(GroupIndex::new(fine, members)?);
        Ok(Self {
            fine,
            coarse,
            th,
            entries,
            groups,
        })
    }

    pub fn fine(&self) -> usize {
        self.fine
    }

    pub fn coarse(&self) -> usize {
        self.coarse
    }

    pub fn threshold(&self) -> f64 {
        self.th
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.coarse + j]
    }

    pub fn groups(&self) -> &Arc<GroupIndex> {
        &self.groups
    }

    /// Fine rows with no assignment; such nodes contribute nothing.
    pub fn zero_rows(&self) -> Vec<usize> {
        (0..self.fine)
            .filter(|&i| !(0..self.coarse).any(|j| self.get(i, j)))
            .collect()
    }

    /// Coarse columns with no assigned fine node.
    pub fn zero_columns(&self) -> Vec<usize> {
        (0..self.coarse)
            .filter(|&j| self.groups.members(j).is_empty())
            .collect()
    }

    /// Fine rows assigned to two or more coarse nodes.
    pub fn multi_parent_rows(&self) -> Vec<usize> {
        (0..self.fine)
            .filter(|&i| (0..self.coarse).filter(|&j| self.get(i, j)).count() > 1)
            .collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor2D<T> {
        Tensor2D::from_fn(self.fine, self.coarse, |i, j| {
            if self.get(i, j) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Writes the matrix as CSV of 0/1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for i in 0..self.fine {
            let row: Vec<&str> = (0..self.coarse)
                .map(|j| if self.get(i, j) { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    /// Reads a 0/1 CSV; the threshold is not stored in the file.
    pub fn read_csv(path: &Path, th: f64) -> Result<Self> {
        let text = read_text(path)?;
        let mut entries = Vec::new();
        let mut fine = 0;
        let mut coarse = None;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| match f.trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::parse(path, format!("line {}: entry {other:?} is not 0/1", n + 1))),
                })
                .collect::<Result<Vec<_>>>()?;
            if *coarse.get_or_insert(row.len()) != row.len() {
                return Err(Error::parse(path, format!("line {}: ragged row", n + 1)));
            }
            entries.extend(row);
            fine += 1;
        }
        Self::from_binary(fine, coarse.unwrap_or(0), th, entries).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// `M(i,j) = 1` iff `overlap(i,j) / fine_total(i) > th`.
pub fn mapping_matrix(t: &OverlapTable, th: f64) -> Result<MappingMatrix> {
    if !(0.0..1.0).contains(&th) {
        return Err(Error::Config(format!("threshold {th} outside [0, 1)")));
    }
    if let Some(i) = t.fine_totals.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("fine ROI {} has no voxels", i + 1)));
    }
    let (r, p) = (t.fine_scale, t.coarse_scale);
    let mut entries = vec![false; r * p];
    for row in &t.rows {
        let rho = row.overlap as f64 / t.fine_totals[row.fine - 1] as f64;
        if rho > th {
            entries[(row.fine - 1) * p + (row.coarse - 1)] = true;
        }
    }
    MappingMatrix::from_binary(r, p, th, entries)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingScheme {
    #[default]
    Sum,
    #[serde(alias = "avg", alias = "mean")]
    Average,
    Max,
}

impl std::str::FromStr for PoolingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "average" | "avg" | "mean" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown pooling scheme {other:?}"))),
        }
    }
}

/// Pools `h` (fine×ch) into coarse×ch on the tape.
pub fn pool<T: Real>(tape: &mut Tape<T>, m: &MappingMatrix, h: Var, scheme: PoolingScheme) -> Result<Var> {
    let rows = tape.value(h).rows();
    if rows != m.fine {
        return Err(Error::Shape(format!(
            "cannot pool {rows} rows with a {}x{} mapping",
            m.fine, m.coarse
        )));
    }
    match scheme {
        PoolingScheme::Sum => tape.group_sum(h, &m.groups),
        PoolingScheme::Average => tape.group_mean(h, &m.groups),
        PoolingScheme::Max => tape.group_max(h, &m.groups),
    }
}

/// Per-scale ROI → RSN labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RsnAssignment {
    ids: Vec<u8>,
}

impl RsnAssignment {
    pub fn new(ids: Vec<u8>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("empty RSN assignment".into()));
        }
        if let Some(k) = ids.iter().position(|&id| !(1..=7).contains(&id)) {
            return Err(Error::Input(format!("ROI {} has RSN id {} outside 1..7", k + 1, ids[k])));
        }
        Ok(Self { ids })
    }

    pub fn scale(&self) -> usize {
        self.ids.len()
    }

    /// RSN id (1..=7) of the 1-based ROI.
    pub fn rsn_of(&self, roi: usize) -> u8 {
        self.ids[roi - 1]
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("roi\trsn_id\n");
        for (k, id) in self.ids.iter().enumerate() {
            let _ = writeln!(out, "{}\t{id}", k + 1);
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with("roi") {
                continue;
            }
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            let parsed = (f.len() == 2)
                .then(|| Some((f[0].parse::<usize>().ok()?, f[1].parse::<u8>().ok()?)))
                .flatten()
                .ok_or_else(|| Error::parse(path, format!("line {}: expected `roi<TAB>rsn_id`", n + 1)))?;
            pairs.push(parsed);
        }
        pairs.sort_unstable();
        if pairs.iter().enumerate().any(|(k, &(roi, _))| roi != k + 1) {
            return Err(Error::parse(path, "ROIs must be exactly 1..R, each once"));
        }
        Self::new(pairs.into_iter().map(|(_, id)| id).collect()).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Hierarchy diagnostics for one (fine, coarse) pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairReport {
    pub fine: usize,
    pub coarse: usize,
    pub zero_rows: usize,
    pub multi_parent: usize,
    /// Fraction of fine voxels that fall inside some coarse ROI.
    pub coverage: f64,
}

/// Checks an atlas set ordered finest first. Adjacent pairs are always
/// reported; `extra_pairs` adds non-adjacent (fine, coarse) scale pairs.
pub fn validate_atlas_set(
    volumes: &[LabelVolume],
    th: f64,
    extra_pairs: &[(usize, usize)],
) -> Result<Vec<PairReport>> {
    let scales: Vec<usize> = volumes.iter().map(LabelVolume::scale).collect();
    check_descending(&scales)?;
    let mut pairs: Vec<(usize, usize)> = (1..volumes.len()).map(|k| (k - 1, k)).collect();
    for &(f, c) in extra_pairs {
        let find = |s: usize| {
            scales
                .iter()
                .position(|&x| x == s)
                .ok_or_else(|| Error::Config(format!("scale {s} not in atlas set")))
        };
        let (fi, ci) = (find(f)?, find(c)?);
        if fi >= ci {
            return Err(Error::Config(format!("pair {f}->{c} is not fine to coarse")));
        }
        if !pairs.contains(&(fi, ci)) {
            pairs.push((fi, ci));
        }
    }
    pairs
        .into_iter()
        .map(|(fi, ci)| {
            let t = compute_overlap(&volumes[fi], &volumes[ci])?;
            let m = mapping_matrix(&t, th)?;
            let covered: usize = t.rows.iter().map(|r| r.overlap).sum();
            let total: usize = t.fine_totals.iter().sum();
            Ok(PairReport {
                fine: scales[fi],
                coarse: scales[ci],
                zero_rows: m.zero_rows().len(),
                multi_parent: m.multi_parent_rows().len(),
                coverage: covered as f64 / total as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// 1-D strip of `labels.len()` voxels.
    fn strip(scale: usize, labels: &[usize]) -> LabelVolume {
        let voxels = labels
            .iter()
            .enumerate()
            .map(|(x, &label)| Voxel { x, y: 0, z: 0, label })
            .collect();
        LabelVolume::new([labels.len(), 1, 1], scale, voxels).unwrap()
    }

    /// Fine ROI 4 has 10 voxels, 6 in coarse ROI 1 and 4 in coarse ROI 2;
    /// fine ROIs 1-3 have 2 voxels each.
    fn split_fixture() -> (LabelVolume, LabelVolume) {
        let mut fine = vec![1, 1, 2, 2, 3, 3];
        let mut coarse = vec![1, 1, 1, 1, 2, 2];
        fine.extend([4; 10]);
        coarse.extend([1; 6]);
        coarse.extend([2; 4]);
        (strip(4, &fine), strip(2, &coarse))
    }

    #[test]
    fn volume_invariants() {
        let v = |label| Voxel { x: 0, y: 0, z: 0, label };
        assert!(LabelVolume::new([1, 1, 1], 1, vec![v(2)]).is_err());
        assert!(LabelVolume::new([1, 1, 1], 1, vec![v(1), v(1)]).is_err());
        assert!(LabelVolume::new([1, 1, 1], 2, vec![v(1)]).is_err());
        assert!(LabelVolume::new([1, 1, 1], 1, vec![v(1)]).is_ok());
    }

    #[test]
    fn overlap_identical_volumes_is_diagonal() {
        let a = strip(3, &[1, 2, 2, 3, 3, 3]);
        let t = compute_overlap(&a, &a).unwrap();
        assert_eq!(t.rows().len(), 3);
        for r in t.rows() {
            assert_eq!(r.fine, r.coarse);
            assert_eq!(r.overlap, t.fine_total(r.fine));
        }
    }

    #[test]
    fn overlap_split_fixture() {
        let (fine, coarse) = split_fixture();
        let t = compute_overlap(&fine, &coarse).unwrap();
        let r4: Vec<_> = t.rows().iter().filter(|r| r.fine == 4).copied().collect();
        assert_eq!(
            r4,
            vec![
                OverlapRow { fine: 4, coarse: 1, overlap: 6 },
                OverlapRow { fine: 4, coarse: 2, overlap: 4 }
            ]
        );
        assert_eq!(t.fine_total(4), 10);
    }

    #[test]
    fn overlap_grid_mismatch() {
        let a = strip(2, &[1, 2]);
        let b = strip(1, &[1, 1, 1]);
        assert!(matches!(compute_overlap(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn mapping_thresholds() {
        let (fine, coarse) = split_fixture();
        let t = compute_overlap(&fine, &coarse).unwrap();
        let m0 = mapping_matrix(&t, 0.0).unwrap();
        assert!(m0.get(3, 0) && m0.get(3, 1));
        let m5 = mapping_matrix(&t, 0.5).unwrap();
        assert!(m5.get(3, 0) && !m5.get(3, 1));
        for th in [1.0, -0.1, 1.5] {
            assert!(matches!(mapping_matrix(&t, th), Err(Error::Config(_))));
        }
        // rho = 0.6 exactly at th = 0.6 maps to zero
        let m6 = mapping_matrix(&t, 0.6).unwrap();
        assert_eq!(m6.zero_rows(), vec![3]);
    }

    #[test]
    fn mapping_monotone_in_threshold() {
        let (fine, coarse) = split_fixture();
        let t = compute_overlap(&fine, &coarse).unwrap();
        let lo = mapping_matrix(&t, 0.25).unwrap();
        let hi = mapping_matrix(&t, 0.5).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                assert!(!hi.get(i, j) || lo.get(i, j));
            }
        }
    }

    fn example_mapping() -> MappingMatrix {
        let e = [1, 0, 1, 0, 0, 1, 1, 1].iter().map(|&v| v == 1).collect();
        MappingMatrix::from_binary(4, 2, 0.0, e).unwrap()
    }

    #[test]
    fn pool_examples() {
        let m = example_mapping();
        let h = Tensor2D::column(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let run = |scheme| {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(h.clone());
            let y = pool(&mut tape, &m, x, scheme).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(PoolingScheme::Sum), vec![7.0, 7.0]);
        let avg = run(PoolingScheme::Average);
        assert!((avg[0] - 7.0 / 3.0).abs() < 1e-15 && avg[1] == 3.5);
        assert_eq!(run(PoolingScheme::Max), vec![4.0, 4.0]);
    }

    #[test]
    fn pool_empty_column_names_it() {
        let e = [1, 0, 1, 0, 1, 0].iter().map(|&v| v == 1).collect();
        let m = MappingMatrix::from_binary(3, 2, 0.0, e).unwrap();
        assert_eq!(m.zero_columns(), vec![1]);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor2D::ones(3, 1));
        assert!(pool(&mut tape, &m, x, PoolingScheme::Sum).is_ok());
        for scheme in [PoolingScheme::Average, PoolingScheme::Max] {
            assert!(matches!(pool(&mut tape, &m, x, scheme), Err(Error::EmptyGroup(1))));
        }
        let wrong = tape.constant(Tensor2D::ones(4, 1));
        assert!(matches!(pool(&mut tape, &m, wrong, PoolingScheme::Sum), Err(Error::Shape(_))));
    }

    #[test]
    fn pool_gradients_route_through_groups() {
        let m = example_mapping();
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor2D::column(vec![1.0, 5.0, 3.0, 5.0]).unwrap());
        let y = pool(&mut tape, &m, x, PoolingScheme::Max).unwrap();
        let s = tape.sum(y).unwrap();
        // column 0 = {0,1,3}: tie 5 at rows 1 and 3 goes to row 1
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    /// Nested strip atlas: `fine` ROIs of `k` voxels, parent = i * coarse / fine.
    fn nested(fine: usize, coarse: usize, k: usize) -> (LabelVolume, LabelVolume) {
        let f: Vec<usize> = (0..fine * k).map(|x| x / k + 1).collect();
        let c: Vec<usize> = (0..fine * k).map(|x| (x / k) * coarse / fine + 1).collect();
        (strip(fine, &f), strip(coarse, &c))
    }

    #[test]
    fn nested_set_is_clean() {
        let (a, b) = nested(12, 4, 3);
        let (_, c) = nested(12, 2, 3);
        let rep = validate_atlas_set(&[a.clone(), b.clone(), c.clone()], 0.0, &[(12, 2)]).unwrap();
        assert_eq!(rep.len(), 3);
        for r in &rep {
            assert_eq!((r.zero_rows, r.multi_parent), (0, 0));
            assert_eq!(r.coverage, 1.0);
        }
        assert!(matches!(
            validate_atlas_set(&[b, a, c], 0.0, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn high_threshold_drops_even_split() {
        // fine ROI 3 is split 50/50 between coarse ROIs 1 and 2
        let fine = strip(4, &[1, 1, 2, 2, 3, 3, 4, 4]);
        let coarse = strip(2, &[1, 1, 1, 1, 1, 2, 2, 2]);
        let rep = validate_atlas_set(&[fine.clone(), coarse.clone()], 0.9, &[]).unwrap();
        assert_eq!(rep[0].zero_rows, 1);
        let t = compute_overlap(&fine, &coarse).unwrap();
        assert_eq!(mapping_matrix(&t, 0.9).unwrap().zero_rows(), vec![2]);
    }

    #[test]
    fn one_uneven_split_gives_one_multi_parent() {
        let mut f = Vec::new();
        let mut c = Vec::new();
        for roi in 1..=6 {
            for v in 0..10 {
                f.push(roi);
                // ROI 4 straddles the boundary 60/40
                let parent = if roi < 4 || (roi == 4 && v < 6) { 1 } else { 2 };
                c.push(parent);
            }
        }
        let (fine, coarse) = (strip(6, &f), strip(2, &c));
        // brute-force scan for ROIs touching two parents
        let mut parents = vec![std::collections::BTreeSet::new(); 6];
        for (x, &roi) in f.iter().enumerate() {
            parents[roi - 1].insert(c[x]);
        }
        let expected = parents.iter().filter(|p| p.len() > 1).count();
        let rep = validate_atlas_set(&[fine, coarse], 0.0, &[]).unwrap();
        assert_eq!(expected, 1);
        assert_eq!(rep[0].multi_parent, expected);
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (fine, coarse) = split_fixture();
        let p = dir.path().join("atlas.tsv");
        fine.write(&p).unwrap();
        assert_eq!(LabelVolume::read(&p).unwrap(), fine);

        let t = compute_overlap(&fine, &coarse).unwrap();
        let p = dir.path().join("overlap.tsv");
        t.write(&p).unwrap();
        assert_eq!(OverlapTable::read(&p).unwrap(), t);

        let m = mapping_matrix(&t, 0.0).unwrap();
        let p = dir.path().join("map.csv");
        m.write_csv(&p).unwrap();
        assert_eq!(MappingMatrix::read_csv(&p, 0.0).unwrap(), m);

        let rsn = RsnAssignment::new(vec![1, 7, 3, 3]).unwrap();
        let p = dir.path().join("rsn.tsv");
        rsn.write(&p).unwrap();
        assert_eq!(RsnAssignment::read(&p).unwrap(), rsn);
        assert!(RsnAssignment::new(vec![0]).is_err());
    }

    #[test]
    fn overlap_table_with_uncovered_roi_round_trips() {
        let fine = strip(3, &[1, 2, 3, 3]);
        let coarse = LabelVolume::new(
            [4, 1, 1],
            1,
            vec![Voxel { x: 0, y: 0, z: 0, label: 1 }, Voxel { x: 1, y: 0, z: 0, label: 1 }],
        )
        .unwrap();
        let t = compute_overlap(&fine, &coarse).unwrap();
        assert_eq!(t.fine_total(3), 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.tsv");
        t.write(&p).unwrap();
        assert_eq!(OverlapTable::read(&p).unwrap(), t);
    }

    fn random_partition(rng: &mut ChaCha8Rng) -> (LabelVolume, LabelVolume) {
        let n_vox = rng.random_range(20..60);
        let fine_scale = rng.random_range(4..10);
        let coarse_scale = rng.random_range(2..fine_scale);
        // every label appears at least once, the rest at random
        let mut f: Vec<usize> = (1..=fine_scale).collect();
        f.extend((fine_scale..n_vox).map(|_| rng.random_range(1..=fine_scale)));
        let mut c: Vec<usize> = (1..=coarse_scale).collect();
        c.extend((coarse_scale..n_vox).map(|_| rng.random_range(1..=coarse_scale)));
        (strip(fine_scale, &f), strip(coarse_scale, &c))
    }

    proptest! {
        #[test]
        fn overlap_accounts_for_every_voxel(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (fine, coarse) = random_partition(&mut rng);
            let t = compute_overlap(&fine, &coarse).unwrap();
            let mut brute = vec![0usize; fine.scale()];
            for v in fine.voxels() {
                brute[v.label - 1] += 1;
            }
            for i in 1..=fine.scale() {
                let s: usize = t.rows().iter().filter(|r| r.fine == i).map(|r| r.overlap).sum();
                prop_assert_eq!(s, brute[i - 1]);
                prop_assert_eq!(t.fine_total(i), brute[i - 1]);
            }
        }

        #[test]
        fn sum_pool_matches_brute_force(seed in any::<u64>(), th in 0.0..0.9f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (fine, coarse) = random_partition(&mut rng);
            let t = compute_overlap(&fine, &coarse).unwrap();
            let m = mapping_matrix(&t, th).unwrap();
            let h: Vec<f64> = (0..fine.scale()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut brute = vec![0.0; coarse.scale()];
            for r in t.rows() {
                if r.overlap as f64 / t.fine_total(r.fine) as f64 > th {
                    brute[r.coarse - 1] += h[r.fine - 1];
                }
            }
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor2D::column(h).unwrap());
            let y = pool(&mut tape, &m, x, PoolingScheme::Sum).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(&brute) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn sum_pool_is_linear(seed in any::<u64>(), alpha in -4i32..4, beta in -4i32..4) {
            // dyadic values keep every sum exact
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (fine, coarse) = random_partition(&mut rng);
            let m = mapping_matrix(&compute_overlap(&fine, &coarse).unwrap(), 0.0).unwrap();
            let r = fine.scale();
            let h1: Vec<f64> = (0..r).map(|_| rng.random_range(-64..64) as f64 / 8.0).collect();
            let h2: Vec<f64> = (0..r).map(|_| rng.random_range(-64..64) as f64 / 8.0).collect();
            let (a, b) = (alpha as f64, beta as f64);
            let comb: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| a * x + b * y).collect();
            let pooled = |h: Vec<f64>| {
                let mut tape = Tape::<f64>::new();
                let x = tape.constant(Tensor2D::column(h).unwrap());
                let y = pool(&mut tape, &m, x, PoolingScheme::Sum).unwrap();
                tape.value(y).data().to_vec()
            };
            let lhs = pooled(comb);
            let (p1, p2) = (pooled(h1), pooled(h2));
            for j in 0..lhs.len() {
                prop_assert_eq!(lhs[j], a * p1[j] + b * p2[j]);
            }
        }

        #[test]
        fn mapping_non_increasing_in_threshold(seed in any::<u64>(), t1 in 0.0..0.99f64, t2 in 0.0..0.99f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (fine, coarse) = random_partition(&mut rng);
            let t = compute_overlap(&fine, &coarse).unwrap();
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let (ml, mh) = (mapping_matrix(&t, lo).unwrap(), mapping_matrix(&t, hi).unwrap());
            for i in 0..fine.scale() {
                for j in 0..coarse.scale() {
                    prop_assert!(!mh.get(i, j) || ml.get(i, j));
                }
            }
        }

        #[test]
        fn nested_sum_pool_counts_children(fine_mult in 2usize..5, coarse in 1usize..6, k in 1usize..4) {
            let fine = coarse * fine_mult;
            let (a, b) = nested(fine, coarse, k);
            let m = mapping_matrix(&compute_overlap(&a, &b).unwrap(), 0.0).unwrap();
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor2D::ones(fine, 1));
            let y = pool(&mut tape, &m, x, PoolingScheme::Sum).unwrap();
            for &v in tape.value(y).data() {
                prop_assert_eq!(v, fine_mult as f64);
            }
        }
    }
}
