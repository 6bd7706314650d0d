//! Classification metrics and paired hypothesis tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Significance level used when flagging comparisons.
pub const ALPHA: f64 = 0.05;

/// Largest effective sample size for which the exact Wilcoxon null is used.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

fn check_binary(labels: &[usize], what: &str) -> Result<()> {
    match labels.iter().find(|&&l| l > 1) {
        Some(l) => Err(Error::Input(format!("{what} label {l} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Label 1 is the positive (patient) class.
pub fn confusion(pred: &[usize], truth: &[usize]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    check_binary(pred, "predicted")?;
    check_binary(truth, "true")?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Accuracy, sensitivity and specificity; the latter two are `None` when
/// their denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rates {
    pub acc: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
}

pub fn acc_sen_spe(c: &ConfusionCounts) -> Rates {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            log::warn!("rate undefined: zero denominator");
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Rates {
        acc: ratio(c.tp + c.tn, c.total()).unwrap_or(f64::NAN),
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
    }
}

/// Average ranks (1-based) with ties sharing their mean rank, as doubled
/// integers so that sums stay exact.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // mean of ranks i+1..=j+1, doubled
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r2;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_binary(labels, "true")?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let ranks = doubled_ranks(scores);
    let pos_rank2: u64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&r, _)| r)
        .sum();
    // 2U = 2·Σranks − n_pos(n_pos+1); the count of half-pairs
    let u2 = pos_rank2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// Why a test result is not an ordinary finite p-value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFlag {
    /// Differences have zero variance but nonzero mean.
    ZeroVariance,
    /// Every difference is zero; the statistic is undefined.
    AllZero,
    /// Normal approximation used instead of the exact null.
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TTest {
    pub t: Option<f64>,
    pub df: usize,
    pub p: Option<f64>,
    pub flag: Option<TestFlag>,
}

/// Paired t-test of H₁: mean(a − b) > 0.
pub fn paired_t_one_sided(a: &[f64], b: &[f64]) -> Result<TTest> {
    let d = differences(a, b)?;
    let n = d.len();
    if n < 2 {
        return Err(Error::Input("paired t-test needs at least 2 pairs".into()));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: None,
                df,
                p: None,
                flag: Some(TestFlag::AllZero),
            }
        } else {
            let (t, p) = if mean > 0.0 {
                (f64::INFINITY, 0.0)
            } else {
                (f64::NEG_INFINITY, 1.0)
            };
            TTest {
                t: Some(t),
                df,
                p: Some(p),
                flag: Some(TestFlag::ZeroVariance),
            }
        });
    }
    let t = mean / (var.sqrt() / nf.sqrt());
    Ok(TTest {
        t: Some(t),
        df,
        p: Some(student_upper_tail(t, df as f64)),
        flag: None,
    })
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite sample value".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// `P(T > t)` for Student's t with `df` degrees of freedom.
pub fn student_upper_tail(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * reg_inc_beta(0.5 * df, 0.5, x);
    if t > 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Regularised incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for coef in [num, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + coef * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + coef / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Wilcoxon {
    /// Sum of ranks of positive differences; `None` when undefined.
    pub w: Option<f64>,
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    /// One-sided p-value for H₁: a > b.
    pub p: Option<f64>,
    pub exact: bool,
    pub flag: Option<TestFlag>,
}

/// Wilcoxon signed-rank test of H₁: a > b.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    let d: Vec<f64> = differences(a, b)?.into_iter().filter(|&x| x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(Wilcoxon {
            w: None,
            n_effective: 0,
            p: None,
            exact: false,
            flag: Some(TestFlag::AllZero),
        });
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks2 = doubled_ranks(&abs);
    let w2: u64 = ranks2
        .iter()
        .zip(&d)
        .filter(|(_, &x)| x > 0.0)
        .map(|(&r, _)| r)
        .sum();
    let w = w2 as f64 / 2.0;
    if n <= WILCOXON_EXACT_MAX {
        Ok(Wilcoxon {
            w: Some(w),
            n_effective: n,
            p: Some(exact_upper_p_enumerate(&ranks2, w2)),
            exact: true,
            flag: None,
        })
    } else {
        Ok(Wilcoxon {
            w: Some(w),
            n_effective: n,
            p: Some(normal_upper_p(&abs, w)),
            exact: false,
            flag: Some(TestFlag::NormalApprox),
        })
    }
}

/// `P(W ≥ w)` under the sign-flip null by visiting all `2ⁿ` sign patterns.
/// Ranks and `w` are doubled.
pub fn exact_upper_p_enumerate(ranks2: &[u64], w2: u64) -> f64 {
    let n = ranks2.len();
    assert!(n <= 30, "enumeration limited to 30 ranks");
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let mut s = 0;
        let mut m = mask;
        while m != 0 {
            let k = m.trailing_zeros() as usize;
            s += ranks2[k];
            m &= m - 1;
        }
        if s >= w2 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

/// Same tail as [`exact_upper_p_enumerate`] via the count recursion
/// `N_k(s) = N_{k-1}(s) + N_{k-1}(s − r_k)`.
pub fn exact_upper_p_recursive(ranks2: &[u64], w2: u64) -> f64 {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    let hits: f64 = counts[(w2 as usize).min(counts.len())..].iter().sum();
    hits / 2f64.powi(ranks2.len() as i32)
}

fn normal_upper_p(abs: &[f64], w: f64) -> f64 {
    let n = abs.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return if w > mean { 0.0 } else { 1.0 };
    }
    let z = (w - mean - 0.5) / var.sqrt();
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Per-repeat evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub acc: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub auc: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
    #[serde(default)]
    pub test_ids: Vec<String>,
    #[serde(default)]
    pub train_loss: Vec<f64>,
}

/// Class-1 scores above one half predict the positive class.
pub fn predict(scores: &[f64]) -> Vec<usize> {
    scores.iter().map(|&s| usize::from(s > 0.5)).collect()
}

impl MetricRecord {
    pub fn from_scores(scores: Vec<f64>, labels: Vec<usize>, test_ids: Vec<String>) -> Result<Self> {
        let c = confusion(&predict(&scores), &labels)?;
        let r = acc_sen_spe(&c);
        Ok(Self {
            acc: r.acc,
            sen: r.sen,
            spe: r.spe,
            auc: auc(&scores, &labels)?,
            scores,
            labels,
            test_ids,
            train_loss: Vec::new(),
        })
    }

    pub fn metric(&self, name: &str) -> Result<Option<f64>> {
        match name {
            "acc" => Ok(Some(self.acc)),
            "sen" => Ok(self.sen),
            "spe" => Ok(self.spe),
            "auc" => Ok(Some(self.auc)),
            other => Err(Error::Usage(format!("unknown metric {other:?}"))),
        }
    }

    /// Largest deviation between stored metrics and ones recomputed from
    /// the stored scores and labels.
    pub fn recompute_error(&self) -> Result<f64> {
        let fresh = Self::from_scores(self.scores.clone(), self.labels.clone(), Vec::new())?;
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        };
        Ok([
            (self.acc - fresh.acc).abs(),
            opt(self.sen, fresh.sen),
            opt(self.spe, fresh.spe),
            (self.auc - fresh.auc).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max))
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `mean(std)` with three decimals, e.g. `0.846(0.012)`.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.3}({s:.3})")
}

/// Output of comparing two methods on one metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: String,
    pub t: Option<f64>,
    pub p_t: Option<f64>,
    #[serde(rename = "W")]
    pub w: Option<f64>,
    pub p_wilcoxon: Option<f64>,
    #[serde(rename = "significant_at_0.05")]
    pub significant: bool,
    pub flags: Vec<String>,
}

/// Paired one-sided comparison of per-repeat metrics, H₁: a > b.
pub fn compare(metric: &str, a: &[MetricRecord], b: &[MetricRecord]) -> Result<Comparison> {
    let pick = |rs: &[MetricRecord], side: &str| -> Result<Vec<f64>> {
        rs.iter()
            .enumerate()
            .map(|(k, r)| {
                r.metric(metric)?.ok_or_else(|| {
                    Error::Data(format!("{metric} undefined in repeat {k} of run {side}"))
                })
            })
            .collect()
    };
    let (xa, xb) = (pick(a, "a")?, pick(b, "b")?);
    let t = paired_t_one_sided(&xa, &xb)?;
    let w = wilcoxon_signed_rank(&xa, &xb)?;
    let mut flags = Vec::new();
    if let Some(f) = t.flag {
        flags.push(format!("t:{}", flag_name(f)));
    }
    if let Some(f) = w.flag {
        flags.push(format!("wilcoxon:{}", flag_name(f)));
    }
    Ok(Comparison {
        metric: metric.to_string(),
        t: t.t.filter(|v| v.is_finite()),
        p_t: t.p,
        w: w.w,
        p_wilcoxon: w.p,
        significant: t.p.is_some_and(|p| p < ALPHA),
        flags,
    })
}

fn flag_name(f: TestFlag) -> &'static str {
    match f {
        TestFlag::ZeroVariance => "zero_variance",
        TestFlag::AllZero => "all_zero",
        TestFlag::NormalApprox => "normal_approx",
    }
}
