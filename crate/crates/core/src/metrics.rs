//! Perturbation norms, per-image attack records, campaign summaries and the
//! transforms behind the scatter plots (dithering, rank correlation).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::{in_range, nearest_bound_distance, AttackResult, TargetRange};
use crate::dataset::csv_err;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    /// Count of nonzero entries.
    pub l0: usize,
    pub l2: f64,
    pub l_inf: u32,
}

pub fn lp_norms(delta: &[i16]) -> Norms {
    let mut l0 = 0;
    let mut sq = 0i64;
    let mut l_inf = 0u32;
    for &d in delta {
        if d != 0 {
            l0 += 1;
            sq += i64::from(d) * i64::from(d);
            l_inf = l_inf.max(u32::from(d.unsigned_abs()));
        }
    }
    Norms {
        l0,
        l2: (sq as f64).sqrt(),
        l_inf,
    }
}

/// One row of an attack report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub image_id: String,
    pub f_before: f64,
    pub f_after: f64,
    pub success: bool,
    pub iterations: usize,
    pub l0: usize,
    pub l2: f64,
    pub l_inf: u32,
    pub distance_to_range: f64,
}

pub const REPORT_HEADER: [&str; 9] = [
    "image_id",
    "f_before",
    "f_after",
    "success",
    "iterations",
    "l0",
    "l2",
    "l_inf",
    "distance_to_range",
];

impl AttackRecord {
    pub fn from_result(image_id: impl Into<String>, result: &AttackResult, range: &TargetRange) -> Self {
        Self {
            image_id: image_id.into(),
            f_before: result.f_before,
            f_after: result.f_after,
            success: result.success,
            iterations: result.iterations_used,
            l0: result.norms.l0,
            l2: result.norms.l2,
            l_inf: result.norms.l_inf,
            distance_to_range: nearest_bound_distance(result.f_before, range),
        }
    }

    pub fn initially_in_range(&self) -> bool {
        self.distance_to_range == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

/// Nearest-rank quantile of an ascending slice: the value at rank `ceil(q * n)`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn quantiles(mut values: Vec<f64>) -> Quantiles {
    values.sort_by(f64::total_cmp);
    Quantiles {
        min: values[0],
        median: nearest_rank(&values, 0.5),
        p90: nearest_rank(&values, 0.9),
        max: values[values.len() - 1],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub total: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub l0: Quantiles,
    pub l2: Quantiles,
    pub l_inf: Quantiles,
    pub mean_iterations: f64,
}

pub fn summarize(records: &[AttackRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(Error::InsufficientData("cannot summarize zero records".into()));
    }
    let total = records.len();
    let successes = records.iter().filter(|r| r.success).count();
    let iters: usize = records.iter().map(|r| r.iterations).sum();
    Ok(Summary {
        total,
        successes,
        success_rate: successes as f64 / total as f64,
        l0: quantiles(records.iter().map(|r| r.l0 as f64).collect()),
        l2: quantiles(records.iter().map(|r| r.l2).collect()),
        l_inf: quantiles(records.iter().map(|r| f64::from(r.l_inf)).collect()),
        mean_iterations: iters as f64 / total as f64,
    })
}

/// How successful attacks on initially out-of-range images land relative to the
/// nearer bound. Landings further than `tolerance` from that bound are rounding
/// artifacts: the integer perturbation overshot past the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub tolerance: f64,
    pub moved: usize,
    pub near_boundary: usize,
    pub near_boundary_fraction: f64,
    pub rounding_outliers: Vec<String>,
}

pub fn boundary_report(records: &[AttackRecord], range: &TargetRange, tolerance: f64) -> BoundaryReport {
    let mut moved = 0;
    let mut near = 0;
    let mut outliers = Vec::new();
    for r in records.iter().filter(|r| r.success && !r.initially_in_range()) {
        moved += 1;
        let bound = if r.f_before < range.lower() {
            range.lower()
        } else {
            range.upper()
        };
        if (r.f_after - bound).abs() <= tolerance {
            near += 1;
        } else {
            outliers.push(r.image_id.clone());
        }
    }
    BoundaryReport {
        tolerance,
        moved,
        near_boundary: near,
        near_boundary_fraction: if moved == 0 { 1.0 } else { near as f64 / moved as f64 },
        rounding_outliers: outliers,
    }
}

/// Records violating the `success => L <= f_after <= U` contract.
pub fn unsound_records<'a>(records: &'a [AttackRecord], range: &TargetRange) -> Vec<&'a AttackRecord> {
    records
        .iter()
        .filter(|r| r.success != in_range(r.f_after, range))
        .collect()
}

/// Add i.i.d. `N(0, variance)` noise. Plot-only; never applied to stored records.
pub fn dither(values: &[f64], variance: f64, seed: u64) -> Result<Vec<f64>> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "dither variance must be a finite value >= 0, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(values.to_vec());
    }
    let normal = Normal::new(0.0, variance.sqrt())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(values.iter().map(|v| v + normal.sample(&mut rng)).collect())
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Rank correlation between the initial distance to the range and `l2`, over
/// records that started outside the range.
pub fn trend_statistic(records: &[AttackRecord]) -> Result<f64> {
    let (dist, l2): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter(|r| !r.initially_in_range())
        .map(|r| (r.distance_to_range, r.l2))
        .unzip();
    if dist.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "trend statistic needs at least 3 out-of-range records, got {}",
            dist.len()
        )));
    }
    Ok(spearman(&dist, &l2))
}

pub fn write_report(records: &[AttackRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if records.is_empty() {
        w.write_record(REPORT_HEADER).map_err(|e| csv_err(path, e))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<AttackRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                message: format!("row {}: {e}", i + 1),
            })
        })
        .collect()
}
