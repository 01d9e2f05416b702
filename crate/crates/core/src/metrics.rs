//! Distribution-distance metric and the continual-learning bookkeeping built
//! on it: per-task distance matrix, average distance through task k, and
//! final forgetting, plus mean/standard-error aggregation across seeds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_sqrt, SymMatrix};

/// Ridge added to sample covariances before the distance computation.
pub const COV_REGULARIZER: f64 = 1e-6;

/// Sample mean and unbiased covariance of a point set.
pub fn sample_moments(set: &[Vec<f64>]) -> Result<(Vec<f64>, SymMatrix)> {
    if set.is_empty() {
        return Err(Error::Usage("moment computation needs a non-empty set".into()));
    }
    let d = set[0].len();
    let n = set.len();
    let mut mean = vec![0.0; d];
    for p in set {
        if p.len() != d {
            return Err(Error::Structural("point dimensions differ within one set".into()));
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = SymMatrix::zeros(d);
    if n > 1 {
        for p in set {
            for i in 0..d {
                let di = p[i] - mean[i];
                for j in i..d {
                    cov.add_assign_entry(i, j, di * (p[j] - mean[j]));
                }
            }
        }
        let scale = 1.0 / (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                cov.set(i, j, cov.get(i, j) * scale);
            }
        }
    }
    Ok((mean, cov))
}

/// Squared Fréchet distance between two Gaussians given by their moments:
/// d^2 = ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2}).
/// No regularization is applied here; this is the pure formula, also usable
/// as an oracle for hand-computed cases.
pub fn gfd_from_moments(
    mu_a: &[f64],
    cov_a: &SymMatrix,
    mu_b: &[f64],
    cov_b: &SymMatrix,
) -> Result<f64> {
    if mu_a.len() != mu_b.len() || cov_a.dim() != mu_a.len() || cov_b.dim() != mu_b.len() {
        return Err(Error::Structural("moment dimensions do not match".into()));
    }
    let mut mean_term = 0.0;
    for (a, b) in mu_a.iter().zip(mu_b) {
        mean_term += (a - b) * (a - b);
    }
    let root_a = sym_sqrt(cov_a)?;
    let inner = root_a.sandwich(cov_b)?;
    let cross = sym_sqrt(&inner)?;
    let d2 = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    let scale = 1.0 + cov_a.trace().abs() + cov_b.trace().abs() + mean_term;
    if d2 < -1e-8 * scale {
        return Err(Error::Numeric(format!(
            "distance came out negative beyond tolerance: {}",
            d2
        )));
    }
    Ok(d2.max(0.0))
}

/// Squared Fréchet distance between the Gaussian fits of two point sets,
/// with covariances regularized by +1e-6 I. Both sets need more points than
/// dimensions for a meaningful covariance.
pub fn gaussian_frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("distance needs two non-empty sets".into()));
    }
    let d = a[0].len();
    if a.len() <= d || b.len() <= d {
        return Err(Error::Usage(format!(
            "distance needs more points than dimensions (d = {}, got {} and {})",
            d,
            a.len(),
            b.len()
        )));
    }
    let (mu_a, mut cov_a) = sample_moments(a)?;
    let (mu_b, mut cov_b) = sample_moments(b)?;
    for i in 0..d {
        cov_a.add_assign_entry(i, i, COV_REGULARIZER);
        cov_b.add_assign_entry(i, i, COV_REGULARIZER);
    }
    gfd_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Lower-triangular record of FID_i(m_k): the distance on task i's test set
/// under the model state right after task k, for i <= k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLedger {
    pub method: String,
    pub seed: u64,
    /// fid[k][i] for i <= k; row k is written after task k+1 finishes
    /// (0-based storage of the 1-based task indices).
    pub fid: Vec<Vec<f64>>,
}

impl MetricLedger {
    pub fn new(method: String, seed: u64) -> Self {
        Self { method, seed, fid: Vec::new() }
    }

    /// Appends the evaluation row after finishing the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.fid.len() + 1 {
            return Err(Error::Structural(format!(
                "evaluation after task {} must cover exactly {} tasks, got {}",
                self.fid.len() + 1,
                self.fid.len() + 1,
                row.len()
            )));
        }
        self.fid.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.fid.len()
    }

    /// Average distance through task k (1-based): mean over i <= k of
    /// fid_i(m_k).
    pub fn afid(&self, k: usize) -> Result<f64> {
        if k == 0 || k > self.fid.len() {
            return Err(Error::Usage(format!(
                "task index {} out of range 1..={}",
                k,
                self.fid.len()
            )));
        }
        let row = &self.fid[k - 1];
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Final forgetting: mean over tasks of (final-model distance on task k
    /// minus the distance right after task k was learned).
    pub fn forgetting(&self) -> Result<f64> {
        let t = self.fid.len();
        if t == 0 {
            return Err(Error::Usage("ledger is empty".into()));
        }
        let last = &self.fid[t - 1];
        let mut acc = 0.0;
        for k in 0..t {
            acc += last[k] - self.fid[k][k];
        }
        Ok(acc / t as f64)
    }

    /// CSV with one row per (eval task, trained-through task) pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eval_task,trained_through,fid\n");
        for (k, row) in self.fid.iter().enumerate() {
            for (i, fid) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{:.12e}\n", i + 1, k + 1, fid));
            }
        }
        out
    }

    /// Parses the CSV form back into a ledger (method/seed are not stored in
    /// the CSV; the caller supplies them).
    pub fn from_csv(text: &str, method: String, seed: u64) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default().trim();
        if header != "eval_task,trained_through,fid" {
            return Err(Error::Config(format!(
                "not a ledger CSV (header {:?})",
                header
            )));
        }
        let mut triples = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!("ledger line {} malformed", ln + 2)));
            }
            let eval_task: usize = parts[0]
                .parse()
                .map_err(|_| Error::Config(format!("ledger line {}: bad eval_task", ln + 2)))?;
            let trained: usize = parts[1]
                .parse()
                .map_err(|_| Error::Config(format!("ledger line {}: bad trained_through", ln + 2)))?;
            let fid: f64 = parts[2]
                .parse()
                .map_err(|_| Error::Config(format!("ledger line {}: bad fid", ln + 2)))?;
            if eval_task == 0 || trained == 0 || eval_task > trained {
                return Err(Error::Config(format!(
                    "ledger line {}: need 1 <= eval_task <= trained_through",
                    ln + 2
                )));
            }
            triples.push((eval_task, trained, fid));
        }
        if triples.is_empty() {
            return Err(Error::Config("ledger CSV has no data rows".into()));
        }
        let t = triples.iter().map(|&(_, k, _)| k).max().unwrap();
        let mut fid: Vec<Vec<Option<f64>>> = (1..=t).map(|k| vec![None; k]).collect();
        for (i, k, v) in triples {
            let slot = &mut fid[k - 1][i - 1];
            if slot.is_some() {
                return Err(Error::Config(format!(
                    "duplicate ledger entry for eval_task {} trained_through {}",
                    i, k
                )));
            }
            *slot = Some(v);
        }
        let mut rows = Vec::with_capacity(t);
        for (k, row) in fid.into_iter().enumerate() {
            let mut out = Vec::with_capacity(k + 1);
            for (i, v) in row.into_iter().enumerate() {
                out.push(v.ok_or_else(|| {
                    Error::Config(format!(
                        "ledger missing entry for eval_task {} trained_through {}",
                        i + 1,
                        k + 1
                    ))
                })?);
            }
            rows.push(out);
        }
        Ok(Self { method, seed, fid: rows })
    }
}

/// Mean and standard error (sd/sqrt(n), unbiased sd) of per-seed values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// None when only one value exists.
    pub se: Option<f64>,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Usage("aggregation needs at least one value".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Some((var / n as f64).sqrt())
    } else {
        None
    };
    Ok(Aggregate { mean, se, n })
}
