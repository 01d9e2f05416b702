//! Gradient geometry of the denoising loss: mean gradient, collinearity
//! statistics, empirical Fisher matrix, its top eigenpairs, the rank-1
//! coefficient c*, and reconstruction errors for rank-1 and diagonal
//! approximations — everything needed to measure how close a batch of
//! per-sample gradients is to a single shared direction.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::diffusion::{dsm_per_sample, forward_sample, DiffusionSample};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, SymMatrix};
use crate::net::DenoiserNet;
use crate::params::ParamVector;
use crate::rng::{standard_normal_vec, StreamSeeder};
use crate::schedule::NoiseSchedule;

/// Largest parameter count for which the dense P x P Fisher is formed.
pub const FULL_FISHER_CAP: usize = 4096;

/// Rows below this fraction of ||mu|| are treated as zero gradients and
/// excluded from cosine statistics.
pub const ZERO_ROW_REL_TOL: f64 = 1e-12;

/// Default eigensolver settings: residual within 1e-10 of the leading
/// eigenvalue, at most 10^4 iterations per eigenpair.
pub const EIG_TOL: f64 = 1e-10;
pub const EIG_MAX_ITER: usize = 10_000;

/// Arithmetic mean of the gradient rows.
pub fn estimate_mu(rows: &[ParamVector]) -> Result<ParamVector> {
    if rows.is_empty() {
        return Err(Error::Usage("gradient batch is empty".into()));
    }
    let mut mu = ParamVector::zeros(rows[0].layout().clone());
    for row in rows {
        mu.add_assign(row);
    }
    mu.scale(1.0 / rows.len() as f64);
    Ok(mu)
}

/// Distribution of |cos(g_i, mu)| over a gradient batch.
#[derive(Debug, Clone)]
pub struct CollinearityStats {
    /// One value per non-excluded row, in row order.
    pub values: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    /// 10th percentile (linear interpolation between order statistics).
    pub q10: f64,
    /// Rows skipped because their norm was below `ZERO_ROW_REL_TOL * ||mu||`.
    pub excluded: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

pub fn collinearity_stats(rows: &[ParamVector], mu: &ParamVector) -> Result<CollinearityStats> {
    let mu_norm = mu.norm();
    if mu_norm == 0.0 {
        return Err(Error::Degenerate("mean gradient is zero; cosines undefined".into()));
    }
    let mut values = Vec::with_capacity(rows.len());
    let mut excluded = 0;
    for row in rows {
        let row_norm = row.norm();
        if row_norm < ZERO_ROW_REL_TOL * mu_norm {
            excluded += 1;
            continue;
        }
        values.push((row.dot(mu) / (row_norm * mu_norm)).abs());
    }
    if values.is_empty() {
        return Err(Error::Degenerate("all gradient rows are numerically zero".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(CollinearityStats { mean, min: sorted[0], q10: percentile(&sorted, 0.10), values, excluded })
}

/// Dense empirical Fisher F = (1/n) sum_i g_i g_i^T.
pub fn empirical_fisher(rows: &[ParamVector]) -> Result<SymMatrix> {
    if rows.is_empty() {
        return Err(Error::Usage("gradient batch is empty".into()));
    }
    let p = rows[0].len();
    if p > FULL_FISHER_CAP {
        return Err(Error::Capacity(format!(
            "P = {} exceeds the dense Fisher cap {}; use rank-1/diagonal statistics \
             or the matrix-free eigensolver instead",
            p, FULL_FISHER_CAP
        )));
    }
    let mut f = SymMatrix::zeros(p);
    for row in rows {
        let g = &row.values;
        for i in 0..p {
            if g[i] == 0.0 {
                continue;
            }
            for j in i..p {
                f.add_assign_entry(i, j, g[i] * g[j]);
            }
        }
    }
    let inv_n = 1.0 / rows.len() as f64;
    let mut scaled = SymMatrix::zeros(p);
    for i in 0..p {
        for j in i..p {
            scaled.set(i, j, f.get(i, j) * inv_n);
        }
    }
    Ok(scaled)
}

/// Per-coordinate mean of squared gradients: the diagonal of the empirical
/// Fisher, computable at any P.
pub fn empirical_diag(rows: &[ParamVector]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::Usage("gradient batch is empty".into()));
    }
    let p = rows[0].len();
    let mut diag = vec![0.0; p];
    for row in rows {
        for (d, g) in diag.iter_mut().zip(&row.values) {
            *d += g * g;
        }
    }
    let inv_n = 1.0 / rows.len() as f64;
    for d in diag.iter_mut() {
        *d *= inv_n;
    }
    Ok(diag)
}

/// A symmetric positive-semidefinite linear operator; the eigensolver only
/// needs matrix-vector products, so the Fisher never has to be materialized.
pub trait SymOp {
    fn op_dim(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);
}

impl SymOp for SymMatrix {
    fn op_dim(&self) -> usize {
        self.dim()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.matvec(v, out);
    }
}

/// Matrix-free Fisher action v -> (1/n) sum_i g_i (g_i^T v).
pub struct GradOuterOp<'a> {
    rows: &'a [ParamVector],
}

impl<'a> GradOuterOp<'a> {
    pub fn new(rows: &'a [ParamVector]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Usage("gradient batch is empty".into()));
        }
        Ok(Self { rows })
    }
}

impl SymOp for GradOuterOp<'_> {
    fn op_dim(&self) -> usize {
        self.rows[0].len()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let inv_n = 1.0 / self.rows.len() as f64;
        for row in self.rows {
            let c = dot(&row.values, v) * inv_n;
            axpy(c, &row.values, out);
        }
    }
}

const EIG_START_SEED: u64 = 0x9E37_79B9_7F4A_7C15;

/// Top-k eigenpairs by power iteration with deflation. Eigenvectors come back
/// unit-norm and mutually orthogonal; values sorted descending. The operator
/// must be PSD (true for every Fisher built here).
pub fn top_eigs(op: &dyn SymOp, k: usize, tol: f64, max_iter: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    if k == 0 {
        return Err(Error::Usage("at least one eigenpair must be requested".into()));
    }
    let n = op.op_dim();
    let k = k.min(n);
    let mut pairs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(k);
    let mut lambda1 = 0.0_f64;
    let mut w = vec![0.0; n];

    for j in 0..k {
        let mut rng = ChaCha12Rng::seed_from_u64(EIG_START_SEED.wrapping_add(j as u64));
        let mut v = standard_normal_vec(n, &mut rng);
        for (_, vm) in &pairs {
            let c = dot(vm, &v);
            axpy(-c, vm, &mut v);
        }
        let nv = norm(&v);
        if nv == 0.0 {
            return Err(Error::Degenerate("eigensolver start vector collapsed".into()));
        }
        crate::linalg::scale(1.0 / nv, &mut v);

        let mut lambda = 0.0;
        let mut residual = f64::INFINITY;
        let mut converged = false;
        for _ in 0..max_iter {
            op.apply(&v, &mut w);
            // Deflate components of already-found eigenpairs.
            for (lm, vm) in &pairs {
                let c = dot(vm, &v);
                axpy(-lm * c, vm, &mut w);
            }
            lambda = dot(&v, &w);
            let mut res_sq = 0.0;
            for i in 0..n {
                let r = w[i] - lambda * v[i];
                res_sq += r * r;
            }
            residual = res_sq.sqrt();
            let scale_ref = if j == 0 { lambda.abs() } else { lambda1 };
            if residual <= tol * scale_ref {
                converged = true;
                break;
            }
            let wn = norm(&w);
            if wn == 0.0 {
                // v lies in the kernel of the deflated operator.
                lambda = 0.0;
                converged = true;
                break;
            }
            for i in 0..n {
                v[i] = w[i] / wn;
            }
            // Keep the iterate orthogonal to found eigenvectors.
            for (_, vm) in &pairs {
                let c = dot(vm, &v);
                axpy(-c, vm, &mut v);
            }
            let nv = norm(&v);
            if nv == 0.0 {
                lambda = 0.0;
                converged = true;
                break;
            }
            crate::linalg::scale(1.0 / nv, &mut v);
        }
        if !converged {
            return Err(Error::NoConvergence { residual, iterations: max_iter });
        }
        if j == 0 {
            lambda1 = lambda.abs().max(f64::MIN_POSITIVE);
        }
        pairs.push((lambda.max(0.0), v));
    }

    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    Ok(pairs)
}

/// r = lambda_2 / lambda_1, clamped to [0, 1]. Small r means the spectrum is
/// dominated by one direction.
pub fn eigengap_ratio(eigs: &[f64]) -> Result<f64> {
    if eigs.len() < 2 {
        return Err(Error::Degenerate("eigengap ratio needs at least two eigenvalues".into()));
    }
    if eigs[0] <= 0.0 {
        return Err(Error::Degenerate("leading eigenvalue is zero; ratio undefined".into()));
    }
    Ok((eigs[1] / eigs[0]).clamp(0.0, 1.0))
}

/// c* = mean_i((mu^T g_i)^2) / ||mu||^4, computed in O(nP) without forming F.
pub fn c_star(rows: &[ParamVector], mu: &ParamVector) -> Result<f64> {
    let mu_norm_sq = mu.dot(mu);
    if mu_norm_sq == 0.0 {
        return Err(Error::Degenerate("mean gradient is zero; c* undefined".into()));
    }
    if rows.is_empty() {
        return Err(Error::Usage("gradient batch is empty".into()));
    }
    let mut acc = 0.0;
    for row in rows {
        let proj = mu.dot(row);
        acc += proj * proj;
    }
    Ok(acc / rows.len() as f64 / (mu_norm_sq * mu_norm_sq))
}

/// Same coefficient from the dense Fisher: (mu^T F mu) / ||mu||^4. Used to
/// cross-check `c_star` when F is available.
pub fn c_star_from_full(f: &SymMatrix, mu: &ParamVector) -> Result<f64> {
    let mu_norm_sq = mu.dot(mu);
    if mu_norm_sq == 0.0 {
        return Err(Error::Degenerate("mean gradient is zero; c* undefined".into()));
    }
    let mut fv = vec![0.0; f.dim()];
    f.matvec(&mu.values, &mut fv);
    Ok(dot(&mu.values, &fv) / (mu_norm_sq * mu_norm_sq))
}

/// Relative Frobenius errors of the rank-1 reconstruction c*·mu mu^T and of
/// diag(F), both against the dense F. Neither reconstruction is materialized.
pub fn reconstruction_errors(f: &SymMatrix, mu: &ParamVector, c_star: f64) -> Result<(f64, f64)> {
    let p = f.dim();
    let f_norm = f.frobenius_norm();
    if f_norm == 0.0 {
        return Err(Error::Degenerate("Fisher is identically zero".into()));
    }
    let mut rank1_sq = 0.0;
    let mut offdiag_sq = 0.0;
    for i in 0..p {
        for j in 0..p {
            let fij = f.get(i, j);
            let rij = fij - c_star * mu.values[i] * mu.values[j];
            rank1_sq += rij * rij;
            if i != j {
                offdiag_sq += fij * fij;
            }
        }
    }
    Ok((rank1_sq.sqrt() / f_norm, offdiag_sq.sqrt() / f_norm))
}

/// Everything measured for one timestep's gradient batch.
#[derive(Debug, Clone)]
pub struct FisherSummary {
    pub t: usize,
    pub n: usize,
    pub mu: ParamVector,
    pub diag: Vec<f64>,
    /// Top eigenvalues, descending; length min(top_k, P).
    pub eigs: Vec<f64>,
    /// lambda_2 / lambda_1; None when fewer than two eigenvalues exist.
    pub r: Option<f64>,
    pub c_star: f64,
    /// Present only when the dense Fisher fit under the cap.
    pub err_rank1: Option<f64>,
    pub err_diag: Option<f64>,
    pub cos: CollinearityStats,
}

/// Builds the per-timestep summary from pre-computed gradient rows.
pub fn summarize_grads(t: usize, rows: &[ParamVector], top_k: usize, cap: usize) -> Result<FisherSummary> {
    let n = rows.len();
    let p = rows[0].len();
    let mu = estimate_mu(rows)?;
    let cos = collinearity_stats(rows, &mu)?;
    let diag = empirical_diag(rows)?;
    let cs = c_star(rows, &mu)?;

    let (eigs, err_rank1, err_diag) = if p <= cap {
        let f = empirical_fisher(rows)?;
        let pairs = top_eigs(&f, top_k, EIG_TOL, EIG_MAX_ITER)?;
        let (e1, e2) = reconstruction_errors(&f, &mu, cs)?;
        (pairs.into_iter().map(|(l, _)| l).collect::<Vec<_>>(), Some(e1), Some(e2))
    } else {
        let op = GradOuterOp::new(rows)?;
        let pairs = top_eigs(&op, top_k, EIG_TOL, EIG_MAX_ITER)?;
        (pairs.into_iter().map(|(l, _)| l).collect::<Vec<_>>(), None, None)
    };
    // With one sample the Fisher is rank-1 by construction and the ratio
    // carries no information, so it is left undefined.
    let r = if n >= 2 && eigs.len() >= 2 && eigs[0] > 0.0 {
        Some(eigengap_ratio(&eigs)?)
    } else {
        None
    };

    Ok(FisherSummary { t, n, mu, diag, eigs, r, c_star: cs, err_rank1, err_diag, cos })
}

/// Per-sample gradient rows of the denoising loss at one fixed timestep,
/// with data drawn (with replacement) from `data`.
pub fn grads_at_timestep(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    data: &[(Vec<f64>, Option<usize>)],
    t: usize,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<ParamVector>> {
    use rand::Rng;
    if data.is_empty() {
        return Err(Error::Usage("dataset is empty".into()));
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = rng.gen_range(0..data.len());
        let (x0, y) = &data[idx];
        samples.push(forward_sample(sched, x0, *y, t, rng)?);
    }
    let (_, batch) = dsm_per_sample(net, &samples)?;
    Ok(batch.rows)
}

/// Result of a multi-timestep sweep: one summary per timestep plus the
/// matrix of |cos| between the mean gradients of every timestep pair.
#[derive(Debug)]
pub struct SweepResult {
    pub summaries: Vec<FisherSummary>,
    /// pairwise[i][j] = |cos(mu_{t_i}, mu_{t_j})|; diagonal exactly 1.
    pub pairwise_mu_cos: Vec<Vec<f64>>,
    /// Mean input-reconstruction diagnostic at each timestep.
    pub identity_mse: Vec<f64>,
}

/// Sweeps the listed timesteps: at each t draws `n_per_t` samples, collects
/// exact per-sample gradients, and summarizes the Fisher geometry. Randomness
/// comes from per-timestep streams, so adding or removing timesteps does not
/// perturb the others.
pub fn sweep_timesteps(
    net: &DenoiserNet,
    sched: &NoiseSchedule,
    data: &[(Vec<f64>, Option<usize>)],
    timesteps: &[usize],
    n_per_t: usize,
    top_k: usize,
    cap: usize,
    seeder: &StreamSeeder,
) -> Result<SweepResult> {
    if timesteps.is_empty() {
        return Err(Error::Usage("sweep needs at least one timestep".into()));
    }
    let mut summaries = Vec::with_capacity(timesteps.len());
    let mut identity_mse = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let mut rng = seeder.stream(&format!("fisher/t{}", t));
        let rows = grads_at_timestep(net, sched, data, t, n_per_t, &mut rng)?;
        summaries.push(summarize_grads(t, &rows, top_k, cap)?);

        let mut diag_rng = seeder.stream(&format!("fisher/identity-mse/t{}", t));
        let samples: Vec<DiffusionSample> = data
            .iter()
            .map(|(x0, y)| forward_sample(sched, x0, *y, t, &mut diag_rng))
            .collect::<Result<_>>()?;
        identity_mse.push(crate::diffusion::identity_map_mse_on(net, sched, &samples)?);
    }

    let m = timesteps.len();
    let mut pairwise = vec![vec![0.0; m]; m];
    for i in 0..m {
        pairwise[i][i] = 1.0;
        for j in (i + 1)..m {
            let a = &summaries[i].mu;
            let b = &summaries[j].mu;
            let denom = a.norm() * b.norm();
            let cos = if denom == 0.0 { 0.0 } else { (a.dot(b) / denom).abs() };
            pairwise[i][j] = cos;
            pairwise[j][i] = cos;
        }
    }

    Ok(SweepResult { summaries, pairwise_mu_cos: pairwise, identity_mse })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.12e}", x),
        None => "nan".to_string(),
    }
}

/// Serializes a sweep as CSV with the fixed column set. `eig_scale(t)` lets
/// callers emit a weight-normalized variant of the same table (pass
/// `|_| 1.0` for raw eigenvalues).
pub fn sweep_csv(result: &SweepResult, eig_scale: impl Fn(usize) -> f64) -> String {
    let mut out = String::from(
        "t,n,lambda1,lambda2,lambda3,lambda4,lambda5,r,c_star,err_rank1,err_diag,cos_mean,cos_min,cos_q10\n",
    );
    for s in &result.summaries {
        let scale = eig_scale(s.t);
        let mut lambdas = Vec::with_capacity(5);
        for k in 0..5 {
            lambdas.push(fmt_opt(s.eigs.get(k).map(|l| l * scale)));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.12e},{},{},{:.12e},{:.12e},{:.12e}\n",
            s.t,
            s.n,
            lambdas[0],
            lambdas[1],
            lambdas[2],
            lambdas[3],
            lambdas[4],
            fmt_opt(s.r),
            s.c_star,
            fmt_opt(s.err_rank1),
            fmt_opt(s.err_diag),
            s.cos.mean,
            s.cos.min,
            s.cos.q10,
        ));
    }
    out
}

/// Pairwise |cos(mu_i, mu_j)| matrix as CSV, one header column per timestep.
pub fn pairwise_csv(timesteps: &[usize], matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("t");
    for t in timesteps {
        out.push_str(&format!(",t{}", t));
    }
    out.push('\n');
    for (i, t) in timesteps.iter().enumerate() {
        out.push_str(&format!("t{}", t));
        for j in 0..timesteps.len() {
            if i == j {
                // Diagonal is 1 by definition; emit it exactly.
                out.push_str(",1");
            } else {
                out.push_str(&format!(",{:.12e}", matrix[i][j]));
            }
        }
        out.push('\n');
    }
    out
}

/// Identity-map diagnostic per timestep as CSV.
pub fn identity_mse_csv(timesteps: &[usize], mse: &[f64]) -> String {
    let mut out = String::from("t,identity_mse\n");
    for (t, m) in timesteps.iter().zip(mse) {
        out.push_str(&format!("{},{:.12e}\n", t, m));
    }
    out
}
