//! Training-free sample valuation from stored target hidden states: PCA,
//! reference statistics over general generations, Mahalanobis token scores,
//! a high-quantile aggregate per sample and budgeted subset selection.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusSample, SelectionMeta};
use crate::error::{Error, Result};
use crate::nn::rng::rng_from_seed;
use crate::nn::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub pca_dim: usize,
    pub rho: f64,
    pub shrinkage_eps: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            pca_dim: 16,
            rho: 0.9,
            shrinkage_eps: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean_center: Vec<f64>,
    /// d' × d, orthonormal rows in descending eigenvalue order.
    pub components: Matrix,
    pub eigenvalues: Vec<f64>,
}

impl PcaBasis {
    pub fn input_dim(&self) -> usize {
        self.mean_center.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.rows()
    }

    /// Hex SHA-256 over the mean and components.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean_center.iter().chain(self.components.as_slice()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn covariance(data: &Matrix, mean: &[f64]) -> Matrix {
    let (n, d) = data.shape();
    let mut centered = data.clone();
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(mean) {
            *v -= m;
        }
    }
    let mut cov = centered.t_matmul(&centered).expect("matching rows");
    cov.scale_in_place(1.0 / (n as f64 - 1.0));
    // Symmetrise away rounding in the product.
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    cov
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Top-`dim` principal directions of `general` (one hidden state per row).
pub fn fit_pca(general: &Matrix, dim: usize) -> Result<PcaBasis> {
    let (n, d) = general.shape();
    if dim == 0 || dim > d {
        return Err(Error::Validation(format!("PCA dimension {dim} not in 1..={d}")));
    }
    if n <= dim {
        return Err(Error::InsufficientData(format!(
            "PCA to {dim} dimensions needs more than {dim} rows, got {n}"
        )));
    }
    let mean = general.column_means();
    let cov = covariance(general, &mean);
    let eig = SymmetricEigen::new(to_dmatrix(&cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Matrix::zeros(dim, d);
    let mut eigenvalues = Vec::with_capacity(dim);
    for (row, &k) in order.iter().take(dim).enumerate() {
        let v = eig.eigenvectors.column(k);
        let lead = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("d ≥ 1");
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for c in 0..d {
            components.set(row, c, sign * v[c]);
        }
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaBasis {
        mean_center: mean,
        components,
        eigenvalues,
    })
}

pub fn project(basis: &PcaBasis, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != basis.input_dim() {
        return Err(Error::Shape(format!(
            "hidden of width {} against a basis of width {}",
            h.len(),
            basis.input_dim()
        )));
    }
    Ok((0..basis.output_dim())
        .map(|r| {
            basis
                .components
                .row(r)
                .iter()
                .zip(h.iter().zip(&basis.mean_center))
                .map(|(c, (x, m))| c * (x - m))
                .sum()
        })
        .collect())
}

/// Projects every row of `hiddens`.
pub fn project_rows(basis: &PcaBasis, hiddens: &Matrix) -> Result<Matrix> {
    let rows = (0..hiddens.rows())
        .map(|r| project(basis, hiddens.row(r)))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, basis.output_dim()));
    }
    Matrix::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceStats {
    pub mu: Vec<f64>,
    /// Unbiased sample covariance.
    pub sigma: Matrix,
    /// Inverse of `sigma + eps·(trace/d')·I`.
    pub sigma_inv: Matrix,
    pub shrinkage_eps: f64,
}

/// Mean, covariance and shrunk inverse covariance of projected general states.
/// A zero-trace covariance is shrunk by `eps·I`.
pub fn fit_reference_stats(projected: &Matrix, shrinkage_eps: f64) -> Result<ReferenceStats> {
    let (m, d) = projected.shape();
    if !(shrinkage_eps >= 0.0 && shrinkage_eps.is_finite()) {
        return Err(Error::Config(format!("shrinkage {shrinkage_eps} is not ≥ 0")));
    }
    if d == 0 || m < d + 1 {
        return Err(Error::InsufficientData(format!(
            "reference statistics in {d} dimensions need at least {} rows, got {m}",
            d + 1
        )));
    }
    let mu = projected.column_means();
    let sigma = covariance(projected, &mu);
    let trace: f64 = (0..d).map(|i| sigma.get(i, i)).sum();
    let scale = if trace > 0.0 { trace / d as f64 } else { 1.0 };
    let mut shrunk = to_dmatrix(&sigma);
    for i in 0..d {
        shrunk[(i, i)] += shrinkage_eps * scale;
    }
    let chol = shrunk.cholesky().ok_or_else(|| {
        Error::InsufficientData("reference covariance is not positive definite".into())
    })?;
    let inv = chol.inverse();
    let mut sigma_inv = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            sigma_inv.set(i, j, 0.5 * (inv[(i, j)] + inv[(j, i)]));
        }
    }
    Ok(ReferenceStats {
        mu,
        sigma,
        sigma_inv,
        shrinkage_eps,
    })
}

/// Squared Mahalanobis distance of `h` from the reference mean, clamped at 0.
pub fn mahalanobis(h: &[f64], stats: &ReferenceStats) -> f64 {
    let diff: Vec<f64> = h.iter().zip(&stats.mu).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for (i, di) in diff.iter().enumerate() {
        let row = stats.sigma_inv.row(i);
        total += di * row.iter().zip(&diff).map(|(s, dj)| s * dj).sum::<f64>();
    }
    total.max(0.0)
}

/// The ⌈ρ·n⌉-th smallest value.
pub fn nearest_rank(values: &[f64], rho: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Validation("quantile of an empty list".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Validation(format!("ρ = {rho} is not in (0, 1]")));
    }
    let n = values.len();
    // Guard against ρ·n landing a hair above an integer, e.g. 0.7·10.
    let rank = ((rho * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScoreCard {
    pub sample_id: u64,
    pub token_scores: Vec<f64>,
    pub aggregate: f64,
    pub rho_used: f64,
}

/// Scores one sample from its answer-position hidden states (one row per
/// answer token).
pub fn score_sample(
    sample_id: u64,
    answer_hiddens: &Matrix,
    basis: &PcaBasis,
    stats: &ReferenceStats,
    rho: f64,
) -> Result<SampleScoreCard> {
    if answer_hiddens.rows() == 0 {
        return Err(Error::Validation(format!("sample {sample_id} has no answer tokens")));
    }
    let token_scores = (0..answer_hiddens.rows())
        .map(|r| Ok(mahalanobis(&project(basis, answer_hiddens.row(r))?, stats)))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = nearest_rank(&token_scores, rho)?;
    Ok(SampleScoreCard {
        sample_id,
        token_scores,
        aggregate,
        rho_used: rho,
    })
}

/// Scores every sample from its stored trace; no model is involved.
pub fn score_dataset(
    samples: &[CorpusSample],
    traces: &[Matrix],
    basis: &PcaBasis,
    stats: &ReferenceStats,
    rho: f64,
) -> Result<Vec<SampleScoreCard>> {
    if samples.len() != traces.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} traces",
            samples.len(),
            traces.len()
        )));
    }
    samples
        .iter()
        .zip(traces)
        .map(|(s, t)| score_sample(s.sample_id, t, basis, stats, rho))
        .collect()
}

/// Everything needed to score a self-generated dataset against a general one.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub basis: PcaBasis,
    pub stats: ReferenceStats,
}

/// Fits the basis and statistics on general answer hiddens (rows of all traces).
pub fn fit_reference(general_traces: &[Matrix], cfg: &SelectConfig) -> Result<Reference> {
    let rows: Vec<Matrix> = general_traces.iter().filter(|t| !t.is_empty()).cloned().collect();
    if rows.is_empty() {
        return Err(Error::InsufficientData("no general hidden states".into()));
    }
    let all = Matrix::vstack(&rows)?;
    let basis = fit_pca(&all, cfg.pca_dim)?;
    let stats = fit_reference_stats(&project_rows(&basis, &all)?, cfg.shrinkage_eps)?;
    Ok(Reference { basis, stats })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Highest aggregate scores first.
    Selected,
    /// Seeded uniform shuffle.
    Random,
    /// Lowest aggregate scores first.
    Reversed,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Selected, Strategy::Random, Strategy::Reversed];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Selected => "selected",
            Strategy::Random => "random",
            Strategy::Reversed => "reversed",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown strategy {s:?} (selected, random, reversed)")))
    }
}

pub fn budget_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!("budget fraction {fraction} is not in (0, 1]")));
    }
    Ok(((fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize)
}

/// Indices (into `cards`) of the chosen samples in priority order.
fn ranking(cards: &[SampleScoreCard], strategy: Strategy, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cards.len()).collect();
    match strategy {
        Strategy::Selected => idx.sort_by(|&a, &b| {
            cards[b]
                .aggregate
                .total_cmp(&cards[a].aggregate)
                .then(cards[a].sample_id.cmp(&cards[b].sample_id))
        }),
        Strategy::Reversed => idx.sort_by(|&a, &b| {
            cards[a]
                .aggregate
                .total_cmp(&cards[b].aggregate)
                .then(cards[a].sample_id.cmp(&cards[b].sample_id))
        }),
        Strategy::Random => idx.shuffle(&mut rng_from_seed(seed)),
    }
    idx
}

/// Keeps `⌈fraction·N⌉` samples chosen by `strategy`, in original order,
/// each annotated with its selection metadata. `cards[i]` must score
/// `samples[i]`. Budgets are nested for a fixed strategy and seed.
pub fn select_subset(
    samples: &[CorpusSample],
    cards: &[SampleScoreCard],
    fraction: f64,
    strategy: Strategy,
    seed: u64,
    basis_hash: &str,
) -> Result<Vec<CorpusSample>> {
    if samples.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    if samples.len() != cards.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} score cards",
            samples.len(),
            cards.len()
        )));
    }
    if let Some((s, c)) = samples.iter().zip(cards).find(|(s, c)| s.sample_id != c.sample_id) {
        return Err(Error::Validation(format!(
            "score card {} does not belong to sample {}",
            c.sample_id, s.sample_id
        )));
    }
    let k = budget_count(samples.len(), fraction)?;
    let mut chosen: Vec<usize> = ranking(cards, strategy, seed).into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|i| {
            let mut s = samples[i].clone();
            s.selection_meta = Some(SelectionMeta {
                aggregate_score: cards[i].aggregate,
                rho: cards[i].rho_used,
                budget_fraction: fraction,
                basis_hash: basis_hash.to_string(),
            });
            s
        })
        .collect())
}

/// The top `⌈fraction·N⌉` samples by aggregate score, ties to the lower id.
pub fn select_topk(
    samples: &[CorpusSample],
    cards: &[SampleScoreCard],
    fraction: f64,
    basis_hash: &str,
) -> Result<Vec<CorpusSample>> {
    select_subset(samples, cards, fraction, Strategy::Selected, 0, basis_hash)
}

#[cfg(test)]
mod tests;
