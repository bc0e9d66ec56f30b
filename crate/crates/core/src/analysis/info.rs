//! Gaussian class models of readouts and the information breakdown built on
//! Monte-Carlo entropies of their mixtures.

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seeds::{derive_seed, stream};

/// Diagonal jitter added to every fitted class covariance.
pub const COV_REGULARIZER: f64 = 1e-6;
/// Monte-Carlo samples drawn from each mixture component by default.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
const SHARD: usize = 4096;

/// One Gaussian per class with its prior.
#[derive(Clone, Debug)]
pub struct GaussianClassModel {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub priors: Vec<f64>,
    /// Lower Cholesky factors of `covs`.
    chols: Vec<DMatrix<f64>>,
}

impl GaussianClassModel {
    pub fn new(means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>, priors: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != covs.len() || means.len() != priors.len() {
            return Err(invalid!("{} means, {} covariances, {} priors", means.len(), covs.len(), priors.len()));
        }
        let k = means[0].len();
        if k == 0 {
            return Err(invalid!("zero-dimensional class model"));
        }
        if priors.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid!("class priors must be non-negative and sum to 1, got {:?}", priors));
        }
        let mut chols = Vec::with_capacity(covs.len());
        for (c, (m, s)) in means.iter().zip(&covs).enumerate() {
            if m.len() != k || s.nrows() != k || s.ncols() != k {
                return Err(invalid!("class {} has mean of length {} and covariance {}×{}, expected {}", c, m.len(), s.nrows(), s.ncols(), k));
            }
            let l = s.clone().cholesky().ok_or_else(|| Error::NonFinite(format!("covariance of class {c} is not positive definite")))?;
            chols.push(l.l());
        }
        Ok(GaussianClassModel { means, covs, priors, chols })
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `h(y|c) = Σ_c p(c)·h(N(μ_c, Σ_c))`.
    pub fn conditional_entropy(&self) -> f64 {
        self.priors.iter().zip(&self.chols).map(|(&p, l)| p * entropy_from_chol(l)).sum()
    }

    /// `h(y_j|c)` from the class variances of coordinate `j`.
    pub fn conditional_marginal_entropy(&self, j: usize) -> f64 {
        self.priors.iter().zip(&self.covs).map(|(&p, s)| p * 0.5 * (2.0 * PI * std::f64::consts::E * s[(j, j)]).ln()).sum()
    }
}

fn entropy_from_chol(l: &DMatrix<f64>) -> f64 {
    let k = l.nrows() as f64;
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    0.5 * (k * (2.0 * PI * std::f64::consts::E).ln() + log_det)
}

/// Per-class sample means and covariances (`n − 1` normalization, plus
/// [`COV_REGULARIZER`]·I) of row-major readouts `[n, k]`; priors are class
/// frequencies. Classes without samples are left out of the mixture.
pub fn fit_gaussian_classes(scores: &[f64], k: usize, labels: &[usize], n_classes: usize) -> Result<GaussianClassModel> {
    if k == 0 || scores.len() != labels.len() * k {
        return Err(invalid!("{} score values for {} labels of dimension {}", scores.len(), labels.len(), k));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        members.get_mut(l).ok_or_else(|| invalid!("label {} out of range for {} classes", l, n_classes))?.push(i);
    }
    let (mut means, mut covs, mut priors) = (Vec::new(), Vec::new(), Vec::new());
    for (c, rows) in members.iter().enumerate() {
        // absent classes carry no mass
        if rows.is_empty() {
            continue;
        }
        if rows.len() < k + 1 {
            return Err(invalid!("class {} has {} samples; fitting a {}-dimensional Gaussian needs at least {}", c, rows.len(), k, k + 1));
        }
        let n = rows.len() as f64;
        let mut mu = DVector::zeros(k);
        for &i in rows {
            mu += DVector::from_column_slice(&scores[i * k..(i + 1) * k]);
        }
        mu /= n;
        let mut s = DMatrix::zeros(k, k);
        for &i in rows {
            let d = DVector::from_column_slice(&scores[i * k..(i + 1) * k]) - &mu;
            s.ger(1.0, &d, &d, 1.0);
        }
        s /= n - 1.0;
        for j in 0..k {
            s[(j, j)] += COV_REGULARIZER;
        }
        means.push(mu);
        covs.push(s);
        priors.push(n / labels.len() as f64);
    }
    GaussianClassModel::new(means, covs, priors)
}

/// Differential entropy `½·ln((2πe)^k·det Σ)` in nats.
pub fn gaussian_entropy(cov: &DMatrix<f64>) -> Result<f64> {
    if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
        return Err(invalid!("covariance must be square and non-empty, got {}×{}", cov.nrows(), cov.ncols()));
    }
    let l = cov.clone().cholesky().ok_or_else(|| Error::NonFinite("covariance is not positive definite".into()))?;
    Ok(entropy_from_chol(&l.l()))
}

/// Which entropy of the mixture to estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntropyTarget {
    /// The joint readout `h(y)`.
    All,
    /// One coordinate `h(y_j)`.
    Single(usize),
    /// The mixture whose components are the products of their marginals, `h(y_ind)`.
    Independent,
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Lower-triangular factors with log-normalizers, flattened for the hot loop.
struct Components {
    k: usize,
    means: Vec<f64>,
    chols: Vec<f64>,
    /// `ln p(c) − ½·k·ln 2π − ln det L`.
    offsets: Vec<f64>,
}

impl Components {
    fn full(model: &GaussianClassModel) -> Self {
        let k = model.dim();
        let mut chols = Vec::new();
        let mut offsets = Vec::new();
        for (l, &p) in model.chols.iter().zip(&model.priors) {
            for r in 0..k {
                for c in 0..k {
                    chols.push(l[(r, c)]);
                }
            }
            offsets.push(p.ln() - 0.5 * k as f64 * (2.0 * PI).ln() - l.diagonal().iter().map(|d| d.ln()).sum::<f64>());
        }
        Components { k, means: model.means.iter().flat_map(|m| m.iter().copied()).collect(), chols, offsets }
    }

    fn diagonal(model: &GaussianClassModel, coords: &[usize]) -> Self {
        let k = coords.len();
        let mut chols = Vec::new();
        let mut offsets = Vec::new();
        let mut means = Vec::new();
        for ((m, s), &p) in model.means.iter().zip(&model.covs).zip(&model.priors) {
            let sd: Vec<f64> = coords.iter().map(|&j| s[(j, j)].sqrt()).collect();
            for r in 0..k {
                for c in 0..k {
                    chols.push(if r == c { sd[r] } else { 0.0 });
                }
            }
            means.extend(coords.iter().map(|&j| m[j]));
            offsets.push(p.ln() - 0.5 * k as f64 * (2.0 * PI).ln() - sd.iter().map(|d| d.ln()).sum::<f64>());
        }
        Components { k, means, chols, offsets }
    }

    fn n(&self) -> usize {
        self.offsets.len()
    }

    fn sample<R: Rng>(&self, c: usize, rng: &mut R, z: &mut [f64], y: &mut [f64]) {
        let k = self.k;
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let l = &self.chols[c * k * k..(c + 1) * k * k];
        for r in 0..k {
            let mut acc = self.means[c * k + r];
            for (i, &zi) in z.iter().enumerate().take(r + 1) {
                acc += l[r * k + i] * zi;
            }
            y[r] = acc;
        }
    }

    /// `ln Σ_c p(c)·N(y; μ_c, Σ_c)`.
    fn log_density(&self, y: &[f64], work: &mut [f64], terms: &mut [f64]) -> f64 {
        let k = self.k;
        for c in 0..self.n() {
            let l = &self.chols[c * k * k..(c + 1) * k * k];
            let mut q = 0.0;
            for r in 0..k {
                let mut acc = y[r] - self.means[c * k + r];
                for i in 0..r {
                    acc -= l[r * k + i] * work[i];
                }
                work[r] = acc / l[r * k + r];
                q += work[r] * work[r];
            }
            terms[c] = self.offsets[c] - 0.5 * q;
        }
        log_sum_exp(terms)
    }
}

/// Per-component sums of `ln p(y)` and its square over the samples drawn
/// from that component.
#[derive(Clone, Copy, Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn merge(self, o: Moments) -> Moments {
        Moments { n: self.n + o.n, sum: self.sum + o.sum, sum_sq: self.sum_sq + o.sum_sq }
    }

    fn mean_var(self) -> (f64, f64) {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 { ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
        (mean, var)
    }
}

/// Stratified estimate `−Σ_c p(c)·mean_c(g(y))` of several log-density
/// functionals `g` sharing one set of draws per component.
fn stratified(priors: &[f64], sampler: &Components, n_per_component: usize, seed: u64, evals: &[&Components]) -> Vec<Estimate> {
    let n_shards = n_per_component.div_ceil(SHARD);
    let jobs: Vec<(usize, usize)> = (0..sampler.n()).flat_map(|c| (0..n_shards).map(move |s| (c, s))).collect();
    let parts: Vec<Vec<Moments>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let count = SHARD.min(n_per_component - s * SHARD);
            let mut rng = stream(seed, &[c as u64, s as u64]);
            let mut z = vec![0.0; sampler.k];
            let mut y = vec![0.0; sampler.k];
            let max_k = evals.iter().map(|e| e.k).max().unwrap_or(0);
            let mut work = vec![0.0; max_k];
            let mut terms = vec![0.0; sampler.n()];
            let mut out = vec![Moments::default(); evals.len()];
            for _ in 0..count {
                sampler.sample(c, &mut rng, &mut z, &mut y);
                for (m, e) in out.iter_mut().zip(evals) {
                    let v = e.log_density(&y, &mut work, &mut terms);
                    *m = m.merge(Moments { n: 1, sum: v, sum_sq: v * v });
                }
            }
            out
        })
        .collect();
    (0..evals.len())
        .map(|f| {
            let (mut value, mut var) = (0.0, 0.0);
            for c in (0..sampler.n()).filter(|&c| priors[c] > 0.0) {
                let m = parts[c * n_shards..(c + 1) * n_shards].iter().fold(Moments::default(), |a, p| a.merge(p[f]));
                let (mean, v) = m.mean_var();
                value -= priors[c] * mean;
                var += priors[c] * priors[c] * v / m.n as f64;
            }
            Estimate { value, se: var.sqrt() }
        })
        .collect()
}

/// Monte-Carlo entropy of the class mixture (or one of its variants) from
/// `n_per_component` draws of every component.
pub fn gmm_entropy_mc(model: &GaussianClassModel, target: EntropyTarget, n_per_component: usize, seed: u64) -> Result<Estimate> {
    if n_per_component < 2 {
        return Err(invalid!("need at least 2 samples per component, got {}", n_per_component));
    }
    let comps = match target {
        EntropyTarget::All => Components::full(model),
        EntropyTarget::Single(j) if j < model.dim() => Components::diagonal(model, &[j]),
        EntropyTarget::Single(j) => return Err(invalid!("coordinate {} out of range for dimension {}", j, model.dim())),
        EntropyTarget::Independent => Components::diagonal(model, &(0..model.dim()).collect::<Vec<_>>()),
    };
    Ok(stratified(&model.priors, &comps, n_per_component, seed, &[&comps])[0])
}

/// Information between readout and class and its decomposition, in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoBreakdown {
    pub i_tot: f64,
    pub i_lin: f64,
    pub i_sigsim: f64,
    pub i_cor: f64,
    /// `i_lin + i_sigsim`: the linear term with signal similarity folded in.
    pub i_lin_absorbed: f64,
    pub se_tot: f64,
    pub se_lin: f64,
    pub se_sigsim: f64,
    pub se_cor: f64,
    pub mc_samples: usize,
    pub h_y: Estimate,
    pub h_y_given_c: f64,
    pub h_ind: Estimate,
    pub h_marginals: Vec<Estimate>,
}

/// Full breakdown. The joint, independent-product and marginal entropies are
/// estimated from independent draw sets; marginal entropies are estimated
/// jointly from the independent-product draws.
pub fn info_breakdown(model: &GaussianClassModel, n_per_component: usize, seed: u64) -> Result<InfoBreakdown> {
    if n_per_component < 2 {
        return Err(invalid!("need at least 2 samples per component, got {}", n_per_component));
    }
    let k = model.dim();
    let full = Components::full(model);
    let ind = Components::diagonal(model, &(0..k).collect::<Vec<_>>());
    let h_y = stratified(&model.priors, &full, n_per_component, derive_seed(seed, &[0]), &[&full])[0];

    // draws of the product mixture give y_ind; each coordinate of them is a
    // draw of the corresponding marginal mixture
    let margs: Vec<Components> = (0..k).map(|j| Components::diagonal(model, &[j])).collect();
    let (h_ind, h_marginals, se_lin, se_sigsim) = product_and_marginals(model, &ind, &margs, n_per_component, derive_seed(seed, &[1]));

    let h_y_given_c = model.conditional_entropy();
    let hm_cond: f64 = (0..k).map(|j| model.conditional_marginal_entropy(j)).sum();
    let hm: f64 = h_marginals.iter().map(|e| e.value).sum();
    let i_tot = h_y.value - h_y_given_c;
    let i_lin = hm - hm_cond;
    let i_sigsim = h_ind.value - hm;
    let i_cor = i_tot - i_lin - i_sigsim;
    Ok(InfoBreakdown {
        i_tot,
        i_lin,
        i_sigsim,
        i_cor,
        i_lin_absorbed: i_lin + i_sigsim,
        se_tot: h_y.se,
        se_lin,
        se_sigsim,
        se_cor: (h_y.se * h_y.se + h_ind.se * h_ind.se).sqrt(),
        mc_samples: n_per_component,
        h_y,
        h_y_given_c,
        h_ind,
        h_marginals,
    })
}

/// `h(y_ind)`, every `h(y_j)`, and the standard errors of `Σ_j h(y_j)` and
/// `h(y_ind) − Σ_j h(y_j)`, all from one draw set of the product mixture.
fn product_and_marginals(
    model: &GaussianClassModel,
    ind: &Components,
    margs: &[Components],
    n_per_component: usize,
    seed: u64,
) -> (Estimate, Vec<Estimate>, f64, f64) {
    let k = ind.k;
    // per-sample statistics: [ln p_ind, ln p_1 .. ln p_k, Σ_j ln p_j, Σ_j ln p_j − ln p_ind]
    let n_stats = k + 3;
    let n_shards = n_per_component.div_ceil(SHARD);
    let jobs: Vec<(usize, usize)> = (0..ind.n()).flat_map(|c| (0..n_shards).map(move |s| (c, s))).collect();
    let parts: Vec<Vec<Moments>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let count = SHARD.min(n_per_component - s * SHARD);
            let mut rng = stream(seed, &[c as u64, s as u64]);
            let (mut z, mut y, mut work) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
            let mut terms = vec![0.0; ind.n()];
            let mut out = vec![Moments::default(); n_stats];
            let mut v = vec![0.0; n_stats];
            for _ in 0..count {
                ind.sample(c, &mut rng, &mut z, &mut y);
                v[0] = ind.log_density(&y, &mut work, &mut terms);
                let mut msum = 0.0;
                for (j, m) in margs.iter().enumerate() {
                    let lp = m.log_density(&y[j..j + 1], &mut work, &mut terms);
                    v[1 + j] = lp;
                    msum += lp;
                }
                v[k + 1] = msum;
                v[k + 2] = msum - v[0];
                for (o, &x) in out.iter_mut().zip(&v) {
                    *o = o.merge(Moments { n: 1, sum: x, sum_sq: x * x });
                }
            }
            out
        })
        .collect();
    let est = |f: usize| {
        let (mut value, mut var) = (0.0, 0.0);
        for c in (0..ind.n()).filter(|&c| model.priors[c] > 0.0) {
            let m = parts[c * n_shards..(c + 1) * n_shards].iter().fold(Moments::default(), |a, p| a.merge(p[f]));
            let (mean, v) = m.mean_var();
            value -= model.priors[c] * mean;
            var += model.priors[c] * model.priors[c] * v / m.n as f64;
        }
        Estimate { value, se: var.sqrt() }
    };
    let h_ind = est(0);
    let marg = (0..k).map(|j| est(1 + j)).collect();
    (h_ind, marg, est(k + 1).se, est(k + 2).se)
}

/// Converts nats to bits.
pub fn bits(nats: f64) -> f64 {
    nats / LN_2
}
