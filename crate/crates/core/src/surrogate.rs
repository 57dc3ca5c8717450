//! Exact GP surrogate over linearly projected latents, with marginal
//! likelihood fitting and Thompson-sampling batch selection.
//!
//! Latents are flattened to `L·F` and mapped through a learned projection
//! `W` (`L·F × d`) before an ARD squared-exponential kernel. Targets are
//! standardized internally; every public output is in raw `y` units.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::LatentSeq;
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const JITTERS: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    /// Width of the learned projection. Zero uses the flattened latent
    /// directly (identity projection, not trained).
    pub projection_dim: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub max_backtracks: usize,
    pub init_noise: f64,
    pub init_signal_var: f64,
    /// Defaults to `√d` when unset.
    pub init_lengthscale: Option<f64>,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            projection_dim: 16,
            iterations: 100,
            learning_rate: 0.05,
            max_backtracks: 20,
            init_noise: 0.1,
            init_signal_var: 1.0,
            init_lengthscale: None,
            seed: 0,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("init_noise", self.init_noise),
            ("init_signal_var", self.init_signal_var),
            ("init_lengthscale", self.init_lengthscale.unwrap_or(1.0)),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("gp.{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise: f64,
}

/// Hyperparameter summary for run logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpSummary {
    pub n_train: usize,
    pub signal_var: f64,
    pub noise: f64,
    pub mean_lengthscale: f64,
    pub log_marginal_likelihood: f64,
    pub jitter: f64,
}

#[derive(Clone, Debug)]
pub struct GpSurrogate {
    /// Projected training inputs, `n × d`.
    train_inputs: DMatrix<f64>,
    /// Standardized targets.
    train_targets: DVector<f64>,
    projection: Option<DMatrix<f64>>,
    hyper: GpHyper,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    target_mean: f64,
    target_std: f64,
    jitter: f64,
    lml: f64,
    lml_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl Posterior {
    pub fn variance(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|i| self.cov[(i, i)].max(0.0)).collect()
    }
}

/// Flattens latents row-wise into an `n × (L·F)` matrix.
pub fn flatten(latents: &[LatentSeq]) -> Result<DMatrix<f64>> {
    let dim = latents.first().map_or(0, |z| z.as_slice().len());
    for z in latents {
        if z.as_slice().len() != dim {
            return Err(Error::Shape {
                expected: format!("{dim} latent entries"),
                got: format!("{}", z.as_slice().len()),
            });
        }
    }
    Ok(DMatrix::from_fn(latents.len(), dim, |i, j| latents[i].as_slice()[j]))
}

fn scaled(u: &DMatrix<f64>, lengthscales: &[f64]) -> DMatrix<f64> {
    let mut s = u.clone();
    for (j, &l) in lengthscales.iter().enumerate() {
        s.column_mut(j).unscale_mut(l);
    }
    s
}

/// `sf² exp(−½‖a_i − b_j‖²)` on lengthscale-scaled inputs.
fn cross_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>, signal_var: f64) -> DMatrix<f64> {
    let na: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
    let nb: Vec<f64> = b.row_iter().map(|r| r.norm_squared()).collect();
    let mut k = a * b.transpose();
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let d2 = (na[i] + nb[j] - 2.0 * k[(i, j)]).max(0.0);
            k[(i, j)] = signal_var * (-0.5 * d2).exp();
        }
    }
    k
}

fn cholesky_with_jitter(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    for &jitter in &JITTERS {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            if c.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok((c, jitter));
            }
        }
    }
    Err(Error::Cholesky {
        jitter: JITTERS[JITTERS.len() - 1],
    })
}

struct Fit {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    k_signal: DMatrix<f64>,
    jitter: f64,
    lml: f64,
}

fn condition_on(u_scaled: &DMatrix<f64>, y: &DVector<f64>, signal_var: f64, noise: f64) -> Result<Fit> {
    let n = y.len();
    let k_signal = cross_kernel(u_scaled, u_scaled, signal_var);
    let mut k = k_signal.clone();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let (chol, jitter) = cholesky_with_jitter(&k)?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let lml = -0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * LN_2PI;
    Ok(Fit {
        chol,
        alpha,
        k_signal,
        jitter,
        lml,
    })
}

/// Unconstrained parameters: log lengthscales, log signal variance, log
/// noise, then the projection in column-major order when it is learned.
#[derive(Clone, Debug)]
struct Params {
    log_ls: Vec<f64>,
    log_sf2: f64,
    log_noise: f64,
    projection: Option<DMatrix<f64>>,
}

impl Params {
    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_ls.clone();
        v.push(self.log_sf2);
        v.push(self.log_noise);
        if let Some(w) = &self.projection {
            v.extend(w.iter());
        }
        v
    }

    fn from_vec(&self, v: &[f64]) -> Self {
        let d = self.log_ls.len();
        let clamp = |x: f64| x.clamp(-25.0, 12.0);
        Self {
            log_ls: v[..d].iter().map(|&x| clamp(x)).collect(),
            log_sf2: clamp(v[d]),
            log_noise: clamp(v[d + 1]),
            projection: self
                .projection
                .as_ref()
                .map(|w| DMatrix::from_column_slice(w.nrows(), w.ncols(), &v[d + 2..])),
        }
    }

    fn lengthscales(&self) -> Vec<f64> {
        self.log_ls.iter().map(|l| l.exp()).collect()
    }
}

fn project(x: &DMatrix<f64>, w: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    match w {
        Some(w) => x * w,
        None => x.clone(),
    }
}

/// Log marginal likelihood and its gradient w.r.t. [`Params::to_vec`].
fn lml_and_grad(x: &DMatrix<f64>, y: &DVector<f64>, p: &Params) -> Result<(f64, Vec<f64>, Fit)> {
    let ls = p.lengthscales();
    let u = project(x, p.projection.as_ref());
    let us = scaled(&u, &ls);
    let sf2 = p.log_sf2.exp();
    let noise = p.log_noise.exp();
    let fit = condition_on(&us, y, sf2, noise)?;
    let n = y.len();
    let kinv = fit.chol.inverse();
    // G = ½(ααᵀ − K⁻¹); every kernel derivative enters as tr(G ∂K).
    let mut g = &fit.alpha * fit.alpha.transpose();
    g -= &kinv;
    g *= 0.5;
    let m = g.component_mul(&fit.k_signal);
    let row_sums: DVector<f64> = DVector::from_iterator(n, m.row_iter().map(|r| r.sum()));

    let d = ls.len();
    let mut grad = Vec::with_capacity(d + 2);
    for j in 0..d {
        let col = us.column(j);
        let weighted: f64 = (0..n).map(|a| row_sums[a] * col[a] * col[a]).sum();
        let quad = col.dot(&(&m * col));
        grad.push(2.0 * (weighted - quad));
    }
    grad.push(m.sum());
    grad.push(noise * g.trace());
    if p.projection.is_some() {
        // ∂/∂W = −2 Xᵀ (diag(m) − M) U / ℓ² column-wise.
        let mut lap = -m;
        for a in 0..n {
            lap[(a, a)] += row_sums[a];
        }
        let mut gw = x.transpose() * (lap * &u);
        for (j, l) in ls.iter().enumerate() {
            gw.column_mut(j).scale_mut(-2.0 / (l * l));
        }
        grad.extend(gw.iter());
    }
    Ok((fit.lml, grad, fit))
}

fn standardize(y: &[f64]) -> (DVector<f64>, f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
    (DVector::from_iterator(y.len(), y.iter().map(|v| (v - mean) / std)), mean, std)
}

impl GpSurrogate {
    /// Conditions on data with fixed hyperparameters. `standardize = false`
    /// uses raw targets with a zero prior mean.
    pub fn condition(
        latents: &DMatrix<f64>,
        y: &[f64],
        projection: Option<DMatrix<f64>>,
        hyper: GpHyper,
        standardize_targets: bool,
    ) -> Result<Self> {
        if latents.nrows() != y.len() || y.is_empty() {
            return Err(Error::Config(format!(
                "GP needs matching non-empty inputs and targets, got {} and {}",
                latents.nrows(),
                y.len()
            )));
        }
        let u = project(latents, projection.as_ref());
        if hyper.lengthscales.len() != u.ncols() {
            return Err(Error::Shape {
                expected: format!("{} lengthscales", u.ncols()),
                got: format!("{}", hyper.lengthscales.len()),
            });
        }
        let (targets, mean, std) = if standardize_targets {
            standardize(y)
        } else {
            (DVector::from_column_slice(y), 0.0, 1.0)
        };
        let fit = condition_on(&scaled(&u, &hyper.lengthscales), &targets, hyper.signal_var, hyper.noise)?;
        Ok(Self {
            train_inputs: u,
            train_targets: targets,
            projection,
            hyper,
            chol: fit.chol,
            alpha: fit.alpha,
            target_mean: mean,
            target_std: std,
            jitter: fit.jitter,
            lml: fit.lml,
            lml_trace: vec![fit.lml],
        })
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn projection(&self) -> Option<&DMatrix<f64>> {
        self.projection.as_ref()
    }

    pub fn n_train(&self) -> usize {
        self.train_targets.len()
    }

    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.train_inputs
    }

    /// Log marginal likelihood of the standardized targets after each
    /// accepted optimizer step (first entry: initialization).
    pub fn lml_trace(&self) -> &[f64] {
        &self.lml_trace
    }

    pub fn summary(&self) -> GpSummary {
        let d = self.hyper.lengthscales.len().max(1) as f64;
        GpSummary {
            n_train: self.n_train(),
            signal_var: self.hyper.signal_var,
            noise: self.hyper.noise,
            mean_lengthscale: self.hyper.lengthscales.iter().sum::<f64>() / d,
            log_marginal_likelihood: self.lml,
            jitter: self.jitter,
        }
    }

    /// Joint posterior of the latent function in raw `y` units.
    pub fn posterior_flat(&self, candidates: &DMatrix<f64>) -> Result<Posterior> {
        let u = project(candidates, self.projection.as_ref());
        if u.ncols() != self.train_inputs.ncols() {
            return Err(Error::Shape {
                expected: format!("{} projected features", self.train_inputs.ncols()),
                got: format!("{}", u.ncols()),
            });
        }
        let ls = &self.hyper.lengthscales;
        let us = scaled(&u, ls);
        let ts = scaled(&self.train_inputs, ls);
        let ks = cross_kernel(&us, &ts, self.hyper.signal_var);
        let mean_std = &ks * &self.alpha;
        let v = self.chol.l().solve_lower_triangular(&ks.transpose()).ok_or_else(|| Error::Numeric("posterior solve".into()))?;
        let mut cov = cross_kernel(&us, &us, self.hyper.signal_var) - v.transpose() * v;
        let s2 = self.target_std * self.target_std;
        cov *= s2;
        for i in 0..cov.nrows() {
            cov[(i, i)] = cov[(i, i)].max(0.0);
        }
        let mean = mean_std.iter().map(|m| self.target_mean + self.target_std * m).collect();
        Ok(Posterior { mean, cov })
    }

    pub fn posterior(&self, candidates: &[LatentSeq]) -> Result<Posterior> {
        self.posterior_flat(&flatten(candidates)?)
    }
}

/// Fits hyperparameters (and the projection) by gradient ascent on the log
/// marginal likelihood, halving the step whenever it would decrease.
pub fn fit_gp(latents: &[LatentSeq], y: &[f64], config: &GpConfig) -> Result<GpSurrogate> {
    fit_gp_from(latents, y, config, None)
}

/// [`fit_gp`] starting from a previous fit's hyperparameters and projection
/// when their shapes are compatible.
pub fn fit_gp_from(
    latents: &[LatentSeq],
    y: &[f64],
    config: &GpConfig,
    warm: Option<&GpSurrogate>,
) -> Result<GpSurrogate> {
    config.validate()?;
    if latents.len() < 2 || latents.len() != y.len() {
        return Err(Error::Config(format!(
            "fit_gp needs at least 2 matching points, got {} latents and {} targets",
            latents.len(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("GP targets".into()));
    }
    let x = flatten(latents)?;
    let (targets, mean, std) = standardize(y);
    let mut rng = rng::seeded(config.seed);
    let projection = (config.projection_dim > 0).then(|| {
        let scale = 1.0 / (x.ncols() as f64).sqrt();
        DMatrix::from_fn(x.ncols(), config.projection_dim, |_, _| scale * rng::standard_normal(&mut rng))
    });
    let d = projection.as_ref().map_or(x.ncols(), DMatrix::ncols);
    let ls0 = config.init_lengthscale.unwrap_or((d as f64).sqrt());
    let mut params = Params {
        log_ls: vec![ls0.ln(); d],
        log_sf2: config.init_signal_var.ln(),
        log_noise: config.init_noise.ln(),
        projection,
    };
    if let Some(prev) = warm {
        let same_shape = match (&prev.projection, &params.projection) {
            (Some(a), Some(b)) => a.shape() == b.shape(),
            (None, None) => prev.train_inputs.ncols() == x.ncols(),
            _ => false,
        };
        if same_shape {
            params.log_ls = prev.hyper.lengthscales.iter().map(|l| l.ln()).collect();
            params.log_sf2 = prev.hyper.signal_var.ln();
            params.log_noise = prev.hyper.noise.ln();
            params.projection.clone_from(&prev.projection);
        }
    }
    let (mut lml, mut grad, _) = lml_and_grad(&x, &targets, &params)?;
    let mut trace = vec![lml];
    'outer: for _ in 0..config.iterations {
        let base = params.to_vec();
        let mut step = config.learning_rate;
        for _ in 0..=config.max_backtracks {
            let trial: Vec<f64> = base.iter().zip(&grad).map(|(p, g)| p + step * g).collect();
            let cand = params.from_vec(&trial);
            if let Ok((l, g, _)) = lml_and_grad(&x, &targets, &cand) {
                if l.is_finite() && l >= lml && g.iter().all(|v| v.is_finite()) {
                    params = cand;
                    lml = l;
                    grad = g;
                    trace.push(lml);
                    continue 'outer;
                }
            }
            step *= 0.5;
        }
        break;
    }
    let hyper = GpHyper {
        lengthscales: params.lengthscales(),
        signal_var: params.log_sf2.exp(),
        noise: params.log_noise.exp(),
    };
    let u = project(&x, params.projection.as_ref());
    let fit = condition_on(&scaled(&u, &hyper.lengthscales), &targets, hyper.signal_var, hyper.noise)?;
    Ok(GpSurrogate {
        train_inputs: u,
        train_targets: targets,
        projection: params.projection,
        hyper,
        chol: fit.chol,
        alpha: fit.alpha,
        target_mean: mean,
        target_std: std,
        jitter: fit.jitter,
        lml: fit.lml,
        lml_trace: trace,
    })
}

/// Indices chosen from a candidate set, unique and in range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcquisitionBatch {
    pub indices: Vec<usize>,
}

/// Draws joint posterior samples over the candidates.
fn joint_samples<R: Rng + ?Sized>(post: &Posterior, n_samples: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let m = post.mean.len();
    let scale = (post.cov.trace() / m as f64).max(1e-300);
    let mut factor = None;
    for k in 0..=10 {
        let jitter = if k == 0 { 0.0 } else { scale * 10f64.powi(k - 12) };
        let mut c = post.cov.clone();
        for i in 0..m {
            c[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(c) {
            factor = Some(ch.unpack());
            break;
        }
    }
    let l = factor.ok_or(Error::Cholesky { jitter: scale * 1e-2 })?;
    let mut out = Vec::with_capacity(n_samples);
    let mut xi = DVector::zeros(m);
    for _ in 0..n_samples {
        for v in xi.iter_mut() {
            *v = rng::standard_normal(rng);
        }
        let f = &l * &xi;
        out.push(post.mean.iter().zip(f.iter()).map(|(a, b)| a + b).collect());
    }
    Ok(out)
}

/// Thompson sampling where candidates sharing a group id count as one
/// choice: each draw takes its best candidate whose group is still free.
/// Returns at most `min(q, #groups)` indices.
pub fn thompson_select_grouped<R: Rng + ?Sized>(
    gp: &GpSurrogate,
    candidates: &DMatrix<f64>,
    groups: &[usize],
    q: usize,
    rng: &mut R,
) -> Result<AcquisitionBatch> {
    let m = candidates.nrows();
    if m == 0 {
        return Err(Error::EmptyCandidates);
    }
    assert_eq!(groups.len(), m, "one group id per candidate");
    let post = gp.posterior_flat(candidates)?;
    let samples = joint_samples(&post, q, rng)?;
    let mut taken_groups = std::collections::HashSet::new();
    let mut indices = Vec::with_capacity(q);
    for f in samples {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| f[b].total_cmp(&f[a]).then(a.cmp(&b)));
        if let Some(&best) = order.iter().find(|&&i| !taken_groups.contains(&groups[i])) {
            taken_groups.insert(groups[best]);
            indices.push(best);
        }
    }
    Ok(AcquisitionBatch { indices })
}

/// `q` joint posterior draws; each contributes its argmax, falling back to
/// the next best index when the argmax was already chosen.
pub fn thompson_select<R: Rng + ?Sized>(
    gp: &GpSurrogate,
    candidates: &[LatentSeq],
    q: usize,
    rng: &mut R,
) -> Result<AcquisitionBatch> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if q > candidates.len() {
        return Err(Error::Config(format!(
            "cannot select {q} of {} candidates",
            candidates.len()
        )));
    }
    let groups: Vec<usize> = (0..candidates.len()).collect();
    thompson_select_grouped(gp, &flatten(candidates)?, &groups, q, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(xs: &[f64]) -> Vec<LatentSeq> {
        xs.iter().map(|&x| LatentSeq::from_vec(1, 1, vec![x]).unwrap()).collect()
    }

    fn unit_hyper(d: usize, noise: f64) -> GpHyper {
        GpHyper {
            lengthscales: vec![1.0; d],
            signal_var: 1.0,
            noise,
        }
    }

    #[test]
    fn single_point_closed_form() {
        let x = flatten(&points(&[0.0])).unwrap();
        let gp = GpSurrogate::condition(&x, &[1.0], None, unit_hyper(1, 0.0), false).unwrap();
        let post = gp.posterior(&points(&[1.0])).unwrap();
        assert!((post.mean[0] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((post.cov[(0, 0)] - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn interpolates_in_zero_noise_limit() {
        let xs = [-2.0, -0.5, 0.3, 1.7, 3.0];
        let ys = [0.2, -1.0, 0.7, 2.5, -0.3];
        let x = flatten(&points(&xs)).unwrap();
        let gp = GpSurrogate::condition(&x, &ys, None, unit_hyper(1, 1e-10), true).unwrap();
        let post = gp.posterior(&points(&xs)).unwrap();
        for (i, y) in ys.iter().enumerate() {
            assert!((post.mean[i] - y).abs() < 1e-4);
            assert!(post.cov[(i, i)] < 1e-6);
        }
    }

    #[test]
    fn far_candidates_revert_to_prior() {
        let xs = [0.0, 0.5, 1.0];
        let ys = [1.0, 2.0, 4.0];
        let x = flatten(&points(&xs)).unwrap();
        let gp = GpSurrogate::condition(&x, &ys, None, unit_hyper(1, 1e-6), true).unwrap();
        let post = gp.posterior(&points(&[100.0])).unwrap();
        let mean = 7.0 / 3.0;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((post.mean[0] - mean).abs() < 1e-9);
        assert!((post.cov[(0, 0)] - var).abs() < 1e-9);
    }

    #[test]
    fn constant_targets_predict_constant() {
        let zs = points(&[0.0, 1.0, 2.0, 3.0]);
        let gp = fit_gp(&zs, &[3.5; 4], &GpConfig {
            projection_dim: 0,
            ..Default::default()
        })
        .unwrap();
        let post = gp.posterior(&points(&[0.5, 10.0])).unwrap();
        for m in post.mean {
            assert!((m - 3.5).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_inputs_are_handled_by_jitter() {
        let zs = points(&[1.0, 1.0]);
        let x = flatten(&zs).unwrap();
        assert!(GpSurrogate::condition(&x, &[2.0, 2.0], None, unit_hyper(1, 0.0), true).is_ok());
        assert!(fit_gp(&zs, &[2.0, 2.0], &GpConfig::default()).is_ok());
    }

    #[test]
    fn rejects_too_few_points() {
        assert!(matches!(
            fit_gp(&points(&[1.0]), &[1.0], &GpConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fit_learns_small_noise_on_smooth_function() {
        let xs: Vec<f64> = (0..20).map(|i| -3.0 + 6.0 * i as f64 / 19.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        let cfg = GpConfig {
            projection_dim: 0,
            ..Default::default()
        };
        let gp = fit_gp(&points(&xs), &ys, &cfg).unwrap();
        assert!(gp.hyper().noise < 1e-2, "{:?}", gp.hyper());
        assert!(gp.lml_trace().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn analytic_lml_gradient_matches_finite_differences() {
        let mut rng = rng::seeded(3);
        let n = 7;
        let x = DMatrix::from_fn(n, 4, |_, _| rng::standard_normal(&mut rng));
        let y = DVector::from_fn(n, |_, _| rng::standard_normal(&mut rng));
        let p = Params {
            log_ls: vec![0.2, -0.1],
            log_sf2: 0.3,
            log_noise: -1.5,
            projection: Some(DMatrix::from_fn(4, 2, |_, _| 0.5 * rng::standard_normal(&mut rng))),
        };
        let (_, grad, _) = lml_and_grad(&x, &y, &p).unwrap();
        let base = p.to_vec();
        let h = 1e-6;
        for k in 0..base.len() {
            let mut up = base.clone();
            up[k] += h;
            let mut dn = base.clone();
            dn[k] -= h;
            let fd = (lml_and_grad(&x, &y, &p.from_vec(&up)).unwrap().0
                - lml_and_grad(&x, &y, &p.from_vec(&dn)).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "coord {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn thompson_basic_cases() {
        let x = flatten(&points(&[0.0, 2.0])).unwrap();
        let gp = GpSurrogate::condition(&x, &[1.0, 3.0], None, unit_hyper(1, 1e-10), false).unwrap();
        let mut rng = rng::seeded(1);
        let one = thompson_select(&gp, &points(&[0.0]), 1, &mut rng).unwrap();
        assert_eq!(one.indices, vec![0]);
        assert!(matches!(
            thompson_select(&gp, &[], 1, &mut rng),
            Err(Error::EmptyCandidates)
        ));
        // Candidates on the training points: variance ≈ 0, so draws follow the mean.
        let batch = thompson_select(&gp, &points(&[0.0, 2.0, 0.0]), 2, &mut rng).unwrap();
        assert_eq!(batch.indices, vec![1, 0]);
    }

    #[test]
    fn thompson_symmetric_pair_is_fair() {
        // Far from the single training point both candidates sit at the prior
        // with zero correlation.
        let x = flatten(&points(&[0.0])).unwrap();
        let gp = GpSurrogate::condition(&x, &[0.0], None, unit_hyper(1, 1e-6), false).unwrap();
        let cands = points(&[-50.0, 50.0]);
        let mut rng = rng::seeded(11);
        let draws = 10_000;
        let first = (0..draws)
            .filter(|_| thompson_select(&gp, &cands, 1, &mut rng).unwrap().indices[0] == 0)
            .count();
        let freq = first as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn thompson_grouped_skips_taken_groups() {
        let x = flatten(&points(&[0.0, 2.0])).unwrap();
        let gp = GpSurrogate::condition(&x, &[1.0, 3.0], None, unit_hyper(1, 1e-10), false).unwrap();
        let cands = flatten(&points(&[2.0, 2.0, 0.0])).unwrap();
        let mut rng = rng::seeded(5);
        let batch = thompson_select_grouped(&gp, &cands, &[7, 7, 9], 3, &mut rng).unwrap();
        assert_eq!(batch.indices.len(), 2);
        assert_eq!(batch.indices[1], 2);
    }
}
