//! Post-hoc analyses: empirical convergence detection, numerical stability
//! of the mean-field map, finite-size scaling fits, and two-sample
//! Kolmogorov-Smirnov comparison.

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{
    BehaviorParams, ExperimentConfig, RecommenderPolicy, TrainConfig, CONTENT_LIFESPAN,
};
use crate::graph::FollowGraph;
use crate::metrics;
use crate::recommender::RecommenderState;
use crate::rng::{stream, StreamClass};
use crate::sim::{self, PlatformState, Trajectory};
use crate::types::{AgentProfile, ContentId, ContentItem, ContentKind, UserType};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("trajectory too short (need at least {0} steps)")]
    TooShort(usize),
    #[error("no run converged; fixed point undefined")]
    NothingConverged,
    #[error("need at least {0} distinct sizes")]
    TooFewSizes(usize),
    #[error("power-law fit requires positive values")]
    NonPositive,
    #[error("empty sample")]
    EmptySample,
    #[error("simulation failed: {0}")]
    Sim(String),
}

/// Step-to-step delta thresholds for the convergence check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConvergenceThresholds {
    pub density: f64,
    pub satisfaction: f64,
    pub clustering: f64,
}

impl Default for ConvergenceThresholds {
    fn default() -> Self {
        ConvergenceThresholds { density: 0.001, satisfaction: 0.005, clustering: 0.01 }
    }
}

/// Trailing-window length used by [`convergence_step`].
pub const CONVERGENCE_WINDOW: usize = 20;

/// First step whose next `CONVERGENCE_WINDOW` step-to-step deltas all stay
/// below the thresholds; `None` if that never happens.
pub fn convergence_step(
    trajectory: &Trajectory,
    thresholds: &ConvergenceThresholds,
) -> Option<u32> {
    let snaps = &trajectory.snapshots;
    if snaps.len() < 2 {
        return None;
    }
    let ok: Vec<bool> = snaps
        .windows(2)
        .map(|w| {
            (w[1].density - w[0].density).abs() < thresholds.density
                && (w[1].satisfaction_mean - w[0].satisfaction_mean).abs()
                    < thresholds.satisfaction
                && (w[1].local_clustering_mean - w[0].local_clustering_mean).abs()
                    < thresholds.clustering
        })
        .collect();
    let window = CONVERGENCE_WINDOW.min(ok.len());
    // t indexes the delta between snaps[t] and snaps[t+1].
    'outer: for t in 0..=(ok.len() - window) {
        for &o in &ok[t..t + window] {
            if !o {
                continue 'outer;
            }
        }
        return Some(snaps[t + 1].step);
    }
    None
}

/// Macro-state coordinates of the mean-field map.
pub type MacroState = [f64; 3]; // (satisfaction mean, density, mean local clustering)

pub fn macro_of_trajectory_tail(trajectory: &Trajectory, tail: usize) -> MacroState {
    let snaps = &trajectory.snapshots;
    let from = snaps.len().saturating_sub(tail);
    let slice = &snaps[from..];
    let n = slice.len() as f64;
    [
        slice.iter().map(|s| s.satisfaction_mean).sum::<f64>() / n,
        slice.iter().map(|s| s.density).sum::<f64>() / n,
        slice.iter().map(|s| s.local_clustering_mean).sum::<f64>() / n,
    ]
}

/// Empirical fixed point: mean of the last 50 steps of (s, rho, C) across
/// converged seeds. Non-converged runs are excluded.
pub fn estimate_fixed_point(
    config: &ExperimentConfig,
    behavior: &BehaviorParams,
    training: &TrainConfig,
    seeds: &[u64],
    steps: u32,
) -> Result<MacroState, AnalysisError> {
    let mut cfg = config.clone();
    cfg.steps = steps;
    let thresholds = ConvergenceThresholds::default();
    let mut acc = [0.0; 3];
    let mut used = 0usize;
    for &seed in seeds {
        let t = sim::run(&cfg, behavior, training, seed)
            .map_err(|e| AnalysisError::Sim(e.to_string()))?;
        if convergence_step(&t, &thresholds).is_none() {
            continue;
        }
        let m = macro_of_trajectory_tail(&t, 50);
        for k in 0..3 {
            acc[k] += m[k];
        }
        used += 1;
    }
    if used == 0 {
        return Err(AnalysisError::NothingConverged);
    }
    Ok([acc[0] / used as f64, acc[1] / used as f64, acc[2] / used as f64])
}

/// Satisfaction spread used when resampling micro-states around a macro mean.
const ENSEMBLE_SAT_SPREAD: f64 = 0.15;

/// Build a micro-state consistent with the macro coordinates: simplex
/// preferences, satisfaction spread around the mean (churn-consistent),
/// a triangle-packed random graph hitting the target density and
/// clustering in expectation, and a content pool at the steady-state size.
/// Randomized rounding keeps every discrete count smooth in the macro
/// coordinates under common random numbers.
fn synth_micro_state(
    x: MacroState,
    config: &ExperimentConfig,
    behavior: &BehaviorParams,
    member_seed: u64,
) -> PlatformState {
    let [s_mean, rho, clustering] = x;
    let n = config.n_users as usize;

    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(member_seed, StreamClass::InitAgent, i as u64, 1);
        let user_type = if rng.random::<f64>() < config.alpha_enthusiast {
            UserType::Enthusiast
        } else {
            UserType::Casual
        };
        let preference = sim::sample_direction_pub(&mut rng);
        let mut srng = stream(member_seed, StreamClass::Ensemble, i as u64, 1);
        let u: f64 = srng.random();
        let satisfaction = (s_mean + ENSEMBLE_SAT_SPREAD * (2.0 * u - 1.0)).clamp(0.0, 1.0);
        agents.push(AgentProfile {
            id: i as u32,
            user_type,
            preference,
            creation_rate: user_type.creation_rate(),
            satisfaction,
            active: satisfaction >= behavior.churn_threshold,
        });
    }

    // Graph: T disjoint triangles carry the clustering signal, the rest is
    // uniform-random among non-triangle nodes.
    let mut graph = FollowGraph::new(n);
    {
        let mut shuffle_rng = stream(member_seed, StreamClass::InitGraph, 1, 1);
        let mut perm: Vec<u32> = (0..n as u32).collect();
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let round_smooth = |v: f64, rng: &mut rand_chacha::ChaCha8Rng| -> usize {
            let base = v.floor();
            let frac = v - base;
            base as usize + usize::from(rng.random::<f64>() < frac)
        };
        let mut count_rng = stream(member_seed, StreamClass::InitGraph, 2, 1);
        let pairs = n * (n - 1) / 2;
        let m_target = round_smooth(rho * pairs as f64, &mut count_rng);
        let mut t_count = round_smooth(clustering * n as f64 / 3.0, &mut count_rng);
        t_count = t_count.min(n / 3).min(m_target / 3);

        let mut dir_rng = stream(member_seed, StreamClass::InitGraph, 3, 1);
        for t in 0..t_count {
            let tri = [perm[3 * t], perm[3 * t + 1], perm[3 * t + 2]];
            for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                if dir_rng.random::<bool>() {
                    graph.add_edge(tri[a], tri[b]);
                } else {
                    graph.add_edge(tri[b], tri[a]);
                }
            }
        }
        let rest = &perm[3 * t_count..];
        let mut m_rest = m_target.saturating_sub(3 * t_count);
        let mut pair_rng = stream(member_seed, StreamClass::InitGraph, 4, 1);
        let mut guard = 0usize;
        while m_rest > 0 && rest.len() >= 2 && guard < 50 * m_target.max(1) {
            guard += 1;
            let a = rest[pair_rng.random_range(0..rest.len())];
            let b = rest[pair_rng.random_range(0..rest.len())];
            if a == b || graph.has_edge(a, b) || graph.has_edge(b, a) {
                continue;
            }
            if pair_rng.random::<bool>() {
                graph.add_edge(a, b);
            } else {
                graph.add_edge(b, a);
            }
            m_rest -= 1;
        }
    }

    // Content pool at its steady-state size, authored by current agents.
    let mean_rate = config.alpha_enthusiast * UserType::Enthusiast.creation_rate()
        + (1.0 - config.alpha_enthusiast) * UserType::Casual.creation_rate();
    let item_count =
        (n as f64 * mean_rate * (CONTENT_LIFESPAN as f64 + 1.0)).round().max(1.0) as usize;
    let mut content = Vec::with_capacity(item_count);
    for c in 0..item_count {
        let mut rng = stream(member_seed, StreamClass::InitContent, c as u64, 1);
        let creator = rng.random_range(0..n) as u32;
        let topic = crate::behavior::noisy_topic(
            &agents[creator as usize].preference,
            behavior.creation_noise_sigma,
            &mut rng,
        );
        let kind = if rng.random::<f64>() < behavior.popular_fraction {
            ContentKind::Popular
        } else {
            ContentKind::Niche
        };
        content.push(ContentItem {
            id: c as ContentId,
            creator,
            topic,
            kind,
            likes: 0,
            shares: 0,
            views: 0,
            birth_step: 0,
            active: true,
        });
    }

    PlatformState::from_parts(
        graph,
        agents,
        content,
        RecommenderState::new(RecommenderPolicy::none()),
        member_seed,
        behavior.engagement_window,
    )
}

fn macro_of_state(state: &PlatformState) -> MacroState {
    let adj = state.graph.undirected_adjacency();
    [
        state.satisfaction_mean(),
        metrics::density_from_adjacency(&adj).unwrap_or(0.0),
        metrics::local_clustering_mean(&adj),
    ]
}

/// One-step ensemble-averaged mean-field map of the organic dynamics
/// (no recommender) at the given behavior parameters.
pub fn mean_field_map(
    config: &ExperimentConfig,
    behavior: &BehaviorParams,
    ensemble: usize,
    base_seed: u64,
) -> impl Fn(&MacroState) -> MacroState {
    let mut cfg = config.clone();
    cfg.policy = RecommenderPolicy::none();
    cfg.t_activate = u32::MAX;
    let behavior = behavior.clone();
    let training = TrainConfig::default();
    move |x: &MacroState| {
        let mut acc = [0.0; 3];
        for e in 0..ensemble {
            // Fixed member seeds: common random numbers across evaluations.
            let member_seed = base_seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(e as u64 + 1));
            let mut state = synth_micro_state(*x, &cfg, &behavior, member_seed);
            sim::step(&mut state, &cfg, &behavior, &training);
            let m = macro_of_state(&state);
            for k in 0..3 {
                acc[k] += m[k];
            }
        }
        [acc[0] / ensemble as f64, acc[1] / ensemble as f64, acc[2] / ensemble as f64]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub fixed_point: MacroState,
    pub jacobian: [[f64; 3]; 3],
    #[serde(skip)]
    pub eigenvalues: [Complex64; 3],
    pub eigenvalues_re: [f64; 3],
    pub eigenvalues_im: [f64; 3],
    pub spectral_radius: f64,
    pub stable: bool,
    /// Coordinates where a boundary forced a one-sided difference.
    pub one_sided: [bool; 3],
}

/// Central-difference Jacobian of an arbitrary 3-coordinate map, falling
/// back to one-sided differences at the [0, 1] coordinate bounds.
pub fn jacobian_of_map<F: Fn(&MacroState) -> MacroState>(
    map: F,
    x: &MacroState,
    perturbation: f64,
) -> ([[f64; 3]; 3], [bool; 3]) {
    let mut jac = [[0.0; 3]; 3];
    let mut one_sided = [false; 3];
    for k in 0..3 {
        let scale = x[k].abs().max(0.05);
        let h = perturbation * scale;
        let lo_ok = x[k] - h >= 0.0;
        let hi_ok = x[k] + h <= 1.0;
        let (f_hi, f_lo, span) = if lo_ok && hi_ok {
            let mut hi = *x;
            hi[k] += h;
            let mut lo = *x;
            lo[k] -= h;
            (map(&hi), map(&lo), 2.0 * h)
        } else if hi_ok {
            one_sided[k] = true;
            let mut hi = *x;
            hi[k] += h;
            (map(&hi), map(x), h)
        } else {
            one_sided[k] = true;
            let mut lo = *x;
            lo[k] -= h;
            (map(x), map(&lo), h)
        };
        for row in 0..3 {
            jac[row][k] = (f_hi[row] - f_lo[row]) / span;
        }
    }
    (jac, one_sided)
}

/// Roots of the monic cubic `x^3 + a x^2 + b x + c` via Cardano in complex
/// arithmetic.
pub fn cubic_roots(a: f64, b: f64, c: f64) -> [Complex64; 3] {
    let a3 = a / 3.0;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let disc = Complex64::new((q / 2.0) * (q / 2.0) + (p / 3.0) * (p / 3.0) * (p / 3.0), 0.0);
    let sq = disc.sqrt();
    let mut u = (-Complex64::new(q / 2.0, 0.0) + sq).cbrt();
    if u.norm() < 1e-30 {
        u = (-Complex64::new(q / 2.0, 0.0) - sq).cbrt();
    }
    let omega = Complex64::new(-0.5, (3.0f64).sqrt() / 2.0);
    let mut roots = [Complex64::new(0.0, 0.0); 3];
    for (k, root) in roots.iter_mut().enumerate() {
        let uk = u * omega.powu(k as u32);
        let t = if uk.norm() < 1e-30 {
            Complex64::new(0.0, 0.0)
        } else {
            uk - Complex64::new(p / 3.0, 0.0) / uk
        };
        *root = t - Complex64::new(a3, 0.0);
    }
    roots
}

/// Eigenvalues of a 3x3 matrix via its characteristic polynomial.
pub fn eigenvalues_3x3(m: &[[f64; 3]; 3]) -> [Complex64; 3] {
    let tr = m[0][0] + m[1][1] + m[2][2];
    let minors = m[0][0] * m[1][1] - m[0][1] * m[1][0]
        + m[0][0] * m[2][2]
        - m[0][2] * m[2][0]
        + m[1][1] * m[2][2]
        - m[1][2] * m[2][1];
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    // det(M - xI) = -x^3 + tr x^2 - minors x + det; negate for monic form.
    cubic_roots(-tr, minors, -det)
}

pub fn report_from_jacobian(
    fixed_point: MacroState,
    jacobian: [[f64; 3]; 3],
    one_sided: [bool; 3],
) -> StabilityReport {
    let eigenvalues = eigenvalues_3x3(&jacobian);
    let spectral_radius = eigenvalues.iter().map(|e| e.norm()).fold(0.0, f64::max);
    StabilityReport {
        fixed_point,
        jacobian,
        eigenvalues,
        eigenvalues_re: [eigenvalues[0].re, eigenvalues[1].re, eigenvalues[2].re],
        eigenvalues_im: [eigenvalues[0].im, eigenvalues[1].im, eigenvalues[2].im],
        spectral_radius,
        stable: spectral_radius < 1.0,
        one_sided,
    }
}

/// Linearize the mean-field map around `fixed_point` by central finite
/// differences over the seeded micro-state ensemble.
pub fn numerical_jacobian(
    fixed_point: MacroState,
    config: &ExperimentConfig,
    behavior: &BehaviorParams,
    perturbation: f64,
    ensemble: usize,
    seed: u64,
) -> StabilityReport {
    let map = mean_field_map(config, behavior, ensemble, seed);
    let (jac, one_sided) = jacobian_of_map(&map, &fixed_point, perturbation);
    report_from_jacobian(fixed_point, jac, one_sided)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScalingModel {
    /// `y = amplitude * n^(-exponent)`, fit by least squares in log-log space.
    PowerLaw,
    /// `y = slope * ln(n) + intercept`, fit in (ln n, y) space.
    LogLinear,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingFit {
    pub model: ScalingModel,
    /// PowerLaw: (amplitude, exponent); LogLinear: (slope, intercept).
    pub coefficients: (f64, f64),
    pub r_squared: f64,
    /// Standard errors of the fitted (slope, intercept) in fit space.
    pub std_errors: (f64, f64),
    n: usize,
    mean_x: f64,
    sxx: f64,
    residual_var: f64,
    slope: f64,
    intercept: f64,
}

struct Ols {
    slope: f64,
    intercept: f64,
    r_squared: f64,
    slope_se: f64,
    intercept_se: f64,
    residual_var: f64,
    mean_x: f64,
    sxx: f64,
}

fn ols(xs: &[f64], ys: &[f64]) -> Ols {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let e = y - (intercept + slope * x);
        ss_res += e * e;
    }
    let r_squared = if syy <= 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    let df = (xs.len() as f64 - 2.0).max(1.0);
    let residual_var = ss_res / df;
    let slope_se = (residual_var / sxx).sqrt();
    let intercept_se = (residual_var * (1.0 / n + mx * mx / sxx)).sqrt();
    Ols { slope, intercept, r_squared, slope_se, intercept_se, residual_var, mean_x: mx, sxx }
}

fn check_points(points: &[(f64, f64)], need_positive_y: bool) -> Result<(), AnalysisError> {
    let mut sizes: Vec<f64> = points.iter().map(|p| p.0).collect();
    sizes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sizes.dedup();
    if sizes.len() < 3 {
        return Err(AnalysisError::TooFewSizes(3));
    }
    if points.iter().any(|&(n, y)| n <= 0.0 || (need_positive_y && y <= 0.0)) {
        return Err(AnalysisError::NonPositive);
    }
    Ok(())
}

/// Fit `y = a * n^(-alpha)` to (n, y) points.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<ScalingFit, AnalysisError> {
    check_points(points, true)?;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let o = ols(&xs, &ys);
    Ok(ScalingFit {
        model: ScalingModel::PowerLaw,
        coefficients: (o.intercept.exp(), -o.slope),
        r_squared: o.r_squared,
        std_errors: (o.slope_se, o.intercept_se),
        n: points.len(),
        mean_x: o.mean_x,
        sxx: o.sxx,
        residual_var: o.residual_var,
        slope: o.slope,
        intercept: o.intercept,
    })
}

/// Fit `y = a * ln(n) + b` to (n, y) points.
pub fn fit_log_linear(points: &[(f64, f64)]) -> Result<ScalingFit, AnalysisError> {
    check_points(points, false)?;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let o = ols(&xs, &ys);
    Ok(ScalingFit {
        model: ScalingModel::LogLinear,
        coefficients: (o.slope, o.intercept),
        r_squared: o.r_squared,
        std_errors: (o.slope_se, o.intercept_se),
        n: points.len(),
        mean_x: o.mean_x,
        sxx: o.sxx,
        residual_var: o.residual_var,
        slope: o.slope,
        intercept: o.intercept,
    })
}

impl ScalingFit {
    /// Prediction with a 95% interval at size `n`. Power-law intervals are
    /// computed in log space and transformed back.
    pub fn predict(&self, n: f64) -> (f64, f64, f64) {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let x = n.ln();
        let yhat = self.intercept + self.slope * x;
        let df = (self.n as f64 - 2.0).max(1.0);
        let t = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(0.975);
        let se = (self.residual_var
            * (1.0 + 1.0 / self.n as f64 + (x - self.mean_x).powi(2) / self.sxx))
            .sqrt();
        let (lo, hi) = (yhat - t * se, yhat + t * se);
        match self.model {
            ScalingModel::PowerLaw => (yhat.exp(), lo.exp(), hi.exp()),
            ScalingModel::LogLinear => (yhat, lo, hi),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KsResult {
    pub d: f64,
    /// Asymptotic two-sample p-value.
    pub p: f64,
    /// Exact permutation p-value, available for small samples.
    pub p_exact: Option<f64>,
}

/// Two-sample Kolmogorov-Smirnov statistic by streaming merge, with the
/// asymptotic p-value and an exact lattice-path p for samples of at most 30.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<KsResult, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::EmptySample);
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (m, n) = (xs.len(), ys.len());
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d_num: u64 = 0; // sup |i*n - j*m|, exact in integers
    while i < m && j < n {
        let v = xs[i].min(ys[j]);
        while i < m && xs[i] <= v {
            i += 1;
        }
        while j < n && ys[j] <= v {
            j += 1;
        }
        let diff = (i as i64 * n as i64 - j as i64 * m as i64).unsigned_abs();
        if diff > d_num {
            d_num = diff;
        }
    }
    let d = d_num as f64 / (m as f64 * n as f64);

    let en = ((m as f64 * n as f64) / (m as f64 + n as f64)).sqrt();
    let p = ks_asymptotic_p(en * d);

    let p_exact = if m <= 30 && n <= 30 { Some(ks_exact_p(m, n, d_num)) } else { None };
    Ok(KsResult { d, p, p_exact })
}

/// Kolmogorov survival function `Q(lambda) = 2 sum (-1)^{j-1} exp(-2 j^2 lambda^2)`.
fn ks_asymptotic_p(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Exact permutation p-value: fraction of monotone lattice paths whose sup
/// deviation reaches the observed one (continuous null, no ties).
fn ks_exact_p(m: usize, n: usize, d_num: u64) -> f64 {
    // Count paths (0,0) -> (m,n) with |i*n - j*m| < d_num at every vertex.
    let mut col: Vec<u128> = vec![0; n + 1];
    let inside = |i: usize, j: usize| -> bool {
        ((i as i64 * n as i64 - j as i64 * m as i64).unsigned_abs()) < d_num
    };
    col[0] = 1;
    for j in 1..=n {
        col[j] = if inside(0, j) { col[j - 1] } else { 0 };
    }
    for i in 1..=m {
        let mut next: Vec<u128> = vec![0; n + 1];
        next[0] = if inside(i, 0) { col[0] } else { 0 };
        for j in 1..=n {
            next[j] = if inside(i, j) { next[j - 1] + col[j] } else { 0 };
        }
        col = next;
    }
    let total = binomial(m + n, m);
    1.0 - col[n] as f64 / total as f64
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsSnapshot;

    fn snap(step: u32, density: f64, sat: f64, clust: f64) -> MetricsSnapshot {
        MetricsSnapshot {
            step,
            density,
            local_clustering_mean: clust,
            transitivity: 0.0,
            modularity: 0.0,
            avg_path_length: 1.0,
            reciprocity: 0.0,
            assortativity: 0.0,
            topic_entropy: 0.5,
            retention: 1.0,
            engagement_rate: 0.1,
            content_spread: 1.0,
            viral_coefficient_mean: 0.1,
            precision_at_10: f64::NAN,
            satisfaction_mean: sat,
        }
    }

    #[test]
    fn convergence_constant_trajectory() {
        let snaps: Vec<_> = (1..=40).map(|s| snap(s, 0.02, 0.5, 0.3)).collect();
        let t = Trajectory { snapshots: snaps };
        assert_eq!(convergence_step(&t, &ConvergenceThresholds::default()), Some(2));
    }

    #[test]
    fn convergence_diverging_ramp_is_none() {
        let snaps: Vec<_> =
            (1..=40).map(|s| snap(s, 0.02 + 0.01 * s as f64, 0.5, 0.3)).collect();
        let t = Trajectory { snapshots: snaps };
        assert_eq!(convergence_step(&t, &ConvergenceThresholds::default()), None);
    }

    #[test]
    fn convergence_after_transient() {
        let snaps: Vec<_> = (1..=60)
            .map(|s| {
                let d = if s < 10 { 0.1 / s as f64 } else { 0.01 };
                snap(s, d, 0.5, 0.3)
            })
            .collect();
        let t = Trajectory { snapshots: snaps };
        let got = convergence_step(&t, &ConvergenceThresholds::default()).unwrap();
        assert!(got <= 11, "got {got}");
    }

    #[test]
    fn jacobian_recovers_identity() {
        let (jac, _) = jacobian_of_map(|x| *x, &[0.5, 0.3, 0.4], 1e-2);
        for r in 0..3 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((jac[r][c] - expect).abs() < 1e-9);
            }
        }
        let report = report_from_jacobian([0.5, 0.3, 0.4], jac, [false; 3]);
        // A triple root amplifies float error by the cube root; 1e-4 is the
        // attainable accuracy here. The char-poly residual stays tight.
        for e in report.eigenvalues {
            assert!((e.norm() - 1.0).abs() < 1e-4);
            let d = det3_complex(&jac, e);
            assert!(d.norm() < 1e-8);
        }
    }

    #[test]
    fn jacobian_recovers_linear_map() {
        let a = [[0.8, 0.1, 0.0], [0.05, 0.7, 0.2], [0.0, 0.1, 0.6]];
        let map = |x: &MacroState| -> MacroState {
            let mut y = [0.0; 3];
            for r in 0..3 {
                for c in 0..3 {
                    y[r] += a[r][c] * x[c];
                }
            }
            y
        };
        let (jac, _) = jacobian_of_map(map, &[0.4, 0.3, 0.5], 1e-2);
        for r in 0..3 {
            for c in 0..3 {
                assert!((jac[r][c] - a[r][c]).abs() < 1e-4, "J[{r}][{c}] = {}", jac[r][c]);
            }
        }
    }

    #[test]
    fn eigenvalues_satisfy_characteristic_polynomial() {
        let m = [[0.9, 0.2, -0.1], [0.3, 0.5, 0.0], [0.1, -0.2, 0.7]];
        for lam in eigenvalues_3x3(&m) {
            // det(M - lambda I) should vanish.
            let d = det3_complex(&m, lam);
            assert!(d.norm() < 1e-8, "residual {}", d.norm());
        }
    }

    fn det3_complex(m: &[[f64; 3]; 3], lam: Complex64) -> Complex64 {
        let a = |r: usize, c: usize| -> Complex64 {
            let v = Complex64::new(m[r][c], 0.0);
            if r == c {
                v - lam
            } else {
                v
            }
        };
        a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1))
            - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
            + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0))
    }

    #[test]
    fn eigenvalues_complex_pair() {
        // Rotation-like block has a complex pair.
        let m = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.5]];
        let eig = eigenvalues_3x3(&m);
        for lam in eig {
            let d = det3_complex(&m, lam);
            assert!(d.norm() < 1e-8);
        }
        let n_complex = eig.iter().filter(|e| e.im.abs() > 1e-9).count();
        assert_eq!(n_complex, 2);
    }

    #[test]
    fn one_sided_fallback_near_boundary() {
        let (_, one_sided) = jacobian_of_map(|x| *x, &[0.0004, 0.5, 0.5], 1e-2);
        assert!(one_sided[0]);
        assert!(!one_sided[1]);
    }

    #[test]
    fn power_law_noiseless_recovery() {
        let points: Vec<(f64, f64)> =
            [100.0f64, 200.0, 500.0, 1000.0].iter().map(|&n| (n, 2.0 * n.powf(-0.1))).collect();
        let fit = fit_power_law(&points).unwrap();
        assert!((fit.coefficients.0 - 2.0).abs() < 1e-10);
        assert!((fit.coefficients.1 - 0.1).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-10);
        let (pred, lo, hi) = fit.predict(2000.0);
        assert!((pred - 2.0 * 2000f64.powf(-0.1)).abs() < 1e-9);
        assert!(lo <= pred && pred <= hi);
    }

    #[test]
    fn log_linear_noiseless_recovery() {
        let points: Vec<(f64, f64)> =
            [50.0f64, 100.0, 400.0, 900.0].iter().map(|&n| (n, 1.2 * n.ln() + 0.8)).collect();
        let fit = fit_log_linear(&points).unwrap();
        assert!((fit.coefficients.0 - 1.2).abs() < 1e-10);
        assert!((fit.coefficients.1 - 0.8).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-10);
    }

    #[test]
    fn scaling_rejects_bad_inputs() {
        assert!(matches!(
            fit_power_law(&[(100.0, 1.0), (200.0, 0.9)]),
            Err(AnalysisError::TooFewSizes(3))
        ));
        assert!(matches!(
            fit_power_law(&[(100.0, 1.0), (200.0, -0.5), (300.0, 0.7)]),
            Err(AnalysisError::NonPositive)
        ));
    }

    #[test]
    fn ks_examples() {
        let same = ks_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same.d, 0.0);
        let disjoint = ks_distance(&[1.0, 2.0], &[10.0, 11.0]).unwrap();
        assert_eq!(disjoint.d, 1.0);
        let shifted = ks_distance(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((shifted.d - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ks_matches_brute_force_on_random_samples() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rng.random_range(1..20);
            let n = rng.random_range(1..20);
            let a: Vec<f64> = (0..m).map(|_| (rng.random::<f64>() * 8.0).round() / 4.0).collect();
            let b: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).round() / 4.0).collect();
            let got = ks_distance(&a, &b).unwrap().d;
            // Brute force: evaluate ECDF difference at every sample point.
            let mut expect = 0.0f64;
            for x in a.iter().chain(b.iter()) {
                let fa = a.iter().filter(|v| **v <= *x).count() as f64 / a.len() as f64;
                let fb = b.iter().filter(|v| **v <= *x).count() as f64 / b.len() as f64;
                expect = expect.max((fa - fb).abs());
            }
            assert!((got - expect).abs() < 1e-12, "ks mismatch: {got} vs {expect}");
        }
    }

    #[test]
    fn ks_exact_p_reasonable() {
        let r = ks_distance(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.5, 3.5, 4.5]).unwrap();
        let pe = r.p_exact.unwrap();
        assert!((0.0..=1.0).contains(&pe));
        // Identical large-offset samples must be highly significant.
        let far = ks_distance(&[1.0, 1.1, 1.2, 1.3, 1.4], &[9.0, 9.1, 9.2, 9.3, 9.4]).unwrap();
        assert!(far.p_exact.unwrap() < 0.05);
    }
}
