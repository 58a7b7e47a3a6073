//! Linear-Gaussian baselines for the ring-tracking task: pseudo-observation
//! decoding of population counts, Kalman filtering and smoothing, and EM
//! system identification for latent linear dynamics.
//!
//! Conventions:
//! - The filter state lives in displacement coordinates `u = position - L/2`,
//!   so the ring seam sits at `u = +/- L/2`. [`displacement_pseudo_obs`]
//!   converts decoded ring positions into this frame and
//!   [`position_estimates`] maps state means back onto the ring.
//! - Observations are scalar `(z, r)` pairs: a decoded location plus its
//!   variance. A step with no usable information carries `r = f64::INFINITY`
//!   and is handled as predict-only (no update, no likelihood term).
//! - When `wrap` is set, innovations are reduced to the principal interval
//!   `[-L/2, L/2)` before the update so that estimates chase observations the
//!   short way around the ring.

use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayView1, ArrayView2};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::position_from_means;
use crate::rng::stream;
use crate::worldgen::{LdsWorld, PpcCodec};
use crate::wrap::{wrap_position, wrap_signed};

/// Stream tag for EM restart initialization draws.
const TAG_EM_RESTART: u64 = 12;

/// Negativity tolerated in a covariance eigenvalue, relative to the matrix's
/// largest entry (with an absolute floor of one for small-scale matrices):
/// rounding noise in the filter/smoother recursions scales with the
/// magnitudes handled en route, so wide priors (e.g. the 1e6 restart
/// initializations used by EM) legitimately produce negative eigenvalues of
/// order `eps * scale` that must be repaired, not rejected.
const COV_EIG_REL_TOL: f64 = 1e-8;

/// The (negative) eigenvalue threshold below which `m` is declared broken.
fn psd_tolerance(m: &DMatrix<f64>) -> f64 {
    -COV_EIG_REL_TOL * m.amax().max(1.0)
}

/// Symmetrize `m` and repair rounding-level indefiniteness by shifting the
/// spectrum up to zero; reject anything negative beyond rounding scale.
///
/// `scale_hint` is the magnitude of the largest quantity handled while
/// computing `m` — the result of a near-cancellation can be much smaller
/// than its inputs, and rounding debris scales with the inputs.
fn ensure_psd(context: &str, step: usize, m: &mut DMatrix<f64>, scale_hint: f64) -> Result<()> {
    symmetrize(m);
    let eig = min_eig_sym(m);
    if eig >= 0.0 {
        return Ok(());
    }
    let tol = -COV_EIG_REL_TOL * m.amax().max(scale_hint).max(1.0);
    if eig < tol {
        return Err(Error::NumericDomain(format!(
            "{context}: covariance eigenvalue {eig:.3e} below tolerance {tol:.3e} at step {step}"
        )));
    }
    floor_eigenvalues(m, 0.0);
    Ok(())
}

/// Jitter added to keep M-step covariance estimates positive definite.
const EM_COV_JITTER: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Pseudo-observations from population counts
// ---------------------------------------------------------------------------

/// Collapse one vector of unit counts into a scalar location observation.
///
/// Returns `(z, r)` where `z` is the circular center of mass of the counts
/// under the codec's preferred locations and `r = width^2 / total_count` is
/// the variance of that estimate. A frame with zero total count carries no
/// information; it returns the ring midpoint with `r = f64::INFINITY`.
pub fn ppc_pseudo_obs(codec: &PpcCodec, counts: &ArrayView1<f64>) -> Result<(f64, f64)> {
    codec.validate()?;
    if counts.len() != codec.n_units {
        return Err(Error::dim("ppc_pseudo_obs", codec.n_units, counts.len()));
    }
    let mut total = 0.0;
    for &c in counts.iter() {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::NumericDomain(format!(
                "ppc_pseudo_obs: counts must be finite and non-negative, got {c}"
            )));
        }
        total += c;
    }
    if total <= 0.0 {
        return Ok((codec.length / 2.0, f64::INFINITY));
    }
    let z = position_from_means(codec, counts)?;
    let r = codec.tuning_width * codec.tuning_width / total;
    Ok((z, r))
}

/// Decode every row of a count matrix into ring-coordinate pseudo-observations.
pub fn pseudo_obs_sequence(codec: &PpcCodec, counts: &ArrayView2<f64>) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(counts.nrows());
    for row in counts.rows() {
        out.push(ppc_pseudo_obs(codec, &row)?);
    }
    Ok(out)
}

/// Decode count rows into displacement-frame pseudo-observations `(z - L/2, r)`.
///
/// This is the form [`kalman_filter`] consumes for the ring task.
pub fn displacement_pseudo_obs(
    codec: &PpcCodec,
    counts: &ArrayView2<f64>,
) -> Result<Vec<(f64, f64)>> {
    let half = codec.length / 2.0;
    let mut out = pseudo_obs_sequence(codec, counts)?;
    for obs in &mut out {
        obs.0 -= half;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Model and beliefs
// ---------------------------------------------------------------------------

/// A discrete-time linear dynamical system with a scalar linear read-out.
///
/// `x_{t+1} = A x_t + w_t`, `w_t ~ N(0, Q)`, observed through `z_t = C x_t + v_t`
/// with per-step observation variance supplied alongside each observation.
#[derive(Debug, Clone)]
pub struct LdsModel {
    /// State transition matrix, `k x k`.
    pub a: DMatrix<f64>,
    /// State noise covariance, `k x k`.
    pub q: DMatrix<f64>,
    /// Read-out row, `1 x k`.
    pub c: DMatrix<f64>,
    /// Initial state mean.
    pub init_mean: DVector<f64>,
    /// Initial state covariance.
    pub init_cov: DMatrix<f64>,
}

impl LdsModel {
    /// Construct and validate a model from its parts.
    pub fn new(
        a: DMatrix<f64>,
        q: DMatrix<f64>,
        c: DMatrix<f64>,
        init_mean: DVector<f64>,
        init_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let model = LdsModel {
            a,
            q,
            c,
            init_mean,
            init_cov,
        };
        model.validate()?;
        Ok(model)
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// A scalar random-walk-style model reading out the state directly.
    pub fn order1(a: f64, q: f64, init_mean: f64, init_var: f64) -> Result<Self> {
        LdsModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, init_mean),
            DMatrix::from_element(1, 1, init_var),
        )
    }

    /// The ground-truth second-order tracking model for a simulated ring world,
    /// expressed in displacement coordinates `u = position - L/2`.
    ///
    /// The initial position is uniform over the ring, which is represented by
    /// a near-flat prior on `u`; the initial velocity prior matches the
    /// simulator's draw.
    pub fn from_world(world: &LdsWorld) -> Result<Self> {
        world.validate()?;
        let m = world.transition_matrix();
        let a = DMatrix::from_row_slice(2, 2, &[m[0][0], m[0][1], m[1][0], m[1][1]]);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![
            world.trans_cov_diag[0],
            world.trans_cov_diag[1],
        ]));
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let init_mean = DVector::zeros(2);
        let init_cov = DMatrix::from_diagonal(&DVector::from_vec(vec![
            1e6,
            world.init_vel_std * world.init_vel_std,
        ]));
        LdsModel::new(a, q, c, init_mean, init_cov)
    }

    /// Check shapes, symmetry, and finiteness.
    pub fn validate(&self) -> Result<()> {
        let k = self.a.nrows();
        if k == 0 {
            return Err(Error::InvalidArgument(
                "LdsModel: state dimension must be at least 1".into(),
            ));
        }
        if self.a.ncols() != k {
            return Err(Error::dim("LdsModel.a", format!("{k}x{k}"), shape_of(&self.a)));
        }
        if self.q.nrows() != k || self.q.ncols() != k {
            return Err(Error::dim("LdsModel.q", format!("{k}x{k}"), shape_of(&self.q)));
        }
        if self.c.nrows() != 1 || self.c.ncols() != k {
            return Err(Error::dim("LdsModel.c", format!("1x{k}"), shape_of(&self.c)));
        }
        if self.init_mean.len() != k {
            return Err(Error::dim("LdsModel.init_mean", k, self.init_mean.len()));
        }
        if self.init_cov.nrows() != k || self.init_cov.ncols() != k {
            return Err(Error::dim(
                "LdsModel.init_cov",
                format!("{k}x{k}"),
                shape_of(&self.init_cov),
            ));
        }
        for m in [&self.a, &self.q, &self.c, &self.init_cov] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericDomain(
                    "LdsModel: parameters must be finite".into(),
                ));
            }
        }
        if self.init_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(
                "LdsModel: init_mean must be finite".into(),
            ));
        }
        for (name, m) in [("q", &self.q), ("init_cov", &self.init_cov)] {
            let asym = (m - m.transpose()).abs().max();
            if asym > 1e-9 {
                return Err(Error::NumericDomain(format!(
                    "LdsModel.{name}: covariance must be symmetric (asymmetry {asym:.3e})"
                )));
            }
            let eig = min_eig_sym(m);
            if eig < psd_tolerance(m) {
                return Err(Error::NumericDomain(format!(
                    "LdsModel.{name}: covariance has negative eigenvalue {eig:.3e}"
                )));
            }
        }
        Ok(())
    }
}

/// Gaussian belief over the latent state at one time step.
#[derive(Debug, Clone)]
pub struct KalmanBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Everything produced by one forward filtering pass.
#[derive(Debug, Clone)]
pub struct FilterRun {
    /// Posterior belief at each step (after the update, when one happened).
    pub beliefs: Vec<KalmanBelief>,
    /// Prior belief at each step (before the update).
    pub predictions: Vec<KalmanBelief>,
    /// Kalman gain used at each step; zeros when the step had no observation.
    pub gains: Vec<DVector<f64>>,
    /// Innovation and its variance for observed steps, `None` when skipped.
    pub innovations: Vec<Option<(f64, f64)>>,
    /// Accumulated Gaussian log-likelihood of the observed steps.
    pub log_likelihood: f64,
}

/// Everything produced by one backward smoothing pass.
#[derive(Debug, Clone)]
pub struct SmootherRun {
    /// Smoothed state means, one per step.
    pub means: Vec<DVector<f64>>,
    /// Smoothed state covariances, one per step.
    pub covs: Vec<DMatrix<f64>>,
    /// Lag-one smoothed covariances: `lag_one[t] = Cov(x_{t+1}, x_t | all obs)`.
    pub lag_one: Vec<DMatrix<f64>>,
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

/// Run a Kalman filter over scalar observations with per-step variances.
///
/// `obs` holds `(z, r)` pairs; `r = f64::INFINITY` marks a predict-only step.
/// When `wrap = Some(length)`, innovations are wrapped to the principal
/// interval before the update (circular observation space).
pub fn kalman_filter(
    model: &LdsModel,
    obs: &[(f64, f64)],
    wrap: Option<f64>,
) -> Result<FilterRun> {
    model.validate()?;
    if let Some(length) = wrap {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kalman_filter: wrap length must be positive and finite, got {length}"
            )));
        }
    }
    let k = model.dim();
    let eye = DMatrix::<f64>::identity(k, k);
    let mut mean = model.init_mean.clone();
    let mut cov = model.init_cov.clone();
    let mut run = FilterRun {
        beliefs: Vec::with_capacity(obs.len()),
        predictions: Vec::with_capacity(obs.len()),
        gains: Vec::with_capacity(obs.len()),
        innovations: Vec::with_capacity(obs.len()),
        log_likelihood: 0.0,
    };
    for (t, &(z, r)) in obs.iter().enumerate() {
        if t > 0 {
            mean = &model.a * &mean;
            cov = &model.a * &cov * model.a.transpose() + &model.q;
            symmetrize(&mut cov);
        }
        run.predictions.push(KalmanBelief {
            mean: mean.clone(),
            cov: cov.clone(),
        });
        let pred_scale = cov.amax();
        if r.is_finite() {
            if !(r > 0.0) {
                return Err(Error::NumericDomain(format!(
                    "kalman_filter: observation variance must be positive, got {r} at step {t}"
                )));
            }
            if !z.is_finite() {
                return Err(Error::NumericDomain(format!(
                    "kalman_filter: observation must be finite at step {t}"
                )));
            }
            let s = (&model.c * &cov * model.c.transpose())[(0, 0)] + r;
            if !(s > 0.0) {
                return Err(Error::NumericDomain(format!(
                    "kalman_filter: innovation variance {s} not positive at step {t}"
                )));
            }
            let predicted = (&model.c * &mean)[0];
            let raw = z - predicted;
            let innovation = match wrap {
                Some(length) => wrap_signed(raw, length),
                None => raw,
            };
            let gain = (&cov * model.c.transpose()) / s;
            mean += &gain * innovation;
            let i_kc = &eye - &gain * &model.c;
            cov = &i_kc * &cov * i_kc.transpose() + &gain * r * gain.transpose();
            symmetrize(&mut cov);
            run.log_likelihood -=
                0.5 * ((2.0 * std::f64::consts::PI * s).ln() + innovation * innovation / s);
            run.gains.push(gain.column(0).clone_owned());
            run.innovations.push(Some((innovation, s)));
        } else {
            run.gains.push(DVector::zeros(k));
            run.innovations.push(None);
        }
        ensure_psd("kalman_filter", t, &mut cov, pred_scale)?;
        run.beliefs.push(KalmanBelief {
            mean: mean.clone(),
            cov: cov.clone(),
        });
    }
    Ok(run)
}

/// Map displacement-frame state means back to ring positions.
pub fn position_estimates(run: &FilterRun, length: f64) -> Vec<f64> {
    run.beliefs
        .iter()
        .map(|b| wrap_position(b.mean[0] + length / 2.0, length))
        .collect()
}

/// The zeroth-order baseline: report the pseudo-observation itself.
///
/// Takes ring-coordinate pseudo-observations; steps with infinite variance
/// fall back to the ring midpoint (the flat-prior mean).
pub fn kf0_positions(obs: &[(f64, f64)], length: f64) -> Vec<f64> {
    obs.iter()
        .map(|&(z, r)| {
            if r.is_finite() {
                wrap_position(z, length)
            } else {
                length / 2.0
            }
        })
        .collect()
}

/// Convenience: decode counts, filter in displacement coordinates with
/// circular innovations, and return ring-position estimates.
pub fn filter_positions_from_counts(
    model: &LdsModel,
    codec: &PpcCodec,
    counts: &ArrayView2<f64>,
) -> Result<Vec<f64>> {
    let obs = displacement_pseudo_obs(codec, counts)?;
    let run = kalman_filter(model, &obs, Some(codec.length))?;
    Ok(position_estimates(&run, codec.length))
}

// ---------------------------------------------------------------------------
// Smoothing
// ---------------------------------------------------------------------------

/// Run the filter and then a Rauch-Tung-Striebel backward pass.
///
/// Also produces the lag-one smoothed covariances needed by the EM M-step,
/// via the backward recursion initialized from the final-step Kalman gain.
pub fn kalman_smoother(
    model: &LdsModel,
    obs: &[(f64, f64)],
    wrap: Option<f64>,
) -> Result<(FilterRun, SmootherRun)> {
    let run = kalman_filter(model, obs, wrap)?;
    let t_len = obs.len();
    let k = model.dim();
    let mut smoother = SmootherRun {
        means: vec![DVector::zeros(k); t_len],
        covs: vec![DMatrix::zeros(k, k); t_len],
        lag_one: Vec::new(),
    };
    if t_len == 0 {
        return Ok((run, smoother));
    }
    smoother.means[t_len - 1] = run.beliefs[t_len - 1].mean.clone();
    smoother.covs[t_len - 1] = run.beliefs[t_len - 1].cov.clone();
    // Smoother gains G_t = P_{t|t} A' inv(P_{t+1|t}) for t = 0 .. T-2.
    let mut gains_s: Vec<DMatrix<f64>> = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len - 1 {
        let pred_cov = &run.predictions[t + 1].cov;
        let inv = pred_cov.clone().try_inverse().ok_or_else(|| {
            Error::NumericDomain(format!(
                "kalman_smoother: predicted covariance at step {} is singular",
                t + 1
            ))
        })?;
        gains_s.push(&run.beliefs[t].cov * model.a.transpose() * inv);
    }
    for t in (0..t_len - 1).rev() {
        let g = &gains_s[t];
        let mean_diff = &smoother.means[t + 1] - &run.predictions[t + 1].mean;
        smoother.means[t] = &run.beliefs[t].mean + g * mean_diff;
        let cov_diff = &smoother.covs[t + 1] - &run.predictions[t + 1].cov;
        let correction = g * cov_diff * g.transpose();
        let scale = run.beliefs[t].cov.amax().max(correction.amax());
        let mut cov = &run.beliefs[t].cov + correction;
        ensure_psd("kalman_smoother", t, &mut cov, scale)?;
        smoother.covs[t] = cov;
    }
    if t_len >= 2 {
        let eye = DMatrix::<f64>::identity(k, k);
        let mut lag = vec![DMatrix::zeros(k, k); t_len - 1];
        // Cov(x_{T-1}, x_{T-2}) = (I - K_{T-1} C) A P_{T-2|T-2}.
        let k_last = &run.gains[t_len - 1];
        let i_kc = &eye - k_last * &model.c;
        lag[t_len - 2] = &i_kc * &model.a * &run.beliefs[t_len - 2].cov;
        // Cov(x_j, x_{j-1}) = P_{j|j} G_{j-1}' + G_j (Cov(x_{j+1}, x_j) - A P_{j|j}) G_{j-1}'
        for j in (1..t_len - 1).rev() {
            let term = &lag[j] - &model.a * &run.beliefs[j].cov;
            lag[j - 1] = (&run.beliefs[j].cov + &gains_s[j] * term) * gains_s[j - 1].transpose();
        }
        smoother.lag_one = lag;
    }
    Ok((run, smoother))
}

// ---------------------------------------------------------------------------
// EM system identification
// ---------------------------------------------------------------------------

/// One EM restart: the fitted model and its log-likelihood trace.
#[derive(Debug, Clone)]
pub struct EmRestart {
    /// The last model whose likelihood could be evaluated.
    pub model: LdsModel,
    /// Log-likelihood at each iterate, ending with the returned model's
    /// likelihood. Length `n_iters + 1` for a restart that ran to
    /// completion; shorter when numerical divergence truncated it.
    pub ll_trace: Vec<f64>,
}

impl EmRestart {
    /// Log-likelihood of the returned model.
    pub fn final_ll(&self) -> f64 {
        *self.ll_trace.last().expect("at least one EM iteration ran")
    }
}

/// Result of an EM fit: the winning restart's model and likelihood trace.
#[derive(Debug, Clone)]
pub struct EmFit {
    /// Model after the final M-step of the best restart.
    pub model: LdsModel,
    /// Log-likelihood at each iterate of the best restart, including the
    /// final model's likelihood; length `n_iters + 1`.
    pub ll_trace: Vec<f64>,
    /// Index of the winning restart.
    pub restart: usize,
    /// Final log-likelihood of every restart, in restart order.
    pub final_lls: Vec<f64>,
}

/// Fit latent linear dynamics by EM, returning every restart.
///
/// Learns `A`, `Q`, and the initial-state statistics; the read-out row is
/// held fixed at `[1, 0, ...]` and observation variances come from the data.
/// Each restart starts from `A = I + noise`, `Q = 1e-4 I`, a zero initial
/// mean, and a near-flat initial covariance.
///
/// Fitting always treats the observations as an ordinary (unwrapped) linear
/// stream: the guarantee that the log-likelihood never decreases holds only
/// when the smoother computes the exact posterior for the model family, so
/// no circular-innovation shortcut is taken here. Ring geometry belongs to
/// *filtering* with the fitted model, where [`kalman_filter`] accepts a wrap
/// length.
pub fn em_fit_restarts(
    order: usize,
    sequences: &[Vec<(f64, f64)>],
    n_iters: usize,
    n_restarts: usize,
    seed: u64,
) -> Result<Vec<EmRestart>> {
    if !(order == 1 || order == 2) {
        return Err(Error::InvalidArgument(format!(
            "em_fit: order must be 1 or 2, got {order}"
        )));
    }
    if n_iters == 0 || n_restarts == 0 {
        return Err(Error::InvalidArgument(
            "em_fit: n_iters and n_restarts must be positive".into(),
        ));
    }
    if sequences.is_empty() {
        return Err(Error::InvalidArgument(
            "em_fit: need at least one observation sequence".into(),
        ));
    }
    for (j, seq) in sequences.iter().enumerate() {
        if seq.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "em_fit: sequence {j} has fewer than 2 steps"
            )));
        }
    }
    let mut restarts = Vec::with_capacity(n_restarts);
    for restart in 0..n_restarts {
        let mut model = em_initial_model(order, seed, restart as u64)?;
        let mut trace = Vec::with_capacity(n_iters + 1);
        // A restart with explosive fitted dynamics can overflow the
        // filter/smoother after some iterations. The first iteration must
        // succeed (its failures indicate bad inputs, not a bad restart);
        // afterwards a numerical failure truncates the restart at its last
        // model with an evaluable likelihood instead of sinking the whole
        // fit. The returned model is always the one whose log-likelihood is
        // the last trace entry.
        let mut evaluated = model.clone();
        for iter in 0..n_iters {
            let (ll, stats) = match em_e_step(&model, sequences) {
                Ok(out) => out,
                Err(err) if iter > 0 => {
                    log_em_truncation(restart, iter, &err);
                    model = evaluated.clone();
                    break;
                }
                Err(err) => return Err(err),
            };
            trace.push(ll);
            evaluated = model.clone();
            match em_m_step(&model, &stats) {
                Ok(next) => model = next,
                Err(err) => {
                    log_em_truncation(restart, iter, &err);
                    break;
                }
            }
        }
        if trace.len() == n_iters {
            match em_e_step(&model, sequences) {
                Ok((final_ll, _)) => trace.push(final_ll),
                Err(err) => {
                    log_em_truncation(restart, n_iters, &err);
                    model = evaluated;
                }
            }
        }
        restarts.push(EmRestart {
            model,
            ll_trace: trace,
        });
    }
    Ok(restarts)
}

/// Report a truncated restart on stderr; the run itself stays usable.
fn log_em_truncation(restart: usize, iter: usize, err: &Error) {
    eprintln!("em_fit: restart {restart} truncated at iteration {iter}: {err}");
}

/// Fit latent linear dynamics by EM and keep the best restart.
///
/// The restart with the highest final log-likelihood wins, ties resolved
/// toward the lower index.
pub fn em_fit(
    order: usize,
    sequences: &[Vec<(f64, f64)>],
    n_iters: usize,
    n_restarts: usize,
    seed: u64,
) -> Result<EmFit> {
    let restarts = em_fit_restarts(order, sequences, n_iters, n_restarts, seed)?;
    let final_lls: Vec<f64> = restarts.iter().map(|r| r.final_ll()).collect();
    let mut best = 0usize;
    for (j, &ll) in final_lls.iter().enumerate() {
        if ll > final_lls[best] {
            best = j;
        }
    }
    let winner = restarts.into_iter().nth(best).unwrap();
    Ok(EmFit {
        model: winner.model,
        ll_trace: winner.ll_trace,
        restart: best,
        final_lls,
    })
}

fn em_initial_model(order: usize, seed: u64, restart: u64) -> Result<LdsModel> {
    let mut rng = stream(seed, &[TAG_EM_RESTART, restart]);
    let noise = Normal::new(0.0, 0.02).map_err(|e| Error::NumericDomain(e.to_string()))?;
    let mut a = DMatrix::<f64>::identity(order, order);
    for v in a.iter_mut() {
        *v += noise.sample(&mut rng);
    }
    let q = DMatrix::<f64>::identity(order, order) * 1e-4;
    let mut c = DMatrix::<f64>::zeros(1, order);
    c[(0, 0)] = 1.0;
    let init_mean = DVector::<f64>::zeros(order);
    let init_cov = DMatrix::<f64>::identity(order, order) * 1e6;
    LdsModel::new(a, q, c, init_mean, init_cov)
}

/// Sufficient statistics accumulated by one E-step.
struct EmStats {
    /// Sum over transitions of `E[x_t x_t'],   t = 1 .. T-1`.
    s11: DMatrix<f64>,
    /// Sum over transitions of `E[x_t x_{t-1}'], t = 1 .. T-1`.
    s10: DMatrix<f64>,
    /// Sum over transitions of `E[x_{t-1} x_{t-1}'], t = 1 .. T-1`.
    s00: DMatrix<f64>,
    /// Number of transitions summed.
    n_trans: f64,
    /// Smoothed initial means, one per sequence.
    init_means: Vec<DVector<f64>>,
    /// Smoothed initial covariances, one per sequence.
    init_covs: Vec<DMatrix<f64>>,
}

fn em_e_step(
    model: &LdsModel,
    sequences: &[Vec<(f64, f64)>],
) -> Result<(f64, EmStats)> {
    let k = model.dim();
    let mut stats = EmStats {
        s11: DMatrix::zeros(k, k),
        s10: DMatrix::zeros(k, k),
        s00: DMatrix::zeros(k, k),
        n_trans: 0.0,
        init_means: Vec::with_capacity(sequences.len()),
        init_covs: Vec::with_capacity(sequences.len()),
    };
    let mut ll = 0.0;
    for seq in sequences {
        let (run, sm) = kalman_smoother(model, seq, None)?;
        ll += run.log_likelihood;
        let t_len = seq.len();
        for t in 1..t_len {
            stats.s11 += &sm.covs[t] + &sm.means[t] * sm.means[t].transpose();
            stats.s10 += &sm.lag_one[t - 1] + &sm.means[t] * sm.means[t - 1].transpose();
            stats.s00 += &sm.covs[t - 1] + &sm.means[t - 1] * sm.means[t - 1].transpose();
        }
        stats.n_trans += (t_len - 1) as f64;
        stats.init_means.push(sm.means[0].clone());
        stats.init_covs.push(sm.covs[0].clone());
    }
    Ok((ll, stats))
}

fn em_m_step(model: &LdsModel, stats: &EmStats) -> Result<LdsModel> {
    let k = model.dim();
    let s00_inv = stats.s00.clone().try_inverse().ok_or_else(|| {
        Error::NumericDomain("em_fit: transition statistic matrix is singular".into())
    })?;
    let a = &stats.s10 * s00_inv;
    let mut q = (&stats.s11 - &a * stats.s10.transpose() - &stats.s10 * a.transpose()
        + &a * &stats.s00 * a.transpose())
        / stats.n_trans;
    symmetrize(&mut q);
    floor_eigenvalues(&mut q, EM_COV_JITTER);
    let n_seq = stats.init_means.len() as f64;
    let mut init_mean = DVector::<f64>::zeros(k);
    for m in &stats.init_means {
        init_mean += m;
    }
    init_mean /= n_seq;
    let mut init_cov = DMatrix::<f64>::zeros(k, k);
    for (m, p) in stats.init_means.iter().zip(&stats.init_covs) {
        let d = m - &init_mean;
        init_cov += p + &d * d.transpose();
    }
    init_cov /= n_seq;
    symmetrize(&mut init_cov);
    floor_eigenvalues(&mut init_cov, EM_COV_JITTER);
    LdsModel::new(a, q, model.c.clone(), init_mean, init_cov)
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

fn shape_of(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m /= 2.0;
}

/// Smallest eigenvalue of a symmetric matrix (closed form up to 2x2).
fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        1 => m[(0, 0)],
        2 => {
            let tr = m[(0, 0)] + m[(1, 1)];
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
            (tr - disc) / 2.0
        }
        _ => m
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |acc, &v| acc.min(v)),
    }
}

/// Shift the spectrum up if needed so every eigenvalue is at least `floor`.
fn floor_eigenvalues(m: &mut DMatrix<f64>, floor: f64) {
    let eig = min_eig_sym(m);
    if eig < floor {
        let k = m.nrows();
        *m += DMatrix::<f64>::identity(k, k) * (floor - eig);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::wrap::circular_distance;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;
    use rand::Rng;

    fn codec() -> PpcCodec {
        PpcCodec::default()
    }

    #[test]
    fn pseudo_obs_one_hot_recovers_preferred_location() {
        let codec = codec();
        let centers = codec.centers();
        let mut counts = Array1::<f64>::zeros(codec.n_units);
        counts[3] = 7.0;
        let (z, r) = ppc_pseudo_obs(&codec, &counts.view()).unwrap();
        assert_abs_diff_eq!(z, centers[3], epsilon = 1e-12);
        let expected_r = codec.tuning_width * codec.tuning_width / 7.0;
        assert_abs_diff_eq!(r, expected_r, epsilon = 1e-15);
    }

    #[test]
    fn pseudo_obs_equal_adjacent_pair_gives_midpoint() {
        let codec = codec();
        let centers = codec.centers();
        let mut counts = Array1::<f64>::zeros(codec.n_units);
        counts[4] = 3.0;
        counts[5] = 3.0;
        let (z, r) = ppc_pseudo_obs(&codec, &counts.view()).unwrap();
        let midpoint = (centers[4] + centers[5]) / 2.0;
        assert_abs_diff_eq!(z, midpoint, epsilon = 1e-12);
        let expected_r = codec.tuning_width * codec.tuning_width / 6.0;
        assert_abs_diff_eq!(r, expected_r, epsilon = 1e-15);
    }

    #[test]
    fn pseudo_obs_zero_counts_is_uninformative() {
        let codec = codec();
        let counts = Array1::<f64>::zeros(codec.n_units);
        let (z, r) = ppc_pseudo_obs(&codec, &counts.view()).unwrap();
        assert_abs_diff_eq!(z, codec.length / 2.0, epsilon = 1e-15);
        assert!(r.is_infinite());
    }

    #[test]
    fn pseudo_obs_wraps_across_the_seam() {
        let codec = codec();
        let mut counts = Array1::<f64>::zeros(codec.n_units);
        counts[0] = 5.0;
        counts[codec.n_units - 1] = 5.0;
        let (z, _) = ppc_pseudo_obs(&codec, &counts.view()).unwrap();
        // Units 0 and 14 sit symmetrically around the seam, so the circular
        // center of mass is the seam itself, not the linear average 0.5.
        assert!(circular_distance(z, 0.0, codec.length) < 1e-12);
    }

    #[test]
    fn pseudo_obs_rejects_negative_counts() {
        let codec = codec();
        let mut counts = Array1::<f64>::zeros(codec.n_units);
        counts[2] = -1.0;
        assert!(ppc_pseudo_obs(&codec, &counts.view()).is_err());
    }

    #[test]
    fn flat_prior_fusion_tracks_the_observation() {
        let model = LdsModel::order1(1.0, 0.0, 0.0, 1e12).unwrap();
        let run = kalman_filter(&model, &[(1.3, 0.01)], None).unwrap();
        assert_abs_diff_eq!(run.beliefs[0].mean[0], 1.3, epsilon = 1e-8);
    }

    #[test]
    fn repeated_observations_shrink_variance_like_r_over_n() {
        let n = 50;
        let r = 0.04;
        let model = LdsModel::order1(1.0, 0.0, 0.0, 1e12).unwrap();
        let obs = vec![(1.3, r); n];
        let run = kalman_filter(&model, &obs, None).unwrap();
        let var = run.beliefs[n - 1].cov[(0, 0)];
        let expected = r / n as f64;
        assert!(
            (var - expected).abs() / expected < 1e-6,
            "variance {var} vs expected {expected}"
        );
        assert_abs_diff_eq!(run.beliefs[n - 1].mean[0], 1.3, epsilon = 1e-9);
    }

    #[test]
    fn filter_matches_hand_computed_scalar_recursion() {
        let a = 0.8;
        let q = 0.1;
        let model = LdsModel::order1(a, q, 0.0, 1.0).unwrap();
        let obs = [(0.5, 0.2), (-0.2, 0.3)];
        let run = kalman_filter(&model, &obs, None).unwrap();
        // Step 0: prior (0, 1); K = 1/(1+0.2); posterior mean/var by hand.
        let k0 = 1.0 / 1.2;
        let m0 = k0 * 0.5;
        let p0 = (1.0 - k0) * 1.0;
        assert_abs_diff_eq!(run.beliefs[0].mean[0], m0, epsilon = 1e-12);
        assert_abs_diff_eq!(run.beliefs[0].cov[(0, 0)], p0, epsilon = 1e-12);
        // Step 1: predict then update.
        let mp = a * m0;
        let pp = a * a * p0 + q;
        let k1 = pp / (pp + 0.3);
        let m1 = mp + k1 * (-0.2 - mp);
        let p1 = (1.0 - k1) * pp;
        assert_abs_diff_eq!(run.beliefs[1].mean[0], m1, epsilon = 1e-12);
        assert_abs_diff_eq!(run.beliefs[1].cov[(0, 0)], p1, epsilon = 1e-12);
        assert_abs_diff_eq!(run.predictions[1].mean[0], mp, epsilon = 1e-12);
        assert_abs_diff_eq!(run.predictions[1].cov[(0, 0)], pp, epsilon = 1e-12);
    }

    #[test]
    fn infinite_variance_steps_are_predict_only() {
        let model = LdsModel::order1(0.9, 0.05, 0.0, 1.0).unwrap();
        let obs = [(0.4, 0.1), (0.0, f64::INFINITY), (0.3, 0.1)];
        let run = kalman_filter(&model, &obs, None).unwrap();
        assert!(run.innovations[1].is_none());
        assert_abs_diff_eq!(
            run.beliefs[1].mean[0],
            0.9 * run.beliefs[0].mean[0],
            epsilon = 1e-12
        );
        let expected_var = 0.81 * run.beliefs[0].cov[(0, 0)] + 0.05;
        assert_abs_diff_eq!(run.beliefs[1].cov[(0, 0)], expected_var, epsilon = 1e-12);
        // The likelihood only counts the two observed steps.
        let run_obs_only = kalman_filter(&model, &obs[..1], None).unwrap();
        assert!(run.log_likelihood < run_obs_only.log_likelihood);
    }

    #[test]
    fn circular_innovation_takes_the_short_way_around() {
        let length = 1.0;
        // Prior mean near one seam edge, observation just across the seam.
        let model = LdsModel::order1(1.0, 1e-6, 0.45, 0.01).unwrap();
        let obs = [(-0.48, 0.01)];
        let wrapped = kalman_filter(&model, &obs, Some(length)).unwrap();
        let unwrapped = kalman_filter(&model, &obs, None).unwrap();
        // Raw innovation is -0.93; wrapped innovation is +0.07.
        let (wi, _) = wrapped.innovations[0].unwrap();
        assert_abs_diff_eq!(wi, 0.07, epsilon = 1e-12);
        assert!(wrapped.beliefs[0].mean[0] > 0.45);
        assert!(unwrapped.beliefs[0].mean[0] < 0.0);
    }

    #[test]
    fn smoother_with_one_step_equals_filter() {
        let model = LdsModel::order1(0.9, 0.05, 0.1, 0.5).unwrap();
        let obs = [(0.2, 0.1)];
        let (run, sm) = kalman_smoother(&model, &obs, None).unwrap();
        assert_abs_diff_eq!(sm.means[0][0], run.beliefs[0].mean[0], epsilon = 1e-15);
        assert_abs_diff_eq!(
            sm.covs[0][(0, 0)],
            run.beliefs[0].cov[(0, 0)],
            epsilon = 1e-15
        );
        assert!(sm.lag_one.is_empty());
    }

    #[test]
    fn smoothing_never_increases_marginal_variance() {
        let model = LdsModel::order1(0.9, 0.02, 0.0, 1.0).unwrap();
        let mut rng = stream(7, &[99]);
        let obs: Vec<(f64, f64)> = (0..60)
            .map(|_| (rng.gen_range(-1.0..1.0), 0.1))
            .collect();
        let (run, sm) = kalman_smoother(&model, &obs, None).unwrap();
        for t in 0..obs.len() {
            let filtered = run.beliefs[t].cov[(0, 0)];
            let smoothed = sm.covs[t][(0, 0)];
            assert!(
                smoothed <= filtered + 1e-12,
                "step {t}: smoothed {smoothed} > filtered {filtered}"
            );
        }
    }

    /// Exact oracle: for a tiny scalar model, build the joint Gaussian over
    /// (x0, x1, x2, z0, z1, z2) explicitly and condition on the observations.
    /// This pins the smoothed means, variances, and both lag-one covariances.
    #[test]
    fn smoother_matches_joint_gaussian_conditioning() {
        let a = 0.7;
        let q = 0.2;
        let mu0 = 0.2;
        let p0 = 0.9;
        let rs = [0.3, 0.5, 0.4];
        let zs = [0.5, -0.1, 0.35];
        let model = LdsModel::order1(a, q, mu0, p0).unwrap();
        let obs: Vec<(f64, f64)> = zs.iter().zip(&rs).map(|(&z, &r)| (z, r)).collect();
        let (_, sm) = kalman_smoother(&model, &obs, None).unwrap();

        // Joint covariance of states: Var(x0)=p0, x_{t+1}=a x_t + w.
        let mut sxx = DMatrix::<f64>::zeros(3, 3);
        sxx[(0, 0)] = p0;
        sxx[(1, 1)] = a * a * p0 + q;
        sxx[(2, 2)] = a * a * sxx[(1, 1)] + q;
        sxx[(0, 1)] = a * p0;
        sxx[(1, 0)] = sxx[(0, 1)];
        sxx[(0, 2)] = a * a * p0;
        sxx[(2, 0)] = sxx[(0, 2)];
        sxx[(1, 2)] = a * sxx[(1, 1)];
        sxx[(2, 1)] = sxx[(1, 2)];
        // Observations z_t = x_t + v_t.
        let szz = &sxx + DMatrix::from_diagonal(&DVector::from_row_slice(&rs));
        let sxz = sxx.clone();
        let mean_x = DVector::from_row_slice(&[mu0, a * mu0, a * a * mu0]);
        let z_vec = DVector::from_row_slice(&zs);
        let szz_inv = szz.try_inverse().unwrap();
        let post_mean = &mean_x + &sxz * &szz_inv * (&z_vec - &mean_x);
        let post_cov = &sxx - &sxz * &szz_inv * sxz.transpose();

        for t in 0..3 {
            assert_abs_diff_eq!(sm.means[t][0], post_mean[t], epsilon = 1e-10);
            assert_abs_diff_eq!(sm.covs[t][(0, 0)], post_cov[(t, t)], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(sm.lag_one[0][(0, 0)], post_cov[(1, 0)], epsilon = 1e-10);
        assert_abs_diff_eq!(sm.lag_one[1][(0, 0)], post_cov[(2, 1)], epsilon = 1e-10);
    }

    fn simulate_scalar_sequence(
        a: f64,
        q: f64,
        r: f64,
        t_len: usize,
        seed: u64,
    ) -> Vec<(f64, f64)> {
        let mut rng = stream(seed, &[401]);
        let step_noise = Normal::new(0.0, q.sqrt()).unwrap();
        let obs_noise = Normal::new(0.0, r.sqrt()).unwrap();
        let mut x: f64 = rng.gen_range(-0.5..0.5);
        let mut out = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if t > 0 {
                x = a * x + step_noise.sample(&mut rng);
            }
            // A few uninformative gaps exercise the predict-only path.
            if t % 97 == 13 {
                out.push((0.0, f64::INFINITY));
            } else {
                out.push((x + obs_noise.sample(&mut rng), r));
            }
        }
        out
    }

    #[test]
    fn em_recovers_scalar_dynamics_and_increases_likelihood() {
        // Keep the state variance well above the observation noise so the
        // fit identifies the dynamics in a modest number of iterations.
        let a_true = 0.85;
        let q_true = 0.04;
        let r = 0.01;
        let sequences: Vec<Vec<(f64, f64)>> = (0..5)
            .map(|j| simulate_scalar_sequence(a_true, q_true, r, 600, 1000 + j))
            .collect();
        let fit = em_fit(1, &sequences, 50, 3, 42).unwrap();
        for w in fit.ll_trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-8,
                "log-likelihood decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
        let a_hat = fit.model.a[(0, 0)];
        assert!(
            (a_hat - a_true).abs() < 0.05,
            "recovered transition {a_hat} too far from {a_true}"
        );
        let q_hat = fit.model.q[(0, 0)];
        assert!(
            q_hat > q_true / 2.0 && q_hat < q_true * 2.0,
            "recovered noise {q_hat} vs true {q_true}"
        );
        assert_eq!(fit.final_lls.len(), 3);
        assert_eq!(fit.ll_trace.len(), 51);
    }

    #[test]
    fn em_is_deterministic_in_the_seed() {
        let sequences: Vec<Vec<(f64, f64)>> =
            (0..2).map(|j| simulate_scalar_sequence(0.8, 0.02, 0.1, 200, 7 + j)).collect();
        let fit_a = em_fit(1, &sequences, 5, 2, 99).unwrap();
        let fit_b = em_fit(1, &sequences, 5, 2, 99).unwrap();
        assert_eq!(fit_a.restart, fit_b.restart);
        assert_eq!(
            fit_a.model.a[(0, 0)].to_bits(),
            fit_b.model.a[(0, 0)].to_bits()
        );
        assert_eq!(fit_a.ll_trace.len(), fit_b.ll_trace.len());
        for (x, y) in fit_a.ll_trace.iter().zip(&fit_b.ll_trace) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn standardized_residuals_have_unit_variance() {
        let codec = codec();
        let mut rng = stream(11, &[402]);
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for _ in 0..4000 {
            let position = rng.gen_range(0.0..codec.length);
            let (counts, _gain) = codec.encode(position, &mut rng).unwrap();
            let (z, r) = ppc_pseudo_obs(&codec, &counts.view()).unwrap();
            if !r.is_finite() {
                continue;
            }
            let resid = wrap_signed(z - position, codec.length) / r.sqrt();
            sum_sq += resid * resid;
            n += 1;
        }
        let var = sum_sq / n as f64;
        assert!(
            (0.85..=1.15).contains(&var),
            "standardized residual variance {var} outside [0.85, 1.15] over {n} draws"
        );
    }

    #[test]
    fn kf0_reports_observations_and_falls_back_to_midpoint() {
        let obs = [(0.3, 0.01), (0.0, f64::INFINITY), (0.92, 0.02)];
        let est = kf0_positions(&obs, 1.0);
        assert_abs_diff_eq!(est[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(est[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(est[2], 0.92, epsilon = 1e-15);
    }

    #[test]
    fn ground_truth_model_matches_world_dynamics() {
        let world = LdsWorld::default();
        let model = LdsModel::from_world(&world).unwrap();
        assert_eq!(model.dim(), 2);
        let m = world.transition_matrix();
        assert_abs_diff_eq!(model.a[(0, 1)], m[0][1], epsilon = 1e-15);
        assert_abs_diff_eq!(model.q[(0, 0)], world.trans_cov_diag[0], epsilon = 1e-20);
        assert_abs_diff_eq!(model.c[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(model.c[(0, 1)], 0.0, epsilon = 1e-15);
        model.validate().unwrap();
    }

    #[test]
    fn position_estimates_map_back_to_the_ring() {
        let world = LdsWorld::default();
        let model = LdsModel::from_world(&world).unwrap();
        // A single sharp observation near the seam in displacement space.
        let obs = [(0.49, 1e-6)];
        let run = kalman_filter(&model, &obs, Some(world.length)).unwrap();
        let est = position_estimates(&run, world.length);
        assert!(est[0] >= 0.0 && est[0] < world.length);
        assert!(circular_distance(est[0], 0.99, world.length) < 1e-3);
    }
}
