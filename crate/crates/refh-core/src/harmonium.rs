//! Two-layer exponential-family harmonium: parameters, layer passes, Gibbs
//! chains, and contrastive-divergence gradients.
//!
//! The visible layer is split into an *observation* block (e.g. Poisson
//! spike counts or binary pixels) and a *recurrent* block that, in temporal
//! use, carries the previous step's hidden means. The hidden layer is
//! Bernoulli throughout. Conditionals factor across layers:
//!
//! - upward:   eta_hid  = W s + U r + b_hid, means through the logistic;
//! - downward: eta_obs  = W' h + b_obs and eta_rcrnt = U' h + b_rcrnt,
//!   means through each block's family nonlinearity.
//!
//! Batched operations lay frames out as matrix *columns* so the heavy
//! lifting is plain GEMM.

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exp_family::{LayerSpec, UnitFamily};
use crate::rng::{content_hash, fold, stream_from_key};

/// Default standard deviation for weight initialization.
pub const DEFAULT_INIT_STD: f64 = 0.01;

/// Full parameter set of a harmonium.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmoniumParams {
    /// Observation-to-hidden weights, shape (hidden, obs).
    pub w: Array2<f64>,
    /// Recurrent-to-hidden weights, shape (hidden, rcrnt).
    pub u: Array2<f64>,
    /// Hidden biases, length hidden.
    pub b_hid: Array1<f64>,
    /// Observation biases, length obs.
    pub b_obs: Array1<f64>,
    /// Recurrent biases, length rcrnt.
    pub b_rcrnt: Array1<f64>,
    pub obs_spec: LayerSpec,
    pub rcrnt_spec: LayerSpec,
    pub hid_spec: LayerSpec,
}

impl HarmoniumParams {
    /// Initialize with N(0, init_std^2) weights and zero biases.
    ///
    /// Weights are drawn row-major, W before U, so initialization is a pure
    /// function of the generator state.
    pub fn init<R: Rng + ?Sized>(
        obs_spec: LayerSpec,
        rcrnt_spec: LayerSpec,
        hid_spec: LayerSpec,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(init_std.is_finite() && init_std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "init_std must be a non-negative finite number, got {init_std}"
            )));
        }
        let (n_obs, n_rcrnt, n_hid) = (obs_spec.len(), rcrnt_spec.len(), hid_spec.len());
        let normal = Normal::new(0.0, init_std.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if init_std == 0.0 { 0.0 } else { normal.sample(rng) })
                .collect()
        };
        let w = Array2::from_shape_vec((n_hid, n_obs), draw(n_hid * n_obs)).expect("w shape");
        let u = Array2::from_shape_vec((n_hid, n_rcrnt), draw(n_hid * n_rcrnt)).expect("u shape");
        let params = HarmoniumParams {
            w,
            u,
            b_hid: Array1::zeros(n_hid),
            b_obs: Array1::zeros(n_obs),
            b_rcrnt: Array1::zeros(n_rcrnt),
            obs_spec,
            rcrnt_spec,
            hid_spec,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn n_obs(&self) -> usize {
        self.obs_spec.len()
    }

    pub fn n_rcrnt(&self) -> usize {
        self.rcrnt_spec.len()
    }

    pub fn n_hid(&self) -> usize {
        self.hid_spec.len()
    }

    /// Check internal consistency: shapes match the specs, all entries are
    /// finite, hidden and observation layers are non-empty, and the hidden
    /// layer is uniformly Bernoulli (the temporal recursions rely on the
    /// logistic hidden nonlinearity).
    pub fn validate(&self) -> Result<()> {
        let (n_obs, n_rcrnt, n_hid) = (self.n_obs(), self.n_rcrnt(), self.n_hid());
        if n_hid == 0 {
            return Err(Error::InvalidArgument("hidden layer is empty".into()));
        }
        if n_obs == 0 {
            return Err(Error::InvalidArgument("observation layer is empty".into()));
        }
        if !self.hid_spec.is_uniform(UnitFamily::Bernoulli) {
            return Err(Error::InvalidArgument(
                "hidden layer must be uniformly Bernoulli".into(),
            ));
        }
        if self.w.dim() != (n_hid, n_obs) {
            return Err(Error::dim("w shape", format!("({n_hid}, {n_obs})"), format!("{:?}", self.w.dim())));
        }
        if self.u.dim() != (n_hid, n_rcrnt) {
            return Err(Error::dim("u shape", format!("({n_hid}, {n_rcrnt})"), format!("{:?}", self.u.dim())));
        }
        if self.b_hid.len() != n_hid {
            return Err(Error::dim("b_hid length", n_hid, self.b_hid.len()));
        }
        if self.b_obs.len() != n_obs {
            return Err(Error::dim("b_obs length", n_obs, self.b_obs.len()));
        }
        if self.b_rcrnt.len() != n_rcrnt {
            return Err(Error::dim("b_rcrnt length", n_rcrnt, self.b_rcrnt.len()));
        }
        let all_finite = self.w.iter().all(|v| v.is_finite())
            && self.u.iter().all(|v| v.is_finite())
            && self.b_hid.iter().all(|v| v.is_finite())
            && self.b_obs.iter().all(|v| v.is_finite())
            && self.b_rcrnt.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NumericDomain("non-finite parameter entry".into()));
        }
        Ok(())
    }

    /// Apply a scaled in-place update `self += scale * delta` blockwise.
    pub fn add_scaled(&mut self, delta: &GradientSet, scale: f64) {
        self.w.scaled_add(scale, &delta.dw);
        self.u.scaled_add(scale, &delta.du);
        self.b_hid.scaled_add(scale, &delta.db_hid);
        self.b_obs.scaled_add(scale, &delta.db_obs);
        self.b_rcrnt.scaled_add(scale, &delta.db_rcrnt);
    }
}

/// One visible configuration: previous-step recurrent values plus the
/// current observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFrame {
    pub r_prev: Array1<f64>,
    pub s: Array1<f64>,
}

impl AugmentedFrame {
    pub fn new(r_prev: Array1<f64>, s: Array1<f64>) -> Self {
        AugmentedFrame { r_prev, s }
    }

    /// Validate against a model's layer specs: the recurrent block must lie
    /// in its mean domain (e.g. [0,1] for Bernoulli means) and the
    /// observation block in its family domain (non-negative for Poisson).
    pub fn validate(&self, params: &HarmoniumParams) -> Result<()> {
        params.rcrnt_spec.validate_means(&self.r_prev.view())?;
        params.obs_spec.validate_means(&self.s.view())?;
        Ok(())
    }
}

/// Which statistics the negative phase uses for the reconstructed visibles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatSource {
    /// Use the final down-pass means (default; lower-variance statistics).
    Means,
    /// Use the final down-pass samples.
    Samples,
}

/// Contrastive-divergence flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CdMode {
    /// Recurrent block is resampled in the negative phase (treated as data).
    Refh,
    /// Recurrent block is clamped to its positive-phase value (a dynamic
    /// bias); no recurrent-bias gradient is produced.
    Trbm,
}

/// Tunables for the CD gradient estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CdOptions {
    /// Source of the negative-phase visible statistics.
    pub negative_visible_stats: StatSource,
}

impl Default for CdOptions {
    fn default() -> Self {
        CdOptions { negative_visible_stats: StatSource::Means }
    }
}

/// Per-parameter-block gradient (or update) container.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub dw: Array2<f64>,
    pub du: Array2<f64>,
    pub db_hid: Array1<f64>,
    pub db_obs: Array1<f64>,
    pub db_rcrnt: Array1<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &HarmoniumParams) -> Self {
        GradientSet {
            dw: Array2::zeros(params.w.dim()),
            du: Array2::zeros(params.u.dim()),
            db_hid: Array1::zeros(params.b_hid.len()),
            db_obs: Array1::zeros(params.b_obs.len()),
            db_rcrnt: Array1::zeros(params.b_rcrnt.len()),
        }
    }

    /// `self += scale * other` blockwise.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        self.dw.scaled_add(scale, &other.dw);
        self.du.scaled_add(scale, &other.du);
        self.db_hid.scaled_add(scale, &other.db_hid);
        self.db_obs.scaled_add(scale, &other.db_obs);
        self.db_rcrnt.scaled_add(scale, &other.db_rcrnt);
    }

    pub fn scale(&mut self, factor: f64) {
        self.dw *= factor;
        self.du *= factor;
        self.db_hid *= factor;
        self.db_obs *= factor;
        self.db_rcrnt *= factor;
    }

    /// Largest absolute entry across all blocks.
    pub fn max_abs(&self) -> f64 {
        let fold_max = |acc: f64, it: &f64| acc.max(it.abs());
        let mut m = self.dw.iter().fold(0.0, fold_max);
        m = self.du.iter().fold(m, fold_max);
        m = self.db_hid.iter().fold(m, fold_max);
        m = self.db_obs.iter().fold(m, fold_max);
        self.db_rcrnt.iter().fold(m, fold_max)
    }

    /// Euclidean norm over all blocks jointly.
    pub fn l2_norm(&self) -> f64 {
        let sq = |acc: f64, it: &f64| acc + it * it;
        let mut s = self.dw.iter().fold(0.0, sq);
        s = self.du.iter().fold(s, sq);
        s = self.db_hid.iter().fold(s, sq);
        s = self.db_obs.iter().fold(s, sq);
        s = self.db_rcrnt.iter().fold(s, sq);
        s.sqrt()
    }
}

// ---------------------------------------------------------------------------
// Layer passes (single frame)
// ---------------------------------------------------------------------------

/// Hidden means given a visible configuration: logistic(W s + U r + b_hid).
pub fn up_pass(params: &HarmoniumParams, frame: &AugmentedFrame) -> Result<Array1<f64>> {
    if frame.s.len() != params.n_obs() {
        return Err(Error::dim("up_pass obs", params.n_obs(), frame.s.len()));
    }
    if frame.r_prev.len() != params.n_rcrnt() {
        return Err(Error::dim("up_pass rcrnt", params.n_rcrnt(), frame.r_prev.len()));
    }
    let mut eta = params.w.dot(&frame.s);
    eta += &params.u.dot(&frame.r_prev);
    eta += &params.b_hid;
    params.hid_spec.means_from_natural(&eta.view())
}

/// Observation-block means given hidden values: family(W' h + b_obs).
pub fn down_pass_obs(params: &HarmoniumParams, h: &ArrayView1<f64>) -> Result<Array1<f64>> {
    if h.len() != params.n_hid() {
        return Err(Error::dim("down_pass_obs hidden", params.n_hid(), h.len()));
    }
    let mut eta = params.w.t().dot(h);
    eta += &params.b_obs;
    params.obs_spec.means_from_natural(&eta.view())
}

/// Recurrent-block means given hidden values: family(U' h + b_rcrnt).
pub fn down_pass_rcrnt(params: &HarmoniumParams, h: &ArrayView1<f64>) -> Result<Array1<f64>> {
    if h.len() != params.n_hid() {
        return Err(Error::dim("down_pass_rcrnt hidden", params.n_hid(), h.len()));
    }
    let mut eta = params.u.t().dot(h);
    eta += &params.b_rcrnt;
    params.rcrnt_spec.means_from_natural(&eta.view())
}

/// Log of the unnormalized joint probability of a full configuration
/// (hidden, recurrent, observation), including the Poisson base measure.
///
/// Flipping a single Bernoulli unit from 0 to 1 changes this value by
/// exactly that unit's natural parameter from the corresponding pass.
pub fn log_unnormalized_prob(
    params: &HarmoniumParams,
    h: &ArrayView1<f64>,
    r: &ArrayView1<f64>,
    s: &ArrayView1<f64>,
) -> Result<f64> {
    if h.len() != params.n_hid() || r.len() != params.n_rcrnt() || s.len() != params.n_obs() {
        return Err(Error::dim(
            "log_unnormalized_prob",
            format!("h={}, r={}, s={}", params.n_hid(), params.n_rcrnt(), params.n_obs()),
            format!("h={}, r={}, s={}", h.len(), r.len(), s.len()),
        ));
    }
    let mut eta_h = params.w.dot(s);
    eta_h += &params.u.dot(r);
    eta_h += &params.b_hid;
    let mut val = h.dot(&eta_h) + params.b_obs.dot(s) + params.b_rcrnt.dot(r);
    // Base measure: 1/s! for Poisson observation units.
    for (fam, &x) in params.obs_spec.unit_families().zip(s.iter()) {
        if fam == UnitFamily::Poisson {
            let mut k = 2.0;
            while k <= x {
                val -= k.ln();
                k += 1.0;
            }
        }
    }
    Ok(val)
}

// ---------------------------------------------------------------------------
// Batched natural-parameter helpers (frames as matrix columns)
// ---------------------------------------------------------------------------

/// eta_hid for a batch: W S + U R + b_hid (columns are frames).
fn up_natural_batch(params: &HarmoniumParams, s: &ArrayView2<f64>, r: &ArrayView2<f64>) -> Array2<f64> {
    let batch = s.ncols();
    let mut eta = Array2::zeros((params.n_hid(), batch));
    general_mat_mul(1.0, &params.w, s, 0.0, &mut eta);
    if params.n_rcrnt() > 0 {
        general_mat_mul(1.0, &params.u, r, 1.0, &mut eta);
    }
    eta += &params.b_hid.view().insert_axis(Axis(1));
    eta
}

/// Apply logistic elementwise (hidden layers are uniformly Bernoulli).
fn logistic_inplace(mat: &mut Array2<f64>) {
    mat.mapv_inplace(|e| 1.0 / (1.0 + (-e).exp()));
}

/// Apply each row's family nonlinearity, clamping Poisson rows into the
/// sampler domain so downstream statistics stay finite.
fn visible_means_inplace(spec: &LayerSpec, mat: &mut Array2<f64>) {
    for (mut row, fam) in mat.outer_iter_mut().zip(spec.unit_families()) {
        match fam {
            UnitFamily::Bernoulli => row.mapv_inplace(|e| 1.0 / (1.0 + (-e).exp())),
            UnitFamily::Poisson => row.mapv_inplace(|e| {
                fam.clamp_mean(e.exp())
            }),
        }
    }
}

/// Batched hidden means: logistic(W S + U R + b).
pub fn up_means_batch(params: &HarmoniumParams, s: &ArrayView2<f64>, r: &ArrayView2<f64>) -> Array2<f64> {
    let mut eta = up_natural_batch(params, s, r);
    logistic_inplace(&mut eta);
    eta
}

/// Batched observation means: family(W' H + b_obs), Poisson rows clamped.
pub fn down_obs_means_batch(params: &HarmoniumParams, h: &ArrayView2<f64>) -> Array2<f64> {
    let mut eta = Array2::zeros((params.n_obs(), h.ncols()));
    general_mat_mul(1.0, &params.w.t(), h, 0.0, &mut eta);
    eta += &params.b_obs.view().insert_axis(Axis(1));
    visible_means_inplace(&params.obs_spec, &mut eta);
    eta
}

/// Batched recurrent means: family(U' H + b_rcrnt).
pub fn down_rcrnt_means_batch(params: &HarmoniumParams, h: &ArrayView2<f64>) -> Array2<f64> {
    let mut eta = Array2::zeros((params.n_rcrnt(), h.ncols()));
    if params.n_rcrnt() > 0 {
        general_mat_mul(1.0, &params.u.t(), h, 0.0, &mut eta);
        eta += &params.b_rcrnt.view().insert_axis(Axis(1));
        visible_means_inplace(&params.rcrnt_spec, &mut eta);
    }
    eta
}

/// Sample every entry of `means` column-by-column, column `j` drawing from
/// `streams[j]`; rows are visited in unit order within a column.
fn sample_columns(
    spec: &LayerSpec,
    means: &ArrayView2<f64>,
    streams: &mut [ChaCha8Rng],
) -> Result<Array2<f64>> {
    let families: Vec<UnitFamily> = spec.unit_families().collect();
    let mut out = Array2::zeros(means.raw_dim());
    for j in 0..means.ncols() {
        let rng = &mut streams[j];
        for i in 0..means.nrows() {
            out[[i, j]] = families[i].sample(means[[i, j]], rng)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gibbs chain (single frame)
// ---------------------------------------------------------------------------

/// Run `n_steps` full Gibbs sweeps from `init`: each sweep samples the
/// hidden layer from the current visibles, then resamples the visibles from
/// the hidden sample (the recurrent block stays fixed when `clamp_rcrnt`).
///
/// Returns the final visible configuration together with the hidden means of
/// a final upward pass evaluated at that configuration. With `n_steps == 0`
/// the initial frame is returned unchanged (plus its up-pass means).
pub fn gibbs_chain<R: Rng + ?Sized>(
    params: &HarmoniumParams,
    init: &AugmentedFrame,
    n_steps: usize,
    clamp_rcrnt: bool,
    rng: &mut R,
) -> Result<(AugmentedFrame, Array1<f64>)> {
    init.validate(params)?;
    let mut frame = init.clone();
    for _ in 0..n_steps {
        let m = up_pass(params, &frame)?;
        let h = params.hid_spec.sample(&m.view(), rng)?;
        let s_mean = down_pass_obs(params, &h.view())?;
        frame.s = params.obs_spec.sample(&s_mean.view(), rng)?;
        if !clamp_rcrnt && params.n_rcrnt() > 0 {
            let r_mean = down_pass_rcrnt(params, &h.view())?;
            frame.r_prev = params.rcrnt_spec.sample(&r_mean.view(), rng)?;
        }
    }
    let final_means = up_pass(params, &frame)?;
    Ok((frame, final_means))
}

// ---------------------------------------------------------------------------
// Contrastive divergence
// ---------------------------------------------------------------------------

/// Raw sufficient statistics from one batched CD pass.
#[derive(Debug, Clone)]
pub struct CdStats {
    /// Positive-phase hidden means, shape (hidden, batch).
    pub m_pos: Array2<f64>,
    /// Negative-phase hidden means, shape (hidden, batch).
    pub m_neg: Array2<f64>,
    /// Negative-phase observation statistics, shape (obs, batch).
    pub s_neg: Array2<f64>,
    /// Negative-phase recurrent statistics, shape (rcrnt, batch).
    pub r_neg: Array2<f64>,
    /// Mean squared one-step reconstruction error of the observation block.
    pub recon_sq_err: f64,
    /// Per-frame chain keys, used to reduce in a batch-order-free order.
    pub chain_keys: Vec<u64>,
}

/// Derive the chain stream for one frame: independent of batch position,
/// dependent only on the call seed and the frame contents (observation
/// entries first, then recurrent entries).
pub fn frame_chain_key(base_seed: u64, s: &ArrayView1<f64>, r: &ArrayView1<f64>) -> u64 {
    fold(base_seed, content_hash(s.iter().chain(r.iter()).copied()))
}

/// Batched CD statistics. `s0`/`r0` hold the data frames as columns.
///
/// Positive and negative phases pair hidden *means* with visible values;
/// intermediate chain states are *samples*; the final reconstruction used
/// for negative statistics is means or samples per `opts`. In TRBM mode the
/// recurrent block is never resampled: it acts as a per-frame dynamic bias
/// and its negative statistics equal the data.
///
/// Within each chain, draws occur hidden -> observation -> recurrent in
/// unit order; phases that only need means draw nothing.
pub fn cd_stats(
    params: &HarmoniumParams,
    s0: &ArrayView2<f64>,
    r0: &ArrayView2<f64>,
    n_cd: usize,
    mode: CdMode,
    base_seed: u64,
    opts: CdOptions,
) -> Result<CdStats> {
    if n_cd == 0 {
        return Err(Error::InvalidArgument("n_cd must be at least 1".into()));
    }
    let batch = s0.ncols();
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if s0.nrows() != params.n_obs() {
        return Err(Error::dim("cd_stats obs rows", params.n_obs(), s0.nrows()));
    }
    if r0.nrows() != params.n_rcrnt() || r0.ncols() != batch {
        return Err(Error::dim(
            "cd_stats rcrnt",
            format!("({}, {batch})", params.n_rcrnt()),
            format!("{:?}", r0.dim()),
        ));
    }

    let chain_keys: Vec<u64> = (0..batch)
        .map(|j| frame_chain_key(base_seed, &s0.column(j), &r0.column(j)))
        .collect();
    let mut streams: Vec<ChaCha8Rng> = chain_keys.iter().map(|&k| stream_from_key(k)).collect();

    let clamp = mode == CdMode::Trbm;
    let use_means = opts.negative_visible_stats == StatSource::Means;

    // Positive phase.
    let m_pos = up_means_batch(params, s0, r0);
    let mut h = sample_columns(&params.hid_spec, &m_pos.view(), &mut streams)?;

    let mut s_mean = Array2::zeros((params.n_obs(), batch));
    let mut r_mean = Array2::zeros((params.n_rcrnt(), batch));
    let mut s_samp = Array2::zeros((0, 0));
    let mut r_samp = Array2::zeros((0, 0));
    let mut recon_col_sums = Vec::new();

    for k in 1..=n_cd {
        s_mean = down_obs_means_batch(params, &h.view());
        if !clamp && params.n_rcrnt() > 0 {
            r_mean = down_rcrnt_means_batch(params, &h.view());
        }
        if k == 1 {
            let diff = &s_mean - s0;
            recon_col_sums = diff
                .axis_iter(Axis(1))
                .map(|col| col.iter().map(|d| d * d).sum::<f64>())
                .collect();
        }
        let continuing = k < n_cd;
        if continuing || !use_means {
            s_samp = sample_columns(&params.obs_spec, &s_mean.view(), &mut streams)?;
            if !clamp && params.n_rcrnt() > 0 {
                r_samp = sample_columns(&params.rcrnt_spec, &r_mean.view(), &mut streams)?;
            }
        }
        if continuing {
            let r_next = if clamp { r0.view() } else { r_samp.view() };
            let m_k = up_means_batch(params, &s_samp.view(), &r_next);
            h = sample_columns(&params.hid_spec, &m_k.view(), &mut streams)?;
        }
    }

    let s_neg = if use_means { s_mean } else { s_samp };
    let r_neg = if clamp {
        r0.to_owned()
    } else if params.n_rcrnt() == 0 {
        Array2::zeros((0, batch))
    } else if use_means {
        r_mean
    } else {
        r_samp
    };

    let m_neg = up_means_batch(params, &s_neg.view(), &r_neg.view());

    // Sum per-frame reconstruction errors in key order so the total does not
    // depend on how the batch happened to be arranged.
    let order = canonical_order(&chain_keys);
    let recon_sq_err = order.iter().map(|&j| recon_col_sums[j]).sum::<f64>()
        / (params.n_obs() * batch) as f64;

    Ok(CdStats { m_pos, m_neg, s_neg, r_neg, recon_sq_err, chain_keys })
}

/// Indices of the frames sorted by chain key. Frames with equal keys have
/// equal contents (the key hashes the contents), so any tie order yields the
/// same reduced values; sorting makes every reduction independent of the
/// original batch order down to the last bit.
fn canonical_order(chain_keys: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..chain_keys.len()).collect();
    order.sort_by_key(|&j| chain_keys[j]);
    order
}

/// Reduce CD statistics to a batch-averaged gradient.
///
/// All reductions run with the frame columns rearranged into chain-key order,
/// so the result is exactly invariant under permutation of the batch.
pub fn gradients_from_stats(
    params: &HarmoniumParams,
    s0: &ArrayView2<f64>,
    r0: &ArrayView2<f64>,
    stats: &CdStats,
    mode: CdMode,
) -> GradientSet {
    let batch = s0.ncols() as f64;
    let inv_b = 1.0 / batch;

    let order = canonical_order(&stats.chain_keys);
    let s0_c = s0.select(Axis(1), &order);
    let m_pos_c = stats.m_pos.select(Axis(1), &order);
    let m_neg_c = stats.m_neg.select(Axis(1), &order);
    let s_neg_c = stats.s_neg.select(Axis(1), &order);

    let mut dw = Array2::zeros(params.w.dim());
    general_mat_mul(inv_b, &m_pos_c, &s0_c.t(), 0.0, &mut dw);
    general_mat_mul(-inv_b, &m_neg_c, &s_neg_c.t(), 1.0, &mut dw);

    let mut du = Array2::zeros(params.u.dim());
    let db_rcrnt;
    if params.n_rcrnt() > 0 {
        let r0_c = r0.select(Axis(1), &order);
        let r_neg_c = stats.r_neg.select(Axis(1), &order);
        general_mat_mul(inv_b, &m_pos_c, &r0_c.t(), 0.0, &mut du);
        general_mat_mul(-inv_b, &m_neg_c, &r_neg_c.t(), 1.0, &mut du);
        db_rcrnt = if mode == CdMode::Trbm {
            Array1::zeros(params.n_rcrnt())
        } else {
            (&r0_c - &r_neg_c).sum_axis(Axis(1)) * inv_b
        };
    } else {
        db_rcrnt = Array1::zeros(0);
    }

    let db_hid = (&m_pos_c - &m_neg_c).sum_axis(Axis(1)) * inv_b;
    let db_obs = (&s0_c - &s_neg_c).sum_axis(Axis(1)) * inv_b;

    GradientSet { dw, du, db_hid, db_obs, db_rcrnt }
}

/// Batch-averaged CD gradient from pre-packed column matrices, with an
/// explicit chain seed (see [`frame_chain_key`] for how per-frame streams
/// derive from it).
pub fn cd_gradients_batched(
    params: &HarmoniumParams,
    s0: &ArrayView2<f64>,
    r0: &ArrayView2<f64>,
    n_cd: usize,
    mode: CdMode,
    base_seed: u64,
    opts: CdOptions,
) -> Result<(GradientSet, CdStats)> {
    let stats = cd_stats(params, s0, r0, n_cd, mode, base_seed, opts)?;
    let grads = gradients_from_stats(params, s0, r0, &stats, mode);
    Ok((grads, stats))
}

/// Pack a slice of frames into (obs x B, rcrnt x B) column matrices.
pub fn pack_frames(params: &HarmoniumParams, batch: &[AugmentedFrame]) -> Result<(Array2<f64>, Array2<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut s0 = Array2::zeros((params.n_obs(), batch.len()));
    let mut r0 = Array2::zeros((params.n_rcrnt(), batch.len()));
    for (j, frame) in batch.iter().enumerate() {
        frame.validate(params)?;
        s0.column_mut(j).assign(&frame.s);
        r0.column_mut(j).assign(&frame.r_prev);
    }
    Ok((s0, r0))
}

/// Batch-averaged CD-n gradient over a slice of frames.
///
/// One 64-bit base seed is drawn from `rng`; each frame's chain stream then
/// derives from that seed and the frame's contents, making the result
/// exactly invariant under batch permutation.
pub fn cd_gradients<R: RngCore + ?Sized>(
    params: &HarmoniumParams,
    batch: &[AugmentedFrame],
    n_cd: usize,
    mode: CdMode,
    rng: &mut R,
    opts: CdOptions,
) -> Result<GradientSet> {
    let (s0, r0) = pack_frames(params, batch)?;
    let base_seed = rng.next_u64();
    let (grads, _) = cd_gradients_batched(params, &s0.view(), &r0.view(), n_cd, mode, base_seed, opts)?;
    Ok(grads)
}
