//! Evaluation: position decoding from hidden activities, wrap-aware MSE
//! metrics, next-frame MSE, and the exact-arithmetic identifiability
//! checker for mixture-of-products models.

use ndarray::{ArrayView1, ArrayView2};
use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::harmonium::{down_pass_obs, HarmoniumParams};
use crate::worldgen::PpcCodec;
use crate::wrap::wrap_signed;

/// Resultant lengths below this fraction of the total mass are treated as
/// direction-free: the decoder falls back to the center of the ring.
const RESULTANT_FLOOR: f64 = 1e-9;

/// Wrap-aware center of mass of nonnegative weights placed at the codec's
/// preferred positions. Zero (or negative) total mass is an error; a
/// direction-free weight profile (resultant below `1e-9` of the mass, e.g.
/// perfectly uniform weights) falls back to the ring center.
pub fn position_from_means(codec: &PpcCodec, weights: &ArrayView1<f64>) -> Result<f64> {
    if weights.len() != codec.n_units {
        return Err(Error::dim("position_from_means", codec.n_units, weights.len()));
    }
    let mass: f64 = weights.sum();
    if !(mass > 0.0) {
        return Err(Error::NumericDomain(format!(
            "cannot take a center of mass of total weight {mass}"
        )));
    }
    let two_pi = std::f64::consts::TAU;
    let mut re = 0.0;
    let mut im = 0.0;
    for (&w, &c) in weights.iter().zip(codec.centers().iter()) {
        let phase = two_pi * c / codec.length;
        re += w * phase.cos();
        im += w * phase.sin();
    }
    let resultant = (re * re + im * im).sqrt();
    if resultant <= RESULTANT_FLOOR * mass {
        return Ok(codec.length / 2.0);
    }
    let angle = im.atan2(re);
    let mut pos = angle / two_pi * codec.length;
    if pos < 0.0 {
        pos += codec.length;
    }
    Ok(pos)
}

/// Decode a position estimate from a recurrent/hidden state: run the
/// observation-block downward pass and take the wrap-aware center of mass
/// of the resulting means against the codec's preferred positions.
pub fn decode_position(
    params: &HarmoniumParams,
    hidden_means: &ArrayView1<f64>,
    codec: &PpcCodec,
) -> Result<f64> {
    let means = down_pass_obs(params, hidden_means)?;
    position_from_means(codec, &means.view())
}

/// Mean squared shortest-circular-distance between position sequences.
pub fn mse_position(estimates: &[f64], truths: &[f64], wrap_length: f64) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::dim("mse_position", truths.len(), estimates.len()));
    }
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("empty position sequences".into()));
    }
    let sum: f64 = estimates
        .iter()
        .zip(truths.iter())
        .map(|(&a, &b)| {
            let d = wrap_signed(a - b, wrap_length);
            d * d
        })
        .sum();
    Ok(sum / estimates.len() as f64)
}

/// Mean squared difference over two equal-shaped frame stacks (rows =
/// frames, columns = pixels or units).
pub fn mean_squared_error(predictions: &ArrayView2<f64>, truths: &ArrayView2<f64>) -> Result<f64> {
    if predictions.dim() != truths.dim() {
        return Err(Error::dim(
            "mean_squared_error",
            format!("{:?}", truths.dim()),
            format!("{:?}", predictions.dim()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("empty frame stacks".into()));
    }
    let diff = predictions - truths;
    Ok(diff.mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// Next-frame MSE of the zeroth-order predictor that repeats the current
/// frame: mean over steps t of the per-pixel squared difference between
/// frames t and t+1.
pub fn copy_frame_mse(trajectory: &ArrayView2<f64>) -> Result<f64> {
    let t_len = trajectory.nrows();
    if t_len < 2 {
        return Err(Error::InvalidArgument("need at least two frames".into()));
    }
    let cur = trajectory.slice(ndarray::s![..t_len - 1, ..]);
    let next = trajectory.slice(ndarray::s![1.., ..]);
    mean_squared_error(&cur, &next)
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

/// Filtering-accuracy summary for one model on a test set of equal-length
/// trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub per_trajectory_mse: Vec<f64>,
    /// Mean of the per-step squared errors across all steps and
    /// trajectories (equals the mean of `per_trajectory_mse` because every
    /// trajectory contributes the same number of steps).
    pub aggregate_mse: f64,
    pub steps_per_trajectory: usize,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, per_trajectory_mse: Vec<f64>, steps_per_trajectory: usize) -> Result<Self> {
        if per_trajectory_mse.is_empty() {
            return Err(Error::InvalidArgument("report needs at least one trajectory".into()));
        }
        let aggregate_mse = per_trajectory_mse.iter().sum::<f64>() / per_trajectory_mse.len() as f64;
        Ok(EvalReport {
            model: model.into(),
            per_trajectory_mse,
            aggregate_mse,
            steps_per_trajectory,
        })
    }

    /// CSV rows `model,trajectory,steps,mse`, one per trajectory, then an
    /// `all` row carrying the aggregate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,trajectory,steps,mse\n");
        for (j, mse) in self.per_trajectory_mse.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", self.model, j, self.steps_per_trajectory, mse));
        }
        out.push_str(&format!(
            "{},all,{},{}\n",
            self.model,
            self.steps_per_trajectory * self.per_trajectory_mse.len(),
            self.aggregate_mse
        ));
        out
    }
}

// ---------------------------------------------------------------------------
// Identifiability
// ---------------------------------------------------------------------------

/// Verdict of [`identifiability_check`]. The underlying condition is
/// sufficient, not necessary, so its failure is reported as "not shown"
/// rather than "unidentifiable".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentifiabilityVerdict {
    Identifiable,
    NotShown,
}

/// Exact-arithmetic result of the identifiability check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentifiabilityReport {
    pub verdict: IdentifiabilityVerdict,
    /// r = n^N, the number of joint hidden states.
    pub hidden_states: BigUint,
    /// m^M, the number of joint states of the non-recurrent visible units.
    pub nonrecurrent_states: BigUint,
    /// State-count products of the three-way greedy partition of all
    /// N + M visible units (the N recurrent units mirror the hidden layer).
    pub kappa: [BigUint; 3],
    /// Unit counts of the partition cells.
    pub partition_sizes: [usize; 3],
    /// Whether `min(r,k1) + min(r,k2) + min(r,k3) >= 2r + 2` holds exactly
    /// for the greedy partition. This is stronger than the verdict: the
    /// verdict uses the count comparison that the partition argument
    /// reduces to when cell sizes are large.
    pub partition_inequality_holds: bool,
}

/// Check the sufficient condition for generic identifiability of a
/// two-layer mixture-of-products model with `N` hidden/recurrent units of
/// cardinality `n` and `M` non-recurrent visible units of cardinality `m`
/// (the visible layer has N + M units in total: the recurrent block mirrors
/// the hidden layer).
///
/// The verdict is the exact big-integer comparison `n^N < m^M`: identifiable
/// when it holds strictly. The three-way greedy partition of the visible
/// units (one minimal-cardinality unit set aside, the rest split to balance
/// the two state-count products) is returned for reporting, together with
/// whether the underlying min-sum inequality holds for it exactly.
pub fn identifiability_check(n: u64, n_count: usize, m: u64, m_count: usize) -> Result<IdentifiabilityReport> {
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument(format!(
            "unit cardinalities must be at least 2, got n={n}, m={m}"
        )));
    }
    if n_count == 0 || m_count == 0 {
        return Err(Error::InvalidArgument(format!(
            "unit counts must be at least 1, got N={n_count}, M={m_count}"
        )));
    }
    let r = BigUint::from(n).pow(n_count as u32);
    let nonrecurrent_states = BigUint::from(m).pow(m_count as u32);
    let verdict = if nonrecurrent_states > r {
        IdentifiabilityVerdict::Identifiable
    } else {
        IdentifiabilityVerdict::NotShown
    };

    // Greedy partition of all visible units (N of cardinality n, M of
    // cardinality m): S3 gets one unit of minimal cardinality; the rest go
    // one by one, largest cardinality first, to whichever of S1/S2 has the
    // smaller running product.
    let mut units: Vec<u64> = Vec::with_capacity(n_count + m_count);
    units.extend(std::iter::repeat(n).take(n_count));
    units.extend(std::iter::repeat(m).take(m_count));
    units.sort_unstable_by(|a, b| b.cmp(a));
    let kappa3_card = units.pop().expect("at least two units total");
    let kappa3 = BigUint::from(kappa3_card);
    let mut kappa1 = BigUint::from(1u32);
    let mut kappa2 = BigUint::from(1u32);
    let mut size1 = 0usize;
    let mut size2 = 0usize;
    for card in units {
        if kappa1 <= kappa2 {
            kappa1 *= card;
            size1 += 1;
        } else {
            kappa2 *= card;
            size2 += 1;
        }
    }

    let min_r = |k: &BigUint| -> BigUint {
        if k < &r {
            k.clone()
        } else {
            r.clone()
        }
    };
    let lhs = min_r(&kappa1) + min_r(&kappa2) + min_r(&kappa3);
    let rhs = BigUint::from(2u32) * &r + BigUint::from(2u32);
    let partition_inequality_holds = lhs >= rhs;

    Ok(IdentifiabilityReport {
        verdict,
        hidden_states: r,
        nonrecurrent_states,
        kappa: [kappa1, kappa2, kappa3],
        partition_sizes: [size1, size2, 1],
        partition_inequality_holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exp_family::LayerSpec;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoder_params(codec: &PpcCodec, n_hid: usize, b_obs: Array1<f64>) -> HarmoniumParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = HarmoniumParams::init(
            LayerSpec::poisson(codec.n_units),
            LayerSpec::bernoulli(n_hid),
            LayerSpec::bernoulli(n_hid),
            0.0,
            &mut rng,
        )
        .unwrap();
        params.b_obs = b_obs;
        params
    }

    #[test]
    fn one_hot_means_decode_to_the_preferred_position() {
        let codec = PpcCodec::default();
        for i in [0usize, 4, 7, 14] {
            let mut w = Array1::zeros(codec.n_units);
            w[i] = 3.7;
            let pos = position_from_means(&codec, &w.view()).unwrap();
            assert_abs_diff_eq!(pos, codec.centers()[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn tuning_curve_means_decode_to_their_position() {
        let codec = PpcCodec::default();
        for &x in &[0.05, 0.33, 0.5, 0.81, 0.999] {
            let w = codec.mean_rates(x, 8.0);
            let pos = position_from_means(&codec, &w.view()).unwrap();
            let err = wrap_signed(pos - x, codec.length).abs();
            assert!(
                err < 1e-3 * codec.length,
                "decoded {pos} for true {x}: error {err}"
            );
        }
    }

    #[test]
    fn center_of_mass_is_scale_invariant() {
        let codec = PpcCodec::default();
        let w = codec.mean_rates(0.62, 7.0);
        let a = position_from_means(&codec, &w.view()).unwrap();
        let b = position_from_means(&codec, &(&w * 1e6).view()).unwrap();
        let c = position_from_means(&codec, &(&w * 1e-6).view()).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        assert_abs_diff_eq!(a, c, epsilon = 1e-9);
    }

    #[test]
    fn uniform_means_fall_back_to_the_ring_center() {
        let codec = PpcCodec::default();
        let w = Array1::from_elem(codec.n_units, 0.25);
        let pos = position_from_means(&codec, &w.view()).unwrap();
        assert_abs_diff_eq!(pos, codec.length / 2.0, epsilon = 0.0);
    }

    #[test]
    fn zero_mass_is_an_error() {
        let codec = PpcCodec::default();
        let w = Array1::zeros(codec.n_units);
        assert!(position_from_means(&codec, &w.view()).is_err());
    }

    #[test]
    fn zero_parameters_decode_to_the_ring_center() {
        let codec = PpcCodec::default();
        let params = decoder_params(&codec, 4, Array1::zeros(codec.n_units));
        let r = arr1(&[0.5, 0.5, 0.5, 0.5]);
        // Zero weights and biases give uniform Poisson means exp(0) = 1.
        let pos = decode_position(&params, &r.view(), &codec).unwrap();
        assert_abs_diff_eq!(pos, codec.length / 2.0, epsilon = 0.0);
    }

    #[test]
    fn decode_recovers_position_from_log_tuning_biases() {
        let codec = PpcCodec::default();
        let x = 0.71;
        let b_obs = codec.mean_rates(x, 8.0).mapv(f64::ln);
        let params = decoder_params(&codec, 3, b_obs);
        let r = arr1(&[0.0, 1.0, 0.0]);
        let pos = decode_position(&params, &r.view(), &codec).unwrap();
        assert!(wrap_signed(pos - x, codec.length).abs() < 1e-3 * codec.length);
    }

    #[test]
    fn position_mse_handles_the_wrap() {
        assert_abs_diff_eq!(
            mse_position(&[0.3, 0.7], &[0.3, 0.7], 1.0).unwrap(),
            0.0,
            epsilon = 0.0
        );
        // Offset of exactly half the ring is the maximal distance.
        assert_abs_diff_eq!(
            mse_position(&[0.75], &[0.25], 1.0).unwrap(),
            0.25,
            epsilon = 1e-15
        );
        // 0.95 vs 0.05: the short way round is 0.1.
        assert_abs_diff_eq!(
            mse_position(&[0.95], &[0.05], 1.0).unwrap(),
            0.01,
            epsilon = 1e-15
        );
        let a = [0.11, 0.92, 0.4];
        let b = [0.13, 0.03, 0.4];
        assert_abs_diff_eq!(
            mse_position(&a, &b, 1.0).unwrap(),
            mse_position(&b, &a, 1.0).unwrap(),
            epsilon = 1e-15
        );
        assert!(mse_position(&[0.1], &[0.1, 0.2], 1.0).is_err());
    }

    #[test]
    fn frame_mse_matches_hand_values() {
        let truth = ndarray::arr2(&[[0.0, 1.0], [1.0, 1.0]]);
        assert_abs_diff_eq!(
            mean_squared_error(&truth.view(), &truth.view()).unwrap(),
            0.0,
            epsilon = 0.0
        );
        let half = ndarray::arr2(&[[0.5, 0.5], [0.5, 0.5]]);
        assert_abs_diff_eq!(
            mean_squared_error(&half.view(), &truth.view()).unwrap(),
            0.25,
            epsilon = 1e-15
        );
        // Copy-frame: frames [0,0] -> [1,0] -> [1,1]; diffs are 1 pixel of 2
        // at each step.
        let traj = ndarray::arr2(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]);
        assert_abs_diff_eq!(copy_frame_mse(&traj.view()).unwrap(), 0.5, epsilon = 1e-15);
        assert!(copy_frame_mse(&ndarray::arr2(&[[1.0, 0.0]]).view()).is_err());
    }

    #[test]
    fn report_aggregates_and_renders() {
        let r = EvalReport::new("kf-opt", vec![0.5, 1.5, 1.0], 100).unwrap();
        assert_abs_diff_eq!(r.aggregate_mse, 1.0, epsilon = 1e-15);
        let csv = r.to_csv();
        assert_eq!(
            csv,
            "model,trajectory,steps,mse\nkf-opt,0,100,0.5\nkf-opt,1,100,1.5\nkf-opt,2,100,1\nkf-opt,all,300,1\n"
        );
        assert!(EvalReport::new("x", vec![], 10).is_err());
    }

    #[test]
    fn identifiability_boundary_sits_at_equal_state_counts() {
        // 2^150 = 1024^15 exactly: the strict comparison fails.
        let at = identifiability_check(2, 150, 1024, 15).unwrap();
        assert_eq!(at.verdict, IdentifiabilityVerdict::NotShown);
        assert_eq!(at.hidden_states, at.nonrecurrent_states);
        // One more state per non-recurrent unit tips it over.
        let over = identifiability_check(2, 150, 1025, 15).unwrap();
        assert_eq!(over.verdict, IdentifiabilityVerdict::Identifiable);
        // The greedy partition itself cannot certify this case: splitting
        // 165 visible units cannot give two cells of 2^150 states each.
        assert!(!over.partition_inequality_holds);
        // Round numbers fall short: 1000^15 < 2^150.
        let under = identifiability_check(2, 150, 1000, 15).unwrap();
        assert_eq!(under.verdict, IdentifiabilityVerdict::NotShown);
    }

    #[test]
    fn binary_movie_model_bound_is_exact() {
        // 900 pixels + 899 recurrent units = 1799 visible; 899 hidden.
        let ok = identifiability_check(2, 899, 2, 900).unwrap();
        assert_eq!(ok.verdict, IdentifiabilityVerdict::Identifiable);
        // All-binary units make the greedy partition tight: two cells of
        // 899 units reach exactly min-sum = 2r + 2.
        assert!(ok.partition_inequality_holds);
        assert_eq!(ok.partition_sizes, [899, 899, 1]);
        assert_eq!(ok.kappa[0], ok.kappa[1]);
        assert_eq!(ok.kappa[0], ok.hidden_states);
        assert_eq!(ok.kappa[2], BigUint::from(2u32));

        let too_many = identifiability_check(2, 900, 2, 900).unwrap();
        assert_eq!(too_many.verdict, IdentifiabilityVerdict::NotShown);
        assert!(!too_many.partition_inequality_holds);
    }

    #[test]
    fn identifiability_verdict_is_monotone_in_m_and_count() {
        let base = identifiability_check(2, 150, 1025, 15).unwrap();
        assert_eq!(base.verdict, IdentifiabilityVerdict::Identifiable);
        for (m, m_count) in [(1026, 15), (1025, 16), (4096, 15), (1025, 40)] {
            let r = identifiability_check(2, 150, m, m_count).unwrap();
            assert_eq!(
                r.verdict,
                IdentifiabilityVerdict::Identifiable,
                "raising m or M must preserve the verdict (m={m}, M={m_count})"
            );
        }
    }

    #[test]
    fn identifiability_rejects_degenerate_inputs() {
        assert!(identifiability_check(1, 5, 4, 3).is_err());
        assert!(identifiability_check(2, 0, 4, 3).is_err());
        assert!(identifiability_check(2, 5, 4, 0).is_err());
    }
}
