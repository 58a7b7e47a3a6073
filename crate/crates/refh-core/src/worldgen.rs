//! Synthetic worlds: a damped harmonic oscillator on a ring observed through
//! a Poisson population code, and bouncing-ball movies.
//!
//! Every generator draws from counter-derived streams (see [`crate::rng`]):
//! trajectory `j` of batch `b` under seed `s` is a pure function of
//! `(s, b, j)`, so batch renewal during training and dataset files written
//! by the CLI agree exactly.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exp_family::UnitFamily;
use crate::rng::stream;
use crate::temporal::TrajectorySource;
use crate::wrap::{wrap_position, wrap_signed};

const TAG_LDS_TRAJ: u64 = 10;
const TAG_BOUNCE_TRAJ: u64 = 11;

// ---------------------------------------------------------------------------
// Damped oscillator on a ring
// ---------------------------------------------------------------------------

/// Linear-Gaussian world: a damped spring-mass system acting on the
/// displacement from track center, with the position wrapped onto a ring of
/// circumference `length`.
///
/// Discretization is forward Euler:
/// `A = [[1, dt], [-dt k/m, 1 - dt c/m]]`, applied to `(u, v)` with
/// `u = position - length/2`, plus zero-mean Gaussian transition noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsWorld {
    pub length: f64,
    pub dt: f64,
    pub mass: f64,
    pub damping: f64,
    pub stiffness: f64,
    /// Diagonal of the transition covariance, (position, velocity).
    pub trans_cov_diag: [f64; 2],
    /// Standard deviation of the initial velocity (initial position is
    /// uniform on the ring).
    pub init_vel_std: f64,
}

impl Default for LdsWorld {
    fn default() -> Self {
        LdsWorld {
            length: 1.0,
            dt: 0.05,
            mass: 5.0,
            damping: 0.25,
            stiffness: 3.0,
            trans_cov_diag: [5e-7, 5e-5],
            init_vel_std: 1e-3,
        }
    }
}

impl LdsWorld {
    pub fn validate(&self) -> Result<()> {
        let ok = self.length > 0.0
            && self.dt > 0.0
            && self.mass > 0.0
            && self.damping >= 0.0
            && self.stiffness >= 0.0
            && self.trans_cov_diag.iter().all(|&v| v >= 0.0 && v.is_finite())
            && self.init_vel_std >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad oscillator world {self:?}")))
        }
    }

    /// The 2x2 state-transition matrix acting on (displacement, velocity).
    pub fn transition_matrix(&self) -> [[f64; 2]; 2] {
        [
            [1.0, self.dt],
            [-self.dt * self.stiffness / self.mass, 1.0 - self.dt * self.damping / self.mass],
        ]
    }

    /// Simulate `t_len` steps; rows are (position, velocity), with the
    /// position wrapped to [0, length).
    ///
    /// The displacement state itself evolves linearly and unbounded — the
    /// system is a genuine linear-Gaussian process. Wrapping applies only to
    /// the reported position (and hence to what the encoder sees); it never
    /// feeds back into the dynamics.
    pub fn simulate<R: Rng + ?Sized>(&self, t_len: usize, rng: &mut R) -> Result<Array2<f64>> {
        self.validate()?;
        if t_len == 0 {
            return Err(Error::InvalidArgument("t_len must be >= 1".into()));
        }
        let a = self.transition_matrix();
        let vel0 = Normal::new(0.0, self.init_vel_std)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let noise_pos = Normal::new(0.0, self.trans_cov_diag[0].sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let noise_vel = Normal::new(0.0, self.trans_cov_diag[1].sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;

        let mut out = Array2::zeros((t_len, 2));
        let mut u = rng.gen_range(0.0..self.length) - self.length / 2.0;
        let mut vel = vel0.sample(rng);
        out[[0, 0]] = wrap_position(u + self.length / 2.0, self.length);
        out[[0, 1]] = vel;
        for t in 1..t_len {
            let u_next = a[0][0] * u + a[0][1] * vel + noise_pos.sample(rng);
            let v_next = a[1][0] * u + a[1][1] * vel + noise_vel.sample(rng);
            u = u_next;
            vel = v_next;
            out[[t, 0]] = wrap_position(u + self.length / 2.0, self.length);
            out[[t, 1]] = vel;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Poisson population code
// ---------------------------------------------------------------------------

/// Population of Poisson units with Gaussian tuning curves whose centers
/// tile the ring uniformly; distances are measured around the ring. The
/// per-step gain multiplying every tuning curve is drawn uniformly from
/// `[gain_low, gain_high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcCodec {
    pub n_units: usize,
    pub length: f64,
    /// Tuning-curve standard deviation.
    pub tuning_width: f64,
    pub gain_low: f64,
    pub gain_high: f64,
}

impl Default for PpcCodec {
    fn default() -> Self {
        let length = 1.0_f64;
        // Full width at half maximum = length / 6.
        let tuning_width = length / (12.0 * (2.0 * (2.0_f64).ln()).sqrt());
        PpcCodec { n_units: 15, length, tuning_width, gain_low: 6.4, gain_high: 9.6 }
    }
}

impl PpcCodec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_units > 0
            && self.length > 0.0
            && self.tuning_width > 0.0
            && self.gain_low > 0.0
            && self.gain_high >= self.gain_low;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad population codec {self:?}")))
        }
    }

    /// Preferred positions, uniformly spaced: (i + 1/2) length / n.
    pub fn centers(&self) -> Array1<f64> {
        (0..self.n_units)
            .map(|i| (i as f64 + 0.5) * self.length / self.n_units as f64)
            .collect()
    }

    /// Mean count of every unit at `position` under `gain`.
    pub fn mean_rates(&self, position: f64, gain: f64) -> Array1<f64> {
        let two_sigma_sq = 2.0 * self.tuning_width * self.tuning_width;
        self.centers()
            .iter()
            .map(|&c| {
                let d = wrap_signed(position - c, self.length);
                gain * (-d * d / two_sigma_sq).exp()
            })
            .collect()
    }

    /// Draw one step's gain and count vector for `position`.
    pub fn encode<R: Rng + ?Sized>(&self, position: f64, rng: &mut R) -> Result<(Array1<f64>, f64)> {
        let gain = if self.gain_high > self.gain_low {
            rng.gen_range(self.gain_low..self.gain_high)
        } else {
            self.gain_low
        };
        let rates = self.mean_rates(position, gain);
        let mut counts = Array1::zeros(self.n_units);
        for (i, &rate) in rates.iter().enumerate() {
            counts[i] = UnitFamily::Poisson.sample(rate, rng)?;
        }
        Ok((counts, gain))
    }
}

/// One simulated oscillator trajectory pushed through the population code.
/// Returns `(counts, latents)` with rows in time order; latent columns are
/// (position, velocity, gain).
pub fn generate_lds_trajectory<R: Rng + ?Sized>(
    world: &LdsWorld,
    codec: &PpcCodec,
    t_len: usize,
    rng: &mut R,
) -> Result<(Array2<f64>, Array2<f64>)> {
    codec.validate()?;
    if (codec.length - world.length).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "codec ring length {} does not match world length {}",
            codec.length, world.length
        )));
    }
    let states = world.simulate(t_len, rng)?;
    let mut counts = Array2::zeros((t_len, codec.n_units));
    let mut latents = Array2::zeros((t_len, 3));
    for t in 0..t_len {
        let (c, gain) = codec.encode(states[[t, 0]], rng)?;
        counts.row_mut(t).assign(&c);
        latents[[t, 0]] = states[[t, 0]];
        latents[[t, 1]] = states[[t, 1]];
        latents[[t, 2]] = gain;
    }
    Ok((counts, latents))
}

/// A whole dataset of population-code trajectories with their latents.
#[derive(Debug, Clone)]
pub struct LdsDataset {
    pub counts: Vec<Array2<f64>>,
    pub latents: Vec<Array2<f64>>,
}

/// Generate trajectory `j` of batch `batch_index` - a pure function of
/// `(seed, batch_index, j)` and the world/codec settings.
pub fn lds_batch_trajectory(
    world: &LdsWorld,
    codec: &PpcCodec,
    seed: u64,
    batch_index: u64,
    traj_index: u64,
    t_len: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut rng = stream(seed, &[TAG_LDS_TRAJ, batch_index, traj_index]);
    generate_lds_trajectory(world, codec, t_len, &mut rng)
}

/// Generate a full dataset (batch 0 of the stream layout the training
/// source uses, so `generate` followed by file-based training replays the
/// in-memory generator exactly).
pub fn generate_lds_dataset(
    world: &LdsWorld,
    codec: &PpcCodec,
    seed: u64,
    n_trajectories: usize,
    t_len: usize,
) -> Result<LdsDataset> {
    let mut counts = Vec::with_capacity(n_trajectories);
    let mut latents = Vec::with_capacity(n_trajectories);
    for j in 0..n_trajectories {
        let (c, l) = lds_batch_trajectory(world, codec, seed, 0, j as u64, t_len)?;
        counts.push(c);
        latents.push(l);
    }
    Ok(LdsDataset { counts, latents })
}

/// Training source drawing fresh population-code trajectories per batch.
pub struct LdsSource {
    pub world: LdsWorld,
    pub codec: PpcCodec,
    pub seed: u64,
}

impl TrajectorySource for LdsSource {
    fn obs_dim(&self) -> usize {
        self.codec.n_units
    }

    fn batch(&mut self, batch_index: u64, n_trajectories: usize, traj_len: usize) -> Result<Vec<Array2<f64>>> {
        (0..n_trajectories)
            .map(|j| {
                lds_batch_trajectory(&self.world, &self.codec, self.seed, batch_index, j as u64, traj_len)
                    .map(|(c, _)| c)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Bouncing balls
// ---------------------------------------------------------------------------

/// Equal-mass balls in a square box with elastic ball-ball and ball-wall
/// collisions, rendered to binary frames: a pixel is on iff its center lies
/// within some ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BounceWorld {
    /// Frames are `frame_size` x `frame_size` pixels; the box is the same
    /// square in world units.
    pub frame_size: usize,
    pub n_balls: usize,
    pub radius: f64,
    pub speed_low: f64,
    pub speed_high: f64,
    /// Attempts allowed when rejection-sampling non-overlapping placements.
    pub placement_retries: usize,
}

impl Default for BounceWorld {
    fn default() -> Self {
        BounceWorld {
            frame_size: 30,
            n_balls: 3,
            radius: 2.0,
            speed_low: 0.3,
            speed_high: 0.8,
            placement_retries: 1000,
        }
    }
}

/// Relative kinetic-energy drift allowed across one collision resolution.
const ENERGY_TOLERANCE: f64 = 1e-9;

impl BounceWorld {
    pub fn validate(&self) -> Result<()> {
        let size = self.frame_size as f64;
        let ok = self.frame_size > 0
            && self.n_balls > 0
            && self.radius > 0.0
            && 2.0 * self.radius < size
            && self.speed_low >= 0.0
            && self.speed_high >= self.speed_low
            && self.placement_retries > 0;
        if !ok {
            return Err(Error::InvalidArgument(format!("bad bounce world {self:?}")));
        }
        // Crude feasibility check for placement: total disk area must leave
        // head room inside the admissible square for centers.
        let admissible = size - 2.0 * self.radius;
        let needed = self.n_balls as f64 * std::f64::consts::PI * (2.0 * self.radius).powi(2);
        if needed > 2.0 * admissible * admissible {
            return Err(Error::InvalidArgument(
                "too many balls for the box; placement would almost surely fail".into(),
            ));
        }
        Ok(())
    }

    /// Sample non-overlapping initial states, rows (x, y, vx, vy).
    fn init_states<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Array2<f64>> {
        let size = self.frame_size as f64;
        let lo = self.radius;
        let hi = size - self.radius;
        let min_sep_sq = (2.0 * self.radius).powi(2);
        let mut states = Array2::zeros((self.n_balls, 4));
        for b in 0..self.n_balls {
            let mut placed = false;
            for _ in 0..self.placement_retries {
                let x = rng.gen_range(lo..hi);
                let y = rng.gen_range(lo..hi);
                let clear = (0..b).all(|o| {
                    let dx = states[[o, 0]] - x;
                    let dy = states[[o, 1]] - y;
                    dx * dx + dy * dy >= min_sep_sq
                });
                if clear {
                    states[[b, 0]] = x;
                    states[[b, 1]] = y;
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::RetriesExhausted(format!(
                    "could not place ball {b} without overlap after {} attempts",
                    self.placement_retries
                )));
            }
        }
        for b in 0..self.n_balls {
            let speed = if self.speed_high > self.speed_low {
                rng.gen_range(self.speed_low..self.speed_high)
            } else {
                self.speed_low
            };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            states[[b, 2]] = speed * angle.cos();
            states[[b, 3]] = speed * angle.sin();
        }
        Ok(states)
    }

    /// Advance one frame: move, reflect off walls, resolve pairwise
    /// collisions by swapping the velocity components along the line of
    /// centers (equal masses), checking kinetic energy is conserved.
    fn step(&self, states: &mut Array2<f64>) {
        let size = self.frame_size as f64;
        let lo = self.radius;
        let hi = size - self.radius;
        for b in 0..self.n_balls {
            states[[b, 0]] += states[[b, 2]];
            states[[b, 1]] += states[[b, 3]];
            for axis in 0..2 {
                let mut p = states[[b, axis]];
                let mut v = states[[b, axis + 2]];
                while p < lo || p > hi {
                    if p < lo {
                        p = 2.0 * lo - p;
                    } else {
                        p = 2.0 * hi - p;
                    }
                    v = -v;
                }
                states[[b, axis]] = p;
                states[[b, axis + 2]] = v;
            }
        }

        let energy_before: f64 =
            (0..self.n_balls).map(|b| states[[b, 2]].powi(2) + states[[b, 3]].powi(2)).sum();
        let min_sep_sq = (2.0 * self.radius).powi(2);
        for i in 0..self.n_balls {
            for j in i + 1..self.n_balls {
                let dx = states[[i, 0]] - states[[j, 0]];
                let dy = states[[i, 1]] - states[[j, 1]];
                let dist_sq = dx * dx + dy * dy;
                if dist_sq >= min_sep_sq || dist_sq < 1e-12 {
                    continue;
                }
                let dvx = states[[i, 2]] - states[[j, 2]];
                let dvy = states[[i, 3]] - states[[j, 3]];
                // Only resolve if the pair is approaching, so a pair still
                // overlapping after a swap is not re-collided forever.
                let approach = dvx * dx + dvy * dy;
                if approach >= 0.0 {
                    continue;
                }
                let scale = approach / dist_sq;
                let ix = scale * dx;
                let iy = scale * dy;
                states[[i, 2]] -= ix;
                states[[i, 3]] -= iy;
                states[[j, 2]] += ix;
                states[[j, 3]] += iy;
            }
        }
        let energy_after: f64 =
            (0..self.n_balls).map(|b| states[[b, 2]].powi(2) + states[[b, 3]].powi(2)).sum();
        let scale = energy_before.max(1e-30);
        assert!(
            (energy_after - energy_before).abs() <= ENERGY_TOLERANCE * scale,
            "collision resolution lost energy: {energy_before} -> {energy_after}"
        );
    }

    /// Simulate ball states over `t_len` frames; element t is the
    /// (n_balls x 4) state matrix at frame t.
    pub fn simulate<R: Rng + ?Sized>(&self, t_len: usize, rng: &mut R) -> Result<Vec<Array2<f64>>> {
        self.validate()?;
        if t_len == 0 {
            return Err(Error::InvalidArgument("t_len must be >= 1".into()));
        }
        let mut states = self.init_states(rng)?;
        let mut out = Vec::with_capacity(t_len);
        out.push(states.clone());
        for _ in 1..t_len {
            self.step(&mut states);
            out.push(states.clone());
        }
        Ok(out)
    }

    /// Render ball centers to a binary frame; entry [row, col] covers the
    /// pixel whose center is (col + 1/2, row + 1/2).
    pub fn rasterize(&self, states: &Array2<f64>) -> Array2<f64> {
        let n = self.frame_size;
        let mut frame = Array2::zeros((n, n));
        let r_sq = self.radius * self.radius;
        for b in 0..states.nrows() {
            let cx = states[[b, 0]];
            let cy = states[[b, 1]];
            let col_lo = ((cx - self.radius - 0.5).floor().max(0.0)) as usize;
            let col_hi = ((cx + self.radius + 0.5).ceil() as usize).min(n);
            let row_lo = ((cy - self.radius - 0.5).floor().max(0.0)) as usize;
            let row_hi = ((cy + self.radius + 0.5).ceil() as usize).min(n);
            for row in row_lo..row_hi {
                for col in col_lo..col_hi {
                    let dx = col as f64 + 0.5 - cx;
                    let dy = row as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= r_sq {
                        frame[[row, col]] = 1.0;
                    }
                }
            }
        }
        frame
    }

    /// Simulate and render, one flattened row (row-major pixels) per frame.
    pub fn simulate_frames<R: Rng + ?Sized>(&self, t_len: usize, rng: &mut R) -> Result<Array2<f64>> {
        let states = self.simulate(t_len, rng)?;
        let n_px = self.frame_size * self.frame_size;
        let mut out = Array2::zeros((t_len, n_px));
        for (t, st) in states.iter().enumerate() {
            let frame = self.rasterize(st);
            let flat = frame.into_shape_with_order(n_px).expect("square frame flattens");
            out.row_mut(t).assign(&flat);
        }
        Ok(out)
    }
}

/// Rebuild a (size x size) frame from one flattened dataset row.
pub fn frame_from_row(row: &ArrayView1<f64>, frame_size: usize) -> Result<Array2<f64>> {
    if row.len() != frame_size * frame_size {
        return Err(Error::dim("frame_from_row", frame_size * frame_size, row.len()));
    }
    Ok(row
        .to_owned()
        .into_shape_with_order((frame_size, frame_size))
        .expect("length checked"))
}

/// Generate movie trajectory `j` of batch `batch_index` - a pure function
/// of `(seed, batch_index, j)` and the world settings.
pub fn bounce_batch_trajectory(
    world: &BounceWorld,
    seed: u64,
    batch_index: u64,
    traj_index: u64,
    t_len: usize,
) -> Result<Array2<f64>> {
    let mut rng = stream(seed, &[TAG_BOUNCE_TRAJ, batch_index, traj_index]);
    world.simulate_frames(t_len, &mut rng)
}

/// Generate a full movie dataset (batch 0 of the training-source layout).
pub fn generate_bounce_dataset(
    world: &BounceWorld,
    seed: u64,
    n_trajectories: usize,
    t_len: usize,
) -> Result<Vec<Array2<f64>>> {
    (0..n_trajectories)
        .map(|j| bounce_batch_trajectory(world, seed, 0, j as u64, t_len))
        .collect()
}

/// Training source drawing fresh movies per batch.
pub struct BounceSource {
    pub world: BounceWorld,
    pub seed: u64,
}

impl TrajectorySource for BounceSource {
    fn obs_dim(&self) -> usize {
        self.world.frame_size * self.world.frame_size
    }

    fn batch(&mut self, batch_index: u64, n_trajectories: usize, traj_len: usize) -> Result<Vec<Array2<f64>>> {
        (0..n_trajectories)
            .map(|j| bounce_batch_trajectory(&self.world, self.seed, batch_index, j as u64, traj_len))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transition_matrix_has_the_documented_entries() {
        let a = LdsWorld::default().transition_matrix();
        assert_abs_diff_eq!(a[0][0], 1.0, epsilon = 0.0);
        assert_abs_diff_eq!(a[0][1], 0.05, epsilon = 0.0);
        assert_abs_diff_eq!(a[1][0], -0.03, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1][1], 0.9975, epsilon = 1e-15);
    }

    #[test]
    fn oscillator_positions_stay_on_the_ring_and_replay() {
        let world = LdsWorld::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = world.simulate(500, &mut rng).unwrap();
        assert_eq!(traj.dim(), (500, 2));
        for t in 0..500 {
            let p = traj[[t, 0]];
            assert!((0.0..world.length).contains(&p), "position {p} off the ring");
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let traj2 = world.simulate(500, &mut rng2).unwrap();
        assert_eq!(traj, traj2);
    }

    #[test]
    fn noiseless_oscillator_dissipates_energy() {
        // The forward-Euler map can raise the spring energy slightly within
        // a cycle, but the damping term wins over time: from any start, the
        // running maximum stays within a whisker of the start and the
        // energy after 1000 steps is far below it.
        let mut world = LdsWorld::default();
        world.trans_cov_diag = [0.0, 0.0];
        let energy = |u: f64, v: f64| 0.5 * (world.stiffness * u * u + world.mass * v * v);
        let a = world.transition_matrix();
        for &(u0, v0) in &[(0.3, 0.0), (0.0, 0.2), (-0.25, 0.1), (0.1, -0.15)] {
            let (mut u, mut v) = (u0, v0);
            let e0 = energy(u, v);
            let mut running_max = e0;
            for _ in 0..1000 {
                let (u2, v2) = (a[0][0] * u + a[0][1] * v, a[1][0] * u + a[1][1] * v);
                u = u2;
                v = v2;
                running_max = running_max.max(energy(u, v));
            }
            assert!(
                running_max <= e0 * 1.03,
                "energy overshoot too large: start {e0}, max {running_max}"
            );
            let e_end = energy(u, v);
            assert!(
                e_end < 0.5 * e0,
                "energy failed to decay: start {e0}, end {e_end}"
            );
        }
    }

    #[test]
    fn tuning_curves_tile_the_ring_evenly() {
        let codec = PpcCodec::default();
        // FWHM should be length/6: value at distance FWHM/2 is half the peak.
        let half_width = codec.length / 12.0;
        let rates = codec.mean_rates(codec.centers()[7] + half_width, 1.0);
        assert_abs_diff_eq!(rates[7], 0.5, epsilon = 1e-12);

        // Summed tuning curves vary by well under 5% across positions.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..600 {
            let x = k as f64 / 600.0 * codec.length;
            let total: f64 = codec.mean_rates(x, 1.0).sum();
            lo = lo.min(total);
            hi = hi.max(total);
        }
        assert!(
            (hi - lo) / lo < 0.05,
            "summed tuning curves vary too much: min {lo}, max {hi}"
        );
    }

    #[test]
    fn tuning_distance_wraps_across_the_seam() {
        let codec = PpcCodec::default();
        let near_zero = codec.mean_rates(1e-9, 1.0);
        let near_length = codec.mean_rates(codec.length - 1e-9, 1.0);
        for i in 0..codec.n_units {
            assert_abs_diff_eq!(near_zero[i], near_length[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn encoded_counts_have_the_right_conditional_means() {
        let codec = PpcCodec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let position = 0.37;
        let n = 20_000;
        let mut sum_counts = Array1::<f64>::zeros(codec.n_units);
        let mut sum_expected = Array1::<f64>::zeros(codec.n_units);
        for _ in 0..n {
            let (counts, gain) = codec.encode(position, &mut rng).unwrap();
            assert!((codec.gain_low..codec.gain_high).contains(&gain));
            sum_counts += &counts;
            sum_expected += &codec.mean_rates(position, gain);
        }
        for i in 0..codec.n_units {
            let mean = sum_counts[i] / n as f64;
            let expect = sum_expected[i] / n as f64;
            // Poisson s.e. ~= sqrt(rate / n); allow 5 s.e. plus slack for
            // tiny rates.
            let se = (expect.max(1e-6) / n as f64).sqrt();
            assert!(
                (mean - expect).abs() <= 5.0 * se + 1e-4,
                "unit {i}: empirical {mean} vs expected {expect}"
            );
        }
    }

    #[test]
    fn lds_batches_are_pure_functions_of_their_indices() {
        let world = LdsWorld::default();
        let codec = PpcCodec::default();
        let mut src = LdsSource { world, codec, seed: 42 };
        let a = src.batch(3, 2, 50).unwrap();
        let b = src.batch(3, 2, 50).unwrap();
        let c = src.batch(4, 2, 50).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
        assert_ne!(a[0], c[0]);
        assert_ne!(a[0], a[1], "distinct trajectories in one batch");
        assert_eq!(a[0].dim(), (50, 15));
        // Dataset generation replays source batch 0.
        let ds = generate_lds_dataset(&src.world, &src.codec, 42, 2, 50).unwrap();
        let batch0 = src.batch(0, 2, 50).unwrap();
        assert_eq!(ds.counts[0], batch0[0]);
        assert_eq!(ds.counts[1], batch0[1]);
        assert_eq!(ds.latents[0].dim(), (50, 3));
    }

    #[test]
    fn balls_start_separated_and_conserve_kinetic_energy() {
        let world = BounceWorld::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let states = world.simulate(400, &mut rng).unwrap();
        let first = &states[0];
        for i in 0..world.n_balls {
            for j in i + 1..world.n_balls {
                let dx = first[[i, 0]] - first[[j, 0]];
                let dy = first[[i, 1]] - first[[j, 1]];
                assert!(
                    (dx * dx + dy * dy).sqrt() >= 2.0 * world.radius,
                    "initial placement overlaps"
                );
            }
        }
        let ke = |st: &Array2<f64>| -> f64 {
            (0..world.n_balls).map(|b| st[[b, 2]].powi(2) + st[[b, 3]].powi(2)).sum()
        };
        let e0 = ke(first);
        for (t, st) in states.iter().enumerate() {
            let e = ke(st);
            assert!(
                (e - e0).abs() <= 1e-9 * e0,
                "kinetic energy drifted at frame {t}: {e0} -> {e}"
            );
            for b in 0..world.n_balls {
                let x = st[[b, 0]];
                let y = st[[b, 1]];
                assert!(x >= world.radius && x <= world.frame_size as f64 - world.radius);
                assert!(y >= world.radius && y <= world.frame_size as f64 - world.radius);
            }
        }
    }

    #[test]
    fn collisions_exchange_velocity_along_the_line_of_centers() {
        let world = BounceWorld { n_balls: 2, ..BounceWorld::default() };
        // Head-on along x: velocities must swap exactly.
        let mut states = ndarray::arr2(&[
            [10.0, 15.0, 0.5, 0.0],
            [14.2, 15.0, -0.5, 0.0],
        ]);
        world.step(&mut states);
        // After moving: 10.5 and 13.7, gap 3.2 < 4 and approaching.
        assert_abs_diff_eq!(states[[0, 2]], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(states[[1, 2]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(states[[0, 3]], 0.0, epsilon = 0.0);

        // Grazing pass with purely tangential motion: no exchange.
        let mut states = ndarray::arr2(&[
            [10.0, 15.0, 0.0, 0.4],
            [13.0, 15.0, 0.0, 0.4],
        ]);
        world.step(&mut states);
        assert_abs_diff_eq!(states[[0, 3]], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(states[[1, 3]], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn wall_reflection_mirrors_position_and_velocity() {
        let world = BounceWorld { n_balls: 1, ..BounceWorld::default() };
        let mut states = ndarray::arr2(&[[2.3, 15.0, -0.9, 0.0]]);
        world.step(&mut states);
        // 2.3 - 0.9 = 1.4 < radius 2 -> reflect to 2*2 - 1.4 = 2.6.
        assert_abs_diff_eq!(states[[0, 0]], 2.6, epsilon = 1e-12);
        assert_abs_diff_eq!(states[[0, 2]], 0.9, epsilon = 1e-12);
    }

    #[test]
    fn rasterized_frames_are_binary_with_disk_sized_support() {
        let world = BounceWorld { n_balls: 1, ..BounceWorld::default() };
        for &(cx, cy) in &[(15.0, 15.0), (7.3, 22.8), (2.0, 2.0), (15.5, 15.5)] {
            let states = ndarray::arr2(&[[cx, cy, 0.0, 0.0]]);
            let frame = world.rasterize(&states);
            let on: f64 = frame.sum();
            assert!(
                (9.0..=15.0).contains(&on),
                "disk of radius 2 should light 9-15 pixels, got {on} at ({cx},{cy})"
            );
            assert!(frame.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        // A pixel center exactly on the rim counts as covered.
        let states = ndarray::arr2(&[[15.5, 13.5, 0.0, 0.0]]);
        let frame = world.rasterize(&states);
        assert_eq!(frame[[15, 15]], 1.0, "center two pixels below is at distance 2.0");
    }

    #[test]
    fn movie_source_is_deterministic_and_flattens_row_major() {
        let world = BounceWorld::default();
        let mut src = BounceSource { world: world.clone(), seed: 5 };
        let a = src.batch(1, 2, 20).unwrap();
        let b = src.batch(1, 2, 20).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[0].dim(), (20, 900));
        let frame = frame_from_row(&a[0].row(0), 30).unwrap();
        // Row-major flattening: entry 30*r + c equals frame[[r, c]].
        for r in [0usize, 7, 29] {
            for c in [0usize, 13, 29] {
                assert_eq!(a[0][[0, 30 * r + c]], frame[[r, c]]);
            }
        }
        let total_on: f64 = a[0].sum();
        assert!(total_on > 0.0, "movies should not be empty");
    }

    #[test]
    fn placement_failure_surfaces_as_an_error() {
        let world = BounceWorld {
            frame_size: 12,
            n_balls: 4,
            radius: 2.9,
            placement_retries: 8,
            ..BounceWorld::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        match world.simulate(5, &mut rng) {
            Err(Error::RetriesExhausted(_)) | Err(Error::InvalidArgument(_)) => {}
            other => panic!("expected placement failure, got {other:?}"),
        }
    }
}
