//! Synthetic linear-reward environment.
//!
//! All randomness is counter-based: every draw is derived from
//! `(seed, stream, step)`, so arm sets and noise for a given step do not
//! depend on how many other draws happened before.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, RealVector, SufficientStats};

/// Independent random streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Theta = 1,
    Arms = 2,
    Noise = 3,
    Arrival = 4,
    Costs = 5,
    Population = 6,
    Oracle = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for draw number `counter` of `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64((stream as u64) ^ splitmix64(counter)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Uniform draw from the sphere of the given radius.
pub fn sample_sphere<R: Rng>(rng: &mut R, dim: usize, radius: f64) -> RealVector {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return RealVector::new(g.into_iter().map(|v| radius * v / n).collect());
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Environment {
    theta_star: RealVector,
    arms_per_step: usize,
    noise_sigma: f64,
    arm_norm_bound: f64,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepObservation {
    pub chosen_arm: RealVector,
    pub reward: f64,
    pub instant_regret: f64,
}

impl Environment {
    /// Samples θ* uniformly from the unit sphere using `seed`.
    pub fn new(
        dim: usize,
        arms_per_step: usize,
        noise_sigma: f64,
        arm_norm_bound: f64,
        seed: u64,
    ) -> Self {
        let theta = sample_sphere(&mut stream_rng(seed, Stream::Theta, 0), dim, 1.0);
        Self::with_theta(theta, arms_per_step, noise_sigma, arm_norm_bound, seed)
    }

    /// Uses a caller-supplied parameter; it is normalized to unit length.
    pub fn with_theta(
        theta: RealVector,
        arms_per_step: usize,
        noise_sigma: f64,
        arm_norm_bound: f64,
        seed: u64,
    ) -> Self {
        let n = theta.norm();
        let theta_star = RealVector::new(theta.as_slice().iter().map(|v| v / n).collect());
        Environment {
            theta_star,
            arms_per_step,
            noise_sigma,
            arm_norm_bound,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_star.dim()
    }

    pub fn theta_star(&self) -> &RealVector {
        &self.theta_star
    }

    pub fn arms_per_step(&self) -> usize {
        self.arms_per_step
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn arm_norm_bound(&self) -> f64 {
        self.arm_norm_bound
    }

    pub fn generate_arm_set(&self, t: u64) -> Vec<RealVector> {
        let mut rng = stream_rng(self.seed, Stream::Arms, t);
        (0..self.arms_per_step)
            .map(|_| sample_sphere(&mut rng, self.dim(), self.arm_norm_bound))
            .collect()
    }

    fn noise(&self, t: u64) -> f64 {
        if self.noise_sigma == 0.0 {
            return 0.0;
        }
        let z: f64 = stream_rng(self.seed, Stream::Noise, t).sample(StandardNormal);
        self.noise_sigma * z
    }

    /// Pulls `arms[index]` at step `t`, where `arms` is that step's arm set.
    pub fn observe(&self, arms: &[RealVector], index: usize, t: u64) -> Result<StepObservation> {
        let chosen = arms.get(index).ok_or(Error::ArmNotInSet { step: t })?;
        let mean = self.theta_star.dot(chosen);
        let best = arms
            .iter()
            .map(|x| self.theta_star.dot(x))
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(StepObservation {
            chosen_arm: chosen.clone(),
            reward: mean + self.noise(t),
            instant_regret: (best - mean).max(0.0),
        })
    }

    /// Pulls `arm`, which must be a member of the arm set for step `t`.
    pub fn pull(&self, arm: &RealVector, t: u64) -> Result<StepObservation> {
        let arms = self.generate_arm_set(t);
        let index = arms
            .iter()
            .position(|x| x == arm)
            .ok_or(Error::ArmNotInSet { step: t })?;
        self.observe(&arms, index, t)
    }
}

/// LinUCB arm choice: `argmax xᵀθ̂ + α‖x‖_{(V+λI)⁻¹}` with
/// `α = σ·sqrt(log det(V+λI) − d·log λ + 2·log(1/δ)) + sqrt(λ)`.
/// Ties go to the lowest index.
pub fn select_arm_ucb(
    stats: &SufficientStats,
    arms: &[RealVector],
    ridge: f64,
    sigma: f64,
    delta: f64,
) -> Result<usize> {
    if arms.is_empty() {
        return Err(Error::EmptyArmSet);
    }
    let chol = Cholesky::factor(&stats.v, ridge)?;
    let theta_hat = chol.solve(&stats.b)?;
    let d = stats.dim() as f64;
    let log_ratio = chol.log_det() - d * ridge.ln();
    let alpha = sigma * (log_ratio + 2.0 * (1.0 / delta).ln()).max(0.0).sqrt() + ridge.sqrt();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, x) in arms.iter().enumerate() {
        let score = x.dot(&theta_hat) + alpha * chol.inverse_norm(x)?;
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}
