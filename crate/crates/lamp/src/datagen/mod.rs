//! Ground-truth trajectories for the 1D periodic conservation law
//! du/dt + d/dx(alpha u^2 - eta du/dx) = delta(t, x), plus the dataset
//! persistence layer.

mod format;
mod solver;

pub use format::{read_dataset, write_dataset};
pub use solver::{solve_trajectory, SolveOptions};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

/// Spatial extent of the periodic domain.
pub const DOMAIN_LENGTH: f64 = 16.0;
/// Native solver grid resolution.
pub const BASE_NX: usize = 200;
/// Output frames per trajectory.
pub const BASE_NT: usize = 250;
/// Final output time.
pub const T_END: f64 = 4.0;
/// Forcing terms per trajectory.
pub const FORCING_TERMS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeParams {
    /// Advection coefficient on u^2.
    pub alpha: f64,
    /// Diffusion coefficient (the PDE's own beta, unrelated to the
    /// error/compute tradeoff knob).
    pub beta_pde: f64,
    /// Dispersion coefficient; must be 0, the term is not implemented.
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcingMode {
    pub amplitude: f64,
    pub omega: f64,
    /// Integer spatial mode, 1..=3.
    pub mode: u32,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcingTerm {
    pub length: f64,
    pub terms: Vec<ForcingMode>,
}

impl ForcingTerm {
    /// Zero forcing (used by solver oracles).
    pub fn zero() -> Self {
        ForcingTerm {
            length: DOMAIN_LENGTH,
            terms: Vec::new(),
        }
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let mut acc = 0.0;
        for m in &self.terms {
            acc += m.amplitude
                * (m.omega * t
                    + 2.0 * std::f64::consts::PI * m.mode as f64 * x / self.length
                    + m.phase)
                    .sin();
        }
        acc
    }
}

/// Draws the five-term forcing: per term, amplitude U[-0.5,0.5], temporal
/// frequency U[-0.4,0.4], integer mode U{1,2,3}, phase U[0,2pi), in that
/// order.
pub fn sample_forcing<R: Rng>(rng: &mut R) -> ForcingTerm {
    let mut terms = Vec::with_capacity(FORCING_TERMS);
    for _ in 0..FORCING_TERMS {
        terms.push(ForcingMode {
            amplitude: rng.gen_range(-0.5..0.5),
            omega: rng.gen_range(-0.4..0.4),
            mode: rng.gen_range(1..=3),
            phase: rng.gen_range(0.0..2.0 * std::f64::consts::PI),
        });
    }
    ForcingTerm {
        length: DOMAIN_LENGTH,
        terms,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub params: PdeParams,
    pub forcing: ForcingTerm,
    pub length: f64,
    pub t_end: f64,
    pub n_x: usize,
    pub n_t: usize,
    /// Grid positions, i * length / n_x.
    pub grid: Vec<f64>,
    /// Output times, uniform over [0, t_end] inclusive.
    pub times: Vec<f64>,
    /// Field values, row-major [n_t][n_x]. Kept in f64; files store f32.
    pub u: Vec<f64>,
}

impl Trajectory {
    pub fn frame(&self, k: usize) -> &[f64] {
        &self.u[k * self.n_x..(k + 1) * self.n_x]
    }

    pub fn spatial_mean(&self, k: usize) -> f64 {
        self.frame(k).iter().sum::<f64>() / self.n_x as f64
    }
}

pub(crate) fn uniform_grid(n_x: usize, length: f64) -> Vec<f64> {
    (0..n_x).map(|i| i as f64 * length / n_x as f64).collect()
}

pub(crate) fn uniform_times(n_t: usize, t_end: f64) -> Vec<f64> {
    (0..n_t)
        .map(|k| k as f64 * t_end / (n_t - 1) as f64)
        .collect()
}

/// Keeps every (n_x / n_x_target)-th column starting at column 0. Times are
/// unchanged.
pub fn downsample(traj: &Trajectory, n_x_target: usize) -> Result<Trajectory> {
    if n_x_target == 0 || traj.n_x % n_x_target != 0 {
        return Err(Error::invalid(format!(
            "downsample: {} does not divide {}",
            n_x_target, traj.n_x
        )));
    }
    let stride = traj.n_x / n_x_target;
    let mut u = Vec::with_capacity(traj.n_t * n_x_target);
    for k in 0..traj.n_t {
        let frame = traj.frame(k);
        for i in 0..n_x_target {
            u.push(frame[i * stride]);
        }
    }
    Ok(Trajectory {
        seed: traj.seed,
        params: traj.params,
        forcing: traj.forcing.clone(),
        length: traj.length,
        t_end: traj.t_end,
        n_x: n_x_target,
        n_t: traj.n_t,
        grid: traj.grid.iter().step_by(stride).copied().collect(),
        times: traj.times.clone(),
        u,
    })
}

/// Per-trajectory RNG: one ChaCha stream per index under the master seed,
/// so any single trajectory regenerates identically in isolation.
pub fn trajectory_rng(master_seed: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Generates `count` trajectories: per trajectory, draw eta U[0,0.2], then
/// the forcing, then solve with alpha=1, gamma=0.
pub fn generate_trajectories(master_seed: u64, count: usize) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = trajectory_rng(master_seed, index as u64);
        let eta = rng.gen_range(0.0..0.2);
        let forcing = sample_forcing(&mut rng);
        let params = PdeParams {
            alpha: 1.0,
            beta_pde: eta,
            gamma: 0.0,
        };
        // The stored seed is the stream index under the master seed.
        out.push(solve_trajectory(
            params,
            forcing,
            index as u64,
            &SolveOptions::default(),
        )?);
    }
    Ok(out)
}
