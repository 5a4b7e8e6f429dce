//! Finite-volume solver for du/dt + d/dx(alpha u^2 - beta du/dx) = delta.
//!
//! Periodic uniform grid, conservative interface fluxes (local
//! Lax-Friedrichs for the u^2 term, central difference for diffusion),
//! classical RK4 in time with per-interval substepping under an advective
//! CFL of 0.4 and an explicit diffusive limit. All arithmetic in f64.

use super::{uniform_grid, uniform_times, ForcingTerm, PdeParams, Trajectory};
use crate::error::{Error, Result};

/// Advective CFL bound on the substep.
const CFL: f64 = 0.4;
/// Diffusive substep bound: h <= DIFF_LIMIT * dx^2 / beta.
const DIFF_LIMIT: f64 = 0.2;
/// Extra substeps beyond the limits, absorbing in-interval growth of the
/// wave speed.
const SAFETY: f64 = 1.25;
/// Magnitudes past this count as blowup.
const BLOWUP: f64 = 1e6;

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub n_x: usize,
    pub n_t: usize,
    pub t_end: f64,
    /// Fixed substep count per output interval, replacing the adaptive
    /// choice (used by convergence checks).
    pub substeps_override: Option<usize>,
    /// Replaces the default initial condition u(0,x) = forcing(0,x).
    pub initial: Option<Vec<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            n_x: super::BASE_NX,
            n_t: super::BASE_NT,
            t_end: super::T_END,
            substeps_override: None,
            initial: None,
        }
    }
}

/// Interface fluxes and source, written into `du`.
fn rhs(
    params: &PdeParams,
    forcing: &ForcingTerm,
    grid: &[f64],
    dx: f64,
    t: f64,
    u: &[f64],
    flux: &mut [f64],
    du: &mut [f64],
) {
    let n = u.len();
    let alpha = params.alpha;
    let beta = params.beta_pde;
    for i in 0..n {
        let ip = if i + 1 == n { 0 } else { i + 1 };
        let (ul, ur) = (u[i], u[ip]);
        // Local Lax-Friedrichs: average flux plus dissipation scaled by the
        // larger wave speed |d(alpha u^2)/du| = 2|alpha u|.
        let a = 2.0 * alpha.abs() * ul.abs().max(ur.abs());
        let adv = 0.5 * alpha * (ul * ul + ur * ur) - 0.5 * a * (ur - ul);
        let dif = -beta * (ur - ul) / dx;
        flux[i] = adv + dif;
    }
    for i in 0..n {
        let im = if i == 0 { n - 1 } else { i - 1 };
        du[i] = -(flux[i] - flux[im]) / dx + forcing.eval(t, grid[i]);
    }
}

fn max_wave_speed(alpha: f64, u: &[f64]) -> f64 {
    2.0 * alpha.abs() * u.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// Integrates the PDE and samples the field at `n_t` uniform times over
/// [0, t_end]. Fails with the offending time on NaN or blowup.
pub fn solve_trajectory(
    params: PdeParams,
    forcing: ForcingTerm,
    seed: u64,
    opts: &SolveOptions,
) -> Result<Trajectory> {
    if params.gamma != 0.0 {
        return Err(Error::invalid(
            "dispersion term not implemented: gamma must be 0",
        ));
    }
    if opts.n_x < 4 || opts.n_t < 2 {
        return Err(Error::invalid("solver needs n_x >= 4 and n_t >= 2"));
    }
    let length = forcing.length;
    let n = opts.n_x;
    let dx = length / n as f64;
    let grid = uniform_grid(n, length);
    let times = uniform_times(opts.n_t, opts.t_end);

    let mut u: Vec<f64> = match &opts.initial {
        Some(init) => {
            if init.len() != n {
                return Err(Error::invalid(format!(
                    "initial condition has {} values for {} cells",
                    init.len(),
                    n
                )));
            }
            init.clone()
        }
        None => grid.iter().map(|&x| forcing.eval(0.0, x)).collect(),
    };

    let mut out = Vec::with_capacity(opts.n_t * n);
    out.extend_from_slice(&u);

    let mut flux = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];

    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let dt = t1 - t0;
        let n_sub = match opts.substeps_override {
            Some(s) => s.max(1),
            None => {
                let h_adv = {
                    let a = max_wave_speed(params.alpha, &u);
                    if a > 0.0 {
                        CFL * dx / a
                    } else {
                        f64::INFINITY
                    }
                };
                let h_diff = if params.beta_pde > 0.0 {
                    DIFF_LIMIT * dx * dx / params.beta_pde
                } else {
                    f64::INFINITY
                };
                let h_lim = h_adv.min(h_diff);
                if h_lim.is_finite() {
                    (SAFETY * dt / h_lim).ceil().max(1.0) as usize
                } else {
                    1
                }
            }
        };
        let h = dt / n_sub as f64;
        for s in 0..n_sub {
            let t = t0 + s as f64 * h;
            rhs(&params, &forcing, &grid, dx, t, &u, &mut flux, &mut k1);
            for i in 0..n {
                stage[i] = u[i] + 0.5 * h * k1[i];
            }
            rhs(&params, &forcing, &grid, dx, t + 0.5 * h, &stage, &mut flux, &mut k2);
            for i in 0..n {
                stage[i] = u[i] + 0.5 * h * k2[i];
            }
            rhs(&params, &forcing, &grid, dx, t + 0.5 * h, &stage, &mut flux, &mut k3);
            for i in 0..n {
                stage[i] = u[i] + h * k3[i];
            }
            rhs(&params, &forcing, &grid, dx, t + h, &stage, &mut flux, &mut k4);
            for i in 0..n {
                u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        if u.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
            return Err(Error::SolverDiverged { t: t1 });
        }
        out.extend_from_slice(&u);
    }

    Ok(Trajectory {
        seed,
        params,
        forcing,
        length,
        t_end: opts.t_end,
        n_x: n,
        n_t: opts.n_t,
        grid,
        times,
        u: out,
    })
}
