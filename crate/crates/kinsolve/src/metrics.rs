//! Quantitative instruments: the self-convergence metric between two mesh
//! resolutions, the L1-style difference metric against binned reference
//! data, moment tracking, and the closed-form / ODE moment oracles used to
//! cross-check solver output.

use crate::basis::{self, gauss_legendre};
use crate::error::{KinError, Result};
use crate::solver::Trajectory;
use crate::stochastic::EnsembleOutput;
use crate::system::KineticSystem;
use crate::tensor::{make_bases, CoefficientSet};

/// A named scalar result with enough context to interpret it.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub inputs: String,
}

/// Per-subsystem moment series along a trajectory.
#[derive(Debug, Clone)]
pub struct MomentSeries {
    pub times: Vec<f64>,
    /// `m1[i][k]`: first moment of subsystem i at sample k.
    pub m1: Vec<Vec<f64>>,
    pub m2: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    /// Subsystem masses (zeroth moments) per sample.
    pub mass: Vec<Vec<f64>>,
}

fn check_times(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9) {
        return Err(KinError::MetricInput(
            "trajectories do not share sample times".into(),
        ));
    }
    Ok(())
}

/// Max-over-time L1 distance between the interpolants of two runs of the
/// same system at resolutions N and 2N, both evaluated on the coarse run's
/// Gauss-Legendre nodes and integrated with those weights.
pub fn self_convergence(
    traj_coarse: &Trajectory,
    traj_fine: &Trajectory,
    sys: &KineticSystem,
) -> Result<f64> {
    self_convergence_with_order(traj_coarse, traj_fine, sys, traj_coarse.degree + 1)
}

/// Same metric with an explicit quadrature order (used by the dense-grid
/// cross-check).
pub fn self_convergence_with_order(
    traj_coarse: &Trajectory,
    traj_fine: &Trajectory,
    sys: &KineticSystem,
    order: usize,
) -> Result<f64> {
    check_times(&traj_coarse.sample_times, &traj_fine.sample_times)?;
    let bases_coarse = make_bases(sys, traj_coarse.degree);
    let bases_fine = make_bases(sys, traj_fine.degree);
    let rules: Vec<_> = sys
        .subsystems
        .iter()
        .map(|s| gauss_legendre(order, s.domain.lo, s.domain.hi))
        .collect::<Result<_>>()?;

    let mut worst: f64 = 0.0;
    for (k, _) in traj_coarse.sample_times.iter().enumerate() {
        let mut total = 0.0;
        for i in 0..sys.n_subsystems() {
            let ac = &traj_coarse.states[k].a[i];
            let af = &traj_fine.states[k].a[i];
            total += rules[i].integrate(|u| {
                (basis::eval_interpolant(&bases_fine[i], af, u)
                    - basis::eval_interpolant(&bases_coarse[i], ac, u))
                .abs()
            });
        }
        worst = worst.max(total);
    }
    Ok(worst)
}

/// Max-over-time L1 distance between a collocation trajectory evaluated at
/// the bin centers and a binned ensemble average, with the bin width as the
/// integration measure (so the value is stable under bin-count changes).
pub fn difference_metric(
    traj: &Trajectory,
    sys: &KineticSystem,
    binned: &EnsembleOutput,
) -> Result<f64> {
    check_times(&traj.sample_times, &binned.sample_times)?;
    if binned.bin_centers.len() != sys.n_subsystems() {
        return Err(KinError::MetricInput(
            "binned data subsystem count differs from system".into(),
        ));
    }
    let bases = make_bases(sys, traj.degree);
    for (i, s) in sys.subsystems.iter().enumerate() {
        for &u in &binned.bin_centers[i] {
            if !s.domain.contains(u) {
                return Err(KinError::MetricInput(format!(
                    "bin center {u} outside domain of subsystem {i}"
                )));
            }
        }
    }

    let mut worst: f64 = 0.0;
    for k in 0..traj.sample_times.len() {
        let mut total = 0.0;
        for i in 0..sys.n_subsystems() {
            let du = binned.bin_width[i];
            let a = &traj.states[k].a[i];
            for (j, &u) in binned.bin_centers[i].iter().enumerate() {
                let f_solver = basis::eval_interpolant(&bases[i], a, u);
                total += (f_solver - binned.density(k, i, j)).abs() * du;
            }
        }
        worst = worst.max(total);
    }
    Ok(worst)
}

/// L1 distance between two binned series on the same grid, max over time
/// (used to compare binned references against each other).
pub fn binned_difference(a: &EnsembleOutput, b: &EnsembleOutput) -> Result<f64> {
    check_times(&a.sample_times, &b.sample_times)?;
    let mut worst: f64 = 0.0;
    for k in 0..a.sample_times.len() {
        let mut total = 0.0;
        for i in 0..a.bin_centers.len() {
            for j in 0..a.bin_centers[i].len() {
                total += (a.density(k, i, j) - b.density(k, i, j)).abs() * a.bin_width[i];
            }
        }
        worst = worst.max(total);
    }
    Ok(worst)
}

/// First and second moments (plus variance and mass) along a trajectory,
/// integrated by Gauss-Legendre of order N + 2.
pub fn moments(traj: &Trajectory, sys: &KineticSystem) -> Result<MomentSeries> {
    let bases = make_bases(sys, traj.degree);
    let order = traj.degree + 2;
    let rules: Vec<_> = sys
        .subsystems
        .iter()
        .map(|s| gauss_legendre(order, s.domain.lo, s.domain.hi))
        .collect::<Result<_>>()?;

    let n = sys.n_subsystems();
    let mut series = MomentSeries {
        times: traj.sample_times.clone(),
        m1: vec![Vec::new(); n],
        m2: vec![Vec::new(); n],
        var: vec![Vec::new(); n],
        mass: vec![Vec::new(); n],
    };
    for state in &traj.states {
        for i in 0..n {
            let a = &state.a[i];
            let mut m0 = 0.0;
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for (&u, &w) in rules[i].nodes.iter().zip(&rules[i].weights) {
                let f = basis::eval_interpolant(&bases[i], a, u);
                m0 += w * f;
                m1 += w * u * f;
                m2 += w * u * u * f;
            }
            series.mass[i].push(m0);
            series.m1[i].push(m1);
            series.m2[i].push(m2);
            series.var[i].push(m2 - m1 * m1);
        }
    }
    Ok(series)
}

/// Discrete mass per sample time.
pub fn mass_series(traj: &Trajectory, cs: &CoefficientSet) -> Vec<f64> {
    traj.states
        .iter()
        .map(|s| crate::solver::discrete_mass(s, cs))
        .collect()
}

/// Transition family selector for the moment oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleFamily {
    Left,
    Right,
    Toward,
}

/// Predicted first moment of the single-subsystem self-interacting equation
/// with unit mass, per family:
///
/// - `Left`:  `m1' = -gamma m1^2`, closed form `m1_0 / (1 + gamma m1_0 t)`;
/// - `Right`: mirrored closed form `1 - (1 - m1_0) / (1 + gamma (1 - m1_0) t)`;
/// - `Toward`: `m1' = -gamma |m1 - a| (m1 - a)` integrated by RK4 at
///   `dt = 1e-3` (the signed form attracts the mean to `a` from either side;
///   the one-sided quadratic is its `m1 > a` restriction).
///
/// The threshold `a` is ignored for `Left`/`Right`.
pub fn moment_oracle(
    family: OracleFamily,
    gamma: f64,
    a: f64,
    m1_0: f64,
    t_grid: &[f64],
) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(KinError::Parameter("gamma must be positive".into()));
    }
    match family {
        OracleFamily::Left => Ok(t_grid
            .iter()
            .map(|&t| m1_0 / (1.0 + gamma * m1_0 * t))
            .collect()),
        OracleFamily::Right => Ok(t_grid
            .iter()
            .map(|&t| {
                let c = 1.0 - m1_0;
                1.0 - c / (1.0 + gamma * c * t)
            })
            .collect()),
        OracleFamily::Toward => {
            let f = |m: f64| -gamma * (m - a).abs() * (m - a);
            Ok(integrate_scalar_ode(f, m1_0, t_grid))
        }
    }
}

/// Left/right component first moments for the repelling threshold family:
/// `m1_L' = -gamma m1_L^2`, `m1_R' = gamma (1 - m1_R)^2`, integrated by RK4
/// at `dt = 1e-3`. Advisory only: the component equations drop coupling
/// terms of the full dynamics.
pub fn away_from_moment_oracle(
    gamma: f64,
    m1_left0: f64,
    m1_right0: f64,
    t_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if !(gamma > 0.0) {
        return Err(KinError::Parameter("gamma must be positive".into()));
    }
    let left = integrate_scalar_ode(|m| -gamma * m * m, m1_left0, t_grid);
    let right = integrate_scalar_ode(|m| gamma * (1.0 - m) * (1.0 - m), m1_right0, t_grid);
    Ok(left.into_iter().zip(right).collect())
}

/// Fixed-step RK4 for an autonomous scalar ODE, reporting at `t_grid`
/// (assumed ascending, starting at >= 0).
fn integrate_scalar_ode<F: Fn(f64) -> f64>(f: F, y0: f64, t_grid: &[f64]) -> Vec<f64> {
    const DT: f64 = 1e-3;
    let mut out = Vec::with_capacity(t_grid.len());
    let mut t = 0.0;
    let mut y = y0;
    for &target in t_grid {
        while t < target - 1e-12 {
            let h = DT.min(target - t);
            let k1 = f(y);
            let k2 = f(y + 0.5 * h * k1);
            let k3 = f(y + 0.5 * h * k2);
            let k4 = f(y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += h;
        }
        out.push(y);
    }
    out
}
