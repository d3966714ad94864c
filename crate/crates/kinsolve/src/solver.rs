//! Time integration of the collocation coefficient system.
//!
//! The coefficient ODE for subsystem i at node j is
//!
//! ```text
//! a'[i][j] = gain[i][j] - C * a[i][j] * loss_rate[i][j]
//! ```
//!
//! with `gain` assembled from the per-rule tensors and `loss_rate` from the
//! loss block. In corrected mode the scalar `C` is the ratio of the
//! weight-quadratures of gain and loss, recomputed inside every stage
//! evaluation; it makes the time derivative of the discrete mass functional
//! `M = sum a[i][j] w[i][j]` identically zero, so the only residual drift is
//! integrator roundoff. Naive mode fixes `C = 1` and drifts.
//!
//! Coefficients are never clipped: small negative interpolant values are
//! reported through diagnostics instead, because any clipping would break
//! the exact conservation identity.

use crate::basis::{self, CollocationBasis};
use crate::error::{KinError, Result};
use crate::system::{eval_initial, validated, KineticSystem};
use crate::tensor::{gain_index, loss_index, CoefficientSet};

/// Which right-hand side to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    /// Corrected scheme: exact discrete mass conservation.
    Mpcm,
    /// Uncorrected scheme (C = 1); kept for failure-mode comparisons.
    Naive,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub dt: f64,
    pub t_final: f64,
    pub mode: SolverMode,
    /// Snapshot cadence in steps; the final state is always snapshotted.
    pub sample_every: usize,
}

impl SolverConfig {
    pub fn new(dt: f64, t_final: f64, mode: SolverMode, sample_every: usize) -> Result<Self> {
        if !(dt > 0.0) || !(t_final > 0.0) || dt > t_final {
            return Err(KinError::Parameter(format!(
                "need 0 < dt <= t_final, got dt = {dt}, t_final = {t_final}"
            )));
        }
        if sample_every == 0 {
            return Err(KinError::Parameter("sample_every must be >= 1".into()));
        }
        Ok(SolverConfig {
            dt,
            t_final,
            mode,
            sample_every,
        })
    }
}

/// Coefficient values `a[i][j]` (density at node j of subsystem i) at time t.
#[derive(Debug, Clone)]
pub struct CoefficientState {
    pub t: f64,
    pub a: Vec<Vec<f64>>,
}

/// Per-snapshot scalar diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct SampleDiagnostics {
    pub mass: f64,
    pub correction: f64,
    pub min_coefficient: f64,
}

/// Snapshots of one integration, with aligned diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub degree: usize,
    pub sample_times: Vec<f64>,
    pub states: Vec<CoefficientState>,
    pub diagnostics: Vec<SampleDiagnostics>,
}

impl Trajectory {
    pub fn final_state(&self) -> &CoefficientState {
        self.states.last().expect("trajectory has at least t = 0")
    }
}

/// Discrete mass functional `sum_{i,j} a[i][j] w[i][j]`.
pub fn discrete_mass(state: &CoefficientState, cs: &CoefficientSet) -> f64 {
    state
        .a
        .iter()
        .zip(&cs.weights)
        .map(|(ai, wi)| ai.iter().zip(wi).map(|(a, w)| a * w).sum::<f64>())
        .sum()
}

/// Gain and loss assembly shared by the correction factor and the rhs.
struct Assembly {
    gain: Vec<f64>,
    loss_rate: Vec<f64>,
    /// Weight-quadrature of the gain (numerator of C).
    gain_quad: f64,
    /// Weight-quadrature of the loss (denominator of C).
    loss_quad: f64,
}

/// How the gain contraction of one rule is evaluated. Subsystems that no
/// rule targets or drains are constant in time, so their side of the tensor
/// can be contracted once at integration start.
enum GainStrategy {
    Full,
    /// `R[j][p] = sum_q T[j][p][q] a_partner[q]` for a constant partner.
    PartnerStatic(Vec<f64>),
    /// `S[j][q] = sum_p T[j][p][q] a_source[p]` for a constant source.
    SourceStatic(Vec<f64>),
    /// Both sides constant.
    BothStatic(Vec<f64>),
}

/// Reusable evaluation engine over flat state vectors.
struct Engine<'a> {
    cs: &'a CoefficientSet,
    np1: usize,
    n: usize,
    strategies: Vec<GainStrategy>,
}

impl<'a> Engine<'a> {
    fn new(cs: &'a CoefficientSet) -> Self {
        let np1 = cs.meta.degree + 1;
        Engine {
            cs,
            np1,
            n: cs.n_subsystems,
            strategies: cs.rules.iter().map(|_| GainStrategy::Full).collect(),
        }
    }

    /// Precontract tensor sides touching subsystems that stay constant for
    /// the whole integration (no gain target, no loss source).
    fn with_static_contractions(cs: &'a CoefficientSet, initial: &[f64]) -> Self {
        let np1 = cs.meta.degree + 1;
        let mut dynamic = vec![false; cs.n_subsystems];
        for r in &cs.rules {
            dynamic[r.target] = true;
            dynamic[r.source] = true;
        }
        let strategies = cs
            .rules
            .iter()
            .zip(&cs.gain)
            .map(|(r, tensor)| {
                let src_static = !dynamic[r.source];
                let par_static = !dynamic[r.partner];
                let a_src = &initial[r.source * np1..(r.source + 1) * np1];
                let a_par = &initial[r.partner * np1..(r.partner + 1) * np1];
                if src_static && par_static {
                    let mut v = vec![0.0; np1];
                    for j in 0..np1 {
                        let mut s = 0.0;
                        for p in 0..np1 {
                            let row = &tensor[gain_index(np1, j, p, 0)..gain_index(np1, j, p, 0) + np1];
                            s += a_src[p] * dot(row, a_par);
                        }
                        v[j] = s;
                    }
                    GainStrategy::BothStatic(v)
                } else if par_static {
                    let mut r2 = vec![0.0; np1 * np1];
                    for j in 0..np1 {
                        for p in 0..np1 {
                            let row = &tensor[gain_index(np1, j, p, 0)..gain_index(np1, j, p, 0) + np1];
                            r2[j * np1 + p] = dot(row, a_par);
                        }
                    }
                    GainStrategy::PartnerStatic(r2)
                } else if src_static {
                    let mut s2 = vec![0.0; np1 * np1];
                    for j in 0..np1 {
                        for q in 0..np1 {
                            let mut s = 0.0;
                            for p in 0..np1 {
                                s += a_src[p] * tensor[gain_index(np1, j, p, q)];
                            }
                            s2[j * np1 + q] = s;
                        }
                    }
                    GainStrategy::SourceStatic(s2)
                } else {
                    GainStrategy::Full
                }
            })
            .collect();
        Engine {
            cs,
            np1,
            n: cs.n_subsystems,
            strategies,
        }
    }

    fn assemble(&self, state: &[f64], out: &mut Assembly) {
        let np1 = self.np1;
        out.gain.iter_mut().for_each(|v| *v = 0.0);
        out.loss_rate.iter_mut().for_each(|v| *v = 0.0);

        for ((rule, tensor), strategy) in self
            .cs
            .rules
            .iter()
            .zip(&self.cs.gain)
            .zip(&self.strategies)
        {
            let a_src = &state[rule.source * np1..(rule.source + 1) * np1];
            let a_par = &state[rule.partner * np1..(rule.partner + 1) * np1];
            let gain_t = &mut out.gain[rule.target * np1..(rule.target + 1) * np1];
            match strategy {
                GainStrategy::Full => {
                    for j in 0..np1 {
                        let block = &tensor[j * np1 * np1..(j + 1) * np1 * np1];
                        let mut s = 0.0;
                        for p in 0..np1 {
                            s += a_src[p] * dot(&block[p * np1..(p + 1) * np1], a_par);
                        }
                        gain_t[j] += s;
                    }
                }
                GainStrategy::PartnerStatic(r2) => {
                    for j in 0..np1 {
                        gain_t[j] += dot(&r2[j * np1..(j + 1) * np1], a_src);
                    }
                }
                GainStrategy::SourceStatic(s2) => {
                    for j in 0..np1 {
                        gain_t[j] += dot(&s2[j * np1..(j + 1) * np1], a_par);
                    }
                }
                GainStrategy::BothStatic(v) => {
                    for j in 0..np1 {
                        gain_t[j] += v[j];
                    }
                }
            }
        }

        for rule in &self.cs.rules {
            let i = rule.source;
            let l = rule.partner;
            let a_l = &state[l * np1..(l + 1) * np1];
            let loss_i = &mut out.loss_rate[i * np1..(i + 1) * np1];
            for j in 0..np1 {
                let base = loss_index(self.n, np1, i, j, l, 0);
                loss_i[j] += dot(&self.cs.loss[base..base + np1], a_l);
            }
        }

        let mut gain_quad = 0.0;
        let mut loss_quad = 0.0;
        for i in 0..self.n {
            let w = &self.cs.weights[i];
            let g = &out.gain[i * np1..(i + 1) * np1];
            let lr = &out.loss_rate[i * np1..(i + 1) * np1];
            let a = &state[i * np1..(i + 1) * np1];
            for j in 0..np1 {
                gain_quad += w[j] * g[j];
                loss_quad += a[j] * w[j] * lr[j];
            }
        }
        out.gain_quad = gain_quad;
        out.loss_quad = loss_quad;
    }

    /// Derivative into `deriv`; returns the correction factor used.
    fn rhs_into(
        &self,
        state: &[f64],
        mode: SolverMode,
        work: &mut Assembly,
        deriv: &mut [f64],
    ) -> Result<f64> {
        self.assemble(state, work);
        let c = match mode {
            SolverMode::Naive => 1.0,
            SolverMode::Mpcm => correction_from_quads(work.gain_quad, work.loss_quad)?,
        };
        for k in 0..deriv.len() {
            deriv[k] = work.gain[k] - c * state[k] * work.loss_rate[k];
        }
        Ok(c)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn correction_from_quads(gain_quad: f64, loss_quad: f64) -> Result<f64> {
    if loss_quad.abs() < 1e-14 {
        if gain_quad.abs() < 1e-14 {
            // No active interactions.
            Ok(1.0)
        } else {
            Err(KinError::Singular {
                gain: gain_quad,
                loss: loss_quad,
            })
        }
    } else {
        Ok(gain_quad / loss_quad)
    }
}

fn flatten(state: &CoefficientState, np1: usize) -> Vec<f64> {
    let mut flat = Vec::with_capacity(state.a.len() * np1);
    for ai in &state.a {
        flat.extend_from_slice(ai);
    }
    flat
}

fn unflatten(flat: &[f64], n: usize, np1: usize, t: f64) -> CoefficientState {
    CoefficientState {
        t,
        a: (0..n)
            .map(|i| flat[i * np1..(i + 1) * np1].to_vec())
            .collect(),
    }
}

/// The state-dependent correction factor (numerator/denominator of the mass
/// identity). Returns 1 for an inactive system; a vanishing loss quadrature
/// with active gain is singular.
pub fn correction_factor(state: &CoefficientState, cs: &CoefficientSet) -> Result<f64> {
    let engine = Engine::new(cs);
    let np1 = engine.np1;
    let flat = flatten(state, np1);
    let mut work = Assembly {
        gain: vec![0.0; engine.n * np1],
        loss_rate: vec![0.0; engine.n * np1],
        gain_quad: 0.0,
        loss_quad: 0.0,
    };
    engine.assemble(&flat, &mut work);
    correction_from_quads(work.gain_quad, work.loss_quad)
}

/// Time derivative of the coefficients at `state`.
pub fn rhs(state: &CoefficientState, cs: &CoefficientSet, mode: SolverMode) -> Result<Vec<Vec<f64>>> {
    let engine = Engine::new(cs);
    let np1 = engine.np1;
    let flat = flatten(state, np1);
    let mut work = Assembly {
        gain: vec![0.0; engine.n * np1],
        loss_rate: vec![0.0; engine.n * np1],
        gain_quad: 0.0,
        loss_quad: 0.0,
    };
    let mut deriv = vec![0.0; flat.len()];
    engine.rhs_into(&flat, mode, &mut work, &mut deriv)?;
    Ok(unflatten(&deriv, engine.n, np1, state.t).a)
}

/// Sample the initial condition at the collocation nodes.
pub fn initial_state(sys: &KineticSystem, bases: &[CollocationBasis]) -> CoefficientState {
    CoefficientState {
        t: 0.0,
        a: sys
            .subsystems
            .iter()
            .enumerate()
            .map(|(i, _)| bases[i].nodes.iter().map(|&x| eval_initial(sys, i, x)).collect())
            .collect(),
    }
}

/// Integrate the coefficient system with fixed-step classical RK4.
pub fn integrate(
    sys: &KineticSystem,
    cs: &CoefficientSet,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    validated(sys)?;
    if cs.meta.system_hash != sys.content_hash() {
        return Err(KinError::StaleCache(
            "coefficient set was computed for a different system".into(),
        ));
    }
    let bases = crate::tensor::make_bases(sys, cs.meta.degree);
    let np1 = cs.meta.degree + 1;
    let n = cs.n_subsystems;

    let state0 = initial_state(sys, &bases);
    let mut state = flatten(&state0, np1);
    let engine = Engine::with_static_contractions(cs, &state);

    let steps = (cfg.t_final / cfg.dt).round().max(1.0) as usize;
    let dt = cfg.dt;

    let mut work = Assembly {
        gain: vec![0.0; n * np1],
        loss_rate: vec![0.0; n * np1],
        gain_quad: 0.0,
        loss_quad: 0.0,
    };
    let mut k1 = vec![0.0; n * np1];
    let mut k2 = vec![0.0; n * np1];
    let mut k3 = vec![0.0; n * np1];
    let mut k4 = vec![0.0; n * np1];
    let mut stage = vec![0.0; n * np1];

    let mut traj = Trajectory {
        degree: cs.meta.degree,
        sample_times: Vec::new(),
        states: Vec::new(),
        diagnostics: Vec::new(),
    };

    let mut snapshot = |state: &[f64], t: f64, engine: &Engine, work: &mut Assembly| -> Result<()> {
        let cs_state = unflatten(state, n, np1, t);
        engine.assemble(state, work);
        let correction = match cfg.mode {
            SolverMode::Naive => 1.0,
            SolverMode::Mpcm => correction_from_quads(work.gain_quad, work.loss_quad)?,
        };
        let mass = discrete_mass(&cs_state, cs);
        let min_coefficient = state.iter().cloned().fold(f64::INFINITY, f64::min);
        traj.sample_times.push(t);
        traj.diagnostics.push(SampleDiagnostics {
            mass,
            correction,
            min_coefficient,
        });
        traj.states.push(cs_state);
        Ok(())
    };

    snapshot(&state, 0.0, &engine, &mut work)?;

    for step in 1..=steps {
        engine.rhs_into(&state, cfg.mode, &mut work, &mut k1)?;
        for i in 0..state.len() {
            stage[i] = state[i] + 0.5 * dt * k1[i];
        }
        engine.rhs_into(&stage, cfg.mode, &mut work, &mut k2)?;
        for i in 0..state.len() {
            stage[i] = state[i] + 0.5 * dt * k2[i];
        }
        engine.rhs_into(&stage, cfg.mode, &mut work, &mut k3)?;
        for i in 0..state.len() {
            stage[i] = state[i] + dt * k3[i];
        }
        engine.rhs_into(&stage, cfg.mode, &mut work, &mut k4)?;
        for i in 0..state.len() {
            state[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let t = step as f64 * dt;

        if let Some(bad) = state.iter().position(|v| !v.is_finite()) {
            return Err(KinError::BlowUp {
                t,
                subsystem: bad / np1,
            });
        }
        if step % cfg.sample_every == 0 || step == steps {
            snapshot(&state, t, &engine, &mut work)?;
        }
    }

    Ok(traj)
}

/// Evaluate the interpolated densities on per-subsystem grids.
pub fn reconstruct(
    state: &CoefficientState,
    bases: &[CollocationBasis],
    grids: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(bases.len());
    for (i, basis) in bases.iter().enumerate() {
        let mut vals = Vec::with_capacity(grids[i].len());
        for &u in &grids[i] {
            if !basis.domain.contains(u) {
                return Err(KinError::Domain(format!(
                    "grid point {u} outside domain [{}, {}] of subsystem {i}",
                    basis.domain.lo, basis.domain.hi
                )));
            }
            vals.push(basis::eval_interpolant(basis, &state.a[i], u));
        }
        out.push(vals);
    }
    Ok(out)
}
