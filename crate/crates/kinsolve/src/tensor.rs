//! Precomputation of the coefficient tensors behind the collocation scheme.
//!
//! For a rule (source h, partner k -> target i) the gain tensor entry
//!
//! ```text
//! G[j][p][q] = iint eta(x, y) delta(phi(x, y) - u_j) B_p(x) B_q(y) dx dy
//! ```
//!
//! is reduced, by eliminating x against the delta at fixed y, to a sum of
//! one-dimensional path integrals over the level set `phi(x, y) = u_j`:
//!
//! ```text
//! G[j][p][q] = sum over branches of
//!     int eta(x*(y), y) B_p(x*(y)) B_q(y) / |dphi/dx (x*(y), y)| dy
//! ```
//!
//! where `x*(y)` is the per-piece closed-form root. The Jacobian factor
//! `1 / |dphi/dx|` is required for the column sums `sum_j w_j G[j][p][q]`
//! to converge to `w_p w_q` (the discrete image of the kernel mass
//! condition), and is included on every branch.
//!
//! The integration interval is pre-split at every bilinear piece boundary
//! and at the containment limits where `x*(y)` crosses the source domain
//! edges, so each remaining segment has a smooth integrand; segments are then
//! integrated by Gauss-Legendre panels with adaptive bisection. All entries
//! of one target row share quadrature nodes, so the inner loop is a rank-one
//! update of the `(N+1) x (N+1)` row block.

use rayon::prelude::*;

use crate::basis::{self, CollocationBasis};
use crate::error::{KinError, Result};
use crate::system::{validated, BilinearPiece, KineticSystem};

/// Quadrature controls for the tensor precomputation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadConfig {
    /// Relative tolerance of the adaptive bisection.
    pub rel_tol: f64,
    /// Maximum bisection depth per segment.
    pub max_depth: u32,
    /// Minimum Gauss-Legendre order per panel; the resolved order is
    /// `max(base_order_floor, N + 9)`. The default floor of 256 integrates
    /// the basis-product part of the integrand exactly in one panel for any
    /// degree up to 255, leaving bisection to handle only the rational
    /// Jacobian factor.
    pub base_order_floor: u32,
    /// Error out if |dphi/dx| dips below this on a contributing segment.
    pub jacobian_floor: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            rel_tol: 1e-10,
            max_depth: 40,
            base_order_floor: 256,
            jacobian_floor: 1e-12,
        }
    }
}

impl QuadConfig {
    pub fn resolved_order(&self, degree: usize) -> usize {
        (self.base_order_floor as usize).max(degree + 9)
    }
}

/// Identity of a coefficient set: which system, which resolution, which
/// quadrature settings produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientMeta {
    pub system_hash: [u8; 32],
    pub degree: usize,
    pub quad: QuadConfig,
}

/// Subsystem indices of one interaction channel, mirrored from the system so
/// a coefficient set is self-contained for the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleTopology {
    pub source: usize,
    pub partner: usize,
    pub target: usize,
}

/// The precomputed tensors: per-rule gain blocks, the loss block, and the
/// basis integral weights. Immutable once built.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub meta: CoefficientMeta,
    pub n_subsystems: usize,
    /// Source/partner/target indices per rule, aligned with `gain`.
    pub rules: Vec<RuleTopology>,
    /// Per rule, `(N+1)^3` entries indexed `(j * (N+1) + p) * (N+1) + q`
    /// (j target node, p source node, q partner node).
    pub gain: Vec<Vec<f64>>,
    /// Dense `n^2 (N+1)^2` block indexed by [`loss_index`]; zero for
    /// non-interacting (source, partner) pairs.
    pub loss: Vec<f64>,
    /// Integral weights per subsystem.
    pub weights: Vec<Vec<f64>>,
}

#[inline]
pub fn gain_index(np1: usize, j: usize, p: usize, q: usize) -> usize {
    (j * np1 + p) * np1 + q
}

#[inline]
pub fn loss_index(n: usize, np1: usize, i: usize, j: usize, l: usize, q: usize) -> usize {
    ((i * np1 + j) * n + l) * np1 + q
}

impl CoefficientSet {
    /// Total stored f64 entries (tensors plus weights).
    pub fn stored_entries(&self) -> usize {
        self.gain.iter().map(|g| g.len()).sum::<usize>()
            + self.loss.len()
            + self.weights.iter().map(|w| w.len()).sum::<usize>()
    }
}

/// Build one collocation basis per subsystem at a common degree.
pub fn make_bases(sys: &KineticSystem, degree: usize) -> Vec<CollocationBasis> {
    sys.subsystems
        .iter()
        .map(|s| basis::make_basis(degree, s.domain))
        .collect()
}

/// Compute every tensor for the system at the given degree.
pub fn precompute(
    sys: &KineticSystem,
    degree: usize,
    quad: &QuadConfig,
) -> Result<CoefficientSet> {
    validated(sys)?;
    let bases = make_bases(sys, degree);
    let gain = sys
        .rules
        .iter()
        .enumerate()
        .map(|(r, _)| compute_gain_tensor(sys, r, &bases, quad))
        .collect::<Result<Vec<_>>>()?;
    let loss = compute_loss_tensor(sys, &bases)?;
    let weights = bases.iter().map(|b| b.integral_weights.clone()).collect();
    Ok(CoefficientSet {
        meta: CoefficientMeta {
            system_hash: sys.content_hash(),
            degree,
            quad: *quad,
        },
        n_subsystems: sys.n_subsystems(),
        rules: sys
            .rules
            .iter()
            .map(|r| RuleTopology {
                source: r.source,
                partner: r.partner,
                target: r.target,
            })
            .collect(),
        gain,
        loss,
        weights,
    })
}

/// Gain tensor of one rule; `(N+1)^3` entries in [`gain_index`] layout.
pub fn compute_gain_tensor(
    sys: &KineticSystem,
    rule_idx: usize,
    bases: &[CollocationBasis],
    quad: &QuadConfig,
) -> Result<Vec<f64>> {
    let rule = &sys.rules[rule_idx];
    let src = &bases[rule.source];
    let par = &bases[rule.partner];
    let tgt = &bases[rule.target];
    let np1 = src.len();
    let pieces = rule
        .phi
        .pieces(sys.subsystems[rule.source].domain, sys.subsystems[rule.partner].domain)?;
    let order = quad.resolved_order(src.degree);
    let panel = basis::gauss_legendre(order, -1.0, 1.0)?;

    // Rows are independent; partition the work over target nodes.
    let rows: Vec<Vec<f64>> = (0..np1)
        .into_par_iter()
        .map(|j| {
            let mut work = RowWorkspace::new(np1, &panel);
            row_for_target_node(
                sys, rule_idx, &pieces, src, par, tgt.nodes[j], quad, &mut work,
            )
            .map(|_| work.row)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut tensor = vec![0.0; np1 * np1 * np1];
    for (j, row) in rows.into_iter().enumerate() {
        tensor[j * np1 * np1..(j + 1) * np1 * np1].copy_from_slice(&row);
    }
    Ok(tensor)
}

struct RowWorkspace<'a> {
    row: Vec<f64>,
    bp: Vec<f64>,
    bq: Vec<f64>,
    panel: &'a basis::QuadratureRule,
}

impl<'a> RowWorkspace<'a> {
    fn new(np1: usize, panel: &'a basis::QuadratureRule) -> Self {
        RowWorkspace {
            row: vec![0.0; np1 * np1],
            bp: vec![0.0; np1],
            bq: vec![0.0; np1],
            panel,
        }
    }
}

fn row_for_target_node(
    sys: &KineticSystem,
    rule_idx: usize,
    pieces: &[BilinearPiece],
    src: &CollocationBasis,
    par: &CollocationBasis,
    u: f64,
    quad: &QuadConfig,
    work: &mut RowWorkspace,
) -> Result<()> {
    let rule = &sys.rules[rule_idx];
    for piece in pieces {
        for (ya, yb) in contributing_segments(piece, u) {
            // dphi/dx is linear in y and sign-definite inside a segment
            // (sign changes are split at the singular breakpoint), so its
            // minimum modulus sits at an endpoint.
            let da = piece.partial_x(ya).abs();
            let db = piece.partial_x(yb).abs();
            if da.min(db) < quad.jacobian_floor {
                return Err(KinError::DegenerateJacobian {
                    rule: rule_idx,
                    seg_lo: ya,
                    seg_hi: yb,
                    floor: quad.jacobian_floor,
                });
            }
            integrate_segment(rule, piece, src, par, u, ya, yb, quad, work);
        }
    }
    Ok(())
}

/// Split the piece's y-range at containment limits and at the singular point
/// of `x*(y)`, keeping only segments whose root lies inside the piece.
fn contributing_segments(piece: &BilinearPiece, u: f64) -> Vec<(f64, f64)> {
    let mut cuts = vec![piece.y_lo, piece.y_hi];
    let span = piece.y_hi - piece.y_lo;
    let mut push = |y: f64| {
        if y > piece.y_lo + 1e-14 * span.max(1.0) && y < piece.y_hi - 1e-14 * span.max(1.0) {
            cuts.push(y);
        }
    };
    // x*(y) = px  <=>  u - c00 - c01 y = px (c10 + c11 y)
    for px in [piece.x_lo, piece.x_hi] {
        let den = piece.c01 + px * piece.c11;
        if den.abs() > 1e-14 {
            push((u - piece.c00 - px * piece.c10) / den);
        }
    }
    if piece.c11.abs() > 1e-14 {
        push(-piece.c10 / piece.c11);
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * span.max(1.0));

    let mut segments = Vec::new();
    for w in cuts.windows(2) {
        let (ya, yb) = (w[0], w[1]);
        if yb - ya <= 1e-14 * span.max(1.0) {
            continue;
        }
        let ym = 0.5 * (ya + yb);
        let den = piece.partial_x(ym);
        if den.abs() < 1e-300 {
            continue;
        }
        let x = (u - piece.c00 - piece.c01 * ym) / den;
        let pad = 1e-12 * (piece.x_hi - piece.x_lo).max(1.0);
        if x >= piece.x_lo - pad && x <= piece.x_hi + pad {
            segments.push((ya, yb));
        }
    }
    segments
}

#[allow(clippy::too_many_arguments)]
fn integrate_segment(
    rule: &crate::system::InteractionRule,
    piece: &BilinearPiece,
    src: &CollocationBasis,
    par: &CollocationBasis,
    u: f64,
    ya: f64,
    yb: f64,
    quad: &QuadConfig,
    work: &mut RowWorkspace,
) {
    let np1 = src.len();
    let mut parent = vec![0.0; np1 * np1];
    panel_estimate(rule, piece, src, par, u, ya, yb, work, &mut parent);
    let total = bisect(rule, piece, src, par, u, ya, yb, parent, 0, quad, work);
    for (acc, v) in work.row.iter_mut().zip(total.iter()) {
        *acc += v;
    }
}

#[allow(clippy::too_many_arguments)]
fn bisect(
    rule: &crate::system::InteractionRule,
    piece: &BilinearPiece,
    src: &CollocationBasis,
    par: &CollocationBasis,
    u: f64,
    ya: f64,
    yb: f64,
    parent: Vec<f64>,
    depth: u32,
    quad: &QuadConfig,
    work: &mut RowWorkspace,
) -> Vec<f64> {
    if depth >= quad.max_depth {
        return parent;
    }
    let ym = 0.5 * (ya + yb);
    let np1 = src.len();
    let mut left = vec![0.0; np1 * np1];
    let mut right = vec![0.0; np1 * np1];
    panel_estimate(rule, piece, src, par, u, ya, ym, work, &mut left);
    panel_estimate(rule, piece, src, par, u, ym, yb, work, &mut right);

    let mut err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..parent.len() {
        let s = left[i] + right[i];
        err = err.max((parent[i] - s).abs());
        scale = scale.max(s.abs());
    }
    if err <= quad.rel_tol * scale.max(1e-30) + 1e-15 {
        for i in 0..left.len() {
            left[i] += right[i];
        }
        return left;
    }
    let l = bisect(rule, piece, src, par, u, ya, ym, left, depth + 1, quad, work);
    let mut r = bisect(rule, piece, src, par, u, ym, yb, right, depth + 1, quad, work);
    for i in 0..r.len() {
        r[i] += l[i];
    }
    r
}

/// One Gauss-Legendre panel over `[ya, yb]`, accumulating all (p, q) entries.
#[allow(clippy::too_many_arguments)]
fn panel_estimate(
    rule: &crate::system::InteractionRule,
    piece: &BilinearPiece,
    src: &CollocationBasis,
    par: &CollocationBasis,
    u: f64,
    ya: f64,
    yb: f64,
    work: &mut RowWorkspace,
    out: &mut [f64],
) {
    let np1 = src.len();
    let mid = 0.5 * (ya + yb);
    let half = 0.5 * (yb - ya);
    for g in 0..work.panel.order {
        let y = mid + half * work.panel.nodes[g];
        let den = piece.partial_x(y);
        let x = (u - piece.c00 - piece.c01 * y) / den;
        let w = work.panel.weights[g] * half * rule.eta.eval(x, y) / den.abs();
        if w == 0.0 {
            continue;
        }
        basis::eval_all_basis(src, x, &mut work.bp);
        basis::eval_all_basis(par, y, &mut work.bq);
        for p in 0..np1 {
            let c = work.bp[p] * w;
            let row = &mut out[p * np1..(p + 1) * np1];
            for (o, &bq) in row.iter_mut().zip(work.bq.iter()) {
                *o += c * bq;
            }
        }
    }
}

/// Loss tensor `L[i][j][l][q] = int eta_il(x_j, y) B_q(y) dy` over the
/// partner domain, for every ordered pair (i, l) that has a rule; zero
/// otherwise. Constant rates short-circuit to `eta * w_q` exactly.
pub fn compute_loss_tensor(sys: &KineticSystem, bases: &[CollocationBasis]) -> Result<Vec<f64>> {
    let n = sys.n_subsystems();
    let np1 = bases[0].len();
    let mut loss = vec![0.0; n * np1 * n * np1];
    for rule in &sys.rules {
        let i = rule.source;
        let l = rule.partner;
        let bl = &bases[l];
        match rule.eta.as_constant() {
            Some(c) => {
                for j in 0..np1 {
                    for q in 0..np1 {
                        loss[loss_index(n, np1, i, j, l, q)] = c * bl.integral_weights[q];
                    }
                }
            }
            None => {
                // eta is bilinear: at fixed x_j the integrand is a degree
                // N + 1 polynomial, integrated exactly.
                let quad = basis::gauss_legendre(np1 + 1, bl.domain.lo, bl.domain.hi)?;
                let mut bq = vec![0.0; np1];
                let bi = &bases[i];
                let mut acc = vec![0.0; np1 * np1];
                for (&y, &w) in quad.nodes.iter().zip(&quad.weights) {
                    basis::eval_all_basis(bl, y, &mut bq);
                    for j in 0..np1 {
                        let e = w * rule.eta.eval(bi.nodes[j], y);
                        let row = &mut acc[j * np1..(j + 1) * np1];
                        for (o, &b) in row.iter_mut().zip(bq.iter()) {
                            *o += e * b;
                        }
                    }
                }
                for j in 0..np1 {
                    for q in 0..np1 {
                        loss[loss_index(n, np1, i, j, l, q)] = acc[j * np1 + q];
                    }
                }
            }
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{
        ComponentShape, Domain, EncounterRate, InitialComponent, InteractionRule, KineticSystem,
        Subsystem, TransitionFunction,
    };
    use approx::assert_abs_diff_eq;

    fn two_subsystem(phi: TransitionFunction, eta: EncounterRate) -> KineticSystem {
        KineticSystem {
            subsystems: vec![
                Subsystem {
                    label: "s1".into(),
                    domain: Domain::unit(),
                    initial: vec![InitialComponent {
                        shape: ComponentShape::Uniform,
                        mass: 0.5,
                    }],
                },
                Subsystem {
                    label: "s2".into(),
                    domain: Domain::unit(),
                    initial: vec![InitialComponent {
                        shape: ComponentShape::Uniform,
                        mass: 0.5,
                    }],
                },
            ],
            rules: vec![InteractionRule {
                source: 0,
                partner: 1,
                target: 0,
                phi,
                eta,
            }],
        }
    }

    #[test]
    fn identity_rule_gain_is_kronecker_times_weights() {
        let sys = two_subsystem(TransitionFunction::Identity, EncounterRate::Constant(1.0));
        let degree = 6;
        let quad = QuadConfig::default();
        let cs = precompute(&sys, degree, &quad).unwrap();
        let np1 = degree + 1;
        let w = &cs.weights[1];
        for j in 0..np1 {
            for p in 0..np1 {
                for q in 0..np1 {
                    let got = cs.gain[0][gain_index(np1, j, p, q)];
                    let expect = if p == j { w[q] } else { 0.0 };
                    assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn gain_entries_nonnegative_up_to_quadrature_noise() {
        let sys = two_subsystem(
            TransitionFunction::Left { gamma: 0.4 },
            EncounterRate::Constant(1.0),
        );
        let cs = precompute(&sys, 8, &QuadConfig::default()).unwrap();
        // Entries are signed basis products, only structural negativity is
        // excluded: column sums against the target weights must stay close
        // to w_p w_q (see below); individual entries may be negative because
        // B_p takes negative values. The invariant checked here is
        // finiteness.
        assert!(cs.gain[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn column_sums_approach_weight_products_with_resolution() {
        // sum_j w_j G[j][p][q] -> w_p w_q as N grows; the finite-N defect is
        // what the correction factor compensates.
        let sys = two_subsystem(
            TransitionFunction::Left { gamma: 0.4 },
            EncounterRate::Constant(1.0),
        );
        let defect = |degree: usize| -> f64 {
            let cs = precompute(&sys, degree, &QuadConfig::default()).unwrap();
            let np1 = degree + 1;
            let wt = &cs.weights[0];
            let ws = &cs.weights[0];
            let wp = &cs.weights[1];
            let mut worst: f64 = 0.0;
            for p in 0..np1 {
                for q in 0..np1 {
                    let mut s = 0.0;
                    for j in 0..np1 {
                        s += wt[j] * cs.gain[0][gain_index(np1, j, p, q)];
                    }
                    let expect = ws[p] * wp[q];
                    worst = worst.max((s - expect).abs() / expect.abs().max(1e-3));
                }
            }
            worst
        };
        let d8 = defect(8);
        let d32 = defect(32);
        assert!(
            d32 < d8,
            "column-sum defect should shrink with N: N=8 -> {d8:e}, N=32 -> {d32:e}"
        );
    }

    #[test]
    fn loss_constant_eta_equals_weights() {
        let sys = two_subsystem(
            TransitionFunction::Left { gamma: 0.4 },
            EncounterRate::Constant(1.0),
        );
        let bases = make_bases(&sys, 5);
        let loss = compute_loss_tensor(&sys, &bases).unwrap();
        let np1 = 6;
        for j in 0..np1 {
            for q in 0..np1 {
                assert_abs_diff_eq!(
                    loss[loss_index(2, np1, 0, j, 1, q)],
                    bases[1].integral_weights[q],
                    epsilon = 1e-15
                );
                // Non-interacting (1, *) pairs are identically zero.
                assert_eq!(loss[loss_index(2, np1, 1, j, 0, q)], 0.0);
            }
        }
    }

    #[test]
    fn loss_bilinear_eta_matches_quadrature() {
        // eta(x, y) = x * y  =>  L[0][j][1][q] = x_j * int y B_q(y) dy.
        let sys = two_subsystem(
            TransitionFunction::Left { gamma: 0.4 },
            EncounterRate::Bilinear {
                c00: 0.0,
                c10: 0.0,
                c01: 0.0,
                c11: 1.0,
            },
        );
        let bases = make_bases(&sys, 5);
        let loss = compute_loss_tensor(&sys, &bases).unwrap();
        let np1 = 6;
        let quad = basis::gauss_legendre(40, 0.0, 1.0).unwrap();
        for j in 0..np1 {
            for q in 0..np1 {
                let oracle = bases[0].nodes[j]
                    * quad.integrate(|y| y * basis::eval_basis(&bases[1], q, y));
                assert_abs_diff_eq!(
                    loss[loss_index(2, np1, 0, j, 1, q)],
                    oracle,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn storage_matches_rule_sparse_count() {
        let sys = two_subsystem(
            TransitionFunction::Left { gamma: 0.4 },
            EncounterRate::Constant(1.0),
        );
        let degree = 7;
        let cs = precompute(&sys, degree, &QuadConfig::default()).unwrap();
        let np1 = degree + 1;
        let rules = sys.rules.len();
        let n = sys.n_subsystems();
        assert_eq!(
            cs.stored_entries(),
            rules * np1 * np1 * np1 + n * n * np1 * np1 + n * np1
        );
    }

    #[test]
    fn degenerate_jacobian_is_reported() {
        // phi = 0.5 + 1e-13 x has an isolated level-set branch for the
        // middle collocation node (which sits at 0.5 for even degree) with
        // |dphi/dx| = 1e-13, below the default floor.
        let sys = two_subsystem(
            TransitionFunction::PiecewiseBilinear {
                pieces: vec![crate::system::BilinearPiece {
                    x_lo: 0.0,
                    x_hi: 1.0,
                    y_lo: 0.0,
                    y_hi: 1.0,
                    c00: 0.5,
                    c10: 1e-13,
                    c01: 0.0,
                    c11: 0.0,
                }],
            },
            EncounterRate::Constant(1.0),
        );
        let bases = make_bases(&sys, 4);
        let res = compute_gain_tensor(&sys, 0, &bases, &QuadConfig::default());
        assert!(matches!(
            res,
            Err(KinError::DegenerateJacobian { rule: 0, .. })
        ));
    }
}
