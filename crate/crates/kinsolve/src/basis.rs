//! Collocation basis on first-kind Chebyshev nodes plus Gauss-Legendre
//! quadrature utilities.
//!
//! Densities are represented by their values at the nodes; everything else
//! (interpolation, basis integrals) goes through the barycentric formula,
//! which is stable for degrees well beyond anything used here.

use crate::error::{KinError, Result};
use crate::system::Domain;

/// Lagrange collocation basis of degree `degree` (`degree + 1` nodes) on a
/// microstate domain.
///
/// Nodes are first-kind Chebyshev points mapped affinely onto the domain and
/// sorted ascending; they are strictly interior, so densities may be sampled
/// right up to the domain edges without touching them.
#[derive(Debug, Clone)]
pub struct CollocationBasis {
    pub degree: usize,
    pub domain: Domain,
    /// Collocation nodes, strictly increasing.
    pub nodes: Vec<f64>,
    /// Barycentric weights matching `nodes` (common scale factor irrelevant).
    pub bary_weights: Vec<f64>,
    /// Integrals of each cardinal basis function over the domain.
    pub integral_weights: Vec<f64>,
}

impl CollocationBasis {
    /// Number of nodes (`degree + 1`).
    pub fn len(&self) -> usize {
        self.degree + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Build the collocation basis of the given polynomial degree on a domain.
///
/// Node `k` of the raw rule is `cos((2k+1)pi / (2(N+1)))`; the affine image is
/// stored ascending. Barycentric weights use the first-kind closed form
/// `(-1)^k sin((2k+1)pi / (2(N+1)))`, which stays O(1) at any degree. The
/// integral weights come from a Gauss-Legendre rule of `N + 1` points, exact
/// for the degree-N cardinal functions.
pub fn make_basis(degree: usize, domain: Domain) -> CollocationBasis {
    let n = degree + 1;
    let mut nodes = Vec::with_capacity(n);
    let mut bary = Vec::with_capacity(n);
    // Raw order is descending in x; iterate k backwards for ascending nodes.
    for k in (0..n).rev() {
        let theta = (2.0 * k as f64 + 1.0) * std::f64::consts::PI / (2.0 * n as f64);
        let t = theta.cos();
        nodes.push(domain.lo + 0.5 * (domain.hi - domain.lo) * (1.0 + t));
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        bary.push(sign * theta.sin());
    }

    let quad = gauss_legendre(n, domain.lo, domain.hi).expect("order >= 1 and lo < hi");
    let mut integral_weights = vec![0.0; n];
    let mut card = vec![0.0; n];
    for (&x, &w) in quad.nodes.iter().zip(&quad.weights) {
        eval_all_basis_into(&nodes, &bary, x, &mut card);
        for j in 0..n {
            integral_weights[j] += w * card[j];
        }
    }

    CollocationBasis {
        degree,
        domain,
        nodes,
        bary_weights: bary,
        integral_weights,
    }
}

/// Evaluate the interpolant through `(nodes[j], coeffs[j])` at `u` by the
/// barycentric formula. At a node the coefficient is returned directly (the
/// formula has a removable singularity there).
pub fn eval_interpolant(basis: &CollocationBasis, coeffs: &[f64], u: f64) -> f64 {
    debug_assert_eq!(coeffs.len(), basis.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..basis.len() {
        let d = u - basis.nodes[j];
        if d == 0.0 {
            return coeffs[j];
        }
        let t = basis.bary_weights[j] / d;
        num += t * coeffs[j];
        den += t;
    }
    num / den
}

/// Evaluate a single cardinal basis function `B_j` at `u`.
pub fn eval_basis(basis: &CollocationBasis, j: usize, u: f64) -> f64 {
    debug_assert!(j < basis.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for p in 0..basis.len() {
        let d = u - basis.nodes[p];
        if d == 0.0 {
            return if p == j { 1.0 } else { 0.0 };
        }
        let t = basis.bary_weights[p] / d;
        if p == j {
            num = t;
        }
        den += t;
    }
    num / den
}

/// Evaluate every cardinal basis function at `u` in one barycentric sweep.
/// `out` must have `basis.len()` entries. This is the hot path of the tensor
/// precomputation.
pub fn eval_all_basis(basis: &CollocationBasis, u: f64, out: &mut [f64]) {
    eval_all_basis_into(&basis.nodes, &basis.bary_weights, u, out);
}

fn eval_all_basis_into(nodes: &[f64], bary: &[f64], u: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), nodes.len());
    // Division pass kept branchless so it vectorizes; an exact node hit
    // shows up as an infinity (the barycentric weights are never zero).
    for p in 0..nodes.len() {
        out[p] = bary[p] / (u - nodes[p]);
    }
    let mut den = 0.0;
    let mut hit = usize::MAX;
    for (p, &t) in out.iter().enumerate() {
        if t.is_infinite() {
            hit = p;
        }
        den += t;
    }
    if hit != usize::MAX {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[hit] = 1.0;
        return;
    }
    let inv = 1.0 / den;
    out.iter_mut().for_each(|v| *v *= inv);
}

/// A Gauss-Legendre rule mapped onto `[a, b]`, exact for polynomials of
/// degree `2 * order - 1`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub order: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Gauss-Legendre nodes and weights on `[a, b]`.
///
/// Nodes are Newton-refined roots of the Legendre polynomial with the usual
/// Chebyshev-based initial guesses; this is accurate to machine precision for
/// the orders used here (up to a few hundred).
pub fn gauss_legendre(order: usize, a: f64, b: f64) -> Result<QuadratureRule> {
    if order < 1 {
        return Err(KinError::Parameter("quadrature order must be >= 1".into()));
    }
    if !(a < b) {
        return Err(KinError::Parameter(format!(
            "quadrature interval must satisfy a < b, got [{a}, {b}]"
        )));
    }
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = (n + 1) / 2;
    for i in 0..half {
        // Root i (descending) of P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        // One final evaluation so the weight uses the converged abscissa.
        let (_, dp) = legendre_and_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
        let (_, d) = legendre_and_derivative(n, 0.0);
        weights[n / 2] = 2.0 / (d * d);
    }
    let mid = 0.5 * (a + b);
    let scale = 0.5 * (b - a);
    for i in 0..n {
        nodes[i] = mid + scale * nodes[i];
        weights[i] *= scale;
    }
    Ok(QuadratureRule {
        order,
        nodes,
        weights,
    })
}

/// Value and derivative of the Legendre polynomial P_n at x, by recurrence.
fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit() -> Domain {
        Domain::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn degree_zero_single_midpoint_node() {
        let b = make_basis(0, unit());
        assert_eq!(b.nodes.len(), 1);
        assert_abs_diff_eq!(b.nodes[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b.integral_weights[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn degree_one_closed_form_nodes() {
        let b = make_basis(1, unit());
        let s = std::f64::consts::SQRT_2 / 2.0;
        assert_abs_diff_eq!(b.nodes[0], (1.0 - s) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.nodes[1], (1.0 + s) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn nodes_sorted_and_interior() {
        for degree in [0, 1, 2, 5, 17, 64] {
            let b = make_basis(degree, Domain::new(0.25, 2.5).unwrap());
            for w in b.nodes.windows(2) {
                assert!(w[0] < w[1]);
            }
            assert!(b.nodes[0] > 0.25 && *b.nodes.last().unwrap() < 2.5);
        }
    }

    #[test]
    fn integral_weights_partition_domain() {
        for degree in [0, 1, 3, 8, 33, 100] {
            let d = Domain::new(0.0, 1.0).unwrap();
            let b = make_basis(degree, d);
            let sum: f64 = b.integral_weights.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cardinality_at_nodes() {
        let b = make_basis(7, unit());
        for j in 0..b.len() {
            for p in 0..b.len() {
                let v = eval_basis(&b, j, b.nodes[p]);
                let expect = if p == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(v, expect, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn partition_of_unity_pointwise() {
        let b = make_basis(9, unit());
        let mut all = vec![0.0; b.len()];
        for i in 0..101 {
            let u = i as f64 / 100.0;
            eval_all_basis(&b, u, &mut all);
            let s: f64 = all.iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_and_linear_reproduction() {
        let b = make_basis(6, unit());
        let ones = vec![1.0; b.len()];
        let lin: Vec<f64> = b.nodes.clone();
        for i in 0..53 {
            let u = i as f64 / 52.0;
            assert_abs_diff_eq!(eval_interpolant(&b, &ones, u), 1.0, epsilon = 1e-13);
            assert_abs_diff_eq!(eval_interpolant(&b, &lin, u), u, epsilon = 1e-13);
        }
    }

    #[test]
    fn gauss_legendre_order_one_is_midpoint() {
        let q = gauss_legendre(1, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(q.nodes[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(q.weights[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gauss_legendre_order_two_closed_form() {
        let q = gauss_legendre(2, -1.0, 1.0).unwrap();
        let r = 1.0 / 3.0_f64.sqrt();
        assert_abs_diff_eq!(q.nodes[0], -r, epsilon = 1e-15);
        assert_abs_diff_eq!(q.nodes[1], r, epsilon = 1e-15);
        assert_abs_diff_eq!(q.weights[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.weights[1], 1.0, epsilon = 1e-15);
        let x2 = q.integrate(|x| x * x);
        assert_abs_diff_eq!(x2, 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn gauss_legendre_cubic_exactness() {
        let q = gauss_legendre(2, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(q.integrate(|x| x * x * x), 0.25, epsilon = 1e-14);
    }

    #[test]
    fn gauss_legendre_degree_exactness_sweep() {
        // Exact for monomials up to degree 2*order - 1.
        for order in 1..=12usize {
            let q = gauss_legendre(order, 0.0, 1.0).unwrap();
            for deg in 0..(2 * order) {
                let exact = 1.0 / (deg as f64 + 1.0);
                let got = q.integrate(|x| x.powi(deg as i32));
                assert_abs_diff_eq!(got, exact, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gauss_legendre_rejects_bad_parameters() {
        assert!(gauss_legendre(0, 0.0, 1.0).is_err());
        assert!(gauss_legendre(4, 1.0, 1.0).is_err());
        assert!(gauss_legendre(4, 2.0, 1.0).is_err());
    }

    #[test]
    fn high_degree_evaluation_stays_finite() {
        let b = make_basis(512, unit());
        let coeffs: Vec<f64> = b.nodes.iter().map(|x| (3.0 * x).sin()).collect();
        for i in 0..=200 {
            let u = i as f64 / 200.0;
            let v = eval_interpolant(&b, &coeffs, u);
            assert!(v.is_finite());
            assert_abs_diff_eq!(v, (3.0 * u).sin(), epsilon = 1e-9);
        }
    }

    proptest! {
        // Interpolation reproduces random polynomials of degree <= N exactly.
        #[test]
        fn polynomial_reproduction(
            coeffs in proptest::collection::vec(-2.0..2.0f64, 1..8),
            us in proptest::collection::vec(0.0..1.0f64, 8),
        ) {
            let degree = coeffs.len() - 1;
            let poly = |x: f64| coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c);
            let b = make_basis(degree, unit());
            let vals: Vec<f64> = b.nodes.iter().map(|&x| poly(x)).collect();
            for &u in &us {
                let got = eval_interpolant(&b, &vals, u);
                prop_assert!((got - poly(u)).abs() < 1e-10);
            }
        }

        #[test]
        fn integral_weights_integrate_polynomials(deg in 0usize..7) {
            // sum_j w_j x_j^d == integral of x^d since sampling a degree-<=N
            // polynomial at the nodes reproduces it exactly.
            let b = make_basis(8, unit());
            let sum: f64 = b.nodes.iter().zip(&b.integral_weights)
                .map(|(&x, &w)| w * x.powi(deg as i32))
                .sum();
            prop_assert!((sum - 1.0 / (deg as f64 + 1.0)).abs() < 1e-12);
        }
    }
}
