//! Declarative description of a kinetic system: subsystems with microstate
//! domains, pairwise interaction rules with transition functions and
//! encounter rates, and initial conditions.
//!
//! Every supported transition function is piecewise bilinear, represented
//! canonically as a list of sub-rectangles each carrying coefficients of
//! `c00 + c10 x + c01 y + c11 xy`. Bilinearity means extrema over any
//! rectangle sit at its corners, so range containment (`phi(D_h x D_k)`
//! inside the target domain) is checked exactly by corner enumeration.

use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::fmt;

use crate::error::{KinError, Result};

/// A closed microstate interval `[lo, hi]` with `0 <= lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub lo: f64,
    pub hi: f64,
}

impl Domain {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || !(lo < hi) {
            return Err(KinError::Parameter(format!(
                "domain bounds must be finite with lo < hi, got [{lo}, {hi}]"
            )));
        }
        if lo < 0.0 {
            return Err(KinError::Parameter(format!(
                "microstate domains are non-negative, got lo = {lo}"
            )));
        }
        Ok(Domain { lo, hi })
    }

    pub fn unit() -> Self {
        Domain { lo: 0.0, hi: 1.0 }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, u: f64) -> bool {
        u >= self.lo && u <= self.hi
    }
}

/// One bilinear patch of a transition function:
/// `phi(x, y) = c00 + c10 x + c01 y + c11 xy` on `[x_lo, x_hi] x [y_lo, y_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct BilinearPiece {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
    pub c00: f64,
    pub c10: f64,
    pub c01: f64,
    pub c11: f64,
}

impl BilinearPiece {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.c00 + self.c10 * x + self.c01 * y + self.c11 * x * y
    }

    /// d phi / dx at fixed y (independent of x on a bilinear piece).
    pub fn partial_x(&self, y: f64) -> f64 {
        self.c10 + self.c11 * y
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_lo && x <= self.x_hi && y >= self.y_lo && y <= self.y_hi
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x_lo, self.y_lo),
            (self.x_lo, self.y_hi),
            (self.x_hi, self.y_lo),
            (self.x_hi, self.y_hi),
        ]
    }
}

/// Parametric families of transition functions.
///
/// `Left`, `Right`, `AwayFrom` and `Toward` are the four standard families;
/// `Identity` keeps the microstate unchanged (handy for exact fixed-point
/// checks) and `PiecewiseBilinear` takes explicit patches.
#[derive(Debug, Clone, PartialEq)]
pub enum TransitionFunction {
    /// `x - gamma * x * y`: pushes microstates toward the lower boundary.
    Left { gamma: f64 },
    /// `x + gamma * (1 - x)(1 - y)` scaled to the domain: pushes toward the
    /// upper boundary.
    Right { gamma: f64 },
    /// Below `a` behaves like `Left`, above like `Right`: repelled from `a`.
    /// Discontinuous at `x = a` in general.
    AwayFrom { gamma: f64, a: f64 },
    /// Above `a` decays toward `a`, below grows toward `a`; continuous at
    /// `x = a`.
    Toward { gamma: f64, a: f64 },
    /// `phi(x, y) = x`.
    Identity,
    /// Arbitrary bilinear patches (must tile the source x partner rectangle).
    PiecewiseBilinear { pieces: Vec<BilinearPiece> },
}

impl TransitionFunction {
    /// Canonical piece list on the given source x partner rectangle.
    ///
    /// The built-in families are written for unit domains in the literature;
    /// here the formulas are used verbatim, so domains other than `[0, 1]`
    /// must still satisfy range containment (checked by validation).
    pub fn pieces(&self, source: Domain, partner: Domain) -> Result<Vec<BilinearPiece>> {
        let (sx0, sx1) = (source.lo, source.hi);
        let (py0, py1) = (partner.lo, partner.hi);
        let rect = |x_lo, x_hi, c00, c10, c01, c11| BilinearPiece {
            x_lo,
            x_hi,
            y_lo: py0,
            y_hi: py1,
            c00,
            c10,
            c01,
            c11,
        };
        match self {
            TransitionFunction::Left { gamma } => {
                check_gamma(*gamma)?;
                Ok(vec![rect(sx0, sx1, 0.0, 1.0, 0.0, -gamma)])
            }
            TransitionFunction::Right { gamma } => {
                check_gamma(*gamma)?;
                // x + gamma (1-x)(1-y) = gamma + (1-gamma) x - gamma y + gamma xy
                Ok(vec![rect(sx0, sx1, *gamma, 1.0 - gamma, -gamma, *gamma)])
            }
            TransitionFunction::AwayFrom { gamma, a } => {
                check_gamma(*gamma)?;
                check_threshold(*a, source)?;
                Ok(vec![
                    // x <= a: same form as Left
                    rect(sx0, *a, 0.0, 1.0, 0.0, -gamma),
                    // x > a: same form as Right
                    rect(*a, sx1, *gamma, 1.0 - gamma, -gamma, *gamma),
                ])
            }
            TransitionFunction::Toward { gamma, a } => {
                check_gamma(*gamma)?;
                check_threshold(*a, source)?;
                Ok(vec![
                    // x <= a: x + gamma (a - x)(1 - y)
                    //       = gamma a + (1 - gamma) x - gamma a y + gamma xy
                    rect(sx0, *a, gamma * a, 1.0 - gamma, -gamma * a, *gamma),
                    // x > a: x - gamma (x - a) y = x + gamma a y - gamma xy
                    rect(*a, sx1, 0.0, 1.0, gamma * a, -gamma),
                ])
            }
            TransitionFunction::Identity => Ok(vec![rect(sx0, sx1, 0.0, 1.0, 0.0, 0.0)]),
            TransitionFunction::PiecewiseBilinear { pieces } => {
                if pieces.is_empty() {
                    return Err(KinError::Parameter(
                        "piecewise transition function needs at least one piece".into(),
                    ));
                }
                Ok(pieces.clone())
            }
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            TransitionFunction::Left { .. } => "left",
            TransitionFunction::Right { .. } => "right",
            TransitionFunction::AwayFrom { .. } => "away",
            TransitionFunction::Toward { .. } => "toward",
            TransitionFunction::Identity => "identity",
            TransitionFunction::PiecewiseBilinear { .. } => "piecewise",
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(KinError::Parameter(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    Ok(())
}

fn check_threshold(a: f64, source: Domain) -> Result<()> {
    if !(a > source.lo && a < source.hi) {
        return Err(KinError::Parameter(format!(
            "threshold a = {a} must lie strictly inside the source domain [{}, {}]",
            source.lo, source.hi
        )));
    }
    Ok(())
}

/// Evaluate `phi(x, y)`. On a piece boundary the piece listed first wins,
/// which matches the `x <= a` / `x > a` conventions of the built-ins.
pub fn eval_phi(pieces: &[BilinearPiece], x: f64, y: f64) -> Result<f64> {
    for piece in pieces {
        if piece.contains(x, y) {
            return Ok(piece.eval(x, y));
        }
    }
    Err(KinError::Domain(format!(
        "({x}, {y}) is outside the source x partner rectangle of the transition function"
    )))
}

/// `d phi / dx` at `(x, y)`. Exactly on an interior piece boundary the
/// derivative is ambiguous and the caller must split; an error is returned.
pub fn phi_partial_x(pieces: &[BilinearPiece], x: f64, y: f64) -> Result<f64> {
    let mut found: Option<&BilinearPiece> = None;
    for piece in pieces {
        if piece.contains(x, y) {
            if found.is_some() {
                // Claimed by two pieces: interior piece boundary, where the
                // one-sided derivatives (and possibly the values) disagree.
                return Err(KinError::PieceBoundary(format!(
                    "({x}, {y}) lies on a piece boundary"
                )));
            }
            found = Some(piece);
        }
    }
    match found {
        Some(piece) => Ok(piece.partial_x(y)),
        None => Err(KinError::Domain(format!(
            "({x}, {y}) is outside the source x partner rectangle of the transition function"
        ))),
    }
}

/// All solutions `x*` in the source range of `phi(x, y) = u` at fixed `y`,
/// at most one per bilinear piece. Pieces whose slope in `x` vanishes at this
/// `y` contribute no isolated root and are skipped.
pub fn phi_levelset_x(pieces: &[BilinearPiece], u: f64, y: f64) -> Vec<f64> {
    let mut roots = Vec::new();
    for piece in pieces {
        if y < piece.y_lo || y > piece.y_hi {
            continue;
        }
        let den = piece.partial_x(y);
        if den.abs() < 1e-14 {
            continue;
        }
        let x = (u - piece.c00 - piece.c01 * y) / den;
        if x >= piece.x_lo && x <= piece.x_hi {
            roots.push(x);
        }
    }
    roots
}

/// Encounter rate between a source and partner subsystem.
///
/// Bilinear rates cover every bounded rate used in practice here (constants
/// included) while keeping exact corner-based bounds available.
#[derive(Debug, Clone, PartialEq)]
pub enum EncounterRate {
    Constant(f64),
    Bilinear { c00: f64, c10: f64, c01: f64, c11: f64 },
}

impl EncounterRate {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            EncounterRate::Constant(c) => *c,
            EncounterRate::Bilinear { c00, c10, c01, c11 } => c00 + c10 * x + c01 * y + c11 * x * y,
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            EncounterRate::Constant(c) => Some(*c),
            EncounterRate::Bilinear { c00, c10, c01, c11 }
                if *c10 == 0.0 && *c01 == 0.0 && *c11 == 0.0 =>
            {
                Some(*c00)
            }
            _ => None,
        }
    }

    /// (min, max) over a rectangle; exact by bilinearity.
    pub fn range_on(&self, xs: Domain, ys: Domain) -> (f64, f64) {
        match self {
            EncounterRate::Constant(c) => (*c, *c),
            EncounterRate::Bilinear { .. } => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &x in &[xs.lo, xs.hi] {
                    for &y in &[ys.lo, ys.hi] {
                        let v = self.eval(x, y);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                (lo, hi)
            }
        }
    }
}

/// One interaction channel: agents of `source` interacting with agents of
/// `partner` move to `target` at microstate `phi(x, y)`, at rate `eta(x, y)`.
#[derive(Debug, Clone)]
pub struct InteractionRule {
    pub source: usize,
    pub partner: usize,
    pub target: usize,
    pub phi: TransitionFunction,
    pub eta: EncounterRate,
}

/// A single mixture component of an initial density.
#[derive(Debug, Clone, PartialEq)]
pub enum ComponentShape {
    /// Gaussian with the given mean and width, truncated to the domain and
    /// renormalized.
    TruncatedGaussian { mu: f64, sigma: f64 },
    Uniform,
    /// Narrow smoothed point mass at `mu` (a truncated Gaussian of width
    /// `width`, default 1e-3).
    PointMass { mu: f64, width: f64 },
}

#[derive(Debug, Clone)]
pub struct InitialComponent {
    pub shape: ComponentShape,
    pub mass: f64,
}

/// A named subsystem: label, microstate domain, initial mixture.
#[derive(Debug, Clone)]
pub struct Subsystem {
    pub label: String,
    pub domain: Domain,
    pub initial: Vec<InitialComponent>,
}

/// The full kinetic system. Immutable once constructed; share freely.
#[derive(Debug, Clone)]
pub struct KineticSystem {
    pub subsystems: Vec<Subsystem>,
    pub rules: Vec<InteractionRule>,
}

/// One validation finding, with the witnessing corner when applicable.
#[derive(Debug, Clone)]
pub struct Violation {
    pub rule: Option<usize>,
    pub message: String,
    pub witness: Option<(f64, f64)>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rule {
            Some(r) => write!(f, "rule {r}: {}", self.message)?,
            None => write!(f, "{}", self.message)?,
        }
        if let Some((x, y)) = self.witness {
            write!(f, " [witness corner ({x}, {y})]")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            write!(f, "ok")
        } else {
            for v in &self.violations {
                writeln!(f, "- {v}")?;
            }
            Ok(())
        }
    }
}

impl KineticSystem {
    pub fn n_subsystems(&self) -> usize {
        self.subsystems.len()
    }

    pub fn subsystem_index(&self, label: &str) -> Option<usize> {
        self.subsystems.iter().position(|s| s.label == label)
    }

    /// Stable content hash of every field that influences the precomputed
    /// tensors. Used for cache staleness checks.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let f = |h: &mut Sha256, v: f64| h.update(v.to_le_bytes());
        h.update((self.subsystems.len() as u64).to_le_bytes());
        for s in &self.subsystems {
            h.update((s.label.len() as u64).to_le_bytes());
            h.update(s.label.as_bytes());
            f(&mut h, s.domain.lo);
            f(&mut h, s.domain.hi);
            h.update((s.initial.len() as u64).to_le_bytes());
            for c in &s.initial {
                match &c.shape {
                    ComponentShape::TruncatedGaussian { mu, sigma } => {
                        h.update([0u8]);
                        f(&mut h, *mu);
                        f(&mut h, *sigma);
                    }
                    ComponentShape::Uniform => h.update([1u8]),
                    ComponentShape::PointMass { mu, width } => {
                        h.update([2u8]);
                        f(&mut h, *mu);
                        f(&mut h, *width);
                    }
                }
                f(&mut h, c.mass);
            }
        }
        h.update((self.rules.len() as u64).to_le_bytes());
        for r in &self.rules {
            h.update((r.source as u64).to_le_bytes());
            h.update((r.partner as u64).to_le_bytes());
            h.update((r.target as u64).to_le_bytes());
            match &r.phi {
                TransitionFunction::Left { gamma } => {
                    h.update([0u8]);
                    f(&mut h, *gamma);
                }
                TransitionFunction::Right { gamma } => {
                    h.update([1u8]);
                    f(&mut h, *gamma);
                }
                TransitionFunction::AwayFrom { gamma, a } => {
                    h.update([2u8]);
                    f(&mut h, *gamma);
                    f(&mut h, *a);
                }
                TransitionFunction::Toward { gamma, a } => {
                    h.update([3u8]);
                    f(&mut h, *gamma);
                    f(&mut h, *a);
                }
                TransitionFunction::Identity => h.update([4u8]),
                TransitionFunction::PiecewiseBilinear { pieces } => {
                    h.update([5u8]);
                    h.update((pieces.len() as u64).to_le_bytes());
                    for p in pieces {
                        for v in [p.x_lo, p.x_hi, p.y_lo, p.y_hi, p.c00, p.c10, p.c01, p.c11] {
                            f(&mut h, v);
                        }
                    }
                }
            }
            match &r.eta {
                EncounterRate::Constant(c) => {
                    h.update([0u8]);
                    f(&mut h, *c);
                }
                EncounterRate::Bilinear { c00, c10, c01, c11 } => {
                    h.update([1u8]);
                    for v in [c00, c10, c01, c11] {
                        f(&mut h, *v);
                    }
                }
            }
        }
        h.finalize().into()
    }
}

/// Structural and semantic validation.
///
/// Checks, per rule: valid indices, at most one rule per ordered
/// (source, partner) pair, bounded non-negative encounter rate, and exact
/// range containment of `phi` via corner enumeration of each bilinear piece.
/// Globally: initial masses sum to one within 1e-12, components well-formed.
pub fn validate_system(sys: &KineticSystem) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = sys.subsystems.len();
    let mut push = |rule, message, witness| {
        report.violations.push(Violation {
            rule,
            message,
            witness,
        })
    };

    if n == 0 {
        push(None, "system has no subsystems".into(), None);
        return report;
    }

    let mut seen_pairs = std::collections::HashSet::new();
    for (idx, rule) in sys.rules.iter().enumerate() {
        if rule.source >= n || rule.partner >= n || rule.target >= n {
            push(
                Some(idx),
                format!(
                    "subsystem index out of range (source {}, partner {}, target {}, n = {n})",
                    rule.source, rule.partner, rule.target
                ),
                None,
            );
            continue;
        }
        if !seen_pairs.insert((rule.source, rule.partner)) {
            push(
                Some(idx),
                format!(
                    "duplicate rule for ordered pair ({}, {})",
                    rule.source, rule.partner
                ),
                None,
            );
        }
        let src = sys.subsystems[rule.source].domain;
        let par = sys.subsystems[rule.partner].domain;
        let tgt = sys.subsystems[rule.target].domain;

        let (eta_lo, eta_hi) = rule.eta.range_on(src, par);
        if eta_lo < 0.0 {
            push(
                Some(idx),
                format!("encounter rate takes negative value {eta_lo}"),
                None,
            );
        }
        if !eta_hi.is_finite() {
            push(Some(idx), "encounter rate is unbounded".into(), None);
        }

        match rule.phi.pieces(src, par) {
            Ok(pieces) => {
                for piece in &pieces {
                    for (x, y) in piece.corners() {
                        let v = piece.eval(x, y);
                        if !tgt.contains(v) {
                            push(
                                Some(idx),
                                format!(
                                    "phi({x}, {y}) = {v} escapes target domain [{}, {}]",
                                    tgt.lo, tgt.hi
                                ),
                                Some((x, y)),
                            );
                        }
                    }
                }
            }
            Err(e) => push(Some(idx), format!("transition function invalid: {e}"), None),
        }
    }

    let mut total_mass = 0.0;
    for (i, s) in sys.subsystems.iter().enumerate() {
        for c in &s.initial {
            if c.mass < 0.0 {
                push(None, format!("subsystem {i}: negative mass fraction {}", c.mass), None);
            }
            match &c.shape {
                ComponentShape::TruncatedGaussian { sigma, .. } if *sigma <= 0.0 => {
                    push(None, format!("subsystem {i}: gaussian width must be positive"), None)
                }
                ComponentShape::PointMass { width, .. } if *width <= 0.0 => {
                    push(None, format!("subsystem {i}: point-mass width must be positive"), None)
                }
                _ => {}
            }
            total_mass += c.mass;
        }
    }
    if (total_mass - 1.0).abs() > 1e-12 {
        push(
            None,
            format!("initial masses sum to {total_mass}, expected 1"),
            None,
        );
    }

    report
}

/// Validate and return an error carrying the report on failure.
pub fn validated(sys: &KineticSystem) -> Result<()> {
    let report = validate_system(sys);
    if report.passed() {
        Ok(())
    } else {
        Err(KinError::Validation(report))
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2))
}

fn gaussian_params(shape: &ComponentShape) -> Option<(f64, f64)> {
    match shape {
        ComponentShape::TruncatedGaussian { mu, sigma } => Some((*mu, *sigma)),
        ComponentShape::PointMass { mu, width } => Some((*mu, *width)),
        ComponentShape::Uniform => None,
    }
}

/// Initial density of subsystem `i` at microstate `u` (zero mass components
/// contribute nothing). Each component is renormalized after truncation so it
/// integrates to exactly its mass fraction over the domain.
pub fn eval_initial(sys: &KineticSystem, i: usize, u: f64) -> f64 {
    let s = &sys.subsystems[i];
    if !s.domain.contains(u) {
        return 0.0;
    }
    let mut v = 0.0;
    for c in &s.initial {
        if c.mass == 0.0 {
            continue;
        }
        v += c.mass * component_pdf(&c.shape, s.domain, u);
    }
    v
}

fn component_pdf(shape: &ComponentShape, domain: Domain, u: f64) -> f64 {
    match gaussian_params(shape) {
        None => 1.0 / domain.len(),
        Some((mu, sigma)) => {
            let z = std_normal_cdf((domain.hi - mu) / sigma) - std_normal_cdf((domain.lo - mu) / sigma);
            let t = (u - mu) / sigma;
            let pdf = (-0.5 * t * t).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            pdf / z
        }
    }
}

/// Mass of the initial density of subsystem `i` inside `[a, b]`, in closed
/// form (used for exact particle apportionment).
pub fn initial_mass_in(sys: &KineticSystem, i: usize, a: f64, b: f64) -> f64 {
    let s = &sys.subsystems[i];
    let a = a.max(s.domain.lo);
    let b = b.min(s.domain.hi);
    if b <= a {
        return 0.0;
    }
    let mut m = 0.0;
    for c in &s.initial {
        if c.mass == 0.0 {
            continue;
        }
        m += c.mass
            * match gaussian_params(&c.shape) {
                None => (b - a) / s.domain.len(),
                Some((mu, sigma)) => {
                    let z = std_normal_cdf((s.domain.hi - mu) / sigma)
                        - std_normal_cdf((s.domain.lo - mu) / sigma);
                    (std_normal_cdf((b - mu) / sigma) - std_normal_cdf((a - mu) / sigma)) / z
                }
            };
    }
    m
}

// ---------------------------------------------------------------------------
// System description files
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSystem {
    #[serde(rename = "subsystems")]
    subsystems: Vec<FileSubsystem>,
    #[serde(rename = "rules", default)]
    rules: Vec<FileRule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSubsystem {
    label: String,
    lo: f64,
    hi: f64,
    #[serde(default)]
    initial: Vec<FileComponent>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileComponent {
    shape: String,
    #[serde(default)]
    mu: Option<f64>,
    #[serde(default)]
    sigma: Option<f64>,
    #[serde(default)]
    width: Option<f64>,
    mass: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRule {
    source: String,
    partner: String,
    target: String,
    family: String,
    #[serde(default)]
    gamma: Option<f64>,
    #[serde(default)]
    a: Option<f64>,
    #[serde(default)]
    eta: Option<FileEta>,
    #[serde(default)]
    pieces: Option<Vec<BilinearPiece>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum FileEta {
    Constant(f64),
    Bilinear { c00: f64, c10: f64, c01: f64, c11: f64 },
}

/// Parse a system description from TOML text.
///
/// ```toml
/// [[subsystems]]
/// label = "s1"
/// lo = 0.0
/// hi = 1.0
/// [[subsystems.initial]]
/// shape = "gaussian"   # gaussian | uniform | point
/// mu = 0.8
/// sigma = 0.05
/// mass = 0.5
///
/// [[rules]]
/// source = "s1"
/// partner = "s2"
/// target = "s1"
/// family = "left"      # left | right | away | toward | identity | piecewise
/// gamma = 0.4
/// eta = 1.0
/// ```
pub fn parse_system(text: &str) -> Result<KineticSystem> {
    let file: FileSystem =
        toml::from_str(text).map_err(|e| KinError::SystemFile(e.to_string()))?;

    let mut subsystems = Vec::with_capacity(file.subsystems.len());
    for fs in &file.subsystems {
        let domain = Domain::new(fs.lo, fs.hi)?;
        let mut initial = Vec::with_capacity(fs.initial.len());
        for c in &fs.initial {
            let shape = match c.shape.as_str() {
                "gaussian" => ComponentShape::TruncatedGaussian {
                    mu: c.mu.ok_or_else(|| miss("gaussian", "mu"))?,
                    sigma: c.sigma.ok_or_else(|| miss("gaussian", "sigma"))?,
                },
                "uniform" => ComponentShape::Uniform,
                "point" => ComponentShape::PointMass {
                    mu: c.mu.ok_or_else(|| miss("point", "mu"))?,
                    width: c.width.unwrap_or(1e-3),
                },
                other => {
                    return Err(KinError::SystemFile(format!(
                        "unknown component shape '{other}'"
                    )))
                }
            };
            initial.push(InitialComponent { shape, mass: c.mass });
        }
        subsystems.push(Subsystem {
            label: fs.label.clone(),
            domain,
            initial,
        });
    }

    let sys_stub = KineticSystem {
        subsystems,
        rules: Vec::new(),
    };
    let index = |label: &str| -> Result<usize> {
        sys_stub
            .subsystem_index(label)
            .ok_or_else(|| KinError::SystemFile(format!("unknown subsystem label '{label}'")))
    };

    let mut rules = Vec::with_capacity(file.rules.len());
    for fr in &file.rules {
        let need_gamma = || fr.gamma.ok_or_else(|| miss(&fr.family, "gamma"));
        let need_a = || fr.a.ok_or_else(|| miss(&fr.family, "a"));
        let phi = match fr.family.as_str() {
            "left" => TransitionFunction::Left { gamma: need_gamma()? },
            "right" => TransitionFunction::Right { gamma: need_gamma()? },
            "away" => TransitionFunction::AwayFrom {
                gamma: need_gamma()?,
                a: need_a()?,
            },
            "toward" => TransitionFunction::Toward {
                gamma: need_gamma()?,
                a: need_a()?,
            },
            "identity" => TransitionFunction::Identity,
            "piecewise" => TransitionFunction::PiecewiseBilinear {
                pieces: fr
                    .pieces
                    .clone()
                    .ok_or_else(|| miss("piecewise", "pieces"))?,
            },
            other => {
                return Err(KinError::SystemFile(format!(
                    "unknown transition family '{other}'"
                )))
            }
        };
        let eta = match &fr.eta {
            None => EncounterRate::Constant(1.0),
            Some(FileEta::Constant(c)) => EncounterRate::Constant(*c),
            Some(FileEta::Bilinear { c00, c10, c01, c11 }) => EncounterRate::Bilinear {
                c00: *c00,
                c10: *c10,
                c01: *c01,
                c11: *c11,
            },
        };
        rules.push(InteractionRule {
            source: index(&fr.source)?,
            partner: index(&fr.partner)?,
            target: index(&fr.target)?,
            phi,
            eta,
        });
    }

    Ok(KineticSystem {
        subsystems: sys_stub.subsystems,
        rules,
    })
}

fn miss(ctx: &str, field: &str) -> KinError {
    KinError::SystemFile(format!("{ctx}: missing required field '{field}'"))
}

/// Read and parse a system description file.
pub fn load_system(path: &std::path::Path) -> Result<KineticSystem> {
    let text = std::fs::read_to_string(path)?;
    parse_system(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit() -> Domain {
        Domain::unit()
    }

    fn pieces_of(phi: &TransitionFunction) -> Vec<BilinearPiece> {
        phi.pieces(unit(), unit()).unwrap()
    }

    #[test]
    fn left_matches_closed_form() {
        let p = pieces_of(&TransitionFunction::Left { gamma: 0.4 });
        assert_abs_diff_eq!(eval_phi(&p, 1.0, 0.5).unwrap(), 0.8, epsilon = 1e-15);
        for y in [0.0, 0.3, 1.0] {
            assert_abs_diff_eq!(eval_phi(&p, 0.0, y).unwrap(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn right_upper_boundary_fixed() {
        for gamma in [0.1, 0.5, 1.0] {
            let p = pieces_of(&TransitionFunction::Right { gamma });
            for y in [0.0, 0.4, 1.0] {
                assert_abs_diff_eq!(eval_phi(&p, 1.0, y).unwrap(), 1.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn toward_agrees_at_threshold_from_both_branches() {
        let p = pieces_of(&TransitionFunction::Toward { gamma: 0.7, a: 0.5 });
        assert_eq!(p.len(), 2);
        for y in [0.0, 0.2, 0.9, 1.0] {
            assert_abs_diff_eq!(p[0].eval(0.5, y), 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(p[1].eval(0.5, y), 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn away_from_is_discontinuous_at_threshold() {
        let p = pieces_of(&TransitionFunction::AwayFrom { gamma: 0.6, a: 0.4 });
        let mut saw_jump = false;
        for y in [0.0, 0.25, 0.5, 0.75] {
            let below = p[0].eval(0.4, y);
            let above = p[1].eval(0.4, y);
            if (below - above).abs() > 1e-12 {
                saw_jump = true;
            }
        }
        assert!(saw_jump);
    }

    #[test]
    fn eval_phi_rejects_outside_domain() {
        let p = pieces_of(&TransitionFunction::Left { gamma: 0.4 });
        assert!(matches!(eval_phi(&p, 1.5, 0.5), Err(KinError::Domain(_))));
    }

    #[test]
    fn partial_x_closed_forms() {
        let left = pieces_of(&TransitionFunction::Left { gamma: 0.4 });
        assert_abs_diff_eq!(phi_partial_x(&left, 0.3, 0.5).unwrap(), 0.8, epsilon = 1e-15);
        let ident = pieces_of(&TransitionFunction::Identity);
        assert_abs_diff_eq!(phi_partial_x(&ident, 0.3, 0.9).unwrap(), 1.0, epsilon = 1e-15);
        let right = pieces_of(&TransitionFunction::Right { gamma: 1.0 });
        assert_abs_diff_eq!(phi_partial_x(&right, 0.3, 0.0).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn partial_x_errors_on_piece_boundary() {
        let p = pieces_of(&TransitionFunction::AwayFrom { gamma: 0.6, a: 0.4 });
        assert!(matches!(
            phi_partial_x(&p, 0.4, 0.5),
            Err(KinError::PieceBoundary(_))
        ));
    }

    #[test]
    fn levelset_left_and_identity() {
        let left = pieces_of(&TransitionFunction::Left { gamma: 0.4 });
        let roots = phi_levelset_x(&left, 0.4, 0.5);
        assert_eq!(roots.len(), 1);
        assert_abs_diff_eq!(roots[0], 0.5, epsilon = 1e-14);

        // Root would be 1.5, outside the source range.
        assert!(phi_levelset_x(&left, 0.9, 1.0).is_empty());

        let ident = pieces_of(&TransitionFunction::Identity);
        let roots = phi_levelset_x(&ident, 0.3, 0.77);
        assert_eq!(roots.len(), 1);
        assert_abs_diff_eq!(roots[0], 0.3, epsilon = 1e-15);
    }

    fn single_rule_system(phi: TransitionFunction) -> KineticSystem {
        KineticSystem {
            subsystems: vec![
                Subsystem {
                    label: "s1".into(),
                    domain: unit(),
                    initial: vec![InitialComponent {
                        shape: ComponentShape::Uniform,
                        mass: 0.5,
                    }],
                },
                Subsystem {
                    label: "s2".into(),
                    domain: unit(),
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
                eta: EncounterRate::Constant(1.0),
            }],
        }
    }

    #[test]
    fn validation_accepts_table_families_on_unit_domains() {
        for phi in [
            TransitionFunction::Left { gamma: 0.4 },
            TransitionFunction::Right { gamma: 1.0 },
            TransitionFunction::AwayFrom { gamma: 0.9, a: 0.5 },
            TransitionFunction::Toward { gamma: 0.9, a: 0.25 },
            TransitionFunction::Identity,
        ] {
            let sys = single_rule_system(phi.clone());
            let report = validate_system(&sys);
            assert!(report.passed(), "{}: {report}", phi.family_name());
        }
    }

    #[test]
    fn validation_rejects_escaping_gamma() {
        let sys = single_rule_system(TransitionFunction::PiecewiseBilinear {
            // Left with gamma = 1.5, expressed directly since the typed
            // family already rejects gamma > 1.
            pieces: vec![BilinearPiece {
                x_lo: 0.0,
                x_hi: 1.0,
                y_lo: 0.0,
                y_hi: 1.0,
                c00: 0.0,
                c10: 1.0,
                c01: 0.0,
                c11: -1.5,
            }],
        });
        let report = validate_system(&sys);
        assert!(!report.passed());
        let v = &report.violations[0];
        assert_eq!(v.witness, Some((1.0, 1.0)));
        assert!(v.message.contains("-0.5"));
    }

    #[test]
    fn validation_rejects_duplicate_pair() {
        let mut sys = single_rule_system(TransitionFunction::Left { gamma: 0.4 });
        sys.rules.push(InteractionRule {
            source: 0,
            partner: 1,
            target: 0,
            phi: TransitionFunction::Identity,
            eta: EncounterRate::Constant(1.0),
        });
        let report = validate_system(&sys);
        assert!(!report.passed());
        assert!(report
            .violations
            .iter()
            .any(|v| v.message.contains("duplicate rule")));
    }

    #[test]
    fn validation_rejects_bad_mass_total() {
        let mut sys = single_rule_system(TransitionFunction::Left { gamma: 0.4 });
        sys.subsystems[0].initial[0].mass = 0.7;
        let report = validate_system(&sys);
        assert!(!report.passed());
    }

    #[test]
    fn initial_uniform_and_zero_mass() {
        let sys = single_rule_system(TransitionFunction::Identity);
        // Mass 0.5 uniform on [0, 1] evaluates to 0.5 everywhere.
        assert_abs_diff_eq!(eval_initial(&sys, 0, 0.3), 0.5, epsilon = 1e-15);
        let mut sys2 = sys.clone();
        sys2.subsystems[0].initial[0].mass = 0.0;
        assert_eq!(eval_initial(&sys2, 0, 0.3), 0.0);
    }

    #[test]
    fn truncated_gaussian_integrates_to_mass_fraction() {
        let mut sys = single_rule_system(TransitionFunction::Identity);
        sys.subsystems[0].initial[0] = InitialComponent {
            shape: ComponentShape::TruncatedGaussian { mu: 0.8, sigma: 0.05 },
            mass: 0.5,
        };
        let q = crate::basis::gauss_legendre(200, 0.0, 1.0).unwrap();
        let integral = q.integrate(|u| eval_initial(&sys, 0, u));
        assert_abs_diff_eq!(integral, 0.5, epsilon = 1e-10);
        // Closed-form bin masses agree with the quadrature of the pdf.
        let q2 = crate::basis::gauss_legendre(200, 0.2, 0.9).unwrap();
        let part = q2.integrate(|u| eval_initial(&sys, 0, u));
        assert_abs_diff_eq!(initial_mass_in(&sys, 0, 0.2, 0.9), part, epsilon = 1e-10);
    }

    #[test]
    fn parse_roundtrip_and_labels() {
        let text = r#"
[[subsystems]]
label = "a"
lo = 0.0
hi = 1.0
[[subsystems.initial]]
shape = "uniform"
mass = 0.5

[[subsystems]]
label = "b"
lo = 0.0
hi = 1.0
[[subsystems.initial]]
shape = "gaussian"
mu = 0.2
sigma = 0.1
mass = 0.5

[[rules]]
source = "a"
partner = "b"
target = "a"
family = "left"
gamma = 0.4
eta = 1.0
"#;
        let sys = parse_system(text).unwrap();
        assert_eq!(sys.subsystems.len(), 2);
        assert_eq!(sys.rules.len(), 1);
        assert_eq!(sys.rules[0].partner, 1);
        assert!(validate_system(&sys).passed());
        assert_eq!(
            sys.rules[0].phi,
            TransitionFunction::Left { gamma: 0.4 }
        );
    }

    #[test]
    fn parse_rejects_unknown_label() {
        let text = r#"
[[subsystems]]
label = "a"
lo = 0.0
hi = 1.0

[[rules]]
source = "a"
partner = "zzz"
target = "a"
family = "identity"
"#;
        assert!(parse_system(text).is_err());
    }

    #[test]
    fn content_hash_tracks_parameters() {
        let a = single_rule_system(TransitionFunction::Left { gamma: 0.4 });
        let b = single_rule_system(TransitionFunction::Left { gamma: 0.5 });
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }

    proptest! {
        // Bilinearity: extrema over a rectangle occur at corners. Compare the
        // corner min/max against a dense grid sample.
        #[test]
        fn corner_extrema_dominate_grid(
            gamma in 0.05..1.0f64,
            a in 0.1..0.9f64,
            fam in 0usize..4,
        ) {
            let phi = match fam {
                0 => TransitionFunction::Left { gamma },
                1 => TransitionFunction::Right { gamma },
                2 => TransitionFunction::AwayFrom { gamma, a },
                _ => TransitionFunction::Toward { gamma, a },
            };
            let pieces = phi.pieces(unit(), unit()).unwrap();
            for piece in &pieces {
                let mut clo = f64::INFINITY;
                let mut chi = f64::NEG_INFINITY;
                for (x, y) in piece.corners() {
                    let v = piece.eval(x, y);
                    clo = clo.min(v);
                    chi = chi.max(v);
                }
                for ix in 0..=20 {
                    for iy in 0..=20 {
                        let x = piece.x_lo + (piece.x_hi - piece.x_lo) * ix as f64 / 20.0;
                        let y = piece.y_lo + (piece.y_hi - piece.y_lo) * iy as f64 / 20.0;
                        let v = piece.eval(x, y);
                        prop_assert!(v >= clo - 1e-12 && v <= chi + 1e-12);
                    }
                }
            }
        }

        // Toward is continuous at the threshold; both branches give a.
        #[test]
        fn toward_continuous_at_threshold(gamma in 0.05..1.0f64, a in 0.1..0.9f64, y in 0.0..1.0f64) {
            let p = TransitionFunction::Toward { gamma, a }.pieces(unit(), unit()).unwrap();
            prop_assert!((p[0].eval(a, y) - a).abs() < 1e-12);
            prop_assert!((p[1].eval(a, y) - a).abs() < 1e-12);
        }
    }
}
