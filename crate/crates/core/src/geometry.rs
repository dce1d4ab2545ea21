//! Boundary curves, arclength, parameter meshes, node patches and shape regularity.
//!
//! A [`BoundaryCurve`] is a NURBS curve. For fast and stable evaluation every
//! geometry element (interval between distinct breakpoints) is converted once
//! into homogeneous polynomials `X(u), Y(u), W(u)` in the local coordinate
//! `u = (t - t0) / h`, and once more in `v = (t1 - t) / h` for use near the
//! right end. Chord vectors `(gamma(s) - gamma(t)) / (s - t)` are then
//! evaluated by divided differences, without cancellation near the diagonal.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::quadrature::adaptive_gauss;
use crate::splines::{bspline_local, KnotVector, Side, WeightVector, MAX_DEGREE};
use crate::{Error, Result};

pub type Point = [f64; 2];

const CORNER_ANGLE: f64 = 1e-10;

/// One rational polynomial piece of the curve in monomial form on `u in [0, 1]`.
#[derive(Clone, Debug)]
struct Piece {
    t0: f64,
    t1: f64,
    h: f64,
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    /// The same polynomials in `v = (t1 - t) / h`, used near the right end
    /// where `(t - t0) / h` has lost relative precision.
    rev: [Vec<f64>; 3],
}

fn horner(c: &[f64], u: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * u + a)
}

fn horner_d(c: &[f64], u: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut d = 0.0;
    for &a in c.iter().rev() {
        d = d * u + v;
        v = v * u + a;
    }
    (v, d)
}

/// `(P(u1) - P(u2)) / (u1 - u2)` for a monomial polynomial.
fn divided(c: &[f64], u1: f64, u2: f64) -> f64 {
    let mut q = 1.0; // divided difference of u^k, k = 1
    let mut pow2 = 1.0; // u2^(k-1)
    let mut acc = 0.0;
    for (k, &a) in c.iter().enumerate().skip(1) {
        if k > 1 {
            pow2 *= u2;
            q = u1 * q + pow2;
        }
        acc += a * q;
    }
    acc
}

fn rational_point(c: [&[f64]; 3], u: f64) -> Point {
    let w = horner(c[2], u);
    [horner(c[0], u) / w, horner(c[1], u) / w]
}

/// `d gamma / du` of a rational polynomial curve.
fn rational_derivative(c: [&[f64]; 3], u: f64) -> Point {
    let (x, dx) = horner_d(c[0], u);
    let (y, dy) = horner_d(c[1], u);
    let (w, dw) = horner_d(c[2], u);
    let s = 1.0 / (w * w);
    [(dx * w - x * dw) * s, (dy * w - y * dw) * s]
}

/// `(gamma(u1) - gamma(u2)) / (u1 - u2)` without cancellation.
fn rational_chord(c: [&[f64]; 3], u1: f64, u2: f64) -> Point {
    if u1 == u2 {
        return rational_derivative(c, u1);
    }
    let w1 = horner(c[2], u1);
    let w2 = horner(c[2], u2);
    let x2 = horner(c[0], u2);
    let y2 = horner(c[1], u2);
    let dx = divided(c[0], u1, u2);
    let dy = divided(c[1], u1, u2);
    let dw = divided(c[2], u1, u2);
    let s = 1.0 / (w1 * w2);
    [(dx * w2 - x2 * dw) * s, (dy * w2 - y2 * dw) * s]
}

impl Piece {
    fn fwd(&self) -> [&[f64]; 3] {
        [&self.x, &self.y, &self.w]
    }

    fn bwd(&self) -> [&[f64]; 3] {
        [&self.rev[0], &self.rev[1], &self.rev[2]]
    }

    fn near_start(&self, t: f64) -> bool {
        t - self.t0 <= self.t1 - t
    }

    fn point(&self, u: f64) -> Point {
        rational_point(self.fwd(), u)
    }

    fn derivative(&self, u: f64) -> Point {
        let d = rational_derivative(self.fwd(), u);
        [d[0] / self.h, d[1] / self.h]
    }

    fn point_at(&self, t: f64) -> Point {
        if self.near_start(t) {
            rational_point(self.fwd(), (t - self.t0) / self.h)
        } else {
            rational_point(self.bwd(), (self.t1 - t) / self.h)
        }
    }

    fn derivative_at(&self, t: f64) -> Point {
        if self.near_start(t) {
            self.derivative((t - self.t0) / self.h)
        } else {
            let d = rational_derivative(self.bwd(), (self.t1 - t) / self.h);
            [-d[0] / self.h, -d[1] / self.h]
        }
    }

    /// `(gamma(s) - gamma(t)) / (s - t)` for parameters inside the piece.
    fn chord_at(&self, s: f64, t: f64) -> Point {
        if self.near_start(0.5 * (s + t)) {
            let c = rational_chord(self.fwd(), (s - self.t0) / self.h, (t - self.t0) / self.h);
            [c[0] / self.h, c[1] / self.h]
        } else {
            let c = rational_chord(self.bwd(), (self.t1 - s) / self.h, (self.t1 - t) / self.h);
            [-c[0] / self.h, -c[1] / self.h]
        }
    }
}

/// What [`BoundaryCurve::eval`] should return.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurveQuery {
    Point,
    Tangent,
    UnitNormal,
}

/// Result of a curve query; `at_corner` flags a one-sided tangent or normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveValue {
    pub value: Point,
    pub at_corner: bool,
}

/// NURBS boundary curve `gamma(t) = sum C_i R_i(t)`.
#[derive(Clone, Debug)]
pub struct BoundaryCurve {
    knots: KnotVector,
    weights: WeightVector,
    control_points: Vec<Point>,
    closed: bool,
    pieces: Vec<Piece>,
    /// Distinct breakpoints, `pieces.len() + 1` entries.
    breaks: Vec<f64>,
    /// Corner flag per entry of `breaks`; for closed curves the first and last agree.
    corners: Vec<bool>,
    /// Cumulative arclength at each entry of `breaks`.
    cumulative: Vec<f64>,
    /// +1 for counterclockwise (or open) curves, -1 for clockwise.
    orientation: f64,
}

/// Serializable description of a NURBS curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub degree: usize,
    pub breakpoints: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub weights: Vec<f64>,
    pub control_points: Vec<Point>,
    pub closed: bool,
}

impl BoundaryCurve {
    /// Builds a curve; closed curves need a periodic knot vector, open ones an open one.
    pub fn new(knots: KnotVector, weights: WeightVector, control_points: Vec<Point>, closed: bool) -> Result<Self> {
        if knots.is_periodic() != closed {
            return Err(Error::InvalidGeometry(
                "closed curves use periodic knot vectors and open curves open ones".into(),
            ));
        }
        if control_points.len() != knots.dim() {
            return Err(Error::DimensionMismatch {
                expected: knots.dim(),
                got: control_points.len(),
            });
        }
        if weights.len() != knots.dim() {
            return Err(Error::DimensionMismatch {
                expected: knots.dim(),
                got: weights.len(),
            });
        }
        let breaks = knots.breakpoints().to_vec();
        let p = knots.degree();
        let pieces: Vec<Piece> = breaks
            .windows(2)
            .map(|w| build_piece(&knots, &weights, &control_points, w[0], w[1], p))
            .collect();
        let mut curve = Self {
            knots,
            weights,
            control_points,
            closed,
            pieces,
            breaks,
            corners: Vec::new(),
            cumulative: Vec::new(),
            orientation: 1.0,
        };
        curve.validate()?;
        curve.corners = curve.detect_corners();
        let mut cum = vec![0.0];
        for i in 0..curve.pieces.len() {
            let l = curve.piece_arclength(i, curve.breaks[i], curve.breaks[i + 1]);
            cum.push(cum[i] + l);
        }
        curve.cumulative = cum;
        if closed
            && curve.signed_area() < 0.0 {
                curve.orientation = -1.0;
            }
        Ok(curve)
    }

    pub fn from_config(cfg: &CurveConfig) -> Result<Self> {
        let knots = if cfg.closed {
            KnotVector::periodic(cfg.breakpoints.clone(), cfg.multiplicities.clone(), cfg.degree)?
        } else {
            KnotVector::open(cfg.breakpoints.clone(), cfg.multiplicities.clone(), cfg.degree)?
        };
        let weights = WeightVector::new(cfg.weights.clone(), &knots)?;
        Self::new(knots, weights, cfg.control_points.clone(), cfg.closed)
    }

    pub fn to_config(&self) -> CurveConfig {
        CurveConfig {
            degree: self.degree(),
            breakpoints: self.knots.breakpoints().to_vec(),
            multiplicities: self.knots.multiplicities().to_vec(),
            weights: self.weights.as_slice().to_vec(),
            control_points: self.control_points.clone(),
            closed: self.closed,
        }
    }

    /// Reads a TOML geometry file with the fields of [`CurveConfig`].
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: CurveConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_config(&cfg)
    }

    /// Piecewise rational Bezier curve joined with `C^0` continuity.
    ///
    /// `segments[j]` holds `p + 1` control points with weights; end weights must
    /// be 1 and consecutive segments must share their end points. Interior
    /// breakpoints (and the seam of a closed curve) get multiplicity `p`.
    pub fn from_bezier_segments(
        degree: usize,
        segments: &[(Vec<Point>, Vec<f64>)],
        breakpoints: &[f64],
        closed: bool,
    ) -> Result<Self> {
        let p = degree;
        let n = segments.len();
        if p == 0 || breakpoints.len() != n + 1 || n == 0 {
            return Err(Error::InvalidGeometry("need degree >= 1 and one breakpoint more than segments".into()));
        }
        for (j, (pts, ws)) in segments.iter().enumerate() {
            if pts.len() != p + 1 || ws.len() != p + 1 {
                return Err(Error::InvalidGeometry(format!("segment {j} needs {} points and weights", p + 1)));
            }
            if ws[0] != 1.0 || ws[p] != 1.0 {
                return Err(Error::InvalidGeometry(format!("segment {j} end weights must be 1")));
            }
            let next = if j + 1 < n {
                Some(&segments[j + 1].0[0])
            } else if closed {
                Some(&segments[0].0[0])
            } else {
                None
            };
            if let Some(q) = next {
                let e = pts[p];
                if (e[0] - q[0]).hypot(e[1] - q[1]) > 1e-14 * (1.0 + e[0].hypot(e[1])) {
                    return Err(Error::InvalidGeometry(format!("segment {j} does not join its successor")));
                }
            }
        }
        let mut mults = vec![p; n + 1];
        if closed {
            let knots = KnotVector::periodic(breakpoints.to_vec(), mults, p)?;
            let dim = knots.dim();
            let mut cps = vec![[0.0; 2]; dim];
            let mut ws = vec![1.0; dim];
            for (j, (pts, w)) in segments.iter().enumerate() {
                for k in 1..=p {
                    let i = (j * p + k) as isize - p as isize - 1;
                    let idx = knots.basis_index(i);
                    cps[idx] = pts[k];
                    ws[idx] = w[k];
                }
            }
            let weights = WeightVector::new(ws, &knots)?;
            Self::new(knots, weights, cps, true)
        } else {
            mults[0] = p + 1;
            mults[n] = p + 1;
            let knots = KnotVector::open(breakpoints.to_vec(), mults, p)?;
            let mut cps = vec![segments[0].0[0]];
            let mut ws = vec![1.0];
            for (pts, w) in segments {
                cps.extend_from_slice(&pts[1..]);
                ws.extend_from_slice(&w[1..]);
            }
            let weights = WeightVector::new(ws, &knots)?;
            Self::new(knots, weights, cps, false)
        }
    }

    fn validate(&self) -> Result<()> {
        for (i, piece) in self.pieces.iter().enumerate() {
            for k in 0..=16 {
                let u = k as f64 / 16.0;
                let w = horner(&piece.w, u);
                let d = piece.derivative(u);
                if !(w > 0.0) {
                    return Err(Error::InvalidGeometry(format!("nonpositive denominator on piece {i}")));
                }
                if d[0].hypot(d[1]) == 0.0 || !d[0].is_finite() || !d[1].is_finite() {
                    return Err(Error::InvalidGeometry(format!("vanishing tangent on piece {i}")));
                }
            }
        }
        let a = self.pieces[0].point(0.0);
        let last = self.pieces.last().unwrap();
        let b = last.point(1.0);
        let gap = (a[0] - b[0]).hypot(a[1] - b[1]);
        let scale = self.control_points.iter().fold(1e-300f64, |m, c| m.max(c[0].abs()).max(c[1].abs()));
        if self.closed && gap > 1e-12 * scale {
            return Err(Error::InvalidGeometry("closed curve does not close".into()));
        }
        if !self.closed && gap <= 1e-12 * scale {
            return Err(Error::InvalidGeometry("open curve has coinciding end points".into()));
        }
        Ok(())
    }

    fn detect_corners(&self) -> Vec<bool> {
        let n = self.pieces.len();
        let angle = |l: Point, r: Point| {
            let cross = l[0] * r[1] - l[1] * r[0];
            let dot = l[0] * r[0] + l[1] * r[1];
            cross.atan2(dot).abs()
        };
        let mut corners = vec![false; n + 1];
        for j in 1..n {
            let l = self.pieces[j - 1].derivative(1.0);
            let r = self.pieces[j].derivative(0.0);
            if angle(l, r) > CORNER_ANGLE {
                corners[j] = true;
            }
        }
        if self.closed {
            let l = self.pieces[n - 1].derivative(1.0);
            let r = self.pieces[0].derivative(0.0);
            let c = angle(l, r) > CORNER_ANGLE;
            corners[0] = c;
            corners[n] = c;
        }
        corners
    }

    fn signed_area(&self) -> f64 {
        // Green's formula with Gauss quadrature on every piece
        let rule = &crate::quadrature::RuleSet::standard().smooth;
        self.pieces
            .iter()
            .map(|pc| {
                rule.integrate_on(0.0, 1.0, |u| {
                    let x = pc.point(u);
                    let d = pc.derivative(u);
                    0.5 * (x[0] * d[1] - x[1] * d[0]) * pc.h
                })
            })
            .sum()
    }

    pub fn degree(&self) -> usize {
        self.knots.degree()
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn control_points(&self) -> &[Point] {
        &self.control_points
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn a(&self) -> f64 {
        self.breaks[0]
    }

    pub fn b(&self) -> f64 {
        *self.breaks.last().unwrap()
    }

    pub fn period(&self) -> f64 {
        self.b() - self.a()
    }

    /// Distinct geometry breakpoints.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    /// Geometry breakpoints where the tangent direction jumps.
    pub fn corner_parameters(&self) -> Vec<f64> {
        let n = self.breaks.len();
        self.breaks
            .iter()
            .zip(&self.corners)
            .enumerate()
            .filter(|(j, (_, c))| **c && !(self.closed && *j == n - 1))
            .map(|(_, (t, _))| *t)
            .collect()
    }

    /// Whether `t` is (up to period) a corner breakpoint.
    pub fn is_corner(&self, t: f64) -> bool {
        let r = self.reduce(t);
        self.breaks
            .iter()
            .zip(&self.corners)
            .any(|(&z, &c)| c && (z == r || (self.closed && z == self.b() && r == self.a())))
    }

    /// Total arclength `L`.
    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Maps to `[a, b)` for closed curves; identity otherwise.
    pub fn reduce(&self, t: f64) -> f64 {
        if !self.closed {
            return t;
        }
        let (a, b) = (self.a(), self.b());
        if (a..b).contains(&t) {
            return t;
        }
        let r = a + (t - a).rem_euclid(b - a);
        if r >= b {
            a
        } else {
            r
        }
    }

    /// Piece containing `t` from the given side, and the period shift of `t`.
    fn locate(&self, t: f64, side: Side) -> (usize, f64) {
        let n = self.pieces.len();
        if self.closed {
            let (a, b) = (self.a(), self.b());
            let period = b - a;
            let q = ((t - a) / period).floor();
            let mut shift = q * period;
            let mut r = t - shift;
            if r >= b {
                r -= period;
                shift += period;
            }
            if r < a {
                r += period;
                shift -= period;
            }
            let mut j = self.breaks.partition_point(|&z| z <= r).saturating_sub(1).min(n - 1);
            if side == Side::Left && r == self.breaks[j] {
                if j == 0 {
                    return (n - 1, shift - period);
                }
                j -= 1;
            }
            (j, shift)
        } else {
            let j = match side {
                Side::Right => self.breaks.partition_point(|&z| z <= t).saturating_sub(1),
                Side::Left => self.breaks.partition_point(|&z| z < t).saturating_sub(1),
            };
            (j.min(n - 1), 0.0)
        }
    }

    fn check_param(&self, t: f64) -> Result<()> {
        if !t.is_finite() || (!self.closed && (t < self.a() || t > self.b())) {
            return Err(Error::OutsideDomain { t, a: self.a(), b: self.b() });
        }
        Ok(())
    }

    fn default_side(&self, t: f64) -> Side {
        if !self.closed && t >= self.b() {
            Side::Left
        } else {
            Side::Right
        }
    }

    /// `gamma(t)`; parameters outside `[a, b]` wrap for closed curves.
    pub fn point(&self, t: f64) -> Point {
        let (j, shift) = self.locate(t, self.default_side(t));
        let pc = &self.pieces[j];
        pc.point_at(t - shift)
    }

    /// `gamma'(t)`, right limit at breakpoints (left limit at `b` for open curves).
    pub fn derivative(&self, t: f64) -> Point {
        self.derivative_side(t, self.default_side(t))
    }

    pub fn derivative_side(&self, t: f64, side: Side) -> Point {
        let (j, shift) = self.locate(t, side);
        let pc = &self.pieces[j];
        pc.derivative_at(t - shift)
    }

    /// `|gamma'(t)|`.
    pub fn speed(&self, t: f64) -> f64 {
        let d = self.derivative(t);
        d[0].hypot(d[1])
    }

    /// Outward unit normal (for closed curves); `(y', -x') / |gamma'|` rotated
    /// consistently for open curves.
    pub fn normal(&self, t: f64) -> Point {
        let d = self.derivative(t);
        let s = self.orientation / d[0].hypot(d[1]);
        [d[1] * s, -d[0] * s]
    }

    /// Point, tangent or unit normal with a corner flag.
    pub fn eval(&self, t: f64, what: CurveQuery) -> Result<CurveValue> {
        self.check_param(t)?;
        let value = match what {
            CurveQuery::Point => self.point(t),
            CurveQuery::Tangent => self.derivative(t),
            CurveQuery::UnitNormal => self.normal(t),
        };
        let at_corner = what != CurveQuery::Point && self.is_corner(t);
        Ok(CurveValue { value, at_corner })
    }

    /// `(gamma(s) - gamma(t)) / (s - t)`, the derivative if `s == t`.
    ///
    /// Both parameters may lie outside `[a, b]` for closed curves; the chord is
    /// taken along the unwrapped parameter line. When the segment `[s, t]`
    /// crosses breakpoints, the chord is assembled from per-piece chords, which
    /// keeps it accurate for nearby points on either side of a corner.
    pub fn chord_vector(&self, s: f64, t: f64) -> Point {
        if s == t {
            return self.derivative(t);
        }
        let (lo, hi) = if s < t { (s, t) } else { (t, s) };
        let (j, shift) = self.locate(lo, Side::Right);
        let end = self.breaks[j + 1] + shift;
        if hi <= end {
            let pc = &self.pieces[j];
            return pc.chord_at(lo - shift, hi - shift);
        }
        // Walk across at most a few pieces; otherwise the points are far apart.
        let mut acc = [0.0; 2];
        let mut cur = lo;
        let (mut jj, mut sh) = (j, shift);
        for _ in 0..4 {
            let pc = &self.pieces[jj];
            let e = (self.breaks[jj + 1] + sh).min(hi);
            let c = pc.chord_at(cur - sh, e - sh);
            acc[0] += c[0] * (e - cur);
            acc[1] += c[1] * (e - cur);
            cur = e;
            if cur >= hi {
                let len = hi - lo;
                return [acc[0] / len, acc[1] / len];
            }
            jj += 1;
            if jj == self.pieces.len() {
                if !self.closed {
                    break;
                }
                jj = 0;
                sh += self.period();
            }
        }
        let x = self.point(s);
        let y = self.point(t);
        [(x[0] - y[0]) / (s - t), (x[1] - y[1]) / (s - t)]
    }

    fn piece_arclength(&self, j: usize, t0: f64, t1: f64) -> f64 {
        if t1 <= t0 {
            return 0.0;
        }
        let pc = &self.pieces[j];
        let scale = (t1 - t0) * self.pieces[j].derivative(0.5).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (v, _) = adaptive_gauss(
            &mut |t| {
                let d = pc.derivative_at(t);
                d[0].hypot(d[1])
            },
            t0,
            t1,
            1e-15 * scale.max(1e-300),
            64,
        );
        v
    }

    /// Arclength of `gamma([t0, t1])`; for closed curves `t1 < t0` wraps around.
    pub fn arclength(&self, t0: f64, t1: f64) -> f64 {
        if t0 == t1 {
            return 0.0;
        }
        if self.closed {
            let period = self.period();
            let a = self.reduce(t0);
            let mut b = a + (t1 - t0);
            if t1 < t0 {
                b = a + (t1 - t0).rem_euclid(period);
            }
            let whole = ((b - a) / period).floor();
            let rest = b - whole * period;
            return whole * self.length() + self.arclength_unwrapped(a, rest);
        }
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        self.arclength_unwrapped(lo, hi)
    }

    fn arclength_unwrapped(&self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let mut total = 0.0;
        let (mut j, mut shift) = self.locate(lo, Side::Right);
        let mut cur = lo;
        loop {
            let end = self.breaks[j + 1] + shift;
            let e = end.min(hi);
            if cur == self.breaks[j] + shift && e == end {
                total += self.cumulative[j + 1] - self.cumulative[j];
            } else {
                total += self.piece_arclength(j, cur - shift, e - shift);
            }
            cur = e;
            if cur >= hi {
                return total;
            }
            j += 1;
            if j == self.pieces.len() {
                j = 0;
                shift += self.period();
            }
        }
    }

    /// Arclength from `a` to `t` (`t` in `[a, b]`).
    pub fn arclength_from_start(&self, t: f64) -> f64 {
        let (j, _) = self.locate(t, if t >= self.b() { Side::Left } else { Side::Right });
        self.cumulative[j] + self.piece_arclength(j, self.breaks[j], t.min(self.breaks[j + 1]))
    }
}

fn build_piece(knots: &KnotVector, weights: &WeightVector, cps: &[Point], t0: f64, t1: f64, p: usize) -> Piece {
    let h = t1 - t0;
    let m = p + 1;
    // Chebyshev-Lobatto nodes; the sample at u = 0 becomes the constant term
    // exactly, so that points near the expansion end keep relative precision
    let nodes: Vec<f64> = (0..m)
        .map(|k| 0.5 * (1.0 - (std::f64::consts::PI * k as f64 / p as f64).cos()))
        .collect();
    let span = knots.find_span(0.5 * (t0 + t1), Side::Right);
    let w = weights.as_slice();
    let vander = DMatrix::from_fn(m, m, |r, c| nodes[r].powi(c as i32));
    let lu = vander.lu();
    let solve = |rhs: &DVector<f64>| -> Vec<f64> { lu.solve(rhs).expect("Vandermonde at distinct nodes").iter().copied().collect() };
    // homogeneous coordinates sampled at t(u), interpolated in u
    let fit = |t_of: &dyn Fn(f64) -> f64| -> [Vec<f64>; 3] {
        let mut hx = DVector::zeros(m);
        let mut hy = DVector::zeros(m);
        let mut hw = DVector::zeros(m);
        for (k, &u) in nodes.iter().enumerate() {
            let local = bspline_local(knots, span, t_of(u));
            for (i, b) in local.iter() {
                let idx = knots.basis_index(i);
                let wb = w[idx] * b;
                hx[k] += wb * cps[idx][0];
                hy[k] += wb * cps[idx][1];
                hw[k] += wb;
            }
        }
        let pin = |h: &DVector<f64>| {
            let mut c = solve(h);
            c[0] = h[0];
            c
        };
        [pin(&hx), pin(&hy), pin(&hw)]
    };
    debug_assert!(p <= MAX_DEGREE);
    let [x, y, wf] = fit(&|u| t0 + u * h);
    Piece {
        t0,
        t1,
        h,
        x,
        y,
        w: wf,
        rev: fit(&|v| t1 - v * h),
    }
}

/// Built-in curves used by the benchmark problems and tests.
pub mod builtin {
    use super::*;
    use std::f64::consts::PI;

    /// Straight slit `[-1, 1] x {0}` as a degree-1 curve on `[0, 1]`.
    pub fn slit() -> BoundaryCurve {
        BoundaryCurve::from_bezier_segments(1, &[(vec![[-1.0, 0.0], [1.0, 0.0]], vec![1.0, 1.0])], &[0.0, 1.0], false)
            .expect("slit geometry is valid")
    }

    /// Boundary of `[0, 1/2]^2`, degree 1, corners at `t = 0, 1/4, 1/2, 3/4`.
    /// Starts at `(1/2, 0)`, so the traces of `sinh(2 pi x) cos(2 pi y)` and
    /// its normal derivative vanish on `[1/4, 1/2]` and `[3/4, 1]`.
    pub fn square() -> BoundaryCurve {
        let c = [[0.5, 0.0], [0.5, 0.5], [0.0, 0.5], [0.0, 0.0]];
        let segs: Vec<(Vec<Point>, Vec<f64>)> = (0..4).map(|j| (vec![c[j], c[(j + 1) % 4]], vec![1.0, 1.0])).collect();
        BoundaryCurve::from_bezier_segments(1, &segs, &[0.0, 0.25, 0.5, 0.75, 1.0], true).expect("square geometry is valid")
    }

    /// Rational quadratic arc of radius `r` around the origin from angle `a0` to `a1`.
    pub fn arc(r: f64, a0: f64, a1: f64) -> (Vec<Point>, Vec<f64>) {
        let half = 0.5 * (a1 - a0);
        let mid = 0.5 * (a0 + a1);
        let w = half.cos();
        (
            vec![
                [r * a0.cos(), r * a0.sin()],
                [r / w * mid.cos(), r / w * mid.sin()],
                [r * a1.cos(), r * a1.sin()],
            ],
            vec![1.0, w, 1.0],
        )
    }

    fn line2(p: Point, q: Point) -> (Vec<Point>, Vec<f64>) {
        (vec![p, [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])], q], vec![1.0; 3])
    }

    /// Circle of radius `r` from four quarter arcs, degree 2.
    pub fn circle(r: f64) -> BoundaryCurve {
        let segs: Vec<_> = (0..4).map(|j| arc(r, j as f64 * PI / 2.0, (j + 1) as f64 * PI / 2.0)).collect();
        BoundaryCurve::from_bezier_segments(2, &segs, &[0.0, 0.25, 0.5, 0.75, 1.0], true).expect("circle geometry is valid")
    }

    /// Opening exponent of the pacman domain.
    pub const PACMAN_TAU: f64 = 4.0 / 7.0;
    pub const PACMAN_RADIUS: f64 = 0.1;

    /// Pacman `{r(cos b, sin b): r < 1/10, |b| < pi/(2 tau)}`, degree 2, on `[-1/2, 1/2]`.
    ///
    /// The reentrant corner (the origin) sits at `t = 0`, so that parameters of
    /// strongly refined elements on either side keep full relative precision.
    /// The edges occupy `[-1/6, 0]` and `[0, 1/6]` and the arc the rest, with
    /// the seam at its midpoint; this is the layout with the singularity at
    /// `1/2` and the normal jumps at `1/3, 2/3`, shifted by `-1/2`.
    pub fn pacman() -> BoundaryCurve {
        let r = PACMAN_RADIUS;
        let half = PI / (2.0 * PACMAN_TAU);
        let o = [0.0, 0.0];
        let lo = [r * (-half).cos(), r * (-half).sin()];
        let hi = [r * half.cos(), r * half.sin()];
        let third = half / 3.0;
        let segs = vec![
            arc(r, 0.0, third),
            arc(r, third, half),
            line2(hi, o),
            line2(o, lo),
            arc(r, -half, -third),
            arc(r, -third, 0.0),
        ];
        BoundaryCurve::from_bezier_segments(2, &segs, &[-0.5, -1.0 / 3.0, -1.0 / 6.0, 0.0, 1.0 / 6.0, 1.0 / 3.0, 0.5], true)
            .expect("pacman geometry is valid")
    }
}

/// Partition of the parameter domain into elements, with bisection levels.
#[derive(Clone, Debug)]
pub struct MeshPartition {
    curve: Arc<BoundaryCurve>,
    breakpoints: Vec<f64>,
    multiplicities: Vec<usize>,
    levels: Vec<u32>,
    param_lengths: Vec<f64>,
    arc_lengths: Vec<f64>,
}

/// Union of the elements containing a node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodePatch {
    /// Breakpoint index of the node.
    pub node: usize,
    /// Element indices, ordered along the curve.
    pub elements: Vec<usize>,
    /// Parameter intervals of the elements, unwrapped so that they are contiguous.
    pub intervals: Vec<(f64, f64)>,
    /// `|omega(z)|`
    pub arclength: f64,
    /// `|gamma^{-1}(omega(z))|`
    pub param_length: f64,
}

impl MeshPartition {
    /// Mesh with the given breakpoints (covering `[a, b]`), multiplicities and
    /// bisection levels per element.
    pub fn new(curve: Arc<BoundaryCurve>, breakpoints: Vec<f64>, multiplicities: Vec<usize>, levels: Vec<u32>) -> Result<Self> {
        let n = breakpoints.len();
        if n < 2 || multiplicities.len() != n || levels.len() != n - 1 {
            return Err(Error::InvalidGeometry("inconsistent mesh arrays".into()));
        }
        if breakpoints[0] != curve.a() || breakpoints[n - 1] != curve.b() || breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGeometry("mesh breakpoints must increase from a to b".into()));
        }
        for z in curve.breakpoints() {
            if breakpoints.binary_search_by(|x| x.total_cmp(z)).is_err() {
                return Err(Error::InvalidGeometry(format!("mesh misses geometry breakpoint {z}")));
            }
        }
        let param_lengths: Vec<f64> = breakpoints.windows(2).map(|w| w[1] - w[0]).collect();
        let arc_lengths: Vec<f64> = breakpoints.windows(2).map(|w| curve.arclength(w[0], w[1])).collect();
        let mesh = Self {
            curve,
            breakpoints,
            multiplicities,
            levels,
            param_lengths,
            arc_lengths,
        };
        if mesh.curve.is_closed() {
            let max = mesh.arc_lengths.iter().copied().fold(0.0, f64::max);
            if max > mesh.curve.length() / 4.0 * (1.0 + 1e-12) {
                return Err(Error::InvalidGeometry(format!(
                    "element of length {max} exceeds a quarter of the boundary"
                )));
            }
        }
        Ok(mesh)
    }

    /// Mesh whose breakpoints and multiplicities are the curve's own knots.
    pub fn from_curve(curve: Arc<BoundaryCurve>) -> Result<Self> {
        let bps = curve.knots().breakpoints().to_vec();
        let ms = curve.knots().multiplicities().to_vec();
        let levels = vec![0; bps.len() - 1];
        Self::new(curve, bps, ms, levels)
    }

    pub fn curve(&self) -> &Arc<BoundaryCurve> {
        &self.curve
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn multiplicities(&self) -> &[usize] {
        &self.multiplicities
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn n_elements(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn element(&self, j: usize) -> (f64, f64) {
        (self.breakpoints[j], self.breakpoints[j + 1])
    }

    /// Parameter length `h_Ť`.
    pub fn param_length(&self, j: usize) -> f64 {
        self.param_lengths[j]
    }

    /// Arclength `h_T`.
    pub fn arc_length(&self, j: usize) -> f64 {
        self.arc_lengths[j]
    }

    pub fn param_lengths(&self) -> &[f64] {
        &self.param_lengths
    }

    pub fn arc_lengths(&self) -> &[f64] {
        &self.arc_lengths
    }

    pub fn is_closed(&self) -> bool {
        self.curve.is_closed()
    }

    /// Node breakpoint indices: `1..=n` for closed curves (the seam is `n`), `0..=n` for open ones.
    pub fn nodes(&self) -> Vec<usize> {
        let n = self.n_elements();
        if self.is_closed() {
            (1..=n).collect()
        } else {
            (0..=n).collect()
        }
    }

    /// Elements containing a node, ordered along the curve.
    pub fn node_elements(&self, z: usize) -> Result<Vec<usize>> {
        let n = self.n_elements();
        if self.is_closed() {
            if z == 0 || z > n {
                return Err(Error::UnknownNode(z));
            }
            Ok(if z == n { vec![n - 1, 0] } else { vec![z - 1, z] })
        } else {
            if z > n {
                return Err(Error::UnknownNode(z));
            }
            Ok(if z == 0 {
                vec![0]
            } else if z == n {
                vec![n - 1]
            } else {
                vec![z - 1, z]
            })
        }
    }

    /// Node patch `omega(z)`.
    pub fn node_patch(&self, z: usize) -> Result<NodePatch> {
        let elements = self.node_elements(z)?;
        let period = self.curve.period();
        let intervals: Vec<(f64, f64)> = elements
            .iter()
            .enumerate()
            .map(|(k, &e)| {
                let (t0, t1) = self.element(e);
                if k == 1 && e == 0 && self.is_closed() && z == self.n_elements() {
                    (t0 + period, t1 + period)
                } else {
                    (t0, t1)
                }
            })
            .collect();
        let arclength = elements.iter().map(|&e| self.arc_lengths[e]).sum();
        let param_length = elements.iter().map(|&e| self.param_lengths[e]).sum();
        Ok(NodePatch {
            node: z,
            elements,
            intervals,
            arclength,
            param_length,
        })
    }

    /// Pairs of distinct elements that share a node.
    pub fn touching_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n_elements();
        let mut pairs: Vec<(usize, usize)> = (1..n).map(|j| (j - 1, j)).collect();
        if self.is_closed() && n > 2 {
            pairs.push((n - 1, 0));
        }
        pairs
    }

    /// Shape regularity `kappa` on the parameter domain.
    pub fn shape_regularity(&self) -> f64 {
        self.touching_pairs().into_iter().fold(1.0, |k, (i, j)| {
            let (a, b) = (self.param_lengths[i], self.param_lengths[j]);
            k.max(a / b).max(b / a)
        })
    }
}

/// Lower bound for the bi-Lipschitz constant of the arclength parametrization.
///
/// Samples `samples_per_piece` uniform parameters on every geometry piece and
/// takes the worst ratio of arclength to chord over all sample pairs with arc
/// distance at most `3L/4` for closed curves.
pub fn estimate_bilipschitz(curve: &BoundaryCurve, samples_per_piece: usize) -> f64 {
    let m = samples_per_piece.max(1);
    let mut params = Vec::new();
    for w in curve.breakpoints().windows(2) {
        for k in 0..m {
            params.push(w[0] + (w[1] - w[0]) * k as f64 / m as f64);
        }
    }
    if !curve.is_closed() {
        params.push(curve.b());
    }
    let arcs: Vec<f64> = params.iter().map(|&t| curve.arclength_from_start(t)).collect();
    let pts: Vec<Point> = params.iter().map(|&t| curve.point(t)).collect();
    let limit = if curve.is_closed() { 0.75 * curve.length() } else { f64::INFINITY };
    let mut worst = 1.0f64;
    for i in 0..params.len() {
        for j in (i + 1)..params.len() {
            let arc = arcs[j] - arcs[i];
            if arc <= 0.0 || arc > limit * (1.0 + 1e-14) {
                continue;
            }
            let chord = (pts[j][0] - pts[i][0]).hypot(pts[j][1] - pts[i][1]);
            if chord <= 0.0 {
                continue;
            }
            worst = worst.max(arc / chord).max(chord / arc);
        }
    }
    worst
}
