//! Discrete NURBS spaces on the boundary and dense single-layer assembly.
//!
//! All integrals are computed in the parameter domain with `dx = |gamma'| dt`.
//! Element pairs that touch are integrated with Duffy-type coordinates that
//! move the log singularity onto a coordinate axis, where the log-weight rule
//! takes over. Separated pairs use tensor Gauss rules; pairs that are close but
//! not touching are bisected until they are well separated.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;

use crate::geometry::{BoundaryCurve, MeshPartition, Point};
use crate::par_map;
use crate::quadrature::{adaptive_gauss, corner_panels, doubling_panels, neumaier_sum, RuleSet};
use crate::splines::{nurbs_local, KnotVector, LocalBasis, Side, WeightVector, MAX_DEGREE};
use crate::{Error, Result};

/// `-1 / (2 pi)`, the factor of the single-layer kernel `log|x - y|`.
pub const KERNEL: f64 = -1.0 / (2.0 * PI);

const ML: usize = MAX_DEGREE + 1;
type Block = [[f64; ML]; ML];

/// Separation (distance over diameter) for the reduced far-field rule.
const FAR_RATIO: f64 = 3.0;
/// Separation for the full smooth rule; closer pairs are bisected.
const NEAR_RATIO: f64 = 1.0;

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Ansatz space `N^p(K_h, W_h) o gamma^{-1}` on a mesh.
#[derive(Clone, Debug)]
pub struct DiscreteSpace {
    mesh: MeshPartition,
    knots: KnotVector,
    weights: WeightVector,
    spans: Vec<isize>,
}

/// Bounding circle of an element: every point lies within `radius` of `center`.
#[derive(Clone, Copy, Debug)]
struct Bounds {
    center: Point,
    radius: f64,
}

fn bounds(curve: &BoundaryCurve, t0: f64, t1: f64) -> Bounds {
    let c = curve.point(0.5 * (t0 + t1));
    let r = dist(curve.point(t0), c).max(dist(curve.point(t1), c));
    Bounds {
        center: c,
        radius: 1.05 * r,
    }
}

impl DiscreteSpace {
    /// Space on `mesh` of degree `p` with the given weights (one per basis function).
    pub fn new(mesh: MeshPartition, p: usize, weights: WeightVector) -> Result<Self> {
        let bps = mesh.breakpoints().to_vec();
        let ms = mesh.multiplicities().to_vec();
        let knots = if mesh.is_closed() {
            KnotVector::periodic(bps, ms, p)?
        } else {
            KnotVector::open(bps, ms, p)?
        };
        if weights.len() != knots.dim() {
            return Err(Error::DimensionMismatch {
                expected: knots.dim(),
                got: weights.len(),
            });
        }
        let spans = (0..mesh.n_elements())
            .map(|e| {
                let (t0, t1) = mesh.element(e);
                knots.find_span(0.5 * (t0 + t1), Side::Right)
            })
            .collect();
        Ok(Self {
            mesh,
            knots,
            weights,
            spans,
        })
    }

    /// Initial space: the curve's own knots and weights.
    pub fn from_curve(curve: Arc<BoundaryCurve>) -> Result<Self> {
        let weights = curve.weights().clone();
        let p = curve.degree();
        let mesh = MeshPartition::from_curve(curve)?;
        Self::new(mesh, p, weights)
    }

    pub fn mesh(&self) -> &MeshPartition {
        &self.mesh
    }

    pub fn curve(&self) -> &Arc<BoundaryCurve> {
        self.mesh.curve()
    }

    pub fn knots(&self) -> &KnotVector {
        &self.knots
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn degree(&self) -> usize {
        self.knots.degree()
    }

    pub fn dim(&self) -> usize {
        self.knots.dim()
    }

    pub fn n_elements(&self) -> usize {
        self.mesh.n_elements()
    }

    /// Global indices of the `p + 1` functions living on element `e`.
    pub fn element_dofs(&self, e: usize) -> Vec<usize> {
        let p = self.degree() as isize;
        (0..=p).map(|a| self.knots.basis_index(self.spans[e] - p + a)).collect()
    }

    /// NURBS values and parameter derivatives on element `e` at reduced parameter `t`.
    pub fn local_basis(&self, e: usize, t: f64) -> LocalBasis {
        nurbs_local(&self.knots, self.weights.as_slice(), self.spans[e], t)
    }

    /// Element containing parameter `t` (right-continuous, closed at `b` for open curves).
    pub fn element_of(&self, t: f64) -> usize {
        let curve = self.curve();
        let t = curve.reduce(t);
        let bps = self.mesh.breakpoints();
        bps.partition_point(|&z| z <= t).saturating_sub(1).min(self.n_elements() - 1)
    }

    /// `phi_h(gamma(t))` for coefficients `c`.
    pub fn eval_density(&self, c: &[f64], t: f64) -> f64 {
        let e = self.element_of(t);
        let t = self.curve().reduce(t);
        let lb = self.local_basis(e, t);
        let dofs = self.element_dofs(e);
        (0..lb.count).map(|a| c[dofs[a]] * lb.values[a]).sum()
    }

    /// Collocation points: means of the `p + 2` knots of each basis function.
    ///
    /// Requires `#a = #b = p + 1`; for closed curves this means full
    /// multiplicity at the seam.
    pub fn collocation_points(&self) -> Result<Vec<CollocationPoint>> {
        let p = self.degree();
        let k = &self.knots;
        if k.is_periodic() && k.multiplicities()[0] != p + 1 {
            return Err(Error::Config(format!(
                "collocation on a closed curve needs multiplicity {} at the seam",
                p + 1
            )));
        }
        let curve = self.curve();
        let n = self.dim();
        let mut pts: Vec<CollocationPoint> = (0..n as isize)
            .map(|i| {
                let first = if k.is_periodic() { i - p as isize - 1 } else { i };
                let mean = (0..=p + 1).map(|j| k.knot(first + j as isize)).sum::<f64>() / (p + 2) as f64;
                let t = curve.reduce(mean);
                CollocationPoint {
                    t,
                    x: curve.point(t),
                    at_corner: curve.is_corner(t),
                }
            })
            .collect();
        pts.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(pts)
    }

    /// Rank of the sampled basis (dense sampling, SVD with relative threshold).
    pub fn sampled_rank(&self, samples_per_element: usize) -> usize {
        let n = self.dim();
        let mut rows = Vec::new();
        for e in 0..self.n_elements() {
            let (t0, t1) = self.mesh.element(e);
            let dofs = self.element_dofs(e);
            for k in 0..samples_per_element {
                let t = t0 + (t1 - t0) * (k as f64 + 0.5) / samples_per_element as f64;
                let lb = self.local_basis(e, t);
                let mut row = vec![0.0; n];
                for a in 0..lb.count {
                    row[dofs[a]] += lb.values[a];
                }
                rows.push(row);
            }
        }
        let m = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
        let sv = m.singular_values();
        let max = sv.iter().copied().fold(0.0, f64::max);
        sv.iter().filter(|&&s| s > 1e-10 * max).count()
    }
}

/// A collocation point `x_j = gamma(t_j)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollocationPoint {
    pub t: f64,
    pub x: Point,
    /// The point sits on a corner of the curve.
    pub at_corner: bool,
}

/// Coefficients of a discrete density `phi_h` in a space.
#[derive(Clone, Debug)]
pub struct DensityFunction<'a> {
    pub space: &'a DiscreteSpace,
    pub coefficients: Vec<f64>,
}

impl<'a> DensityFunction<'a> {
    pub fn new(space: &'a DiscreteSpace, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != space.dim() {
            return Err(Error::DimensionMismatch {
                expected: space.dim(),
                got: coefficients.len(),
            });
        }
        Ok(Self { space, coefficients })
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.space.eval_density(&self.coefficients, t)
    }
}

/// Quadrature data of one element for one rule.
#[derive(Clone, Debug)]
struct ElemCache {
    x: Vec<Point>,
    /// rule weight times `h |gamma'|`
    w: Vec<f64>,
    basis: Vec<[f64; ML]>,
}

/// Evaluated geometry and basis at a single parameter.
#[derive(Clone, Copy)]
struct Sample {
    x: Point,
    jac: f64,
    basis: [f64; ML],
}

/// Per-space quadrature caches shared by all assembly routines.
pub struct Assembler<'a> {
    space: &'a DiscreteSpace,
    rules: &'a RuleSet,
    far: Vec<ElemCache>,
    smooth: Vec<ElemCache>,
    bounds: Vec<Bounds>,
    p1: usize,
}

impl<'a> Assembler<'a> {
    pub fn new(space: &'a DiscreteSpace, rules: &'a RuleSet) -> Self {
        let n = space.n_elements();
        let curve = space.curve();
        let build = |rule: &crate::quadrature::QuadratureRule, e: usize| -> ElemCache {
            let (t0, t1) = space.mesh.element(e);
            let h = t1 - t0;
            let mut c = ElemCache {
                x: Vec::with_capacity(rule.len()),
                w: Vec::with_capacity(rule.len()),
                basis: Vec::with_capacity(rule.len()),
            };
            for (&u, &wq) in rule.nodes.iter().zip(&rule.weights) {
                let t = t0 + u * h;
                c.x.push(curve.point(t));
                c.w.push(wq * h * curve.speed(t));
                c.basis.push(space.local_basis(e, t).values);
            }
            c
        };
        let far = (0..n).map(|e| build(&rules.far, e)).collect();
        let smooth = (0..n).map(|e| build(&rules.smooth, e)).collect();
        let bounds = (0..n)
            .map(|e| {
                let (t0, t1) = space.mesh.element(e);
                bounds(curve, t0, t1)
            })
            .collect();
        Self {
            space,
            rules,
            far,
            smooth,
            bounds,
            p1: space.degree() + 1,
        }
    }

    pub fn space(&self) -> &DiscreteSpace {
        self.space
    }

    fn sample(&self, e: usize, t: f64) -> Sample {
        let curve = self.space.curve();
        Sample {
            x: curve.point(t),
            jac: curve.speed(t),
            basis: self.space.local_basis(e, t).values,
        }
    }

    /// Whether two distinct elements share a node; returns the shared node and
    /// the period shift to apply to the second element so that it follows the first.
    fn adjacency(&self, e1: usize, e2: usize) -> Option<(f64, f64, bool)> {
        let n = self.space.n_elements();
        let closed = self.space.mesh.is_closed();
        let period = self.space.curve().period();
        if e2 == e1 + 1 {
            return Some((self.space.mesh.element(e1).1, 0.0, true));
        }
        if e1 == e2 + 1 {
            return Some((self.space.mesh.element(e2).1, 0.0, false));
        }
        if closed && n > 2 {
            if e1 == n - 1 && e2 == 0 {
                return Some((self.space.mesh.element(e1).1, period, true));
            }
            if e2 == n - 1 && e1 == 0 {
                return Some((self.space.mesh.element(e2).1, period, false));
            }
        }
        None
    }

    /// Local Galerkin block `int_T1 int_T2 k R_a R_b` (without the kernel factor).
    fn pair_block(&self, e1: usize, e2: usize) -> Block {
        if e1 == e2 {
            return self.identical_block(e1);
        }
        if let Some((z, shift, first_left)) = self.adjacency(e1, e2) {
            return if first_left {
                self.adjacent_block(e1, e2, z, shift)
            } else {
                transpose(&self.adjacent_block(e2, e1, z, shift), self.p1)
            };
        }
        let (b1, b2) = (self.bounds[e1], self.bounds[e2]);
        let d = dist(b1.center, b2.center) - b1.radius - b2.radius;
        let diam = 2.0 * b1.radius.max(b2.radius);
        if d >= FAR_RATIO * diam {
            self.cached_block(&self.far[e1], &self.far[e2])
        } else if d >= NEAR_RATIO * diam {
            self.cached_block(&self.smooth[e1], &self.smooth[e2])
        } else {
            let (s0, s1) = self.space.mesh.element(e1);
            let (t0, t1) = self.space.mesh.element(e2);
            let mut out = [[0.0; ML]; ML];
            self.near_block(e1, s0, s1, e2, t0, t1, 0, &mut out);
            out
        }
    }

    fn cached_block(&self, c1: &ElemCache, c2: &ElemCache) -> Block {
        let p1 = self.p1;
        let mut out = [[0.0; ML]; ML];
        for (q, (&x, &wx)) in c1.x.iter().zip(&c1.w).enumerate() {
            let mut row = [0.0; ML];
            for (r, (&y, &wy)) in c2.x.iter().zip(&c2.w).enumerate() {
                let dx = x[0] - y[0];
                let dy = x[1] - y[1];
                let k = 0.5 * (dx * dx + dy * dy).ln() * wy;
                for b in 0..p1 {
                    row[b] += k * c2.basis[r][b];
                }
            }
            for a in 0..p1 {
                let f = wx * c1.basis[q][a];
                for b in 0..p1 {
                    out[a][b] += f * row[b];
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn near_block(&self, e1: usize, s0: f64, s1: f64, e2: usize, t0: f64, t1: f64, depth: usize, out: &mut Block) {
        let curve = self.space.curve();
        let b1 = bounds(curve, s0, s1);
        let b2 = bounds(curve, t0, t1);
        let d = dist(b1.center, b2.center) - b1.radius - b2.radius;
        let diam = 2.0 * b1.radius.max(b2.radius);
        if d >= NEAR_RATIO * diam || depth > 60 {
            let rule = &self.rules.smooth;
            let ys: Vec<(Sample, f64)> = rule
                .nodes
                .iter()
                .zip(&rule.weights)
                .map(|(&u, &w)| {
                    let t = t0 + u * (t1 - t0);
                    (self.sample(e2, t), w * (t1 - t0))
                })
                .collect();
            for (&u, &w) in rule.nodes.iter().zip(&rule.weights) {
                let s = s0 + u * (s1 - s0);
                let xs = self.sample(e1, s);
                let wx = w * (s1 - s0) * xs.jac;
                let mut row = [0.0; ML];
                for (ys, wy) in &ys {
                    let k = dist(xs.x, ys.x).ln() * wy * ys.jac;
                    for b in 0..self.p1 {
                        row[b] += k * ys.basis[b];
                    }
                }
                for a in 0..self.p1 {
                    for b in 0..self.p1 {
                        out[a][b] += wx * xs.basis[a] * row[b];
                    }
                }
            }
            return;
        }
        if b1.radius >= b2.radius {
            let m = 0.5 * (s0 + s1);
            self.near_block(e1, s0, m, e2, t0, t1, depth + 1, out);
            self.near_block(e1, m, s1, e2, t0, t1, depth + 1, out);
        } else {
            let m = 0.5 * (t0 + t1);
            self.near_block(e1, s0, s1, e2, t0, m, depth + 1, out);
            self.near_block(e1, s0, s1, e2, m, t1, depth + 1, out);
        }
    }

    /// Same element: two Duffy triangles, log singularities along both axes.
    fn identical_block(&self, e: usize) -> Block {
        let (t0, t1) = self.space.mesh.element(e);
        let h = t1 - t0;
        let curve = self.space.curve();
        let g = &self.rules.smooth;
        let l = &self.rules.log;
        let p1 = self.p1;
        let mut out = [[0.0; ML]; ML];
        let logh = h.ln();
        // contribution of (xi, eta) with weight `wt` and extra log factor
        let mut add = |xi: f64, eta: f64, wt: f64, smooth_log: bool| {
            let s = t0 + h * xi;
            let t = t0 + h * eta;
            let a = self.sample(e, s);
            let b = self.sample(e, t);
            let mut f = wt * a.jac * b.jac;
            if smooth_log {
                let c = curve.chord_vector(s, t);
                f *= logh + c[0].hypot(c[1]).ln();
            }
            for i in 0..p1 {
                for j in 0..p1 {
                    out[i][j] += f * a.basis[i] * b.basis[j];
                }
            }
        };
        for swap in [false, true] {
            let map = |x: f64, y: f64| -> (f64, f64) {
                let (u, v) = (x, x * (1.0 - y));
                if swap {
                    (v, u)
                } else {
                    (u, v)
                }
            };
            for (&y, &wy) in g.nodes.iter().zip(&g.weights) {
                // log x
                for (&x, &wx) in l.nodes.iter().zip(&l.weights) {
                    let (u, v) = map(x, y);
                    add(u, v, -wx * wy * x, false);
                }
                // smooth part
                for (&x, &wx) in g.nodes.iter().zip(&g.weights) {
                    let (u, v) = map(x, y);
                    add(u, v, wx * wy * x, true);
                }
            }
            // log y
            for (&y, &wy) in l.nodes.iter().zip(&l.weights) {
                for (&x, &wx) in g.nodes.iter().zip(&g.weights) {
                    let (u, v) = map(x, y);
                    add(u, v, -wx * wy * x, false);
                }
            }
        }
        let h2 = h * h;
        for row in out.iter_mut().take(p1) {
            for v in row.iter_mut().take(p1) {
                *v *= h2;
            }
        }
        out
    }

    /// `e1` ends at node `z`, `e2` starts there (after shifting by `shift`).
    fn adjacent_block(&self, e1: usize, e2: usize, z: f64, shift: f64) -> Block {
        let (s0, _) = self.space.mesh.element(e1);
        let (t0, t1) = self.space.mesh.element(e2);
        let h1 = z - s0;
        let h2 = t1 - t0;
        let curve = self.space.curve();
        let g = &self.rules.smooth;
        let l = &self.rules.log;
        let p1 = self.p1;
        let mut out = [[0.0; ML]; ML];
        let mut add = |xi: f64, eta: f64, wt: f64, log_len: Option<f64>| {
            let s = z - h1 * xi;
            let t = z + h2 * eta; // unwrapped
            let a = self.sample(e1, s);
            let b = self.sample(e2, t - shift);
            let mut f = wt * a.jac * b.jac;
            if let Some(ll) = log_len {
                let c = curve.chord_vector(s, t);
                f *= ll + c[0].hypot(c[1]).ln();
            }
            for i in 0..p1 {
                for j in 0..p1 {
                    out[i][j] += f * a.basis[i] * b.basis[j];
                }
            }
        };
        for tri in 0..2 {
            // the y-integrand is analytic except near y = -r; grade panels towards 0
            let r = if tri == 0 { h1 / h2 } else { h2 / h1 };
            for (y0, y1) in doubling_panels(r) {
                for (&yy, &wyy) in g.nodes.iter().zip(&g.weights) {
                    let y = y0 + (y1 - y0) * yy;
                    let wy = wyy * (y1 - y0);
                    let len_y = if tri == 0 { h1 + h2 * y } else { h1 * y + h2 };
                    let map = |x: f64, y: f64| if tri == 0 { (x, x * y) } else { (x * y, x) };
                    let ll = len_y.ln();
                    for (&x, &wx) in l.nodes.iter().zip(&l.weights) {
                        let (u, v) = map(x, y);
                        add(u, v, -wx * wy * x, None);
                    }
                    for (&x, &wx) in g.nodes.iter().zip(&g.weights) {
                        let (u, v) = map(x, y);
                        add(u, v, wx * wy * x, Some(ll));
                    }
                }
            }
        }
        let hh = h1 * h2;
        for row in out.iter_mut().take(p1) {
            for v in row.iter_mut().take(p1) {
                *v *= hh;
            }
        }
        out
    }

    /// `int_e log|x - gamma(t)| R_a(t) |gamma'(t)| dt` for all local `a`, where
    /// `x = gamma(s)` and `s` is a (reduced) parameter.
    fn point_element(&self, s: f64, x: Point, e: usize) -> [f64; ML] {
        let (t0, t1) = self.space.mesh.element(e);
        let curve = self.space.curve();
        // does the element contain s (possibly across the seam)?
        let mut inside = None;
        for shift in [0.0, curve.period(), -curve.period()] {
            if shift != 0.0 && !curve.is_closed() {
                continue;
            }
            // collocation points built from averages can miss a shared
            // breakpoint by an ulp; snap them onto the element
            let ss = s + shift;
            let tol = 4.0 * f64::EPSILON * t0.abs().max(t1.abs());
            if ss >= t0 - tol && ss <= t1 + tol {
                inside = Some(ss.clamp(t0, t1));
                break;
            }
        }
        if let Some(ss) = inside {
            return self.point_element_singular(ss, e, t0, t1);
        }
        let b = self.bounds[e];
        let d = dist(x, b.center) - b.radius;
        let diam = 2.0 * b.radius;
        let cache = if d >= FAR_RATIO * diam {
            Some(&self.far[e])
        } else if d >= NEAR_RATIO * diam {
            Some(&self.smooth[e])
        } else {
            None
        };
        let mut out = [0.0; ML];
        match cache {
            Some(c) => {
                for q in 0..c.x.len() {
                    let y = c.x[q];
                    let dx = x[0] - y[0];
                    let dy = x[1] - y[1];
                    let k = 0.5 * (dx * dx + dy * dy).ln() * c.w[q];
                    for a in 0..self.p1 {
                        out[a] += k * c.basis[q][a];
                    }
                }
            }
            None => self.point_near(x, e, t0, t1, 0, &mut out),
        }
        out
    }

    fn point_near(&self, x: Point, e: usize, t0: f64, t1: f64, depth: usize, out: &mut [f64; ML]) {
        let curve = self.space.curve();
        let b = bounds(curve, t0, t1);
        let d = dist(x, b.center) - b.radius;
        if d >= NEAR_RATIO * 2.0 * b.radius || depth > 80 {
            let rule = &self.rules.smooth;
            for (&u, &w) in rule.nodes.iter().zip(&rule.weights) {
                let t = t0 + u * (t1 - t0);
                let sm = self.sample(e, t);
                let k = dist(x, sm.x).ln() * w * (t1 - t0) * sm.jac;
                for a in 0..self.p1 {
                    out[a] += k * sm.basis[a];
                }
            }
            return;
        }
        let m = 0.5 * (t0 + t1);
        self.point_near(x, e, t0, m, depth + 1, out);
        self.point_near(x, e, m, t1, depth + 1, out);
    }

    /// Element containing `s` (unwrapped into `[t0, t1]`): split at `s`.
    fn point_element_singular(&self, s: f64, e: usize, t0: f64, t1: f64) -> [f64; ML] {
        let curve = self.space.curve();
        let g = &self.rules.smooth;
        let l = &self.rules.log;
        let mut out = [0.0; ML];
        for (lo, hi, right) in [(t0, s, false), (s, t1, true)] {
            let len = hi - lo;
            if len <= 0.0 {
                continue;
            }
            let ll = len.ln();
            let at = |sig: f64| if right { s + len * sig } else { s - len * sig };
            for (&sig, &w) in l.nodes.iter().zip(&l.weights) {
                let t = at(sig);
                let sm = self.sample(e, t);
                let f = -w * len * sm.jac;
                for a in 0..self.p1 {
                    out[a] += f * sm.basis[a];
                }
            }
            for (&sig, &w) in g.nodes.iter().zip(&g.weights) {
                let t = at(sig);
                let sm = self.sample(e, t);
                let c = curve.chord_vector(s, t);
                let f = w * len * sm.jac * (ll + c[0].hypot(c[1]).ln());
                for a in 0..self.p1 {
                    out[a] += f * sm.basis[a];
                }
            }
        }
        out
    }

    /// Row `(V b_l)(gamma(s))` for all basis functions `l`.
    pub fn single_layer_row(&self, s: f64) -> Vec<f64> {
        let curve = self.space.curve();
        let s = curve.reduce(s);
        let x = curve.point(s);
        let mut row = vec![0.0; self.space.dim()];
        for e in 0..self.space.n_elements() {
            let loc = self.point_element(s, x, e);
            for (a, g) in self.space.element_dofs(e).into_iter().enumerate() {
                row[g] += KERNEL * loc[a];
            }
        }
        row
    }

    /// `V phi_h (gamma(s))`.
    pub fn single_layer_at(&self, c: &[f64], s: f64) -> f64 {
        let curve = self.space.curve();
        let s = curve.reduce(s);
        let x = curve.point(s);
        let mut acc = 0.0;
        for e in 0..self.space.n_elements() {
            let loc = self.point_element(s, x, e);
            for (a, g) in self.space.element_dofs(e).into_iter().enumerate() {
                acc += loc[a] * c[g];
            }
        }
        KERNEL * acc
    }

    /// Dense Galerkin matrix `A[k][l] = <V b_l, b_k>`.
    pub fn galerkin(&self) -> DMatrix<f64> {
        let n_el = self.space.n_elements();
        let blocks: Vec<Vec<Block>> = par_map(n_el, |e1| (e1..n_el).map(|e2| self.pair_block(e1, e2)).collect());
        let n = self.space.dim();
        let mut a = DMatrix::zeros(n, n);
        let dofs: Vec<Vec<usize>> = (0..n_el).map(|e| self.space.element_dofs(e)).collect();
        for (e1, row) in blocks.iter().enumerate() {
            for (k, blk) in row.iter().enumerate() {
                let e2 = e1 + k;
                for (i, &gi) in dofs[e1].iter().enumerate() {
                    for (j, &gj) in dofs[e2].iter().enumerate() {
                        let v = KERNEL * blk[i][j];
                        a[(gi, gj)] += v;
                        if e1 != e2 {
                            a[(gj, gi)] += v;
                        }
                    }
                }
            }
        }
        a
    }

    /// Dense collocation matrix `B[j][l] = V b_l (x_j)`.
    pub fn collocation(&self, points: &[CollocationPoint]) -> DMatrix<f64> {
        let rows = par_map(points.len(), |j| self.single_layer_row(points[j].t));
        let n = self.space.dim();
        DMatrix::from_fn(points.len(), n, |r, c| rows[r][c])
    }
}

fn transpose(b: &Block, p1: usize) -> Block {
    let mut t = [[0.0; ML]; ML];
    for i in 0..p1 {
        for j in 0..p1 {
            t[j][i] = b[i][j];
        }
    }
    t
}

/// Galerkin matrix with the given rules.
pub fn assemble_galerkin(space: &DiscreteSpace, rules: &RuleSet) -> DMatrix<f64> {
    Assembler::new(space, rules).galerkin()
}

/// Collocation matrix at the space's collocation points.
pub fn assemble_collocation(space: &DiscreteSpace, rules: &RuleSet) -> Result<DMatrix<f64>> {
    let pts = space.collocation_points()?;
    Ok(Assembler::new(space, rules).collocation(&pts))
}

/// `V phi_h (gamma(t))` for a discrete density.
pub fn single_layer_eval(density: &DensityFunction<'_>, t: f64, rules: &RuleSet) -> f64 {
    Assembler::new(density.space, rules).single_layer_at(&density.coefficients, t)
}

/// Parameters nearest to `s` among its period translates that still lie in `[lo, hi]`.
fn nearest_translate(curve: &BoundaryCurve, t: f64, s: f64) -> f64 {
    if !curve.is_closed() {
        return t;
    }
    let p = curve.period();
    t + ((s - t) / p).round() * p
}

/// Integration breakpoints on `[a, b]` for parameter integrals with a
/// distinguished point `s`: geometry breakpoints plus `s`.
fn split_points(curve: &BoundaryCurve, s: Option<f64>) -> Vec<f64> {
    let mut pts: Vec<f64> = curve.breakpoints().to_vec();
    if let Some(s) = s {
        let r = curve.reduce(s);
        if r > curve.a() && r < curve.b() {
            pts.push(r);
        }
    }
    pts.sort_by(|a, b| a.total_cmp(b));
    pts.dedup();
    pts
}

/// `V psi (gamma(s))` for a density given as a function of the parameter,
/// by adaptive quadrature. Returns the value and the error estimate.
pub fn single_layer_eval_fn(curve: &BoundaryCurve, density: &dyn Fn(f64) -> f64, s: f64, tol: f64) -> (f64, f64) {
    let s = curve.reduce(s);
    let x = curve.point(s);
    let pts = split_points(curve, Some(s));
    let mut total = Vec::new();
    let mut err = 0.0;
    for w in pts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let anchor = if lo == s {
            Some((lo, 1.0))
        } else if hi == s || (curve.is_closed() && s == curve.a() && hi == curve.b()) {
            Some((hi, -1.0))
        } else {
            None
        };
        if let Some((anchor, dir)) = anchor {
            // graded substitution |t - s| = len * v^2 removes the log singularity
            let len = hi - lo;
            let (v, e) = adaptive_gauss(
                &mut |v: f64| {
                    let d = len * v * v;
                    if d <= 0.0 {
                        return 0.0;
                    }
                    let t = anchor + dir * d;
                    let c = curve.chord_vector(anchor, t);
                    (d.ln() + c[0].hypot(c[1]).ln()) * density(t) * curve.speed(t) * 2.0 * len * v
                },
                0.0,
                1.0,
                tol,
                4000,
            );
            total.push(v);
            err += e;
        } else {
            let (v, e) = adaptive_gauss(
                &mut |t: f64| dist(x, curve.point(t)).ln() * density(t) * curve.speed(t),
                lo,
                hi,
                tol,
                4000,
            );
            total.push(v);
            err += e;
        }
    }
    (KERNEL * neumaier_sum(total), err.abs() / (2.0 * PI))
}

/// `(K + sigma) g` at `gamma(s)` in subtracted form `K[g - g(x)](x)`.
///
/// This equals `(K + sigma) g` with the corner-aware `sigma`, so it is
/// well defined at corners too. `g` is a function of the point.
pub fn dirichlet_rhs_eval(curve: &BoundaryCurve, g: &dyn Fn(Point) -> f64, s: f64, tol: f64) -> f64 {
    let s = curve.reduce(s);
    let x = curve.point(s);
    let gx = g(x);
    let pts = split_points(curve, Some(s));
    let parts: Vec<f64> = pts
        .windows(2)
        .map(|w| {
            adaptive_gauss(
                &mut |t: f64| {
                    let tt = nearest_translate(curve, t, s);
                    if tt == s {
                        return 0.0;
                    }
                    let y = curve.point(t);
                    let nu = curve.normal(t);
                    let c = curve.chord_vector(s, tt);
                    let c2 = c[0] * c[0] + c[1] * c[1];
                    // (x - y) . nu / |x - y|^2 with x - y = (s - tt) c
                    let k = (c[0] * nu[0] + c[1] * nu[1]) / ((s - tt) * c2);
                    (g(y) - gx) * k * curve.speed(t)
                },
                w[0],
                w[1],
                tol,
                4000,
            )
            .0
        })
        .collect();
    neumaier_sum(parts) / (2.0 * PI)
}

/// Double-layer potential `K g (gamma(s))` at a non-corner point.
pub fn double_layer_eval(curve: &BoundaryCurve, g: &dyn Fn(Point) -> f64, s: f64, tol: f64) -> Result<f64> {
    if !curve.is_closed() {
        return Err(Error::Config("the double-layer operator needs a closed curve".into()));
    }
    if curve.is_corner(s) {
        return Err(Error::Config(format!("double-layer evaluation at corner parameter {s}")));
    }
    let x = curve.point(s);
    Ok(dirichlet_rhs_eval(curve, g, s, tol) - 0.5 * g(x))
}

/// Point function on the plane.
pub type PointFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
/// Exact density as a function of point and outward normal.
pub type DensityFn = Arc<dyn Fn(Point, Point) -> f64 + Send + Sync>;

/// Right-hand side of `V phi = f`.
#[derive(Clone)]
pub enum Rhs {
    /// `f` given directly.
    Analytic(PointFn),
    /// Dirichlet datum `g`, with `f = (K + sigma) g`.
    Dirichlet(PointFn),
}

/// A single-layer problem on a curve.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub curve: Arc<BoundaryCurve>,
    pub rhs: Rhs,
    pub exact_solution: Option<DensityFn>,
    pub exact_energy: Option<f64>,
    /// Absolute tolerance for adaptive evaluation of `f`.
    pub rhs_tol: f64,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("exact_energy", &self.exact_energy)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn new(name: &str, curve: Arc<BoundaryCurve>, rhs: Rhs) -> Result<Self> {
        if matches!(rhs, Rhs::Dirichlet(_)) && !curve.is_closed() {
            return Err(Error::Config("Dirichlet data need a closed curve".into()));
        }
        Ok(Self {
            name: name.to_string(),
            curve,
            rhs,
            exact_solution: None,
            exact_energy: None,
            rhs_tol: 1e-15,
        })
    }

    /// `f(gamma(t))`.
    pub fn f_at(&self, t: f64) -> f64 {
        match &self.rhs {
            Rhs::Analytic(f) => f(self.curve.point(t)),
            Rhs::Dirichlet(g) => dirichlet_rhs_eval(&self.curve, g.as_ref(), t, self.rhs_tol),
        }
    }

    /// Exact density at parameter `t`, if known.
    pub fn phi_at(&self, t: f64) -> Option<f64> {
        self.exact_solution.as_ref().map(|phi| phi(self.curve.point(t), self.curve.normal(t)))
    }
}

/// Memoized right-hand side values `f(gamma(t))`, keyed by the exact parameter.
///
/// Values are reused across refinement steps for unchanged elements.
pub struct RhsEvaluator {
    problem: ProblemSpec,
    cache: Mutex<HashMap<u64, f64>>,
}

impl RhsEvaluator {
    pub fn new(problem: ProblemSpec) -> Self {
        Self {
            problem,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn problem(&self) -> &ProblemSpec {
        &self.problem
    }

    pub fn values(&self, ts: &[f64]) -> Vec<f64> {
        if matches!(self.problem.rhs, Rhs::Analytic(_)) {
            return ts.iter().map(|&t| self.problem.f_at(t)).collect();
        }
        let missing: Vec<f64> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut m: Vec<f64> = ts.iter().copied().filter(|t| !cache.contains_key(&t.to_bits())).collect();
            m.sort_by(|a, b| a.total_cmp(b));
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let vals = par_map(missing.len(), |i| self.problem.f_at(missing[i]));
            let mut cache = self.cache.lock().expect("cache lock");
            for (t, v) in missing.iter().zip(vals) {
                cache.insert(t.to_bits(), v);
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        ts.iter().map(|t| cache[&t.to_bits()]).collect()
    }

    pub fn value(&self, t: f64) -> f64 {
        self.values(&[t])[0]
    }
}

/// Discretization method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Galerkin,
    Collocation,
}

/// Right-hand side vector: `<f, b_k>` (Galerkin) or `f(x_j)` (collocation).
pub fn assemble_rhs(space: &DiscreteSpace, rhs: &RhsEvaluator, method: Method, rules: &RuleSet) -> Result<Vec<f64>> {
    match method {
        Method::Collocation => {
            let pts = space.collocation_points()?;
            let ts: Vec<f64> = pts.iter().map(|p| p.t).collect();
            Ok(rhs.values(&ts))
        }
        Method::Galerkin => {
            // f = V phi is only C^0 with x log x terms at corners of the
            // curve, so elements touching one get geometrically graded panels
            let curve = space.curve();
            let rule = &rules.smooth;
            let mut ts = Vec::new();
            let mut ws = Vec::new();
            let mut owner = Vec::new();
            for e in 0..space.n_elements() {
                let (t0, t1) = space.mesh().element(e);
                for (a, b) in corner_panels(curve.is_corner(t0), curve.is_corner(t1)) {
                    for (&u, &w) in rule.nodes.iter().zip(&rule.weights) {
                        ts.push(t0 + (a + u * (b - a)) * (t1 - t0));
                        ws.push(w * (b - a) * (t1 - t0));
                        owner.push(e);
                    }
                }
            }
            let fs = rhs.values(&ts);
            let mut b = vec![0.0; space.dim()];
            for (k, &e) in owner.iter().enumerate() {
                let dofs = space.element_dofs(e);
                let lb = space.local_basis(e, ts[k]);
                let f = fs[k] * ws[k] * curve.speed(ts[k]);
                for a in 0..lb.count {
                    b[dofs[a]] += f * lb.values[a];
                }
            }
            Ok(b)
        }
    }
}

/// Outcome of the (A1)-(A2) check for one space.
#[derive(Clone, Debug)]
pub struct A1A2Report {
    /// `q_T` per element.
    pub q: Vec<f64>,
    /// Minimum over elements.
    pub q_min: f64,
    /// Whether `supp(psi_T)` lies in the order-`m` patch of `T` for every element.
    pub support_ok: bool,
}

/// For every element choose the basis function of minimal support containing
/// it and compute `q_T = 1 - ||1 - psi_T||^2 / |supp psi_T|`.
pub fn verify_a1a2(space: &DiscreteSpace, m: usize, rules: &RuleSet) -> Result<A1A2Report> {
    let n_el = space.n_elements();
    let n = space.dim();
    let curve = space.curve();
    // support of each basis function as a list of elements
    let mut support: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in 0..n_el {
        for g in space.element_dofs(e) {
            if !support[g].contains(&e) {
                support[g].push(e);
            }
        }
    }
    let rule = &rules.smooth;
    let mut q = Vec::with_capacity(n_el);
    let mut support_ok = true;
    for e in 0..n_el {
        let mut best: Option<(usize, f64)> = None;
        for g in space.element_dofs(e) {
            let supp = &support[g];
            if !connected(supp, n_el, space.mesh().is_closed()) {
                continue;
            }
            let mut len = 0.0;
            let mut defect = 0.0;
            for &f in supp {
                let (t0, t1) = space.mesh().element(f);
                let dofs = space.element_dofs(f);
                let a = dofs.iter().position(|&d| d == g).expect("support element carries the function");
                for (u, w) in rule.nodes.iter().zip(&rule.weights) {
                    let t = t0 + u * (t1 - t0);
                    let jw = w * (t1 - t0) * curve.speed(t);
                    let v = space.local_basis(f, t).values[a];
                    len += jw;
                    defect += jw * (1.0 - v) * (1.0 - v);
                }
            }
            let qt = 1.0 - defect / len;
            let better = match best {
                None => true,
                Some((bg, bq)) => supp.len() < support[bg].len() || (supp.len() == support[bg].len() && qt > bq),
            };
            if better {
                best = Some((g, qt));
            }
        }
        let (g, qt) = best.ok_or_else(|| Error::Config(format!("no basis function with connected support on element {e}")))?;
        if !within_patch(&support[g], e, m, n_el, space.mesh().is_closed()) {
            support_ok = false;
        }
        q.push(qt);
    }
    let q_min = q.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(A1A2Report { q, q_min, support_ok })
}

fn cyclic_dist(a: usize, b: usize, n: usize, closed: bool) -> usize {
    let d = a.abs_diff(b);
    if closed {
        d.min(n - d)
    } else {
        d
    }
}

fn connected(supp: &[usize], n: usize, closed: bool) -> bool {
    if supp.len() <= 1 {
        return true;
    }
    let mut s = supp.to_vec();
    s.sort_unstable();
    let gaps = s.windows(2).filter(|w| w[1] - w[0] != 1).count();
    if !closed {
        return gaps == 0;
    }
    let wrap = s[0] + n - s[s.len() - 1] != 1;
    gaps + usize::from(wrap) <= 1
}

fn within_patch(supp: &[usize], e: usize, m: usize, n: usize, closed: bool) -> bool {
    supp.iter().all(|&f| cyclic_dist(f, e, n, closed) <= m)
}
