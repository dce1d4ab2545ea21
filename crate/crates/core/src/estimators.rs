//! Residual evaluation and the nodal error indicators.
//!
//! The residual `R = r_h o gamma` is replaced on every element by its
//! polynomial interpolant at Chebyshev-Lobatto nodes. Endpoint values are
//! shared between neighbouring elements, so the interpolant is continuous,
//! which the `H^{1/2}` seminorm needs to stay finite across nodes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::geometry::{BoundaryCurve, MeshPartition, NodePatch};
use crate::operators::{Assembler, DiscreteSpace, RhsEvaluator};
use crate::par_map;
use crate::quadrature::{doubling_panels, neumaier_sum, RuleSet};
use crate::{Error, Result};

/// Interpolation degree for the residual on each element.
pub const RESIDUAL_DEGREE: usize = 7;

/// Chebyshev-Lobatto nodes on `[-1, 1]`, ascending.
fn lobatto_nodes(q: usize) -> Vec<f64> {
    (0..=q).map(|k| -(std::f64::consts::PI * k as f64 / q as f64).cos()).collect()
}

/// Polynomial in `v = 2 (t - t0) / h - 1` on one element, monomial form.
#[derive(Clone, Debug)]
pub struct ElementPoly {
    pub t0: f64,
    pub h: f64,
    pub coeffs: Vec<f64>,
}

impl ElementPoly {
    /// Interpolates `values` given at the Lobatto nodes of degree `values.len() - 1`.
    pub fn interpolate(t0: f64, t1: f64, values: &[f64]) -> Self {
        let q = values.len() - 1;
        let v = lobatto_nodes(q);
        let m = DMatrix::from_fn(q + 1, q + 1, |i, j| v[i].powi(j as i32));
        let coeffs = m
            .lu()
            .solve(&DVector::from_column_slice(values))
            .expect("Lobatto Vandermonde matrix is regular")
            .iter()
            .copied()
            .collect();
        Self { t0, h: t1 - t0, coeffs }
    }

    fn v(&self, t: f64) -> f64 {
        2.0 * (t - self.t0) / self.h - 1.0
    }

    pub fn value(&self, t: f64) -> f64 {
        let v = self.v(t);
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * v + c)
    }

    /// Parameter derivative `dR/dt`.
    pub fn derivative(&self, t: f64) -> f64 {
        let v = self.v(t);
        let n = self.coeffs.len();
        let mut acc = 0.0;
        for k in (1..n).rev() {
            acc = acc * v + k as f64 * self.coeffs[k];
        }
        acc * 2.0 / self.h
    }

    /// `(R(s) - R(t)) / (s - t)` without cancellation; `R'(s)` if `s == t`.
    pub fn divided(&self, s: f64, t: f64) -> f64 {
        let (a, b) = (self.v(s), self.v(t));
        // (a^k - b^k) / (a - b) = sum_{i<k} a^i b^{k-1-i}
        let mut total = 0.0;
        let mut hk = 0.0; // complete homogeneous sum h_{k-1}(a, b)
        let mut bpow = 1.0;
        for k in 1..self.coeffs.len() {
            hk = hk * a + bpow;
            bpow *= b;
            total += self.coeffs[k] * hk;
        }
        total * 2.0 / self.h
    }
}

/// Continuous piecewise-polynomial residual on a mesh.
#[derive(Clone, Debug)]
pub struct ResidualField {
    curve: Arc<BoundaryCurve>,
    polys: Vec<ElementPoly>,
}

impl ResidualField {
    /// Interpolates a function of the parameter on every element of `mesh`.
    pub fn from_fn(mesh: &MeshPartition, r: impl Fn(f64) -> f64 + Sync + Send) -> Self {
        let ts = sample_params(mesh);
        let vals = par_map(ts.len(), |i| r(ts[i]));
        Self::from_samples(mesh, &vals)
    }

    /// Residual `f - V phi_h` of coefficients `c`.
    pub fn from_solution(space: &DiscreteSpace, rhs: &RhsEvaluator, c: &[f64], rules: &RuleSet) -> Self {
        let mesh = space.mesh();
        let ts = sample_params(mesh);
        let fs = rhs.values(&ts);
        let asm = Assembler::new(space, rules);
        let vs = par_map(ts.len(), |i| asm.single_layer_at(c, ts[i]));
        let vals: Vec<f64> = fs.iter().zip(&vs).map(|(f, v)| f - v).collect();
        Self::from_samples(mesh, &vals)
    }

    fn from_samples(mesh: &MeshPartition, vals: &[f64]) -> Self {
        let q = RESIDUAL_DEGREE;
        let n = mesh.n_elements();
        let nb = mesh.breakpoints().len();
        let closed = mesh.is_closed();
        let polys = (0..n)
            .map(|e| {
                let (t0, t1) = mesh.element(e);
                let mut v = Vec::with_capacity(q + 1);
                v.push(vals[e]);
                v.extend_from_slice(&vals[nb + e * (q - 1)..nb + (e + 1) * (q - 1)]);
                let right = if closed && e == n - 1 { vals[0] } else { vals[e + 1] };
                v.push(right);
                ElementPoly::interpolate(t0, t1, &v)
            })
            .collect();
        Self {
            curve: mesh.curve().clone(),
            polys,
        }
    }

    pub fn element_poly(&self, e: usize) -> &ElementPoly {
        &self.polys[e]
    }

    /// Interpolated residual at a parameter inside element `e`.
    pub fn value(&self, e: usize, t: f64) -> f64 {
        self.polys[e].value(t)
    }

    /// Arclength derivative `r'` inside element `e`.
    pub fn arclength_derivative(&self, e: usize, t: f64) -> f64 {
        self.polys[e].derivative(t) / self.curve.speed(t)
    }
}

/// Breakpoints first (the seam once for closed meshes), then interior Lobatto nodes element by element.
fn sample_params(mesh: &MeshPartition) -> Vec<f64> {
    let q = RESIDUAL_DEGREE;
    let v = lobatto_nodes(q);
    let mut ts: Vec<f64> = mesh.breakpoints().to_vec();
    for e in 0..mesh.n_elements() {
        let (t0, t1) = mesh.element(e);
        ts.extend(v[1..q].iter().map(|&x| t0 + 0.5 * (x + 1.0) * (t1 - t0)));
    }
    ts
}

/// `r_h(gamma(t)) = f(gamma(t)) - V phi_h(gamma(t))`, evaluated directly.
pub fn residual_eval(space: &DiscreteSpace, rhs: &RhsEvaluator, c: &[f64], t: f64, rules: &RuleSet) -> f64 {
    rhs.value(t) - Assembler::new(space, rules).single_layer_at(c, t)
}

/// `r_h'` at the interior Gauss nodes of element `e`.
pub fn residual_derivative_samples(field: &ResidualField, mesh: &MeshPartition, e: usize, rules: &RuleSet) -> Result<Vec<f64>> {
    let (t0, t1) = mesh.element(e);
    if t1 <= t0 {
        return Err(Error::InvalidGeometry(format!("degenerate element {e}")));
    }
    Ok(rules.smooth.nodes.iter().map(|&u| field.arclength_derivative(e, t0 + u * (t1 - t0))).collect())
}

/// Estimator kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndicatorKind {
    Faermann,
    WeightedResidual,
}

/// Per-node indicator values.
#[derive(Clone, Debug)]
pub struct NodalIndicators {
    pub kind: IndicatorKind,
    /// Node (breakpoint) indices.
    pub nodes: Vec<usize>,
    pub values: Vec<f64>,
}

impl NodalIndicators {
    pub fn total_sq(&self) -> f64 {
        neumaier_sum(self.values.iter().map(|v| v * v))
    }

    pub fn total(&self) -> f64 {
        self.total_sq().sqrt()
    }
}

/// Weight in front of the weighted-residual indicator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchWeight {
    /// `|gamma^{-1}(omega(z))|`
    Parameter,
    /// `|omega(z)|`
    Arclength,
}

/// `eta_h(z) = |r_h|_{H^{1/2}(omega(z))}`.
pub fn faermann_indicator(field: &ResidualField, patch: &NodePatch, rules: &RuleSet) -> f64 {
    let mut sq = Vec::new();
    for (k, &e) in patch.elements.iter().enumerate() {
        sq.push(faermann_same(field, e, rules));
        if k == 1 {
            let z = patch.intervals[0].1;
            let shift = patch.intervals[1].0 - field.polys[e].t0;
            sq.push(2.0 * faermann_adjacent(field, patch.elements[0], e, z, shift, rules));
        }
    }
    neumaier_sum(sq).max(0.0).sqrt()
}

fn faermann_same(field: &ResidualField, e: usize, rules: &RuleSet) -> f64 {
    let poly = &field.polys[e];
    let (t0, h) = (poly.t0, poly.h);
    let curve = &field.curve;
    let g = &rules.smooth;
    let mut acc = Vec::with_capacity(g.len());
    // one Duffy triangle (xi > eta); the integrand is symmetric
    for (&y, &wy) in g.nodes.iter().zip(&g.weights) {
        let mut row = 0.0;
        for (&x, &wx) in g.nodes.iter().zip(&g.weights) {
            let s = t0 + h * x;
            let t = t0 + h * x * (1.0 - y);
            let d = poly.divided(s, t);
            let c = curve.chord_vector(s, t);
            let c2 = c[0] * c[0] + c[1] * c[1];
            row += wx * x * d * d / c2 * curve.speed(s) * curve.speed(t);
        }
        acc.push(wy * row);
    }
    2.0 * h * h * neumaier_sum(acc)
}

/// Cross term for `e1` ending at `z` and `e2` starting there after adding `shift`.
fn faermann_adjacent(field: &ResidualField, e1: usize, e2: usize, z: f64, shift: f64, rules: &RuleSet) -> f64 {
    let p1 = &field.polys[e1];
    let p2 = &field.polys[e2];
    let (h1, h2) = (p1.h, p2.h);
    let curve = &field.curve;
    let g = &rules.smooth;
    let mut acc = Vec::new();
    for tri in 0..2 {
        let r = if tri == 0 { h1 / h2 } else { h2 / h1 };
        for (y0, y1) in doubling_panels(r) {
            for (&yy, &wyy) in g.nodes.iter().zip(&g.weights) {
                let y = y0 + (y1 - y0) * yy;
                let wy = wyy * (y1 - y0);
                let mut row = 0.0;
                for (&x, &wx) in g.nodes.iter().zip(&g.weights) {
                    let (xi, eta) = if tri == 0 { (x, x * y) } else { (x * y, x) };
                    let s = z - h1 * xi;
                    let t = z + h2 * eta;
                    let tr = t - shift;
                    let zr = z - shift;
                    // R(s) - R(t) = DD1(s, z)(s - z) + DD2(z, t)(z - t), divided by s - t < 0
                    let num = p1.divided(s, z) * (-h1 * xi) + p2.divided(zr, tr) * (-h2 * eta);
                    let d = num / -(h1 * xi + h2 * eta);
                    let c = curve.chord_vector(s, t);
                    let c2 = c[0] * c[0] + c[1] * c[1];
                    row += wx * x * d * d / c2 * curve.speed(s) * curve.speed(tr);
                }
                acc.push(wy * row);
            }
        }
    }
    h1 * h2 * neumaier_sum(acc)
}

/// `mu_h(z) = (w(z) int_{omega(z)} |r_h'|^2 dx)^{1/2}`.
pub fn weighted_residual_indicator(field: &ResidualField, patch: &NodePatch, weight: PatchWeight, rules: &RuleSet) -> f64 {
    let curve = &field.curve;
    let g = &rules.smooth;
    let mut acc = Vec::new();
    for &e in &patch.elements {
        let poly = &field.polys[e];
        for (&u, &w) in g.nodes.iter().zip(&g.weights) {
            let t = poly.t0 + u * poly.h;
            let d = poly.derivative(t);
            acc.push(w * poly.h * d * d / curve.speed(t));
        }
    }
    let wz = match weight {
        PatchWeight::Parameter => patch.param_length,
        PatchWeight::Arclength => patch.arclength,
    };
    (wz * neumaier_sum(acc).max(0.0)).sqrt()
}

/// All indicators of one kind on a mesh.
pub fn indicators(field: &ResidualField, mesh: &MeshPartition, kind: IndicatorKind, rules: &RuleSet) -> Result<NodalIndicators> {
    indicators_weighted(field, mesh, kind, PatchWeight::Parameter, rules)
}

/// As [`indicators`], with an explicit weight for the weighted-residual kind.
pub fn indicators_weighted(
    field: &ResidualField,
    mesh: &MeshPartition,
    kind: IndicatorKind,
    weight: PatchWeight,
    rules: &RuleSet,
) -> Result<NodalIndicators> {
    let nodes = mesh.nodes();
    let patches = nodes.iter().map(|&z| mesh.node_patch(z)).collect::<Result<Vec<_>>>()?;
    let values = par_map(patches.len(), |i| match kind {
        IndicatorKind::Faermann => faermann_indicator(field, &patches[i], rules),
        IndicatorKind::WeightedResidual => weighted_residual_indicator(field, &patches[i], weight, rules),
    });
    Ok(NodalIndicators { kind, nodes, values })
}

/// Per-node outcome of the local comparison `eta(z) <= sqrt(2) C mu(z)`.
#[derive(Clone, Debug)]
pub struct LocalBound {
    /// `eta(z) - sqrt(2) C mu(z)`; `None` where the patch-length hypothesis fails.
    pub margins: Vec<Option<f64>>,
    pub max_margin: f64,
}

/// Compares Faermann indicators with arclength-weighted residual indicators.
pub fn local_bound_check(eta: &NodalIndicators, mu_arclength: &NodalIndicators, c_gamma: f64, mesh: &MeshPartition) -> Result<LocalBound> {
    if eta.nodes != mu_arclength.nodes {
        return Err(Error::DimensionMismatch {
            expected: eta.nodes.len(),
            got: mu_arclength.nodes.len(),
        });
    }
    let limit = 0.75 * mesh.curve().length();
    let mut margins = Vec::with_capacity(eta.nodes.len());
    for (k, &z) in eta.nodes.iter().enumerate() {
        let patch = mesh.node_patch(z)?;
        if mesh.is_closed() && patch.arclength > limit {
            margins.push(None);
            continue;
        }
        margins.push(Some(eta.values[k] - std::f64::consts::SQRT_2 * c_gamma * mu_arclength.values[k]));
    }
    let max_margin = margins.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(LocalBound { margins, max_margin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::builtin::slit;
    use crate::geometry::Point;
    use crate::quadrature::adaptive_gauss;
    use crate::splines::{KnotVector, WeightVector};
    use proptest::prelude::*;

    fn rules() -> &'static RuleSet {
        RuleSet::standard()
    }

    fn unit_line() -> Arc<BoundaryCurve> {
        let k = KnotVector::open(vec![0.0, 1.0], vec![2, 2], 1).unwrap();
        let w = WeightVector::ones(&k);
        Arc::new(BoundaryCurve::new(k, w, vec![[0.0, 0.0], [1.0, 0.0]], false).unwrap())
    }

    fn mesh(curve: Arc<BoundaryCurve>, bps: Vec<f64>) -> MeshPartition {
        let n = bps.len();
        let mut ms = vec![1; n];
        ms[0] = 2;
        ms[n - 1] = 2;
        MeshPartition::new(curve, bps, ms, vec![0; n - 1]).unwrap()
    }

    #[test]
    fn interpolant_is_exact_on_polynomials() {
        let p = ElementPoly::interpolate(0.2, 0.7, &lobatto_nodes(7).iter().map(|&v| {
            let t = 0.2 + 0.25 * (v + 1.0);
            t * t * t - t
        }).collect::<Vec<_>>());
        for &t in &[0.2, 0.33, 0.7] {
            assert!((p.value(t) - (t * t * t - t)).abs() < 1e-14);
            assert!((p.derivative(t) - (3.0 * t * t - 1.0)).abs() < 1e-12);
        }
        let (s, t) = (0.4, 0.4 + 1e-9);
        let exact = s * s + s * t + t * t - 1.0;
        assert!((p.divided(s, t) - exact).abs() < 1e-12);
        assert!((p.divided(s, s) - p.derivative(s)).abs() < 1e-12);
    }

    #[test]
    fn linear_residual_on_unit_patch() {
        // patch = [0.25, 0.75] of the slit: x from -0.5 to 0.5, |gamma'| = 2
        let m = mesh(Arc::new(slit()), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let curve = m.curve().clone();
        let field = ResidualField::from_fn(&m, |t| curve.point(t)[0]);
        let patch = m.node_patch(2).unwrap();
        assert!((faermann_indicator(&field, &patch, rules()) - 1.0).abs() < 1e-12);
        assert!((weighted_residual_indicator(&field, &patch, PatchWeight::Arclength, rules()) - 1.0).abs() < 1e-12);
        let lb = local_bound_check(
            &indicators(&field, &m, IndicatorKind::Faermann, rules()).unwrap(),
            &indicators_weighted(&field, &m, IndicatorKind::WeightedResidual, PatchWeight::Arclength, rules()).unwrap(),
            1.0,
            &m,
        )
        .unwrap();
        assert!(lb.max_margin <= 1e-12);

        let m = mesh(unit_line(), vec![0.0, 0.5, 1.0]);
        let field = ResidualField::from_fn(&m, |t| t);
        let patch = m.node_patch(1).unwrap();
        assert!((weighted_residual_indicator(&field, &patch, PatchWeight::Parameter, rules()) - 1.0).abs() < 1e-12);
        assert!((faermann_indicator(&field, &patch, rules()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_residual_gives_zero() {
        let m = mesh(Arc::new(crate::geometry::builtin::slit()), vec![0.0, 0.1, 0.5, 1.0]);
        let field = ResidualField::from_fn(&m, |_| 3.7);
        for kind in [IndicatorKind::Faermann, IndicatorKind::WeightedResidual] {
            let ind = indicators(&field, &m, kind, rules()).unwrap();
            assert!(ind.values.iter().all(|&v| v.abs() < 1e-12), "{kind:?}: {:?}", ind.values);
        }
    }

    #[test]
    fn quadratic_residual_matches_brute_force() {
        let m = mesh(unit_line(), vec![0.0, 0.3, 1.0]);
        let field = ResidualField::from_fn(&m, |t| t * t);
        let eta = faermann_indicator(&field, &m.node_patch(1).unwrap(), rules());
        // (s^2 - t^2)^2 / (s - t)^2 = (s + t)^2, integrated over the unit square
        let mut outer = |s: f64| adaptive_gauss(&mut |t: f64| (s + t) * (s + t), 0.0, 1.0, 1e-14, 50).0;
        let oracle = adaptive_gauss(&mut outer, 0.0, 1.0, 1e-13, 50).0;
        assert!((eta * eta - oracle).abs() < 1e-6 * oracle);
        assert!((oracle - 7.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn slit_zero_density_residual() {
        use crate::operators::{ProblemSpec, Rhs};
        let curve = Arc::new(slit());
        let prob = ProblemSpec::new("slit", curve.clone(), Rhs::Analytic(Arc::new(|x: Point| -x[0] / 2.0))).unwrap();
        let ev = RhsEvaluator::new(prob);
        let m = mesh(curve.clone(), vec![0.0, 0.5, 1.0]);
        let kv = KnotVector::open(vec![0.0, 0.5, 1.0], vec![2, 1, 2], 1).unwrap();
        let space = DiscreteSpace::new(m.clone(), 1, WeightVector::ones(&kv)).unwrap();
        let c = vec![0.0; space.dim()];
        let r = residual_eval(&space, &ev, &c, 0.3, rules());
        assert!((r + curve.point(0.3)[0] / 2.0).abs() < 1e-15);
        let field = ResidualField::from_solution(&space, &ev, &c, rules());
        for e in 0..2 {
            for d in residual_derivative_samples(&field, &m, e, rules()).unwrap() {
                assert!((d + 0.5).abs() < 1e-13);
            }
        }
        // mu^2 = l * int |-1/2|^2 * 2 dt over the patch, l = parameter length
        let patch = m.node_patch(0).unwrap();
        let mu = weighted_residual_indicator(&field, &patch, PatchWeight::Parameter, rules());
        assert!((mu * mu - 0.5 * 0.25 * 2.0 * 0.5).abs() < 1e-14);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let m = mesh(Arc::new(slit()), vec![0.0, 0.4, 1.0]);
        let curve = m.curve().clone();
        let r = |t: f64| (3.0 * t).sin() * (-t).exp();
        let field = ResidualField::from_fn(&m, r);
        for &t in &[0.1, 0.3, 0.55, 0.9] {
            let e = if t < 0.4 { 0 } else { 1 };
            let fd = (r(t + 1e-5) - r(t - 1e-5)) / 2e-5 / curve.speed(t);
            assert!((field.arclength_derivative(e, t) - fd).abs() < 1e-4 * fd.abs().max(1e-3));
        }
    }

    proptest! {
        #[test]
        fn homogeneity_and_aggregation(alpha in -3.0f64..3.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let m = mesh(Arc::new(slit()), vec![0.0, 0.2, 0.45, 1.0]);
            let f1 = ResidualField::from_fn(&m, |t| a * t * t + b * (2.0 * t).cos());
            let f2 = ResidualField::from_fn(&m, |t| alpha * (a * t * t + b * (2.0 * t).cos()));
            for kind in [IndicatorKind::Faermann, IndicatorKind::WeightedResidual] {
                let i1 = indicators(&f1, &m, kind, rules()).unwrap();
                let i2 = indicators(&f2, &m, kind, rules()).unwrap();
                for (x, y) in i1.values.iter().zip(&i2.values) {
                    prop_assert!(*x >= 0.0);
                    prop_assert!((alpha.abs() * x - y).abs() <= 1e-12 * (1.0 + y));
                }
                let s: f64 = i1.values.iter().map(|v| v * v).sum();
                prop_assert!((i1.total().powi(2) - s).abs() <= 1e-12 * s.max(1e-300));
            }
        }
    }
}
