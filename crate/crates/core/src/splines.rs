//! Univariate B-splines and NURBS: Cox-de Boor evaluation, derivatives and
//! weight-preserving knot insertion.
//!
//! Basis functions are numbered from zero. For an open (clamped) knot vector
//! `t_0 <= ... <= t_{M-1}` the `i`-th B-spline lives on `[t_i, t_{i+p+1})`.
//! Periodic knot vectors store one period of knots in `(a, b]` and wrap all
//! index arithmetic with the period `b - a`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest supported polynomial degree.
pub const MAX_DEGREE: usize = 7;
const MAX_LOCAL: usize = MAX_DEGREE + 1;

/// Which one-sided limit to take when evaluating exactly at a knot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Breakpoints with multiplicities, a degree and an optional periodic wrap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KnotVectorRepr", into = "KnotVectorRepr")]
pub struct KnotVector {
    breakpoints: Vec<f64>,
    multiplicities: Vec<usize>,
    degree: usize,
    periodic: bool,
    /// Open: the full clamped list. Periodic: the knots of one period in `(a, b]`.
    knots: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct KnotVectorRepr {
    breakpoints: Vec<f64>,
    multiplicities: Vec<usize>,
    degree: usize,
    periodic: bool,
}

impl TryFrom<KnotVectorRepr> for KnotVector {
    type Error = Error;
    fn try_from(r: KnotVectorRepr) -> Result<Self> {
        if r.periodic {
            KnotVector::periodic(r.breakpoints, r.multiplicities, r.degree)
        } else {
            KnotVector::open(r.breakpoints, r.multiplicities, r.degree)
        }
    }
}

impl From<KnotVector> for KnotVectorRepr {
    fn from(k: KnotVector) -> Self {
        KnotVectorRepr {
            breakpoints: k.breakpoints,
            multiplicities: k.multiplicities,
            degree: k.degree,
            periodic: k.periodic,
        }
    }
}

impl KnotVector {
    /// Open knot vector; both end breakpoints must carry multiplicity `p + 1`.
    pub fn open(breakpoints: Vec<f64>, multiplicities: Vec<usize>, degree: usize) -> Result<Self> {
        Self::check_common(&breakpoints, &multiplicities, degree)?;
        let n = breakpoints.len();
        if multiplicities[0] != degree + 1 || multiplicities[n - 1] != degree + 1 {
            return Err(Error::InvalidKnots(format!(
                "open knot vector needs multiplicity {} at both ends, got {} and {}",
                degree + 1,
                multiplicities[0],
                multiplicities[n - 1]
            )));
        }
        let knots = breakpoints
            .iter()
            .zip(&multiplicities)
            .flat_map(|(&z, &m)| std::iter::repeat_n(z, m))
            .collect();
        Ok(Self {
            breakpoints,
            multiplicities,
            degree,
            periodic: false,
            knots,
        })
    }

    /// Periodic knot vector on `[z_0, z_n]`; `z_0` and `z_n` are identified and must
    /// carry the same multiplicity.
    pub fn periodic(breakpoints: Vec<f64>, multiplicities: Vec<usize>, degree: usize) -> Result<Self> {
        Self::check_common(&breakpoints, &multiplicities, degree)?;
        let n = breakpoints.len();
        if multiplicities[0] != multiplicities[n - 1] {
            return Err(Error::InvalidKnots(
                "periodic knot vector needs equal multiplicity at the identified ends".into(),
            ));
        }
        let knots: Vec<f64> = breakpoints[1..]
            .iter()
            .zip(&multiplicities[1..])
            .flat_map(|(&z, &m)| std::iter::repeat_n(z, m))
            .collect();
        if knots.len() < degree + 1 {
            return Err(Error::InvalidKnots(format!(
                "periodic knot vector of degree {degree} needs at least {} knots per period",
                degree + 1
            )));
        }
        Ok(Self {
            breakpoints,
            multiplicities,
            degree,
            periodic: true,
            knots,
        })
    }

    fn check_common(breakpoints: &[f64], multiplicities: &[usize], degree: usize) -> Result<()> {
        if degree > MAX_DEGREE {
            return Err(Error::InvalidKnots(format!("degree {degree} exceeds {MAX_DEGREE}")));
        }
        if breakpoints.len() < 2 || breakpoints.len() != multiplicities.len() {
            return Err(Error::InvalidKnots(
                "need at least two breakpoints and one multiplicity per breakpoint".into(),
            ));
        }
        if breakpoints.iter().any(|z| !z.is_finite()) || breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidKnots("breakpoints must be finite and strictly increasing".into()));
        }
        if let Some(&m) = multiplicities.iter().find(|&&m| m == 0 || m > degree + 1) {
            return Err(Error::MultiplicityOverflow {
                multiplicity: m,
                max: degree + 1,
            });
        }
        Ok(())
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn multiplicities(&self) -> &[usize] {
        &self.multiplicities
    }

    pub fn a(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn b(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn period(&self) -> Option<f64> {
        self.periodic.then(|| self.b() - self.a())
    }

    /// Stored knots: the full clamped list (open) or one period in `(a, b]` (periodic).
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        if self.periodic {
            self.knots.len()
        } else {
            self.knots.len() - self.degree - 1
        }
    }

    /// Knot `t_i` for any index; periodic vectors are extended by the period.
    pub fn knot(&self, i: isize) -> f64 {
        if self.periodic {
            let n = self.knots.len() as isize;
            let q = i.div_euclid(n);
            let r = i.rem_euclid(n) as usize;
            self.knots[r] + q as f64 * (self.b() - self.a())
        } else {
            let last = self.knots.len() as isize - 1;
            self.knots[i.clamp(0, last) as usize]
        }
    }

    /// Maps a basis index from extended numbering to `0..dim`.
    pub fn basis_index(&self, i: isize) -> usize {
        if self.periodic {
            i.rem_euclid(self.dim() as isize) as usize
        } else {
            i as usize
        }
    }

    /// Multiplicity of the breakpoint equal to `t`, or zero.
    pub fn multiplicity_at(&self, t: f64) -> usize {
        let t = self.wrap_closed(t);
        self.breakpoints
            .iter()
            .position(|&z| z == t)
            .map_or(0, |j| self.multiplicities[j])
    }

    /// Periodic: maps `t` to `[a, b)`. Open: returns `t`.
    pub fn reduce(&self, t: f64) -> f64 {
        if !self.periodic {
            return t;
        }
        let (a, b) = (self.a(), self.b());
        let p = b - a;
        let mut r = a + (t - a).rem_euclid(p);
        if r >= b {
            r = a;
        }
        r
    }

    /// Periodic: maps `t` to `(a, b]`, used for identifying the seam breakpoint.
    fn wrap_closed(&self, t: f64) -> f64 {
        if self.periodic && t == self.a() {
            self.b()
        } else {
            t
        }
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::OutsideDomain { t, a: self.a(), b: self.b() });
        }
        if !self.periodic && (t < self.a() || t > self.b()) {
            return Err(Error::OutsideDomain { t, a: self.a(), b: self.b() });
        }
        Ok(())
    }

    /// Knot span `k` with `t_k <= t < t_{k+1}` (right) or `t_k < t <= t_{k+1}` (left).
    ///
    /// The nonzero basis functions on the span are `k - p ..= k`. For open vectors
    /// the ends are clamped to the first and last nondegenerate span.
    pub fn find_span(&self, t: f64, side: Side) -> isize {
        let p = self.degree as isize;
        if self.periodic {
            let (a, b) = (self.a(), self.b());
            let period = b - a;
            let mut shift = 0isize;
            let mut tt = t;
            // reduce into [a, b) (right) or (a, b] (left)
            let q = ((t - a) / period).floor();
            tt -= q * period;
            shift += q as isize;
            if side == Side::Left && tt == a {
                tt = b;
                shift -= 1;
            }
            if tt >= b && side == Side::Right {
                tt -= period;
                shift += 1;
            }
            let n = self.knots.len() as isize;
            // knots in extended numbering: index -1 .. n-1 covers [a, b]
            let idx = match side {
                Side::Right => self.knots.partition_point(|&x| x <= tt) as isize - 1,
                Side::Left => self.knots.partition_point(|&x| x < tt) as isize - 1,
            };
            idx + shift * n
        } else {
            let n = self.dim() as isize;
            let idx = match side {
                Side::Right => self.knots.partition_point(|&x| x <= t) as isize - 1,
                Side::Left => self.knots.partition_point(|&x| x < t) as isize - 1,
            };
            idx.clamp(p, n - 1)
        }
    }

    /// Values and derivatives up to `nders` of the `p + 1` B-splines nonzero on span `k`.
    ///
    /// `out[d][j]` is the `d`-th derivative of basis `k - p + j`.
    pub(crate) fn ders_at_span(&self, k: isize, t: f64, nders: usize, out: &mut [[f64; MAX_LOCAL]]) {
        let p = self.degree;
        let mut left = [0.0; MAX_LOCAL];
        let mut right = [0.0; MAX_LOCAL];
        let mut ndu = [[0.0; MAX_LOCAL]; MAX_LOCAL];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knot(k + 1 - j as isize);
            right[j] = self.knot(k + j as isize) - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = if ndu[j][r] != 0.0 { ndu[r][j - 1] / ndu[j][r] } else { 0.0 };
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        for j in 0..=p {
            out[0][j] = ndu[j][p];
        }
        if nders == 0 {
            return;
        }
        let nd = nders.min(p);
        for r in 0..=p {
            let mut a = [[0.0; MAX_LOCAL]; 2];
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for d in 1..=nd {
                let mut dv = 0.0;
                let rk = r as isize - d as isize;
                let pk = p - d;
                if r >= d {
                    let den = ndu[pk + 1][rk as usize];
                    a[s2][0] = if den != 0.0 { a[s1][0] / den } else { 0.0 };
                    dv = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { d - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    let den = ndu[pk + 1][idx];
                    a[s2][j] = if den != 0.0 { (a[s1][j] - a[s1][j - 1]) / den } else { 0.0 };
                    dv += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    let den = ndu[pk + 1][r];
                    a[s2][d] = if den != 0.0 { -a[s1][d - 1] / den } else { 0.0 };
                    dv += a[s2][d] * ndu[r][pk];
                }
                out[d][r] = dv;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for d in 1..=nd {
            for v in out[d].iter_mut().take(p + 1) {
                *v *= factor;
            }
            factor *= (p - d) as f64;
        }
        for row in out.iter_mut().take(nders + 1).skip(nd + 1) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Evaluation side for parameter `t`: right-continuous except at the closed right end.
    pub(crate) fn default_side(&self, t: f64) -> Side {
        if !self.periodic && t >= self.b() {
            Side::Left
        } else {
            Side::Right
        }
    }
}

/// Positive weights, one per basis function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>, knots: &KnotVector) -> Result<Self> {
        if weights.len() != knots.dim() {
            return Err(Error::DimensionMismatch {
                expected: knots.dim(),
                got: weights.len(),
            });
        }
        if let Some(&w) = weights.iter().find(|&&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::NonPositiveWeight(w));
        }
        Ok(Self(weights))
    }

    pub fn ones(knots: &KnotVector) -> Self {
        Self(vec![1.0; knots.dim()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A spline with scalar coefficients on a knot vector.
///
/// On its own it is the polynomial spline `sum a_i B_i`; combined with a
/// [`WeightVector`] it denotes the rational function `sum a_i R_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineFunction {
    pub knots: KnotVector,
    pub coefficients: Vec<f64>,
}

impl SplineFunction {
    pub fn new(knots: KnotVector, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != knots.dim() {
            return Err(Error::DimensionMismatch {
                expected: knots.dim(),
                got: coefficients.len(),
            });
        }
        Ok(Self { knots, coefficients })
    }

    /// `sum a_i B_i(t)`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        Ok(eval_bspline_basis(&self.knots, t)?
            .into_iter()
            .map(|(i, v)| self.coefficients[i] * v)
            .sum())
    }

    /// `sum a_i R_i(t)` for the given weights.
    pub fn eval_rational(&self, weights: &WeightVector, t: f64) -> Result<f64> {
        Ok(eval_nurbs_basis(&self.knots, weights, t)?
            .into_iter()
            .map(|(i, v)| self.coefficients[i] * v)
            .sum())
    }
}

/// Nonzero basis values at a point, stored inline.
#[derive(Clone, Copy, Debug)]
pub struct LocalBasis {
    /// Extended index of the first nonzero function (`span - p`).
    pub first: isize,
    pub count: usize,
    pub values: [f64; MAX_LOCAL],
    pub derivs: [f64; MAX_LOCAL],
}

impl LocalBasis {
    pub fn iter(&self) -> impl Iterator<Item = (isize, f64)> + '_ {
        (0..self.count).map(move |j| (self.first + j as isize, self.values[j]))
    }
}

/// B-spline values and first derivatives on a known span.
pub fn bspline_local(knots: &KnotVector, span: isize, t: f64) -> LocalBasis {
    let p = knots.degree();
    let mut out = [[0.0; MAX_LOCAL]; 2];
    knots.ders_at_span(span, t, 1, &mut out);
    LocalBasis {
        first: span - p as isize,
        count: p + 1,
        values: out[0],
        derivs: out[1],
    }
}

/// NURBS values and first derivatives on a known span.
pub fn nurbs_local(knots: &KnotVector, weights: &[f64], span: isize, t: f64) -> LocalBasis {
    let mut b = bspline_local(knots, span, t);
    let mut den = 0.0;
    let mut dden = 0.0;
    let mut wv = [0.0; MAX_LOCAL];
    for j in 0..b.count {
        let w = weights[knots.basis_index(b.first + j as isize)];
        wv[j] = w;
        den += w * b.values[j];
        dden += w * b.derivs[j];
    }
    for j in 0..b.count {
        let v = wv[j] * b.values[j] / den;
        let d = (wv[j] * b.derivs[j] - v * dden) / den;
        b.values[j] = v;
        b.derivs[j] = d;
    }
    b
}

/// All B-splines nonzero at `t` with their values; they sum to one.
pub fn eval_bspline_basis(knots: &KnotVector, t: f64) -> Result<Vec<(usize, f64)>> {
    knots.check_domain(t)?;
    let span = knots.find_span(t, knots.default_side(t));
    let local = bspline_local(knots, span, t);
    Ok(local.iter().map(|(i, v)| (knots.basis_index(i), v)).collect())
}

/// Derivatives of the given order of all B-splines nonzero at `t`.
pub fn eval_bspline_derivative(knots: &KnotVector, t: f64, order: usize) -> Result<Vec<(usize, f64)>> {
    eval_bspline_derivative_side(knots, t, order, knots.default_side(t))
}

/// One-sided derivatives of the given order at `t`.
pub fn eval_bspline_derivative_side(knots: &KnotVector, t: f64, order: usize, side: Side) -> Result<Vec<(usize, f64)>> {
    knots.check_domain(t)?;
    let p = knots.degree();
    let span = knots.find_span(t, side);
    let mut out = [[0.0; MAX_LOCAL]; MAX_LOCAL + 1];
    knots.ders_at_span(span, t, order.min(MAX_LOCAL), &mut out);
    let first = span - p as isize;
    Ok((0..=p)
        .map(|j| {
            let v = if order <= MAX_LOCAL { out[order][j] } else { 0.0 };
            (knots.basis_index(first + j as isize), v)
        })
        .collect())
}

/// NURBS basis `R_i = w_i B_i / sum_l w_l B_l` at `t`.
pub fn eval_nurbs_basis(knots: &KnotVector, weights: &WeightVector, t: f64) -> Result<Vec<(usize, f64)>> {
    knots.check_domain(t)?;
    if weights.len() != knots.dim() {
        return Err(Error::DimensionMismatch {
            expected: knots.dim(),
            got: weights.len(),
        });
    }
    let span = knots.find_span(t, knots.default_side(t));
    let local = nurbs_local(knots, weights.as_slice(), span, t);
    Ok(local.iter().map(|(i, v)| (knots.basis_index(i), v)).collect())
}

/// Inserts `t_new` once, keeping the NURBS denominator and every attached
/// rational function unchanged.
///
/// Coefficients are premultiplied by the weights, run through one Boehm
/// step, and divided by the new weights.
pub fn insert_knot(
    knots: &KnotVector,
    weights: &WeightVector,
    attached: &[SplineFunction],
    t_new: f64,
) -> Result<(KnotVector, WeightVector, Vec<SplineFunction>)> {
    knots.check_domain(t_new)?;
    for f in attached {
        if f.knots != *knots {
            return Err(Error::InvalidKnots("attached function lives on a different knot vector".into()));
        }
    }
    let p = knots.degree();
    let t_ins = knots.wrap_closed(t_new);
    let current = knots.multiplicity_at(t_ins);
    if current + 1 > p + 1 {
        return Err(Error::MultiplicityOverflow {
            multiplicity: current + 1,
            max: p + 1,
        });
    }

    // New knot vector.
    let mut bps = knots.breakpoints().to_vec();
    let mut mults = knots.multiplicities().to_vec();
    if current > 0 {
        for (z, m) in bps.iter().zip(mults.iter_mut()) {
            if *z == t_ins || (knots.is_periodic() && t_ins == knots.b() && *z == knots.a()) {
                *m += 1;
            }
        }
    } else {
        let pos = bps.partition_point(|&z| z < t_ins);
        bps.insert(pos, t_ins);
        mults.insert(pos, 1);
    }
    let new_knots = if knots.is_periodic() {
        KnotVector::periodic(bps, mults, p)?
    } else {
        KnotVector::open(bps, mults, p)?
    };

    // Homogeneous coefficient columns: weights first, then w*a for each attached function.
    let w = weights.as_slice();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(attached.len() + 1);
    columns.push(w.to_vec());
    for f in attached {
        columns.push(f.coefficients.iter().zip(w).map(|(a, w)| a * w).collect());
    }

    // the seam of a periodic vector is always a breakpoint; reducing b to a and
    // shifting by one period lands on the last copy of b
    let k = knots.find_span(t_ins, Side::Right);

    let alpha = |i: isize| -> f64 {
        let ti = knots.knot(i);
        let tip = knots.knot(i + p as isize);
        if tip > ti {
            (t_ins - ti) / (tip - ti)
        } else {
            0.0
        }
    };
    let pi = p as isize;
    let new_dim = new_knots.dim();
    let mut new_columns: Vec<Vec<f64>> = vec![vec![0.0; new_dim]; columns.len()];
    let old_at = |col: &Vec<f64>, i: isize| -> f64 { col[knots.basis_index(i)] };
    let (lo, hi) = if knots.is_periodic() {
        (k - pi + 1, k - pi + 1 + knots.dim() as isize)
    } else {
        (0, new_dim as isize - 1)
    };
    for i in lo..=hi {
        let target = new_knots.basis_index(i);
        for (c, col) in columns.iter().enumerate() {
            let v = if i <= k - pi {
                old_at(col, i)
            } else if i > k {
                old_at(col, i - 1)
            } else {
                let a = alpha(i);
                a * old_at(col, i) + (1.0 - a) * old_at(col, i - 1)
            };
            new_columns[c][target] = v;
        }
    }
    let new_w = new_columns[0].clone();
    let new_weights = WeightVector::new(new_w.clone(), &new_knots)?;
    let new_attached = new_columns[1..]
        .iter()
        .map(|col| SplineFunction {
            knots: new_knots.clone(),
            coefficients: col.iter().zip(&new_w).map(|(c, w)| c / w).collect(),
        })
        .collect();
    Ok((new_knots, new_weights, new_attached))
}
