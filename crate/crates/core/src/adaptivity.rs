//! Dörfler marking on nodes, translation into bisections and multiplicity
//! increases, and refinement with level closure.
//!
//! Every element carries a bisection level. Before an element of level `l`
//! is bisected, neighbours of level below `l` are bisected first, so touching
//! elements never differ by more than one level. With midpoint bisection this
//! keeps `kappa <= 2 kappa_0`.

use std::collections::BTreeSet;

use crate::estimators::NodalIndicators;
use crate::geometry::MeshPartition;
use crate::operators::DiscreteSpace;
use crate::splines::{insert_knot, SplineFunction};
use crate::{Error, Result};

/// Minimal node set carrying a `theta` fraction of the squared estimator.
///
/// Greedy over values sorted descending, ties by ascending node index.
pub fn doerfler_mark(ind: &NodalIndicators, theta: f64) -> Result<Vec<usize>> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Config(format!("theta = {theta} outside (0, 1]")));
    }
    let mut order: Vec<(f64, usize)> = ind.values.iter().zip(&ind.nodes).map(|(v, &z)| (v * v, z)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let total: f64 = order.iter().map(|x| x.0).sum();
    if total <= 0.0 {
        return Ok(Vec::new());
    }
    let goal = theta * total;
    let mut acc = 0.0;
    let mut marked = Vec::new();
    for (v, z) in order {
        if acc >= goal || v == 0.0 {
            break;
        }
        acc += v;
        marked.push(z);
    }
    marked.sort_unstable();
    Ok(marked)
}

/// Actions derived from a set of marked nodes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MarkingResult {
    pub marked: Vec<usize>,
    /// Elements to bisect, ascending.
    pub bisect: Vec<usize>,
    /// Nodes whose multiplicity goes up by one, ascending.
    pub raise: Vec<usize>,
}

/// Node indices `(left, right)` of element `e`, using the seam node `n` for closed meshes.
pub fn element_nodes(mesh: &MeshPartition, e: usize) -> (usize, usize) {
    let n = mesh.n_elements();
    let left = if mesh.is_closed() && e == 0 { n } else { e };
    (left, e + 1)
}

/// An element is bisected when both its nodes are marked. A marked node not
/// covered that way gets its multiplicity raised if below `p + 1`; otherwise
/// the elements containing it are bisected.
pub fn translate_marks(space: &DiscreteSpace, marked: &[usize]) -> Result<MarkingResult> {
    let mesh = space.mesh();
    let p = space.degree();
    let valid: BTreeSet<usize> = mesh.nodes().into_iter().collect();
    let set: BTreeSet<usize> = marked.iter().copied().collect();
    if let Some(&z) = set.iter().find(|z| !valid.contains(z)) {
        return Err(Error::UnknownNode(z));
    }
    let mut bisect = BTreeSet::new();
    let mut covered = BTreeSet::new();
    for e in 0..mesh.n_elements() {
        let (l, r) = element_nodes(mesh, e);
        if set.contains(&l) && set.contains(&r) {
            bisect.insert(e);
            covered.insert(l);
            covered.insert(r);
        }
    }
    let mut raise = Vec::new();
    for &z in set.difference(&covered) {
        if mesh.multiplicities()[z] < p + 1 {
            raise.push(z);
        } else {
            bisect.extend(mesh.node_elements(z)?);
        }
    }
    Ok(MarkingResult {
        marked: set.into_iter().collect(),
        bisect: bisect.into_iter().collect(),
        raise,
    })
}

/// What a refinement step changed.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementRecord {
    pub old_breakpoints: Vec<f64>,
    pub new_breakpoints: Vec<f64>,
    /// New breakpoints (element midpoints), ascending.
    pub inserted: Vec<f64>,
    /// Breakpoints whose multiplicity went up.
    pub raised: Vec<f64>,
    /// Old elements bisected only to keep neighbouring levels within one.
    pub closure_bisections: Vec<usize>,
}

fn neighbours(mesh: &MeshPartition, e: usize) -> Vec<usize> {
    let n = mesh.n_elements();
    let mut out = Vec::with_capacity(2);
    if e > 0 {
        out.push(e - 1);
    } else if mesh.is_closed() {
        out.push(n - 1);
    }
    if e + 1 < n {
        out.push(e + 1);
    } else if mesh.is_closed() {
        out.push(0);
    }
    out
}

/// Closes a bisection set under the level rule.
pub fn level_closure(mesh: &MeshPartition, marked: &[usize]) -> Vec<usize> {
    let levels = mesh.levels();
    let mut flag = vec![false; mesh.n_elements()];
    let mut stack: Vec<usize> = marked.to_vec();
    for &e in marked {
        flag[e] = true;
    }
    while let Some(e) = stack.pop() {
        for k in neighbours(mesh, e) {
            if !flag[k] && levels[k] < levels[e] {
                flag[k] = true;
                stack.push(k);
            }
        }
    }
    flag.iter().enumerate().filter(|(_, &f)| f).map(|(e, _)| e).collect()
}

/// Applies a marking: multiplicity increases and bisections (with closure)
/// by knot insertion. Returns the new space and the record.
pub fn refine(space: &DiscreteSpace, marking: &MarkingResult) -> Result<(DiscreteSpace, RefinementRecord)> {
    let (new, rec, _) = refine_with(space, marking, &[])?;
    Ok((new, rec))
}

/// As [`refine`], also carrying rational functions of the old space into the new one.
pub fn refine_with(
    space: &DiscreteSpace,
    marking: &MarkingResult,
    attached: &[SplineFunction],
) -> Result<(DiscreteSpace, RefinementRecord, Vec<SplineFunction>)> {
    let mesh = space.mesh();
    let p = space.degree();
    let closed = mesh.is_closed();
    let n = mesh.n_elements();
    let bisect = level_closure(mesh, &marking.bisect);
    let closure_bisections: Vec<usize> = bisect.iter().copied().filter(|e| marking.bisect.binary_search(e).is_err()).collect();

    let mut knots = space.knots().clone();
    let mut weights = space.weights().clone();
    let mut funcs = attached.to_vec();
    let mut raised = Vec::new();
    for &z in &marking.raise {
        if mesh.multiplicities()[z] > p {
            return Err(Error::MultiplicityOverflow {
                multiplicity: mesh.multiplicities()[z] + 1,
                max: p + 1,
            });
        }
        let t = if closed && z == n { mesh.curve().b() } else { mesh.breakpoints()[z] };
        (knots, weights, funcs) = insert_knot(&knots, &weights, &funcs, t)?;
        raised.push(t);
    }
    let mut inserted = Vec::with_capacity(bisect.len());
    for &e in &bisect {
        let (t0, t1) = mesh.element(e);
        let m = 0.5 * (t0 + t1);
        (knots, weights, funcs) = insert_knot(&knots, &weights, &funcs, m)?;
        inserted.push(m);
    }

    // levels: children inherit parent level + 1
    let mut levels = Vec::with_capacity(n + bisect.len());
    let mut k = 0;
    for e in 0..n {
        if k < bisect.len() && bisect[k] == e {
            levels.push(mesh.levels()[e] + 1);
            levels.push(mesh.levels()[e] + 1);
            k += 1;
        } else {
            levels.push(mesh.levels()[e]);
        }
    }
    let new_mesh = MeshPartition::new(
        mesh.curve().clone(),
        knots.breakpoints().to_vec(),
        knots.multiplicities().to_vec(),
        levels,
    )?;
    let record = RefinementRecord {
        old_breakpoints: mesh.breakpoints().to_vec(),
        new_breakpoints: new_mesh.breakpoints().to_vec(),
        inserted,
        raised,
        closure_bisections,
    };
    let new_space = DiscreteSpace::new(new_mesh, p, weights)?;
    Ok((new_space, record, funcs))
}

/// Marks every node: bisects every element, raises nothing.
pub fn uniform_marking(space: &DiscreteSpace) -> Result<MarkingResult> {
    translate_marks(space, &space.mesh().nodes())
}
