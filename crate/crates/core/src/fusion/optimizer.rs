use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::factors::{residual_and_jacobian, whitened_residual, FactorKind, Linearization};
use super::{FusionError, Graph, Key};
use crate::geom::{NavState, NavTangent, NAV_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_lambda: f64,
    /// Huber threshold (whitened units) per factor type; absent means plain least squares.
    pub huber: BTreeMap<FactorKind, f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_cost_tolerance: 1e-9,
            step_tolerance: 1e-10,
            initial_lambda: 1e-9,
            huber: BTreeMap::new(),
        }
    }
}

/// Why the solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ZeroCost,
    RelativeDecrease,
    SmallStep,
    /// Damping grew without finding a cheaper point.
    NoImprovement,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.termination != Termination::MaxIterations
    }
}

const MAX_LAMBDA: f64 = 1e12;
const MIN_LAMBDA: f64 = 1e-14;
const DAMPING_FLOOR: f64 = 1e-6;

fn huber_weight(norm: f64, k: Option<f64>) -> (f64, f64) {
    // (sqrt IRLS weight, robust cost)
    match k {
        Some(k) if norm > k => ((k / norm).sqrt(), k * norm - 0.5 * k * k),
        _ => (1.0, 0.5 * norm * norm),
    }
}

/// Symmetric matrix stored as its lower band, row by row.
#[derive(Debug, Clone)]
pub(crate) struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    pub(crate) fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Entry `(i, j)`; zero outside the band.
    pub(crate) fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds to `(i, j)` with `i >= j`, which must lie inside the band.
    #[inline]
    pub(crate) fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    #[cfg(test)]
    pub(crate) fn from_dense(a: &nalgebra::DMatrix<f64>, bw: usize) -> Self {
        let mut b = Self::zeros(a.nrows(), bw);
        for i in 0..b.n {
            for j in i.saturating_sub(b.bw)..=i {
                let k = b.idx(i, j);
                b.data[k] = a[(i, j)];
            }
        }
        b
    }

    fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..i {
                let v = self.data[self.idx(i, j)];
                y[i] += v * x[j];
                y[j] += v * x[i];
            }
            y[i] += self.data[self.idx(i, i)] * x[i];
        }
        y
    }

    /// Solves `A x = b` by banded Cholesky; `None` when `A` is not
    /// numerically positive definite.
    pub(crate) fn cholesky_solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        let (n, bw) = (self.n, self.bw);
        let s = bw + 1;
        // Row i holds L[i, i - t] at offset t, so the products below run over
        // contiguous runs of both rows.
        let mut l = self.data.clone();
        for j in 0..n {
            let kj = j.min(bw);
            let row_j = j * s;
            let d = l[row_j] - dot(&l[row_j + 1..=row_j + kj], &l[row_j + 1..=row_j + kj]);
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let ljj = d.sqrt();
            l[row_j] = ljj;
            for i in j + 1..n.min(j + s) {
                let row_i = i * s;
                let off = i - j;
                let len = (i.min(bw)).saturating_sub(off);
                let v = l[row_i + off] - dot(&l[row_i + off + 1..=row_i + off + len], &l[row_j + 1..=row_j + len]);
                l[row_i + off] = v / ljj;
            }
        }
        let mut y = b.clone();
        for i in 0..n {
            let row = i * s;
            let k = i.min(bw);
            let mut acc = y[i];
            for t in 1..=k {
                acc -= l[row + t] * y[i - t];
            }
            y[i] = acc / l[row];
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in i + 1..n.min(i + s) {
                acc -= l[k * s + (k - i)] * y[k];
            }
            y[i] = acc / l[i * s];
        }
        Some(y)
    }
}

struct System {
    h: Banded,
    g: DVector<f64>,
    cost: f64,
}

fn total_cost(graph: &Graph, config: &SolverConfig) -> Result<f64, FusionError> {
    let view = graph.view();
    let mut cost = 0.0;
    for f in graph.factors() {
        let r = whitened_residual(f, &view)?;
        cost += huber_weight(r.norm(), config.huber.get(&f.kind()).copied()).1;
    }
    for m in graph.marginals() {
        cost += m.linearize(graph.states())?.cost();
    }
    if !cost.is_finite() {
        return Err(FusionError::NonFinite);
    }
    Ok(cost)
}

/// Columns of `j` that hold any non-zero entry.
fn nonzero_columns(j: &nalgebra::DMatrix<f64>) -> Vec<usize> {
    (0..j.ncols()).filter(|&c| j.column(c).iter().any(|v| *v != 0.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn accumulate(sys: &mut System, index: &BTreeMap<Key, usize>, lin: &Linearization, weight: f64) {
    let w2 = weight * weight;
    let m = lin.residual.len();
    let blocks: Vec<(usize, &[f64], Vec<usize>)> = lin
        .jacobians
        .iter()
        .map(|(k, j)| (index[k] * NAV_DIM, j.as_slice(), nonzero_columns(j)))
        .collect();
    let r = lin.residual.as_slice();
    let stride = sys.h.bw + 1;
    fn col(j: &[f64], m: usize, c: usize) -> &[f64] {
        &j[c * m..(c + 1) * m]
    }
    for (ia, ja, ca) in &blocks {
        for &c in ca {
            sys.g[ia + c] += dot(col(ja, m, c), r) * w2;
        }
        for (ib, jb, cb) in &blocks {
            if ib > ia {
                continue;
            }
            // lower block (a, b) with ia >= ib
            for &ra in ca {
                let row = ia + ra;
                let col_a = col(ja, m, ra);
                let base = row * stride + row;
                for &rb in cb {
                    let c = ib + rb;
                    if c > row {
                        break;
                    }
                    sys.h.data[base - c] += dot(col_a, col(jb, m, rb)) * w2;
                }
            }
        }
    }
}

fn build_system(
    graph: &Graph,
    index: &BTreeMap<Key, usize>,
    bw: usize,
    config: &SolverConfig,
) -> Result<System, FusionError> {
    let n = index.len() * NAV_DIM;
    let mut sys = System {
        h: Banded::zeros(n, bw),
        g: DVector::zeros(n),
        cost: 0.0,
    };
    let view = graph.view();
    for f in graph.factors() {
        let lin = residual_and_jacobian(f, &view)?;
        let (w, c) = huber_weight(lin.residual.norm(), config.huber.get(&f.kind()).copied());
        sys.cost += c;
        accumulate(&mut sys, index, &lin, w);
    }
    for m in graph.marginals() {
        let lin = m.linearize(graph.states())?;
        sys.cost += lin.cost();
        accumulate(&mut sys, index, &lin, 1.0);
    }
    Ok(sys)
}

/// Half-bandwidth (in scalar rows) of the normal equations in key order.
fn bandwidth(graph: &Graph, index: &BTreeMap<Key, usize>) -> usize {
    let mut span = 0;
    let spans = graph
        .factors()
        .iter()
        .map(|f| f.keys())
        .chain(graph.marginals().iter().map(|m| m.keys().to_vec()));
    for keys in spans {
        let pos: Vec<usize> = keys.iter().filter_map(|k| index.get(k).copied()).collect();
        if let (Some(lo), Some(hi)) = (pos.iter().min(), pos.iter().max()) {
            span = span.max(hi - lo);
        }
    }
    (span + 1) * NAV_DIM - 1
}

fn retract_all(
    states: &BTreeMap<Key, NavState<f64>>,
    index: &BTreeMap<Key, usize>,
    step: &DVector<f64>,
) -> BTreeMap<Key, NavState<f64>> {
    states
        .iter()
        .map(|(k, s)| {
            let o = index[k] * NAV_DIM;
            let d = NavTangent::<f64>::from_iterator(step.rows(o, NAV_DIM).iter().copied());
            (*k, s.retract(&d))
        })
        .collect()
}

/// Levenberg-Marquardt over all active states of `graph`, updating them in place.
///
/// Accepted steps never increase the cost. Stops on a relative cost
/// decrease below `relative_cost_tolerance`, a step norm below
/// `step_tolerance`, or after `max_iterations` solves.
pub fn optimize(graph: &mut Graph, config: &SolverConfig) -> Result<SolveReport, FusionError> {
    if !graph.has_gauge_prior() {
        return Err(FusionError::IndefiniteSystem);
    }
    let index: BTreeMap<Key, usize> = graph.states().keys().enumerate().map(|(i, k)| (*k, i)).collect();
    let bw = bandwidth(graph, &index);
    let initial_cost = total_cost(graph, config)?;
    let mut cost = initial_cost;
    let mut lambda = config.initial_lambda;
    let mut iterations = 0;

    let termination = 'outer: loop {
        if cost == 0.0 {
            break Termination::ZeroCost;
        }
        let sys = build_system(graph, &index, bw, config)?;
        let rhs = -&sys.g;
        loop {
            if iterations >= config.max_iterations {
                break 'outer Termination::MaxIterations;
            }
            iterations += 1;
            let mut damped = sys.h.clone();
            for i in 0..damped.n {
                damped.add_lower(i, i, lambda * sys.h.get(i, i).max(DAMPING_FLOOR));
            }
            let Some(step) = damped.cholesky_solve(&rhs) else {
                lambda *= 10.0;
                if lambda > MAX_LAMBDA {
                    return Err(FusionError::IndefiniteSystem);
                }
                continue;
            };
            // Gauss-Newton model decrease: once it is below tolerance the
            // optimum is reached to within rounding.
            let predicted = -sys.g.dot(&step) - 0.5 * step.dot(&sys.h.mul_vec(&step));
            let negligible = predicted <= config.relative_cost_tolerance * cost;
            let candidate = retract_all(graph.states(), &index, &step);
            let previous = std::mem::replace(&mut graph.states, candidate);
            let new_cost = match total_cost(graph, config) {
                Ok(c) => c,
                Err(FusionError::NonFinite) => f64::INFINITY,
                Err(e) => {
                    graph.states = previous;
                    return Err(e);
                }
            };
            if new_cost <= cost {
                let decrease = cost - new_cost;
                let old = cost;
                cost = new_cost;
                lambda = (lambda * 0.1).max(MIN_LAMBDA);
                if negligible || decrease < config.relative_cost_tolerance * old {
                    break 'outer Termination::RelativeDecrease;
                }
                if step.norm() < config.step_tolerance {
                    break 'outer Termination::SmallStep;
                }
                break;
            }
            graph.states = previous;
            if negligible {
                break 'outer Termination::RelativeDecrease;
            }
            if step.norm() < config.step_tolerance {
                break 'outer Termination::SmallStep;
            }
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                break 'outer Termination::NoImprovement;
            }
        }
    };
    Ok(SolveReport {
        iterations,
        initial_cost,
        final_cost: cost,
        termination,
    })
}
