use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::factors::{residual_and_jacobian, Linearization};
use super::{FusionError, Graph, Key};
use crate::geom::{right_jacobian_inv, NavState, NAV_DIM, ROT};

/// Eigenvalues below this fraction of the largest are treated as null directions.
const RANK_TOLERANCE: f64 = 1e-12;

/// Gaussian prior left behind by marginalizing a keyframe.
///
/// Stored in square-root form around the linearization points of its keys:
/// `r(x) = r0 + J · [local(x_k, x̄_k)]_k`, so that `JᵀJ` is the Schur
/// complement information and `Jᵀ r0` its gradient at `x̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPrior {
    keys: Vec<Key>,
    linearization: Vec<NavState<f64>>,
    jacobian: DMatrix<f64>,
    r0: DVector<f64>,
}

impl MarginalPrior {
    /// Builds the prior from Schur-complement information `h` and gradient `g`.
    pub fn from_information(
        keys: Vec<Key>,
        linearization: Vec<NavState<f64>>,
        h: &DMatrix<f64>,
        g: &DVector<f64>,
    ) -> Self {
        let sym = (h + h.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] > RANK_TOLERANCE * max && eig.eigenvalues[i] > 0.0)
            .collect();
        let n = h.nrows();
        let mut jacobian = DMatrix::zeros(keep.len(), n);
        let mut r0 = DVector::zeros(keep.len());
        for (row, &i) in keep.iter().enumerate() {
            let s = eig.eigenvalues[i].sqrt();
            let v = eig.eigenvectors.column(i);
            for c in 0..n {
                jacobian[(row, c)] = s * v[c];
            }
            r0[row] = v.dot(g) / s;
        }
        Self {
            keys,
            linearization,
            jacobian,
            r0,
        }
    }

    pub fn keys(&self) -> &[Key] {
        &self.keys
    }

    pub fn rank(&self) -> usize {
        self.r0.len()
    }

    /// Information matrix `JᵀJ` over the prior's keys.
    pub fn information(&self) -> DMatrix<f64> {
        self.jacobian.transpose() * &self.jacobian
    }

    pub fn linearize(&self, states: &BTreeMap<Key, NavState<f64>>) -> Result<Linearization, FusionError> {
        let mut delta = DVector::zeros(NAV_DIM * self.keys.len());
        let mut jacobians = Vec::with_capacity(self.keys.len());
        for (i, (k, lin)) in self.keys.iter().zip(&self.linearization).enumerate() {
            let s = states.get(k).ok_or(FusionError::MissingKey(*k))?;
            let d = s.local(lin);
            delta.rows_mut(i * NAV_DIM, NAV_DIM).copy_from(&d);
            let mut dl = DMatrix::<f64>::identity(NAV_DIM, NAV_DIM);
            let rot = d.fixed_rows::<3>(ROT).into_owned();
            dl.view_mut((ROT, ROT), (3, 3)).copy_from(&right_jacobian_inv(&rot));
            let cols = self.jacobian.columns(i * NAV_DIM, NAV_DIM);
            jacobians.push((*k, cols * dl));
        }
        let residual = &self.r0 + &self.jacobian * delta;
        Ok(Linearization {
            raw: residual.clone(),
            residual,
            jacobians,
        })
    }
}

/// Removes `key` from the active window, replacing every factor that touches
/// it by a Gaussian prior on its neighbours (Schur complement of the system
/// linearized at the current estimate). The state is kept as a fixed anchor.
pub fn marginalize(graph: &mut Graph, key: Key) -> Result<(), FusionError> {
    let state = *graph.states.get(&key).ok_or(FusionError::MissingKey(key))?;
    let (touching, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut graph.factors)
        .into_iter()
        .partition(|f| f.keys().contains(&key));
    graph.factors = kept;
    let (m_touching, m_kept): (Vec<_>, Vec<_>) = std::mem::take(&mut graph.marginals)
        .into_iter()
        .partition(|m| m.keys.contains(&key));
    graph.marginals = m_kept;

    let mut lins = Vec::new();
    {
        let view = graph.view();
        for f in &touching {
            lins.push(residual_and_jacobian(f, &view)?);
        }
    }
    for m in &m_touching {
        lins.push(m.linearize(&graph.states)?);
    }

    let mut neighbours: Vec<Key> = lins
        .iter()
        .flat_map(|l| l.jacobians.iter().map(|(k, _)| *k))
        .filter(|k| *k != key)
        .collect();
    neighbours.sort();
    neighbours.dedup();
    let index: BTreeMap<Key, usize> = std::iter::once(key)
        .chain(neighbours.iter().copied())
        .enumerate()
        .map(|(i, k)| (k, i))
        .collect();

    let n = index.len() * NAV_DIM;
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut g = DVector::<f64>::zeros(n);
    for lin in &lins {
        for (ka, ja) in &lin.jacobians {
            let ia = index[ka] * NAV_DIM;
            let mut gv = g.rows_mut(ia, NAV_DIM);
            gv += ja.transpose() * &lin.residual;
            for (kb, jb) in &lin.jacobians {
                let ib = index[kb] * NAV_DIM;
                let mut hv = h.view_mut((ia, ib), (NAV_DIM, NAV_DIM));
                hv += ja.transpose() * jb;
            }
        }
    }

    graph.states.remove(&key);
    graph.fixed.insert(key, state);
    if neighbours.is_empty() {
        return Ok(());
    }

    let m = NAV_DIM;
    let h_mm = h.view((0, 0), (m, m)).into_owned();
    let h_rm = h.view((m, 0), (n - m, m)).into_owned();
    let h_rr = h.view((m, m), (n - m, n - m)).into_owned();
    let g_m = g.rows(0, m).into_owned();
    let g_r = g.rows(m, n - m).into_owned();
    let h_mm_inv = pseudo_inverse(&h_mm);
    let schur_h = &h_rr - &h_rm * &h_mm_inv * h_rm.transpose();
    let schur_g = &g_r - &h_rm * &h_mm_inv * g_m;

    let lin_points = neighbours
        .iter()
        .map(|k| graph.states[k])
        .collect();
    let prior = MarginalPrior::from_information(neighbours, lin_points, &schur_h, &schur_g);
    if prior.rank() > 0 {
        graph.marginals.push(prior);
    }
    Ok(())
}

fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let inv = eig.eigenvalues.map(|e| if e > RANK_TOLERANCE * max && e > 0.0 { 1.0 / e } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Marginalizes the oldest keyframes until at most `graph.window()` remain.
/// Returns the marginalized keys in order.
pub fn slide_window(graph: &mut Graph) -> Result<Vec<Key>, FusionError> {
    let mut removed = Vec::new();
    while graph.len() > graph.window() {
        let key = graph.oldest().expect("non-empty graph");
        marginalize(graph, key)?;
        removed.push(key);
    }
    Ok(removed)
}
