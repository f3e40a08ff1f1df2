//! Sliding-window factor-graph estimator.
//!
//! Keyframe states are optimized jointly with Levenberg-Marquardt over the
//! active window; keyframes that fall out of the window are folded into a
//! Gaussian prior on their neighbours by Schur complement and kept as fixed
//! anchors for later loop closures.

mod estimator;
pub mod factors;
mod marginal;
mod optimizer;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::geom::{GeomError, NavState};

pub use estimator::{
    run_estimator, EstimatorConfig, EstimatorOutput, FactorToggles, GateRecord, KeyframeEstimate, NoiseModel,
    RunStats,
};
pub use factors::{
    gate_heading, heading_innovation, pose_information, residual_and_jacobian, whitened_residual, BiasWalk, Factor, FactorKind,
    GateDecision, Linearization, Matrix15, OdomSource, StateView,
};
pub use marginal::{marginalize, slide_window, MarginalPrior};
pub use optimizer::{optimize, SolveReport, SolverConfig, Termination};

/// Keyframe identifier; keyframes are ordered by key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key(pub usize);

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("factor references unknown key {0}")]
    MissingKey(Key),
    #[error("key {0} already present in the graph")]
    DuplicateKey(Key),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("information matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("normal equations are indefinite: gauge not fixed by any prior")]
    IndefiniteSystem,
    #[error("sensor log is empty: {0}")]
    EmptyLog(&'static str),
    #[error("IMU preintegration failed: {0}")]
    Preintegration(#[from] crate::preintegration::PreintError),
    #[error("non-finite cost encountered")]
    NonFinite,
}

/// Active keyframe states, their factors and the marginalization priors.
#[derive(Debug, Clone)]
pub struct Graph {
    states: BTreeMap<Key, NavState<f64>>,
    fixed: BTreeMap<Key, NavState<f64>>,
    factors: Vec<Factor>,
    marginals: Vec<MarginalPrior>,
    window: usize,
}

impl Graph {
    /// Creates an empty graph keeping at most `window` active keyframes.
    pub fn new(window: usize) -> Self {
        Self {
            states: BTreeMap::new(),
            fixed: BTreeMap::new(),
            factors: Vec::new(),
            marginals: Vec::new(),
            window: window.max(1),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn add_state(&mut self, key: Key, state: NavState<f64>) -> Result<(), FusionError> {
        if self.states.contains_key(&key) || self.fixed.contains_key(&key) {
            return Err(FusionError::DuplicateKey(key));
        }
        self.states.insert(key, state);
        Ok(())
    }

    /// Adds a factor; every key must be active or a fixed (marginalized) keyframe.
    pub fn add_factor(&mut self, factor: Factor) -> Result<(), FusionError> {
        for k in factor.keys() {
            if !self.states.contains_key(&k) && !self.fixed.contains_key(&k) {
                return Err(FusionError::MissingKey(k));
            }
        }
        self.factors.push(factor);
        Ok(())
    }

    pub fn states(&self) -> &BTreeMap<Key, NavState<f64>> {
        &self.states
    }

    pub fn state(&self, key: Key) -> Option<&NavState<f64>> {
        self.states.get(&key).or_else(|| self.fixed.get(&key))
    }

    pub fn set_state(&mut self, key: Key, state: NavState<f64>) -> Result<(), FusionError> {
        match self.states.get_mut(&key) {
            Some(s) => {
                *s = state;
                Ok(())
            }
            None => Err(FusionError::MissingKey(key)),
        }
    }

    /// Marginalized keyframes and their estimates at marginalization time.
    pub fn fixed_states(&self) -> &BTreeMap<Key, NavState<f64>> {
        &self.fixed
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn marginals(&self) -> &[MarginalPrior] {
        &self.marginals
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn oldest(&self) -> Option<Key> {
        self.states.keys().next().copied()
    }

    pub fn view(&self) -> StateView<'_> {
        StateView::new(&self.states, &self.fixed)
    }

    /// Total whitened cost `½ Σ ‖r‖²` without robust weighting.
    pub fn cost(&self) -> Result<f64, FusionError> {
        let view = self.view();
        let mut c = 0.0;
        for f in &self.factors {
            c += 0.5 * factors::whitened_residual(f, &view)?.norm_squared();
        }
        for m in &self.marginals {
            c += m.linearize(&self.states)?.cost();
        }
        Ok(c)
    }

    fn has_gauge_prior(&self) -> bool {
        self.factors.iter().any(|f| matches!(f, Factor::Prior(_))) || self.marginals.iter().any(|m| m.rank() > 0)
    }
}
