use indexmap::IndexMap;

use super::params::ParamStore;
use crate::autodiff::{BatchStats, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One forward pass: a fresh [`Graph`] plus lazily bound parameters.
///
/// Parameters are bound as differentiable leaves in train mode, or when
/// [`Session::with_param_grads`] asks for them; otherwise as constants.
pub struct Session<'a> {
    graph: Graph,
    store: &'a ParamStore,
    bound: IndexMap<String, Var>,
    mode: Mode,
    param_grads: bool,
    seed: u64,
    dropout_calls: u64,
    stats: Vec<(String, BatchStats)>,
}

/// What a finished session hands back.
pub struct SessionOutput {
    pub graph: Graph,
    pub params: IndexMap<String, Var>,
    pub stats: Vec<(String, BatchStats)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: IndexMap::new(),
            mode,
            param_grads: mode == Mode::Train,
            seed: 0,
            dropout_calls: 0,
            stats: Vec::new(),
        }
    }

    /// Seed from which dropout masks are derived.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_param_grads(mut self, on: bool) -> Self {
        self.param_grads = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn graph(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn graph_ref(&self) -> &Graph {
        &self.graph
    }

    pub fn scope(&mut self, name: &str) {
        self.graph.set_scope(name);
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let v = if self.param_grads {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor> {
        self.store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing buffer {name}")))
    }

    /// Distinct per-call seed for dropout masks.
    pub fn next_dropout_seed(&mut self) -> u64 {
        self.dropout_calls += 1;
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.dropout_calls)
    }

    pub fn record_stats(&mut self, bn_prefix: &str, stats: BatchStats) {
        self.stats.push((bn_prefix.to_string(), stats));
    }

    pub fn bound_params(&self) -> &IndexMap<String, Var> {
        &self.bound
    }

    pub fn finish(self) -> SessionOutput {
        SessionOutput {
            graph: self.graph,
            params: self.bound,
            stats: self.stats,
        }
    }
}
