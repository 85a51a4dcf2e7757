use super::{Gradients, Graph, ParamId, ParamStore, Real, Result, Tensor, Var};

/// Whether normalisation layers use batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one normalisation layer during a training
/// forward pass, to be folded into its running averages afterwards.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// One forward pass: a fresh [`Graph`] with model parameters bound lazily.
pub struct Session<'p, T> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    stats: Vec<BatchStats<T>>,
    fuse_calls: usize,
}

impl<'p, T: Real> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            stats: Vec::new(),
            fuse_calls: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Graph node holding parameter `id`; trainable parameters receive gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.params.entry(id);
        let v = if e.trainable {
            self.graph.input(e.value.clone())
        } else {
            self.graph.constant(e.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    pub(crate) fn record_stats(&mut self, stats: BatchStats<T>) {
        self.stats.push(stats);
    }

    pub fn take_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.stats)
    }

    pub(crate) fn note_fuse(&mut self) {
        self.fuse_calls += 1;
    }

    /// Number of gated fusions recorded in this pass.
    pub fn fuse_calls(&self) -> usize {
        self.fuse_calls
    }

    /// Full gradient set of `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        self.graph.backward(loss)
    }

    /// Gradients of `loss` for every bound trainable parameter.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            let Some(v) = *slot else { continue };
            if !self.params.entry(ParamId(i)).trainable {
                continue;
            }
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(self.params.entry(ParamId(i)).value.shape()));
            out.push((ParamId(i), g));
        }
        Ok(out)
    }
}
