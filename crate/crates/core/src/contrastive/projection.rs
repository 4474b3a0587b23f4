use crate::graph::{Graph, Var};
use crate::nn::{Activation, FeedForward};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Result;

/// Shared map `d → hidden → out` into the contrastive space. Sample vectors
/// and class prototypes go through the same parameters.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHead {
    pub ffn: FeedForward,
    pub normalize: bool,
}

impl ProjectionHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        dims: (usize, usize, usize),
        activation: Activation,
        normalize: bool,
    ) -> Result<Self> {
        Ok(Self {
            ffn: FeedForward::new(store, rng, "projection", dims, activation)?,
            normalize,
        })
    }

    /// Projects every trailing-axis vector, then unit-normalizes it when
    /// normalization is on. A zero vector before normalization is a domain
    /// error.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.ffn.forward(g, store, x)?;
        if self.normalize {
            g.l2_normalize(y)
        } else {
            Ok(y)
        }
    }
}
