use crate::graph::{Graph, Var};
use crate::labels::TargetMatrix;
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// One weight vector and bias per class: `s_il = σ(W_l · Q_il + b_l)`.
#[derive(Debug, Clone, Copy)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Classifier {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, classes: usize, dim: usize) -> Result<Self> {
        let limit = (6.0 / (dim + 1) as f64).sqrt();
        let w = Tensor::from_fn(&[classes, dim], |_| T::lit(rng.uniform_range(-limit, limit)));
        Ok(Self {
            weight: store.add("classifier.weight", w)?,
            bias: store.add("classifier.bias", Tensor::zeros(&[classes]))?,
        })
    }

    /// Pre-sigmoid logits `[n, classes]` from features `[n, classes, dim]`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let fs = g.shape(features);
        if fs.len() != 3 || fs[1..] != *g.shape(w) {
            return Err(TensorError::Shape {
                op: "classify",
                left: fs.to_vec(),
                right: g.shape(w).to_vec(),
            });
        }
        let prod = g.mul_broadcast(features, w)?;
        let dot = g.sum_axis(prod, 2)?;
        g.add_broadcast(dot, b)
    }

    /// Scores in `(0, 1)`, `[n, classes]`.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let z = self.logits(g, store, features)?;
        g.sigmoid(z)
    }
}

/// `−Σ_ij [y log s + (1−y) log(1−s)] / n` with scores clamped to
/// `[eps, 1 − eps]`, `eps` = [`Scalar::score_clamp`].
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, scores: Var, targets: &TargetMatrix) -> Result<Var> {
    let want = [targets.rows(), targets.classes()];
    if g.shape(scores) != want {
        return Err(TensorError::Shape {
            op: "bce_loss",
            left: g.shape(scores).to_vec(),
            right: want.to_vec(),
        });
    }
    let eps = T::score_clamp();
    let s = g.clamp(scores, eps, T::one() - eps)?;
    let log_s = g.log(s)?;
    let one_minus = g.affine(s, -T::one(), T::one())?;
    let log_1ms = g.log(one_minus)?;
    let y = g.constant(targets.as_tensor())?;
    let pos = g.mul(y, log_s)?;
    let not_y = g.affine(y, -T::one(), T::one())?;
    let neg = g.mul(not_y, log_1ms)?;
    let ll = g.add(pos, neg)?;
    let total = g.sum(ll)?;
    g.scale(total, -T::one() / T::lit(targets.rows().max(1) as f64))
}
