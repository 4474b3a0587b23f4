use crate::contrastive::{ProjectedPrototypes, Snapshot};
use crate::graph::{Graph, Var};
use crate::labels::TargetMatrix;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Strictly positive softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(TensorError::Parameter(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

fn zero<T: Scalar>(g: &mut Graph<T>) -> Result<Var> {
    g.constant(Tensor::scalar(T::zero()))
}

fn flat_batch<T: Scalar>(g: &mut Graph<T>, vectors: Var, targets: &TargetMatrix) -> Result<(Var, usize)> {
    let s = g.shape(vectors).to_vec();
    if s.len() != 3 || s[0] != targets.rows() || s[1] != targets.classes() {
        return Err(TensorError::Shape {
            op: "contrastive batch",
            left: s,
            right: vec![targets.rows(), targets.classes()],
        });
    }
    let d = s[2];
    Ok((g.reshape(vectors, &[s[0] * s[1], d])?, d))
}

fn check_snapshot<T: Scalar>(snapshot: &Snapshot<T>, d: usize) -> Result<()> {
    if !snapshot.is_empty() && snapshot.dim() != d {
        return Err(TensorError::Shape {
            op: "snapshot",
            left: snapshot.vectors.shape().to_vec(),
            right: vec![d],
        });
    }
    Ok(())
}

/// Sample-to-sample supervised contrastive loss over activated vectors.
///
/// Anchors are the activated vectors of the current batch. Each anchor is
/// contrasted against every other activated vector of the batch and the
/// snapshot; its positives are those of the same class. An anchor
/// contributes `lse_{a ≠ anchor}(x·x_a/τ) − mean_p(x·x_p/τ)`, or nothing
/// when it has no positive. Snapshot vectors are constants.
pub fn sscl_loss<T: Scalar>(
    g: &mut Graph<T>,
    vectors: Var,
    targets: &TargetMatrix,
    snapshot: &Snapshot<T>,
    tau: Temperature,
) -> Result<Var> {
    let (flat, d) = flat_batch(g, vectors, targets)?;
    check_snapshot(snapshot, d)?;
    let l = targets.classes();
    let (anchor_rows, mut pool_classes): (Vec<usize>, Vec<usize>) = (0..targets.rows() * l)
        .filter(|&k| targets.data()[k] == 1)
        .map(|k| (k, k % l))
        .unzip();
    let na = anchor_rows.len();
    if na == 0 {
        return zero(g);
    }
    pool_classes.extend_from_slice(&snapshot.classes);
    let m = pool_classes.len();

    let mut has_pos = vec![T::zero(); na];
    let mut pos_weight = vec![T::zero(); na * m];
    let mut denom = vec![false; na * m];
    for a in 0..na {
        let count = (0..m).filter(|&c| c != a && pool_classes[c] == pool_classes[a]).count();
        for c in 0..m {
            if c == a {
                continue;
            }
            denom[a * m + c] = true;
            if count > 0 && pool_classes[c] == pool_classes[a] {
                pos_weight[a * m + c] = T::one() / T::lit(count as f64);
            }
        }
        if count > 0 {
            has_pos[a] = T::one();
        }
    }
    if has_pos.iter().all(|&h| h == T::zero()) {
        return zero(g);
    }

    let anchors = g.gather_rows(flat, &anchor_rows)?;
    let pool = if snapshot.is_empty() {
        anchors
    } else {
        let snap = g.constant(snapshot.vectors.clone())?;
        g.concat(&[anchors, snap], 0)?
    };
    let pool_t = g.transpose(pool)?;
    let sims = g.matmul(anchors, pool_t)?;
    let logits = g.scale(sims, T::one() / T::lit(tau.get()))?;

    let lse = g.masked_logsumexp(logits, &denom)?;
    let has_pos = g.constant(Tensor::new(&[na], has_pos)?)?;
    let lse = g.mul(lse, has_pos)?;
    let lse = g.sum(lse)?;
    let w = g.constant(Tensor::new(&[na, m], pos_weight)?)?;
    let pos = g.mul(logits, w)?;
    let pos = g.sum(pos)?;
    g.sub(lse, pos)
}

/// Prototype-to-sample contrastive loss.
///
/// For every class `j` with a defined prototype `c_j`, the candidates are all
/// batch vectors of class `j` plus the snapshot vectors of class `j`;
/// positives are the activated ones. The class term is
/// `lse_all(c_j·x/τ) − lse_pos(c_j·x/τ)`; classes without positives add 0.
pub fn pscl_loss<T: Scalar>(
    g: &mut Graph<T>,
    prototypes: &ProjectedPrototypes,
    vectors: Var,
    targets: &TargetMatrix,
    snapshot: &Snapshot<T>,
    tau: Temperature,
) -> Result<Var> {
    let Some(protos) = prototypes.vectors else {
        return zero(g);
    };
    let (flat, d) = flat_batch(g, vectors, targets)?;
    check_snapshot(snapshot, d)?;
    if g.shape(protos) != [prototypes.classes.len(), d] {
        return Err(TensorError::Shape {
            op: "pscl prototypes",
            left: g.shape(protos).to_vec(),
            right: vec![prototypes.classes.len(), d],
        });
    }
    let l = targets.classes();
    let nb = targets.rows() * l;
    let mut pool_class: Vec<usize> = (0..nb).map(|k| k % l).collect();
    let mut pool_pos: Vec<bool> = targets.data().iter().map(|&y| y == 1).collect();
    pool_class.extend_from_slice(&snapshot.classes);
    pool_pos.extend(std::iter::repeat(true).take(snapshot.len()));
    let m = pool_class.len();

    let rows = prototypes.classes.len();
    let mut all = vec![false; rows * m];
    let mut pos = vec![false; rows * m];
    let mut active = vec![T::zero(); rows];
    for (r, &j) in prototypes.classes.iter().enumerate() {
        for c in 0..m {
            if pool_class[c] == j {
                all[r * m + c] = true;
                pos[r * m + c] = pool_pos[c];
                if pool_pos[c] {
                    active[r] = T::one();
                }
            }
        }
    }
    if active.iter().all(|&a| a == T::zero()) {
        return zero(g);
    }

    let pool = if snapshot.is_empty() {
        flat
    } else {
        let snap = g.constant(snapshot.vectors.clone())?;
        g.concat(&[flat, snap], 0)?
    };
    let pool_t = g.transpose(pool)?;
    let sims = g.matmul(protos, pool_t)?;
    let logits = g.scale(sims, T::one() / T::lit(tau.get()))?;
    let lse_all = g.masked_logsumexp(logits, &all)?;
    let lse_pos = g.masked_logsumexp(logits, &pos)?;
    let diff = g.sub(lse_all, lse_pos)?;
    let active = g.constant(Tensor::new(&[rows], active)?)?;
    let diff = g.mul(diff, active)?;
    g.sum(diff)
}
