use crate::contrastive::ProjectionHead;
use crate::graph::{Graph, Var};
use crate::labels::TargetMatrix;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Streaming per-class means of screened label-level features.
///
/// A feature `Q_ij` contributes to class `j` only when `y_ij = 1` and its
/// score `s_ij ≥ ε`. Sums and counts restart at every epoch boundary; the
/// means and counts reached in the previous epoch are kept as the display
/// copy.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank<T> {
    threshold: f64,
    sums: Tensor<T>,
    counts: Vec<u64>,
    display: Tensor<T>,
    display_counts: Vec<u64>,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn new(classes: usize, dim: usize, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(TensorError::Parameter(format!("screening threshold {threshold} not in (0, 1)")));
        }
        Ok(Self {
            threshold,
            sums: Tensor::zeros(&[classes, dim]),
            counts: vec![0; classes],
            display: Tensor::zeros(&[classes, dim]),
            display_counts: vec![0; classes],
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.sums.shape()[1]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn sums(&self) -> &Tensor<T> {
        &self.sums
    }

    /// Previous epoch's means and their contributor counts (0 = undefined).
    pub fn display(&self) -> (&Tensor<T>, &[u64]) {
        (&self.display, &self.display_counts)
    }

    pub fn from_parts(
        threshold: f64,
        sums: Tensor<T>,
        counts: Vec<u64>,
        display: Tensor<T>,
        display_counts: Vec<u64>,
    ) -> Result<Self> {
        let mut bank = Self::new(counts.len(), sums.shape().get(1).copied().unwrap_or(0), threshold)?;
        if sums.shape() != bank.sums.shape() || display.shape() != bank.sums.shape() || display_counts.len() != counts.len() {
            return Err(TensorError::Shape {
                op: "prototype_bank",
                left: sums.shape().to_vec(),
                right: display.shape().to_vec(),
            });
        }
        bank.sums = sums;
        bank.counts = counts;
        bank.display = display;
        bank.display_counts = display_counts;
        Ok(bank)
    }

    /// Accumulates screened features `[n, classes, dim]`; returns how many
    /// were accepted.
    pub fn update(&mut self, features: &Tensor<T>, targets: &TargetMatrix, scores: &Tensor<T>) -> Result<usize> {
        let (l, d) = (self.classes(), self.dim());
        let n = targets.rows();
        if features.shape() != [n, l, d] || scores.shape() != [n, l] || targets.classes() != l {
            return Err(TensorError::Shape {
                op: "update_prototypes",
                left: features.shape().to_vec(),
                right: vec![n, l, d],
            });
        }
        let eps = T::lit(self.threshold);
        let mut accepted = 0;
        for i in 0..n {
            for j in 0..l {
                if !targets.get(i, j) || scores.data()[i * l + j] < eps {
                    continue;
                }
                let src = features.row(i * l + j);
                for (s, &v) in self.sums.data_mut()[j * d..(j + 1) * d].iter_mut().zip(src) {
                    *s += v;
                }
                self.counts[j] += 1;
                accepted += 1;
            }
        }
        Ok(accepted)
    }

    pub fn is_defined(&self, class: usize) -> bool {
        self.counts[class] > 0
    }

    pub fn mean(&self, class: usize) -> Option<Vec<T>> {
        let n = self.counts[class];
        (n > 0).then(|| {
            let inv = T::lit(n as f64);
            self.sums.row(class).iter().map(|&s| s / inv).collect()
        })
    }

    /// Current means of every defined class as `[m, dim]` plus their class ids.
    pub fn prototypes(&self) -> (Tensor<T>, Vec<usize>) {
        let classes: Vec<usize> = (0..self.classes()).filter(|&j| self.is_defined(j)).collect();
        let mut data = Vec::with_capacity(classes.len() * self.dim());
        for &j in &classes {
            data.extend(self.mean(j).expect("defined"));
        }
        (Tensor::new(&[classes.len(), self.dim()], data).expect("rows of dim"), classes)
    }

    /// Epoch boundary: current means become the display copy and the
    /// streaming state restarts.
    pub fn reset_epoch(&mut self) {
        let d = self.dim();
        for j in 0..self.classes() {
            if let Some(m) = self.mean(j) {
                self.display.data_mut()[j * d..(j + 1) * d].copy_from_slice(&m);
                self.display_counts[j] = self.counts[j];
            }
        }
        self.sums.data_mut().iter_mut().for_each(|v| *v = T::zero());
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    /// The streaming mean and count where defined, otherwise the previous
    /// epoch's copy.
    pub fn export_view(&self, class: usize) -> Option<(u64, Vec<T>)> {
        match self.mean(class) {
            Some(m) => Some((self.counts[class], m)),
            None => (self.display_counts[class] > 0)
                .then(|| (self.display_counts[class], self.display.row(class).to_vec())),
        }
    }
}

/// Defined prototypes mapped into the contrastive space.
#[derive(Debug, Clone)]
pub struct ProjectedPrototypes {
    /// `[m, out_dim]`, absent when no class is defined yet.
    pub vectors: Option<Var>,
    pub classes: Vec<usize>,
}

/// Projects the current means through the shared head. The means enter the
/// graph as constants, so gradient reaches the head but not the sums.
pub fn project_prototypes<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &ProjectionHead,
    bank: &PrototypeBank<T>,
) -> Result<ProjectedPrototypes> {
    let (means, classes) = bank.prototypes();
    if classes.is_empty() {
        return Ok(ProjectedPrototypes { vectors: None, classes });
    }
    let c = g.constant(means)?;
    let out = head.project(g, store, c)?;
    Ok(ProjectedPrototypes {
        vectors: Some(out),
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(v: &[[f64; 2]]) -> Tensor<f64> {
        // one class, n images
        Tensor::from_f64(&[v.len(), 1, 2], &v.concat()).unwrap()
    }

    #[test]
    fn single_contribution_is_the_prototype() {
        let mut b = PrototypeBank::<f64>::new(1, 2, 0.8).unwrap();
        let y = TargetMatrix::from_rows(&[vec![1]]).unwrap();
        b.update(&feats(&[[0.3, -1.0]]), &y, &Tensor::full(&[1, 1], 0.9)).unwrap();
        assert_eq!(b.mean(0).unwrap(), vec![0.3, -1.0]);
    }

    #[test]
    fn two_contributions_average() {
        let mut b = PrototypeBank::<f64>::new(1, 2, 0.8).unwrap();
        let y = TargetMatrix::from_rows(&[vec![1], vec![1]]).unwrap();
        b.update(&feats(&[[1.0, 2.0], [3.0, -2.0]]), &y, &Tensor::full(&[2, 1], 0.95)).unwrap();
        assert_eq!(b.mean(0).unwrap(), vec![2.0, 0.0]);
        assert_eq!(b.counts(), &[2]);
    }

    #[test]
    fn low_score_is_screened_out() {
        let mut b = PrototypeBank::<f64>::new(1, 2, 0.8).unwrap();
        let y = TargetMatrix::from_rows(&[vec![1]]).unwrap();
        let n = b.update(&feats(&[[1.0, 1.0]]), &y, &Tensor::full(&[1, 1], 0.5)).unwrap();
        assert_eq!(n, 0);
        assert!(!b.is_defined(0));
    }

    #[test]
    fn reset_keeps_display_copy() {
        let mut b = PrototypeBank::<f64>::new(1, 2, 0.5).unwrap();
        let y = TargetMatrix::from_rows(&[vec![1]]).unwrap();
        b.update(&feats(&[[4.0, 2.0]]), &y, &Tensor::full(&[1, 1], 0.9)).unwrap();
        b.reset_epoch();
        assert!(!b.is_defined(0));
        assert_eq!(b.export_view(0).unwrap(), (1, vec![4.0, 2.0]));
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        assert!(PrototypeBank::<f64>::new(1, 1, 1.0).is_err());
        assert!(PrototypeBank::<f64>::new(1, 1, 0.0).is_err());
    }
}
