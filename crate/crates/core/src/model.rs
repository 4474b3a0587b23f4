use crate::config::RunConfig;
use crate::contrastive::ProjectionHead;
use crate::data::{Batch, Split};
use crate::graph::Graph;
use crate::labels::ScoreMatrix;
use crate::metrics::{evaluate, EvalMode, MetricReport, MetricsError};
use crate::objective::Classifier;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::sarl::{head_averaged, Sarl};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor};

/// Stream of the parameter-initialization generator, derived from the run seed.
const INIT_STREAM: u64 = 0x494e_4954;

/// Images per forward pass during inference.
const INFERENCE_BATCH: usize = 64;

/// The full network: representation learner, classifier heads and the
/// projection head used only by the contrastive terms.
#[derive(Debug, Clone)]
pub struct Model {
    pub sarl: Sarl,
    pub classifier: Classifier,
    pub projection: ProjectionHead,
}

impl Model {
    /// Registers and initializes every parameter from the run seed.
    pub fn build<T: Scalar>(config: &RunConfig) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = Rng::derived(config.seed, INIT_STREAM);
        let sarl = Sarl::new(config.sarl(), &mut store, &mut rng)?;
        let classifier = Classifier::new(&mut store, &mut rng, config.data_classes, config.dim)?;
        let projection = ProjectionHead::new(
            &mut store,
            &mut rng,
            (config.dim, config.proj_hidden, config.proj_dim),
            config.activation,
            config.normalize,
        )?;
        Ok((
            Self {
                sarl,
                classifier,
                projection,
            },
            store,
        ))
    }

    fn batches(split: &Split) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..split.len())
            .step_by(INFERENCE_BATCH)
            .map(move |s| (s..(s + INFERENCE_BATCH).min(split.len())).collect())
    }

    /// Inference scores for a whole split. Only the representation learner
    /// and the classifier run.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, split: &Split) -> Result<ScoreMatrix> {
        let c = &self.sarl.config;
        let mut scores = ScoreMatrix::new(0, c.num_classes, Vec::new())?;
        for images in Self::batches(split) {
            let batch = Batch::<T>::gather(split, &images, c.tokens(), c.raw_channels);
            let mut g = Graph::new();
            let grid = g.constant(batch.grids)?;
            let out = self.sarl.forward(&mut g, store, grid)?;
            let s = self.classifier.classify(&mut g, store, out.features)?;
            scores.extend(&ScoreMatrix::from_tensor(g.value(s))?)?;
        }
        Ok(scores)
    }

    /// Head-averaged final cross-attention `[n, classes, tokens]`.
    pub fn attention<T: Scalar>(&self, store: &ParamStore<T>, split: &Split) -> Result<Tensor<T>> {
        let c = &self.sarl.config;
        let mut parts = Vec::new();
        for images in Self::batches(split) {
            let batch = Batch::<T>::gather(split, &images, c.tokens(), c.raw_channels);
            let mut g = Graph::new();
            let grid = g.constant(batch.grids)?;
            let out = self.sarl.forward(&mut g, store, grid)?;
            parts.push(head_averaged(g.value(out.cross_attention), c.heads));
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, c.num_classes, c.tokens()]));
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
    }
}

/// Reports in both prediction modes: all (threshold 0.5) and top-3.
pub fn evaluate_both(scores: &ScoreMatrix, split: &Split) -> std::result::Result<[MetricReport; 2], MetricsError> {
    Ok([
        evaluate(scores, &split.targets, EvalMode::all())?,
        evaluate(scores, &split.targets, EvalMode::top3())?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};

    fn small_config() -> RunConfig {
        RunConfig {
            dim: 8,
            heads: 2,
            ffn_hidden: 8,
            proj_hidden: 8,
            proj_dim: 4,
            data_classes: 4,
            data_grid_h: 4,
            data_grid_w: 4,
            data_channels: 3,
            data_cardinality: 1.5,
            ..RunConfig::default()
        }
    }

    fn small_split(n: usize) -> Split {
        let spec = SyntheticSpec {
            num_classes: 4,
            grid_h: 4,
            grid_w: 4,
            raw_channels: 3,
            cardinality: 1.5,
            train_size: n,
            test_size: 1,
            ..SyntheticSpec::default()
        };
        generate(&spec).unwrap().train
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = Model::build::<f64>(&small_config()).unwrap();
        let (_, b) = Model::build::<f64>(&small_config()).unwrap();
        assert_eq!(a.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>(), b.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn predictions_cover_every_image_across_batches() {
        let (m, store) = Model::build::<f32>(&small_config()).unwrap();
        let split = small_split(70);
        let s = m.predict(&store, &split).unwrap();
        assert_eq!((s.rows(), s.classes()), (70, 4));
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let a = m.attention(&store, &split).unwrap();
        assert_eq!(a.shape(), &[70, 4, 16]);
        for r in 0..70 * 4 {
            let sum: f32 = a.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
