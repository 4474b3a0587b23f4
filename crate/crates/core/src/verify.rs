//! Gradient verification of the loss components on randomized tiny models.
//!
//! Each instance draws a model with `N ≤ 3` images, `L ≤ 4` classes and
//! width `d = 4`, random targets, a random bank snapshot and random
//! prototype sums, then checks the full parameter gradient of the BCE,
//! sample-to-sample, prototype-to-sample and joint losses against central
//! differences in `f64`. The tiny models use GELU so that no probe straddles
//! a ReLU kink.

use crate::config::RunConfig;
use crate::contrastive::{project_prototypes, pscl_loss, sscl_loss, PrototypeBank, Snapshot};
use crate::gradcheck::{check_against, check_gradients, GradCheckError, DEFAULT_STEP};
use crate::graph::{Graph, Var};
use crate::labels::TargetMatrix;
use crate::model::Model;
use crate::nn::Activation;
use crate::objective::bce_loss;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Result, Tensor};

pub const TOLERANCE: f64 = 1e-4;
pub const COMPONENTS: [&str; 4] = ["l_bce", "l_s2s", "l_p2s", "l_total"];

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub instances: usize,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// A randomized tiny training situation.
pub struct Instance {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore<f64>,
    pub grids: Tensor<f64>,
    pub targets: TargetMatrix,
    pub snapshot: Snapshot<f64>,
    pub prototypes: PrototypeBank<f64>,
}

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl Instance {
    pub fn random(rng: &mut Rng) -> Result<Self> {
        let n = 2 + rng.below(2);
        let l = 2 + rng.below(3);
        let d = 4;
        let config = RunConfig {
            dim: d,
            heads: 1 + rng.below(2),
            encoder_layers: 1,
            decoder_layers: 1 + rng.below(2),
            ffn_hidden: 3 + rng.below(4),
            proj_hidden: 2 + rng.below(5),
            proj_dim: 2 + rng.below(5),
            query_self_attention: rng.uniform() < 0.5,
            activation: Activation::Gelu,
            tau: rng.uniform_range(0.2, 1.0),
            data_classes: l,
            data_grid_h: 2,
            data_grid_w: 1 + rng.below(2),
            data_channels: 2 + rng.below(2),
            seed: rng.next_u64(),
            ..RunConfig::default()
        };
        let (model, store) = Model::build::<f64>(&config)?;
        let tokens = config.data_grid_h * config.data_grid_w;
        let grids = Tensor::from_fn(&[n, tokens, config.data_channels], |_| rng.normal());
        let mut targets = TargetMatrix::zeros(n, l);
        for i in 0..n {
            for j in 0..l {
                targets.set(i, j, rng.uniform() < 0.5);
            }
        }
        // every instance gets at least one activated pair
        targets.set(0, 0, true);
        let m = 1 + rng.below(4);
        let dp = config.proj_dim;
        let classes: Vec<usize> = (0..m).map(|_| rng.below(l)).collect();
        let vectors: Vec<f64> = (0..m).flat_map(|_| unit(rng, dp)).collect();
        let snapshot = Snapshot {
            vectors: Tensor::new(&[m, dp], vectors)?,
            classes,
            images: (100..100 + m).collect(),
        };
        let mut prototypes = PrototypeBank::new(l, d, 0.5)?;
        let feats = Tensor::from_fn(&[1, l, d], |_| rng.normal());
        let mut on = TargetMatrix::zeros(1, l);
        for j in 0..l {
            on.set(0, j, rng.uniform() < 0.75);
        }
        prototypes.update(&feats, &on, &Tensor::full(&[1, l], 0.9))?;
        Ok(Self {
            config,
            model,
            store,
            grids,
            targets,
            snapshot,
            prototypes,
        })
    }

    /// Builds the named component on `g` from the given parameters.
    pub fn component(&self, name: &str, store: &ParamStore<f64>, g: &mut Graph<f64>) -> Result<Var> {
        let tau = self.config.temperature();
        let grid = g.constant(self.grids.clone())?;
        let out = self.model.sarl.forward(g, store, grid)?;
        let scores = self.model.classifier.classify(g, store, out.features)?;
        let l_bce = bce_loss(g, scores, &self.targets)?;
        if name == "l_bce" {
            return Ok(l_bce);
        }
        let x = self.model.projection.project(g, store, out.features)?;
        let l_s2s = sscl_loss(g, x, &self.targets, &self.snapshot, tau)?;
        if name == "l_s2s" {
            return Ok(l_s2s);
        }
        let protos = project_prototypes(g, store, &self.model.projection, &self.prototypes)?;
        let l_p2s = pscl_loss(g, &protos, x, &self.targets, &self.snapshot, tau)?;
        if name == "l_p2s" {
            return Ok(l_p2s);
        }
        let t = g.add(l_bce, l_s2s)?;
        g.add(t, l_p2s)
    }
}

/// Runs every component on `instances` random instances from `seed`.
///
/// With `corrupt`, the analytic gradient of each check is perturbed by
/// 1e-2 in its first element before comparison, so the suite must fail.
pub fn gradient_suite(seed: u64, instances: usize, corrupt: bool) -> std::result::Result<Vec<ComponentReport>, GradCheckError> {
    let mut rng = Rng::new(seed);
    let mut reports: Vec<ComponentReport> = COMPONENTS
        .iter()
        .map(|&name| ComponentReport {
            name,
            max_rel_error: 0.0,
            instances: 0,
        })
        .collect();
    for _ in 0..instances {
        let mut inst = Instance::random(&mut rng)?;
        let mut store = std::mem::take(&mut inst.store);
        for report in reports.iter_mut() {
            let loss_fn = |s: &ParamStore<f64>, g: &mut Graph<f64>| inst.component(report.name, s, g);
            let result = if corrupt {
                store.zero_grad();
                let mut g = Graph::new();
                let out = loss_fn(&store, &mut g)?;
                g.backward(out, &mut store)?;
                let mut analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
                store.zero_grad();
                analytic[0][0] += 1e-2;
                check_against(&mut store, &analytic, loss_fn, DEFAULT_STEP, TOLERANCE)?
            } else {
                check_gradients(&mut store, loss_fn, DEFAULT_STEP, TOLERANCE)?
            };
            report.max_rel_error = report.max_rel_error.max(result.max_rel_error());
            report.instances += 1;
        }
        inst.store = store;
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_lists_four_components() {
        let r = gradient_suite(0, 2, false).unwrap();
        assert_eq!(r.iter().map(|c| c.name).collect::<Vec<_>>(), COMPONENTS);
        for c in &r {
            assert!(c.passed(), "{} {}", c.name, c.max_rel_error);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let r = gradient_suite(0, 1, true).unwrap();
        assert!(r.iter().all(|c| !c.passed()));
    }
}
