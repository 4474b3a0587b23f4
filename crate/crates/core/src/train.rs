//! The training loop.
//!
//! Each iteration runs, in this order: representation forward pass,
//! classification, projection, bank snapshot, sample-to-sample loss,
//! prototype update, prototype projection, prototype-to-sample loss, joint
//! loss, backward pass, optimizer step and finally the bank push. Pushing
//! last keeps a batch from contrasting against its own stored copies, and
//! updating prototypes after classification lets the screening use scores
//! from the same forward pass.
//!
//! At every epoch end the prototype sums restart and the test split is
//! scored by the representation learner and classifier alone.

use std::fmt::Write as _;

use thiserror::Error;

use crate::config::RunConfig;
use crate::contrastive::{project_prototypes, pscl_loss, sscl_loss, MemoryBank, PrototypeBank, Snapshot};
use crate::data::{Batch, Dataset};
use crate::graph::{Graph, Var};
use crate::metrics::{MetricReport, MetricsError};
use crate::model::{evaluate_both, Model};
use crate::objective::{bce_loss, total_loss, AdamW, AdamWConfig, LossReport, NonFiniteLoss, OneCycle, OptimError};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::TensorError;

/// Stream of the batch-shuffling generator, derived from the run seed.
pub(crate) const SHUFFLE_STREAM: u64 = 0x5348_5546;

pub const LOSS_LOG_HEADER: &str = "epoch,iteration,l_bce,l_s2s,l_p2s,l_total,lr";

pub fn loss_log_line(r: &LossReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.epoch, r.iteration, r.l_bce, r.l_s2s, r.l_p2s, r.l_total, r.learning_rate
    )
}

/// Header plus one line per report.
pub fn loss_log(reports: &[LossReport]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for r in reports {
        writeln!(out, "{}", loss_log_line(r)).expect("string write");
    }
    out
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    NonFinite(#[from] NonFiniteLoss),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("dataset does not match the model: {0}")]
    Mismatch(String),
    #[error("all {0} configured epochs are already complete")]
    Finished(usize),
}

/// Attributes a non-finite intermediate to the named loss component.
fn at(component: &'static str) -> impl Fn(TensorError) -> TrainError {
    move |e| match e {
        TensorError::NonFinite { .. } => TrainError::NonFinite(NonFiniteLoss {
            component,
            value: f64::NAN,
        }),
        other => TrainError::Tensor(other),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Test-split reports: all mode, then top-3.
    pub reports: [MetricReport; 2],
}

/// All mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: RunConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub bank: MemoryBank<T>,
    pub prototypes: PrototypeBank<T>,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: u64,
    pub snapshot_cap: usize,
}

pub fn steps_per_epoch(train_size: usize, batch_size: usize) -> u64 {
    train_size.div_ceil(batch_size) as u64
}

/// One batch-equivalent of bank entries: `ceil(batch · mean cardinality)`.
pub fn snapshot_cap(batch_size: usize, mean_cardinality: f64) -> usize {
    (batch_size as f64 * mean_cardinality).ceil() as usize
}

impl<T: Scalar> Trainer<T> {
    /// Fresh state for `data`. The data fields of `config` are replaced by
    /// the dataset's own spec so the model matches it.
    pub fn new(mut config: RunConfig, data: &Dataset) -> Result<Self, TrainError> {
        config.adopt_spec(&data.spec);
        if data.train.is_empty() {
            return Err(TrainError::Mismatch("training split is empty".into()));
        }
        let (model, store) = Model::build::<T>(&config)?;
        let total = config.epochs as u64 * steps_per_epoch(data.train.len(), config.batch_size);
        let schedule = OneCycle::new(config.lr, total, config.warmup_fraction);
        let adam = AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        let optimizer = AdamW::new(&store, adam, schedule);
        let bank = MemoryBank::new(config.data_classes, config.proj_dim, config.bank_capacity);
        let prototypes = PrototypeBank::new(config.data_classes, config.dim, config.epsilon)?;
        let snapshot_cap = snapshot_cap(config.batch_size, data.train.targets.mean_cardinality());
        let rng = Rng::derived(config.seed, SHUFFLE_STREAM);
        Ok(Self {
            config,
            model,
            store,
            optimizer,
            bank,
            prototypes,
            rng,
            epoch: 0,
            iteration: 0,
            snapshot_cap,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn check_data(&self, data: &Dataset) -> Result<(), TrainError> {
        let c = &self.model.sarl.config;
        let s = &data.spec;
        if (s.num_classes, s.grid_h, s.grid_w, s.raw_channels) != (c.num_classes, c.grid_h, c.grid_w, c.raw_channels) {
            return Err(TrainError::Mismatch(format!(
                "dataset has {} classes on a {}x{}x{} grid, model expects {} classes on {}x{}x{}",
                s.num_classes, s.grid_h, s.grid_w, s.raw_channels, c.num_classes, c.grid_h, c.grid_w, c.raw_channels
            )));
        }
        Ok(())
    }

    /// One optimization step on `batch`.
    pub fn step(&mut self, batch: &Batch<T>) -> Result<LossReport, TrainError> {
        let switches = self.config.switches();
        let tau = self.config.temperature();
        let targets = &batch.targets;
        let contrastive = switches.sscl || switches.pscl;
        let mut g = Graph::new();

        let grid = g.constant(batch.grids.clone()).map_err(at("forward"))?;
        let out = self.model.sarl.forward(&mut g, &self.store, grid).map_err(at("forward"))?;
        let scores = self
            .model
            .classifier
            .classify(&mut g, &self.store, out.features)
            .map_err(at("l_bce"))?;
        let bce = bce_loss(&mut g, scores, targets).map_err(at("l_bce"))?;

        let projected = if contrastive {
            Some(
                self.model
                    .projection
                    .project(&mut g, &self.store, out.features)
                    .map_err(at("projection"))?,
            )
        } else {
            None
        };
        let snapshot = if contrastive {
            self.bank.snapshot(self.snapshot_cap)
        } else {
            Snapshot::empty(self.config.proj_dim)
        };
        let s2s = match projected {
            Some(x) if switches.sscl => Some(sscl_loss(&mut g, x, targets, &snapshot, tau).map_err(at("l_s2s"))?),
            _ => None,
        };

        self.prototypes.update(g.value(out.features), targets, g.value(scores))?;
        let p2s = match projected {
            Some(x) if switches.pscl => {
                let protos = project_prototypes(&mut g, &self.store, &self.model.projection, &self.prototypes)
                    .map_err(at("l_p2s"))?;
                Some(pscl_loss(&mut g, &protos, x, targets, &snapshot, tau).map_err(at("l_p2s"))?)
            }
            _ => None,
        };

        let value = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
        let (l_bce, l_s2s, l_p2s, l_total) =
            total_loss(g.value(bce).item().as_f64(), value(&g, s2s), value(&g, p2s), &switches)?;
        let mut total = bce;
        for (term, weight, name) in [(s2s, switches.sscl_weight, "l_s2s"), (p2s, switches.pscl_weight, "l_p2s")] {
            if let Some(v) = term {
                let w = g.scale(v, T::lit(weight)).map_err(at(name))?;
                total = g.add(total, w).map_err(at("l_total"))?;
            }
        }
        g.backward(total, &mut self.store).map_err(at("gradient"))?;
        let learning_rate = self.optimizer.step(&mut self.store)?;
        if let Some(x) = projected {
            self.bank.push(g.value(x), targets, &batch.images, self.iteration)?;
        }

        let report = LossReport {
            epoch: self.epoch + 1,
            iteration: self.iteration,
            learning_rate,
            l_bce,
            l_s2s,
            l_p2s,
            l_total,
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Runs one epoch over the shuffled training split, then evaluates on
    /// the test split. Every iteration's report goes to `sink`.
    pub fn run_epoch(
        &mut self,
        data: &Dataset,
        sink: &mut dyn FnMut(&LossReport),
    ) -> Result<EpochSummary, TrainError> {
        if self.is_finished() {
            return Err(TrainError::Finished(self.config.epochs));
        }
        self.check_data(data)?;
        let c = self.model.sarl.config.clone();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        self.rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for images in order.chunks(self.config.batch_size) {
            let batch = Batch::gather(&data.train, images, c.tokens(), c.raw_channels);
            let report = self.step(&batch)?;
            loss_sum += report.l_total;
            steps += 1;
            sink(&report);
        }
        self.prototypes.reset_epoch();
        self.epoch += 1;
        Ok(EpochSummary {
            epoch: self.epoch,
            mean_loss: loss_sum / steps as f64,
            reports: self.evaluate(data)?,
        })
    }

    /// Runs epochs until `until` are complete (capped at the configured total).
    pub fn train_until(
        &mut self,
        data: &Dataset,
        until: usize,
        sink: &mut dyn FnMut(&LossReport),
    ) -> Result<Vec<EpochSummary>, TrainError> {
        let mut out = Vec::new();
        while self.epoch < until.min(self.config.epochs) {
            out.push(self.run_epoch(data, sink)?);
        }
        Ok(out)
    }

    /// Test-split reports from the inference path only.
    pub fn evaluate(&self, data: &Dataset) -> Result<[MetricReport; 2], TrainError> {
        self.check_data(data)?;
        let scores = self.model.predict(&self.store, &data.test)?;
        Ok(evaluate_both(&scores, &data.test)?)
    }
}
