use thiserror::Error;

use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("learning-rate schedule exhausted: step {step} of {total}")]
    ScheduleExhausted { step: u64, total: u64 },
    #[error("optimizer state does not match the parameter set: {0}")]
    StateMismatch(String),
}

/// One-cycle learning-rate schedule with cosine phases.
///
/// With `T` total steps and `W = min(round(warmup_fraction · T), T − 1)`
/// warm-up steps, the rate rises from `peak / div_factor` to `peak` over
/// steps `0..=W` and then anneals to `peak / (div_factor · final_div_factor)`
/// at step `T − 1`:
///
/// * `t < W`: `lr = init + (peak − init) · (1 − cos(π t / W)) / 2`
/// * `t ≥ W`: `lr = peak + (end − peak) · (1 − cos(π (t − W) / (T − 1 − W))) / 2`
///
/// so the rate at `t = W` is `peak` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(peak: f64, total_steps: u64, warmup_fraction: f64) -> Self {
        Self {
            peak,
            total_steps,
            warmup_fraction,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        let w = (self.warmup_fraction * self.total_steps as f64).round() as u64;
        w.min(self.total_steps.saturating_sub(1))
    }

    pub fn rate(&self, step: u64) -> Result<f64, OptimError> {
        if step >= self.total_steps {
            return Err(OptimError::ScheduleExhausted {
                step,
                total: self.total_steps,
            });
        }
        let init = self.peak / self.div_factor;
        let end = init / self.final_div_factor;
        let w = self.warmup_steps();
        let pi = std::f64::consts::PI;
        if step < w {
            let f = (1.0 - (pi * step as f64 / w as f64).cos()) / 2.0;
            Ok(init + (self.peak - init) * f)
        } else {
            let span = self.total_steps - 1 - w;
            if span == 0 {
                return Ok(self.peak);
            }
            let f = (1.0 - (pi * (step - w) as f64 / span as f64).cos()) / 2.0;
            Ok(self.peak + (end - self.peak) * f)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-3,
        }
    }
}

/// Adam with decoupled weight decay, driven by a [`OneCycle`] schedule.
///
/// Per step `t` (1-based) and element: `θ ← θ (1 − lr·λ)`, then
/// `m ← β1 m + (1−β1) g`, `v ← β2 v + (1−β2) g²` and
/// `θ ← θ − lr · (m / (1−β1^t)) / (sqrt(v / (1−β2^t)) + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub schedule: OneCycle,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig, schedule: OneCycle) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            schedule,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn from_parts(
        config: AdamWConfig,
        schedule: OneCycle,
        step: u64,
        first: Vec<Tensor<T>>,
        second: Vec<Tensor<T>>,
    ) -> Self {
        Self {
            config,
            schedule,
            step,
            first,
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    pub fn current_rate(&self) -> Result<f64, OptimError> {
        self.schedule.rate(self.step)
    }

    /// Applies one update from the stored gradients, then zeroes them.
    /// Returns the rate used.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<f64, OptimError> {
        if store.len() != self.first.len() {
            return Err(OptimError::StateMismatch(format!(
                "{} parameters, {} moment buffers",
                store.len(),
                self.first.len()
            )));
        }
        let lr = self.schedule.rate(self.step)?;
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr_t = T::lit(lr);
        let decay = T::one() - lr_t * T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if m.shape() != p.value.shape() {
                return Err(OptimError::StateMismatch(p.name.clone()));
            }
            let grads = p.grad.data();
            for (((theta, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *theta *= decay;
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *theta -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn peak_reached_exactly_at_warmup_end() {
        let s = OneCycle::new(1e-3, 100, 0.3);
        assert_eq!(s.warmup_steps(), 30);
        assert_eq!(s.rate(30).unwrap(), 1e-3);
        assert!(s.rate(0).unwrap() < s.rate(15).unwrap());
        assert!(s.rate(99).unwrap() < s.rate(60).unwrap());
        assert!((s.rate(0).unwrap() - 1e-3 / 25.0).abs() < 1e-18);
        assert!((s.rate(99).unwrap() - 1e-3 / 25.0 / 1e4).abs() < 1e-18);
    }

    #[test]
    fn stepping_past_the_end_errors() {
        let s = OneCycle::new(1e-3, 10, 0.3);
        assert!(matches!(s.rate(10), Err(OptimError::ScheduleExhausted { .. })));
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut store = scalar_store(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&store, cfg, OneCycle::new(0.1, 5, 0.3));
        for _ in 0..5 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.value(store.id("w").unwrap()).data(), &[0.7]);
        assert!(opt.step(&mut store).is_err());
    }

    #[test]
    fn three_steps_match_hand_unrolled_recursion() {
        let g = 0.5;
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let sched = OneCycle::new(0.01, 10, 0.3);
        let mut store = scalar_store(1.0);
        let id = store.id("w").unwrap();
        let mut opt = AdamW::new(&store, cfg, sched);

        // oracle
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let lr = sched.rate(t - 1).unwrap();
            theta *= 1.0 - lr * 0.01;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
        }

        for _ in 0..3 {
            store.get_mut(id).grad = Tensor::from_f64(&[1], &[g]).unwrap();
            opt.step(&mut store).unwrap();
            assert_eq!(store.grad(id).data(), &[0.0]);
        }
        assert!((store.value(id).data()[0] - theta).abs() < 1e-12);
    }
}
