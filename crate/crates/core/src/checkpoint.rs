//! Text checkpoints of the complete training state.
//!
//! ```text
//! SADCL-CHECKPOINT 1
//! scalar <f32|f64>
//! progress <completed epochs> <completed iterations> <snapshot cap>
//! rng <seed> <word position>
//! config <line count>
//! <the resolved run configuration>
//! schedule <peak> <total steps> <warm-up fraction> <div factor> <final div factor>
//! adam <steps> <beta1> <beta2> <eps> <weight decay>
//! params <count>
//! param <name> <rank> <dims...>
//! <values>
//! <first moment values>
//! <second moment values>
//! prototypes <threshold> <classes> <dim>
//! <counts>
//! <contributor counts of the display copy>
//! <sum values>
//! <display values>
//! bank <capacity> <dim> <classes> <next sequence>
//! queue <class> <length>
//! <image> <iteration> <sequence> <values...>   (oldest first)
//! END
//! ```
//!
//! Values are space-separated in shortest round-trip decimal form, so
//! loading and saving again reproduces the file byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::RunConfig;
use crate::contrastive::{BankEntry, MemoryBank, PrototypeBank};
use crate::model::Model;
use crate::objective::{AdamW, AdamWConfig, OneCycle};
use crate::rng::{Rng, RngState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Trainer;

const MAGIC: &str = "SADCL-CHECKPOINT 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("checkpoint holds {found} values but {expected} was requested")]
    Precision { found: String, expected: &'static str },
}

fn join<X: ToString>(values: impl IntoIterator<Item = X>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn to_text<T: Scalar>(t: &Trainer<T>) -> String {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(MAGIC.into());
    line(format!("scalar {}", T::NAME));
    line(format!("progress {} {} {}", t.epoch, t.iteration, t.snapshot_cap));
    let rng = t.rng.state();
    line(format!("rng {} {}", rng.seed, rng.word_pos));
    let config = t.config.to_text();
    line(format!("config {}", config.lines().count()));
    for l in config.lines() {
        line(l.to_string());
    }
    let s = &t.optimizer.schedule;
    line(format!(
        "schedule {} {} {} {} {}",
        s.peak, s.total_steps, s.warmup_fraction, s.div_factor, s.final_div_factor
    ));
    let a = &t.optimizer.config;
    line(format!(
        "adam {} {} {} {} {}",
        t.optimizer.steps_taken(),
        a.beta1,
        a.beta2,
        a.eps,
        a.weight_decay
    ));
    line(format!("params {}", t.store.len()));
    let (first, second) = t.optimizer.moments();
    for ((_, p), (m, v)) in t.store.iter().zip(first.iter().zip(second)) {
        let shape = p.value.shape();
        line(format!("param {} {} {}", p.name, shape.len(), join(shape)).trim_end().to_string());
        line(join(p.value.data()));
        line(join(m.data()));
        line(join(v.data()));
    }
    let pb = &t.prototypes;
    line(format!("prototypes {} {} {}", pb.threshold(), pb.classes(), pb.dim()));
    let (display, defined) = pb.display();
    line(join(pb.counts()));
    line(join(defined));
    line(join(pb.sums().data()));
    line(join(display.data()));
    let bank = &t.bank;
    line(format!(
        "bank {} {} {} {}",
        bank.capacity(),
        bank.dim(),
        bank.classes(),
        bank.next_sequence()
    ));
    for j in 0..bank.classes() {
        line(format!("queue {j} {}", bank.len(j)));
        for e in bank.entries(j) {
            let mut s = format!("{} {} {}", e.image, e.iteration, e.sequence);
            for v in &e.vector {
                write!(s, " {v}").expect("string write");
            }
            line(s);
        }
    }
    line("END".into());
    out
}

pub fn save<T: Scalar>(t: &Trainer<T>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_text(t)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads only the scalar type recorded in a checkpoint file.
pub fn scalar_name(path: &Path) -> Result<String, CheckpointError> {
    let text = read(path)?;
    let mut r = Reader::new(&text);
    r.expect_line(MAGIC)?;
    let w = r.words("scalar", 1)?;
    Ok(w[0].to_string())
}

fn read(path: &Path) -> Result<String, CheckpointError> {
    fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Trainer<T>, CheckpointError> {
    from_text(&read(path)?)
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    current: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            current: 0,
        }
    }

    fn fail<X>(&self, reason: impl Into<String>) -> Result<X, CheckpointError> {
        Err(CheckpointError::Format {
            line: self.current,
            reason: reason.into(),
        })
    }

    fn next(&mut self) -> Result<&'a str, CheckpointError> {
        match self.lines.next() {
            Some((n, l)) => {
                self.current = n + 1;
                Ok(l)
            }
            None => {
                self.current += 1;
                self.fail("unexpected end of file")
            }
        }
    }

    fn expect_line(&mut self, want: &str) -> Result<(), CheckpointError> {
        let l = self.next()?;
        if l != want {
            return self.fail(format!("expected `{want}`, found `{l}`"));
        }
        Ok(())
    }

    /// A `tag a b c` line, returning the `count` words after the tag
    /// (`usize::MAX` for any count).
    fn words(&mut self, tag: &str, count: usize) -> Result<Vec<&'a str>, CheckpointError> {
        let l = self.next()?;
        let mut it = l.split(' ');
        if it.next() != Some(tag) {
            return self.fail(format!("expected `{tag}` record, found `{l}`"));
        }
        let w: Vec<&str> = it.collect();
        if count != usize::MAX && w.len() != count {
            return self.fail(format!("`{tag}` needs {count} fields, found {}", w.len()));
        }
        Ok(w)
    }

    fn num<X: std::str::FromStr>(&self, s: &str) -> Result<X, CheckpointError> {
        s.parse().or_else(|_| self.fail(format!("unparsable number `{s}`")))
    }

    fn values<X: std::str::FromStr>(&mut self, expected: usize) -> Result<Vec<X>, CheckpointError> {
        let l = self.next()?;
        let v = l
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|s| self.num(s))
            .collect::<Result<Vec<X>, _>>()?;
        if v.len() != expected {
            return self.fail(format!("expected {expected} values, found {}", v.len()));
        }
        Ok(v)
    }
}

pub fn from_text<T: Scalar>(text: &str) -> Result<Trainer<T>, CheckpointError> {
    let mut r = Reader::new(text);
    r.expect_line(MAGIC)?;
    let scalar = r.words("scalar", 1)?[0];
    if scalar != T::NAME {
        return Err(CheckpointError::Precision {
            found: scalar.to_string(),
            expected: T::NAME,
        });
    }
    let w = r.words("progress", 3)?;
    let (epoch, iteration, snapshot_cap): (usize, u64, usize) = (r.num(w[0])?, r.num(w[1])?, r.num(w[2])?);
    let w = r.words("rng", 2)?;
    let rng = Rng::from_state(RngState {
        seed: r.num(w[0])?,
        word_pos: r.num(w[1])?,
    });
    let w = r.words("config", 1)?;
    let n: usize = r.num(w[0])?;
    let mut config_text = String::new();
    for _ in 0..n {
        config_text.push_str(r.next()?);
        config_text.push('\n');
    }
    let config = RunConfig::parse(&config_text).or_else(|e| r.fail(format!("embedded config: {e}")))?;

    let w = r.words("schedule", 5)?;
    let schedule = OneCycle {
        peak: r.num(w[0])?,
        total_steps: r.num(w[1])?,
        warmup_fraction: r.num(w[2])?,
        div_factor: r.num(w[3])?,
        final_div_factor: r.num(w[4])?,
    };
    let w = r.words("adam", 5)?;
    let steps: u64 = r.num(w[0])?;
    let adam = AdamWConfig {
        beta1: r.num(w[1])?,
        beta2: r.num(w[2])?,
        eps: r.num(w[3])?,
        weight_decay: r.num(w[4])?,
    };

    let (model, mut store) = Model::build::<T>(&config).or_else(|e| r.fail(format!("model: {e}")))?;
    let w = r.words("params", 1)?;
    let count: usize = r.num(w[0])?;
    if count != store.len() {
        return r.fail(format!("{count} parameters, the configured model has {}", store.len()));
    }
    let mut first = Vec::with_capacity(count);
    let mut second = Vec::with_capacity(count);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let w = r.words("param", usize::MAX)?;
        let name = store.get(id).name.clone();
        if w.first() != Some(&name.as_str()) {
            return r.fail(format!("expected parameter `{name}`"));
        }
        let shape: Vec<usize> = w[2..].iter().map(|s| r.num(s)).collect::<Result<_, _>>()?;
        if shape != store.value(id).shape() {
            return r.fail(format!("parameter `{name}` has shape {shape:?}, model expects {:?}", store.value(id).shape()));
        }
        let numel = store.value(id).numel();
        let value = Tensor::new(&shape, r.values(numel)?).expect("counted");
        store.set_value(id, value).expect("shape checked");
        first.push(Tensor::new(&shape, r.values(numel)?).expect("counted"));
        second.push(Tensor::new(&shape, r.values(numel)?).expect("counted"));
    }
    let optimizer = AdamW::from_parts(adam, schedule, steps, first, second);

    let w = r.words("prototypes", 3)?;
    let (threshold, classes, dim): (f64, usize, usize) = (r.num(w[0])?, r.num(w[1])?, r.num(w[2])?);
    let counts: Vec<u64> = r.values(classes)?;
    let defined: Vec<u64> = r.values(classes)?;
    let sums = Tensor::new(&[classes, dim], r.values(classes * dim)?).expect("counted");
    let display = Tensor::new(&[classes, dim], r.values(classes * dim)?).expect("counted");
    let prototypes = PrototypeBank::from_parts(threshold, sums, counts, display, defined)
        .or_else(|e| r.fail(e.to_string()))?;

    let w = r.words("bank", 4)?;
    let (capacity, bdim, bclasses, next_sequence): (usize, usize, usize, u64) =
        (r.num(w[0])?, r.num(w[1])?, r.num(w[2])?, r.num(w[3])?);
    let mut queues = Vec::with_capacity(bclasses);
    for j in 0..bclasses {
        let w = r.words("queue", 2)?;
        if r.num::<usize>(w[0])? != j {
            return r.fail(format!("queues out of order at class {j}"));
        }
        let len: usize = r.num(w[1])?;
        let mut q = Vec::with_capacity(len);
        for _ in 0..len {
            let l = r.next()?;
            let f: Vec<&str> = l.split(' ').collect();
            if f.len() != 3 + bdim {
                return r.fail(format!("bank entry needs {} fields", 3 + bdim));
            }
            q.push(BankEntry {
                image: r.num(f[0])?,
                iteration: r.num(f[1])?,
                sequence: r.num(f[2])?,
                vector: f[3..].iter().map(|s| r.num(s)).collect::<Result<_, _>>()?,
            });
        }
        queues.push(q);
    }
    let bank = MemoryBank::from_parts(capacity, bdim, queues, next_sequence).or_else(|e| r.fail(e.to_string()))?;
    r.expect_line("END")?;

    Ok(Trainer {
        config,
        model,
        store,
        optimizer,
        bank,
        prototypes,
        rng,
        epoch,
        iteration,
        snapshot_cap,
    })
}
