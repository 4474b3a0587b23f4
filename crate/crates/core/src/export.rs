//! Plain-text exports for external plotting.
//!
//! Attention file, one record per image:
//! ```text
//! image <id> <grid_h> <grid_w> <classes>
//! <grid_h·grid_w weights of class 0, row-major over the grid>
//! ...
//! <weights of class classes−1>
//! ```
//! Embedding file: one line `<image> <class> <d' values>` per activated
//! (image, class) pair, images ascending then classes ascending.
//!
//! Prototype file: one line `<class> <count> <d values of the mean> <d'
//! values of its projection>` per class with a defined prototype.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{Batch, Split};
use crate::graph::Graph;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use crate::train::Trainer;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: malformed attention record: {reason}")]
    Parse { path: PathBuf, reason: String },
}

fn write(path: &Path, text: String) -> Result<(), ExportError> {
    fs::write(path, text).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn push_row<T: Scalar>(out: &mut String, prefix: String, values: &[T]) {
    out.push_str(&prefix);
    for v in values {
        write!(out, " {v}").expect("string write");
    }
    out.push('\n');
}

/// One image's head-averaged final-layer cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub image: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `classes` rows of `grid_h·grid_w` weights.
    pub rows: Vec<Vec<f64>>,
}

pub fn attention_records<T: Scalar>(trainer: &Trainer<T>, split: &Split) -> Result<Vec<AttentionRecord>, ExportError> {
    let c = &trainer.model.sarl.config;
    let maps = trainer.model.attention(&trainer.store, split)?;
    Ok((0..split.len())
        .map(|i| AttentionRecord {
            image: i,
            grid_h: c.grid_h,
            grid_w: c.grid_w,
            rows: (0..c.num_classes)
                .map(|j| maps.row(i * c.num_classes + j).iter().map(|v| v.as_f64()).collect())
                .collect(),
        })
        .collect())
}

pub fn write_attention(records: &[AttentionRecord], path: &Path) -> Result<(), ExportError> {
    let mut out = String::new();
    for r in records {
        writeln!(out, "image {} {} {} {}", r.image, r.grid_h, r.grid_w, r.rows.len()).expect("string write");
        for row in &r.rows {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{}", cells.join(" ")).expect("string write");
        }
    }
    write(path, out)
}

pub fn read_attention(path: &Path) -> Result<Vec<AttentionRecord>, ExportError> {
    let text = fs::read_to_string(path).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: String| ExportError::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let mut out = Vec::new();
    while let Some(head) = lines.next() {
        let h: Vec<usize> = head
            .strip_prefix("image ")
            .ok_or_else(|| bad(format!("expected image header, found `{head}`")))?
            .split(' ')
            .map(|s| s.parse().map_err(|_| bad(format!("bad header `{head}`"))))
            .collect::<Result<_, _>>()?;
        let [image, grid_h, grid_w, classes] = h[..] else {
            return Err(bad(format!("header `{head}` needs four fields")));
        };
        let mut rows = Vec::with_capacity(classes);
        for _ in 0..classes {
            let line = lines.next().ok_or_else(|| bad(format!("image {image} is truncated")))?;
            let row: Vec<f64> = line
                .split(' ')
                .map(|s| s.parse().map_err(|_| bad(format!("bad weight `{s}`"))))
                .collect::<Result<_, _>>()?;
            if row.len() != grid_h * grid_w {
                return Err(bad(format!("image {image} row has {} weights", row.len())));
            }
            rows.push(row);
        }
        out.push(AttentionRecord {
            image,
            grid_h,
            grid_w,
            rows,
        });
    }
    Ok(out)
}

/// Projected vectors of every activated pair in `split`: `(image, class, x)`.
pub fn embeddings<T: Scalar>(trainer: &Trainer<T>, split: &Split) -> Result<Vec<(usize, usize, Vec<T>)>, ExportError> {
    let c = &trainer.model.sarl.config;
    let l = c.num_classes;
    let mut out = Vec::new();
    let all: Vec<usize> = (0..split.len()).collect();
    for images in all.chunks(64) {
        let batch = Batch::<T>::gather(split, images, c.tokens(), c.raw_channels);
        let mut g = Graph::new();
        let grid = g.constant(batch.grids)?;
        let q = trainer.model.sarl.forward(&mut g, &trainer.store, grid)?;
        let x = trainer.model.projection.project(&mut g, &trainer.store, q.features)?;
        let xs = g.value(x);
        for (b, &i) in images.iter().enumerate() {
            for j in (0..l).filter(|&j| split.targets.get(i, j)) {
                out.push((i, j, xs.row(b * l + j).to_vec()));
            }
        }
    }
    Ok(out)
}

pub fn write_embeddings<T: Scalar>(rows: &[(usize, usize, Vec<T>)], path: &Path) -> Result<(), ExportError> {
    let mut out = String::new();
    for (i, j, x) in rows {
        push_row(&mut out, format!("{i} {j}"), x);
    }
    write(path, out)
}

/// `(class, count, mean, projected mean)` for every class with a defined
/// prototype.
pub fn prototypes<T: Scalar>(trainer: &Trainer<T>) -> Result<Vec<(usize, u64, Vec<T>, Vec<T>)>, ExportError> {
    let pb = &trainer.prototypes;
    let mut out = Vec::new();
    for j in 0..pb.classes() {
        let Some((count, mean)) = pb.export_view(j) else {
            continue;
        };
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(&[1, mean.len()], mean.clone())?)?;
        let p = trainer.model.projection.project(&mut g, &trainer.store, c)?;
        out.push((j, count, mean, g.value(p).data().to_vec()));
    }
    Ok(out)
}

pub fn write_prototypes<T: Scalar>(rows: &[(usize, u64, Vec<T>, Vec<T>)], path: &Path) -> Result<(), ExportError> {
    let mut out = String::new();
    for (j, n, cin, cout) in rows {
        let mut values = cin.clone();
        values.extend_from_slice(cout);
        push_row(&mut out, format!("{j} {n}"), &values);
    }
    write(path, out)
}
