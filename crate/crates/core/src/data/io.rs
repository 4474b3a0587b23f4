//! Dataset file format.
//!
//! ```text
//! SADCL-DATASET 1
//! num_classes=16
//! ...                      (every SyntheticSpec field, `key=value`)
//! train=2000
//! test=500
//! checksum=<sha256 of the body, lowercase hex>
//! END
//! <body>
//! ```
//!
//! The body holds the train samples then the test samples. Each sample is
//! `num_classes` label bytes (0 or 1) followed by
//! `grid_h · grid_w · raw_channels` little-endian `f32` values in
//! `(row, col, channel)` order.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::labels::TargetMatrix;

use super::{Dataset, Split, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt dataset {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

const MAGIC: &str = "SADCL-DATASET 1";

pub fn format_boosts(boosts: &[(usize, usize, f64)]) -> String {
    boosts
        .iter()
        .map(|(j, k, b)| format!("{j}:{k}:{b}"))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_boosts(s: &str) -> Result<Vec<(usize, usize, f64)>, String> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let parts: Vec<&str> = p.split(':').collect();
            if parts.len() != 3 {
                return Err(format!("boost `{p}` is not j:k:b"));
            }
            let j = parts[0].parse().map_err(|e| format!("boost `{p}`: {e}"))?;
            let k = parts[1].parse().map_err(|e| format!("boost `{p}`: {e}"))?;
            let b = parts[2].parse().map_err(|e| format!("boost `{p}`: {e}"))?;
            Ok((j, k, b))
        })
        .collect()
}

pub(crate) fn spec_fields(spec: &SyntheticSpec) -> Vec<(&'static str, String)> {
    vec![
        ("num_classes", spec.num_classes.to_string()),
        ("grid_h", spec.grid_h.to_string()),
        ("grid_w", spec.grid_w.to_string()),
        ("raw_channels", spec.raw_channels.to_string()),
        ("cardinality", spec.cardinality.to_string()),
        ("boosts", format_boosts(&spec.boosts)),
        ("signature_strength", spec.signature_strength.to_string()),
        ("noise", spec.noise.to_string()),
        ("train_size", spec.train_size.to_string()),
        ("test_size", spec.test_size.to_string()),
        ("seed", spec.seed.to_string()),
    ]
}

fn encode_split(split: &Split, out: &mut Vec<u8>) {
    let n = split.len();
    for i in 0..n {
        out.extend_from_slice(split.targets.row(i));
        for v in split.grid(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes a dataset to bytes; returns `(bytes, checksum)`.
pub fn encode(dataset: &Dataset) -> (Vec<u8>, String) {
    let mut body = Vec::new();
    encode_split(&dataset.train, &mut body);
    encode_split(&dataset.test, &mut body);
    let checksum = hex_digest(&body);
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    for (k, v) in spec_fields(&dataset.spec) {
        out.push_str(&format!("{k}={v}\n"));
    }
    out.push_str(&format!("train={}\ntest={}\n", dataset.train.len(), dataset.test.len()));
    out.push_str(&format!("checksum={checksum}\nEND\n"));
    let mut bytes = out.into_bytes();
    bytes.extend_from_slice(&body);
    (bytes, checksum)
}

/// Writes the dataset and returns its checksum.
pub fn save(dataset: &Dataset, path: &Path) -> Result<String, DataError> {
    let (bytes, checksum) = encode(dataset);
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(checksum)
}

pub fn load(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes).map_err(|reason| DataError::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}

fn decode(bytes: &[u8]) -> Result<Dataset, String> {
    let marker = b"\nEND\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or("missing header terminator")?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not UTF-8")?;
    let body = &bytes[end + marker.len()..];
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err("bad magic line".into());
    }
    let mut fields = std::collections::BTreeMap::new();
    for line in lines {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("malformed header line `{line}`"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| fields.get(k).cloned().ok_or_else(|| format!("missing header field `{k}`"));
    fn num<X: std::str::FromStr>(k: &str, v: String) -> Result<X, String> {
        v.parse().map_err(|_| format!("field `{k}` has unparsable value `{v}`"))
    }
    let spec = SyntheticSpec {
        num_classes: num("num_classes", get("num_classes")?)?,
        grid_h: num("grid_h", get("grid_h")?)?,
        grid_w: num("grid_w", get("grid_w")?)?,
        raw_channels: num("raw_channels", get("raw_channels")?)?,
        cardinality: num("cardinality", get("cardinality")?)?,
        boosts: parse_boosts(&get("boosts")?)?,
        signature_strength: num("signature_strength", get("signature_strength")?)?,
        noise: num("noise", get("noise")?)?,
        train_size: num("train_size", get("train_size")?)?,
        test_size: num("test_size", get("test_size")?)?,
        seed: num("seed", get("seed")?)?,
    };
    let n_train: usize = num("train", get("train")?)?;
    let n_test: usize = num("test", get("test")?)?;
    let checksum = get("checksum")?;
    if hex_digest(body) != checksum {
        return Err("checksum mismatch".into());
    }
    let l = spec.num_classes;
    let m = spec.sample_len();
    let record = l + 4 * m;
    if body.len() != (n_train + n_test) * record {
        return Err(format!(
            "body has {} bytes, expected {}",
            body.len(),
            (n_train + n_test) * record
        ));
    }
    let read_split = |offset: usize, n: usize| -> Result<Split, String> {
        let mut labels = Vec::with_capacity(n * l);
        let mut grids = Vec::with_capacity(n * m);
        for i in 0..n {
            let rec = &body[offset + i * record..offset + (i + 1) * record];
            labels.extend_from_slice(&rec[..l]);
            grids.extend(
                rec[l..]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            );
        }
        let targets = TargetMatrix::new(n, l, labels).map_err(|e| e.to_string())?;
        Ok(Split { grids, targets })
    };
    Ok(Dataset {
        train: read_split(0, n_train)?,
        test: read_split(n_train * record, n_test)?,
        spec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;

    fn small() -> Dataset {
        generate(&SyntheticSpec {
            train_size: 12,
            test_size: 4,
            boosts: vec![(0, 3, 1.5)],
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sadcl");
        let ds = small();
        save(&ds, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.sadcl");
        save(&small(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load(&path), Err(DataError::Corrupt { .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load(Path::new("/nonexistent/data.sadcl")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/data.sadcl"));
    }

    #[test]
    fn same_seed_same_checksum() {
        assert_eq!(encode(&small()).1, encode(&small()).1);
    }

    #[test]
    fn boosts_parse() {
        assert_eq!(parse_boosts("0:1:2;3:4:0.5").unwrap(), vec![(0, 1, 2.0), (3, 4, 0.5)]);
        assert_eq!(parse_boosts("").unwrap(), vec![]);
        assert!(parse_boosts("0:1").is_err());
    }
}
