use crate::labels::TargetMatrix;
use crate::rng::Rng;

use super::DataError;

/// Parameters of the synthetic task.
///
/// `boosts` lists `(j, k, b)` co-occurrence boosts; the matrix they describe
/// is symmetric with zero diagonal. When class `k` is drawn after an active
/// class `j`, its inclusion probability is multiplied by `1 + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub raw_channels: usize,
    pub cardinality: f64,
    pub boosts: Vec<(usize, usize, f64)>,
    pub signature_strength: f64,
    pub noise: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 16,
            grid_h: 8,
            grid_w: 8,
            raw_channels: 16,
            cardinality: 2.9,
            boosts: Vec::new(),
            signature_strength: 1.0,
            noise: 0.3,
            train_size: 2000,
            test_size: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let l = self.num_classes;
        if l == 0 {
            return Err(DataError::InvalidSpec("num_classes must be positive".into()));
        }
        if !(self.cardinality > 0.0 && self.cardinality < l as f64) {
            return Err(DataError::InvalidSpec(format!(
                "cardinality {} must lie in (0, {l})",
                self.cardinality
            )));
        }
        for &(j, k, b) in &self.boosts {
            if j >= l || k >= l || j == k {
                return Err(DataError::InvalidSpec(format!("boost pair ({j}, {k}) invalid")));
            }
            if !(b >= 0.0 && b.is_finite()) {
                return Err(DataError::InvalidSpec(format!("boost {b} must be nonnegative")));
            }
        }
        if self.noise < 0.0 || !self.noise.is_finite() || !self.signature_strength.is_finite() {
            return Err(DataError::InvalidSpec("noise and strength must be finite, noise ≥ 0".into()));
        }
        if self.raw_channels == 0 {
            return Err(DataError::InvalidSpec("raw_channels must be positive".into()));
        }
        TileLayout::new(self.grid_h, self.grid_w, l)?;
        Ok(())
    }

    /// Dense symmetric boost matrix, `num_classes²`, row-major.
    pub fn boost_matrix(&self) -> Vec<f64> {
        let l = self.num_classes;
        let mut m = vec![0.0; l * l];
        for &(j, k, b) in &self.boosts {
            m[j * l + k] = b;
            m[k * l + j] = b;
        }
        m
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn sample_len(&self) -> usize {
        self.tokens() * self.raw_channels
    }
}

/// Row-major partition of the grid into one rectangular tile per class.
///
/// With `cols = ceil(sqrt(L))` and `rows = ceil(L / cols)` tiles, each tile
/// spans `floor(H / rows) × floor(W / cols)` cells; class `j` owns tile
/// `(j / cols, j % cols)`. Leftover cells belong to no class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileLayout {
    pub grid_h: usize,
    pub grid_w: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

impl TileLayout {
    pub fn new(grid_h: usize, grid_w: usize, classes: usize) -> Result<Self, DataError> {
        let tile_cols = (classes as f64).sqrt().ceil() as usize;
        let tile_rows = classes.div_ceil(tile_cols.max(1));
        if grid_h < tile_rows || grid_w < tile_cols {
            return Err(DataError::InvalidSpec(format!(
                "{grid_h}×{grid_w} grid cannot hold {classes} disjoint tiles"
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            tile_rows,
            tile_cols,
            tile_h: grid_h / tile_rows,
            tile_w: grid_w / tile_cols,
        })
    }

    /// Token indices (row-major over the grid) covered by `class`'s tile.
    pub fn cells(&self, class: usize) -> Vec<usize> {
        let (tr, tc) = (class / self.tile_cols, class % self.tile_cols);
        let mut out = Vec::with_capacity(self.tile_h * self.tile_w);
        for r in tr * self.tile_h..(tr + 1) * self.tile_h {
            for c in tc * self.tile_w..(tc + 1) * self.tile_w {
                out.push(r * self.grid_w + c);
            }
        }
        out
    }
}

/// One split: flattened `[n, tokens, raw_channels]` grids plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub grids: Vec<f32>,
    pub targets: TargetMatrix,
}

impl Split {
    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self, i: usize) -> &[f32] {
        let m = self.grids.len() / self.len().max(1);
        &self.grids[i * m..(i + 1) * m]
    }

    /// Subset of samples in the given order.
    pub fn select(&self, idx: &[usize]) -> Split {
        let mut grids = Vec::new();
        for &i in idx {
            grids.extend_from_slice(self.grid(i));
        }
        Split {
            grids,
            targets: self.targets.select(idx),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: Split,
    pub test: Split,
}

const SIGNATURE_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Generates both splits; a pure function of `spec`.
///
/// Labels are drawn class by class in ascending order: class `k` is active
/// with probability `min(1, κ/L · Π_{j<k active} (1 + b_jk))`. Every active
/// class adds `α ·` its fixed standard-normal signature over its tile, and
/// every value receives independent `N(0, σ_n²)` noise.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let layout = TileLayout::new(spec.grid_h, spec.grid_w, spec.num_classes)?;
    let c = spec.raw_channels;
    let mut sig_rng = Rng::derived(spec.seed, SIGNATURE_STREAM);
    let signatures: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..layout.tile_h * layout.tile_w * c).map(|_| sig_rng.normal()).collect())
        .collect();
    let boosts = spec.boost_matrix();
    let make = |n: usize, stream: u64| -> Split {
        let mut rng = Rng::derived(spec.seed, stream);
        let l = spec.num_classes;
        let base = spec.cardinality / l as f64;
        let mut targets = TargetMatrix::zeros(n, l);
        let mut grids = Vec::with_capacity(n * spec.sample_len());
        for i in 0..n {
            for k in 0..l {
                let mut p = base;
                for j in 0..k {
                    if targets.get(i, j) {
                        p *= 1.0 + boosts[j * l + k];
                    }
                }
                if rng.uniform() < p.clamp(0.0, 1.0) {
                    targets.set(i, k, true);
                }
            }
            let mut grid = vec![0.0f64; spec.sample_len()];
            for k in (0..l).filter(|&k| targets.get(i, k)) {
                for (t, cell) in layout.cells(k).into_iter().enumerate() {
                    for ch in 0..c {
                        grid[cell * c + ch] += spec.signature_strength * signatures[k][t * c + ch];
                    }
                }
            }
            for v in grid.iter_mut() {
                *v += spec.noise * rng.normal();
            }
            grids.extend(grid.into_iter().map(|v| v as f32));
        }
        Split { grids, targets }
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: make(spec.train_size, TRAIN_STREAM),
        test: make(spec.test_size, TEST_STREAM),
    })
}
