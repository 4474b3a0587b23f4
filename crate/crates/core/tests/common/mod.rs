#![allow(dead_code)]

//! Brute-force contrastive instances shared by the oracle and acceptance
//! suites.

use sadcl::contrastive::{pscl_loss, sscl_loss, ProjectedPrototypes, Snapshot, Temperature};
use sadcl::graph::Graph;
use sadcl::labels::TargetMatrix;
use sadcl::rng::Rng;
use sadcl::Tensor;

/// Random batch with `N ≤ 4`, `L ≤ 5`, `d' ≤ 6`, a random snapshot and
/// random projected prototypes.
pub struct Case {
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub x: Vec<f64>,
    pub y: TargetMatrix,
    pub snapshot: Snapshot<f64>,
    pub protos: Vec<(usize, Vec<f64>)>,
    pub tau: f64,
}

pub fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

impl Case {
    pub fn random(rng: &mut Rng) -> Self {
        let n = 1 + rng.below(4);
        let l = 1 + rng.below(5);
        let d = 1 + rng.below(6);
        let x: Vec<f64> = (0..n * l).flat_map(|_| unit(rng, d)).collect();
        let p_on = rng.uniform();
        let mut y = TargetMatrix::zeros(n, l);
        for i in 0..n {
            for j in 0..l {
                y.set(i, j, rng.uniform() < p_on);
            }
        }
        let m = rng.below(6);
        let classes: Vec<usize> = (0..m).map(|_| rng.below(l)).collect();
        let vectors: Vec<f64> = (0..m).flat_map(|_| unit(rng, d)).collect();
        let snapshot = Snapshot {
            vectors: Tensor::new(&[m, d], vectors).unwrap(),
            classes,
            images: (0..m).collect(),
        };
        let mut protos = Vec::new();
        for j in 0..l {
            if rng.uniform() < 0.7 {
                protos.push((j, unit(rng, d)));
            }
        }
        Self {
            n,
            l,
            d,
            x,
            y,
            snapshot,
            protos,
            tau: rng.uniform_range(0.1, 1.0),
        }
    }

    fn vec(&self, i: usize, j: usize) -> &[f64] {
        &self.x[(i * self.l + j) * self.d..(i * self.l + j + 1) * self.d]
    }

    /// Every candidate `(class, activated, vector)`: batch first, then snapshot.
    fn pool(&self) -> Vec<(usize, bool, Vec<f64>)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.l {
                out.push((j, self.y.get(i, j), self.vec(i, j).to_vec()));
            }
        }
        for (k, &c) in self.snapshot.classes.iter().enumerate() {
            out.push((c, true, self.snapshot.vectors.row(k).to_vec()));
        }
        out
    }

    pub fn sscl_reference(&self) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() / self.tau;
        let activated: Vec<(usize, Vec<f64>)> =
            self.pool().into_iter().filter(|c| c.1).map(|(c, _, v)| (c, v)).collect();
        let anchors = self.y.active_count();
        let mut total = 0.0;
        for a in 0..anchors {
            let (ca, xa) = &activated[a];
            let mut denom = 0.0;
            for (c, (_, xc)) in activated.iter().enumerate() {
                if c != a {
                    denom += dot(xa, xc).exp();
                }
            }
            let positives: Vec<usize> = (0..activated.len()).filter(|&p| p != a && activated[p].0 == *ca).collect();
            for &p in &positives {
                total -= (dot(xa, &activated[p].1).exp() / denom).ln() / positives.len() as f64;
            }
        }
        total
    }

    pub fn pscl_reference(&self) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() / self.tau;
        let pool = self.pool();
        let mut total = 0.0;
        for (j, c) in &self.protos {
            let mut all = 0.0;
            let mut pos = 0.0;
            for (class, on, v) in &pool {
                if class == j {
                    let e = dot(c, v).exp();
                    all += e;
                    if *on {
                        pos += e;
                    }
                }
            }
            if pos > 0.0 {
                total -= (pos / all).ln();
            }
        }
        total
    }

    pub fn losses(&self, x: &[f64]) -> (f64, f64) {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[self.n, self.l, self.d], x.to_vec()).unwrap()).unwrap();
        let tau = Temperature::new(self.tau).unwrap();
        let s = sscl_loss(&mut g, xv, &self.y, &self.snapshot, tau).unwrap();
        let protos = self.projected(&mut g);
        let p = pscl_loss(&mut g, &protos, xv, &self.y, &self.snapshot, tau).unwrap();
        (g.value(s).item(), g.value(p).item())
    }

    pub fn projected(&self, g: &mut Graph<f64>) -> ProjectedPrototypes {
        if self.protos.is_empty() {
            return ProjectedPrototypes { vectors: None, classes: Vec::new() };
        }
        let data: Vec<f64> = self.protos.iter().flat_map(|(_, v)| v.clone()).collect();
        let v = g.constant(Tensor::new(&[self.protos.len(), self.d], data).unwrap()).unwrap();
        ProjectedPrototypes {
            vectors: Some(v),
            classes: self.protos.iter().map(|(j, _)| *j).collect(),
        }
    }
}
