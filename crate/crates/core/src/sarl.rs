//! Label-level representation learning: a per-cell affine backbone
//! surrogate, a transformer encoder over grid tokens and a transformer
//! decoder driven by one learnable query per category.
//!
//! Both stacks are post-norm (`norm(x + block(x))`). The positional
//! embedding is added to attention queries and keys only, never to values.

use crate::graph::{Graph, Var};
use crate::nn::{Activation, Affine, FeedForward, LayerNorm};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct SarlConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub raw_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    pub query_self_attention: bool,
    pub activation: Activation,
}

impl Default for SarlConfig {
    fn default() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            raw_channels: 16,
            dim: 64,
            heads: 4,
            encoder_layers: 1,
            decoder_layers: 2,
            ffn_hidden: 128,
            num_classes: 16,
            query_self_attention: true,
            activation: Activation::Relu,
        }
    }
}

impl SarlConfig {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return Err(format!("dim {} must be a multiple of 4 for the 2-D positional embedding", self.dim));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err("encoder and decoder need at least one layer each".into());
        }
        if self.tokens() == 0 || self.raw_channels == 0 || self.num_classes == 0 {
            return Err("grid, channels and classes must be non-empty".into());
        }
        Ok(())
    }
}

/// Fixed 2-D sinusoidal embedding of shape `[h·w, dim]`.
///
/// The first half of the channels encodes the row index, the second half the
/// column index; within each half, channel pair `(2k, 2k+1)` holds
/// `(sin, cos)(pos / 10000^(2k / half))`.
pub fn positional_embedding<T: Scalar>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(h * w * dim);
    for r in 0..h {
        for c in 0..w {
            for (pos, _) in [(r as f64, 0), (c as f64, 1)] {
                for k in 0..half / 2 {
                    let freq = 10000f64.powf(-((2 * k) as f64) / half as f64);
                    data.push(T::lit((pos * freq).sin()));
                    data.push(T::lit((pos * freq).cos()));
                }
            }
        }
    }
    Tensor::new(&[h * w, dim], data).expect("dim multiple of 4")
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            query: Affine::new(store, rng, &format!("{name}.query"), dim, dim)?,
            key: Affine::new(store, rng, &format!("{name}.key"), dim, dim)?,
            value: Affine::new(store, rng, &format!("{name}.value"), dim, dim)?,
            output: Affine::new(store, rng, &format!("{name}.output"), dim, dim)?,
            heads,
        })
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// Inputs are `[n, t, d]`; returns the `[n, tq, d]` output and the
    /// `[n·heads, tq, tk]` attention weights.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query_src: Var,
        key_src: Var,
        value_src: Var,
    ) -> Result<(Var, Var)> {
        let qs = g.shape(query_src).to_vec();
        let ks = g.shape(key_src).to_vec();
        let (n, tq, d) = (qs[0], qs[1], qs[2]);
        let tk = ks[1];
        let h = self.heads;
        let dh = d / h;

        let q = self.query.forward(g, store, query_src)?;
        let k = self.key.forward(g, store, key_src)?;
        let v = self.value.forward(g, store, value_src)?;
        let q = split_heads(g, q, n, tq, h, dh)?;
        let k = split_heads(g, k, n, tk, h, dh)?;
        let v = split_heads(g, v, n, tk, h, dh)?;

        let kt = g.transpose(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, T::one() / T::lit(dh as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        let ctx = g.bmm(weights, v)?;
        let ctx = g.reshape(ctx, &[n, h, tq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, tq, d])?;
        let out = self.output.forward(g, store, ctx)?;
        Ok((out, weights))
    }
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, n: usize, t: usize, h: usize, dh: usize) -> Result<Var> {
    let x = g.reshape(x, &[n, t, h, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[n * h, t, dh])
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub attention: AttentionBlock,
    pub attention_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attention: Option<(AttentionBlock, LayerNorm)>,
    pub cross_attention: AttentionBlock,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

/// Parameter handles of the representation-learning stack.
#[derive(Debug, Clone)]
pub struct Sarl {
    pub config: SarlConfig,
    pub embed: Affine,
    pub queries: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
}

/// Decoder output for one batch.
#[derive(Debug, Clone, Copy)]
pub struct SarlOutput {
    /// `[n, classes, dim]`
    pub features: Var,
    /// Final-layer cross-attention, `[n·heads, classes, tokens]`.
    pub cross_attention: Var,
}

impl Sarl {
    pub fn new<T: Scalar>(config: SarlConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate().map_err(TensorError::Contract)?;
        let d = config.dim;
        let embed = Affine::new(store, rng, "backbone", config.raw_channels, d)?;
        let queries = store.add(
            "decoder.queries",
            Tensor::from_fn(&[config.num_classes, d], |_| T::lit(rng.normal())),
        )?;
        let ffn_dims = (d, config.ffn_hidden, d);
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let p = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                attention: AttentionBlock::new(store, rng, &format!("{p}.attention"), d, config.heads)?,
                attention_norm: LayerNorm::new(store, &format!("{p}.attention_norm"), d)?,
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), ffn_dims, config.activation)?,
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let p = format!("decoder.{l}");
            let self_attention = if config.query_self_attention {
                Some((
                    AttentionBlock::new(store, rng, &format!("{p}.self_attention"), d, config.heads)?,
                    LayerNorm::new(store, &format!("{p}.self_norm"), d)?,
                ))
            } else {
                None
            };
            decoder.push(DecoderLayer {
                self_attention,
                cross_attention: AttentionBlock::new(store, rng, &format!("{p}.cross_attention"), d, config.heads)?,
                cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), d)?,
                ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), ffn_dims, config.activation)?,
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d)?,
            });
        }
        Ok(Self {
            config,
            embed,
            queries,
            encoder,
            decoder,
        })
    }

    /// `[n, tokens, raw_channels]` grid → `[n, tokens, dim]` sequence.
    pub fn embed_patches<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, grid: Var) -> Result<Var> {
        let s = g.shape(grid).to_vec();
        let want = [self.config.tokens(), self.config.raw_channels];
        if s.len() != 3 || s[1..] != want {
            return Err(TensorError::Shape {
                op: "embed_patches",
                left: s,
                right: want.to_vec(),
            });
        }
        self.embed.forward(g, store, grid)
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var, pe: Var) -> Result<Var> {
        let mut x = features;
        for layer in &self.encoder {
            let qk = g.add_broadcast(x, pe)?;
            let (a, _) = layer.attention.forward(g, store, qk, qk, x)?;
            let r = g.add(x, a)?;
            x = layer.attention_norm.forward(g, store, r)?;
            let f = layer.ffn.forward(g, store, x)?;
            let r = g.add(x, f)?;
            x = layer.ffn_norm.forward(g, store, r)?;
        }
        Ok(x)
    }

    /// Runs the query decoder against encoded features `[n, tokens, dim]`.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        memory: Var,
        pe: Var,
    ) -> Result<SarlOutput> {
        let n = g.shape(memory)[0];
        let queries = g.param(store, self.queries)?;
        let mut q = g.repeat_leading(queries, n)?;
        let keys = g.add_broadcast(memory, pe)?;
        let mut cross = None;
        for layer in &self.decoder {
            if let Some((attn, norm)) = &layer.self_attention {
                let (a, _) = attn.forward(g, store, q, q, q)?;
                let r = g.add(q, a)?;
                q = norm.forward(g, store, r)?;
            }
            let (a, w) = layer.cross_attention.forward(g, store, q, keys, memory)?;
            cross = Some(w);
            let r = g.add(q, a)?;
            q = layer.cross_norm.forward(g, store, r)?;
            let f = layer.ffn.forward(g, store, q)?;
            let r = g.add(q, f)?;
            q = layer.ffn_norm.forward(g, store, r)?;
        }
        Ok(SarlOutput {
            features: q,
            cross_attention: cross.expect("at least one decoder layer"),
        })
    }

    /// Full pass from raw grids `[n, tokens, raw_channels]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, grid: Var) -> Result<SarlOutput> {
        let c = &self.config;
        let pe = g.constant(positional_embedding(c.grid_h, c.grid_w, c.dim))?;
        let f0 = self.embed_patches(g, store, grid)?;
        let f = self.encode(g, store, f0, pe)?;
        self.decode(g, store, f, pe)
    }
}

/// Averages `[n·heads, classes, tokens]` weights over heads into
/// `[n, classes, tokens]`.
pub fn head_averaged<T: Scalar>(weights: &Tensor<T>, heads: usize) -> Tensor<T> {
    let s = weights.shape();
    let (nh, l, t) = (s[0], s[1], s[2]);
    let n = nh / heads;
    let mut out = Tensor::zeros(&[n, l, t]);
    let inv = T::one() / T::lit(heads as f64);
    for i in 0..n {
        for h in 0..heads {
            let src = &weights.data()[(i * heads + h) * l * t..(i * heads + h + 1) * l * t];
            for (o, &v) in out.data_mut()[i * l * t..(i + 1) * l * t].iter_mut().zip(src) {
                *o += v * inv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SarlConfig {
        SarlConfig {
            grid_h: 2,
            grid_w: 3,
            raw_channels: 5,
            dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            ffn_hidden: 16,
            num_classes: 4,
            query_self_attention: true,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn positional_embedding_is_bounded_and_deterministic() {
        let a = positional_embedding::<f64>(4, 4, 16);
        let b = positional_embedding::<f64>(4, 4, 16);
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[16, 16]);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stacked_output_shape() {
        let mut store = ParamStore::<f32>::new();
        let sarl = Sarl::new(tiny(), &mut store, &mut Rng::new(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 6, 5], |i| (i as f32 * 0.1).sin())).unwrap();
        let out = sarl.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(out.features), &[3, 4, 8]);
        assert_eq!(g.shape(out.cross_attention), &[6, 4, 6]);
        let maps = head_averaged(g.value(out.cross_attention), 2);
        for r in 0..maps.rows() {
            let s: f32 = maps.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_grid_shape_is_a_dimension_error() {
        let mut store = ParamStore::<f64>::new();
        let sarl = Sarl::new(tiny(), &mut store, &mut Rng::new(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 7, 5])).unwrap();
        assert!(matches!(sarl.forward(&mut g, &store, x), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn self_attention_toggle_changes_parameter_set() {
        let mut c = tiny();
        let mut with = ParamStore::<f64>::new();
        Sarl::new(c.clone(), &mut with, &mut Rng::new(0)).unwrap();
        c.query_self_attention = false;
        let mut without = ParamStore::<f64>::new();
        Sarl::new(c, &mut without, &mut Rng::new(0)).unwrap();
        assert!(without.len() < with.len());
        assert!(without.id("decoder.0.self_attention.query.weight").is_none());
    }
}
