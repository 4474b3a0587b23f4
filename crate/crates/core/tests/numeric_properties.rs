use proptest::prelude::*;

use sadcl::gradcheck::{check_gradients, DEFAULT_STEP};
use sadcl::graph::Graph;
use sadcl::param::ParamStore;
use sadcl::rng::Rng;
use sadcl::Tensor;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 24,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    /// Batched attention-like chain: bmm, scale, softmax, bmm, permute,
    /// reshape, layer norm, GELU, sum.
    #[test]
    fn attention_chain_gradients(n in 1usize..=8, t in 1usize..=8, k in 1usize..=8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, &[n, t, k])).unwrap();
        let b = store.add("b", random(&mut rng, &[n, k, t])).unwrap();
        let weight = random(&mut rng, &[t, n, t]);
        let report = check_gradients(&mut store, |s, g| {
            let a = g.param(s, a)?;
            let b = g.param(s, b)?;
            let scores = g.bmm(a, b)?;
            let scores = g.scale(scores, 0.5)?;
            let w = g.softmax(scores)?;
            let ctx = g.bmm(w, a)?;
            let ctx = g.permute(ctx, &[1, 0, 2])?;
            let ctx = g.reshape(ctx, &[t * n, k])?;
            let ctx = g.layer_norm(ctx, 1e-5)?;
            let ctx = g.gelu(ctx)?;
            let summed = g.sum_axis(ctx, 1)?;
            let summed = g.reshape(summed, &[t, n])?;
            let w3 = g.constant(weight.clone())?;
            let w3 = g.sum_axis(w3, 2)?;
            let p = g.mul(summed, w3)?;
            g.sum(p)
        }, DEFAULT_STEP, 1e-4).unwrap();
        prop_assert!(report.passed(), "max relative error {}", report.max_rel_error());
    }

    /// Dense chain: linear, broadcast add and multiply, sigmoid, log,
    /// exp, normalize, concat, gather, masked log-sum-exp, mean.
    #[test]
    fn dense_chain_gradients(r in 1usize..=8, c in 1usize..=8, o in 1usize..=8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, &[r, c])).unwrap();
        let w = store.add("w", random(&mut rng, &[c, o])).unwrap();
        let b = store.add("b", random(&mut rng, &[o])).unwrap();
        let mask: Vec<bool> = (0..2 * r * o).map(|k| k % o == 0 || rng.uniform() < 0.6).collect();
        let rows: Vec<usize> = (0..r).map(|_| rng.below(2 * r)).collect();
        let report = check_gradients(&mut store, |s, g| {
            let x = g.param(s, x)?;
            let w = g.param(s, w)?;
            let b = g.param(s, b)?;
            let y = g.linear(x, w)?;
            let y = g.add_broadcast(y, b)?;
            let sg = g.sigmoid(y)?;
            let ls = g.log(sg)?;
            let e = g.scale(y, 0.3)?;
            let e = g.exp(e)?;
            let m = g.mul_broadcast(e, b)?;
            let both = g.concat(&[ls, m], 0)?;
            let picked = g.gather_rows(both, &rows)?;
            let unit = g.l2_normalize(picked)?;
            let lse = g.masked_logsumexp(both, &mask)?;
            let a = g.mean(lse)?;
            let u = g.sum(unit)?;
            let u = g.affine(u, 0.7, 0.1)?;
            g.add(a, u)
        }, DEFAULT_STEP, 1e-4).unwrap();
        prop_assert!(report.passed(), "max relative error {}", report.max_rel_error());
    }

    #[test]
    fn softmax_rows_sum_to_one(n in 1usize..=8, t in 1usize..=8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::from_fn(&[n, t], |_| 20.0 * rng.normal());
        let s = x.softmax_last();
        for i in 0..n {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalized_rows_have_unit_length(n in 1usize..=8, d in 1usize..=8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::from_fn(&[n, d], |_| 1.0 + rng.normal());
        prop_assume!(x.data().chunks(d).all(|r| r.iter().any(|&v| v != 0.0)));
        let y = x.l2_normalize().unwrap();
        for i in 0..n {
            prop_assert!((y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn repeated_backward_doubles_gradients_of_a_deep_graph() {
    let mut rng = Rng::new(5);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, &[4, 4])).unwrap();
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, &[3, 4])).unwrap();
    let wv = g.param(&store, w).unwrap();
    let y = g.linear(x, wv).unwrap();
    let y = g.softmax(y).unwrap();
    let out = g.sum(y).unwrap();
    let out = g.mul(out, out).unwrap();
    g.backward(out, &mut store).unwrap();
    let once = store.grad(w).clone();
    g.backward(out, &mut store).unwrap();
    for (a, b) in store.grad(w).data().iter().zip(once.data()) {
        assert_eq!(*a, 2.0 * b);
    }
}
