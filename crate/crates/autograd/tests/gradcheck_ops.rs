//! Every differentiable op checked against central finite differences in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ross_autograd::gradcheck::check_params;
use ross_autograd::{Graph, ParamStore, Tensor, TensorError, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces any tensor to a scalar through a fixed random weighting so that
/// every output element carries a distinct gradient.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let m = g.mul(x, w)?;
    Ok(g.mean(m))
}

fn assert_ok(name: &str, store: &ParamStore<f64>, f: impl FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, TensorError>) {
    let report = check_params(store, H, f).unwrap();
    for t in &report.tensors {
        assert!(
            t.rel_error <= TOL,
            "{name}: {} rel error {:.3e}",
            t.name,
            t.rel_error
        );
        assert!(t.numeric_norm > 0.0, "{name}: {} has zero gradient", t.name);
    }
}

#[test]
fn linear_with_bias() {
    let mut s = ParamStore::new();
    let mut r = rng(1);
    let x = s.randn("x", &[2, 3, 4], 1.0, &mut r);
    let w = s.randn("w", &[4, 5], 1.0, &mut r);
    let b = s.randn("b", &[5], 1.0, &mut r);
    assert_ok("linear", &s, |s, g| {
        let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
        let y = g.linear(x, w, Some(b))?;
        probe(g, y, 9)
    });
}

#[test]
fn transposed_linear_matches_explicit_transpose() {
    let mut s = ParamStore::new();
    let mut r = rng(11);
    let x = s.randn("x", &[2, 3, 4], 1.0, &mut r);
    let w = s.randn("w", &[6, 4], 1.0, &mut r);
    assert_ok("linear_t", &s, |s, g| {
        let (x, w) = (g.param(s, x), g.param(s, w));
        let y = g.linear_t(x, w)?;
        probe(g, y, 10)
    });
    let wv = s.get(w);
    let mut wt = vec![0.0; 24];
    for i in 0..6 {
        for j in 0..4 {
            wt[j * 6 + i] = wv.data()[i * 4 + j];
        }
    }
    let mut g = Graph::new();
    let xv = g.constant(s.get(x).clone());
    let wv = g.constant(wv.clone());
    let wtv = g.constant(Tensor::from_vec(&[4, 6], wt).unwrap());
    let a = g.linear_t(xv, wv).unwrap();
    let b = g.linear(xv, wtv, None).unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
}

#[test]
fn elementwise_and_activations() {
    let mut s = ParamStore::new();
    let mut r = rng(2);
    let a = s.randn("a", &[3, 4], 1.0, &mut r);
    let b = s.randn("b", &[3, 4], 1.0, &mut r);
    assert_ok("elementwise", &s, |s, g| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let x = g.mul(a, b)?;
        let y = g.sub(x, b)?;
        let z = g.gelu(y);
        let w = g.sigmoid(a);
        let u = g.add(z, w)?;
        let v = g.scale(u, 0.7);
        probe(g, v, 3)
    });
}

#[test]
fn broadcasts() {
    let mut s = ParamStore::new();
    let mut r = rng(3);
    let a = s.randn("a", &[2, 3, 4], 1.0, &mut r);
    let pos = s.randn("pos", &[3, 4], 1.0, &mut r);
    let per = s.randn("per", &[2, 4], 1.0, &mut r);
    assert_ok("broadcast", &s, |s, g| {
        let (a, pos, per) = (g.param(s, a), g.param(s, pos), g.param(s, per));
        let x = g.add_broadcast(a, pos)?;
        let y = g.add_per_item(x, per)?;
        probe(g, y, 4)
    });
}

#[test]
fn layer_norm() {
    let mut s = ParamStore::new();
    let mut r = rng(4);
    let x = s.randn("x", &[5, 6], 2.0, &mut r);
    let gamma = s.randn("gamma", &[6], 1.0, &mut r);
    let beta = s.randn("beta", &[6], 1.0, &mut r);
    assert_ok("layer_norm", &s, |s, g| {
        let (x, ga, be) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
        let y = g.layer_norm(x, ga, be)?;
        probe(g, y, 5)
    });
}

#[test]
fn embedding_concat_slice_reshape() {
    let mut s = ParamStore::new();
    let mut r = rng(5);
    let table = s.randn("table", &[6, 4], 1.0, &mut r);
    let other = s.randn("other", &[2, 2, 4], 1.0, &mut r);
    assert_ok("gather", &s, |s, g| {
        let (t, o) = (g.param(s, table), g.param(s, other));
        let e = g.embedding(t, &[0, 3, 3, 5, 1, 0], &[2, 3])?;
        let c = g.concat_seq(&[o, e])?;
        let sl = g.slice_seq(c, 1, 4)?;
        let rs = g.reshape(sl, &[6, 4])?;
        probe(g, rs, 6)
    });
}

#[test]
fn attention_causal_bidirectional_and_masked() {
    for (causal, masked) in [(true, false), (false, false), (false, true), (true, true)] {
        let mut s = ParamStore::new();
        let mut r = rng(6);
        let q = s.randn("q", &[2, 5, 4], 1.0, &mut r);
        let k = s.randn("k", &[2, 5, 4], 1.0, &mut r);
        let v = s.randn("v", &[2, 5, 4], 1.0, &mut r);
        let mask: Vec<bool> = (0..10).map(|i| i % 5 != 3).collect();
        assert_ok("attention", &s, |s, g| {
            let (q, k, v) = (g.param(s, q), g.param(s, k), g.param(s, v));
            let y = g.attention(q, k, v, 2, causal, masked.then_some(mask.as_slice()))?;
            probe(g, y, 7)
        });
    }
}

#[test]
fn losses() {
    let mut s = ParamStore::new();
    let mut r = rng(7);
    let logits = s.randn("logits", &[4, 5], 1.0, &mut r);
    let a = s.randn("a", &[3, 4], 1.0, &mut r);
    let b = s.randn("b", &[3, 4], 1.0, &mut r);
    assert_ok("losses", &s, |s, g| {
        let (l, a, b) = (g.param(s, logits), g.param(s, a), g.param(s, b));
        let ce = g.cross_entropy(l, &[1, 0, 4, 2], &[1.0, 0.0, 1.0, 1.0])?;
        let mse = g.mse(a, b)?;
        let cos = g.cosine_loss(a, b)?;
        let x = g.add(ce, mse)?;
        g.add(x, cos)
    });
}

#[test]
fn straight_through_passes_gradient() {
    let mut s = ParamStore::new();
    let z = s.randn("z", &[2, 3], 1.0, &mut rng(8));
    let mut g = Graph::new();
    let zv = g.param(&s, z);
    let st = g.straight_through(zv, Tensor::zeros(&[2, 3])).unwrap();
    assert_eq!(g.value(st).data(), &[0.0; 6]);
    let loss = g.mean(st);
    let grads = g.backward(loss).unwrap();
    let gz = grads.param(&s, z).unwrap();
    assert!(gz.data().iter().all(|&x: &f64| (x - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn zero_scale_contributes_no_gradient() {
    let mut s = ParamStore::new();
    let a = s.randn("a", &[3], 1.0, &mut rng(9));
    let mut g = Graph::new();
    let av = g.param(&s, a);
    let m = g.mean(av);
    let z = g.scale(m, 0.0);
    let grads = g.backward(z).unwrap();
    assert!(grads.param(&s, a).is_none());
}

#[test]
fn attention_rows_sum_to_one() {
    let mut g = Graph::<f64>::new();
    let mut r = rng(10);
    let q = g.constant(Tensor::randn(&[1, 4, 4], 1.0, &mut r));
    let out = g.attention(q, q, q, 2, true, None).unwrap();
    let (probs, [_, h, l, _]) = g.attention_probs(out).unwrap();
    for row in probs.chunks(l).take(h * l) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // Causal: first query sees only itself.
    assert_eq!(probs[0], 1.0);
}
