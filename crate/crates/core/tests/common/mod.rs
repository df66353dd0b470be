#![allow(dead_code)]

use duostream_core::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(&mut rng))
}

/// Relative error with a floor on the denominator so that gradients that
/// are analytically ~0 are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference oracle: perturbs every element of every input by
/// `±h`, re-running `f` on a fresh graph each time. Returns the largest
/// relative error against the analytic gradients from one backward pass.
pub fn max_grad_error<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (ti, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).expect("leaf gradient").to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(a, numeric, floor));
        }
    }
    worst
}

/// `sum(out ⊙ R)` for a fixed pseudo-random `R`, so every output element
/// carries a distinct adjoint.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let r = randn(g.shape(out), seed);
    let r = g.constant(r);
    let prod = g.mul(out, r).unwrap();
    g.sum(prod).unwrap()
}

use duostream_core::model::{relative_bias_index, relative_table_len};
use duostream_core::{ParamRole, ParamStore};

pub fn scaled(t: Tensor, s: f64, offset: f64) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::new(shape, t.data().iter().map(|v| v * s + offset).collect()).unwrap()
}

/// Randomly initialised parameters for one standalone attention block
/// under the prefix `blk`.
pub fn lmhsa_store(c: usize, heads: usize, h: usize, w: usize, r: usize, seed: u64, with_bias: bool) -> ParamStore {
    let mut s = ParamStore::new();
    let mut k = seed * 1000;
    let mut next = |shape: &[usize], scale: f64, offset: f64| {
        k += 1;
        scaled(randn(shape, k), scale, offset)
    };
    s.insert("blk.norm.gamma", next(&[c], 0.2, 1.0), ParamRole::NoDecay).unwrap();
    s.insert("blk.norm.beta", next(&[c], 0.2, 0.0), ParamRole::NoDecay).unwrap();
    for p in ["q", "k", "v", "out"] {
        s.insert(format!("blk.{p}.weight"), next(&[c, c], 0.5, 0.0), ParamRole::Weight).unwrap();
        s.insert(format!("blk.{p}.bias"), next(&[c], 0.1, 0.0), ParamRole::Weight).unwrap();
    }
    if r > 1 {
        s.insert("blk.reduce.weight", next(&[c, 1, r, r], 0.5, 0.0), ParamRole::Weight).unwrap();
    }
    let table = if with_bias { next(&[heads, relative_table_len(h, w)], 0.3, 0.0) } else { Tensor::zeros([heads, relative_table_len(h, w)]) };
    s.insert("blk.rel_bias", table, ParamRole::NoDecay).unwrap();
    s
}

/// Dense multi-head attention written with direct loops: per-token layer
/// norm, Q/K/V projections, per-head softmax(QKᵀ/√d + B)·V, output
/// projection, residual. No key/value reduction (r = 1).
pub fn dense_attention_oracle(x: &Tensor, store: &ParamStore, heads: usize) -> Vec<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let l = h * w;
    let dk = c / heads;
    let p = |name: &str| store.tensor(name).unwrap().data().to_vec();
    let (gamma, beta) = (p("blk.norm.gamma"), p("blk.norm.beta"));
    let proj = |name: &str, t: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let (wt, b) = (p(&format!("blk.{name}.weight")), p(&format!("blk.{name}.bias")));
        t.iter()
            .map(|row| (0..c).map(|o| b[o] + (0..c).map(|i| wt[o * c + i] * row[i]).sum::<f64>()).collect())
            .collect()
    };
    let table = p("blk.rel_bias");
    let tlen = relative_table_len(h, w);
    let index = relative_bias_index(h, w, 1);
    let mut out = x.data().to_vec();
    for s in 0..n {
        let tokens: Vec<Vec<f64>> = (0..l).map(|t| (0..c).map(|ch| x.data()[(s * c + ch) * l + t]).collect()).collect();
        let normed: Vec<Vec<f64>> = tokens
            .iter()
            .map(|row| {
                let m = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
                row.iter().enumerate().map(|(j, v)| (v - m) / (var + 1e-6).sqrt() * gamma[j] + beta[j]).collect()
            })
            .collect();
        let (q, k, v) = (proj("q", &normed), proj("k", &normed), proj("v", &normed));
        let mut mixed = vec![vec![0.0; c]; l];
        for hd in 0..heads {
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| {
                        let dot: f64 = (0..dk).map(|d| q[i][hd * dk + d] * k[j][hd * dk + d]).sum();
                        dot / (dk as f64).sqrt() + table[hd * tlen + index[i * l + j]]
                    })
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..l {
                    let a = (scores[j] - mx).exp() / z;
                    for d in 0..dk {
                        mixed[i][hd * dk + d] += a * v[j][hd * dk + d];
                    }
                }
            }
        }
        let y = proj("out", &mixed);
        for t in 0..l {
            for ch in 0..c {
                out[(s * c + ch) * l + t] += y[t][ch];
            }
        }
    }
    out
}
