//! The f32 forward pass against a direct f64 transcription of pre-norm
//! causal self-attention.

use simcal_core::model::{forward, forward_with, LayerReadout, ModelWeights, INIT_SCALE};
use simcal_core::{ModelShape, XorShift64Star};

fn randomize(w: &mut ModelWeights, seed: u64, scale: f64) {
    let mut rng = XorShift64Star::new(seed);
    let mut fill = |t: &mut Vec<f32>, offset: f64| {
        for v in t.iter_mut() {
            *v = (offset + rng.next_gaussian() * scale) as f32;
        }
    };
    fill(&mut w.token_embedding, 0.0);
    fill(&mut w.position_embedding, 0.0);
    for l in &mut w.layers {
        fill(&mut l.ln1_gain, 1.0);
        fill(&mut l.ln1_bias, 0.0);
        fill(&mut l.w_q, 0.0);
        fill(&mut l.w_k, 0.0);
        fill(&mut l.w_v, 0.0);
        fill(&mut l.w_o, 0.0);
        fill(&mut l.ln2_gain, 1.0);
        fill(&mut l.ln2_bias, 0.0);
        fill(&mut l.w_fc, 0.0);
        fill(&mut l.b_fc, 0.0);
        fill(&mut l.w_proj, 0.0);
        fill(&mut l.b_proj, 0.0);
    }
    fill(&mut w.final_gain, 1.0);
    fill(&mut w.final_bias, 0.0);
}

fn f(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (0..x.len())
        .map(|i| (x[i] - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

/// `x · W` with `W` stored row-major as `[rows][cols]`.
fn mul(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|c| (0..x.len()).map(|r| x[r] * w[r * cols + c]).sum())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Returns `[layer][position][dim]`.
fn oracle(ids: &[u32], w: &ModelWeights, final_norm: bool) -> Vec<Vec<Vec<f64>>> {
    let s = w.shape;
    let h = s.dim;
    let hd = h / s.heads;
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            let id = id as usize;
            (0..h)
                .map(|d| {
                    f64::from(w.token_embedding[id * h + d])
                        + f64::from(w.position_embedding[t * h + d])
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for (li, l) in w.layers.iter().enumerate() {
        let a: Vec<Vec<f64>> = x
            .iter()
            .map(|v| ln(v, &f(&l.ln1_gain), &f(&l.ln1_bias)))
            .collect();
        let q: Vec<Vec<f64>> = a.iter().map(|v| mul(v, &f(&l.w_q), h)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|v| mul(v, &f(&l.w_k), h)).collect();
        let vv: Vec<Vec<f64>> = a.iter().map(|v| mul(v, &f(&l.w_v), h)).collect();
        let mut attn = vec![vec![0.0; h]; ids.len()];
        for i in 0..ids.len() {
            for head in 0..s.heads {
                let lo = head * hd;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (lo..lo + hd).map(|d| q[i][d] * k[j][d]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for j in 0..=i {
                    for d in lo..lo + hd {
                        attn[i][d] += scores[j].exp() / z * vv[j][d];
                    }
                }
            }
        }
        for i in 0..ids.len() {
            let o = mul(&attn[i], &f(&l.w_o), h);
            for d in 0..h {
                x[i][d] += o[d];
            }
            let m = ln(&x[i], &f(&l.ln2_gain), &f(&l.ln2_bias));
            let hidden: Vec<f64> = mul(&m, &f(&l.w_fc), 4 * h)
                .iter()
                .zip(f(&l.b_fc))
                .map(|(v, b)| gelu(v + b))
                .collect();
            let p = mul(&hidden, &f(&l.w_proj), h);
            for d in 0..h {
                x[i][d] += p[d] + f64::from(l.b_proj[d]);
            }
        }
        let last = li + 1 == w.layers.len();
        out.push(
            x.iter()
                .map(|v| {
                    if last && final_norm {
                        ln(v, &f(&w.final_gain), &f(&w.final_bias))
                    } else {
                        v.clone()
                    }
                })
                .collect(),
        );
    }
    out
}

fn compare(shape: ModelShape, ids: &[u32], seed: u64) {
    let mut w = ModelWeights::zeroed(shape).unwrap();
    randomize(&mut w, seed, 0.5);
    for (readout, final_norm) in [
        (LayerReadout::FinalNormOnLast, true),
        (LayerReadout::Residual, false),
    ] {
        let acts = forward_with(ids, &w, readout).unwrap();
        let expect = oracle(ids, &w, final_norm);
        for (l, layer) in expect.iter().enumerate() {
            for (t, v) in layer.iter().enumerate() {
                for (d, &e) in v.iter().enumerate() {
                    let got = f64::from(acts.vector(l, t)[d]);
                    assert!(
                        (got - e).abs() <= 1e-5 * (1.0 + e.abs()),
                        "layer {l} pos {t} dim {d}: {got} vs {e}"
                    );
                }
            }
        }
    }
}

#[test]
fn single_layer_single_head_two_tokens() {
    let shape = ModelShape {
        layers: 1,
        context: 2,
        dim: 4,
        vocab: 3,
        heads: 1,
    };
    for seed in 0..5 {
        compare(shape, &[2, 0], seed);
    }
}

#[test]
fn stacked_multi_head() {
    let shape = ModelShape {
        layers: 3,
        context: 6,
        dim: 8,
        vocab: 10,
        heads: 2,
    };
    compare(shape, &[1, 9, 4, 4, 0, 7], 11);
}

#[test]
fn default_readout_is_final_norm_on_last() {
    let shape = ModelShape {
        layers: 2,
        context: 4,
        dim: 8,
        vocab: 5,
        heads: 2,
    };
    let w = ModelWeights::random(shape, 3).unwrap();
    let a = forward(&[1, 2, 3], &w).unwrap();
    let b = forward_with(&[1, 2, 3], &w, LayerReadout::FinalNormOnLast).unwrap();
    assert_eq!(a, b);
}

#[test]
fn random_init_statistics() {
    let shape = ModelShape {
        layers: 6,
        context: 256,
        dim: 128,
        vocab: 388,
        heads: 8,
    };
    let w = ModelWeights::random(shape, 9).unwrap();
    let mut all: Vec<f64> = f(&w.token_embedding);
    for l in &w.layers {
        for t in [&l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.w_fc, &l.w_proj] {
            all.extend(f(t));
        }
    }
    let n = all.len() as f64;
    assert!(n > 1e6);
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sigma = f64::from(INIT_SCALE);
    // Five standard errors of each estimate.
    assert!(mean.abs() < 5.0 * sigma / n.sqrt(), "mean {mean}");
    assert!(
        (std - sigma).abs() < 5.0 * sigma / (2.0 * n).sqrt(),
        "std {std}"
    );
    assert!(w
        .layers
        .iter()
        .all(|l| l.ln1_gain.iter().all(|&g| g == 1.0)));
}
