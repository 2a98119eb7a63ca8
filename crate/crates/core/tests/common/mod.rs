#![allow(dead_code)]

use moose::attention::{AttentionMask, MultiHeadAttention};
use moose::data::{generate, ClassSet, Dataset, SyntheticSpec};
use moose::model::MooseConfig;
use moose::params::{Linear, ParamStore};
use moose::tensor::Tensor;
use rand::Rng;

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared absolutely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = t.dims2().unwrap();
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].to_vec())
        .collect()
}

fn naive_linear(store: &ParamStore, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = store.tensor(l.weight);
    let b = l.bias.map(|b| store.tensor(b).data().to_vec());
    x.iter()
        .map(|row| {
            (0..l.out_dim)
                .map(|o| {
                    let mut acc = b.as_ref().map_or(0.0, |b| b[o]);
                    for (i, &xi) in row.iter().enumerate() {
                        acc += xi * w.data()[i * l.out_dim + o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Loop-by-loop multi-head attention for a single query/key sequence pair.
/// Returns the output rows and the per-head weight matrices.
pub fn naive_attention(
    store: &ParamStore,
    mha: &MultiHeadAttention,
    queries: &Tensor,
    keys: &Tensor,
    mask: Option<&AttentionMask>,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let q = naive_linear(store, &mha.q, &rows(queries));
    let k = naive_linear(store, &mha.k, &rows(keys));
    let v = naive_linear(store, &mha.v, &rows(keys));
    let dk = mha.dim / mha.heads;
    let mut concat = vec![vec![0.0; mha.dim]; q.len()];
    let mut all_weights = Vec::new();
    for h in 0..mha.heads {
        let mut weights = vec![vec![0.0; k.len()]; q.len()];
        for i in 0..q.len() {
            let mut logits = vec![f64::NEG_INFINITY; k.len()];
            for j in 0..k.len() {
                if mask.is_none_or(|m| m.allowed(i, j)) {
                    let mut s = 0.0;
                    for d in 0..dk {
                        s += q[i][h * dk + d] * k[j][h * dk + d];
                    }
                    logits[j] = s / (dk as f64).sqrt();
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits
                .iter()
                .map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 })
                .collect();
            let z: f64 = exps.iter().sum();
            for j in 0..k.len() {
                weights[i][j] = exps[j] / z;
                for d in 0..dk {
                    concat[i][h * dk + d] += weights[i][j] * v[j][h * dk + d];
                }
            }
        }
        all_weights.push(weights);
    }
    (naive_linear(store, &mha.o, &concat), all_weights)
}

/// 16×16 frames, 8-pixel patches, one block per pathway.
pub fn tiny_config(frames: usize) -> MooseConfig {
    MooseConfig {
        frames,
        width: 16,
        height: 16,
        patch: 8,
        spatial_dim: 8,
        spatial_layers: 1,
        spatial_heads: 2,
        temporal_dim: 4,
        temporal_layers: 1,
        temporal_heads: 2,
        num_classes: 4,
        ..MooseConfig::default()
    }
}

pub fn tiny_spec(frames: usize, classes: ClassSet) -> SyntheticSpec {
    SyntheticSpec {
        classes,
        frames,
        width: 16,
        height: 16,
        blob_radius: 3.0,
        ..SyntheticSpec::default()
    }
}

pub fn tiny_dataset(frames: usize, per_class: usize, seed: u64) -> Dataset {
    generate(&tiny_spec(frames, ClassSet::Directions), per_class, seed).unwrap()
}
