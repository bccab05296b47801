//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::PathBuf;

use fedreplay::client::LocalUpdate;
use fedreplay::nnkernel::{
    cross_entropy, head_forward, loss_and_gradients, HeadDims, HeadParams, Tensor2,
};
use fedreplay::orchestrator::FedConfig;
use fedreplay::ClientId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;

pub fn small_dims() -> HeadDims {
    HeadDims {
        d_in: 12,
        d_model: 16,
        d_ff: 32,
        n_layers: 2,
        n_classes: 5,
    }
}

pub fn random_problem(seed: u64, rows: usize) -> (HeadParams, Tensor2, Vec<u32>) {
    let dims = small_dims();
    let mut params = HeadParams::init(dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    // Non-trivial biases and norm parameters so every path carries signal.
    for t in params.tensors_mut() {
        if t.len() <= dims.d_ff {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    let data = (0..rows * dims.d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = Tensor2::from_vec(rows, dims.d_in, data).unwrap();
    let labels = (0..rows).map(|_| rng.random_range(0..dims.n_classes as u32)).collect();
    (params, batch, labels)
}

pub fn loss_at(params: &HeadParams, batch: &Tensor2, labels: &[u32]) -> f64 {
    let out = head_forward(params, batch).unwrap();
    cross_entropy(&out.logits, labels).unwrap().0
}

/// Per-tensor norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the
/// analytic gradient `a` and the central-difference estimate `n`; returns the
/// worst tensor. Tensors whose gradients are both exactly zero score 0.
pub fn max_relative_error(seed: u64) -> (f64, String) {
    let (params, batch, labels) = random_problem(seed, 8);
    let (_, grads) = loss_and_gradients(&params, &batch, &labels).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|s| s.to_vec()).collect();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();

    let mut worst = (0.0, String::new());
    for (ti, name) in names.iter().enumerate() {
        let numeric: Vec<f64> = (0..analytic[ti].len())
            .map(|k| {
                let mut plus = params.clone();
                plus.tensors_mut()[ti][k] += H;
                let mut minus = params.clone();
                minus.tensors_mut()[ti][k] -= H;
                (loss_at(&plus, &batch, &labels) - loss_at(&minus, &batch, &labels)) / (2.0 * H)
            })
            .collect();
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut analytic[ti].iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(&mut analytic[ti].iter().copied()).max(norm(&mut numeric.iter().copied()));
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, format!("{name} (grad norm {scale:e})"));
        }
    }
    worst
}

/// Element-by-element mean written as plain nested loops.
pub fn naive_mean(params: &[HeadParams]) -> Vec<Vec<f64>> {
    let k = params.len() as f64;
    let tensors: Vec<Vec<&[f64]>> = params.iter().map(|p| p.tensors()).collect();
    let mut out = Vec::new();
    for t in 0..tensors[0].len() {
        let mut v = vec![0.0; tensors[0][t].len()];
        for j in 0..v.len() {
            let mut s = 0.0;
            for p in &tensors {
                s += p[t][j];
            }
            v[j] = s / k;
        }
        out.push(v);
    }
    out
}

pub fn update(id: usize, params: HeadParams) -> LocalUpdate {
    LocalUpdate {
        client: ClientId(id),
        params,
        n_samples: 1,
        steps: Vec::new(),
    }
}

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn scenario(name: &str) -> FedConfig {
    FedConfig::load(&scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Softmax regression trained by full-batch gradient descent; returns
/// holdout accuracy. Independent of the head and its optimizer.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[u32],
    test_x: &[Vec<f64>],
    test_y: &[u32],
    n_classes: usize,
    epochs: usize,
    lr: f64,
) -> f64 {
    let d = train_x[0].len();
    let mut w = vec![vec![0.0; d + 1]; n_classes];
    let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|row| row[d] + row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    let n = train_x.len() as f64;
    for _ in 0..epochs {
        let mut grad = vec![vec![0.0; d + 1]; n_classes];
        for (x, &y) in train_x.iter().zip(train_y) {
            let s = scores(&w, x);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..n_classes {
                let g = e[c] / z - if c as u32 == y { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += g * x[j];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..n_classes {
            for j in 0..=d {
                w[c][j] -= lr * grad[c][j] / n;
            }
        }
    }
    let mut hits = 0;
    for (x, &y) in test_x.iter().zip(test_y) {
        let s = scores(&w, x);
        let mut best = 0;
        for c in 1..n_classes {
            if s[c] > s[best] {
                best = c;
            }
        }
        hits += usize::from(best as u32 == y);
    }
    hits as f64 / test_x.len() as f64
}
