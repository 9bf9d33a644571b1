//! Scalar-loop reference implementations and random instance generators.
//!
//! Nothing here calls into the matrix or tape code under test: forward passes
//! and losses are written as plain nested loops over `Vec<Vec<f64>>`.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symnets::losses::{LabeledBatch, UnlabeledBatch};
use symnets::model::{BaselineNet, Dense, ModelConfig, SymNet};
use symnets::Matrix;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix) -> Rows {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect())
        .collect()
}

pub fn dense(x: &Rows, layer: &Dense) -> Rows {
    let w = rows(&layer.weight);
    let b = rows(&layer.bias);
    x.iter()
        .map(|xi| {
            (0..w.len())
                .map(|o| {
                    let mut acc = b[0][o];
                    for (k, xk) in xi.iter().enumerate() {
                        acc += xk * w[o][k];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn relu(x: Rows) -> Rows {
    x.into_iter()
        .map(|r| r.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect())
        .collect()
}

pub fn features(layers: &[Dense], x: &Rows) -> Rows {
    let mut h = x.clone();
    for l in layers {
        h = relu(dense(&h, l));
    }
    h
}

pub fn softmax_row(v: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in v {
        if x > m {
            m = x;
        }
    }
    let mut total = 0.0;
    let mut e = Vec::with_capacity(v.len());
    for &x in v {
        let t = (x - m).exp();
        total += t;
        e.push(t);
    }
    e.into_iter().map(|t| t / total).collect()
}

fn joined(vs: &[f64], vt: &[f64]) -> Vec<f64> {
    let mut j = vs.to_vec();
    j.extend_from_slice(vt);
    softmax_row(&j)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for x in xs {
        s += x;
        n += 1.0;
    }
    s / n
}

pub fn cross_entropy(logits: &Rows, labels: &[usize]) -> f64 {
    mean(logits.iter().zip(labels).map(|(r, &y)| -softmax_row(r)[y].ln()))
}

/// Source and target half masses of the 2K-way distribution for one row.
fn halves(vs: &[f64], vt: &[f64]) -> (f64, f64) {
    let p = joined(vs, vt);
    let k = vs.len();
    (p[..k].iter().sum(), p[k..].iter().sum())
}

pub fn domain_discrimination(src: (&Rows, &Rows), tgt: (&Rows, &Rows)) -> f64 {
    let t = mean(tgt.0.iter().zip(tgt.1).map(|(a, b)| halves(a, b).1.ln()));
    let s = mean(src.0.iter().zip(src.1).map(|(a, b)| halves(a, b).0.ln()));
    -t - s
}

pub fn category_confusion(vs: &Rows, vt: &Rows, labels: &[usize]) -> f64 {
    let k = vs[0].len();
    let upper = mean(
        vs.iter()
            .zip(vt)
            .zip(labels)
            .map(|((a, b), &y)| joined(a, b)[y + k].ln()),
    );
    let lower = mean(
        vs.iter()
            .zip(vt)
            .zip(labels)
            .map(|((a, b), &y)| joined(a, b)[y].ln()),
    );
    -0.5 * upper - 0.5 * lower
}

/// Even-split confusion of the two halves, averaged over the given rows.
pub fn half_confusion(vs: &Rows, vt: &Rows) -> f64 {
    let t = mean(vs.iter().zip(vt).map(|(a, b)| halves(a, b).1.ln()));
    let s = mean(vs.iter().zip(vt).map(|(a, b)| halves(a, b).0.ln()));
    -0.5 * t - 0.5 * s
}

pub fn merged_entropy(vs: &Rows, vt: &Rows) -> f64 {
    let k = vs[0].len();
    mean(vs.iter().zip(vt).map(|(a, b)| {
        let p = joined(a, b);
        let mut h = 0.0;
        for c in 0..k {
            let q = p[c] + p[c + k];
            h -= q * q.ln();
        }
        h
    }))
}

pub fn single_entropy(v: &Rows) -> f64 {
    mean(v.iter().map(|r| {
        let p = softmax_row(r);
        -p.iter().map(|q| q * q.ln()).sum::<f64>()
    }))
}

pub fn two_head_supervised(vs: &Rows, vt: &Rows, labels: &[usize]) -> f64 {
    0.5 * (cross_entropy(vs, labels) + cross_entropy(vt, labels))
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `z` holds raw discriminator scores, one per row.
pub fn discriminator(zs: &[f64], zt: &[f64]) -> f64 {
    -mean(zs.iter().map(|&z| (1.0 - sig(z)).ln())) - mean(zt.iter().map(|&z| sig(z).ln()))
}

pub fn confusion(zs: &[f64], zt: &[f64]) -> f64 {
    0.5 * discriminator(zs, zt)
        - 0.5 * mean(zs.iter().map(|&z| sig(z).ln()))
        - 0.5 * mean(zt.iter().map(|&z| (1.0 - sig(z)).ln()))
}

/// A small random problem within B ≤ 8, K ≤ 5, d ≤ 8.
pub struct Instance {
    pub config: ModelConfig,
    pub symnet: SymNet,
    pub baseline: BaselineNet,
    pub src: LabeledBatch,
    pub tgt: UnlabeledBatch,
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.random_range(2..=8);
    let k = rng.random_range(2..=5);
    let d = rng.random_range(2..=8);
    let hidden = rng.random_range(2..=8);
    let feat = rng.random_range(2..=8);
    let config = ModelConfig::new(d, feat, k).with_hidden(vec![hidden]);
    let mut symnet = SymNet::init(&config, seed).unwrap();
    let mut baseline = BaselineNet::init(&config, seed).unwrap();
    // Zero biases put whole rows exactly on the ReLU kink when a hidden layer
    // is fully dead, which finite differences cannot handle.
    for l in &mut symnet.g.layers {
        l.bias = random_matrix(&mut rng, 1, l.bias.cols(), 0.5);
    }
    symnet.cs.layer.bias = random_matrix(&mut rng, 1, k, 0.5);
    symnet.ct.layer.bias = random_matrix(&mut rng, 1, k, 0.5);
    for l in &mut baseline.g.layers {
        l.bias = random_matrix(&mut rng, 1, l.bias.cols(), 0.5);
    }
    baseline.head.layer.bias = random_matrix(&mut rng, 1, k, 0.5);
    baseline.disc.layer.bias = random_matrix(&mut rng, 1, 1, 0.5);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let src = LabeledBatch::new(random_matrix(&mut rng, b, d, 1.5), labels).unwrap();
    let tgt = UnlabeledBatch::new(random_matrix(&mut rng, b, d, 1.5)).unwrap();
    Instance {
        config,
        symnet,
        baseline,
        src,
        tgt,
    }
}

/// Logits `(v_s, v_t)` of the SymNet heads via scalar loops.
pub fn symnet_logits(m: &SymNet, x: &Matrix) -> (Rows, Rows) {
    let f = features(&m.g.layers, &rows(x));
    (dense(&f, &m.cs.layer), dense(&f, &m.ct.layer))
}

pub fn column(v: &Rows) -> Vec<f64> {
    v.iter().map(|r| r[0]).collect()
}
