//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numeric code paths.

#![allow(dead_code)]

use centroid_recal::graph::{Graph, NodeId};
use centroid_recal::model::{model_forward, BoundParams, Merge, ModelConfig, ModelParams};
use centroid_recal::rng::SplitMix64;
use centroid_recal::{CentroidTable, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    t.rows_vec()
}

pub fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let k = b.len();
    let p = if k == 0 { 0 } else { b[0].len() };
    let mut c = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i][kk] * b[kk][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn naive_transpose(a: &Mat) -> Mat {
    if a.is_empty() {
        return vec![];
    }
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

/// exp/sum softmax without max subtraction.
pub fn naive_softmax(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let e: Vec<f64> = r.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn naive_linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    naive_matmul(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

/// Mean of `log Σ exp(z) − z[label]`, log-sum-exp taken directly.
pub fn naive_cross_entropy(z: &Mat, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &l) in z.iter().zip(labels) {
        let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - r[l];
    }
    total / labels.len() as f64
}

/// Recalibration block composed from the naive pieces.
pub fn naive_cafe(e: &Mat, centroids: &Mat, p: &ModelParams, scaled: bool) -> (Mat, Mat) {
    let a = p.attention.as_ref().expect("attention params");
    let q = naive_linear(e, &to_mat(&a.query.weight), a.query.bias.data());
    let k = naive_linear(centroids, &to_mat(&a.key.weight), a.key.bias.data());
    let v = naive_linear(centroids, &to_mat(&a.value.weight), a.value.bias.data());
    let mut scores = naive_matmul(&q, &naive_transpose(&k));
    if scaled {
        let s = 1.0 / (e[0].len() as f64).sqrt();
        for r in &mut scores {
            for x in r {
                *x *= s;
            }
        }
    }
    let attn = naive_softmax(&scores);
    (naive_matmul(&attn, &v), attn)
}

/// Backbone pre-activations of every hidden layer, naive route.
pub fn naive_preactivations(x: &Mat, p: &ModelParams) -> Vec<Mat> {
    let mut h = x.clone();
    let mut out = Vec::new();
    let last = p.backbone.len() - 1;
    for (i, l) in p.backbone.iter().enumerate() {
        let z = naive_linear(&h, &to_mat(&l.weight), l.bias.data());
        if i < last {
            out.push(z.clone());
            h = z
                .iter()
                .map(|r| r.iter().map(|v| v.max(0.0)).collect())
                .collect();
        } else {
            h = z;
        }
    }
    out
}

/// Random tensor with entries `scale·N(0,1)`.
pub fn random_tensor(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| scale * rng.normal()).collect(),
    )
    .unwrap()
}

pub fn random_config(rng: &mut SplitMix64, merge: Merge) -> ModelConfig {
    let d_in = 1 + rng.below(16);
    let embed_dim = 1 + rng.below(8);
    let classes = 2 + rng.below(3);
    let hidden = (0..rng.below(3)).map(|_| 1 + rng.below(8)).collect();
    ModelConfig {
        d_in,
        hidden,
        embed_dim,
        classes,
        merge,
        seed: rng.next_u64(),
        scaled_attention: false,
    }
}

/// A batch whose hidden pre-activations all stay at least `margin` away
/// from the relu kink. Redraws until that holds.
pub fn kink_free_batch(
    rng: &mut SplitMix64,
    p: &ModelParams,
    rows: usize,
    d_in: usize,
    margin: f64,
) -> Tensor {
    loop {
        let x = random_tensor(rng, rows, d_in, 1.0);
        let pre = naive_preactivations(&to_mat(&x), p);
        if pre.iter().flatten().flatten().all(|v| v.abs() >= margin) {
            return x;
        }
    }
}

/// Loss closure for gradient checking the whole model.
pub fn model_loss(
    config: &ModelConfig,
    layout: &ModelParams,
    x: &Tensor,
    centroids: &Tensor,
    labels: &[usize],
) -> impl Fn(&mut Graph, &[NodeId]) -> centroid_recal::Result<NodeId> {
    let config = config.clone();
    let layout = layout.clone();
    let x = x.clone();
    let centroids = centroids.clone();
    let labels = labels.to_vec();
    move |g, ids| {
        let bound = BoundParams::from_ids(&layout, ids)?;
        let fwd = model_forward(g, &x, &bound, &config, &centroids)?;
        g.cross_entropy(fwd.logits, &labels)
    }
}

/// Brute-force per-class sums and counts over rows in order.
pub fn class_sums(
    rows: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    dim: usize,
) -> (Mat, Vec<u64>) {
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0u64; classes];
    for (r, &l) in rows.iter().zip(labels) {
        for d in 0..dim {
            sums[l][d] += r[d];
        }
        counts[l] += 1;
    }
    (sums, counts)
}

pub fn table_centroids(t: &CentroidTable) -> Mat {
    to_mat(t.centroids())
}

/// Quadratic weighted kappa written straight from its definition, with
/// observed and expected matrices normalized to proportions.
pub fn kappa_oracle(o: &[Vec<u64>]) -> f64 {
    let m = o.len();
    let n: f64 = o.iter().flatten().map(|&v| v as f64).sum();
    let hist_true: Vec<f64> = o
        .iter()
        .map(|r| r.iter().map(|&v| v as f64).sum())
        .collect();
    let hist_pred: Vec<f64> = (0..m)
        .map(|j| o.iter().map(|r| r[j] as f64).sum())
        .collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m {
        for j in 0..m {
            let w = ((i as f64 - j as f64) / (m as f64 - 1.0)).powi(2);
            num += w * o[i][j] as f64 / n;
            den += w * (hist_true[i] / n) * (hist_pred[j] / n);
        }
    }
    if den == 0.0 {
        1.0
    } else {
        1.0 - num / den
    }
}

/// Plain Adam written from the update equations.
pub struct RefAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl RefAdam {
    pub fn new() -> Self {
        RefAdam {
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn update(&mut self, theta: f64, g: f64, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t));
        let vh = self.v / (1.0 - b2.powi(self.t));
        theta - lr * mh / (vh.sqrt() + eps)
    }
}
