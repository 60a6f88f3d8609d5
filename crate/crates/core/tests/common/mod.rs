//! Straight-line reference implementations used as test oracles. Nothing
//! here goes through the tape; every formula is written out with loops.
#![allow(dead_code)]

use kgclip_core::graph::Relation;
use kgclip_core::model::TripletModel;
use kgclip_core::rng::SplitMix64;

pub type Mat = Vec<Vec<f64>>;

pub fn rand_vec(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
    (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect()
}

pub fn rand_mat(rows: usize, cols: usize, rng: &mut SplitMix64) -> Mat {
    (0..rows).map(|_| rand_vec(cols, rng)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn param(model: &TripletModel, name: &str) -> (Vec<usize>, Vec<f64>) {
    let t = model.param(name).unwrap_or_else(|| panic!("no parameter {name}"));
    (t.shape().to_vec(), t.data().to_vec())
}

fn mat_param(model: &TripletModel, name: &str) -> Mat {
    let (s, d) = param(model, name);
    d.chunks(s[1]).map(<[f64]>::to_vec).collect()
}

fn vec_param(model: &TripletModel, name: &str) -> Vec<f64> {
    param(model, name).1
}

/// `x·W + b` for a row vector.
fn affine(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w[i][j];
        }
    }
    out
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (gi, bi))| (v - mu) / (var + eps).sqrt() * gi + bi)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Encoder on one `[h, r_head, r_tail, t]` sequence; returns the four outputs.
pub fn encode(model: &TripletModel, h: &[f64], r: &[f64], t: &[f64]) -> Mat {
    let cfg = *model.config();
    let (d, heads) = (cfg.dim, cfg.heads);
    let dh = d / heads;
    let x: Mat = vec![h.to_vec(), r[..d].to_vec(), r[d..].to_vec(), t.to_vec()];
    let p = mat_param(model, "positional");
    let y: Mat = (0..4).map(|i| (0..d).map(|j| x[i][j] + p[i][j]).collect()).collect();
    let mut s = y.clone();
    for l in 0..cfg.layers {
        let name = |n: &str| format!("block{l}.{n}");
        let (g1, b1) = (vec_param(model, &name("ln1_gain")), vec_param(model, &name("ln1_bias")));
        let a: Mat = s.iter().map(|row| layer_norm(row, &g1, &b1, cfg.ln_eps)).collect();
        let proj = |w: &str, b: &str| -> Mat {
            let (w, b) = (mat_param(model, &name(w)), vec_param(model, &name(b)));
            a.iter().map(|row| affine(row, &w, &b)).collect()
        };
        let (q, k, v) = (proj("wq", "bq"), proj("wk", "bk"), proj("wv", "bv"));
        let mut o = vec![vec![0.0; d]; 4];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..4 {
                let scores: Vec<f64> = (0..4)
                    .map(|j| dot(&q[i][cols.clone()], &k[j][cols.clone()]) / (dh as f64).sqrt())
                    .collect();
                let att = softmax(&scores);
                for c in cols.clone() {
                    o[i][c] = (0..4).map(|j| att[j] * v[j][c]).sum();
                }
            }
        }
        let (wo, bo) = (mat_param(model, &name("wo")), vec_param(model, &name("bo")));
        for i in 0..4 {
            let out = affine(&o[i], &wo, &bo);
            for j in 0..d {
                s[i][j] += out[j];
            }
        }
        let (g2, b2) = (vec_param(model, &name("ln2_gain")), vec_param(model, &name("ln2_bias")));
        let (w1, c1) = (mat_param(model, &name("w1")), vec_param(model, &name("b1")));
        let (w2, c2) = (mat_param(model, &name("w2")), vec_param(model, &name("b2")));
        for row in s.iter_mut() {
            let f = layer_norm(row, &g2, &b2, cfg.ln_eps);
            let hidden: Vec<f64> = affine(&f, &w1, &c1).into_iter().map(gelu).collect();
            let out = affine(&hidden, &w2, &c2);
            for j in 0..d {
                row[j] += out[j];
            }
        }
    }
    (0..4).map(|i| (0..d).map(|j| x[i][j] + (s[i][j] - y[i][j])).collect()).collect()
}

/// Compensated projected head and projected tail of `(h, r, t)`.
pub fn project(model: &TripletModel, h: &[f64], rel: Relation, t: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let z = encode(model, h, model.relation_vector(rel), t);
    let eps = model.deviation(rel);
    let head = (0..h.len()).map(|j| z[0][j] * z[1][j] - eps[j]).collect();
    let tail = (0..h.len()).map(|j| z[3][j] * z[2][j]).collect();
    (head, tail)
}

pub fn score(model: &TripletModel, h: &[f64], rel: Relation, t: &[f64]) -> f64 {
    let (a, b) = project(model, h, rel, t);
    cos(&a, &b)
}

/// `½·(θ(v, v-a, a) + θ(a, a-v, v))`.
pub fn tri_similarity(model: &TripletModel, v: &Mat, a: &Mat) -> Mat {
    v.iter()
        .map(|vi| {
            a.iter()
                .map(|aj| {
                    0.5 * (score(model, vi, Relation::VideoAction, aj)
                        + score(model, aj, Relation::ActionVideo, vi))
                })
                .collect()
        })
        .collect()
}

pub fn mm_similarity(v: &Mat, a: &Mat) -> Mat {
    v.iter().map(|vi| a.iter().map(|aj| cos(vi, aj)).collect()).collect()
}

/// Mean over anchors of `Σ_j q_ij·ln(q_ij / p_ij)`, `p` the row softmax of
/// `scores / τ`, `q` uniform over the positives.
pub fn kl_rows(scores: &Mat, positive: &dyn Fn(usize, usize) -> bool, tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, row) in scores.iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|s| s / tau).collect();
        let p = softmax(&logits);
        let k = (0..row.len()).filter(|&j| positive(i, j)).count() as f64;
        for j in 0..row.len() {
            if positive(i, j) {
                total += (1.0 / k) * ((1.0 / k) / p[j]).ln();
            }
        }
    }
    total / scores.len() as f64
}

pub fn transpose(m: &Mat) -> Mat {
    (0..m[0].len()).map(|j| m.iter().map(|row| row[j]).collect()).collect()
}

pub fn mm_loss(anchors: &Mat, candidates: &Mat, positive: &dyn Fn(usize, usize) -> bool, tau: f64) -> f64 {
    let s = mm_similarity(anchors, candidates);
    let forward = kl_rows(&s, positive, tau);
    let backward = kl_rows(&transpose(&s), &|i, j| positive(j, i), tau);
    0.5 * (forward + backward)
}

pub fn triplet_loss(
    model: &TripletModel,
    rel: Relation,
    heads: &Mat,
    tails: &Mat,
    positive: &dyn Fn(usize, usize) -> bool,
    tau: f64,
) -> f64 {
    let n = heads.len();
    let fwd: Vec<(Vec<f64>, Vec<f64>)> = (0..n).map(|i| project(model, &heads[i], rel, &tails[i])).collect();
    let s: Mat = (0..n).map(|i| (0..n).map(|j| cos(&fwd[i].0, &fwd[j].1)).collect()).collect();
    let forward = kl_rows(&s, positive, tau);
    let rev: Vec<(Vec<f64>, Vec<f64>)> =
        (0..n).map(|i| project(model, &tails[i], rel.reverse(), &heads[i])).collect();
    let s: Mat = (0..n).map(|i| (0..n).map(|j| cos(&rev[i].0, &rev[j].1)).collect()).collect();
    let backward = kl_rows(&s, &|i, j| positive(j, i), tau);
    0.5 * (forward + backward)
}

/// A model whose every parameter is perturbed, so no block is inert.
pub fn busy_model(dim: usize, heads: usize, layers: usize, seed: u64) -> TripletModel {
    use kgclip_core::model::ModelConfig;
    use kgclip_core::Tensor;
    let cfg = ModelConfig { dim, heads, ff_width: 2 * dim, layers, ln_eps: 1e-5, global_epsilon: false };
    let mut m = TripletModel::init(cfg, seed).unwrap();
    let mut rng = SplitMix64::new(seed ^ 0xabcdef);
    let ids: Vec<_> = m.store().ids().collect();
    for id in ids {
        let t = m.store().get(id);
        let noise = Tensor::gaussian(t.shape().to_vec(), 0.0, 0.3, &mut rng);
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        let v = Tensor::new(t.shape().to_vec(), data).unwrap();
        m.store_mut().set(id, v).unwrap();
    }
    m
}

pub fn to_tensor(m: &Mat) -> kgclip_core::Tensor {
    kgclip_core::Tensor::from_rows(m).unwrap()
}
