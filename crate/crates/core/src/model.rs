//! Triplet encoder, paired-relation projection and deviation compensation.
//!
//! A triplet `(h, r, t)` enters the encoder as the four-token sequence
//! `[X_h, X_r^h, X_r^t, X_t]`, where the relation's 2d-vector is split into
//! a head chunk and a tail chunk. The encoder adds positional embeddings,
//! runs pre-layer-norm Transformer blocks, and its residual update is added
//! back onto the raw input:
//!
//! ```text
//! Z = X + (Blocks(X + P) - (X + P))
//! ```
//!
//! so that zeroing every sublayer output makes the encoder the identity.
//! Heads and tails are then projected by the encoded relation chunks
//! (`Z_h' = Z_h ∘ Z_r^h`, `Z_t' = Z_t ∘ Z_r^t`) and the head is shifted by
//! the relation's learned deviation vector (`Z_h'' = Z_h' - ε_r`).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Relation;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::{derive_seed, SplitMix64};

/// Sequence length of an encoded triplet.
pub const SEQ_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMode {
    Cosine,
    /// Negated Euclidean distance, so larger is always more plausible.
    Euclidean,
}

impl DistanceMode {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMode::Cosine => "cosine",
            DistanceMode::Euclidean => "euclidean",
        }
    }
}

impl fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(DistanceMode::Cosine),
            "euclidean" => Ok(DistanceMode::Euclidean),
            other => Err(Error::Config(format!("unknown distance mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub layers: usize,
    pub ln_eps: f64,
    /// One deviation vector shared by all relations instead of one each.
    pub global_epsilon: bool,
}

impl ModelConfig {
    /// Width `dim`, 4 heads below 64 dimensions and 8 from there on,
    /// feed-forward width `4·dim`, three layers.
    pub fn for_dim(dim: usize) -> Self {
        Self {
            dim,
            heads: if dim >= 64 { 8 } else { 4 },
            ff_width: 4 * dim,
            layers: 3,
            ln_eps: 1e-5,
            global_epsilon: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ff_width == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Encoder weights, positional embeddings, relation vectors, deviation
/// vectors and the (optionally used) contrastive logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletModel {
    config: ModelConfig,
    store: ParamStore,
}

const ENCODER_STD: f64 = 0.02;
const POSITIONAL_STD: f64 = 0.01;
/// CLIP's starting logit scale, `ln(1/0.07)`.
pub const INIT_LOGIT_SCALE: f64 = 2.659_260_036_932_778;

impl TripletModel {
    /// Seeded initialization: relation vectors ~ N(0, 1/√d), ε = 0, encoder
    /// matrices ~ N(0, 0.02²), biases 0, layer-norm gains 1, P ~ N(0, 0.01²),
    /// logit scale `ln(1/0.07)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut store = ParamStore::new();
        let gauss = |name: &str, shape: Vec<usize>, std: f64| {
            Tensor::gaussian(shape, 0.0, std, &mut SplitMix64::new(derive_seed(seed, name)))
        };
        for l in 0..config.layers {
            let p = |s: &str| format!("block{l}.{s}");
            store.add(p("ln1_gain"), Tensor::ones([d]), ParamGroup::Other);
            store.add(p("ln1_bias"), Tensor::zeros([d]), ParamGroup::Other);
            for w in ["wq", "wk", "wv", "wo"] {
                store.add(p(w), gauss(&p(w), vec![d, d], ENCODER_STD), ParamGroup::Other);
                let b = format!("b{}", &w[1..]);
                store.add(p(&b), Tensor::zeros([d]), ParamGroup::Other);
            }
            store.add(p("ln2_gain"), Tensor::ones([d]), ParamGroup::Other);
            store.add(p("ln2_bias"), Tensor::zeros([d]), ParamGroup::Other);
            store.add(p("w1"), gauss(&p("w1"), vec![d, config.ff_width], ENCODER_STD), ParamGroup::Other);
            store.add(p("b1"), Tensor::zeros([config.ff_width]), ParamGroup::Other);
            store.add(p("w2"), gauss(&p("w2"), vec![config.ff_width, d], ENCODER_STD), ParamGroup::Other);
            store.add(p("b2"), Tensor::zeros([d]), ParamGroup::Other);
        }
        store.add("positional", gauss("positional", vec![SEQ_LEN, d], POSITIONAL_STD), ParamGroup::Other);
        let rel_std = 1.0 / (d as f64).sqrt();
        store.add("relations", gauss("relations", vec![Relation::ALL.len(), 2 * d], rel_std), ParamGroup::Other);
        let eps_rows = if config.global_epsilon { 1 } else { Relation::ALL.len() };
        store.add("deviation", Tensor::zeros([eps_rows, d]), ParamGroup::Other);
        store.add("logit_scale", Tensor::new([1], vec![INIT_LOGIT_SCALE])?, ParamGroup::Other);
        Ok(Self { config, store })
    }

    /// Zero encoder sublayer outputs, all-ones relation chunks and ε = 0:
    /// the whole pipeline reduces to cosine similarity of the raw inputs.
    pub fn identity(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::init(config, seed)?;
        m.zero_sublayer_outputs();
        let rel = m.store.find("relations").unwrap();
        let shape = m.store.get(rel).shape().to_vec();
        m.store.set(rel, Tensor::ones(shape))?;
        Ok(m)
    }

    /// Rebuilds a model around an existing parameter store (checkpoints).
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let reference = Self::init(config, 0)?;
        for id in reference.store.ids() {
            let name = reference.store.name(id);
            let got = store
                .by_name(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if got.shape() != reference.store.get(id).shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    reference.store.get(id).shape()
                )));
            }
        }
        if store.len() != reference.store.len() {
            return Err(Error::Format("checkpoint has unexpected model parameters".into()));
        }
        // Keep the canonical ordering.
        let mut ordered = ParamStore::new();
        for id in reference.store.ids() {
            let name = reference.store.name(id);
            ordered.add(name, store.by_name(name).unwrap().clone(), reference.store.group(id));
        }
        Ok(Self { config, store: ordered })
    }

    pub fn zero_sublayer_outputs(&mut self) {
        for l in 0..self.config.layers {
            for w in ["wo", "bo", "w2", "b2"] {
                let id = self.store.find(&format!("block{l}.{w}")).unwrap();
                let shape = self.store.get(id).shape().to_vec();
                *self.store.get_mut(id) = Tensor::zeros(shape);
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.store.by_name(name)
    }

    fn id(&self, name: &str) -> ParamId {
        self.store.find(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn block_ids(&self, l: usize) -> BlockIds {
        let p = |s: &str| self.id(&format!("block{l}.{s}"));
        BlockIds {
            ln1_gain: p("ln1_gain"),
            ln1_bias: p("ln1_bias"),
            wq: p("wq"),
            bq: p("bq"),
            wk: p("wk"),
            bk: p("bk"),
            wv: p("wv"),
            bv: p("bv"),
            wo: p("wo"),
            bo: p("bo"),
            ln2_gain: p("ln2_gain"),
            ln2_bias: p("ln2_bias"),
            w1: p("w1"),
            b1: p("b1"),
            w2: p("w2"),
            b2: p("b2"),
        }
    }

    pub fn relation_vector(&self, r: Relation) -> &[f64] {
        self.store.get(self.id("relations")).row(r.index())
    }

    pub fn deviation_row(&self, r: Relation) -> usize {
        if self.config.global_epsilon {
            0
        } else {
            r.index()
        }
    }

    pub fn deviation(&self, r: Relation) -> &[f64] {
        self.store.get(self.id("deviation")).row(self.deviation_row(r))
    }

    /// Places the parameters on `tape`.
    pub fn bind<'m>(&'m self, tape: &mut Tape, requires_grad: bool) -> BoundModel<'m> {
        BoundModel {
            model: self,
            vars: self.store.bind(tape, requires_grad),
        }
    }

    /// Uses existing tape variables, one per parameter in store order, as
    /// this model's parameters.
    pub fn bind_vars<'m>(&'m self, vars: &[Var]) -> Result<BoundModel<'m>> {
        if vars.len() != self.store.len() {
            return Err(Error::Usage(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.store.len()
            )));
        }
        Ok(BoundModel { model: self, vars: vars.to_vec() })
    }

    // ----- slice-level convenience API ------------------------------------------

    /// Encodes a single triplet; returns `[Z_h, Z_r^h, Z_r^t, Z_t]`.
    pub fn triplet_encode(&self, x_h: &[f64], x_r: &[f64], x_t: &[f64]) -> Result<[Vec<f64>; 4]> {
        let d = self.config.dim;
        if x_h.len() != d || x_t.len() != d || x_r.len() != 2 * d {
            return Err(Error::shape("triplet_encode", &[d, 2 * d, d], &[x_h.len(), x_r.len(), x_t.len()]));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = tape.constant(Tensor::new([1, d], x_h.to_vec())?);
        let r = tape.constant(Tensor::new([1, 2 * d], x_r.to_vec())?);
        let t = tape.constant(Tensor::new([1, d], x_t.to_vec())?);
        let enc = bound.encode_with(&mut tape, h, r, t)?;
        let get = |v: Var| tape.value(v).data().to_vec();
        Ok([get(enc.head), get(enc.rel_head), get(enc.rel_tail), get(enc.tail)])
    }

    /// Plausibility θ of `(h, r, t)`; cosine in [-1, 1] or negated
    /// Euclidean distance (≤ 0).
    pub fn score_triplet(&self, h_emb: &[f64], r: Relation, t_emb: &[f64], mode: DistanceMode) -> Result<f64> {
        let d = self.config.dim;
        if h_emb.len() != d || t_emb.len() != d {
            return Err(Error::shape("score_triplet", &[d, d], &[h_emb.len(), t_emb.len()]));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let h = tape.constant(Tensor::new([1, d], h_emb.to_vec())?);
        let t = tape.constant(Tensor::new([1, d], t_emb.to_vec())?);
        let pair = bound.pair(&mut tape, h, &[r], t)?;
        let s = row_scores(&mut tape, pair.head, pair.tail, mode)?;
        Ok(tape.value(s).data()[0])
    }
}

/// `Z_h' = Z_h ∘ Z_r^h`, `Z_t' = Z_t ∘ Z_r^t`.
pub fn project_entities(z_h: &[f64], z_rh: &[f64], z_rt: &[f64], z_t: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = z_h.len();
    if z_rh.len() != d || z_rt.len() != d || z_t.len() != d {
        return Err(Error::shape("project_entities", &[d], &[z_rh.len(), z_rt.len(), z_t.len()]));
    }
    let head = z_h.iter().zip(z_rh).map(|(a, b)| a * b).collect();
    let tail = z_t.iter().zip(z_rt).map(|(a, b)| a * b).collect();
    Ok((head, tail))
}

/// `Z_h'' = Z_h' - ε`.
pub fn compensate(z_h: &[f64], epsilon: &[f64]) -> Result<Vec<f64>> {
    if z_h.len() != epsilon.len() {
        return Err(Error::shape("compensate", &[z_h.len()], &[epsilon.len()]));
    }
    Ok(z_h.iter().zip(epsilon).map(|(a, b)| a - b).collect())
}

/// Encoder outputs for a batch of triplets, each `[B, d]`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub head: Var,
    pub rel_head: Var,
    pub rel_tail: Var,
    pub tail: Var,
}

/// Compensated projected heads and projected tails, each `[B, d]`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedPair {
    pub head: Var,
    pub tail: Var,
}

/// Model parameters placed on a tape.
pub struct BoundModel<'m> {
    model: &'m TripletModel,
    vars: Vec<Var>,
}

impl BoundModel<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.model.id(name).index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn model(&self) -> &TripletModel {
        self.model
    }

    fn v(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    /// Encodes triplets whose relation rows are gathered from the table.
    pub fn encode(&self, tape: &mut Tape, heads: Var, relations: &[Relation], tails: Var) -> Result<Encoded> {
        let idx: Vec<usize> = relations.iter().map(|r| r.index()).collect();
        let rel = tape.gather(self.var("relations"), &idx)?;
        self.encode_with(tape, heads, rel, tails)
    }

    /// Encodes triplets given explicit `[B, 2d]` relation vectors.
    pub fn encode_with(&self, tape: &mut Tape, heads: Var, rel: Var, tails: Var) -> Result<Encoded> {
        let cfg = self.model.config;
        let d = cfg.dim;
        let b = tape.shape(heads)[0];
        if tape.shape(heads) != [b, d] || tape.shape(tails) != [b, d] || tape.shape(rel) != [b, 2 * d] {
            return Err(Error::shape("triplet_encode", tape.shape(heads), tape.shape(rel)));
        }
        let cat = tape.concat(&[heads, rel, tails], 1)?;
        let x = tape.reshape(cat, &[b, SEQ_LEN, d])?;
        let y = tape.add(x, self.var("positional"))?;
        let mut s = y;
        for l in 0..cfg.layers {
            s = self.block(tape, s, &self.model.block_ids(l), b)?;
        }
        let delta = tape.sub(s, y)?;
        let z = tape.add(x, delta)?;
        let parts = tape.split(z, 1, &[1, 1, 1, 1])?;
        let mut rows = Vec::with_capacity(SEQ_LEN);
        for p in parts {
            rows.push(tape.reshape(p, &[b, d])?);
        }
        Ok(Encoded {
            head: rows[0],
            rel_head: rows[1],
            rel_tail: rows[2],
            tail: rows[3],
        })
    }

    fn block(&self, tape: &mut Tape, s: Var, ids: &BlockIds, b: usize) -> Result<Var> {
        let cfg = self.model.config;
        let (d, h, dh) = (cfg.dim, cfg.heads, cfg.head_dim());
        let n = b * SEQ_LEN;

        // Self-attention sublayer.
        let a = tape.layer_norm(s, self.v(ids.ln1_gain), self.v(ids.ln1_bias), cfg.ln_eps)?;
        let a = tape.reshape(a, &[n, d])?;
        let proj = |tape: &mut Tape, w: ParamId, bias: ParamId, axes: &[usize]| -> Result<Var> {
            let m = tape.matmul(a, self.v(w))?;
            let m = tape.add(m, self.v(bias))?;
            let m = tape.reshape(m, &[b, SEQ_LEN, h, dh])?;
            tape.permute(m, axes)
        };
        let q = proj(tape, ids.wq, ids.bq, &[0, 2, 1, 3])?; // [b, h, 4, dh]
        let k = proj(tape, ids.wk, ids.bk, &[0, 2, 3, 1])?; // [b, h, dh, 4]
        let v = proj(tape, ids.wv, ids.bv, &[0, 2, 1, 3])?;
        let scores = tape.batch_matmul(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax(scores, 3)?;
        let o = tape.batch_matmul(att, v)?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[n, d])?;
        let o = tape.matmul(o, self.v(ids.wo))?;
        let o = tape.add(o, self.v(ids.bo))?;
        let o = tape.reshape(o, &[b, SEQ_LEN, d])?;
        let s = tape.add(s, o)?;

        // Feed-forward sublayer.
        let f = tape.layer_norm(s, self.v(ids.ln2_gain), self.v(ids.ln2_bias), cfg.ln_eps)?;
        let f = tape.reshape(f, &[n, d])?;
        let f = tape.matmul(f, self.v(ids.w1))?;
        let f = tape.add(f, self.v(ids.b1))?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, self.v(ids.w2))?;
        let f = tape.add(f, self.v(ids.b2))?;
        let f = tape.reshape(f, &[b, SEQ_LEN, d])?;
        tape.add(s, f)
    }

    pub fn project(&self, tape: &mut Tape, enc: &Encoded) -> Result<(Var, Var)> {
        let head = tape.hadamard(enc.head, enc.rel_head)?;
        let tail = tape.hadamard(enc.tail, enc.rel_tail)?;
        Ok((head, tail))
    }

    /// Subtracts each row's relation deviation vector.
    pub fn compensate(&self, tape: &mut Tape, projected_heads: Var, relations: &[Relation]) -> Result<Var> {
        let idx: Vec<usize> = relations.iter().map(|&r| self.model.deviation_row(r)).collect();
        let eps = tape.gather(self.var("deviation"), &idx)?;
        tape.sub(projected_heads, eps)
    }

    /// Encode → project → compensate for a batch of triplets.
    pub fn pair(&self, tape: &mut Tape, heads: Var, relations: &[Relation], tails: Var) -> Result<ProjectedPair> {
        let enc = self.encode(tape, heads, relations, tails)?;
        let (ph, pt) = self.project(tape, &enc)?;
        let head = self.compensate(tape, ph, relations)?;
        Ok(ProjectedPair { head, tail: pt })
    }
}

/// Row-wise plausibility of aligned `[B, d]` heads and tails; returns `[B]`.
pub fn row_scores(tape: &mut Tape, heads: Var, tails: Var, mode: DistanceMode) -> Result<Var> {
    match mode {
        DistanceMode::Cosine => tape.cosine(heads, tails),
        DistanceMode::Euclidean => {
            let diff = tape.sub(heads, tails)?;
            let n = tape.l2_norm(diff)?;
            Ok(tape.scale(n, -1.0))
        }
    }
}

/// All-pairs plausibility between `[n, d]` anchors and `[m, d]` candidates.
pub fn score_matrix(tape: &mut Tape, anchors: Var, candidates: Var, mode: DistanceMode) -> Result<Var> {
    match mode {
        DistanceMode::Cosine => {
            let a = tape.l2_normalize(anchors)?;
            let c = tape.l2_normalize(candidates)?;
            let ct = tape.transpose(c)?;
            tape.matmul(a, ct)
        }
        DistanceMode::Euclidean => {
            let dist = tape.pairwise_distance(anchors, candidates)?;
            Ok(tape.scale(dist, -1.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg8() -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            ff_width: 32,
            layers: 3,
            ln_eps: 1e-5,
            global_epsilon: false,
        }
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        Tensor::uniform([n], -1.0, 1.0, &mut SplitMix64::new(seed)).into_data()
    }

    #[test]
    fn zero_network_is_identity() {
        let mut m = TripletModel::init(cfg8(), 1).unwrap();
        m.zero_sublayer_outputs();
        let (h, r, t) = (rand_vec(8, 2), rand_vec(16, 3), rand_vec(8, 4));
        let z = m.triplet_encode(&h, &r, &t).unwrap();
        assert_eq!(z[0], h);
        assert_eq!(z[1], r[..8]);
        assert_eq!(z[2], r[8..]);
        assert_eq!(z[3], t);
    }

    #[test]
    fn positions_matter() {
        let m = TripletModel::init(cfg8(), 5).unwrap();
        let (h, r, t) = (rand_vec(8, 6), rand_vec(16, 7), rand_vec(8, 8));
        let a = m.triplet_encode(&h, &r, &t).unwrap();
        let b = m.triplet_encode(&t, &r, &h).unwrap();
        // Swapping head and tail does not just swap the outputs.
        let diff: f64 = a[0].iter().zip(&b[3]).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "diff {diff}");
    }

    #[test]
    fn encode_output_shape_and_finiteness() {
        let m = TripletModel::init(cfg8(), 9).unwrap();
        let z = m.triplet_encode(&rand_vec(8, 1), &rand_vec(16, 2), &rand_vec(8, 3)).unwrap();
        assert_eq!(z.len(), 4);
        for row in &z {
            assert_eq!(row.len(), 8);
            assert!(row.iter().all(|v| v.is_finite()));
        }
        assert!(m.triplet_encode(&rand_vec(7, 1), &rand_vec(16, 2), &rand_vec(8, 3)).is_err());
    }

    #[test]
    fn projection_cases() {
        let (zh, zt) = (rand_vec(6, 1), rand_vec(6, 2));
        let ones = vec![1.0; 6];
        assert_eq!(project_entities(&zh, &ones, &ones, &zt).unwrap(), (zh.clone(), zt.clone()));
        let zeros = vec![0.0; 6];
        let (a, b) = project_entities(&zh, &zeros, &zeros, &zt).unwrap();
        assert!(a.iter().chain(&b).all(|&v| v == 0.0));
        let (rh, rt) = (rand_vec(6, 3), rand_vec(6, 4));
        let (a, b) = project_entities(&zh, &rh, &rt, &zt).unwrap();
        for i in 0..6 {
            assert!((a[i] - zh[i] * rh[i]).abs() < 1e-12);
            assert!((b[i] - zt[i] * rt[i]).abs() < 1e-12);
        }
        assert!(project_entities(&zh, &rh[..5], &rt, &zt).is_err());
    }

    #[test]
    fn compensation_cases() {
        let z = rand_vec(5, 1);
        assert_eq!(compensate(&z, &[0.0; 5]).unwrap(), z);
        assert_eq!(compensate(&z, &z).unwrap(), vec![0.0; 5]);
        assert!(compensate(&z, &[0.0; 4]).is_err());
    }

    #[test]
    fn batch_center_shifts_by_epsilon() {
        let d = 6;
        let eps = rand_vec(d, 9);
        let heads: Vec<Vec<f64>> = (0..16).map(|i| rand_vec(d, 100 + i)).collect();
        let shifted: Vec<Vec<f64>> = heads.iter().map(|h| compensate(h, &eps).unwrap()).collect();
        for j in 0..d {
            let before = heads.iter().map(|h| h[j]).sum::<f64>() / 16.0;
            let after = shifted.iter().map(|h| h[j]).sum::<f64>() / 16.0;
            assert!((after - (before - eps[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_configuration_scores() {
        let m = TripletModel::identity(cfg8(), 3).unwrap();
        let h = rand_vec(8, 11);
        let neg: Vec<f64> = h.iter().map(|x| -x).collect();
        let s = m.score_triplet(&h, Relation::VideoAction, &h, DistanceMode::Cosine).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let s = m.score_triplet(&h, Relation::VideoAction, &neg, DistanceMode::Cosine).unwrap();
        assert!((s + 1.0).abs() < 1e-12);
        let s = m.score_triplet(&h, Relation::VideoAction, &h, DistanceMode::Euclidean).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn init_is_seeded_with_zero_deviation() {
        let a = TripletModel::init(cfg8(), 42).unwrap();
        assert_eq!(a, TripletModel::init(cfg8(), 42).unwrap());
        assert_ne!(a, TripletModel::init(cfg8(), 43).unwrap());
        assert!(a.param("deviation").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.param("relations").unwrap().shape(), &[6, 16]);
        assert_eq!(a.param("positional").unwrap().shape(), &[4, 8]);
    }

    #[test]
    fn relation_init_is_centered_at_width_512() {
        let m = TripletModel::init(ModelConfig::for_dim(512), 7).unwrap();
        let r = m.param("relations").unwrap();
        assert_eq!(r.numel(), 6 * 1024);
        let mean = r.data().iter().sum::<f64>() / r.numel() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        let var = r.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.numel() as f64;
        assert!((var.sqrt() - 1.0 / 512f64.sqrt()).abs() < 0.003);
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let cfg = ModelConfig { heads: 3, ..cfg8() };
        assert!(matches!(TripletModel::init(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn global_epsilon_has_one_row() {
        let cfg = ModelConfig { global_epsilon: true, ..cfg8() };
        let m = TripletModel::init(cfg, 0).unwrap();
        assert_eq!(m.param("deviation").unwrap().shape(), &[1, 8]);
        assert_eq!(m.deviation_row(Relation::MovementAction), 0);
    }

    #[test]
    fn score_ranges() {
        let m = TripletModel::init(cfg8(), 12).unwrap();
        for s in 0..20 {
            let (h, t) = (rand_vec(8, 2 * s), rand_vec(8, 2 * s + 1));
            let c = m.score_triplet(&h, Relation::MovementVideo, &t, DistanceMode::Cosine).unwrap();
            assert!((-1.0..=1.0).contains(&c));
            let e = m.score_triplet(&h, Relation::MovementVideo, &t, DistanceMode::Euclidean).unwrap();
            assert!(e <= 0.0);
        }
    }

    #[test]
    fn forward_and_reverse_relations_score_differently() {
        let mut distinct = 0;
        for seed in 0..100 {
            let m = TripletModel::init(cfg8(), seed).unwrap();
            let (h, t) = (rand_vec(8, 1000 + seed), rand_vec(8, 2000 + seed));
            let a = m.score_triplet(&h, Relation::VideoAction, &t, DistanceMode::Cosine).unwrap();
            let b = m.score_triplet(&h, Relation::ActionVideo, &t, DistanceMode::Cosine).unwrap();
            if (a - b).abs() > 1e-6 {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "{distinct}/100");
    }

    #[test]
    fn score_pipeline_passes_grad_check() {
        use crate::autodiff::{grad_check, GradCheckOptions};
        // Perturb a trained-looking model so every parameter matters.
        let mut m = TripletModel::init(ModelConfig { layers: 1, ..cfg8() }, 4).unwrap();
        let mut rng = SplitMix64::new(77);
        for id in m.store().ids().collect::<Vec<_>>() {
            let shape = m.store().get(id).shape().to_vec();
            let noise = Tensor::gaussian(shape, 0.0, 0.3, &mut rng);
            let mut v = m.store().get(id).clone();
            for (a, b) in v.data_mut().iter_mut().zip(noise.data()) {
                *a += b;
            }
            m.store_mut().set(id, v).unwrap();
        }
        let names: Vec<String> = m.store().ids().map(|id| m.store().name(id).to_string()).collect();
        let mut params: Vec<Tensor> = m.store().ids().map(|id| m.store().get(id).clone()).collect();
        params.push(Tensor::uniform([2, 8], -1.0, 1.0, &mut rng));
        params.push(Tensor::uniform([2, 8], -1.0, 1.0, &mut rng));
        let n_model = names.len();
        let cfg = *m.config();
        let report = grad_check(
            |tape, p| {
                let mut store = ParamStore::new();
                for (i, name) in names.iter().enumerate() {
                    store.add(name.clone(), tape.value(p[i]).clone(), ParamGroup::Other);
                }
                let model = TripletModel::from_store(cfg, store)?;
                let bound = model.bind_vars(&p[..n_model])?;
                let pair = bound.pair(tape, p[n_model], &[Relation::VideoAction, Relation::MovementAction], p[n_model + 1])?;
                let s = row_scores(tape, pair.head, pair.tail, DistanceMode::Cosine)?;
                Ok(tape.sum_all(s))
            },
            &params,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
