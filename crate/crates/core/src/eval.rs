//! Video × action similarity matrices, fusion, and Top-k evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::features::EmbeddingTable;
use crate::graph::{EntityId, Relation};
use crate::model::{row_scores, score_matrix, DistanceMode, TripletModel};

/// Pairs scored per encoder pass in [`tri_similarity`].
pub const TRI_CHUNK: usize = 256;

pub const DEFAULT_FUSION_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Mm,
    Tri,
    Fused,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Mm => "mm",
            Provenance::Tri => "tri",
            Provenance::Fused => "fused",
        })
    }
}

/// Scores with one row per video and one column per action.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    videos: Vec<EntityId>,
    actions: Vec<EntityId>,
    values: Tensor,
    provenance: Provenance,
}

impl SimilarityMatrix {
    pub fn new(videos: Vec<EntityId>, actions: Vec<EntityId>, values: Tensor, provenance: Provenance) -> Result<Self> {
        if values.shape() != [videos.len(), actions.len()] {
            return Err(Error::shape("similarity matrix", values.shape(), &[videos.len(), actions.len()]));
        }
        if !values.is_finite() {
            return Err(Error::numeric("similarity matrix", "non-finite score"));
        }
        Ok(Self { videos, actions, values, provenance })
    }

    pub fn videos(&self) -> &[EntityId] {
        &self.videos
    }

    pub fn actions(&self) -> &[EntityId] {
        &self.actions
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn get(&self, video: usize, action: usize) -> f64 {
        self.values.at(&[video, action])
    }

    pub fn row(&self, video: usize) -> &[f64] {
        self.values.row(video)
    }

    /// Column indices of one row, best first; equal scores keep ascending
    /// action order.
    pub fn ranking(&self, video: usize) -> Vec<usize> {
        let row = self.row(video);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order
    }

    /// Writes `video, label, predicted, score per action` as tab-separated
    /// lines under a header row.
    pub fn write_table(&self, labels: Option<&[EntityId]>, mut w: impl Write) -> std::io::Result<()> {
        write!(w, "video\tlabel\tpredicted")?;
        for a in &self.actions {
            write!(w, "\t{}", a.label)?;
        }
        writeln!(w)?;
        for (i, v) in self.videos.iter().enumerate() {
            let label = labels.map(|l| l[i].label.as_str()).unwrap_or("-");
            let best = &self.actions[self.ranking(i)[0]];
            write!(w, "{}\t{label}\t{}", v.label, best.label)?;
            for s in self.row(i) {
                write!(w, "\t{s:.6}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn check_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Cosine similarity of raw video and action embeddings.
pub fn mm_similarity(
    videos: &[EntityId],
    video_embs: &Tensor,
    actions: &[EntityId],
    action_embs: &Tensor,
) -> Result<SimilarityMatrix> {
    check_dims("mm_similarity", video_embs, action_embs)?;
    let mut tape = Tape::new();
    let v = tape.constant(video_embs.clone());
    let a = tape.constant(action_embs.clone());
    let s = score_matrix(&mut tape, v, a, DistanceMode::Cosine)?;
    let values = tape.value(s).map(|x| x.clamp(-1.0, 1.0));
    SimilarityMatrix::new(videos.to_vec(), actions.to_vec(), values, Provenance::Mm)
}

/// `½·(cos(Z_v'', Z_a') + cos(Z_a'', Z_v'))` for every video/action pair,
/// encoding the forward triplet `(v, v-a, a)` and the reverse `(a, a-v, v)`.
pub fn tri_similarity(
    model: &TripletModel,
    videos: &[EntityId],
    video_embs: &Tensor,
    actions: &[EntityId],
    action_embs: &Tensor,
) -> Result<SimilarityMatrix> {
    tri_similarity_chunked(model, videos, video_embs, actions, action_embs, TRI_CHUNK)
}

pub fn tri_similarity_chunked(
    model: &TripletModel,
    videos: &[EntityId],
    video_embs: &Tensor,
    actions: &[EntityId],
    action_embs: &Tensor,
    chunk: usize,
) -> Result<SimilarityMatrix> {
    check_dims("tri_similarity", video_embs, action_embs)?;
    if video_embs.shape()[1] != model.config().dim {
        return Err(Error::shape("tri_similarity", video_embs.shape(), &[model.config().dim]));
    }
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let (n, m) = (video_embs.shape()[0], action_embs.shape()[0]);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let mut values = vec![0.0; n * m];
    for block in pairs.chunks(chunk) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let gather = |t: &Tensor, pick: &dyn Fn(&(usize, usize)) -> usize| {
            Tensor::from_rows(&block.iter().map(|p| t.row(pick(p)).to_vec()).collect::<Vec<_>>())
        };
        let v = tape.constant(gather(video_embs, &|p| p.0)?);
        let a = tape.constant(gather(action_embs, &|p| p.1)?);
        let c = block.len();
        let fwd = bound.pair(&mut tape, v, &vec![Relation::VideoAction; c], a)?;
        let rev = bound.pair(&mut tape, a, &vec![Relation::ActionVideo; c], v)?;
        let sf = row_scores(&mut tape, fwd.head, fwd.tail, DistanceMode::Cosine)?;
        let sr = row_scores(&mut tape, rev.head, rev.tail, DistanceMode::Cosine)?;
        let (sf, sr) = (tape.value(sf).data(), tape.value(sr).data());
        for (k, &(i, j)) in block.iter().enumerate() {
            values[i * m + j] = 0.5 * (sf[k] + sr[k]);
        }
    }
    SimilarityMatrix::new(videos.to_vec(), actions.to_vec(), Tensor::new([n, m], values)?, Provenance::Tri)
}

/// `½·(S_mm + S_tri)`.
pub fn fuse(mm: &SimilarityMatrix, tri: &SimilarityMatrix) -> Result<SimilarityMatrix> {
    fuse_weighted(mm, tri, DEFAULT_FUSION_WEIGHT)
}

/// `w·S_mm + (1 - w)·S_tri`.
pub fn fuse_weighted(mm: &SimilarityMatrix, tri: &SimilarityMatrix, weight: f64) -> Result<SimilarityMatrix> {
    if mm.values.shape() != tri.values.shape() {
        return Err(Error::shape("fuse", mm.values.shape(), tri.values.shape()));
    }
    if mm.videos != tri.videos || mm.actions != tri.actions {
        return Err(Error::Input("fuse: row or column ordering differs".into()));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Config(format!("fusion weight {weight} outside [0, 1]")));
    }
    let values: Vec<f64> = mm
        .values
        .data()
        .iter()
        .zip(tri.values.data())
        .map(|(a, b)| weight * a + (1.0 - weight) * b)
        .collect();
    SimilarityMatrix::new(
        mm.videos.clone(),
        mm.actions.clone(),
        Tensor::new(mm.values.shape().to_vec(), values)?,
        Provenance::Fused,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
    pub hits: usize,
    /// Rows whose label score equals another action's score, so that the
    /// index tie-break decided its rank.
    pub ties: usize,
}

fn label_columns(s: &SimilarityMatrix, labels: &[EntityId]) -> Result<Vec<usize>> {
    if labels.len() != s.videos.len() {
        return Err(Error::Data(format!("{} labels for {} videos", labels.len(), s.videos.len())));
    }
    labels
        .iter()
        .map(|l| {
            s.actions
                .iter()
                .position(|a| a == l)
                .ok_or_else(|| Error::Data(format!("label {l} is not among the actions")))
        })
        .collect()
}

/// Rank of column `label` in `row` under descending score with ascending
/// index tie-break, and whether a tie with the label occurred.
fn rank_of(row: &[f64], label: usize) -> (usize, bool) {
    let s = row[label];
    let mut rank = 0;
    let mut tied = false;
    for (j, &v) in row.iter().enumerate() {
        if j == label {
            continue;
        }
        if v == s {
            tied = true;
        }
        if v > s || (v == s && j < label) {
            rank += 1;
        }
    }
    (rank, tied)
}

pub fn top_k_accuracy(s: &SimilarityMatrix, labels: &[EntityId], k: usize) -> Result<TopK> {
    let cols = label_columns(s, labels)?;
    let (mut hits, mut ties) = (0, 0);
    for (i, &c) in cols.iter().enumerate() {
        let (rank, tied) = rank_of(s.row(i), c);
        hits += usize::from(rank < k);
        ties += usize::from(tied);
    }
    let accuracy = if cols.is_empty() { 0.0 } else { hits as f64 / cols.len() as f64 };
    Ok(TopK { k, accuracy, hits, ties })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    /// Top-1 accuracy restricted to each action's videos.
    pub per_action: Vec<(EntityId, f64)>,
    pub ties: usize,
    pub videos: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "videos\t{}", self.videos)?;
        writeln!(f, "top1\t{:.4}", self.top1)?;
        writeln!(f, "top5\t{:.4}", self.top5)?;
        writeln!(f, "ties\t{}", self.ties)?;
        for (a, acc) in &self.per_action {
            writeln!(f, "action\t{}\t{acc:.4}", a.label)?;
        }
        Ok(())
    }
}

pub fn evaluate(s: &SimilarityMatrix, labels: &[EntityId]) -> Result<EvalReport> {
    let t1 = top_k_accuracy(s, labels, 1)?;
    let t5 = top_k_accuracy(s, labels, 5)?;
    let cols = label_columns(s, labels)?;
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (i, &c) in cols.iter().enumerate() {
        let e = per.entry(c).or_default();
        e.0 += usize::from(rank_of(s.row(i), c).0 == 0);
        e.1 += 1;
    }
    Ok(EvalReport {
        top1: t1.accuracy,
        top5: t5.accuracy,
        per_action: per
            .into_iter()
            .map(|(c, (h, n))| (s.actions[c].clone(), h as f64 / n as f64))
            .collect(),
        ties: t1.ties,
        videos: cols.len(),
    })
}

/// The three matrices of the inference pipeline.
#[derive(Debug, Clone)]
pub struct Scores {
    pub mm: SimilarityMatrix,
    pub tri: SimilarityMatrix,
    pub fused: SimilarityMatrix,
}

/// Scores every video against every action with both similarity paths.
pub fn score_videos(
    model: &TripletModel,
    videos: &[EntityId],
    video_embs: &Tensor,
    actions: &[EntityId],
    action_embs: &Tensor,
    fusion_weight: f64,
) -> Result<Scores> {
    let mm = mm_similarity(videos, video_embs, actions, action_embs)?;
    let tri = tri_similarity(model, videos, video_embs, actions, action_embs)?;
    let fused = fuse_weighted(&mm, &tri, fusion_weight)?;
    Ok(Scores { mm, tri, fused })
}

/// Looks up rows of `table` for `ids`; unknown ids are input errors.
pub fn rows_for(table: &EmbeddingTable, ids: &[EntityId]) -> Result<Tensor> {
    let rows = ids
        .iter()
        .map(|id| {
            table
                .get(id)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Input(format!("unknown entity {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Input("no entities requested".into()));
    }
    Tensor::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub video: EntityId,
    pub actions: Vec<(EntityId, f64)>,
}

/// Per video, the `top_n` actions by fused score.
pub fn infer(
    model: &TripletModel,
    videos: &[EntityId],
    video_embs: &Tensor,
    actions: &[EntityId],
    action_embs: &Tensor,
    top_n: usize,
    fusion_weight: f64,
) -> Result<Vec<Ranking>> {
    let scores = score_videos(model, videos, video_embs, actions, action_embs, fusion_weight)?;
    Ok(rankings(&scores.fused, top_n))
}

pub fn rankings(s: &SimilarityMatrix, top_n: usize) -> Vec<Ranking> {
    (0..s.videos.len())
        .map(|i| Ranking {
            video: s.videos[i].clone(),
            actions: s
                .ranking(i)
                .into_iter()
                .take(top_n)
                .map(|j| (s.actions[j].clone(), s.get(i, j)))
                .collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::SplitMix64;

    fn ids(kind: &str, n: usize) -> Vec<EntityId> {
        (0..n)
            .map(|i| match kind {
                "v" => EntityId::video(format!("v{i}")).unwrap(),
                _ => EntityId::action(format!("a{i}")).unwrap(),
            })
            .collect()
    }

    fn matrix(rows: &[Vec<f64>]) -> SimilarityMatrix {
        let t = Tensor::from_rows(rows).unwrap();
        SimilarityMatrix::new(ids("v", rows.len()), ids("a", rows[0].len()), t, Provenance::Fused).unwrap()
    }

    fn rand(shape: [usize; 2], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut SplitMix64::new(seed))
    }

    #[test]
    fn top_k_examples() {
        let s = matrix(&[vec![0.9, 0.1, 0.5]]);
        let a = ids("a", 3);
        assert_eq!(top_k_accuracy(&s, &a[0..1], 1).unwrap().hits, 1);
        assert_eq!(top_k_accuracy(&s, &a[2..3], 1).unwrap().hits, 0);
        assert_eq!(top_k_accuracy(&s, &a[2..3], 2).unwrap().hits, 1);
        let unknown = [EntityId::action("zz").unwrap()];
        assert!(matches!(top_k_accuracy(&s, &unknown, 1), Err(Error::Data(_))));
    }

    #[test]
    fn ties_break_by_ascending_index() {
        let s = matrix(&[vec![0.5, 0.5, 0.1]]);
        let a = ids("a", 3);
        let r = top_k_accuracy(&s, &a[0..1], 1).unwrap();
        assert_eq!((r.hits, r.ties), (1, 1));
        let r = top_k_accuracy(&s, &a[1..2], 1).unwrap();
        assert_eq!((r.hits, r.ties), (0, 1));
        assert_eq!(s.ranking(0), vec![0, 1, 2]);
    }

    #[test]
    fn mm_similarity_examples() {
        let x = rand([4, 6], 1);
        let s = mm_similarity(&ids("v", 4), &x, &ids("a", 4), &x).unwrap();
        for i in 0..4 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-12);
        }
        let e = Tensor::eye(2);
        let s = mm_similarity(&ids("v", 2), &e, &ids("a", 2), &e).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        let zero = Tensor::zeros([1, 2]);
        assert!(mm_similarity(&ids("v", 1), &zero, &ids("a", 2), &e).is_err());
    }

    #[test]
    fn fuse_examples() {
        let m = matrix(&[vec![0.2, -0.4], vec![0.6, 0.1]]);
        assert_eq!(fuse(&m, &m).unwrap().values(), m.values());
        let zero = matrix(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let half = fuse(&zero, &m).unwrap();
        assert_eq!(half.values().data(), &[0.1, -0.2, 0.3, 0.05]);
        assert_eq!(half.provenance(), Provenance::Fused);
        let other = matrix(&[vec![0.0, 0.0]]);
        assert!(fuse(&m, &other).is_err());
    }

    #[test]
    fn tri_similarity_is_chunking_independent() {
        let model = TripletModel::init(ModelConfig { layers: 2, ..ModelConfig::for_dim(8) }, 5).unwrap();
        let (v, a) = (rand([5, 8], 2), rand([3, 8], 3));
        let full = tri_similarity_chunked(&model, &ids("v", 5), &v, &ids("a", 3), &a, 256).unwrap();
        for chunk in [1, 4, 7] {
            let s = tri_similarity_chunked(&model, &ids("v", 5), &v, &ids("a", 3), &a, chunk).unwrap();
            assert!(s.values().max_abs_diff(full.values()) < 1e-12);
        }
        assert!(full.values().data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn identity_model_infers_matching_action_first() {
        let model = TripletModel::identity(ModelConfig::for_dim(8), 0).unwrap();
        let a = rand([4, 8], 9);
        let v = Tensor::from_rows(&[a.row(2).to_vec()]).unwrap();
        let r = infer(&model, &ids("v", 1), &v, &ids("a", 4), &a, 4, 0.5).unwrap();
        assert_eq!(r[0].actions.len(), 4);
        assert_eq!(r[0].actions[0].0, ids("a", 4)[2]);
        assert!((r[0].actions[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_is_monotone_and_complete() {
        let t = rand([30, 6], 4);
        let s = SimilarityMatrix::new(ids("v", 30), ids("a", 6), t, Provenance::Mm).unwrap();
        let labels: Vec<EntityId> = (0..30).map(|i| ids("a", 6)[i % 6].clone()).collect();
        let mut prev = 0.0;
        for k in 1..=6 {
            let acc = top_k_accuracy(&s, &labels, k).unwrap().accuracy;
            assert!(acc >= prev);
            prev = acc;
        }
        assert_eq!(prev, 1.0);
        let r = evaluate(&s, &labels).unwrap();
        assert!(r.top1 <= r.top5);
        assert_eq!(r.per_action.len(), 6);
    }
}
