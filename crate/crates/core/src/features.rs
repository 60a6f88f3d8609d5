//! Initial entity embeddings.
//!
//! Pretrained image/text encoders are out of reach at desk scale, so entity
//! vectors come from one of three providers: a binary embedding file, a
//! deterministic hash-seeded toy encoder, or the synthetic dataset
//! generator. Video vectors are always the temporal mean of frame vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{
    Annotation, BuildOptions, EntityId, EntityKind, KnowledgeGraph, MovementObservation, Split, SplitSpec,
};
use crate::rng::{derive_seed, SplitMix64};

pub const MAGIC: &[u8; 4] = b"KGCE";
const HEADER_LEN: usize = 12;

/// Per-frame feature vectors of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    video: String,
    frames: Tensor,
}

impl FrameFeatures {
    pub fn new(video: impl Into<String>, frames: Tensor) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(Error::Input(format!("frames must be n_frames x d, got {:?}", frames.shape())));
        }
        Ok(Self {
            video: video.into(),
            frames,
        })
    }

    pub fn video(&self) -> &str {
        &self.video
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Arithmetic mean of the frame vectors.
pub fn temporal_pool(frames: &FrameFeatures) -> Result<Vec<f64>> {
    let (n, d) = (frames.n_frames(), frames.dim());
    if n == 0 {
        return Err(Error::Input(format!("video {} has no frames", frames.video)));
    }
    // Incremental mean: exact when every frame is identical.
    let mut out = vec![0.0; d];
    for f in 0..n {
        let k = (f + 1) as f64;
        for (acc, v) in out.iter_mut().zip(frames.frames.row(f)) {
            *acc += (v - *acc) / k;
        }
    }
    Ok(out)
}

/// Differentiable temporal pooling of an `n_frames x d` node.
pub fn temporal_pool_on(tape: &mut Tape, frames: Var) -> Result<Var> {
    if tape.shape(frames).len() != 2 {
        return Err(Error::Input(format!("frames must be 2-D, got {:?}", tape.shape(frames))));
    }
    tape.mean(frames, 0)
}

/// Deterministic unit vector for an entity, keyed by a hash of `kind:label`.
pub fn toy_encode(entity: &EntityId, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "toy_encode needs dim >= 1");
    let mut rng = SplitMix64::new(derive_seed(seed, &entity.to_string()));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    normalize_in_place(&mut v);
    v
}

fn normalize_in_place(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// One `d`-dimensional row per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<EntityId>,
    index: BTreeMap<EntityId, usize>,
    rows: Tensor,
    trainable: BTreeMap<EntityKind, bool>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<EntityId>, rows: Tensor) -> Result<Self> {
        if rows.ndim() != 2 || rows.shape()[0] != ids.len() {
            return Err(Error::shape("embedding table", &[ids.len()], rows.shape()));
        }
        let mut index = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate entity {id}")));
            }
        }
        if !rows.is_finite() {
            return Err(Error::Format("embedding table contains non-finite values".into()));
        }
        let trainable = [
            (EntityKind::Video, false),
            (EntityKind::Action, true),
            (EntityKind::Movement, true),
        ]
        .into_iter()
        .collect();
        Ok(Self {
            ids,
            index,
            rows,
            trainable,
        })
    }

    /// Table with a toy-encoder row for every entity of `graph`.
    pub fn toy(graph: &KnowledgeGraph, dim: usize, seed: u64) -> Result<Self> {
        let ids = graph.entities().to_vec();
        let data = ids.iter().flat_map(|e| toy_encode(e, dim, seed)).collect();
        Self::new(ids.clone(), Tensor::new([ids.len(), dim], data)?)
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[EntityId] {
        &self.ids
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn get(&self, id: &EntityId) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.rows.row(i))
    }

    pub fn is_trainable(&self, kind: EntityKind) -> bool {
        self.trainable[&kind]
    }

    pub fn set_trainable(&mut self, kind: EntityKind, trainable: bool) {
        self.trainable.insert(kind, trainable);
    }

    /// Rows re-ordered to `graph.entities()`; errors list every entity
    /// the table does not cover.
    pub fn aligned_to(&self, graph: &KnowledgeGraph) -> Result<Tensor> {
        let missing: Vec<String> = graph
            .entities()
            .iter()
            .filter(|e| !self.index.contains_key(*e))
            .map(ToString::to_string)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("features missing for entities: {}", missing.join(", "))));
        }
        let data = graph.entities().iter().flat_map(|e| self.get(e).unwrap().to_vec()).collect();
        Tensor::new([graph.entities().len(), self.dim()], data)
    }

    // ----- binary format ----------------------------------------------------

    /// `"KGCE"`, u32 count, u32 dim, then count·dim little-endian f64.
    pub fn write_binary(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for v in self.rows.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn write_manifest(&self, mut w: impl Write) -> std::io::Result<()> {
        for id in &self.ids {
            writeln!(w, "{id}")?;
        }
        Ok(())
    }

    pub fn read(mut data: impl Read, manifest: impl BufRead) -> Result<Self> {
        let mut bytes = Vec::new();
        data.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("reading embeddings: {e}")))?;
        let ids = read_manifest(manifest)?;
        let rows = decode_rows(&bytes, &ids)?;
        Self::new(ids, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_binary(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))?;
        let mp = crate::graph::manifest_path(path);
        let mut m = std::io::BufWriter::new(std::fs::File::create(&mp).map_err(|e| Error::io(&mp, e))?);
        self.write_manifest(&mut m).map_err(|e| Error::io(&mp, e))?;
        m.flush().map_err(|e| Error::io(&mp, e))
    }

    /// Loads `path` with its manifest at `path.manifest`.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_manifest(path, &crate::graph::manifest_path(path))
    }

    pub fn load_with_manifest(path: &Path, manifest: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let m = std::fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
        Self::read(std::io::BufReader::new(f), std::io::BufReader::new(m))
    }

    /// Builds a table from newline-delimited JSON records, each either
    /// `{"entity": "kind:label", "vector": [...]}` or, for videos,
    /// `{"entity": "video:id", "frames": [[...], ...]}` (mean-pooled).
    pub fn import_jsonl(reader: impl BufRead) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Record {
            entity: String,
            #[serde(default)]
            vector: Option<Vec<f64>>,
            #[serde(default)]
            frames: Option<Vec<Vec<f64>>>,
        }
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (i, line) in reader.lines().enumerate() {
            let err = |detail: String| Error::Parse { line: i + 1, detail };
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            let id: EntityId = rec.entity.parse().map_err(|e: Error| err(e.to_string()))?;
            let v = match (rec.vector, rec.frames) {
                (Some(v), None) => v,
                (None, Some(frames)) => {
                    let n = frames.len();
                    let d = frames.first().map_or(0, Vec::len);
                    if n == 0 || d == 0 {
                        return Err(err(format!("{id} has no frames")));
                    }
                    let t = Tensor::from_rows(&frames).map_err(|e| err(e.to_string()))?;
                    temporal_pool(&FrameFeatures::new(id.label.clone(), t)?)?
                }
                _ => return Err(err("record needs exactly one of vector or frames".into())),
            };
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(err(format!("{id} has dim {} but earlier rows have {d}", v.len())))
                }
                _ => {}
            }
            if v.is_empty() {
                return Err(err(format!("{id} has an empty vector")));
            }
            ids.push(id);
            data.extend(v);
        }
        let d = dim.ok_or_else(|| Error::Input("no embedding records".into()))?;
        Self::new(ids.clone(), Tensor::new([ids.len(), d], data)?)
    }
}

fn read_manifest(manifest: impl BufRead) -> Result<Vec<EntityId>> {
    let mut ids = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        // Graph manifests carry extra tab-separated columns; only the id matters here.
        let id = line.split('\t').next().unwrap_or(line);
        ids.push(id.parse().map_err(|e: Error| Error::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(ids)
}

fn decode_rows(bytes: &[u8], ids: &[EntityId]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing KGCE magic".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Format("dimension is zero".into()));
    }
    if count != ids.len() {
        let detail = if ids.len() > count {
            format!(
                "manifest lists {} entities but file holds {count}; unexpected: {}",
                ids.len(),
                ids[count..].iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            )
        } else {
            format!("file holds {count} rows but manifest lists only {}", ids.len())
        };
        return Err(Error::Format(detail));
    }
    let expected = HEADER_LEN + count * dim * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes for {count}x{dim}, found {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!(
            "non-finite value in row {} ({})",
            pos / dim,
            ids[pos / dim]
        )));
    }
    Tensor::new([count, dim], data)
}

// ----- synthetic dataset ------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub m_actions: usize,
    pub l_movements: usize,
    pub n_videos: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub frames_per_video: usize,
    pub train_ratio: f64,
    pub min_count: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            m_actions: 8,
            l_movements: 32,
            n_videos: 400,
            dim: 32,
            noise_sigma: 0.3,
            seed: 0,
            frames_per_video: 8,
            train_ratio: 0.8,
            min_count: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub graph: KnowledgeGraph,
    pub table: EmbeddingTable,
    pub frames: Vec<FrameFeatures>,
    pub annotations: Vec<Annotation>,
    /// `m_actions x dim`, unit rows.
    pub prototypes: Tensor,
    /// Top-1 of assigning every video to its most cosine-similar
    /// prototype, measured on the raw pooled embeddings.
    pub nearest_prototype_top1: f64,
}

const PARTS: [&str; 8] = ["head", "torso", "arm", "hand", "hip", "leg", "foot", "shoulder"];

fn movement_observation(j: usize) -> MovementObservation {
    MovementObservation {
        part: PARTS[j % PARTS.len()].to_string(),
        state: format!("state{j}"),
        object: j.is_multiple_of(3).then(|| format!("object{j}")),
    }
}

/// Generates a balanced, class-separable toy recognition problem.
///
/// Action `a` owns movements `[a·k, (a+1)·k)` with `k = l/m`; the first of
/// each block is additionally shared with action `a + 1 (mod m)`. Video `i`
/// performs action `i mod m`; each frame is its action prototype plus
/// Gaussian noise, renormalized, and each video observes a random
/// non-empty subset of its action's movements.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    let (m, l, n, d) = (cfg.m_actions, cfg.l_movements, cfg.n_videos, cfg.dim);
    if m == 0 || d == 0 || n == 0 || l == 0 || cfg.frames_per_video == 0 {
        return Err(Error::Input("synthetic sizes must be positive".into()));
    }
    if l % m != 0 {
        return Err(Error::Input(format!("{l} movements not divisible by {m} actions")));
    }
    if !(cfg.noise_sigma >= 0.0) {
        return Err(Error::Input(format!("noise sigma {} must be non-negative", cfg.noise_sigma)));
    }
    let k = l / m;
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, "synth"));

    // Prototypes: Gram-Schmidt on Gaussian draws while m <= d.
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(m);
    while protos.len() < m {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if protos.len() < d {
            for p in &protos {
                let c: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(p) {
                    *x -= c * y;
                }
            }
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            normalize_in_place(&mut v);
            protos.push(v);
        }
    }

    let noisy = |base: &[f64], rng: &mut SplitMix64| -> Vec<f64> {
        if cfg.noise_sigma == 0.0 {
            return base.to_vec();
        }
        let mut v: Vec<f64> = base.iter().map(|x| x + cfg.noise_sigma * rng.normal()).collect();
        normalize_in_place(&mut v);
        v
    };

    let owners = |j: usize| -> Vec<usize> {
        let a = j / k;
        if j.is_multiple_of(k) && m > 1 {
            vec![a, (a + 1) % m]
        } else {
            vec![a]
        }
    };
    let mut movement_vecs = Vec::with_capacity(l);
    for j in 0..l {
        let own = owners(j);
        let mut mean = vec![0.0; d];
        for &a in &own {
            for (acc, v) in mean.iter_mut().zip(&protos[a]) {
                *acc += v / own.len() as f64;
            }
        }
        movement_vecs.push(noisy(&mean, &mut rng));
    }
    let mut action_movements: Vec<Vec<usize>> = vec![Vec::new(); m];
    for j in 0..l {
        for a in owners(j) {
            action_movements[a].push(j);
        }
    }

    let action_label = |a: usize| format!("action{a:02}");
    let video_label = |i: usize| format!("vid{i:05}");
    let mut frames = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    let mut pooled = Vec::with_capacity(n);
    for i in 0..n {
        let a = i % m;
        let mut data = Vec::with_capacity(cfg.frames_per_video * d);
        for _ in 0..cfg.frames_per_video {
            data.extend(noisy(&protos[a], &mut rng));
        }
        let ff = FrameFeatures::new(video_label(i), Tensor::new([cfg.frames_per_video, d], data)?)?;
        pooled.push(temporal_pool(&ff)?);
        frames.push(ff);

        let mut seen: Vec<usize> = action_movements[a].iter().copied().filter(|_| rng.next_f64() < 0.5).collect();
        if seen.is_empty() {
            let cands = &action_movements[a];
            seen.push(cands[rng.below(cands.len())]);
        }
        annotations.push(Annotation {
            video_id: video_label(i),
            action: action_label(a),
            movements: seen.into_iter().map(movement_observation).collect(),
        });
    }

    let graph = KnowledgeGraph::build(
        &annotations,
        &BuildOptions {
            min_count: cfg.min_count,
            split: SplitSpec {
                train_ratio: cfg.train_ratio,
                seed: derive_seed(cfg.seed, "split"),
            },
        },
    )?;

    let mut rows: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
    for (i, p) in pooled.iter().enumerate() {
        rows.insert(EntityId::video(video_label(i))?, p.clone());
    }
    for (a, p) in protos.iter().enumerate() {
        rows.insert(EntityId::action(action_label(a))?, p.clone());
    }
    for (j, v) in movement_vecs.iter().enumerate() {
        let o = movement_observation(j);
        rows.insert(EntityId::movement(&o.part, &o.state, o.object.as_deref())?, v.clone());
    }
    let ids = graph.entities().to_vec();
    let data: Vec<f64> = ids.iter().flat_map(|e| rows[e].clone()).collect();
    let table = EmbeddingTable::new(ids.clone(), Tensor::new([ids.len(), d], data)?)?;

    let hits = pooled
        .iter()
        .enumerate()
        .filter(|(i, v)| nearest(&protos, v) == i % m)
        .count();

    Ok(SynthDataset {
        graph,
        table,
        frames,
        annotations,
        prototypes: Tensor::new([m, d], protos.concat())?,
        nearest_prototype_top1: hits as f64 / n as f64,
    })
}

fn nearest(protos: &[Vec<f64>], v: &[f64]) -> usize {
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = (0, f64::NEG_INFINITY);
    for (a, p) in protos.iter().enumerate() {
        let c = v.iter().zip(p).map(|(x, y)| x * y).sum::<f64>() / nv;
        if c > best.1 {
            best = (a, c);
        }
    }
    best.0
}

impl SynthDataset {
    pub fn test_videos(&self) -> Vec<EntityId> {
        self.graph.videos_in(Split::Test)
    }

    pub fn movement_labels(&self) -> BTreeSet<String> {
        self.graph.entities_of(EntityKind::Movement).map(|e| e.label.clone()).collect()
    }
}
