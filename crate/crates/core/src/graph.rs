//! Multi-modal knowledge graph over videos, actions and body movements.
//!
//! The graph is built once from action-parsing annotations and is
//! immutable afterwards. Every forward triple (`v-a`, `b-v`, `b-a`) is
//! stored together with its reverse (`a-v`, `v-b`, `a-b`). Test videos are
//! entities of the graph but never endpoints of a triple.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    Video,
    Action,
    Movement,
}

impl EntityKind {
    pub const ALL: [EntityKind; 3] = [EntityKind::Video, EntityKind::Action, EntityKind::Movement];

    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Video => "video",
            EntityKind::Action => "action",
            EntityKind::Movement => "movement",
        }
    }
}

impl FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(EntityKind::Video),
            "action" => Ok(EntityKind::Action),
            "movement" => Ok(EntityKind::Movement),
            other => Err(Error::Format(format!("unknown entity kind {other:?}"))),
        }
    }
}

/// A graph vertex, written `kind:label`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId {
    pub kind: EntityKind,
    pub label: String,
}

impl EntityId {
    pub fn new(kind: EntityKind, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        validate_label(kind, &label)?;
        Ok(Self { kind, label })
    }

    pub fn video(label: impl Into<String>) -> Result<Self> {
        Self::new(EntityKind::Video, label)
    }

    pub fn action(label: impl Into<String>) -> Result<Self> {
        Self::new(EntityKind::Action, label)
    }

    /// Movement node labelled `part:state` or `part:state:object`.
    pub fn movement(part: &str, state: &str, object: Option<&str>) -> Result<Self> {
        let label = match object {
            Some(o) => format!("{part}:{state}:{o}"),
            None => format!("{part}:{state}"),
        };
        Self::new(EntityKind::Movement, label)
    }
}

fn validate_label(kind: EntityKind, label: &str) -> Result<()> {
    if label.is_empty() {
        return Err(Error::Format(format!("empty {} label", kind.name())));
    }
    if label.chars().any(|c| c == '\n' || c == '\r' || c == '\t') {
        return Err(Error::Format(format!("control character in label {label:?}")));
    }
    if kind == EntityKind::Movement {
        let parts: Vec<&str> = label.split(':').collect();
        if !(2..=3).contains(&parts.len()) || parts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::Format(format!(
                "movement label {label:?} is not part:state[:object]"
            )));
        }
    }
    Ok(())
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.label)
    }
}

impl FromStr for EntityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, label) = s
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("entity {s:?} is not kind:label")))?;
        EntityId::new(kind.parse()?, label)
    }
}

/// The six relation types; each forward type has a paired reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    VideoAction,
    MovementVideo,
    MovementAction,
    ActionVideo,
    VideoMovement,
    ActionMovement,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::VideoAction,
        Relation::MovementVideo,
        Relation::MovementAction,
        Relation::ActionVideo,
        Relation::VideoMovement,
        Relation::ActionMovement,
    ];

    /// The relation set the training objective sums over.
    pub const FORWARD: [Relation; 3] = [
        Relation::VideoAction,
        Relation::MovementVideo,
        Relation::MovementAction,
    ];

    /// Row of this relation in the relation table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::VideoAction => "v-a",
            Relation::MovementVideo => "b-v",
            Relation::MovementAction => "b-a",
            Relation::ActionVideo => "a-v",
            Relation::VideoMovement => "v-b",
            Relation::ActionMovement => "a-b",
        }
    }

    pub fn head_kind(self) -> EntityKind {
        match self {
            Relation::VideoAction | Relation::VideoMovement => EntityKind::Video,
            Relation::MovementVideo | Relation::MovementAction => EntityKind::Movement,
            Relation::ActionVideo | Relation::ActionMovement => EntityKind::Action,
        }
    }

    pub fn tail_kind(self) -> EntityKind {
        self.reverse().head_kind()
    }

    pub fn reverse(self) -> Relation {
        match self {
            Relation::VideoAction => Relation::ActionVideo,
            Relation::ActionVideo => Relation::VideoAction,
            Relation::MovementVideo => Relation::VideoMovement,
            Relation::VideoMovement => Relation::MovementVideo,
            Relation::MovementAction => Relation::ActionMovement,
            Relation::ActionMovement => Relation::MovementAction,
        }
    }

    pub fn is_forward(self) -> bool {
        Relation::FORWARD.contains(&self)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Relation::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown relation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: Relation,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: Relation, tail: EntityId) -> Result<Self> {
        if head.kind != relation.head_kind() || tail.kind != relation.tail_kind() {
            return Err(Error::Data(format!(
                "triple ({head}, {relation}, {tail}) violates the relation's kinds"
            )));
        }
        Ok(Self {
            head,
            relation,
            tail,
        })
    }

    pub fn reversed(&self) -> Triple {
        Triple {
            head: self.tail.clone(),
            relation: self.relation.reverse(),
            tail: self.head.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split tag {other:?}"))),
        }
    }
}

// ----- annotations ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MovementObservation {
    pub part: String,
    pub state: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
}

/// One line of the annotation stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub video_id: String,
    pub action: String,
    #[serde(default)]
    pub movements: Vec<MovementObservation>,
}

/// Parses newline-delimited JSON annotations. Blank lines are skipped.
pub fn parse_annotations(reader: impl BufRead) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Annotation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        validate_annotation(&record).map_err(|detail| Error::Parse {
            line: line_no,
            detail,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(std::io::BufReader::new(file))
}

fn validate_annotation(a: &Annotation) -> std::result::Result<(), String> {
    if a.video_id.trim().is_empty() {
        return Err("empty video_id".into());
    }
    if a.action.trim().is_empty() {
        return Err("empty action label".into());
    }
    EntityId::video(a.video_id.clone()).map_err(|e| e.to_string())?;
    EntityId::action(a.action.clone()).map_err(|e| e.to_string())?;
    for m in &a.movements {
        let bad = |s: &str| s.trim().is_empty() || s.contains(':');
        if bad(&m.part) || bad(&m.state) || m.object.as_deref().is_some_and(bad) {
            return Err(format!("malformed movement {m:?}"));
        }
        EntityId::movement(&m.part, &m.state, m.object.as_deref()).map_err(|e| e.to_string())?;
    }
    Ok(())
}

// ----- graph ------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub min_count: usize,
    pub split: SplitSpec,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            min_count: 1,
            split: SplitSpec {
                train_ratio: 0.8,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<EntityId>,
    index: BTreeMap<EntityId, usize>,
    triples: BTreeSet<Triple>,
    splits: BTreeMap<String, Split>,
    video_actions: BTreeMap<String, String>,
}

impl KnowledgeGraph {
    /// Assembles a graph and checks every structural invariant.
    pub fn from_parts(
        entities: impl IntoIterator<Item = EntityId>,
        triples: impl IntoIterator<Item = Triple>,
        splits: BTreeMap<String, Split>,
        video_actions: BTreeMap<String, String>,
    ) -> Result<Self> {
        let entities: BTreeSet<EntityId> = entities.into_iter().collect();
        let entities: Vec<EntityId> = entities.into_iter().collect();
        let index = entities.iter().cloned().enumerate().map(|(i, e)| (e, i)).collect();
        let g = Self {
            entities,
            index,
            triples: triples.into_iter().collect(),
            splits,
            video_actions,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        for t in &self.triples {
            for e in [&t.head, &t.tail] {
                if !self.index.contains_key(e) {
                    return Err(Error::Data(format!("triple endpoint {e} is not an entity")));
                }
            }
            if t.head.kind != t.relation.head_kind() || t.tail.kind != t.relation.tail_kind() {
                return Err(Error::Data(format!("kind violation in ({}, {}, {})", t.head, t.relation, t.tail)));
            }
            if !self.triples.contains(&t.reversed()) {
                return Err(Error::Data(format!(
                    "missing reverse of ({}, {}, {})",
                    t.head, t.relation, t.tail
                )));
            }
            for e in [&t.head, &t.tail] {
                if e.kind == EntityKind::Video && self.splits.get(&e.label) != Some(&Split::Train) {
                    return Err(Error::Data(format!("non-training video {e} appears in a triple")));
                }
            }
        }
        for e in &self.entities {
            if e.kind == EntityKind::Video && !self.splits.contains_key(&e.label) {
                return Err(Error::Data(format!("video {e} has no split tag")));
            }
        }
        Ok(())
    }

    /// Builds the graph from annotations.
    ///
    /// Emits `(v, v-a, a)` per training video, `(b, b-v, v)` per distinct
    /// movement observed in a training video, and `(b, b-a, a)` for
    /// movements seen in at least `min_count` training videos of `a`,
    /// plus every reverse.
    pub fn build(annotations: &[Annotation], opts: &BuildOptions) -> Result<Self> {
        if opts.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let ratio = opts.split.train_ratio;
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("train ratio {ratio} outside [0, 1]")));
        }

        // Merge duplicate records per video.
        let mut videos: BTreeMap<String, (String, BTreeSet<EntityId>)> = BTreeMap::new();
        for a in annotations {
            let movements = a
                .movements
                .iter()
                .map(|m| EntityId::movement(&m.part, &m.state, m.object.as_deref()))
                .collect::<Result<BTreeSet<_>>>()?;
            match videos.get_mut(&a.video_id) {
                Some((action, seen)) => {
                    if *action != a.action {
                        return Err(Error::Data(format!(
                            "video {} labelled both {action:?} and {:?}",
                            a.video_id, a.action
                        )));
                    }
                    seen.extend(movements);
                }
                None => {
                    videos.insert(a.video_id.clone(), (a.action.clone(), movements));
                }
            }
        }

        let mut by_action: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (vid, (action, _)) in &videos {
            by_action.entry(action).or_default().push(vid);
        }
        let mut splits = BTreeMap::new();
        for (action, vids) in &by_action {
            let mut order = vids.clone();
            SplitMix64::new(derive_seed(opts.split.seed, &format!("split:{action}"))).shuffle(&mut order);
            let n_train = (ratio * order.len() as f64).round() as usize;
            for (i, v) in order.iter().enumerate() {
                let tag = if i < n_train { Split::Train } else { Split::Test };
                splits.insert((*v).to_string(), tag);
            }
        }

        let mut entities = BTreeSet::new();
        let mut triples = BTreeSet::new();
        let mut support: BTreeMap<(EntityId, EntityId), usize> = BTreeMap::new();
        for (vid, (action, movements)) in &videos {
            let v = EntityId::video(vid.clone())?;
            let a = EntityId::action(action.clone())?;
            entities.insert(v.clone());
            entities.insert(a.clone());
            if splits[vid] != Split::Train {
                continue;
            }
            triples.insert(Triple::new(v.clone(), Relation::VideoAction, a.clone())?);
            for m in movements {
                entities.insert(m.clone());
                triples.insert(Triple::new(m.clone(), Relation::MovementVideo, v.clone())?);
                *support.entry((m.clone(), a.clone())).or_default() += 1;
            }
        }
        for ((m, a), count) in support {
            if count >= opts.min_count {
                triples.insert(Triple::new(m, Relation::MovementAction, a)?);
            }
        }
        let reverses: Vec<Triple> = triples.iter().map(Triple::reversed).collect();
        triples.extend(reverses);

        let video_actions = videos.into_iter().map(|(v, (a, _))| (v, a)).collect();
        Self::from_parts(entities, triples, splits, video_actions)
    }

    pub fn entities(&self) -> &[EntityId] {
        &self.entities
    }

    pub fn entity_index(&self, e: &EntityId) -> Option<usize> {
        self.index.get(e).copied()
    }

    pub fn entities_of(&self, kind: EntityKind) -> impl Iterator<Item = &EntityId> {
        self.entities.iter().filter(move |e| e.kind == kind)
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.contains(t)
    }

    /// Triples of one relation, in sorted order.
    pub fn triples_of(&self, relation: Relation) -> Vec<&Triple> {
        self.triples.iter().filter(|t| t.relation == relation).collect()
    }

    pub fn split_of(&self, video: &str) -> Option<Split> {
        self.splits.get(video).copied()
    }

    pub fn splits(&self) -> &BTreeMap<String, Split> {
        &self.splits
    }

    /// Ground-truth action label of every video, including test videos.
    pub fn video_actions(&self) -> &BTreeMap<String, String> {
        &self.video_actions
    }

    pub fn videos_in(&self, split: Split) -> Vec<EntityId> {
        self.entities_of(EntityKind::Video)
            .filter(|v| self.splits.get(&v.label) == Some(&split))
            .cloned()
            .collect()
    }

    pub fn actions(&self) -> Vec<EntityId> {
        self.entities_of(EntityKind::Action).cloned().collect()
    }

    // ----- persistence ------------------------------------------------------

    /// Writes one JSON triple per line.
    pub fn write_triples(&self, mut w: impl Write) -> std::io::Result<()> {
        for t in &self.triples {
            let rec = TripleRecord {
                h: t.head.to_string(),
                r: t.relation.name().to_string(),
                t: t.tail.to_string(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Writes the sidecar manifest: one entity per line, videos followed by
    /// a tab, their split tag, another tab and their action label.
    pub fn write_manifest(&self, mut w: impl Write) -> std::io::Result<()> {
        for e in &self.entities {
            if e.kind == EntityKind::Video {
                let split = self.splits[&e.label];
                let action = &self.video_actions[&e.label];
                writeln!(w, "{e}\t{}\t{action}", split.name())?;
            } else {
                writeln!(w, "{e}")?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_triples(&mut f).map_err(|e| Error::io(path, e))?;
        let mp = manifest_path(path);
        let mut m = std::io::BufWriter::new(std::fs::File::create(&mp).map_err(|e| Error::io(&mp, e))?);
        self.write_manifest(&mut m).map_err(|e| Error::io(&mp, e))?;
        m.flush().map_err(|e| Error::io(&mp, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(triples: impl BufRead, manifest: impl BufRead) -> Result<Self> {
        let mut entities = Vec::new();
        let mut splits = BTreeMap::new();
        let mut video_actions = BTreeMap::new();
        for (i, line) in manifest.lines().enumerate() {
            let parse_err = |detail: String| Error::Parse { line: i + 1, detail };
            let line = line.map_err(|e| parse_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let e: EntityId = fields.next().unwrap_or("").parse().map_err(|e: Error| parse_err(e.to_string()))?;
            if e.kind == EntityKind::Video {
                let split: Split = fields
                    .next()
                    .ok_or_else(|| parse_err(format!("video {e} lacks a split tag")))?
                    .parse()
                    .map_err(|e: Error| parse_err(e.to_string()))?;
                let action = fields
                    .next()
                    .filter(|a| !a.is_empty())
                    .ok_or_else(|| parse_err(format!("video {e} lacks an action label")))?;
                splits.insert(e.label.clone(), split);
                video_actions.insert(e.label.clone(), action.to_string());
            }
            entities.push(e);
        }
        let mut set = Vec::new();
        for (i, line) in triples.lines().enumerate() {
            let parse_err = |detail: String| Error::Parse { line: i + 1, detail };
            let line = line.map_err(|e| parse_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TripleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let t = Triple::new(
                rec.h.parse().map_err(|e: Error| parse_err(e.to_string()))?,
                rec.r.parse().map_err(|e: Error| parse_err(e.to_string()))?,
                rec.t.parse().map_err(|e: Error| parse_err(e.to_string()))?,
            )
            .map_err(|e| parse_err(e.to_string()))?;
            set.push(t);
        }
        Self::from_parts(entities, set, splits, video_actions)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let open = |p: &Path| -> Result<std::io::BufReader<std::fs::File>> {
            Ok(std::io::BufReader::new(std::fs::File::open(p).map_err(|e| Error::io(p, e))?))
        };
        Self::read(open(path)?, open(&manifest_path(path))?)
    }
}

/// Location of the entity manifest written next to a triple file.
pub fn manifest_path(triples: &Path) -> std::path::PathBuf {
    let mut s = triples.as_os_str().to_owned();
    s.push(".manifest");
    s.into()
}

#[derive(Serialize, Deserialize)]
struct TripleRecord {
    h: String,
    r: String,
    t: String,
}

// ----- batching -----------------------------------------------------------------

/// Seeded in-batch sampler over the forward triples of one relation.
///
/// Epoch `e` is a permutation of the relation's triples keyed by
/// `(seed, relation, e)`, cut into batches of `batch_size` with the final
/// short batch kept. Batches are addressable without replaying earlier ones.
#[derive(Debug, Clone)]
pub struct TripleBatcher {
    relation: Relation,
    triples: Vec<Triple>,
    batch_size: usize,
    seed: u64,
}

impl TripleBatcher {
    pub fn new(graph: &KnowledgeGraph, relation: Relation, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {batch_size} too small for in-batch contrast"
            )));
        }
        Ok(Self {
            relation,
            triples: graph.triples_of(relation).into_iter().cloned().collect(),
            batch_size,
            seed,
        })
    }

    pub fn relation(&self) -> Relation {
        self.relation
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.triples.len().div_ceil(self.batch_size)
    }

    fn permutation(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.triples.len()).collect();
        let key = format!("batch:{}:{epoch}", self.relation.name());
        SplitMix64::new(derive_seed(self.seed, &key)).shuffle(&mut order);
        order
    }

    /// All batches of one epoch.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<Triple>> {
        let order = self.permutation(epoch);
        order
            .chunks(self.batch_size)
            .map(|c| c.iter().map(|&i| self.triples[i].clone()).collect())
            .collect()
    }

    /// The `n`-th batch of the endless stream formed by consecutive epochs.
    pub fn nth_batch(&self, n: usize) -> Option<Vec<Triple>> {
        let per = self.batches_per_epoch();
        if per == 0 {
            return None;
        }
        let order = self.permutation(n / per);
        let start = (n % per) * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        Some(order[start..end].iter().map(|&i| self.triples[i].clone()).collect())
    }
}
