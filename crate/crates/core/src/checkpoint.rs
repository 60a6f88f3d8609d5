//! Binary checkpoint: named tensor and text sections.
//!
//! Layout (little endian): magic `KGCK`, `u32` version, `u32` section count,
//! then per section a header (`u16` name length, name bytes, `u8` kind with
//! 0 = f64 tensor and 1 = UTF-8 text, `u32` rank, `u32` extents, `u64`
//! payload length) followed by the payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::EntityId;
use crate::model::TripletModel;
use crate::optim::OptimizerState;
use crate::params::{ParamGroup, ParamStore};

const MAGIC: &[u8; 4] = b"KGCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Section {
    Tensor(Tensor),
    Text(String),
}

/// Ordered named sections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, Section)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, section: Section) {
        self.sections.push((name.into(), section));
    }

    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Section::Tensor(t)) => Ok(t),
            Some(_) => Err(Error::Format(format!("section {name} is not a tensor"))),
            None => Err(Error::Format(format!("missing section {name}"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Section::Text(t)) => Ok(t),
            Some(_) => Err(Error::Format(format!("section {name} is not text"))),
            None => Err(Error::Format(format!("missing section {name}"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, section) in &self.sections {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match section {
                Section::Tensor(t) => {
                    w.write_all(&[0])?;
                    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
                    for &d in t.shape() {
                        w.write_all(&(d as u32).to_le_bytes())?;
                    }
                    w.write_all(&((t.numel() * 8) as u64).to_le_bytes())?;
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Section::Text(s) => {
                    w.write_all(&[1])?;
                    w.write_all(&0u32.to_le_bytes())?;
                    w.write_all(&(s.len() as u64).to_le_bytes())?;
                    w.write_all(s.as_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut out = Container::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            let kind = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            let payload = r.take(len)?;
            let section = match kind {
                0 => {
                    let numel: usize = dims.iter().product();
                    if len != numel * 8 {
                        return Err(Error::Format(format!(
                            "section {name}: {len} payload bytes for shape {dims:?}"
                        )));
                    }
                    let data = payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Section::Tensor(Tensor::new(dims, data).map_err(|e| Error::Format(format!("section {name}: {e}")))?)
                }
                1 => Section::Text(
                    String::from_utf8(payload.to_vec())
                        .map_err(|_| Error::Format(format!("section {name} is not UTF-8")))?,
                ),
                k => return Err(Error::Format(format!("section {name} has unknown kind {k}"))),
            };
            out.push(name, section);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Everything needed to score, evaluate, or resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Entity order of `embeddings` rows.
    pub entities: Vec<EntityId>,
    pub embeddings: Tensor,
    pub model: TripletModel,
    /// Moments for the model parameters followed by the embedding table.
    pub optimizer: OptimizerState,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push("config", Section::Text(self.config.to_string()));
        let ids: String = self.entities.iter().map(|e| format!("{e}\n")).collect();
        c.push("entities", Section::Text(ids));
        c.push("embeddings", Section::Tensor(self.embeddings.clone()));
        let store = self.model.store();
        for id in store.ids() {
            c.push(format!("param:{}", store.name(id)), Section::Tensor(store.get(id).clone()));
        }
        c.push("step", Section::Text(self.step.to_string()));
        c.push("opt:step", Section::Text(self.optimizer.step.to_string()));
        for (k, (m, v)) in self.optimizer.m.iter().zip(&self.optimizer.v).enumerate() {
            c.push(format!("opt:m:{k}"), Section::Tensor(m.clone()));
            c.push(format!("opt:v:{k}"), Section::Tensor(v.clone()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = TrainConfig::parse(c.text("config")?)?;
        let entities = c
            .text("entities")?
            .lines()
            .map(str::parse)
            .collect::<Result<Vec<EntityId>>>()?;
        let embeddings = c.tensor("embeddings")?.clone();
        if embeddings.ndim() != 2 || embeddings.shape()[0] != entities.len() {
            return Err(Error::Format(format!(
                "embedding table shape {:?} does not match {} entities",
                embeddings.shape(),
                entities.len()
            )));
        }
        let mut store = ParamStore::new();
        for name in c.names().filter_map(|n| n.strip_prefix("param:")) {
            store.add(name, c.tensor(&format!("param:{name}"))?.clone(), ParamGroup::Other);
        }
        let model = TripletModel::from_store(config.model_config(embeddings.shape()[1]), store)?;
        let parse_count = |name: &str| -> Result<u64> {
            c.text(name)?
                .parse()
                .map_err(|_| Error::Format(format!("section {name} is not a count")))
        };
        let step = parse_count("step")? as usize;
        let n_slots = model.store().len() + 1;
        let mut optimizer = OptimizerState { step: parse_count("opt:step")?, m: vec![], v: vec![] };
        for k in 0..n_slots {
            optimizer.m.push(c.tensor(&format!("opt:m:{k}"))?.clone());
            optimizer.v.push(c.tensor(&format!("opt:v:{k}"))?.clone());
        }
        let shapes = model.store().ids().map(|id| model.store().get(id).shape().to_vec()).chain([embeddings.shape().to_vec()]);
        for (k, shape) in shapes.enumerate() {
            if optimizer.m[k].shape() != shape || optimizer.v[k].shape() != shape {
                return Err(Error::Format(format!("optimizer slot {k} has the wrong shape")));
            }
        }
        Ok(Self { config, entities, embeddings, model, optimizer, step })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn embedding(&self, id: &EntityId) -> Option<&[f64]> {
        self.entities.iter().position(|e| e == id).map(|i| self.embeddings.row(i))
    }
}
