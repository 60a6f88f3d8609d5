//! Training loop: one batch per forward relation per step, AdamW with two
//! learning-rate groups, per-epoch held-out evaluation, checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, mm_similarity, score_videos, EvalReport};
use crate::features::EmbeddingTable;
use crate::graph::{EntityId, EntityKind, KnowledgeGraph, Relation, Split, TripleBatcher};
use crate::model::TripletModel;
use crate::objectives::{mm_contrastive_loss, total_loss, triplet_kl_loss, PositiveMask, RelationLosses};
use crate::optim::{adamw_update, clip_global_norm, lr_at, OptimizerState, UpdateSpec};
use crate::params::ParamGroup;

/// Loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    /// Triplet loss per forward relation, in `Relation::FORWARD` order.
    pub triplet: [f64; 3],
    /// Sum of the multi-modal losses over the forward relations.
    pub mm: f64,
    pub total: f64,
    pub lr_encoder: f64,
    pub lr_other: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub triplet: [f64; 3],
    pub mm: f64,
    pub total: f64,
    pub top1: f64,
    pub top5: f64,
}

impl EpochMetrics {
    /// `epoch, lr, L_tri(v-a), L_tri(b-v), L_tri(b-a), L_mm, Top-1, Top-5`.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.3e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.4}",
            self.epoch, self.lr, self.triplet[0], self.triplet[1], self.triplet[2], self.mm, self.top1, self.top5
        )
    }
}

/// Parameter-group rates used for each parameter in the last step, for
/// auditing the group discipline.
#[derive(Debug, Clone, PartialEq)]
pub struct RateAudit {
    pub name: String,
    pub group: ParamGroup,
    pub rate: f64,
}

pub struct Trainer<'g> {
    graph: &'g KnowledgeGraph,
    config: TrainConfig,
    entities: Vec<EntityId>,
    embeddings: Tensor,
    trainable_rows: Vec<bool>,
    model: TripletModel,
    optimizer: OptimizerState,
    step: usize,
    batchers: Vec<TripleBatcher>,
    steps_per_epoch: usize,
    last_rates: Vec<RateAudit>,
}

impl<'g> Trainer<'g> {
    /// Fresh training state. Every graph entity needs a feature row.
    pub fn new(graph: &'g KnowledgeGraph, features: &EmbeddingTable, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let embeddings = features.aligned_to(graph)?;
        let model = TripletModel::init(config.model_config(features.dim()), config.seed)?;
        let optimizer = OptimizerState::new(model.store().ids().map(|id| model.store().get(id)).chain([&embeddings]));
        let trainable_rows = graph.entities().iter().map(|e| features.is_trainable(e.kind)).collect();
        Self::assemble(graph, config, embeddings, trainable_rows, model, optimizer, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(graph: &'g KnowledgeGraph, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.entities != graph.entities() {
            return Err(Error::Data("checkpoint entities differ from the graph".into()));
        }
        let trainable_rows = ckpt.entities.iter().map(|e| e.kind != EntityKind::Video).collect();
        Self::assemble(graph, ckpt.config, ckpt.embeddings, trainable_rows, ckpt.model, ckpt.optimizer, ckpt.step)
    }

    fn assemble(
        graph: &'g KnowledgeGraph,
        config: TrainConfig,
        embeddings: Tensor,
        trainable_rows: Vec<bool>,
        model: TripletModel,
        optimizer: OptimizerState,
        step: usize,
    ) -> Result<Self> {
        let mut batchers = Vec::new();
        for r in Relation::FORWARD {
            let b = TripleBatcher::new(graph, r, config.batch_size, config.seed)?;
            if b.num_triples() == 0 {
                return Err(Error::Data(format!("graph has no {r} triples")));
            }
            batchers.push(b);
        }
        let steps_per_epoch = batchers[0].batches_per_epoch();
        Ok(Self {
            graph,
            config,
            entities: graph.entities().to_vec(),
            embeddings,
            trainable_rows,
            model,
            optimizer,
            step,
            batchers,
            steps_per_epoch,
            last_rates: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &TripletModel {
        &self.model
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn global_step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch
    }

    pub fn last_rates(&self) -> &[RateAudit] {
        &self.last_rates
    }

    /// Learning rates `(encoder group, other group)` at `step`.
    pub fn rates_at(&self, step: usize) -> (f64, f64) {
        let w = self.config.warmup_epochs * self.steps_per_epoch;
        let t = self.total_steps();
        (
            lr_at(self.config.base_lr_encoder, step, w, t),
            lr_at(self.config.base_lr_other, step, w, t),
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            entities: self.entities.clone(),
            embeddings: self.embeddings.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
        }
    }

    /// Forward pass and gradients for the batches of `step`, without
    /// updating anything. Returns the losses and one gradient per optimizer
    /// slot (model parameters, then the embedding table).
    pub fn losses_and_grads(&self, step: usize) -> Result<(StepLosses, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let table = tape.param(self.embeddings.clone());
        let mut opts = self.config.loss_options();
        if self.config.learnable_scale {
            opts.logit_scale = Some(bound.var("logit_scale"));
        }
        let lambda = self.config.effective_lambda();
        let mut terms = Vec::new();
        for batcher in &self.batchers {
            let batch = batcher.nth_batch(step).expect("non-empty relation");
            if batch.len() < 2 {
                continue;
            }
            let index = |e: &EntityId| self.graph.entity_index(e).expect("graph entity");
            let hi: Vec<usize> = batch.iter().map(|t| index(&t.head)).collect();
            let ti: Vec<usize> = batch.iter().map(|t| index(&t.tail)).collect();
            let heads = tape.gather(table, &hi)?;
            let tails = tape.gather(table, &ti)?;
            let mask = PositiveMask::for_triples(self.graph, &batch);
            let r = batcher.relation();
            let triplet = if self.config.triplet_loss {
                Some(triplet_kl_loss(&mut tape, &bound, r, heads, tails, &mask, &opts)?)
            } else {
                None
            };
            let mm = if lambda > 0.0 {
                Some(mm_contrastive_loss(&mut tape, heads, tails, &mask, &opts)?)
            } else {
                None
            };
            terms.push(RelationLosses { relation: r, triplet, mm });
        }
        let total = total_loss(&mut tape, &terms, lambda)?;
        tape.backward(total)?;

        let mut losses = StepLosses {
            triplet: [0.0; 3],
            mm: 0.0,
            total: tape.value(total).item(),
            lr_encoder: 0.0,
            lr_other: 0.0,
        };
        (losses.lr_encoder, losses.lr_other) = self.rates_at(step);
        for t in &terms {
            let k = Relation::FORWARD.iter().position(|&r| r == t.relation).unwrap();
            if let Some(v) = t.triplet {
                losses.triplet[k] = tape.value(v).item();
            }
            if let Some(v) = t.mm {
                losses.mm += tape.value(v).item();
            }
        }
        let grad = |v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
        };
        let mut grads: Vec<Tensor> = bound.vars().iter().map(|&v| grad(v)).collect();
        grads.push(grad(table));
        Ok((losses, grads))
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepLosses> {
        let (losses, mut grads) = self.losses_and_grads(self.step)?;
        if self.config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.config.grad_clip);
        }
        self.optimizer.step += 1;
        let t = self.optimizer.step;
        let n_model = self.model.store().len();
        let store = self.model.store();
        let frozen = [
            (!self.config.deviation_compensation).then(|| store.find("deviation")).flatten(),
            (!self.config.learnable_scale).then(|| store.find("logit_scale")).flatten(),
        ];
        self.last_rates.clear();
        let ids: Vec<_> = self.model.store().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if frozen.contains(&Some(id)) {
                continue;
            }
            let name = self.model.store().name(id).to_string();
            let group = self.model.store().group(id);
            let rate = match group {
                ParamGroup::Encoder => losses.lr_encoder,
                ParamGroup::Other => losses.lr_other,
            };
            let spec = UpdateSpec { name: &name, rate, weight_decay: self.config.weight_decay, row_mask: None };
            let (m, v) = (&mut self.optimizer.m[k], &mut self.optimizer.v[k]);
            adamw_update(self.model.store_mut().get_mut(id), &grads[k], m, v, t, spec)?;
            self.last_rates.push(RateAudit { name, group, rate });
        }
        let spec = UpdateSpec {
            name: "entity embeddings",
            rate: losses.lr_encoder,
            weight_decay: self.config.weight_decay,
            row_mask: Some(&self.trainable_rows),
        };
        let (m, v) = (&mut self.optimizer.m[n_model], &mut self.optimizer.v[n_model]);
        adamw_update(&mut self.embeddings, &grads[n_model], m, v, t, spec)?;
        self.last_rates.push(RateAudit {
            name: "entity embeddings".into(),
            group: ParamGroup::Encoder,
            rate: losses.lr_encoder,
        });
        self.step += 1;
        Ok(losses)
    }

    /// Current embedding rows for `ids`.
    pub fn rows(&self, ids: &[EntityId]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| {
                self.graph
                    .entity_index(id)
                    .map(|i| self.embeddings.row(i).to_vec())
                    .ok_or_else(|| Error::Input(format!("unknown entity {id}")))
            })
            .collect::<Result<_>>()?;
        Tensor::from_rows(&rows)
    }

    /// Top-k on the held-out videos; `None` without held-out videos. The
    /// multi-modal-only ablation is scored with the raw cosine alone.
    pub fn evaluate(&self) -> Result<Option<EvalReport>> {
        let videos = self.graph.videos_in(Split::Test);
        if videos.is_empty() {
            return Ok(None);
        }
        evaluate_state(self.graph, &self.model, &self.embeddings, &self.config, &videos).map(Some)
    }

    /// Runs the remaining epochs. Writes metrics and checkpoints into
    /// `out` when given.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainOutcome> {
        let mut metrics = Vec::new();
        let mut best: Option<(f64, Checkpoint)> = None;
        let mut log = String::new();
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let first_epoch = self.step / self.steps_per_epoch.max(1);
        for epoch in first_epoch..self.config.epochs {
            let mut sum = StepLosses { triplet: [0.0; 3], mm: 0.0, total: 0.0, lr_encoder: 0.0, lr_other: 0.0 };
            let mut n = 0.0;
            while self.step < (epoch + 1) * self.steps_per_epoch {
                let l = self.step()?;
                for k in 0..3 {
                    sum.triplet[k] += l.triplet[k];
                }
                sum.mm += l.mm;
                sum.total += l.total;
                sum.lr_other = l.lr_other;
                n += 1.0;
            }
            let report = self.evaluate()?;
            let (top1, top5) = report.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.top1, r.top5));
            let m = EpochMetrics {
                epoch: epoch + 1,
                lr: sum.lr_other,
                triplet: sum.triplet.map(|x| x / n),
                mm: sum.mm / n,
                total: sum.total / n,
                top1,
                top5,
            };
            writeln!(log, "{}", m.tsv_line()).unwrap();
            if let Some(dir) = out {
                std::fs::write(dir.join(METRICS_FILE), &log).map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
            }
            if top1.is_finite() && best.as_ref().is_none_or(|(b, _)| top1 > *b) {
                let ckpt = self.checkpoint();
                if let Some(dir) = out {
                    ckpt.save(&dir.join(BEST_FILE))?;
                }
                best = Some((top1, ckpt));
            }
            metrics.push(m);
        }
        let last = self.checkpoint();
        if let Some(dir) = out {
            last.save(&dir.join(FINAL_FILE))?;
            if metrics.is_empty() {
                std::fs::write(dir.join(METRICS_FILE), "").map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
            }
        }
        Ok(TrainOutcome {
            checkpoint: last,
            best: best.map(|(top1, c)| (top1, Box::new(c))),
            metrics,
        })
    }
}

pub const FINAL_FILE: &str = "final.kgck";
pub const BEST_FILE: &str = "best.kgck";
pub const METRICS_FILE: &str = "metrics.tsv";

/// Held-out evaluation of an arbitrary state (trainer or checkpoint).
pub fn evaluate_state(
    graph: &KnowledgeGraph,
    model: &TripletModel,
    embeddings: &Tensor,
    config: &TrainConfig,
    videos: &[EntityId],
) -> Result<EvalReport> {
    let rows = |ids: &[EntityId]| -> Result<Tensor> {
        let r: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| {
                graph
                    .entity_index(id)
                    .map(|i| embeddings.row(i).to_vec())
                    .ok_or_else(|| Error::Input(format!("unknown entity {id}")))
            })
            .collect::<Result<_>>()?;
        Tensor::from_rows(&r)
    };
    let actions = graph.actions();
    let labels = video_labels(graph, videos)?;
    let (v, a) = (rows(videos)?, rows(&actions)?);
    let s = if config.triplet_loss {
        score_videos(model, videos, &v, &actions, &a, config.fusion_weight)?.fused
    } else {
        mm_similarity(videos, &v, &actions, &a)?
    };
    evaluate(&s, &labels)
}

/// Ground-truth action of each video from the graph's annotation record.
pub fn video_labels(graph: &KnowledgeGraph, videos: &[EntityId]) -> Result<Vec<EntityId>> {
    videos
        .iter()
        .map(|v| {
            let a = graph
                .video_actions()
                .get(&v.label)
                .ok_or_else(|| Error::Data(format!("video {v} has no recorded action")))?;
            EntityId::action(a.clone())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Best held-out Top-1 and the state that reached it.
    pub best: Option<(f64, Box<Checkpoint>)>,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains from scratch; see [`Trainer::run`].
pub fn train(
    graph: &KnowledgeGraph,
    features: &EmbeddingTable,
    config: TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    Trainer::new(graph, features, config)?.run(out)
}
