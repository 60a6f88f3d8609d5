use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kgclip_core::checkpoint::Checkpoint;
use kgclip_core::config::TrainConfig;
use kgclip_core::eval::{self, SimilarityMatrix};
use kgclip_core::features::{synth_dataset, EmbeddingTable, SynthConfig};
use kgclip_core::graph::{read_annotations, BuildOptions, EntityId, EntityKind, KnowledgeGraph, Split, SplitSpec};
use kgclip_core::trainer::{video_labels, Trainer};
use kgclip_core::Tensor;

#[derive(Parser)]
#[command(name = "kgclip", version, about = "Knowledge-graph guided video/action alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the knowledge graph from an annotation stream.
    BuildGraph(BuildGraph),
    /// Produce entity feature tables.
    #[command(subcommand)]
    Features(Features),
    /// Train a model and write checkpoints plus per-epoch metrics.
    Train(Train),
    /// Score a split of videos and report Top-1/Top-5 accuracy.
    Eval(Eval),
    /// Rank actions for one video.
    Infer(Infer),
}

#[derive(Args)]
struct BuildGraph {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Features {
    /// Generate a separable toy dataset: annotations, graph and features.
    Synth(Synth),
    /// Convert JSON-lines vectors (or frame lists) into a feature table.
    Import(Import),
}

#[derive(Args)]
struct Synth {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    actions: usize,
    #[arg(long, default_value_t = 32)]
    movements: usize,
    #[arg(long, default_value_t = 400)]
    videos: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0.8)]
    train_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Import {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override one config key, e.g. `--set tau=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Where to write the per-video score table; defaults to `<checkpoint>.scores.tsv`.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    video: String,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::BuildGraph(a) => build_graph(a),
        Command::Features(Features::Synth(a)) => synth(a),
        Command::Features(Features::Import(a)) => import(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Infer(a) => infer(a),
    }
}

fn build_graph(a: BuildGraph) -> Result<()> {
    let annotations = read_annotations(&a.annotations)?;
    let opts = BuildOptions {
        min_count: a.min_count,
        split: SplitSpec { train_ratio: a.train_ratio, seed: a.seed },
    };
    let graph = KnowledgeGraph::build(&annotations, &opts)?;
    graph.save(&a.out)?;
    println!(
        "{} entities, {} triples, {} train / {} test videos",
        graph.entities().len(),
        graph.triples().len(),
        graph.videos_in(Split::Train).len(),
        graph.videos_in(Split::Test).len()
    );
    Ok(())
}

fn synth(a: Synth) -> Result<()> {
    let ds = synth_dataset(&SynthConfig {
        m_actions: a.actions,
        l_movements: a.movements,
        n_videos: a.videos,
        dim: a.dim,
        noise_sigma: a.noise,
        seed: a.seed,
        train_ratio: a.train_ratio,
        ..SynthConfig::default()
    })?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let path = a.out_dir.join("annotations.jsonl");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for ann in &ds.annotations {
        serde_json::to_writer(&mut w, ann)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    ds.graph.save(&a.out_dir.join("graph.jsonl"))?;
    ds.table.save(&a.out_dir.join("features.kgce"))?;
    println!(
        "wrote {} entities of dim {} to {}; nearest-prototype Top-1 {:.4}",
        ds.table.len(),
        ds.table.dim(),
        a.out_dir.display(),
        ds.nearest_prototype_top1
    );
    Ok(())
}

fn import(a: Import) -> Result<()> {
    let f = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let table = EmbeddingTable::import_jsonl(BufReader::new(f))?;
    table.save(&a.out)?;
    println!("imported {} entities of dim {}", table.len(), table.dim());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let graph = KnowledgeGraph::load(&a.graph)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() || !a.overrides.is_empty() {
                bail!("--resume uses the checkpoint's configuration; drop --config and --set");
            }
            Trainer::resume(&graph, Checkpoint::load(path)?)?
        }
        None => {
            let mut config = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            for kv in &a.overrides {
                config.apply_override(kv)?;
            }
            config.validate()?;
            let features = EmbeddingTable::load(&a.features)?;
            Trainer::new(&graph, &features, config)?
        }
    };
    let outcome = trainer.run(Some(&a.out))?;
    for m in &outcome.metrics {
        println!("{}", m.tsv_line());
    }
    if let Some((top1, _)) = &outcome.best {
        println!("best held-out Top-1 {top1:.4}");
    }
    Ok(())
}

/// Embedding rows for `ids`, taken from `features` where present and from
/// the checkpoint otherwise.
fn lookup(ckpt: &Checkpoint, features: &EmbeddingTable, ids: &[EntityId]) -> Result<Tensor> {
    let rows = ids
        .iter()
        .map(|id| {
            features
                .get(id)
                .or_else(|| ckpt.embedding(id))
                .map(<[f64]>::to_vec)
                .with_context(|| format!("no embedding for {id}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

fn checkpoint_actions(ckpt: &Checkpoint) -> Result<(Vec<EntityId>, Tensor)> {
    let actions: Vec<EntityId> = ckpt.entities.iter().filter(|e| e.kind == EntityKind::Action).cloned().collect();
    if actions.is_empty() {
        bail!("checkpoint holds no action entities");
    }
    let rows: Vec<Vec<f64>> = actions.iter().map(|a| ckpt.embedding(a).unwrap().to_vec()).collect();
    Ok((actions, Tensor::from_rows(&rows)?))
}

fn score(ckpt: &Checkpoint, videos: &[EntityId], v: &Tensor, actions: &[EntityId], a: &Tensor) -> Result<SimilarityMatrix> {
    let s = if ckpt.config.triplet_loss {
        eval::score_videos(&ckpt.model, videos, v, actions, a, ckpt.config.fusion_weight)?.fused
    } else {
        eval::mm_similarity(videos, v, actions, a)?
    };
    Ok(s)
}

fn evaluate(a: Eval) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let graph = KnowledgeGraph::load(&a.graph)?;
    let features = EmbeddingTable::load(&a.features)?;
    let videos = graph.videos_in(a.split);
    if videos.is_empty() {
        bail!("no {} videos in {}", a.split.name(), a.graph.display());
    }
    let (actions, action_rows) = checkpoint_actions(&ckpt)?;
    let s = score(&ckpt, &videos, &lookup(&ckpt, &features, &videos)?, &actions, &action_rows)?;
    let labels = video_labels(&graph, &videos)?;
    print!("{}", eval::evaluate(&s, &labels)?);

    let table = a.table.unwrap_or_else(|| sibling(&a.checkpoint, "scores.tsv"));
    let mut w = BufWriter::new(File::create(&table).with_context(|| format!("creating {}", table.display()))?);
    s.write_table(Some(&labels), &mut w)?;
    w.flush()?;
    Ok(())
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    s.into()
}

fn infer(a: Infer) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let features = EmbeddingTable::load(&a.features)?;
    let video: EntityId = match a.video.parse() {
        Ok(id) => id,
        Err(_) => EntityId::video(a.video.clone())?,
    };
    if video.kind != EntityKind::Video {
        bail!("{video} is not a video");
    }
    let (actions, action_rows) = checkpoint_actions(&ckpt)?;
    let videos = [video];
    let s = score(&ckpt, &videos, &lookup(&ckpt, &features, &videos)?, &actions, &action_rows)?;
    for ranking in eval::rankings(&s, a.top) {
        for (rank, (action, score)) in ranking.actions.iter().enumerate() {
            println!("{}\t{}\t{score:.6}", rank + 1, action.label);
        }
    }
    Ok(())
}
