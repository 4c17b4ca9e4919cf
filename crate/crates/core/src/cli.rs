//! Command-line front end.
//!
//! Settings resolve as defaults, then the `--config` file, then flags.
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::blocks::{block_index_to_grid, partition, Frame, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::geometry::{load_manifest, load_xyz, PointCloud};
use crate::inference::{classify, export_embeddings, export_heatmap, part_reason, reason, FrozenModel, RankedClass};
use crate::labels::{
    classification_labels, embed_label_sets, embedding_records, ingest_embeddings, label_sets_from_records,
    parse_embedding_records, write_records, LabelSet, DEFAULT_FALLBACK_DIM,
};
use crate::losses::{KernelMode, LocalMode};
use crate::synth::{write_dataset, Archetype, DatasetPlan};
use crate::training::{gradient_check, load_checkpoint, save_checkpoint, train, write_metrics, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pointcube", version, about = "Block-level point cloud / text contrastive models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalOpts {
    /// key=value settings file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// standard | literal
    #[arg(long, global = true)]
    pub kernel: Option<KernelMode>,
    /// hard | soft | off
    #[arg(long = "local-loss", global = true)]
    pub local_loss: Option<LocalMode>,
    #[arg(long = "min-points", global = true)]
    pub min_points: Option<usize>,
    #[arg(long = "d-e", global = true)]
    pub d_e: Option<usize>,
    #[arg(long = "d-out", global = true)]
    pub d_out: Option<usize>,
    /// aabb | unit
    #[arg(long, global = true)]
    pub frame: Option<Frame>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural dataset with manifests and fallback embeddings
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated archetypes
        #[arg(long, value_delimiter = ',', default_value = "slab-table,vertical-pole,pole-on-slab")]
        archetypes: Vec<Archetype>,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 10)]
        test_per_class: usize,
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long, default_value_t = 0.005)]
        jitter: f64,
        #[arg(long, default_value_t = DEFAULT_FALLBACK_DIM)]
        embed_dim: usize,
    },
    /// Print the block partition of one object as JSON
    PartitionDump {
        #[arg(long)]
        object: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Embed label text with the deterministic fallback embedder
    EmbedLabels {
        /// Label records (JSON lines; vectors ignored)
        #[arg(long, conflicts_with = "classes")]
        labels: Option<PathBuf>,
        /// Comma-separated class names for classification labels
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        #[arg(long, default_value_t = DEFAULT_FALLBACK_DIM)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Rank classes for objects by global similarity
    Classify(QueryArgs),
    /// Rank classes using reasoning sentences
    Reason(QueryArgs),
    /// Score the 27 blocks of an object against a text prompt
    PartReason {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        object: PathBuf,
        /// Prompt text, embedded with the fallback embedder
        #[arg(long, required_unless_present = "prompt_embedding")]
        prompt_file: Option<PathBuf>,
        /// JSON array holding a raw prompt embedding
        #[arg(long, conflicts_with = "prompt_file")]
        prompt_embedding: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
        #[arg(long)]
        out_ply: Option<PathBuf>,
    },
    /// Finite-difference check of the training gradient
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write global and block embeddings of objects as JSON lines
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required_unless_present = "object")]
        manifest: Option<PathBuf>,
        #[arg(long, conflicts_with = "manifest")]
        object: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, required_unless_present = "manifest")]
    pub object: Option<PathBuf>,
    /// Evaluate every manifest entry and report top-1 accuracy
    #[arg(long, conflicts_with = "object")]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

/// Settings that may come from a config file or flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub threads: Option<usize>,
}

const CONFIG_KEYS: &[&str] = &[
    "seed",
    "label_seed",
    "tau",
    "kernel",
    "local_loss",
    "min_points",
    "frame",
    "threads",
    "epochs",
    "batch_size",
    "lr",
    "d_e",
    "d_out",
    "d_et",
    "encoder_hidden",
    "self_heads",
    "cross_heads",
    "ff_width",
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

impl Settings {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse_value(key, v)?,
            "label_seed" => t.label_seed = parse_value(key, v)?,
            "tau" => t.loss.tau = parse_value(key, v)?,
            "kernel" => t.loss.kernel = v.parse()?,
            "local_loss" => t.loss.local_mode = v.parse()?,
            "min_points" => t.loss.min_points = parse_value(key, v)?,
            "frame" => t.frame = v.parse()?,
            "threads" => self.threads = Some(parse_value(key, v)?),
            "epochs" => t.epochs = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "lr" => t.lr = parse_value(key, v)?,
            "d_e" => {
                t.model.d_e = parse_value(key, v)?;
                t.model.ff_width = 2 * t.model.d_e;
            }
            "d_out" => t.model.d_out = parse_value(key, v)?,
            "d_et" => t.model.d_et = parse_value(key, v)?,
            "encoder_hidden" => {
                t.model.encoder_hidden = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_value(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "self_heads" => t.model.self_heads = parse_value(key, v)?,
            "cross_heads" => t.model.cross_heads = parse_value(key, v)?,
            "ff_width" => t.model.ff_width = parse_value(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown setting {key:?} (known: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn resolve(opts: &GlobalOpts) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = &opts.config {
            s.apply_file_text(&crate::error::read_text(path)?)?;
        }
        let t = &mut s.train;
        if let Some(v) = opts.seed {
            t.seed = v;
        }
        if let Some(v) = opts.tau {
            t.loss.tau = v;
        }
        if let Some(v) = opts.kernel {
            t.loss.kernel = v;
        }
        if let Some(v) = opts.local_loss {
            t.loss.local_mode = v;
        }
        if let Some(v) = opts.min_points {
            t.loss.min_points = v;
        }
        if let Some(v) = opts.d_e {
            t.model.d_e = v;
            t.model.ff_width = 2 * v;
        }
        if let Some(v) = opts.d_out {
            t.model.d_out = v;
        }
        if let Some(v) = opts.frame {
            t.frame = v;
        }
        if opts.threads.is_some() {
            s.threads = opts.threads;
        }
        s.train.loss.validate()?;
        Ok(s)
    }
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        e if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_objects(object: Option<&Path>, manifest: Option<&Path>) -> Result<Vec<PointCloud>> {
    match (object, manifest) {
        (Some(o), _) => Ok(vec![load_xyz(o)?]),
        (None, Some(m)) => load_manifest(m)?.load_clouds(),
        (None, None) => Err(Error::Config("need --object or --manifest".into())),
    }
}

fn query(args: &QueryArgs, reasoning: bool, out: &mut dyn Write) -> Result<i32> {
    let model = FrozenModel::new(load_checkpoint(&args.ckpt)?);
    let sets = ingest_embeddings(&args.embeddings)?;
    let clouds = load_objects(args.object.as_deref(), args.manifest.as_deref())?;
    let (mut labeled, mut correct) = (0usize, 0usize);
    for c in &clouds {
        let ranking: Vec<RankedClass> = if reasoning {
            reason(c, &model, &sets)?
        } else {
            classify(c, &model, &sets)?
        };
        if let Some(truth) = &c.class_name {
            labeled += 1;
            correct += usize::from(ranking.first().is_some_and(|r| &r.class == truth));
        }
        let top: Vec<&RankedClass> = ranking.iter().take(args.top).collect();
        serde_json::to_writer(&mut *out, &serde_json::json!({ "object_id": c.id, "class": c.class_name, "ranking": top }))?;
        writeln!(out)?;
    }
    if labeled > 0 {
        let acc = correct as f64 / labeled as f64;
        serde_json::to_writer(&mut *out, &serde_json::json!({ "top1_accuracy": acc, "objects": labeled }))?;
        writeln!(out)?;
    }
    Ok(EXIT_OK)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    let settings = Settings::resolve(&cli.global)?;
    if let Some(n) = settings.threads {
        // a second call in the same process (tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = settings.train;
    match cli.command {
        Command::Synth {
            out: dir,
            archetypes,
            per_class,
            test_per_class,
            points,
            jitter,
            embed_dim,
        } => {
            let plan = DatasetPlan {
                archetypes,
                per_class,
                test_per_class,
                points,
                jitter,
                seed: cfg.seed,
                embed_dim,
            };
            let w = write_dataset(&dir, &plan)?;
            writeln!(out, "train manifest: {}", w.train_manifest.display())?;
            writeln!(out, "test manifest: {}", w.test_manifest.display())?;
            writeln!(out, "training embeddings: {}", w.training_embeddings.display())?;
            writeln!(out, "classification embeddings: {}", w.classification_embeddings.display())?;
            writeln!(out, "reasoning embeddings: {}", w.reasoning_embeddings.display())?;
        }
        Command::PartitionDump { object, out: path } => {
            let cloud = load_xyz(&object)?.normalize();
            let part = partition(&cloud, cfg.loss.min_points, cfg.frame)?;
            let counts = part.counts();
            let blocks: Vec<serde_json::Value> = (1..=NUM_BLOCKS)
                .map(|j| {
                    let g = block_index_to_grid(j).expect("1..=27");
                    serde_json::json!({
                        "j": j,
                        "grid": [g.x, g.y, g.z],
                        "count": counts[j - 1],
                        "valid": part.valid_mask[j - 1],
                    })
                })
                .collect();
            let doc = serde_json::json!({
                "object_id": cloud.id,
                "points": cloud.len(),
                "frame": cfg.frame,
                "bounds": { "min": part.bounds.min, "max": part.bounds.max },
                "blocks": blocks,
                "assignment": part.assignment,
            });
            let text = serde_json::to_string_pretty(&doc)?;
            match path {
                Some(p) => crate::error::write_file(p, text)?,
                None => writeln!(out, "{text}")?,
            }
        }
        Command::EmbedLabels {
            labels,
            classes,
            dim,
            out: path,
        } => {
            let sets: BTreeMap<String, LabelSet> = match (labels, classes) {
                (Some(p), _) => label_sets_from_records(&parse_embedding_records(&crate::error::read_text(p)?)?)?,
                (None, Some(c)) => classification_labels(&c)?,
                (None, None) => return Err(Error::Config("need --labels or --classes".into())),
            };
            let records = embedding_records(&embed_label_sets(&sets, dim)?);
            write_records(&records, &path)?;
            writeln!(out, "wrote {} records for {} classes to {}", records.len(), sets.len(), path.display())?;
        }
        Command::Train {
            manifest,
            embeddings,
            out: path,
            metrics,
            epochs,
            batch_size,
            lr,
        } => {
            let mut cfg = cfg;
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.lr = lr.unwrap_or(cfg.lr);
            let clouds = load_manifest(&manifest)?.load_clouds()?;
            let emb = ingest_embeddings(&embeddings)?;
            let result = train(&clouds, &emb, &cfg)?;
            save_checkpoint(&result.checkpoint, &path)?;
            if let Some(m) = metrics {
                let mut f = crate::error::create_file(&m)?;
                write_metrics(&result.metrics, &mut f)?;
                f.flush()?;
            }
            let last = result.metrics.last().map_or(f64::NAN, |m| m.total);
            writeln!(out, "{} steps, final loss {last:.6}, checkpoint {}", result.metrics.len(), path.display())?;
        }
        Command::Classify(args) => return query(&args, false, out),
        Command::Reason(args) => return query(&args, true, out),
        Command::PartReason {
            ckpt,
            object,
            prompt_file,
            prompt_embedding,
            out_json,
            out_ply,
        } => {
            let model = FrozenModel::new(load_checkpoint(&ckpt)?);
            let cloud = load_xyz(&object)?;
            let (text, vector) = match (prompt_file, prompt_embedding) {
                (Some(p), _) => {
                    let text = crate::error::read_text(p)?.trim().to_string();
                    let v = crate::labels::fallback_embed(&text, model.params().w_t.rows())?;
                    (Some(text), v)
                }
                (None, Some(p)) => (None, serde_json::from_str(&crate::error::read_text(p)?)?),
                (None, None) => return Err(Error::Config("need --prompt-file or --prompt-embedding".into())),
            };
            let mut hm = part_reason(&cloud, &vector, &model)?;
            hm.prompt_text = text;
            let stem = object.file_stem().map_or("object".into(), |s| s.to_string_lossy().into_owned());
            let json = out_json.unwrap_or_else(|| PathBuf::from(format!("{stem}.heatmap.json")));
            let ply = out_ply.unwrap_or_else(|| PathBuf::from(format!("{stem}.heatmap.ply")));
            export_heatmap(&hm, &model.prepare(&cloud)?, &json, &ply)?;
            if let Some(best) = hm.argmax() {
                writeln!(out, "best block j={} grid={:?} score={:.6}", best.j, best.grid, best.score.unwrap_or(f64::NAN))?;
            }
            writeln!(out, "wrote {} and {}", json.display(), ply.display())?;
        }
        Command::Gradcheck { samples, tolerance } => {
            let mut worst: f64 = 0.0;
            for mode in [LocalMode::Hard, LocalMode::Soft] {
                let r = gradient_check(cfg.seed, mode, samples)?;
                writeln!(
                    out,
                    "{mode:?}: {} parameters, max rel err {:.3e}, mean {:.3e}",
                    r.checked, r.max_rel_err, r.mean_rel_err
                )?;
                worst = worst.max(r.max_rel_err);
            }
            writeln!(out, "max rel err {worst:.3e} (tolerance {tolerance:.1e})")?;
            if !(worst < tolerance) {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::ExportEmbeddings {
            ckpt,
            manifest,
            object,
            out: path,
        } => {
            let model = FrozenModel::new(load_checkpoint(&ckpt)?);
            let clouds = load_objects(object.as_deref(), manifest.as_deref())?;
            let mut f = crate::error::create_file(&path)?;
            export_embeddings(&model, &clouds, &mut f)?;
            f.flush()?;
            writeln!(out, "wrote {} objects to {}", clouds.len(), path.display())?;
        }
    }
    Ok(EXIT_OK)
}
