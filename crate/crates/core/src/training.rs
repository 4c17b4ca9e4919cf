//! Optimization loop, batching and checkpoints.
//!
//! Each step runs one tape per object (in parallel) for the encoder, both
//! branches and the local loss, then a small batch tape for the in-batch
//! global loss. Gradients of the global loss with respect to each object's
//! global embedding are seeded back into that object's tape, so the result
//! equals differentiating the whole batch on one tape.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::blocks::{partition, soft_indicator, BlockPartition, Frame, PairIndicator, NUM_BLOCKS, NUM_LOCAL_LABELS};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::labels::TextEmbeddingSet;
use crate::losses::{global_loss_node, local_loss_node, LocalMode, LossConfig, LossValue};
use crate::model::{embed_text, forward_object, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PCUBE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds parameter init and batch shuffling.
    pub seed: u64,
    /// Seeds the per-epoch choice among a class's global labels.
    pub label_seed: u64,
    pub frame: Frame,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            label_seed: 1,
            frame: Frame::Aabb,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// A normalized cloud with its block partition, ready for the model.
#[derive(Debug, Clone)]
pub struct PreparedObject {
    pub cloud: PointCloud,
    pub partition: BlockPartition,
}

impl PreparedObject {
    pub fn new(cloud: &PointCloud, min_points: usize, frame: Frame) -> Result<Self> {
        let cloud = cloud.normalize();
        let partition = partition(&cloud, min_points, frame)?;
        if partition.num_valid() == 0 {
            return Err(Error::AllBlocksInvalid);
        }
        Ok(Self { cloud, partition })
    }

    pub fn class_name(&self) -> Option<&str> {
        self.cloud.class_name.as_deref()
    }
}

/// Frozen per-class text vectors plus the pair weights for its local loss.
#[derive(Debug, Clone)]
pub struct ClassText {
    pub global: Vec<Vec<f64>>,
    pub local: Vec<Vec<f64>>,
    pub weights: [[f64; NUM_LOCAL_LABELS]; NUM_BLOCKS],
}

pub fn class_texts(
    embeddings: &BTreeMap<String, TextEmbeddingSet>,
    mode: LocalMode,
) -> Result<BTreeMap<String, ClassText>> {
    embeddings
        .iter()
        .map(|(name, set)| {
            if set.global.is_empty() || set.local.len() != NUM_LOCAL_LABELS {
                return Err(Error::MissingEmbeddings(name.clone()));
            }
            let local = set.local_vectors();
            let weights = match mode {
                LocalMode::Soft => soft_indicator(&local)?.table,
                LocalMode::Hard | LocalMode::Off => PairIndicator::new().table,
            };
            Ok((
                name.clone(),
                ClassText {
                    global: set.global_vectors(),
                    local,
                    weights,
                },
            ))
        })
        .collect()
}

/// One batch member: the object and the global label vector chosen for it.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub object: &'a PreparedObject,
    pub text: &'a ClassText,
    pub global_label: usize,
}

struct ObjectPass {
    tape: Tape,
    params: ModelParams<Var>,
    global: Var,
    local_loss: Option<Var>,
}

fn object_pass(item: &BatchItem, params: &ModelParams, cfg: &TrainConfig, trainable: bool) -> Result<ObjectPass> {
    let mut tape = Tape::new();
    let p = if trainable { params.bind(&mut tape) } else { params.bind_frozen(&mut tape) };
    let fwd = forward_object(&mut tape, &item.object.cloud, &item.object.partition, &p, &cfg.model)?;
    let local_loss = match cfg.loss.local_mode {
        LocalMode::Off => None,
        LocalMode::Hard | LocalMode::Soft => {
            let t = embed_text(&mut tape, &item.text.local, &p)?;
            Some(local_loss_node(
                &mut tape,
                fwd.local,
                t,
                &item.text.weights,
                &item.object.partition.valid_mask,
                &cfg.loss,
            )?)
        }
    };
    Ok(ObjectPass {
        tape,
        params: p,
        global: fwd.global,
        local_loss,
    })
}

fn add_into(acc: &mut ModelParams, g: &ModelParams) {
    let src: Vec<&Tensor> = g.named().into_iter().map(|(_, t)| t).collect();
    let mut i = 0;
    acc.visit_mut(&mut |_, t| {
        for (a, b) in t.data_mut().iter_mut().zip(src[i].data()) {
            *a += b;
        }
        i += 1;
    });
}

/// Batch loss and, if requested, its gradient with respect to every parameter.
pub fn evaluate_batch(
    params: &ModelParams,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossValue, Option<ModelParams>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let passes: Vec<ObjectPass> = batch
        .par_iter()
        .map(|item| object_pass(item, params, cfg, with_grad))
        .collect::<Result<_>>()?;
    let n = batch.len();

    let local_vals: Vec<f64> = passes
        .iter()
        .map(|p| p.local_loss.map_or(0.0, |l| p.tape.value(l).scalar()))
        .collect();
    let local = local_vals.iter().sum::<f64>() / n as f64;

    let mut bt = Tape::new();
    let d_out = cfg.model.d_out;
    let mut gdata = Vec::with_capacity(n * d_out);
    for p in &passes {
        gdata.extend_from_slice(p.tape.value(p.global).data());
    }
    let g_all = Tensor::from_vec(n, d_out, gdata)?;
    let gv = if with_grad { bt.param(g_all) } else { bt.constant(g_all) };
    let wt = if with_grad { bt.param(params.w_t.clone()) } else { bt.constant(params.w_t.clone()) };
    let raw: Vec<Vec<f64>> = batch.iter().map(|b| b.text.global[b.global_label].clone()).collect();
    let raw_t = bt.constant(Tensor::from_rows(&raw)?);
    let text = bt.matmul(raw_t, wt)?;
    let gl = global_loss_node(&mut bt, gv, text, &cfg.loss)?;
    let value = LossValue::new(bt.value(gl).scalar(), local);

    if !with_grad {
        return Ok((value, None));
    }
    let bg = bt.backward_scalar(gl)?;
    let g_rows = bg.get_or_zeros(&bt, gv);
    let per_object: Vec<ModelParams> = passes
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut seeds = vec![(p.global, Tensor::row_vector(g_rows.row(i)))];
            if let Some(l) = p.local_loss {
                seeds.push((l, Tensor::row_vector(&[1.0 / n as f64])));
            }
            let g = p.tape.backward(&seeds)?;
            Ok(p.params.map(&mut |v| g.get_or_zeros(&p.tape, *v)))
        })
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    for g in &per_object {
        add_into(&mut total, g);
    }
    for (a, b) in total.w_t.data_mut().iter_mut().zip(bg.get_or_zeros(&bt, wt).data()) {
        *a += b;
    }
    Ok((value, Some(total)))
}

/// Adam with bias correction; moments share the parameter tree shape.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let g: Vec<&Tensor> = grads.named().into_iter().map(|(_, t)| t).collect();
        // visit_mut hands out one borrow at a time, so walk the trees by index
        let mut ms: Vec<Tensor> = self.m.named().into_iter().map(|(_, t)| t.clone()).collect();
        let mut vs: Vec<Tensor> = self.v.named().into_iter().map(|(_, t)| t.clone()).collect();
        let mut i = 0;
        params.visit_mut(&mut |_, p| {
            let (mi, vi, gi) = (&mut ms[i], &mut vs[i], g[i]);
            for (((w, mm), vv), gg) in p
                .data_mut()
                .iter_mut()
                .zip(mi.data_mut().iter_mut())
                .zip(vi.data_mut().iter_mut())
                .zip(gi.data())
            {
                *mm = b1 * *mm + (1.0 - b1) * gg;
                *vv = b2 * *vv + (1.0 - b2) * gg * gg;
                let mhat = *mm / c1;
                let vhat = *vv / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            i += 1;
        });
        let mut i = 0;
        self.m.visit_mut(&mut |_, t| {
            *t = std::mem::replace(&mut ms[i], Tensor::zeros(0, 0));
            i += 1;
        });
        let mut i = 0;
        self.v.visit_mut(&mut |_, t| {
            *t = std::mem::replace(&mut vs[i], Tensor::zeros(0, 0));
            i += 1;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub global: f64,
    pub local: f64,
    pub total: f64,
}

pub fn write_metrics(metrics: &[StepMetrics], w: &mut impl Write) -> Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut *w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Mean total loss per epoch.
pub fn epoch_means(metrics: &[StepMetrics]) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for m in metrics {
        if sums.len() <= m.epoch {
            sums.resize(m.epoch + 1, (0.0, 0));
        }
        sums[m.epoch].0 += m.total;
        sums[m.epoch].1 += 1;
    }
    sums.into_iter().map(|(s, c)| s / c.max(1) as f64).collect()
}

/// ChaCha stream position, enough to rebuild the generator exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word position as a decimal string (u128 does not fit a JSON number).
    pub word_pos: String,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::CorruptFile(format!("bad rng position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub rng: RngState,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    rng: RngState,
    step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptFile("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// `PCUBE | u32 version | u32 len + config JSON | u32 count + table
    /// (name, ndim, dims) | f64 LE payload | SHA-256 of everything before`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            rng: self.rng.clone(),
            step: self.step,
        })?;
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        let named = self.params.named();
        put_u32(&mut out, named.len() as u32);
        for (name, t) in &named {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, 2);
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        }
        for (_, t) in &named {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(5)? != CHECKPOINT_MAGIC {
            return Err(Error::CorruptFile("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        if buf.len() < 32 + r.pos {
            return Err(Error::CorruptFile("too short".into()));
        }
        let (body, sum) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::CorruptFile("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: r.pos };
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::CorruptFile(format!("header: {e}")))?;
        header.config.validate()?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::CorruptFile("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()?;
            if ndim != 2 {
                return Err(Error::CorruptFile(format!("{name}: {ndim} dims")));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            table.push((name, rows, cols));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, rows, cols) in &table {
            let bytes = r.take(rows.saturating_mul(*cols).saturating_mul(8))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name.clone(), Tensor::from_vec(*rows, *cols, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::CorruptFile("trailing bytes".into()));
        }
        let mut params = ModelParams::init(&header.config.model, &mut ChaCha8Rng::seed_from_u64(0))?;
        if params.named().len() != tensors.len() {
            return Err(Error::CorruptFile("tensor count does not match config".into()));
        }
        let mut i = 0;
        let mut bad = None;
        params.visit_mut(&mut |name, t| {
            let (n, loaded) = &tensors[i];
            if *n != name || loaded.shape() != t.shape() {
                bad.get_or_insert(format!("{n} {:?} where {name} {:?} expected", loaded.shape(), t.shape()));
            }
            *t = loaded.clone();
            i += 1;
        });
        if let Some(b) = bad {
            return Err(Error::CorruptFile(b));
        }
        Ok(Self {
            config: header.config,
            params,
            rng: header.rng,
            step: header.step,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    crate::error::write_file(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&std::fs::read(path).map_err(Error::file(path))?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

/// Trains from scratch on labeled clouds.
///
/// The text dimension is taken from the embeddings, overriding `cfg.model.d_et`.
pub fn train(
    clouds: &[PointCloud],
    embeddings: &BTreeMap<String, TextEmbeddingSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    let dims: Vec<usize> = embeddings.values().map(TextEmbeddingSet::dim).collect();
    if let Some(&d) = dims.first() {
        if let Some(&other) = dims.iter().find(|&&x| x != d) {
            return Err(Error::DimensionMismatch { expected: d, found: other });
        }
        if d != cfg.model.d_et {
            log::info!("text dimension {d} from embeddings overrides configured {}", cfg.model.d_et);
            cfg.model.d_et = d;
        }
    }
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::EmptyInput("train"));
    }
    let texts = class_texts(embeddings, cfg.loss.local_mode)?;
    let mut objects = Vec::with_capacity(clouds.len());
    let mut classes = Vec::with_capacity(clouds.len());
    for c in clouds {
        let class = c
            .class_name
            .clone()
            .ok_or_else(|| Error::Config(format!("cloud {} has no class", c.id)))?;
        let text = texts.get(&class).ok_or_else(|| Error::MissingEmbeddings(class.clone()))?;
        objects.push(PreparedObject::new(c, cfg.loss.min_points, cfg.frame)?);
        classes.push(text);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut label_rng = ChaCha8Rng::seed_from_u64(cfg.label_seed);
    let mut params = ModelParams::init(&cfg.model, &mut rng)?;
    let mut adam = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..objects.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let choice: Vec<usize> = classes
            .iter()
            .map(|t| label_rng.random_range(0..t.global.len()))
            .collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem {
                    object: &objects[i],
                    text: classes[i],
                    global_label: choice[i],
                })
                .collect();
            let (loss, grads) = evaluate_batch(&params, &batch, &cfg, true)?;
            let grads = grads.expect("requested");
            let finite = loss.total.is_finite() && grads.named().iter().all(|(_, t)| t.is_finite());
            if !finite {
                return Err(Error::NonFiniteLoss(step));
            }
            adam.step(&mut params, &grads, cfg.lr);
            metrics.push(StepMetrics {
                step,
                epoch,
                global: loss.global,
                local: loss.local,
                total: loss.total,
            });
            step += 1;
        }
        if let Some(mean) = epoch_means(&metrics).last() {
            log::info!("epoch {epoch}: mean total loss {mean:.5}");
        }
    }
    let rng = RngState::capture(cfg.seed, &rng);
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: cfg,
            params,
            rng,
            step: step as u64,
        },
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Central differences of the batch total loss on a seeded 2-object problem
/// (`n = 32`, `d_E = 16`, `d_out = 8`, 2 heads) at `samples` random scalars.
pub fn gradient_check(seed: u64, local_mode: LocalMode, samples: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig {
        model: ModelConfig {
            encoder_hidden: vec![8],
            d_e: 16,
            d_out: 8,
            d_et: 16,
            self_heads: 2,
            cross_heads: 2,
            ff_width: 32,
            ln_eps: 1e-5,
        },
        loss: LossConfig {
            local_mode,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let params = ModelParams::init(&cfg.model, &mut rng)?;
    let mut sets = BTreeMap::new();
    let mut objects = Vec::new();
    for class in ["alpha", "beta"] {
        let labels = crate::labels::classification_labels(&[class.to_string()])?;
        let set = crate::labels::embed_label_set(&labels[class], cfg.model.d_et)?;
        sets.insert(class.to_string(), set);
        let pts = (0..32).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
        let cloud = PointCloud::new(class, pts)?.with_class(class);
        objects.push(PreparedObject::new(&cloud, 1, cfg.frame)?);
    }
    let texts = class_texts(&sets, local_mode)?;
    let batch: Vec<BatchItem> = objects
        .iter()
        .zip(["alpha", "beta"])
        .map(|(o, c)| BatchItem {
            object: o,
            text: &texts[c],
            global_label: 0,
        })
        .collect();
    let (_, grads) = evaluate_batch(&params, &batch, &cfg, true)?;
    let grads = grads.expect("requested");
    let analytic: Vec<f64> = grads.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let mut flat: Vec<f64> = params.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();

    let mut loss_at = |x: &[f64]| -> f64 {
        let mut p = params.clone();
        let mut off = 0;
        p.visit_mut(&mut |_, t| {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        });
        evaluate_batch(&p, &batch, &cfg, false).map_or(f64::NAN, |(l, _)| l.total)
    };
    let mut max_err: f64 = 0.0;
    let mut sum_err = 0.0;
    for _ in 0..samples {
        let i = rng.random_range(0..flat.len());
        let num = crate::autodiff::gradcheck::central_difference(&mut loss_at, &mut flat, i, GRADCHECK_STEP);
        let err = crate::autodiff::gradcheck::relative_error(analytic[i], num, GRADCHECK_FLOOR);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        max_err = max_err.max(err);
        sum_err += err;
    }
    Ok(GradcheckReport {
        checked: samples,
        max_rel_err: max_err,
        mean_rel_err: sum_err / samples.max(1) as f64,
    })
}
