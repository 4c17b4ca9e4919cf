//! Classification, reasoning and part-level reasoning with a frozen model.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_similarity, Tape, Tensor};
use crate::blocks::{block_index_to_grid, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::labels::TextEmbeddingSet;
use crate::model::{forward_object, ModelParams};
use crate::training::{Checkpoint, PreparedObject};

/// Projected 3D embeddings of one object.
#[derive(Debug, Clone)]
pub struct ObjectEmbedding {
    pub object: PreparedObject,
    /// `F̄^G`, length `d_out`.
    pub global: Vec<f64>,
    /// `F̄^L_j` for `j = 1..27` (row `j - 1`).
    pub local: Vec<Vec<f64>>,
}

/// A checkpoint prepared for read-only queries.
#[derive(Debug, Clone)]
pub struct FrozenModel {
    pub checkpoint: Checkpoint,
}

impl FrozenModel {
    pub fn new(checkpoint: Checkpoint) -> Self {
        Self { checkpoint }
    }

    pub fn params(&self) -> &ModelParams {
        &self.checkpoint.params
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<PreparedObject> {
        let cfg = &self.checkpoint.config;
        PreparedObject::new(cloud, cfg.loss.min_points, cfg.frame)
    }

    pub fn embed_object(&self, cloud: &PointCloud) -> Result<ObjectEmbedding> {
        let object = self.prepare(cloud)?;
        let mut tape = Tape::new();
        let p = self.params().bind_frozen(&mut tape);
        let f = forward_object(
            &mut tape,
            &object.cloud,
            &object.partition,
            &p,
            &self.checkpoint.config.model,
        )?;
        let local = tape.value(f.local);
        Ok(ObjectEmbedding {
            global: tape.value(f.global).data().to_vec(),
            local: (0..NUM_BLOCKS).map(|j| local.row(j).to_vec()).collect(),
            object,
        })
    }

    /// `T̄ = T · W_T` for one raw text embedding.
    pub fn project_text(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let w = &self.params().w_t;
        if raw.len() != w.rows() {
            return Err(Error::DimensionMismatch {
                expected: w.rows(),
                found: raw.len(),
            });
        }
        if raw.iter().all(|x| *x == 0.0) {
            return Err(Error::ZeroVector("prompt embedding".into()));
        }
        Ok(Tensor::row_vector(raw).matmul(w)?.into_data())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub class: String,
    pub score: f64,
}

/// Scores each class by the best cosine between the object's global embedding
/// and that class's projected global label embeddings; descending, ties by name.
pub fn rank_classes(
    model: &FrozenModel,
    global: &[f64],
    sets: &BTreeMap<String, TextEmbeddingSet>,
) -> Result<Vec<RankedClass>> {
    if sets.is_empty() {
        return Err(Error::EmptyInput("candidate classes"));
    }
    let mut out = Vec::with_capacity(sets.len());
    for (class, set) in sets {
        if set.global.is_empty() {
            return Err(Error::MissingEmbeddings(class.clone()));
        }
        let mut best = f64::NEG_INFINITY;
        for lv in &set.global {
            let t = model.project_text(&lv.vector)?;
            best = best.max(cosine_similarity(global, &t)?);
        }
        out.push(RankedClass {
            class: class.clone(),
            score: best,
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.class.cmp(&b.class)));
    Ok(out)
}

/// Zero-head classification against one global label embedding per class.
pub fn classify(
    cloud: &PointCloud,
    model: &FrozenModel,
    class_sets: &BTreeMap<String, TextEmbeddingSet>,
) -> Result<Vec<RankedClass>> {
    let e = model.embed_object(cloud)?;
    rank_classes(model, &e.global, class_sets)
}

/// Like [`classify`], with reasoning sentences as candidates; a class with
/// several sentences scores its best match.
pub fn reason(
    cloud: &PointCloud,
    model: &FrozenModel,
    reasoning_sets: &BTreeMap<String, TextEmbeddingSet>,
) -> Result<Vec<RankedClass>> {
    classify(cloud, model, reasoning_sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapBlock {
    pub j: usize,
    pub grid: [u8; 3],
    pub center: Point,
    pub count: usize,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartHeatmap {
    pub object_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_text: Option<String>,
    pub blocks: Vec<HeatmapBlock>,
}

impl PartHeatmap {
    /// Highest-scoring valid block; the lowest `j` wins ties.
    pub fn argmax(&self) -> Option<&HeatmapBlock> {
        self.blocks
            .iter()
            .filter_map(|b| b.score.map(|s| (s, b)))
            .fold(None, |best: Option<(f64, &HeatmapBlock)>, (s, b)| match best {
                Some((bs, bb)) if bs > s || (bs == s && bb.j < b.j) => Some((bs, bb)),
                _ => Some((s, b)),
            })
            .map(|(_, b)| b)
    }
}

/// Cosine between the projected prompt and every valid block embedding.
pub fn heatmap_from_embedding(emb: &ObjectEmbedding, projected_prompt: &[f64]) -> Result<PartHeatmap> {
    let part = &emb.object.partition;
    if part.num_valid() == 0 {
        return Err(Error::AllBlocksInvalid);
    }
    let counts = part.counts();
    let blocks = (1..=NUM_BLOCKS)
        .map(|j| {
            let g = block_index_to_grid(j)?;
            let valid = part.valid_mask[j - 1];
            let score = if valid {
                Some(cosine_similarity(&emb.local[j - 1], projected_prompt)?)
            } else {
                None
            };
            Ok(HeatmapBlock {
                j,
                grid: [g.x, g.y, g.z],
                center: part.bounds.cell_center(g),
                count: counts[j - 1],
                valid,
                score,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PartHeatmap {
        object_id: emb.object.cloud.id.clone(),
        prompt_text: None,
        blocks,
    })
}

pub fn part_reason(cloud: &PointCloud, prompt: &[f64], model: &FrozenModel) -> Result<PartHeatmap> {
    let t = model.project_text(prompt)?;
    let e = model.embed_object(cloud)?;
    heatmap_from_embedding(&e, &t)
}

pub const INVALID_RGB: [u8; 3] = [128, 128, 128];

/// Linear blue → red ramp over `t ∈ [0, 1]`.
pub fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Block colors: scores min-max scaled over valid blocks (all equal → middle
/// of the ramp), invalid blocks gray.
pub fn block_colors(hm: &PartHeatmap) -> [[u8; 3]; NUM_BLOCKS] {
    let scores: Vec<f64> = hm.blocks.iter().filter_map(|b| b.score).collect();
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [INVALID_RGB; NUM_BLOCKS];
    for b in &hm.blocks {
        if let Some(s) = b.score {
            let t = if hi > lo { (s - lo) / (hi - lo) } else { 0.5 };
            out[b.j - 1] = ramp(t);
        }
    }
    out
}

pub fn write_ply(hm: &PartHeatmap, object: &PreparedObject, w: &mut impl Write) -> Result<()> {
    let colors = block_colors(hm);
    let pts = object.cloud.points();
    writeln!(w, "ply\nformat ascii 1.0")?;
    writeln!(w, "comment object {}", hm.object_id)?;
    writeln!(w, "element vertex {}", pts.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    writeln!(w, "end_header")?;
    for (p, &j) in pts.iter().zip(&object.partition.assignment) {
        let [r, g, b] = colors[j - 1];
        writeln!(w, "{} {} {} {r} {g} {b}", p[0], p[1], p[2])?;
    }
    Ok(())
}

/// Writes the heatmap JSON and a per-point colored PLY of the normalized cloud.
pub fn export_heatmap(
    hm: &PartHeatmap,
    object: &PreparedObject,
    json_path: impl AsRef<Path>,
    ply_path: impl AsRef<Path>,
) -> Result<()> {
    crate::error::write_file(json_path, serde_json::to_string_pretty(hm)?)?;
    let mut f = crate::error::create_file(ply_path)?;
    write_ply(hm, object, &mut f)?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingExport {
    pub object_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub global: Vec<f64>,
    pub local: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
}

/// One JSON line per object with its global and 27 local embeddings.
pub fn export_embeddings(model: &FrozenModel, clouds: &[PointCloud], w: &mut impl Write) -> Result<()> {
    for c in clouds {
        let e = model.embed_object(c)?;
        let rec = EmbeddingExport {
            object_id: c.id.clone(),
            class: c.class_name.clone(),
            global: e.global,
            local: e.local,
            valid: e.object.partition.valid_mask.to_vec(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{classification_labels, embed_label_sets, LabeledVector};
    use crate::model::ModelConfig;
    use crate::training::{RngState, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> FrozenModel {
        let cfg = TrainConfig {
            model: ModelConfig {
                encoder_hidden: vec![8],
                d_e: 8,
                d_out: 4,
                d_et: 16,
                self_heads: 2,
                cross_heads: 2,
                ff_width: 8,
                ln_eps: 1e-5,
            },
            ..TrainConfig::default()
        };
        let params = ModelParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        FrozenModel::new(Checkpoint {
            config: cfg,
            params,
            rng: RngState { seed, word_pos: "0".into() },
            step: 0,
        })
    }

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
        PointCloud::new(format!("c{seed}"), pts).unwrap()
    }

    /// Identity on the first `d_out` text coordinates; the remaining rows are
    /// nonzero so arbitrary texts still project to nonzero vectors.
    fn padded_identity() -> Tensor {
        let mut w = Tensor::filled(16, 4, 0.25);
        for i in 0..4 {
            w.row_mut(i).fill(0.0);
            w.row_mut(i)[i] = 1.0;
        }
        w
    }

    fn sets(names: &[&str]) -> BTreeMap<String, TextEmbeddingSet> {
        let v: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        embed_label_sets(&classification_labels(&v).unwrap(), 16).unwrap()
    }

    #[test]
    fn single_candidate_ranks_first() {
        let m = model(1);
        let r = classify(&cloud(1, 50), &m, &sets(&["lamp"])).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].class, "lamp");
    }

    #[test]
    fn aligned_text_scores_one() {
        let mut m = model(2);
        m.checkpoint.params.w_t = padded_identity();
        let c = cloud(2, 40);
        let g = m.embed_object(&c).unwrap().global;
        let mut v = g.clone();
        v.resize(16, 0.0);
        let mut s = sets(&["a", "b"]);
        s.get_mut("a").unwrap().global[0].vector = v;
        let r = classify(&c, &m, &s).unwrap();
        assert_eq!(r[0].class, "a");
        assert!((r[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reasoning_on_classification_labels_matches_classify() {
        let m = model(3);
        let c = cloud(3, 60);
        let s = sets(&["x", "y", "z"]);
        assert_eq!(classify(&c, &m, &s).unwrap(), reason(&c, &m, &s).unwrap());
    }

    #[test]
    fn class_score_is_max_over_labels() {
        let m = model(4);
        let c = cloud(4, 60);
        let mut s = sets(&["p", "q"]);
        for t in ["a tall thin rod", "flat wide top", "round heavy base"] {
            s.get_mut("p").unwrap().global.push(LabeledVector {
                text: t.to_string(),
                vector: crate::labels::fallback_embed(t, 16).unwrap(),
            });
        }
        let g = m.embed_object(&c).unwrap().global;
        let brute = s["p"]
            .global
            .iter()
            .map(|lv| cosine_similarity(&g, &m.project_text(&lv.vector).unwrap()).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let r = reason(&c, &m, &s).unwrap();
        let p = r.iter().find(|x| x.class == "p").unwrap();
        assert_eq!(p.score, brute);
    }

    #[test]
    fn classify_is_permutation_invariant_and_scale_invariant() {
        use rand::seq::SliceRandom;
        let m = model(5);
        let c = cloud(5, 80);
        let s = sets(&["u", "v", "w"]);
        let base = classify(&c, &m, &s).unwrap();
        let mut order: Vec<usize> = (0..80).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(classify(&c.permuted(&order), &m, &s).unwrap(), base);

        let mut scaled = s.clone();
        for v in scaled.get_mut("v").unwrap().global.iter_mut() {
            v.vector.iter_mut().for_each(|x| *x *= 7.5);
        }
        let r = classify(&c, &m, &scaled).unwrap();
        assert_eq!(r[0].class, base[0].class);
        for (a, b) in r.iter().zip(&base) {
            assert_eq!(a.class, b.class);
            assert!((a.score - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_equal_to_block_embedding_wins() {
        let mut m = model(6);
        m.checkpoint.params.w_t = padded_identity();
        let c = cloud(6, 300);
        let e = m.embed_object(&c).unwrap();
        let j = (0..27).rev().find(|&j| e.object.partition.valid_mask[j]).unwrap();
        let mut prompt = e.local[j].clone();
        prompt.resize(16, 0.0);
        let hm = part_reason(&c, &prompt, &m).unwrap();
        let best = hm.argmax().unwrap();
        assert_eq!(best.j, j + 1);
        assert!((best.score.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(hm.blocks.len(), 27);
    }

    #[test]
    fn empty_blocks_carry_no_score() {
        let m = model(7);
        // everything on one line: most blocks are empty
        let pts = (0..30).map(|i| [i as f64, i as f64, i as f64]).collect();
        let c = PointCloud::new("diag", pts).unwrap();
        let hm = part_reason(&c, &crate::labels::fallback_embed("top", 16).unwrap(), &m).unwrap();
        for b in &hm.blocks {
            assert_eq!(b.valid, b.count > 0);
            assert_eq!(b.score.is_some(), b.valid);
        }
        assert_eq!(hm.blocks.iter().filter(|b| b.valid).count(), 3);
        assert!(matches!(part_reason(&c, &[0.0; 16], &m), Err(Error::ZeroVector(_))));
        assert!(matches!(part_reason(&c, &[1.0; 5], &m), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn argmax_ignores_block_order() {
        let m = model(8);
        let c = cloud(8, 200);
        let hm = part_reason(&c, &crate::labels::fallback_embed("left side", 16).unwrap(), &m).unwrap();
        let mut rev = hm.clone();
        rev.blocks.reverse();
        assert_eq!(hm.argmax().unwrap().j, rev.argmax().unwrap().j);
    }

    #[test]
    fn heatmap_export_files() {
        let m = model(9);
        let c = cloud(9, 120);
        let mut hm = part_reason(&c, &crate::labels::fallback_embed("handle", 16).unwrap(), &m).unwrap();
        hm.prompt_text = Some("handle".into());
        let obj = m.prepare(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (jp, pp) = (dir.path().join("h.json"), dir.path().join("h.ply"));
        export_heatmap(&hm, &obj, &jp, &pp).unwrap();
        let back: PartHeatmap = serde_json::from_str(&std::fs::read_to_string(&jp).unwrap()).unwrap();
        assert_eq!(back, hm);
        let ply = std::fs::read_to_string(&pp).unwrap();
        assert!(ply.contains("element vertex 120\n"));
        let body: Vec<&str> = ply.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 120);
    }

    #[test]
    fn uniform_scores_give_uniform_color() {
        let m = model(10);
        let c = cloud(10, 120);
        let mut hm = part_reason(&c, &crate::labels::fallback_embed("x", 16).unwrap(), &m).unwrap();
        for b in hm.blocks.iter_mut().filter(|b| b.valid) {
            b.score = Some(0.3);
        }
        let colors = block_colors(&hm);
        let valid: Vec<[u8; 3]> = hm.blocks.iter().filter(|b| b.valid).map(|b| colors[b.j - 1]).collect();
        assert!(valid.iter().all(|c| *c == valid[0]));
        assert_eq!(ramp(0.0), [0, 0, 255]);
        assert_eq!(ramp(1.0), [255, 0, 0]);
    }

    #[test]
    fn embedding_export_lines() {
        let m = model(11);
        let clouds = vec![cloud(1, 30).with_class("k"), cloud(2, 30)];
        let mut buf = Vec::new();
        export_embeddings(&m, &clouds, &mut buf).unwrap();
        let recs: Vec<EmbeddingExport> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].class.as_deref(), Some("k"));
        assert_eq!(recs[1].local.len(), 27);
        assert_eq!(recs[0].global.len(), 4);
    }
}
