//! Procedural objects with known part layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{save_xyz, DatasetManifest, ManifestEntry, Point, PointCloud};
use crate::labels::{classification_labels, embed_label_sets, embedding_records, write_records, LabelSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Archetype {
    /// Flat slab on four legs; most points in the top band.
    SlabTable,
    /// Thin upright cylinder through the center column.
    VerticalPole,
    Ball,
    /// Flat base plate with an upright cylinder on top.
    PoleOnSlab,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::SlabTable,
        Archetype::VerticalPole,
        Archetype::Ball,
        Archetype::PoleOnSlab,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::SlabTable => "slab-table",
            Archetype::VerticalPole => "vertical-pole",
            Archetype::Ball => "ball",
            Archetype::PoleOnSlab => "pole-on-slab",
        }
    }

    /// Global reasoning sentences used as training labels.
    pub fn reasoning_sentences(self) -> [&'static str; 3] {
        match self {
            Archetype::SlabTable => [
                "a flat wide top surface resting on four thin legs",
                "furniture with a broad horizontal slab supported from below by legs",
                "a raised flat surface where things can be placed",
            ],
            Archetype::VerticalPole => [
                "a tall thin vertical rod standing upright",
                "a long narrow cylinder pointing straight up",
                "a slender upright post with nothing attached",
            ],
            Archetype::Ball => [
                "a round sphere curved evenly in every direction",
                "a smooth ball shaped object that can roll",
                "a closed round surface with no edges or corners",
            ],
            Archetype::PoleOnSlab => [
                "a tall thin rod mounted on a flat heavy base plate",
                "an upright post standing on a wide flat slab at the bottom",
                "a slender vertical stand with a broad flat foot",
            ],
        }
    }

    /// Reworded reasoning sentences that never appear in training.
    pub fn paraphrases(self) -> [&'static str; 3] {
        match self {
            Archetype::SlabTable => [
                "a wide flat top surface standing on four thin legs",
                "furniture with a broad horizontal slab held up from below by legs",
                "a raised flat surface where objects can be placed",
            ],
            Archetype::VerticalPole => [
                "a tall thin vertical rod that stands upright",
                "a long narrow cylinder that points straight up",
                "a slender upright post with nothing else attached",
            ],
            Archetype::Ball => [
                "a round sphere that curves evenly in every direction",
                "a smooth ball shaped thing that can roll",
                "a closed round surface without edges or corners",
            ],
            Archetype::PoleOnSlab => [
                "a tall thin rod fixed on a flat heavy base plate",
                "an upright post that stands on a wide flat slab at the bottom",
                "a slender vertical stand on a broad flat foot",
            ],
        }
    }
}

impl std::str::FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown archetype {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub archetype: Archetype,
    pub points: usize,
    /// Standard deviation of per-coordinate Gaussian noise.
    pub jitter: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < 64 {
            return Err(Error::Config(format!("need at least 64 points, got {}", self.points)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        Ok(())
    }
}

fn in_box(rng: &mut impl Rng, lo: Point, hi: Point) -> Point {
    [0, 1, 2].map(|a| if hi[a] > lo[a] { rng.random_range(lo[a]..hi[a]) } else { lo[a] })
}

fn in_cylinder(rng: &mut impl Rng, r: f64, z0: f64, z1: f64) -> Point {
    let rho = r * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    [rho * phi.cos(), rho * phi.sin(), rng.random_range(z0..z1)]
}

fn on_ellipsoid(rng: &mut impl Rng, radii: [f64; 3]) -> Point {
    loop {
        let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [0, 1, 2].map(|a| radii[a] * v[a] / n);
        }
    }
}

/// One object of the given archetype; sizes vary per object.
pub fn generate_cloud(archetype: Archetype, points: usize, jitter: f64, rng: &mut impl Rng) -> Vec<Point> {
    let mut pts = Vec::with_capacity(points);
    match archetype {
        Archetype::SlabTable => {
            let (a, b) = (rng.random_range(0.7..1.0), rng.random_range(0.5..0.9));
            let h = rng.random_range(0.08..0.15);
            let lw = rng.random_range(0.05..0.08);
            let slab = points * 7 / 10;
            for i in 0..points {
                if i < slab {
                    pts.push(in_box(rng, [-a, -b, 1.0 - h], [a, b, 1.0]));
                } else {
                    let (sx, sy) = ([-1.0, 1.0][i % 2], [-1.0, 1.0][(i / 2) % 2]);
                    let (cx, cy) = (sx * (a - lw), sy * (b - lw));
                    pts.push(in_box(rng, [cx - lw, cy - lw, -1.0], [cx + lw, cy + lw, 1.0 - h]));
                }
            }
        }
        Archetype::VerticalPole => {
            let r = rng.random_range(0.04..0.1);
            let top = rng.random_range(0.8..1.2);
            for _ in 0..points {
                pts.push(in_cylinder(rng, r, -top, top));
            }
        }
        Archetype::Ball => {
            let radii = [0, 1, 2].map(|_| rng.random_range(0.9..1.1));
            for _ in 0..points {
                pts.push(on_ellipsoid(rng, radii));
            }
        }
        Archetype::PoleOnSlab => {
            let (a, b) = (rng.random_range(0.7..1.0), rng.random_range(0.7..1.0));
            let h = rng.random_range(0.08..0.15);
            let r = rng.random_range(0.05..0.1);
            let top = rng.random_range(0.8..1.2);
            for i in 0..points {
                if i % 2 == 0 {
                    pts.push(in_box(rng, [-a, -b, -1.0], [a, b, -1.0 + h]));
                } else {
                    pts.push(in_cylinder(rng, r, -1.0 + h, top));
                }
            }
        }
    }
    if jitter > 0.0 {
        let noise = Normal::new(0.0, jitter).expect("finite jitter");
        for p in &mut pts {
            for v in p.iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    pts
}

/// Classification labels of the archetype plus its reasoning sentences; the
/// class name itself is the first global label.
pub fn training_labels(archetype: Archetype) -> Result<LabelSet> {
    let name = archetype.name().to_string();
    let mut set = classification_labels(std::slice::from_ref(&name))?.remove(&name).expect("one class");
    set.global_labels
        .extend(archetype.reasoning_sentences().iter().map(|s| s.to_string()));
    Ok(set)
}

/// Same local labels, paraphrased reasoning sentences as globals.
pub fn paraphrase_labels(archetype: Archetype) -> Result<LabelSet> {
    let name = archetype.name().to_string();
    let mut set = classification_labels(std::slice::from_ref(&name))?.remove(&name).expect("one class");
    set.global_labels = archetype.paraphrases().iter().map(|s| s.to_string()).collect();
    Ok(set)
}

#[derive(Debug, Clone)]
pub struct SynthClass {
    pub clouds: Vec<PointCloud>,
    pub labels: LabelSet,
}

/// `count` objects with ids `<archetype>-NNN`, tagged with their class.
pub fn generate(spec: &SynthSpec, count: usize) -> Result<SynthClass> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let name = spec.archetype.name();
    let clouds = (0..count)
        .map(|i| {
            let pts = generate_cloud(spec.archetype, spec.points, spec.jitter, &mut rng);
            Ok(PointCloud::new(format!("{name}-{i:03}"), pts)?.with_class(name))
        })
        .collect::<Result<_>>()?;
    Ok(SynthClass {
        clouds,
        labels: training_labels(spec.archetype)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub archetypes: Vec<Archetype>,
    pub per_class: usize,
    /// Objects per class held out for evaluation (the last ones generated).
    pub test_per_class: usize,
    pub points: usize,
    pub jitter: f64,
    pub seed: u64,
    pub embed_dim: usize,
}

impl Default for DatasetPlan {
    fn default() -> Self {
        Self {
            archetypes: vec![Archetype::SlabTable, Archetype::VerticalPole, Archetype::PoleOnSlab],
            per_class: 40,
            test_per_class: 10,
            points: 512,
            jitter: 0.005,
            seed: 0,
            embed_dim: crate::labels::DEFAULT_FALLBACK_DIM,
        }
    }
}

/// Per-class generator seed derived from the plan seed.
pub fn class_seed(seed: u64, class_index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(class_index as u64 + 1)
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub training_labels: BTreeMap<String, LabelSet>,
    pub classification_labels: BTreeMap<String, LabelSet>,
    pub paraphrase_labels: BTreeMap<String, LabelSet>,
}

pub fn build_dataset(plan: &DatasetPlan) -> Result<SynthDataset> {
    if plan.test_per_class > plan.per_class {
        return Err(Error::Config("test_per_class exceeds per_class".into()));
    }
    let mut out = SynthDataset {
        train: Vec::new(),
        test: Vec::new(),
        training_labels: BTreeMap::new(),
        classification_labels: BTreeMap::new(),
        paraphrase_labels: BTreeMap::new(),
    };
    let names: Vec<String> = plan.archetypes.iter().map(|a| a.name().to_string()).collect();
    out.classification_labels = classification_labels(&names)?;
    for (i, &a) in plan.archetypes.iter().enumerate() {
        let spec = SynthSpec {
            archetype: a,
            points: plan.points,
            jitter: plan.jitter,
            seed: class_seed(plan.seed, i),
        };
        let mut class = generate(&spec, plan.per_class)?;
        let test = class.clouds.split_off(plan.per_class - plan.test_per_class);
        out.train.extend(class.clouds);
        out.test.extend(test);
        out.training_labels.insert(a.name().into(), class.labels);
        out.paraphrase_labels.insert(a.name().into(), paraphrase_labels(a)?);
    }
    Ok(out)
}

/// Paths of everything [`write_dataset`] produces.
#[derive(Debug, Clone)]
pub struct WrittenDataset {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    /// Fallback embeddings of the training labels.
    pub training_embeddings: PathBuf,
    /// Class-name-only global labels, for classification.
    pub classification_embeddings: PathBuf,
    /// Paraphrased reasoning prompts.
    pub reasoning_embeddings: PathBuf,
}

/// Writes `clouds/*.xyz`, `train.tsv`, `test.tsv` and three embedding files.
pub fn write_dataset(dir: impl AsRef<Path>, plan: &DatasetPlan) -> Result<WrittenDataset> {
    let dir = dir.as_ref();
    let ds = build_dataset(plan)?;
    fs::create_dir_all(dir.join("clouds"))?;
    let manifest = |clouds: &[PointCloud], file: &str| -> Result<PathBuf> {
        let mut entries = Vec::new();
        for c in clouds {
            let rel = PathBuf::from("clouds").join(format!("{}.xyz", c.id));
            save_xyz(c, dir.join(&rel))?;
            entries.push(ManifestEntry {
                id: c.id.clone(),
                class_name: c.class_name.clone().unwrap_or_default(),
                path: rel,
            });
        }
        let path = dir.join(file);
        crate::error::write_file(&path, DatasetManifest::from_entries(entries)?.to_tsv())?;
        Ok(path)
    };
    let train_manifest = manifest(&ds.train, "train.tsv")?;
    let test_manifest = manifest(&ds.test, "test.tsv")?;
    let embed = |labels: &BTreeMap<String, LabelSet>, file: &str| -> Result<PathBuf> {
        let path = dir.join(file);
        write_records(&embedding_records(&embed_label_sets(labels, plan.embed_dim)?), &path)?;
        Ok(path)
    };
    Ok(WrittenDataset {
        train_manifest,
        test_manifest,
        training_embeddings: embed(&ds.training_labels, "labels.jsonl")?,
        classification_embeddings: embed(&ds.classification_labels, "classify.jsonl")?,
        reasoning_embeddings: embed(&ds.paraphrase_labels, "reasoning.jsonl")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{partition, Frame};
    use crate::geometry::load_manifest;
    use crate::labels::ingest_embeddings;

    fn spec(a: Archetype, seed: u64) -> SynthSpec {
        SynthSpec {
            archetype: a,
            points: 512,
            jitter: 0.005,
            seed,
        }
    }

    #[test]
    fn slab_table_mass_sits_in_top_band() {
        for c in generate(&spec(Archetype::SlabTable, 1), 20).unwrap().clouds {
            let part = partition(&c.normalize(), 1, Frame::Aabb).unwrap();
            let counts = part.counts();
            let top: usize = (19..=27).map(|j| counts[j - 1]).sum();
            assert!(top as f64 >= 0.6 * 512.0, "{}: {top}", c.id);
        }
    }

    #[test]
    fn pole_stays_in_center_column() {
        for c in generate(&spec(Archetype::VerticalPole, 2), 20).unwrap().clouds {
            let part = partition(&c.normalize(), 1, Frame::Unit).unwrap();
            for &j in &part.assignment {
                let g = crate::blocks::block_index_to_grid(j).unwrap();
                assert_eq!((g.x, g.y), (2, 2), "{}", c.id);
            }
        }
    }

    #[test]
    fn pole_on_slab_fills_bottom_band() {
        for c in generate(&spec(Archetype::PoleOnSlab, 3), 10).unwrap().clouds {
            let part = partition(&c.normalize(), 1, Frame::Aabb).unwrap();
            for j in 1..=9 {
                assert!(part.valid_mask[j - 1], "{} block {j}", c.id);
            }
            let upper: Vec<usize> = (10..=27).filter(|&j| part.valid_mask[j - 1]).collect();
            assert!(upper.iter().all(|&j| j == 14 || j == 23), "{upper:?}");
        }
    }

    #[test]
    fn equal_seeds_are_bit_identical() {
        let a = generate(&spec(Archetype::Ball, 4), 3).unwrap();
        let b = generate(&spec(Archetype::Ball, 4), 3).unwrap();
        let c = generate(&spec(Archetype::Ball, 5), 3).unwrap();
        assert_eq!(a.clouds, b.clouds);
        assert_ne!(a.clouds, c.clouds);
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec { points: 63, ..spec(Archetype::Ball, 0) }.validate().is_err());
        assert!(SynthSpec { jitter: -1.0, ..spec(Archetype::Ball, 0) }.validate().is_err());
        assert_eq!("pole-on-slab".parse::<Archetype>().unwrap(), Archetype::PoleOnSlab);
        assert!("cone".parse::<Archetype>().is_err());
    }

    #[test]
    fn labels_include_class_name_and_reasoning() {
        let l = training_labels(Archetype::SlabTable).unwrap();
        assert_eq!(l.global_labels.len(), 4);
        assert_eq!(l.global_labels[0], "slab-table");
        assert_eq!(l.local_labels[6], "bottom region of the z-axis for slab-table");
        let p = paraphrase_labels(Archetype::SlabTable).unwrap();
        for s in &p.global_labels {
            assert!(!l.global_labels.contains(s));
        }
    }

    #[test]
    fn archetypes_are_separable_before_training() {
        use crate::autodiff::Tape;
        use crate::encoder::{encode, EncoderParams};
        let enc = EncoderParams::init(&mut ChaCha8Rng::seed_from_u64(0), &[32, 64]).unwrap();
        let mut feats: Vec<(usize, Vec<f64>)> = Vec::new();
        for (ci, &a) in Archetype::ALL.iter().enumerate() {
            for c in generate(&spec(a, 10 + ci as u64), 6).unwrap().clouds {
                let mut tape = Tape::new();
                let bound = enc.map(&mut |t| tape.constant(t.clone()));
                let f = encode(&mut tape, &c.normalize(), &bound).unwrap();
                let g = tape.max_rows(f).unwrap();
                feats.push((ci, tape.value(g).data().to_vec()));
            }
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..feats.len() {
            for j in i + 1..feats.len() {
                let d = dist(&feats[i].1, &feats[j].1);
                if feats[i].0 == feats[j].0 {
                    within += d;
                    nw += 1;
                } else {
                    between += d;
                    nb += 1;
                }
            }
        }
        assert!(between / nb as f64 > within / nw as f64);
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let plan = DatasetPlan {
            per_class: 4,
            test_per_class: 1,
            points: 64,
            embed_dim: 32,
            ..DatasetPlan::default()
        };
        let w = write_dataset(dir.path(), &plan).unwrap();
        let train = load_manifest(&w.train_manifest).unwrap();
        let test = load_manifest(&w.test_manifest).unwrap();
        assert_eq!(train.entries.len(), 9);
        assert_eq!(test.entries.len(), 3);
        let clouds = train.load_clouds().unwrap();
        assert_eq!(clouds[0].len(), 64);
        let emb = ingest_embeddings(&w.training_embeddings).unwrap();
        assert_eq!(emb.len(), 3);
        assert_eq!(emb["vertical-pole"].global.len(), 4);
        let cls = ingest_embeddings(&w.classification_embeddings).unwrap();
        assert_eq!(cls["slab-table"].global.len(), 1);
        assert_eq!(cls["slab-table"].global[0].text, "slab-table");
        let reasoning = ingest_embeddings(&w.reasoning_embeddings).unwrap();
        assert_eq!(reasoning["pole-on-slab"].global.len(), 3);
    }
}
