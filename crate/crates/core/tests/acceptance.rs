//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::time::Instant;

use pointcube::blocks::{partition, positive_label_indices, soft_indicator, Frame, PairIndicator, NUM_BLOCKS};
use pointcube::geometry::{Point, PointCloud};
use pointcube::inference::{classify, part_reason, rank_classes, reason, FrozenModel};
use pointcube::labels::{embed_label_sets, fallback_embed, TextEmbeddingSet};
use pointcube::losses::{global_loss, local_loss_hard, local_loss_soft, KernelMode, LocalMode, LossConfig};
use pointcube::model::ModelConfig;
use pointcube::synth::{build_dataset, generate, Archetype, DatasetPlan, SynthSpec};
use pointcube::training::{epoch_means, gradient_check, train, TrainConfig, TrainOutcome};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-3;
const GRAD_SAMPLES: usize = 250;
const GRAD_BUDGET_S: f64 = 60.0;
const PARTITION_CLOUDS: usize = 1000;
const PARTITION_BUDGET_S: f64 = 10.0;
const PAIR_BUDGET_S: f64 = 1.0;
const SOFT_SUM_TOL: f64 = 1e-9;
const SOFT_CASE_TOL: f64 = 1e-4;
const CLOSED_FORM_TOL: f64 = 1e-9;
const SCORE_SCALE_TOL: f64 = 1e-12;
const MIN_CLASSIFY: f64 = 0.90;
const MIN_REASON: f64 = 0.80;
const SOFT_SLACK: f64 = 0.05;
const E2E_BUDGET_S: f64 = 15.0 * 60.0;
const MIN_PART_HITS: f64 = 0.90;
const PART_OBJECTS: usize = 50;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, n: usize, name: &str, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("criterion {n} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
}

fn rand_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn gradient_fidelity(r: &mut Report) {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for mode in [LocalMode::Hard, LocalMode::Soft] {
        match gradient_check(2024, mode, GRAD_SAMPLES) {
            Ok(g) => {
                worst = worst.max(g.max_rel_err);
                parts.push(format!("{mode:?} max {:.2e} over {}", g.max_rel_err, g.checked));
            }
            Err(e) => {
                worst = f64::INFINITY;
                parts.push(format!("{mode:?} error {e}"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    r.line(
        1,
        "gradient fidelity",
        worst < GRAD_TOL && secs < GRAD_BUDGET_S,
        format!("{}; tol {GRAD_TOL:e}; {secs:.1}s", parts.join(", ")),
    );
}

/// Cell of every point found by testing membership in all 27 boxes.
fn containment_oracle(points: &[Point], lo: Point, hi: Point, clamp: bool) -> Option<Vec<usize>> {
    let cuts: Vec<[f64; 4]> = (0..3)
        .map(|a| {
            let w = (hi[a] - lo[a]) / 3.0;
            [lo[a], lo[a] + w, lo[a] + 2.0 * w, hi[a]]
        })
        .collect();
    let inside = |a: usize, i: usize, v: f64| -> bool {
        if hi[a] <= lo[a] {
            return i == 2;
        }
        let (l, h) = (cuts[a][i - 1], cuts[a][i]);
        let above = v >= l || (clamp && i == 1);
        let below = v < h || (i == 3 && (v <= h || clamp));
        above && below
    };
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let mut found = Vec::new();
        for z in 1..=3 {
            for y in 1..=3 {
                for x in 1..=3 {
                    if inside(0, x, p[0]) && inside(1, y, p[1]) && inside(2, z, p[2]) {
                        found.push(x + 3 * (y - 1) + 9 * (z - 1));
                    }
                }
            }
        }
        if found.len() != 1 {
            return None;
        }
        out.push(found[0]);
    }
    Some(out)
}

fn partition_oracle(r: &mut Report) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    let mut bad_sums = 0;
    for c in 0..PARTITION_CLOUDS {
        let n = rng.random_range(1..=512);
        let style = c % 4;
        let pts: Vec<Point> = (0..n)
            .map(|_| match style {
                // coordinates on a 1/6 lattice land exactly on cut planes
                0 => [0, 1, 2].map(|_| rng.random_range(-6i32..=6) as f64 / 6.0),
                // flat along z
                1 => [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.25],
                _ => [0, 1, 2].map(|_| rng.random_range(-1.5..1.5)),
            })
            .collect();
        let cloud = PointCloud::new(format!("c{c}"), pts).unwrap();
        for frame in [Frame::Aabb, Frame::Unit] {
            let part = partition(&cloud, 1, frame).unwrap();
            let (lo, hi) = match frame {
                Frame::Aabb => {
                    let mut lo = [f64::INFINITY; 3];
                    let mut hi = [f64::NEG_INFINITY; 3];
                    for p in cloud.points() {
                        for a in 0..3 {
                            lo[a] = lo[a].min(p[a]);
                            hi[a] = hi[a].max(p[a]);
                        }
                    }
                    (lo, hi)
                }
                Frame::Unit => ([-1.0; 3], [1.0; 3]),
            };
            match containment_oracle(cloud.points(), lo, hi, frame == Frame::Unit) {
                Some(want) if want == part.assignment => {}
                _ => mismatches += 1,
            }
            if part.counts().iter().sum::<usize>() != n {
                bad_sums += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    r.line(
        2,
        "partition oracle",
        mismatches == 0 && bad_sums == 0 && secs < PARTITION_BUDGET_S,
        format!("{PARTITION_CLOUDS} clouds x 2 frames, {mismatches} mismatches, {bad_sums} bad count sums; {secs:.2}s"),
    );
}

fn pair_structure(r: &mut Report) {
    let t = Instant::now();
    let p = PairIndicator::new();
    let mut ok = true;
    for j in 1..=NUM_BLOCKS {
        let pos = positive_label_indices(j).unwrap();
        let bands_ok = (1..=3).contains(&pos[0]) && (4..=6).contains(&pos[1]) && (7..=9).contains(&pos[2]);
        let row_sum: f64 = (1..=9).map(|k| p.get(j, k)).sum();
        let row_ok = (1..=9).all(|k| (p.get(j, k) == 1.0) == pos.contains(&k));
        ok &= bands_ok && row_sum == 3.0 && row_ok;
    }
    ok &= positive_label_indices(1).unwrap() == [1, 4, 7];
    let secs = t.elapsed().as_secs_f64();
    r.line(
        3,
        "pair structure",
        ok && secs < PAIR_BUDGET_S,
        format!("27 blocks checked, j=1 -> {:?}; {secs:.4}s", positive_label_indices(1).unwrap()),
    );
}

fn soft_indicator_checks(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let s = soft_indicator(&rand_rows(&mut rng, 9, 16)).unwrap();
        for j in 1..=NUM_BLOCKS {
            for band in 0..3 {
                let sum: f64 = (1..=3).map(|i| s.get(j, 3 * band + i)).sum();
                worst_sum = worst_sum.max((sum - 1.0).abs());
            }
        }
    }
    let same = soft_indicator(&vec![vec![0.3, -0.2, 0.9]; 9]).unwrap();
    let uniform_err = (1..=NUM_BLOCKS)
        .flat_map(|j| (1..=9).map(move |k| (j, k)))
        .map(|(j, k)| (same.get(j, k) - 1.0 / 3.0).abs())
        .fold(0.0, f64::max);
    // orthonormal labels within each band: cosines to the positive are (1, 0, 0)
    let basis: Vec<Vec<f64>> = (0..9)
        .map(|k| {
            let mut v = vec![0.0; 3];
            v[k % 3] = 1.0;
            v
        })
        .collect();
    let s = soft_indicator(&basis).unwrap();
    let got = [s.get(1, 1), s.get(1, 2), s.get(1, 3)];
    let e = std::f64::consts::E;
    let want = [0.5761, 0.2119, 0.2119];
    let oracle = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
    let case_err = (0..3).map(|i| (got[i] - want[i]).abs()).fold(0.0, f64::max);
    let oracle_err = (0..3).map(|i| (got[i] - oracle[i]).abs()).fold(0.0, f64::max);
    r.line(
        4,
        "soft indicator",
        worst_sum < SOFT_SUM_TOL && uniform_err < SOFT_SUM_TOL && case_err < SOFT_CASE_TOL && oracle_err < 1e-12,
        format!(
            "max band-sum err {worst_sum:.1e}, uniform err {uniform_err:.1e}, (1,0,0) case {:.4?} err {case_err:.1e}",
            got
        ),
    );
}

/// Pooled local ratio by explicit double loop over blocks and labels.
fn brute_local(local: &[Vec<f64>], valid: &[bool; 27], text: &[Vec<f64>], w: &[[f64; 9]; 27], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..27 {
        if valid[j] {
            for k in 0..9 {
                let f = (cos(&local[j], &text[k]) / tau).exp();
                num += w[j][k] * f;
                den += f;
            }
        }
    }
    -(num / den).ln()
}

fn closed_forms(r: &mut Report) {
    let literal = LossConfig {
        kernel: KernelMode::Literal,
        ..LossConfig::default()
    };
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let g = global_loss(&eye, &eye, &literal).unwrap();
    let g_want = (1.0 + (-1.0f64).exp()).ln();
    let l = local_loss_hard(
        &vec![vec![0.4, -1.0, 2.0]; 27],
        &[true; 27],
        &vec![vec![0.8, -2.0, 4.0]; 9],
        &PairIndicator::new(),
        &LossConfig::default(),
    )
    .unwrap();
    let l_want = 3f64.ln();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let local = rand_rows(&mut rng, 27, 8);
        let text = rand_rows(&mut rng, 9, 8);
        let s = soft_indicator(&rand_rows(&mut rng, 9, 8)).unwrap();
        let mut valid = [false; 27];
        valid.iter_mut().for_each(|v| *v = rng.random_bool(0.6));
        valid[i % 27] = true;
        let tau = rng.random_range(0.05..1.0);
        let cfg = LossConfig {
            tau,
            ..LossConfig::default()
        };
        let got = local_loss_soft(&local, &valid, &text, &s, &cfg).unwrap();
        worst = worst.max((got - brute_local(&local, &valid, &text, &s.table, tau)).abs());
    }
    let ok = (g - g_want).abs() < CLOSED_FORM_TOL && (l - l_want).abs() < CLOSED_FORM_TOL && worst < CLOSED_FORM_TOL;
    r.line(
        5,
        "closed-form losses",
        ok,
        format!(
            "global {g:.5} (want {g_want:.5}), hard local {l:.6} (want ln 3), soft vs double loop max err {worst:.1e} on 50"
        ),
    );
}

fn literal_tau(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut identical = true;
    for _ in 0..20 {
        let objs = rand_rows(&mut rng, 6, 8);
        let texts = rand_rows(&mut rng, 6, 8);
        let local = rand_rows(&mut rng, 27, 8);
        let ltext = rand_rows(&mut rng, 9, 8);
        let soft = soft_indicator(&rand_rows(&mut rng, 9, 8)).unwrap();
        let mut valid = [true; 27];
        valid[rng.random_range(0..27)] = false;
        let mut bits = Vec::new();
        for tau in [0.01, 1.0, 100.0] {
            let cfg = LossConfig {
                tau,
                kernel: KernelMode::Literal,
                ..LossConfig::default()
            };
            bits.push([
                global_loss(&objs, &texts, &cfg).unwrap().to_bits(),
                local_loss_hard(&local, &valid, &ltext, &PairIndicator::new(), &cfg).unwrap().to_bits(),
                local_loss_soft(&local, &valid, &ltext, &soft, &cfg).unwrap().to_bits(),
            ]);
        }
        identical &= bits.iter().all(|b| *b == bits[0]);
    }
    r.line(
        6,
        "literal tau cancellation",
        identical,
        "global, hard and soft local losses over 20 random inputs at tau 0.01/1/100".into(),
    );
}

fn e2e_config(mode: LocalMode) -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 8,
        model: ModelConfig {
            encoder_hidden: vec![32, 64],
            d_e: 64,
            d_out: 32,
            d_et: 256,
            self_heads: 4,
            cross_heads: 4,
            ff_width: 128,
            ln_eps: 1e-5,
        },
        loss: LossConfig {
            local_mode: mode,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn accuracy(model: &FrozenModel, clouds: &[PointCloud], sets: &BTreeMap<String, TextEmbeddingSet>, reasoning: bool) -> f64 {
    let hits = clouds
        .iter()
        .filter(|c| {
            let ranked = if reasoning { reason(c, model, sets) } else { classify(c, model, sets) }.unwrap();
            Some(&ranked[0].class) == c.class_name.as_ref()
        })
        .count();
    hits as f64 / clouds.len() as f64
}

struct EndToEnd {
    hard: TrainOutcome,
    checksums_before: Vec<String>,
    checksums_after: Vec<String>,
    classification_sets: BTreeMap<String, TextEmbeddingSet>,
    training_sets: BTreeMap<String, TextEmbeddingSet>,
    test: Vec<PointCloud>,
}

fn end_to_end(r: &mut Report) -> EndToEnd {
    let t = Instant::now();
    let ds = build_dataset(&DatasetPlan::default()).unwrap();
    let training_sets = embed_label_sets(&ds.training_labels, 256).unwrap();
    let classification_sets = embed_label_sets(&ds.classification_labels, 256).unwrap();
    let paraphrase_sets = embed_label_sets(&ds.paraphrase_labels, 256).unwrap();
    let checksums_before: Vec<String> = training_sets.values().map(TextEmbeddingSet::checksum).collect();
    let hard = train(&ds.train, &training_sets, &e2e_config(LocalMode::Hard)).unwrap();
    let soft = train(&ds.train, &training_sets, &e2e_config(LocalMode::Soft)).unwrap();
    let checksums_after: Vec<String> = training_sets.values().map(TextEmbeddingSet::checksum).collect();

    let hm = FrozenModel::new(hard.checkpoint.clone());
    let sm = FrozenModel::new(soft.checkpoint.clone());
    let hard_cls = accuracy(&hm, &ds.test, &classification_sets, false);
    let hard_reason = accuracy(&hm, &ds.test, &paraphrase_sets, true);
    let soft_cls = accuracy(&sm, &ds.test, &classification_sets, false);
    let means = epoch_means(&hard.metrics);
    let drop = 1.0 - means[means.len() - 1] / means[0];
    let secs = t.elapsed().as_secs_f64();
    r.line(
        8,
        "synthetic end-to-end",
        hard_cls >= MIN_CLASSIFY && hard_reason >= MIN_REASON && soft_cls >= hard_cls - SOFT_SLACK && secs < E2E_BUDGET_S,
        format!(
            "{} train / {} held out; hard classify {hard_cls:.3}, hard reason (paraphrases) {hard_reason:.3}, soft classify {soft_cls:.3}; hard train loss {:.3} -> {:.3} ({:.0}% lower); {secs:.0}s",
            ds.train.len(),
            ds.test.len(),
            means[0],
            means[means.len() - 1],
            100.0 * drop
        ),
    );
    EndToEnd {
        hard,
        checksums_before,
        checksums_after,
        classification_sets,
        training_sets,
        test: ds.test,
    }
}

fn invariances(r: &mut Report, e: &EndToEnd) {
    let model = FrozenModel::new(e.hard.checkpoint.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut perm_ok = true;
    for c in e.test.iter().take(10) {
        let mut order: Vec<usize> = (0..c.len()).collect();
        order.shuffle(&mut rng);
        let a = model.embed_object(c).unwrap().global;
        let b = model.embed_object(&c.permuted(&order)).unwrap().global;
        perm_ok &= a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits()));
    }
    let mut scale_err = 0.0f64;
    let mut argmax_ok = true;
    for c in e.test.iter().take(10) {
        let g = model.embed_object(c).unwrap().global;
        let base = rank_classes(&model, &g, &e.classification_sets).unwrap();
        let mut scaled_sets = e.classification_sets.clone();
        for set in scaled_sets.values_mut() {
            let s = rng.random_range(0.01..100.0);
            set.global.iter_mut().for_each(|lv| lv.vector.iter_mut().for_each(|x| *x *= s));
        }
        let s = rng.random_range(0.01..100.0);
        let g2: Vec<f64> = g.iter().map(|x| x * s).collect();
        let scaled = rank_classes(&model, &g2, &scaled_sets).unwrap();
        argmax_ok &= scaled[0].class == base[0].class;
        for b in &base {
            let other = scaled.iter().find(|x| x.class == b.class).unwrap();
            scale_err = scale_err.max((other.score - b.score).abs());
        }
    }
    let frozen = e.checksums_before == e.checksums_after;
    r.line(
        7,
        "invariance suite",
        perm_ok && argmax_ok && scale_err < SCORE_SCALE_TOL && frozen,
        format!(
            "permutation bit-identical: {perm_ok}; positive scaling max score change {scale_err:.1e}, argmax kept: {argmax_ok}; text checksums unchanged: {frozen}"
        ),
    );
}

fn part_reasoning(r: &mut Report, e: &EndToEnd) {
    let model = FrozenModel::new(e.hard.checkpoint.clone());
    let bottom = &e.training_sets["pole-on-slab"].local[6];
    let prompt = fallback_embed(&bottom.text, 256).unwrap();
    let objects = generate(
        &SynthSpec {
            archetype: Archetype::PoleOnSlab,
            points: 512,
            jitter: 0.005,
            seed: 9001,
        },
        PART_OBJECTS,
    )
    .unwrap();
    let hits = objects
        .clouds
        .iter()
        .filter(|c| part_reason(c, &prompt, &model).unwrap().argmax().unwrap().grid[2] == 1)
        .count();
    let rate = hits as f64 / PART_OBJECTS as f64;
    r.line(
        9,
        "part-reasoning sanity",
        rate >= MIN_PART_HITS,
        format!("prompt {:?}: argmax in z=1 for {hits}/{PART_OBJECTS} objects", bottom.text),
    );
}

fn main() {
    let mut r = Report { failed: 0 };
    gradient_fidelity(&mut r);
    partition_oracle(&mut r);
    pair_structure(&mut r);
    soft_indicator_checks(&mut r);
    closed_forms(&mut r);
    literal_tau(&mut r);
    let e = end_to_end(&mut r);
    invariances(&mut r, &e);
    part_reasoning(&mut r, &e);
    println!("acceptance: {} of 9 criteria passed", 9 - r.failed);
    if r.failed > 0 {
        std::process::exit(1);
    }
}
