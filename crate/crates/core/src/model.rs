//! Global and local branches plus the shared text projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{multihead_attention, AttentionWeights, Tape, Tensor, Var};
use crate::blocks::{BlockPartition, NUM_BLOCKS};
use crate::encoder::{self, glorot, EncoderParams, Linear};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden widths of the point MLP, not counting the final `d_e` layer.
    pub encoder_hidden: Vec<usize>,
    pub d_e: usize,
    pub d_out: usize,
    pub d_et: usize,
    pub self_heads: usize,
    pub cross_heads: usize,
    pub ff_width: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_dims(256, 128, 256)
    }
}

impl ModelConfig {
    /// Default architecture (`3 → 64 → 128 → d_e`, 4 heads, FF width `2·d_e`).
    pub fn with_dims(d_e: usize, d_out: usize, d_et: usize) -> Self {
        Self {
            encoder_hidden: vec![64, 128],
            d_e,
            d_out,
            d_et,
            self_heads: 4,
            cross_heads: 4,
            ff_width: 2 * d_e,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_e == 0 || self.d_out == 0 || self.d_et == 0 || self.ff_width == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.self_heads == 0 || self.d_e % self.self_heads != 0 {
            return bad(format!("d_e={} not divisible by {} heads", self.d_e, self.self_heads));
        }
        if self.cross_heads == 0 || self.d_out % self.cross_heads != 0 {
            return bad(format!("d_out={} not divisible by {} heads", self.d_out, self.cross_heads));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> LayerNormParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl LayerNormParams<Tensor> {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(1, d, 1.0),
            bias: Tensor::zeros(1, d),
        }
    }
}

fn map_attn<T, U>(w: &AttentionWeights<T>, f: &mut dyn FnMut(&T) -> U) -> AttentionWeights<U> {
    AttentionWeights {
        wq: f(&w.wq),
        wk: f(&w.wk),
        wv: f(&w.wv),
        wo: f(&w.wo),
    }
}

fn visit_attn<'a, T>(w: &'a AttentionWeights<T>, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
    f(format!("{prefix}.wq"), &w.wq);
    f(format!("{prefix}.wk"), &w.wk);
    f(format!("{prefix}.wv"), &w.wv);
    f(format!("{prefix}.wo"), &w.wo);
}

fn visit_attn_mut<T>(w: &mut AttentionWeights<T>, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
    f(format!("{prefix}.wq"), &mut w.wq);
    f(format!("{prefix}.wk"), &mut w.wk);
    f(format!("{prefix}.wv"), &mut w.wv);
    f(format!("{prefix}.wo"), &mut w.wo);
}

fn init_attn(rng: &mut impl Rng, d: usize) -> AttentionWeights<Tensor> {
    AttentionWeights {
        wq: glorot(rng, d, d),
        wk: glorot(rng, d, d),
        wv: glorot(rng, d, d),
        wo: glorot(rng, d, d),
    }
}

/// Pre-norm transformer encoder layer over the block tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionLayer<T> {
    pub norm1: LayerNormParams<T>,
    pub attn: AttentionWeights<T>,
    pub norm2: LayerNormParams<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

impl<T> SelfAttentionLayer<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> SelfAttentionLayer<U> {
        SelfAttentionLayer {
            norm1: self.norm1.map(f),
            attn: map_attn(&self.attn, f),
            norm2: self.norm2.map(f),
            ff1: self.ff1.map(f),
            ff2: self.ff2.map(f),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        visit_attn(&self.attn, &format!("{prefix}.attn"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.ff1.visit(&format!("{prefix}.ff1"), f);
        self.ff2.visit(&format!("{prefix}.ff2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        visit_attn_mut(&mut self.attn, &format!("{prefix}.attn"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
        self.ff1.visit_mut(&format!("{prefix}.ff1"), f);
        self.ff2.visit_mut(&format!("{prefix}.ff2"), f);
    }
}

impl SelfAttentionLayer<Var> {
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        heads: usize,
        key_mask: &[bool],
        eps: f64,
    ) -> Result<Var> {
        let h = tape.layer_norm(x, self.norm1.gain, self.norm1.bias, eps)?;
        let a = multihead_attention(tape, h, h, h, &self.attn, heads, Some(key_mask))?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, self.norm2.gain, self.norm2.bias, eps)?;
        let h = self.ff1.forward(tape, h)?;
        let h = tape.relu(h);
        let h = self.ff2.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// All trainable weights. `T` is `Tensor` for storage and `Var` once bound
/// to a tape; the same tree shape also carries gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub encoder: EncoderParams<T>,
    pub w_g: T,
    pub w_l: T,
    pub w_t: T,
    pub self_attn: SelfAttentionLayer<T>,
    pub cross_attn: AttentionWeights<T>,
    pub out_norm: LayerNormParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map(f),
            w_g: f(&self.w_g),
            w_l: f(&self.w_l),
            w_t: f(&self.w_t),
            self_attn: self.self_attn.map(f),
            cross_attn: map_attn(&self.cross_attn, f),
            out_norm: self.out_norm.map(f),
        }
    }

    /// Visits every parameter in a fixed order with a dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.encoder.visit("encoder", f);
        f("w_g".into(), &self.w_g);
        f("w_l".into(), &self.w_l);
        f("w_t".into(), &self.w_t);
        self.self_attn.visit("self_attn", f);
        visit_attn(&self.cross_attn, "cross_attn", f);
        self.out_norm.visit("out_norm", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.encoder.visit_mut("encoder", f);
        f("w_g".into(), &mut self.w_g);
        f("w_l".into(), &mut self.w_l);
        f("w_t".into(), &mut self.w_t);
        self.self_attn.visit_mut("self_attn", f);
        visit_attn_mut(&mut self.cross_attn, "cross_attn", f);
        self.out_norm.visit_mut("out_norm", f);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut widths = cfg.encoder_hidden.clone();
        widths.push(cfg.d_e);
        Ok(Self {
            encoder: EncoderParams::init(rng, &widths)?,
            w_g: glorot(rng, cfg.d_e, cfg.d_out),
            w_l: glorot(rng, cfg.d_e, cfg.d_out),
            w_t: glorot(rng, cfg.d_et, cfg.d_out),
            self_attn: SelfAttentionLayer {
                norm1: LayerNormParams::new(cfg.d_e),
                attn: init_attn(rng, cfg.d_e),
                norm2: LayerNormParams::new(cfg.d_e),
                ff1: Linear::init(rng, cfg.d_e, cfg.ff_width),
                ff2: Linear::init(rng, cfg.ff_width, cfg.d_e),
            },
            cross_attn: init_attn(rng, cfg.d_out),
            out_norm: LayerNormParams::new(cfg.d_out),
        })
    }

    /// Same tree with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        self.map(&mut |t| Tensor::zeros(t.rows(), t.cols()))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Checks every shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let template = ModelParams::init(cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let mine = self.named();
        let want = template.named();
        if mine.len() != want.len() {
            return Err(Error::shape("model params", "parameter count differs from config"));
        }
        for ((n, t), (m, u)) in mine.iter().zip(&want) {
            if n != m || t.shape() != u.shape() {
                return Err(Error::shape(
                    "model params",
                    format!("{n} {:?} vs {m} {:?}", t.shape(), u.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Puts every tensor on the tape as a trainable input.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }

    /// Puts every tensor on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |t| tape.constant(t.clone()))
    }
}

/// `F̄^G = maxpool(features) · W_G`, `1 × d_out`.
pub fn global_branch(tape: &mut Tape, feats: Var, params: &ModelParams<Var>) -> Result<Var> {
    let pooled = tape.max_rows(feats)?;
    tape.matmul(pooled, params.w_g)
}

/// Block tokens `[27 × d_E]` → local embeddings `[27 × d_out]`.
///
/// Invalid blocks are masked as attention keys but still produce rows.
pub fn local_branch(
    tape: &mut Tape,
    block_feats: Var,
    valid: &[bool; NUM_BLOCKS],
    global_emb: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    if !valid.iter().any(|&v| v) {
        return Err(Error::AllBlocksInvalid);
    }
    let f_self = params
        .self_attn
        .forward(tape, block_feats, cfg.self_heads, valid, cfg.ln_eps)?;
    let f_self_bar = tape.matmul(f_self, params.w_l)?;
    let cross = multihead_attention(
        tape,
        global_emb,
        f_self_bar,
        f_self_bar,
        &params.cross_attn,
        cfg.cross_heads,
        Some(valid),
    )?;
    let fused = tape.add_row(f_self_bar, cross)?;
    tape.layer_norm(fused, params.out_norm.gain, params.out_norm.bias, cfg.ln_eps)
}

/// `T̄ = T · W_T` for a batch of raw text embeddings (one per row).
pub fn embed_text(tape: &mut Tape, raw: &[Vec<f64>], params: &ModelParams<Var>) -> Result<Var> {
    for (i, v) in raw.iter().enumerate() {
        if v.iter().all(|x| *x == 0.0) {
            return Err(Error::ZeroVector(format!("text embedding {i}")));
        }
    }
    let d_et = tape.value(params.w_t).rows();
    if let Some(v) = raw.iter().find(|v| v.len() != d_et) {
        return Err(Error::DimensionMismatch {
            expected: d_et,
            found: v.len(),
        });
    }
    let t = tape.constant(Tensor::from_rows(raw)?);
    tape.matmul(t, params.w_t)
}

/// Nodes produced by one object's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ObjectForward {
    pub features: Var,
    pub global: Var,
    pub local: Var,
}

/// Runs encoder, pooling and both branches for a normalized cloud.
pub fn forward_object(
    tape: &mut Tape,
    cloud: &PointCloud,
    part: &BlockPartition,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<ObjectForward> {
    let features = encoder::encode(tape, cloud, &params.encoder)?;
    let global = global_branch(tape, features, params)?;
    let blocks = encoder::block_features(tape, features, part)?;
    let local = local_branch(tape, blocks, &part.valid_mask, global, params, cfg)?;
    Ok(ObjectForward {
        features,
        global,
        local,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{partition, Frame};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            encoder_hidden: vec![6],
            d_e: 8,
            d_out: 4,
            d_et: 5,
            self_heads: 2,
            cross_heads: 2,
            ff_width: 16,
            ln_eps: 1e-5,
        }
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        let pts = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
        PointCloud::new("r", pts).unwrap().normalize()
    }

    // ---- straight-line reference implementation on plain vectors ----

    type Mat = Vec<Vec<f64>>;

    fn mat(t: &Tensor) -> Mat {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    fn mm(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .map(|r| {
                (0..b[0].len())
                    .map(|j| r.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    fn add_bias(a: &Mat, b: &Tensor) -> Mat {
        a.iter()
            .map(|r| r.iter().zip(b.data()).map(|(x, y)| x + y).collect())
            .collect()
    }

    fn ln(a: &Mat, p: &LayerNormParams<Tensor>, eps: f64) -> Mat {
        a.iter()
            .map(|r| {
                let d = r.len() as f64;
                let mu = r.iter().sum::<f64>() / d;
                let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
                r.iter()
                    .enumerate()
                    .map(|(c, v)| (v - mu) / (var + eps).sqrt() * p.gain.data()[c] + p.bias.data()[c])
                    .collect()
            })
            .collect()
    }

    fn attention(q: &Mat, kv: &Mat, w: &AttentionWeights<Tensor>, heads: usize, mask: &[bool]) -> Mat {
        let qp = mm(q, &mat(&w.wq));
        let kp = mm(kv, &mat(&w.wk));
        let vp = mm(kv, &mat(&w.wv));
        let d = qp[0].len();
        let hd = d / heads;
        let mut cat = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            for i in 0..q.len() {
                let scores: Vec<Option<f64>> = (0..kv.len())
                    .map(|j| {
                        mask[j].then(|| {
                            (0..hd).map(|c| qp[i][h * hd + c] * kp[j][h * hd + c]).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                    })
                    .collect();
                let m = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - m).exp())).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    cat[i][h * hd + c] = (0..kv.len()).map(|j| e[j] / z * vp[j][h * hd + c]).sum();
                }
            }
        }
        mm(&cat, &mat(&w.wo))
    }

    fn reference_forward(p: &ModelParams, cfg: &ModelConfig, cloud: &PointCloud, part: &BlockPartition) -> (Vec<f64>, Mat) {
        let mut h: Mat = cloud.points().iter().map(|q| q.to_vec()).collect();
        for (i, l) in p.encoder.layers.iter().enumerate() {
            h = add_bias(&mm(&h, &mat(&l.weight)), &l.bias);
            if i + 1 < p.encoder.layers.len() {
                h.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
            }
        }
        let d_e = h[0].len();
        let gmax: Vec<f64> = (0..d_e).map(|c| h.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max)).collect();
        let g = mm(&vec![gmax], &mat(&p.w_g));
        let mut blocks = vec![vec![0.0; d_e]; 27];
        for j in 0..27 {
            if part.valid_mask[j] {
                for c in 0..d_e {
                    blocks[j][c] = part.per_block_points[j].iter().map(|&i| h[i][c]).fold(f64::NEG_INFINITY, f64::max);
                }
            }
        }
        let sa = &p.self_attn;
        let n1 = ln(&blocks, &sa.norm1, cfg.ln_eps);
        let a = attention(&n1, &n1, &sa.attn, cfg.self_heads, &part.valid_mask);
        let x1: Mat = blocks.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect();
        let n2 = ln(&x1, &sa.norm2, cfg.ln_eps);
        let mut f = add_bias(&mm(&n2, &mat(&sa.ff1.weight)), &sa.ff1.bias);
        f.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
        let f = add_bias(&mm(&f, &mat(&sa.ff2.weight)), &sa.ff2.bias);
        let fself: Mat = x1.iter().zip(&f).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect();
        let fbar = mm(&fself, &mat(&p.w_l));
        let cross = attention(&g, &fbar, &p.cross_attn, cfg.cross_heads, &part.valid_mask);
        let fused: Mat = fbar.iter().map(|r| r.iter().zip(&cross[0]).map(|(u, v)| u + v).collect()).collect();
        (g[0].clone(), ln(&fused, &p.out_norm, cfg.ln_eps))
    }

    fn run(p: &ModelParams, cfg: &ModelConfig, cloud: &PointCloud, part: &BlockPartition) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let out = forward_object(&mut tape, cloud, part, &bound, cfg).unwrap();
        (tape.value(out.global).clone(), tape.value(out.local).clone())
    }

    #[test]
    fn matches_reference_implementation() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        for n in [1, 5, 60] {
            let cloud = random_cloud(&mut rng, n);
            let part = partition(&cloud, 1, Frame::Aabb).unwrap();
            let (g, l) = run(&p, &cfg, &cloud, &part);
            let (rg, rl) = reference_forward(&p, &cfg, &cloud, &part);
            for (a, b) in g.data().iter().zip(&rg) {
                assert!((a - b).abs() < 1e-12);
            }
            for j in 0..27 {
                for (a, b) in l.row(j).iter().zip(&rl[j]) {
                    assert!((a - b).abs() < 1e-10, "n={n} block {j}: {a} vs {b}");
                }
            }
            assert_eq!(l.shape(), [27, cfg.d_out]);
        }
    }

    #[test]
    fn global_branch_identity_projection_and_permutation() {
        let mut cfg = small_cfg();
        cfg.d_out = 8;
        cfg.cross_heads = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        p.w_g = Tensor::identity(8);
        let cloud = random_cloud(&mut rng, 40);
        let part = partition(&cloud, 1, Frame::Aabb).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let f = encoder::encode(&mut tape, &cloud, &bound.encoder).unwrap();
        let g = global_branch(&mut tape, f, &bound).unwrap();
        let m = tape.max_rows(f).unwrap();
        assert_eq!(tape.value(g), tape.value(m));

        let order: Vec<usize> = (0..40).rev().collect();
        let permuted = cloud.permuted(&order);
        let ppart = partition(&permuted, 1, Frame::Aabb).unwrap();
        let (g1, l1) = run(&p, &cfg, &cloud, &part);
        let (g2, l2) = run(&p, &cfg, &permuted, &ppart);
        assert_eq!(g1, g2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn zero_cross_output_reduces_to_layer_norm_of_self_path() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        p.cross_attn.wo = Tensor::zeros(cfg.d_out, cfg.d_out);
        let cloud = random_cloud(&mut rng, 50);
        let part = partition(&cloud, 1, Frame::Aabb).unwrap();
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let out = forward_object(&mut tape, &cloud, &part, &b, &cfg).unwrap();
        let blocks = encoder::block_features(&mut tape, out.features, &part).unwrap();
        let fs = b.self_attn.forward(&mut tape, blocks, cfg.self_heads, &part.valid_mask, cfg.ln_eps).unwrap();
        let fsb = tape.matmul(fs, b.w_l).unwrap();
        let expect = tape.layer_norm(fsb, b.out_norm.gain, b.out_norm.bias, cfg.ln_eps).unwrap();
        assert_eq!(tape.value(out.local), tape.value(expect));
    }

    #[test]
    fn single_valid_block_still_yields_all_rows() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        let cloud = PointCloud::new("one", vec![[0.2, 0.1, 0.3]]).unwrap();
        let part = partition(&cloud, 1, Frame::Aabb).unwrap();
        assert_eq!(part.num_valid(), 1);
        let (_, l) = run(&p, &cfg, &cloud, &part);
        assert_eq!(l.shape(), [27, 4]);
        assert!(l.is_finite());

        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let f = tape.constant(Tensor::zeros(27, cfg.d_e));
        let g = tape.constant(Tensor::zeros(1, cfg.d_out));
        assert!(matches!(
            local_branch(&mut tape, f, &[false; 27], g, &b, &cfg),
            Err(Error::AllBlocksInvalid)
        ));
    }

    #[test]
    fn embed_text_paths() {
        let mut cfg = small_cfg();
        cfg.d_et = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut p = ModelParams::init(&cfg, &mut rng).unwrap();
        p.w_t = Tensor::identity(4);
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let v = vec![vec![0.5, -1.0, 2.0, 3.0]];
        let out = embed_text(&mut tape, &v, &b).unwrap();
        assert_eq!(tape.value(out).data(), v[0].as_slice());
        assert!(matches!(embed_text(&mut tape, &[vec![0.0; 4]], &b), Err(Error::ZeroVector(_))));
        assert!(matches!(
            embed_text(&mut tape, &[vec![1.0; 3]], &b),
            Err(Error::DimensionMismatch { .. })
        ));

        // zero projection gives a zero embedding
        p.w_t = Tensor::zeros(4, 4);
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let out = embed_text(&mut tape, &v, &b).unwrap();
        assert!(tape.value(out).data().iter().all(|x| *x == 0.0));

        // one coordinate by hand
        let w = glorot(&mut rng, 4, 4);
        p.w_t = w.clone();
        let mut tape = Tape::new();
        let b = p.bind_frozen(&mut tape);
        let out = embed_text(&mut tape, &v, &b).unwrap();
        let hand: f64 = (0..4).map(|k| v[0][k] * w.get(k, 2)).sum();
        assert!((tape.value(out).get(0, 2) - hand).abs() < 1e-15);
    }

    #[test]
    fn param_tree_is_consistent() {
        let cfg = small_cfg();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(26)).unwrap();
        p.check_shapes(&cfg).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.contains(&"self_attn.attn.wq".to_string()));
        let mut other = cfg.clone();
        other.d_out = 6;
        assert!(p.check_shapes(&other).is_err());
        assert!(ModelConfig { self_heads: 3, ..cfg }.validate().is_err());
    }
}
