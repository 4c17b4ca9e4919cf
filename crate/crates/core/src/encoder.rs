//! Per-point feature extractor and block pooling.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::blocks::{BlockPartition, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Dense layer `x · weight + bias` with `weight: in × out`, `bias: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl Linear<Tensor> {
    /// Glorot-uniform weight, zero bias.
    pub fn init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: glorot(rng, fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_row(h, self.bias)
    }
}

pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("sized")
}

/// Shared per-point MLP `3 → h₁ → … → d_E`, ReLU between layers and none
/// after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub layers: Vec<Linear<T>>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

impl EncoderParams<Tensor> {
    /// `widths` lists every layer output, ending with `d_E`.
    pub fn init(rng: &mut impl Rng, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config(format!("bad encoder widths {widths:?}")));
        }
        let mut fan_in = 3;
        let layers = widths
            .iter()
            .map(|&w| {
                let l = Linear::init(rng, fan_in, w);
                fan_in = w;
                l
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Checks the layer chain starts at 3 and each layer feeds the next.
    pub fn validate(&self) -> Result<()> {
        let mut fan_in = 3;
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.rows() != fan_in || l.bias.shape() != [1, l.weight.cols()] {
                return Err(Error::shape(
                    "encoder",
                    format!("layer {i}: weight {:?} bias {:?}, expected input {fan_in}", l.weight.shape(), l.bias.shape()),
                ));
            }
            fan_in = l.weight.cols();
        }
        if self.layers.is_empty() {
            return Err(Error::shape("encoder", "no layers"));
        }
        Ok(())
    }
}

/// Anything mapping an `n × 3` point matrix to `n × d_E` features.
pub trait PointEncoder {
    fn forward(&self, tape: &mut Tape, points: Var) -> Result<Var>;
}

impl PointEncoder for EncoderParams<Var> {
    fn forward(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let mut h = points;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

pub fn points_tensor(cloud: &PointCloud) -> Tensor {
    let data = cloud.points().iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::from_vec(cloud.len(), 3, data).expect("n x 3")
}

/// Per-point features `[n × d_E]`, row `i` belonging to point `i`.
pub fn encode(tape: &mut Tape, cloud: &PointCloud, encoder: &dyn PointEncoder) -> Result<Var> {
    let x = tape.constant(points_tensor(cloud));
    encoder.forward(tape, x)
}

/// Max-pooled feature per block `[27 × d_E]` from the already-computed point
/// features. Blocks below the point threshold get a zero row.
pub fn block_features(tape: &mut Tape, feats: Var, part: &BlockPartition) -> Result<Var> {
    if part.assignment.len() != tape.value(feats).rows() {
        return Err(Error::shape(
            "block_features",
            format!(
                "{} assignments for {} feature rows",
                part.assignment.len(),
                tape.value(feats).rows()
            ),
        ));
    }
    let groups: Vec<Vec<usize>> = (0..NUM_BLOCKS)
        .map(|b| {
            if part.valid_mask[b] {
                part.per_block_points[b].clone()
            } else {
                Vec::new()
            }
        })
        .collect();
    tape.segment_max(feats, &groups)
}
