//! 3×3×3 spatial partition and the block/label pair structure.
//!
//! Blocks are numbered `j = x + 3(y-1) + 9(z-1)` with every grid coordinate
//! in `1..=3` (1 = left/front/bottom). Local labels are numbered `k = 1..=9`:
//! x-band `1..=3`, y-band `4..=6`, z-band `7..=9`, so block `j` pairs
//! positively with `k = x`, `3 + y` and `6 + z`.

use serde::{Deserialize, Serialize};

use crate::autodiff::cosine_similarity;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

pub const NUM_BLOCKS: usize = 27;
pub const NUM_LOCAL_LABELS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub x: u8,
    pub y: u8,
    pub z: u8,
}

impl GridCoord {
    pub fn new(x: u8, y: u8, z: u8) -> Result<Self> {
        for v in [x, y, z] {
            if !(1..=3).contains(&v) {
                return Err(Error::OutOfRange {
                    value: v as usize,
                    lo: 1,
                    hi: 3,
                });
            }
        }
        Ok(Self { x, y, z })
    }

    pub fn block_index(self) -> usize {
        self.x as usize + 3 * (self.y as usize - 1) + 9 * (self.z as usize - 1)
    }

    pub fn axis(self, axis: usize) -> u8 {
        [self.x, self.y, self.z][axis]
    }
}

fn check_block(j: usize) -> Result<()> {
    if (1..=NUM_BLOCKS).contains(&j) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            value: j,
            lo: 1,
            hi: NUM_BLOCKS,
        })
    }
}

pub fn grid_to_block_index(g: GridCoord) -> usize {
    g.block_index()
}

pub fn block_index_to_grid(j: usize) -> Result<GridCoord> {
    check_block(j)?;
    let r = j - 1;
    Ok(GridCoord {
        x: (r % 3 + 1) as u8,
        y: (r / 3 % 3 + 1) as u8,
        z: (r / 9 + 1) as u8,
    })
}

/// The three positive label indices of block `j`, ordered x, y, z.
pub fn positive_label_indices(j: usize) -> Result<[usize; 3]> {
    let g = block_index_to_grid(j)?;
    Ok([g.x as usize, 3 + g.y as usize, 6 + g.z as usize])
}

/// How the bounding volume that gets split into thirds is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    /// Tight axis-aligned box of the cloud.
    #[default]
    Aabb,
    /// Fixed `[-1, 1]^3`; points outside are clamped into the edge blocks.
    Unit,
}

impl std::str::FromStr for Frame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aabb" => Ok(Frame::Aabb),
            "unit" => Ok(Frame::Unit),
            _ => Err(Error::Config(format!("unknown frame {s:?} (aabb|unit)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    /// Interior cut positions `[lo + w, lo + 2w]` of one axis.
    pub fn edges(&self, axis: usize) -> [f64; 2] {
        let lo = self.min[axis];
        let w = (self.max[axis] - lo) / 3.0;
        [lo + w, lo + 2.0 * w]
    }

    /// Grid index along `axis`: `[lo, e1)` → 1, `[e1, e2)` → 2, `[e2, hi]` → 3.
    /// A zero-extent axis puts everything in the center.
    pub fn axis_cell(&self, axis: usize, v: f64) -> u8 {
        if self.max[axis] <= self.min[axis] {
            return 2;
        }
        let [e1, e2] = self.edges(axis);
        if v < e1 {
            1
        } else if v < e2 {
            2
        } else {
            3
        }
    }

    pub fn cell(&self, p: &Point) -> GridCoord {
        GridCoord {
            x: self.axis_cell(0, p[0]),
            y: self.axis_cell(1, p[1]),
            z: self.axis_cell(2, p[2]),
        }
    }

    /// Sub-box `(min, max)` of a grid cell.
    pub fn cell_box(&self, g: GridCoord) -> (Point, Point) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            let cuts = [self.min[a], self.edges(a)[0], self.edges(a)[1], self.max[a]];
            let i = g.axis(a) as usize;
            lo[a] = cuts[i - 1];
            hi[a] = cuts[i];
        }
        (lo, hi)
    }

    pub fn cell_center(&self, g: GridCoord) -> Point {
        let (lo, hi) = self.cell_box(g);
        [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    /// Block index (1..=27) of every point.
    pub assignment: Vec<usize>,
    /// Point indices per block, `per_block_points[j - 1]`.
    pub per_block_points: Vec<Vec<usize>>,
    pub valid_mask: [bool; NUM_BLOCKS],
    pub bounds: Bounds,
    pub min_points: usize,
}

impl BlockPartition {
    pub fn counts(&self) -> [usize; NUM_BLOCKS] {
        std::array::from_fn(|i| self.per_block_points[i].len())
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

pub fn partition(cloud: &PointCloud, min_points: usize, frame: Frame) -> Result<BlockPartition> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let min_points = min_points.max(1);
    let bounds = match frame {
        Frame::Aabb => {
            let (min, max) = cloud.bounds();
            Bounds { min, max }
        }
        Frame::Unit => Bounds {
            min: [-1.0; 3],
            max: [1.0; 3],
        },
    };
    let mut assignment = Vec::with_capacity(cloud.len());
    let mut per_block_points = vec![Vec::new(); NUM_BLOCKS];
    for (i, p) in cloud.points().iter().enumerate() {
        let j = bounds.cell(p).block_index();
        assignment.push(j);
        per_block_points[j - 1].push(i);
    }
    let valid_mask = std::array::from_fn(|i| per_block_points[i].len() >= min_points);
    Ok(BlockPartition {
        assignment,
        per_block_points,
        valid_mask,
        bounds,
        min_points,
    })
}

/// Binary positive-pair table between the 27 blocks and the 9 local labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairIndicator {
    pub table: [[f64; NUM_LOCAL_LABELS]; NUM_BLOCKS],
}

impl PairIndicator {
    pub fn new() -> Self {
        let mut table = [[0.0; NUM_LOCAL_LABELS]; NUM_BLOCKS];
        for (r, row) in table.iter_mut().enumerate() {
            for k in positive_label_indices(r + 1).expect("in range") {
                row[k - 1] = 1.0;
            }
        }
        Self { table }
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.table[j - 1][k - 1]
    }
}

impl Default for PairIndicator {
    fn default() -> Self {
        Self::new()
    }
}

/// Similarity-weighted replacement for [`PairIndicator`].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftIndicator {
    pub table: [[f64; NUM_LOCAL_LABELS]; NUM_BLOCKS],
}

impl SoftIndicator {
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.table[j - 1][k - 1]
    }
}

/// Per axis band, softmax over `k` of `cos(T_pos, T_k)` for each of the three
/// positive positions, computed on the raw (unprojected) text embeddings.
pub fn soft_indicator(local_text: &[Vec<f64>]) -> Result<SoftIndicator> {
    if local_text.len() != NUM_LOCAL_LABELS {
        return Err(Error::shape(
            "soft_indicator",
            format!("expected 9 embeddings, got {}", local_text.len()),
        ));
    }
    let dim = local_text[0].len();
    for (k, v) in local_text.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        if v.iter().all(|x| *x == 0.0) {
            return Err(Error::ZeroVector(format!("local text embedding k={}", k + 1)));
        }
    }
    // band_weights[axis][pos - 1] = weights over the three labels of the band
    let mut band_weights = [[[0.0; 3]; 3]; 3];
    for (axis, bands) in band_weights.iter_mut().enumerate() {
        for (pos, weights) in bands.iter_mut().enumerate() {
            let anchor = &local_text[3 * axis + pos];
            let cos: Vec<f64> = (0..3)
                .map(|i| cosine_similarity(anchor, &local_text[3 * axis + i]))
                .collect::<Result<_>>()?;
            let m = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = cos.iter().map(|c| (c - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for i in 0..3 {
                weights[i] = e[i] / s;
            }
        }
    }
    let mut table = [[0.0; NUM_LOCAL_LABELS]; NUM_BLOCKS];
    for (r, row) in table.iter_mut().enumerate() {
        let g = block_index_to_grid(r + 1)?;
        for axis in 0..3 {
            let w = band_weights[axis][g.axis(axis) as usize - 1];
            row[3 * axis..3 * axis + 3].copy_from_slice(&w);
        }
    }
    Ok(SoftIndicator { table })
}
