//! Point clouds, normalization and the `.xyz` / manifest file formats.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub id: String,
    pub class_name: Option<String>,
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::NonFinitePoint(i));
        }
        Ok(Self {
            id: id.into(),
            class_name: None,
            points,
        })
    }

    pub fn with_class(mut self, class_name: impl Into<String>) -> Self {
        self.class_name = Some(class_name.into());
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean point. Each axis is summed in sorted order, so the result is
    /// bit-identical for any ordering of the points.
    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        [0, 1, 2].map(|a| {
            let mut v: Vec<f64> = self.points.iter().map(|p| p[a]).collect();
            v.sort_unstable_by(f64::total_cmp);
            v.iter().sum::<f64>() / n
        })
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| norm(p)).fold(0.0, f64::max)
    }

    /// Centers on the centroid and scales so the farthest point has unit norm.
    ///
    /// Clouds whose points all coincide collapse to the origin.
    pub fn normalize(&self) -> PointCloud {
        let c = self.centroid();
        let mut points: Vec<Point> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let scale = points.iter().map(norm).fold(0.0, f64::max);
        if scale > f64::EPSILON * (1.0 + norm(&c)) {
            for p in &mut points {
                for v in p.iter_mut() {
                    *v /= scale;
                }
            }
        } else {
            points.iter_mut().for_each(|p| *p = [0.0; 3]);
        }
        PointCloud {
            id: self.id.clone(),
            class_name: self.class_name.clone(),
            points,
        }
    }

    /// Axis-aligned bounds as (min, max).
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Returns a cloud holding these points reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> PointCloud {
        PointCloud {
            id: self.id.clone(),
            class_name: self.class_name.clone(),
            points: order.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub fn parse_xyz(text: &str, path: &Path) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: &str| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(malformed(&format!("expected 3 values, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (slot, field) in p.iter_mut().zip(&fields) {
            let v: f64 = field.parse().map_err(|_| malformed("not a number"))?;
            if !v.is_finite() {
                return Err(malformed("non-finite value"));
            }
            *slot = v;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(points)
}

/// Reads a whitespace-separated `x y z` file; `#` lines are comments.
pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = crate::error::read_text(path)?;
    let points = parse_xyz(&text, path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PointCloud::new(id, points)
}

/// Writes coordinates with 17 significant digits so a reload is bit-exact.
pub fn save_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in cloud.points() {
        let _ = writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
    }
    crate::error::write_file(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub class_name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_vocabulary: Vec<String>,
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut class_vocabulary: Vec<String> = Vec::new();
        for e in &entries {
            if !seen.insert(e.id.clone()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if !class_vocabulary.contains(&e.class_name) {
                class_vocabulary.push(e.class_name.clone());
            }
        }
        Ok(Self {
            entries,
            class_vocabulary,
        })
    }

    pub fn class_index(&self, class_name: &str) -> Option<usize> {
        self.class_vocabulary.iter().position(|c| c == class_name)
    }

    /// Loads every referenced cloud, tagging it with its id and class.
    pub fn load_clouds(&self) -> Result<Vec<PointCloud>> {
        self.entries
            .iter()
            .map(|e| {
                let mut cloud = load_xyz(&e.path)?.with_class(e.class_name.clone());
                cloud.id = e.id.clone();
                Ok(cloud)
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.id, e.class_name, e.path.display());
        }
        out
    }
}

/// Parses `id<TAB>class<TAB>path` records. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, path: &Path, base: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected id<TAB>class<TAB>path".into(),
            });
        }
        let file = PathBuf::from(fields[2].trim());
        entries.push(ManifestEntry {
            id: fields[0].trim().to_string(),
            class_name: fields[1].trim().to_string(),
            path: if file.is_absolute() { file } else { base.join(file) },
        });
    }
    DatasetManifest::from_entries(entries)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = crate::error::read_text(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, path, base)
}
