//! Paired partial/complete datasets and their tab-separated manifest.
//!
//! Manifest columns: `id category split partial complete cx cy cz scale`.
//! Cloud paths are relative to the manifest's directory; `cx cy cz scale`
//! record the normalization applied to both clouds of the pair. Lines
//! starting with `#` are comments.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cloud::{read_cloud, write_cloud, CloudFormat, Normalization, PointCloud};
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::synth::{make_partial, random_viewpoint, Category, SyntheticShape, Visibility};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::contract(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub id: String,
    pub category: u32,
    pub split: Split,
    pub partial: PointCloud,
    pub complete: PointCloud,
    pub normalization: Normalization,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<DatasetPair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DatasetPair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    /// Distinct category ids, ascending.
    pub fn categories(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.pairs.iter().map(|p| p.category).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub categories: Vec<Category>,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub complete_points: usize,
    /// Points sampled before the visibility cut.
    pub scan_points: usize,
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            categories: Category::ALL.to_vec(),
            train_per_category: 40,
            test_per_category: 10,
            complete_points: 2048,
            scan_points: 512,
            keep_fraction: 0.5,
            seed: 0,
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Builds one normalized pair: the complete cloud and a half-visible scan of
/// a separate sample of the same shape, both mapped by the complete cloud's
/// normalization.
pub fn synth_pair(category: Category, index: usize, split: Split, spec: &SynthSpec) -> Result<DatasetPair> {
    let s = mix(spec.seed, category.id() as u64, index as u64);
    let shape = SyntheticShape::new(category, s);
    let raw = PointCloud::new(shape.sample(spec.complete_points, s ^ 1)?)?;
    let (complete, normalization) = raw.normalize();
    let scan = PointCloud::new(shape.sample(spec.scan_points, s ^ 2)?)?;
    let view = random_viewpoint(&mut ChaCha8Rng::seed_from_u64(s ^ 3));
    let partial = make_partial(&scan, view, spec.keep_fraction, s ^ 4, Visibility::HalfSpace)?;
    let id = format!("{}-{index:04}", category.name());
    let c = Some(category.id());
    Ok(DatasetPair {
        partial: partial.map(|p| normalization.apply(p)).with_category(c).with_id(id.clone()),
        complete: complete.with_category(c).with_id(id.clone()),
        id,
        category: category.id(),
        split,
        normalization,
    })
}

pub fn synthesize(spec: &SynthSpec) -> Result<Dataset> {
    let mut pairs = Vec::new();
    for &cat in &spec.categories {
        let total = spec.train_per_category + spec.test_per_category;
        for i in 0..total {
            let split = if i < spec.train_per_category { Split::Train } else { Split::Test };
            pairs.push(synth_pair(cat, i, split, spec)?);
        }
    }
    Ok(Dataset { pairs })
}

/// Writes clouds as 64-bit `pcb-binary` under `dir/<split>/` plus
/// `dir/manifest.tsv`; returns the manifest path.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    let mut manifest = String::from("# id\tcategory\tsplit\tpartial\tcomplete\tcx\tcy\tcz\tscale\n");
    for p in &data.pairs {
        let partial = format!("{}/{}.partial.pcb", p.split, p.id);
        let complete = format!("{}/{}.complete.pcb", p.split, p.id);
        write_cloud(dir.join(&partial), &p.partial, CloudFormat::PcbBinary)?;
        write_cloud(dir.join(&complete), &p.complete, CloudFormat::PcbBinary)?;
        let n = &p.normalization;
        let cat = Category::from_id(p.category).map_or_else(|| p.category.to_string(), |c| c.name().to_string());
        let _ = writeln!(
            manifest,
            "{}\t{cat}\t{}\t{partial}\t{complete}\t{}\t{}\t{}\t{}",
            p.id, p.split, n.center[0], n.center[1], n.center[2], n.scale
        );
    }
    let path = dir.join("manifest.tsv");
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

fn parse_category(s: &str) -> Result<u32> {
    s.parse::<Category>()
        .map(Category::id)
        .or_else(|_| s.parse::<u32>())
        .map_err(|_| Error::contract(format!("unknown category {s:?}")))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse {
            location: format!("{}:{}", path.display(), n + 1),
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 9 {
            return Err(bad(format!("expected 9 tab-separated columns, found {}", cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("not a number: {s:?}")));
        let category = parse_category(cols[1]).map_err(|e| bad(e.to_string()))?;
        let split = cols[2].parse::<Split>().map_err(|e| bad(e.to_string()))?;
        let normalization = Normalization {
            center: [num(cols[5])?, num(cols[6])?, num(cols[7])?],
            scale: num(cols[8])?,
        };
        let load = |rel: &str| -> Result<PointCloud> {
            let p = root.join(rel);
            Ok(read_cloud(&p, CloudFormat::from_path(&p))?
                .with_category(Some(category))
                .with_id(cols[0]))
        };
        pairs.push(DatasetPair {
            id: cols[0].to_string(),
            category,
            split,
            partial: load(cols[3])?,
            complete: load(cols[4])?,
            normalization,
        });
    }
    Ok(Dataset { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_per_category: 2,
            test_per_category: 1,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn pair_sizes_and_normalization() {
        let p = synth_pair(Category::Cylinder, 0, Split::Train, &SynthSpec::default()).unwrap();
        assert_eq!(p.complete.len(), 2048);
        assert_eq!(p.partial.len(), 256);
        let max_r = p.complete.points.iter().map(|q| (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()).fold(0.0, f64::max);
        assert!((max_r - 0.5).abs() < 1e-9);
    }

    #[test]
    fn synthesis_is_deterministic() {
        assert_eq!(synthesize(&small()).unwrap(), synthesize(&small()).unwrap());
        let other = SynthSpec { seed: 1, ..small() };
        assert_ne!(synthesize(&small()).unwrap(), synthesize(&other).unwrap());
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = synthesize(&small()).unwrap();
        let manifest = write_dataset(dir.path(), &data).unwrap();
        let back = load_manifest(&manifest).unwrap();
        assert_eq!(back, data);
        assert_eq!(back.split(Split::Test).len(), 4);
        assert_eq!(back.categories(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn manifest_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        std::fs::write(&path, "# header\na\tcylinder\ttrain\n").unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("m.tsv:2"), "{err}");
        std::fs::write(&path, "a\tcylinder\ttrain\tnope.pcb\tnope.pcb\t0\t0\t0\t1\n").unwrap();
        let err = load_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("nope.pcb"), "{err}");
    }
}
