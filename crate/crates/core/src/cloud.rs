//! Point clouds, normalization and the two on-disk formats.
//!
//! * `xyz-ascii`: one `x y z` triple per line, whitespace separated. Blank
//!   lines and lines starting with `#` are ignored.
//! * `pcb-binary`: a 16-byte header (`"PCB1"`, u32 count, u32 flags,
//!   u32 reserved = 0) followed by `count x 3` little-endian floats. Flags
//!   bit 0 clear means 32-bit floats; set means 64-bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub category: Option<u32>,
    pub id: String,
}

impl PointCloud {
    /// Checks the cloud is non-empty and finite.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point cloud has no points".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::contract("point cloud has non-finite coordinates"));
        }
        Ok(Self {
            points,
            category: None,
            id: String::new(),
        })
    }

    pub fn with_category(mut self, category: Option<u32>) -> Self {
        self.category = category;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points).expect("non-empty cloud")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.to_points()?)
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }

    /// Centers on the centroid and scales so the farthest point sits at radius 0.5.
    pub fn normalize(&self) -> (PointCloud, Normalization) {
        let t = Normalization::fit(&self.points);
        (self.map(|p| t.apply(p)), t)
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|&p| f(p)).collect(),
            category: self.category,
            id: self.id.clone(),
        }
    }
}

pub fn centroid(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

/// Similarity transform `p -> (p - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: Point,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        center: [0.0; 3],
        scale: 1.0,
    };

    pub fn fit(points: &[Point]) -> Self {
        let center = centroid(points);
        let max_r = points
            .iter()
            .map(|p| dist(p, &center))
            .fold(0.0f64, f64::max);
        let scale = if max_r > 0.0 { 0.5 / max_r } else { 1.0 };
        Self { center, scale }
    }

    pub fn apply(&self, p: Point) -> Point {
        [0, 1, 2].map(|k| (p[k] - self.center[k]) * self.scale)
    }

    pub fn invert(&self, p: Point) -> Point {
        [0, 1, 2].map(|k| p[k] / self.scale + self.center[k])
    }
}

pub(crate) fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn dist(a: &Point, b: &Point) -> f64 {
    sq_dist(a, b).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    XyzAscii,
    PcbBinary,
}

impl CloudFormat {
    /// Guesses from the extension: `.pcb` is binary, anything else ASCII.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pcb") => CloudFormat::PcbBinary,
            _ => CloudFormat::XyzAscii,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz-ascii" | "xyz" => Ok(CloudFormat::XyzAscii),
            "pcb-binary" | "pcb" => Ok(CloudFormat::PcbBinary),
            other => Err(Error::contract(format!(
                "unknown cloud format {other:?} (expected xyz-ascii or pcb-binary)"
            ))),
        }
    }
}

/// Value width used when writing `pcb-binary`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PcbPrecision {
    F32,
    #[default]
    F64,
}

pub const PCB_MAGIC: &[u8; 4] = b"PCB1";
const PCB_FLAG_F64: u32 = 1;

pub fn read_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::XyzAscii => {
            let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
                location: path.display().to_string(),
                message: "file is not UTF-8".into(),
            })?;
            parse_xyz(&text)
        }
        CloudFormat::PcbBinary => decode_pcb(&bytes),
    }
}

/// Writes atomically; `pcb-binary` output uses 64-bit values.
pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    write_cloud_with(path, cloud, format, PcbPrecision::F64)
}

pub fn write_cloud_with(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    format: CloudFormat,
    precision: PcbPrecision,
) -> Result<()> {
    let bytes = match format {
        CloudFormat::XyzAscii => format_xyz(cloud).into_bytes(),
        CloudFormat::PcbBinary => encode_pcb(cloud, precision),
    };
    write_atomic(path.as_ref(), &bytes)
}

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let location = format!("line {}", lineno + 1);
        let mut p = [0.0; 3];
        let mut tokens = line.split_whitespace();
        for slot in p.iter_mut() {
            let tok = tokens.next().ok_or_else(|| Error::Parse {
                location: location.clone(),
                message: "expected 3 coordinates".into(),
            })?;
            *slot = tok.parse::<f64>().map_err(|_| Error::Parse {
                location: location.clone(),
                message: format!("not a number: {tok:?}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    location: location.clone(),
                    message: format!("non-finite coordinate {tok:?}"),
                });
            }
        }
        if tokens.next().is_some() {
            return Err(Error::Parse {
                location,
                message: "more than 3 values".into(),
            });
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 40);
    for p in &cloud.points {
        // Display for f64 prints the shortest string that parses back exactly
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

pub fn encode_pcb(cloud: &PointCloud, precision: PcbPrecision) -> Vec<u8> {
    let width = match precision {
        PcbPrecision::F32 => 4,
        PcbPrecision::F64 => 8,
    };
    let mut out = Vec::with_capacity(16 + cloud.len() * 3 * width);
    out.extend_from_slice(PCB_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    let flags = if precision == PcbPrecision::F64 { PCB_FLAG_F64 } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in cloud.points.iter().flatten() {
        match precision {
            PcbPrecision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            PcbPrecision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_pcb(bytes: &[u8]) -> Result<PointCloud> {
    let err = |offset: usize, message: &str| Error::Parse {
        location: format!("byte offset {offset}"),
        message: message.into(),
    };
    if bytes.len() < 16 {
        return Err(err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != PCB_MAGIC {
        return Err(err(0, "bad magic, expected PCB1"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let count = word(4) as usize;
    let flags = word(8);
    if flags & !PCB_FLAG_F64 != 0 {
        return Err(err(8, "unknown flag bits"));
    }
    let width = if flags & PCB_FLAG_F64 != 0 { 8 } else { 4 };
    let expected = 16 + count * 3 * width;
    if bytes.len() != expected {
        return Err(err(
            bytes.len().min(expected),
            &format!("expected {expected} bytes for {count} points, found {}", bytes.len()),
        ));
    }
    let body = &bytes[16..];
    let values: Vec<f64> = if width == 8 {
        body.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        body.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(err(16 + pos * width, "non-finite coordinate"));
    }
    let points = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_two_point_xyz() {
        let c = parse_xyz("0 0 0\n1 0 0\n").unwrap();
        assert_eq!(c.points, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn non_numeric_token_names_the_line() {
        let err = parse_xyz("0 0 0\n1 x 0\n").unwrap_err();
        match err {
            Error::Parse { location, message } => {
                assert_eq!(location, "line 2");
                assert!(message.contains("\"x\""));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_empty_input_error() {
        assert!(matches!(parse_xyz("\n# nothing\n"), Err(Error::Empty(_))));
        assert!(matches!(decode_pcb(&encode_header(0, 0)), Err(Error::Empty(_))));
    }

    fn encode_header(count: u32, flags: u32) -> Vec<u8> {
        let mut v = PCB_MAGIC.to_vec();
        v.extend_from_slice(&count.to_le_bytes());
        v.extend_from_slice(&flags.to_le_bytes());
        v.extend_from_slice(&0u32.to_le_bytes());
        v
    }

    #[test]
    fn pcb_header_is_sixteen_bytes() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let b = encode_pcb(&c, PcbPrecision::F32);
        assert_eq!(b.len(), 16 + 12);
        assert_eq!(&b[..4], b"PCB1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[16..20].try_into().unwrap()), 1.0);
    }

    #[test]
    fn pcb_truncated_is_rejected_with_offset() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = encode_pcb(&c, PcbPrecision::F32);
        assert!(matches!(decode_pcb(&b[..b.len() - 2]), Err(Error::Parse { .. })));
        assert!(matches!(decode_pcb(&b[..10]), Err(Error::Parse { .. })));
    }

    #[test]
    fn normalization_inverts() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0], [3.0, 2.0, 3.0], [2.0, 5.0, 1.0]]).unwrap();
        let (n, t) = c.normalize();
        let max_r = n.points.iter().map(|p| dist(p, &[0.0; 3])).fold(0.0, f64::max);
        assert!((max_r - 0.5).abs() < 1e-12);
        for (a, b) in c.points.iter().zip(&n.points) {
            let back = t.invert(*b);
            for k in 0..3 {
                assert!((a[k] - back[k]).abs() < 1e-12);
            }
        }
    }

    fn arb_cloud() -> impl Strategy<Value = Vec<[f64; 3]>> {
        prop::collection::vec(prop::array::uniform3(-1e3f64..1e3), 1..100)
    }

    proptest! {
        #[test]
        fn pcb_f64_round_trip_is_bit_exact(points in arb_cloud()) {
            let c = PointCloud::new(points).unwrap();
            let back = decode_pcb(&encode_pcb(&c, PcbPrecision::F64)).unwrap();
            prop_assert_eq!(back.points, c.points);
        }

        #[test]
        fn pcb_f32_round_trip_is_bit_exact_after_one_rounding(points in arb_cloud()) {
            let c = PointCloud::new(points).unwrap();
            let once = decode_pcb(&encode_pcb(&c, PcbPrecision::F32)).unwrap();
            let twice = decode_pcb(&encode_pcb(&once, PcbPrecision::F32)).unwrap();
            prop_assert_eq!(&once.points, &twice.points);
            for (a, b) in c.points.iter().flatten().zip(once.points.iter().flatten()) {
                prop_assert_eq!(*b, *a as f32 as f64);
            }
        }

        #[test]
        fn xyz_round_trip(points in arb_cloud()) {
            let c = PointCloud::new(points).unwrap();
            let back = parse_xyz(&format_xyz(&c)).unwrap();
            for (a, b) in c.points.iter().flatten().zip(back.points.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
