//! Point-cloud files.
//!
//! * XYZ text: one point per line, three whitespace-separated decimals.
//! * RIPC binary: magic `RIPC`, little-endian `u32` point count, then
//!   `count × 3` little-endian `f32` coordinates.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud};

pub const RIPC_MAGIC: &[u8; 4] = b"RIPC";

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "line {}: expected 3 coordinates, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut p = [0.0; 3];
        for (slot, field) in p.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| {
                Error::Format(format!("line {}: bad number {field:?}", lineno + 1))
            })?;
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 40);
    for p in cloud.points() {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    out
}

pub fn decode_ripc(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 8 || &bytes[..4] != RIPC_MAGIC {
        return Err(Error::Format("missing RIPC magic".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != count * 12 {
        return Err(Error::Format(format!(
            "RIPC declares {count} points but carries {} bytes",
            body.len()
        )));
    }
    let points: Vec<Point> = body
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().expect("4 bytes")) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    PointCloud::new(points)
}

/// Coordinates are narrowed to `f32`.
pub fn encode_ripc(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(RIPC_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a cloud, choosing the format from the extension (`.xyz` is text,
/// anything else must carry the RIPC magic).
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_xyz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("xyz"));
    if is_xyz {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
        parse_xyz(&text)
    } else {
        decode_ripc(&bytes)
    }
    .map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let is_xyz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("xyz"));
    let bytes = if is_xyz {
        format_xyz(cloud).into_bytes()
    } else {
        encode_ripc(cloud)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn xyz_parse_and_errors() {
        let c = parse_xyz("0 0 0\n1.5 -2 3e-1\n\n").unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.5, -2.0, 0.3]]);
        assert!(parse_xyz("1 2\n").is_err());
        assert!(parse_xyz("1 2 x\n").is_err());
        assert!(parse_xyz("").is_err());
    }

    #[test]
    fn ripc_layout_is_bit_exact() {
        let c = PointCloud::new(vec![[1.0, -2.0, 0.5]]).unwrap();
        let bytes = encode_ripc(&c);
        let mut expected = b"RIPC".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        for v in [1.0f32, -2.0, 0.5] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        assert!(decode_ripc(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ripc(b"XXXX\0\0\0\0").is_err());
    }

    proptest! {
        #[test]
        fn f32_representable_clouds_survive_both_formats(
            pts in prop::collection::vec(prop::array::uniform3(-1000.0f32..1000.0), 1..40)
        ) {
            let cloud = PointCloud::new(pts.iter().map(|p| p.map(f64::from)).collect()).unwrap();
            prop_assert_eq!(decode_ripc(&encode_ripc(&cloud)).unwrap(), cloud.clone());
            prop_assert_eq!(parse_xyz(&format_xyz(&cloud)).unwrap(), cloud);
        }
    }
}
