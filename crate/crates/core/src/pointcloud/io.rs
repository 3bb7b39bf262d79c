//! ASCII PLY and whitespace-separated XYZ text.
//!
//! Coordinates are written in scientific notation with 17 significant digits,
//! which round-trips every `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};
use crate::linalg::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointFormat {
    PlyAscii,
    XyzText,
}

impl PointFormat {
    /// `.ply` maps to PLY, everything else to XYZ text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => Self::PlyAscii,
            _ => Self::XyzText,
        }
    }
}

pub fn load_pointcloud(path: &Path, format: PointFormat) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    match format {
        PointFormat::PlyAscii => parse_ply(&text),
        PointFormat::XyzText => parse_xyz(&text),
    }
}

pub fn save_pointcloud(pc: &PointCloud, path: &Path, format: PointFormat) -> Result<()> {
    let text = match format {
        PointFormat::PlyAscii => write_ply(pc),
        PointFormat::XyzText => write_xyz(pc),
    };
    std::fs::write(path, text)?;
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_coord(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("not a number: {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite coordinate {tok:?}")));
    }
    Ok(v)
}

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(parse_err(i + 1, format!("expected 3 values, found {}", toks.len())));
        }
        points.push([
            parse_coord(toks[0], i + 1)?,
            parse_coord(toks[1], i + 1)?,
            parse_coord(toks[2], i + 1)?,
        ]);
    }
    PointCloud::new(points)
}

pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(1, "missing 'ply' magic")),
    }

    let mut vertex_count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;
    for (i, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", "ascii", "1.0"] => {}
            ["format", other, ..] => {
                return Err(parse_err(
                    i + 1,
                    format!("unsupported PLY format {other:?}; only ascii 1.0 is read"),
                ))
            }
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse().map_err(|_| parse_err(i + 1, "bad vertex count"))?);
            }
            ["element", other, ..] => return Err(parse_err(i + 1, format!("unsupported element {other:?}"))),
            ["property", ty, name] => {
                if vertex_count.is_none() {
                    return Err(parse_err(i + 1, "property before element"));
                }
                if !matches!(*ty, "float" | "double" | "float32" | "float64") {
                    return Err(parse_err(i + 1, format!("unsupported property type {ty:?}")));
                }
                props.push(name.to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(i + 1, format!("unexpected header line {raw:?}"))),
        }
    }
    if !header_done {
        return Err(parse_err(0, "missing end_header"));
    }
    let count = vertex_count.ok_or_else(|| parse_err(0, "missing 'element vertex'"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| parse_err(0, format!("missing property {name}")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);

    let mut points: Vec<Vec3> = Vec::with_capacity(count);
    for (i, raw) in lines {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if points.len() == count {
            return Err(parse_err(i + 1, format!("more than the declared {count} vertices")));
        }
        if toks.len() != props.len() {
            return Err(parse_err(
                i + 1,
                format!("expected {} values, found {}", props.len(), toks.len()),
            ));
        }
        points.push([
            parse_coord(toks[cx], i + 1)?,
            parse_coord(toks[cy], i + 1)?,
            parse_coord(toks[cz], i + 1)?,
        ]);
    }
    if points.len() != count {
        return Err(parse_err(
            0,
            format!("declared {count} vertices but found {}", points.len()),
        ));
    }
    PointCloud::new(points)
}

fn push_row(out: &mut String, p: &Vec3) {
    writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]).unwrap();
}

pub fn write_ply(pc: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", pc.len()).unwrap();
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in pc.points() {
        push_row(&mut out, p);
    }
    out
}

pub fn write_xyz(pc: &PointCloud) -> String {
    let mut out = String::new();
    for p in pc.points() {
        push_row(&mut out, p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_shape, ShapeKind, ShapeSpec};
    use crate::rng::Rng;

    #[test]
    fn xyz_three_points() {
        let pc = parse_xyz("0 0 0\n1 0 0\n0 1 0\n").unwrap();
        assert_eq!(pc.points(), &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn xyz_comments_and_errors() {
        let pc = parse_xyz("# header\n\n1 2 3\n  # indented comment\n4 5 6").unwrap();
        assert_eq!(pc.len(), 2);
        assert!(matches!(parse_xyz("1 2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(parse_xyz("1 2 x\n").is_err());
        assert!(parse_xyz("1 2 nan\n").is_err());
        assert!(matches!(parse_xyz("# nothing\n"), Err(Error::EmptyCloud)));
    }

    #[test]
    fn ply_row_count_mismatch() {
        let text = "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nend_header\n\
                    0 0 0\n1 0 0\n0 1 0\n0 0 1\n";
        assert!(matches!(parse_ply(text), Err(Error::Parse { .. })));
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n\
                    0 0 0\n1 0 0\n";
        assert!(parse_ply(text).is_err());
    }

    #[test]
    fn ply_rejects_binary_and_bad_header() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nend_header\n";
        let err = parse_ply(text).unwrap_err().to_string();
        assert!(err.contains("binary_little_endian"), "{err}");
        assert!(parse_ply("not a ply\n").is_err());
        assert!(parse_ply("ply\nformat ascii 1.0\nelement vertex 0\n").is_err());
        let no_z = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n";
        assert!(parse_ply(no_z).is_err());
    }

    #[test]
    fn ply_extra_properties_and_comments() {
        let text =
            "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float y\nproperty float x\n\
                    property float intensity\nproperty float z\nend_header\n1 2 0.5 3\n4 5 0.5 6\n";
        let pc = parse_ply(text).unwrap();
        assert_eq!(pc.points(), &[[2.0, 1.0, 3.0], [5.0, 4.0, 6.0]]);
    }

    #[test]
    fn single_point_round_trip() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(parse_ply(&write_ply(&pc)).unwrap(), pc);
        assert_eq!(parse_xyz(&write_xyz(&pc)).unwrap(), pc);
    }

    #[test]
    fn random_cloud_round_trip_bit_exact() {
        let mut rng = Rng::new(7);
        let pc = PointCloud::new(
            (0..100)
                .map(|_| [rng.normal() * 1e3, rng.uniform() * 1e-7, -rng.uniform()])
                .collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, fmt) in [("a.ply", PointFormat::PlyAscii), ("a.xyz", PointFormat::XyzText)] {
            let path = dir.path().join(name);
            save_pointcloud(&pc, &path, fmt).unwrap();
            assert_eq!(PointFormat::from_path(&path), fmt);
            let back = load_pointcloud(&path, fmt).unwrap();
            for (a, b) in pc.points().iter().zip(back.points()) {
                assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
            }
        }
    }

    #[test]
    fn sphere_round_trip() {
        let pc = generate_shape(&ShapeSpec::new(ShapeKind::Sphere { radius: 1.0 }, 3).unwrap(), 1028).unwrap();
        let back = parse_ply(&write_ply(&pc)).unwrap();
        assert_eq!(back.len(), 1028);
        assert_eq!(back, pc);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let pc = PointCloud::new(vec![[0.0; 3]]).unwrap();
        let err = save_pointcloud(&pc, Path::new("/nonexistent-dir/x/y.ply"), PointFormat::PlyAscii);
        assert!(matches!(err, Err(Error::Io(_))));
    }
}
