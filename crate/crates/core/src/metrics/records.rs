//! One JSON object per line:
//! `{"category": "mug", "symmetry": "none", "pred": {"R": [9], "t": [3], "s": [3]}, "gt": {...}}`.
//! `symmetry` is `"none"` or `{"axial": [x, y, z]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::pointcloud::Pose;

/// Rotations read from files may carry printing roundoff up to this much.
const FILE_ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Symmetry {
    None,
    /// Unit axis in the object frame.
    Axial(Vec3),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub category: String,
    pub symmetry: Symmetry,
    pub predicted: Pose,
    pub ground_truth: Pose,
}

impl EvalRecord {
    pub fn rotation_error_deg(&self) -> f64 {
        super::rotation_error_deg(self.predicted.rotation(), self.ground_truth.rotation(), self.symmetry)
    }

    pub fn translation_error_cm(&self) -> f64 {
        super::translation_error_cm(self.predicted.translation(), self.ground_truth.translation())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawSymmetry {
    None,
    Axial([f64; 3]),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPose {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    s: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    category: String,
    symmetry: RawSymmetry,
    pred: RawPose,
    gt: RawPose,
}

impl RawPose {
    fn from_pose(p: &Pose) -> Self {
        let r = p.rotation();
        Self {
            r: std::array::from_fn(|i| r[i / 3][i % 3]),
            t: p.translation(),
            s: p.size(),
        }
    }

    fn to_pose(&self) -> Result<Pose> {
        let r: Mat3 = std::array::from_fn(|i| std::array::from_fn(|j| self.r[i * 3 + j]));
        match Pose::new(r, self.t, self.s) {
            Ok(p) => Ok(p),
            Err(_)
                if r.iter().flatten().all(|v| v.is_finite())
                    && linalg::orthonormality_error(&r) <= FILE_ROTATION_TOLERANCE
                    && (linalg::determinant(&r) - 1.0).abs() <= FILE_ROTATION_TOLERANCE =>
            {
                Pose::new(orthonormalize(&r), self.t, self.s)
            }
            Err(e) => Err(e),
        }
    }
}

/// Gram-Schmidt on the rows.
fn orthonormalize(r: &Mat3) -> Mat3 {
    let x = linalg::normalize(r[0]);
    let y = linalg::normalize(linalg::sub(r[1], linalg::scale(x, linalg::dot(x, r[1]))));
    [x, y, linalg::cross(x, y)]
}

fn to_raw(r: &EvalRecord) -> RawRecord {
    RawRecord {
        category: r.category.clone(),
        symmetry: match r.symmetry {
            Symmetry::None => RawSymmetry::None,
            Symmetry::Axial(a) => RawSymmetry::Axial(a),
        },
        pred: RawPose::from_pose(&r.predicted),
        gt: RawPose::from_pose(&r.ground_truth),
    }
}

fn from_raw(raw: RawRecord) -> Result<EvalRecord> {
    let symmetry = match raw.symmetry {
        RawSymmetry::None => Symmetry::None,
        RawSymmetry::Axial(a) => {
            if !a.iter().all(|v| v.is_finite()) || (linalg::norm(a) - 1.0).abs() > FILE_ROTATION_TOLERANCE {
                return Err(invalid("symmetry axis must be unit length"));
            }
            Symmetry::Axial(a)
        }
    };
    Ok(EvalRecord {
        category: raw.category,
        symmetry,
        predicted: raw.pred.to_pose()?,
        ground_truth: raw.gt.to_pose()?,
    })
}

/// Parse JSON lines. Blank lines are skipped.
pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        out.push(from_raw(raw).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    parse_records(&std::fs::read_to_string(path)?)
}

pub fn write_records(records: &[EvalRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(&to_raw(r)).expect("records serialize to JSON"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rot = linalg::axis_angle(linalg::normalize([1.0, 2.0, 3.0]), 0.7);
        let recs = vec![
            EvalRecord {
                category: "mug".into(),
                symmetry: Symmetry::Axial([0.0, 1.0, 0.0]),
                predicted: Pose::new(rot, [0.1, -0.2, 0.3], [0.1, 0.2, 0.3]).unwrap(),
                ground_truth: Pose::identity(),
            },
            EvalRecord {
                category: "laptop".into(),
                symmetry: Symmetry::None,
                predicted: Pose::identity(),
                ground_truth: Pose::new(rot, [1.0, 2.0, 3.0], [1.0; 3]).unwrap(),
            },
        ];
        let text = write_records(&recs);
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"symmetry\":\"none\""));
        assert_eq!(parse_records(&text).unwrap(), recs);
    }

    #[test]
    fn rounded_rotation_accepted() {
        let line = r#"{"category":"can","symmetry":{"axial":[0,0,1]},"pred":{"R":[0.866025,-0.5,0,0.5,0.866025,0,0,0,1],"t":[0,0,0],"s":[1,1,1]},"gt":{"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0],"s":[1,1,1]}}"#;
        let r = &parse_records(line).unwrap()[0];
        assert!(linalg::orthonormality_error(r.predicted.rotation()) < 1e-12);
        assert_eq!(r.rotation_error_deg(), 0.0);
    }

    #[test]
    fn errors_name_the_line() {
        let good = write_records(&[EvalRecord {
            category: "a".into(),
            symmetry: Symmetry::None,
            predicted: Pose::identity(),
            ground_truth: Pose::identity(),
        }]);
        let bad_axis = good.replace("\"none\"", "{\"axial\":[0,0,2]}");
        let zero_size = good.replacen("\"s\":[1.0,1.0,1.0]", "\"s\":[0.0,1.0,1.0]", 1);
        for text in [
            format!("\n{bad_axis}"),
            format!("{good}{zero_size}"),
            format!("{good}{{}}"),
        ] {
            match parse_records(&text) {
                Err(Error::Parse { line: 2, .. }) => {}
                other => panic!("{other:?}"),
            }
        }
    }
}
