use hscope::linalg::{self, Mat3, IDENTITY};
use hscope::metrics::{
    iou3d, parse_records, rotation_error_deg, translation_error_cm, write_records, EvalRecord, MetricsReport,
    OrientedBox, Symmetry, COLUMNS,
};
use hscope::pointcloud::Pose;
use hscope::rng::Rng;

fn pose(r: Mat3, t: [f64; 3], s: [f64; 3]) -> Pose {
    Pose::new(r, t, s).unwrap()
}

fn record(category: &str, symmetry: Symmetry, pred: Pose, gt: Pose) -> EvalRecord {
    EvalRecord {
        category: category.into(),
        symmetry,
        predicted: pred,
        ground_truth: gt,
    }
}

#[test]
fn rotated_box_iou_matches_hand_value() {
    // a unit cube turned 90° about z is the same cube
    let a = OrientedBox::axis_aligned([0.0; 3], [1.0; 3]).unwrap();
    let b = OrientedBox::new(pose(
        linalg::axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2),
        [0.0; 3],
        [1.0; 3],
    ));
    assert!((iou3d(&a, &b, 100_000, 1).unwrap() - 1.0).abs() < 0.01);
    // 45°: the intersection is a regular octagon prism, area 2(√2 - 1)
    let c = OrientedBox::new(pose(
        linalg::axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_4),
        [0.0; 3],
        [1.0; 3],
    ));
    let inter = 2.0 * (2f64.sqrt() - 1.0);
    let expect = inter / (2.0 - inter);
    assert!((iou3d(&a, &c, 100_000, 2).unwrap() - expect).abs() < 0.01);
}

#[test]
fn iou_is_seeded() {
    let a = OrientedBox::axis_aligned([0.0; 3], [1.0, 2.0, 1.0]).unwrap();
    let b = OrientedBox::new(pose(
        linalg::axis_angle([1.0, 1.0, 0.0], 0.4),
        [0.2, 0.0, 0.1],
        [1.0; 3],
    ));
    assert_eq!(iou3d(&a, &b, 20_000, 5).unwrap(), iou3d(&a, &b, 20_000, 5).unwrap());
    assert!(iou3d(&a, &b, 10, 5).is_err());
}

#[test]
fn translation_is_centimeters() {
    assert!((translation_error_cm([0.0, 0.03, 0.04], [0.0; 3]) - 5.0).abs() < 1e-12);
}

#[test]
fn flipped_axis_is_not_symmetric() {
    let flip = linalg::axis_angle([1.0, 0.0, 0.0], std::f64::consts::PI);
    let e = rotation_error_deg(&flip, &IDENTITY, Symmetry::Axial([0.0, 0.0, 1.0]));
    assert!((e - 180.0).abs() < 1e-9);
}

#[test]
fn report_counts_thresholds() {
    let gt = pose(IDENTITY, [0.0; 3], [0.2; 3]);
    let rot = |deg: f64| linalg::axis_angle([0.0, 1.0, 0.0], deg.to_radians());
    let records = vec![
        record("mug", Symmetry::None, gt, gt),
        // 7° and 3 cm: fails 5°2cm, 5°5cm, 10°2cm and 2cm, passes 10°5cm
        record("mug", Symmetry::None, pose(rot(7.0), [0.03, 0.0, 0.0], [0.2; 3]), gt),
        // any spin about the declared axis is free
        record(
            "can",
            Symmetry::Axial([0.0, 0.0, 1.0]),
            pose(linalg::axis_angle([0.0, 0.0, 1.0], 1.0), [0.0; 3], [0.2; 3]),
            gt,
        ),
    ];
    let r = MetricsReport::compute(&records, 100_000, 0).unwrap();
    assert_eq!(r.count, 3);
    let mug = r.per_category["mug"];
    let col = |name: &str| COLUMNS.iter().position(|c| *c == name).unwrap();
    assert_eq!(mug[col("5°2cm")], 0.5);
    assert_eq!(mug[col("10°5cm")], 1.0);
    assert_eq!(mug[col("2cm")], 0.5);
    assert_eq!(mug[col("5°")], 0.5);
    assert_eq!(mug[col("IoU25")], 1.0);
    assert!(r.per_category["can"][3..].iter().all(|&v| v == 1.0));
    for (i, m) in r.mean.iter().enumerate() {
        assert!((m - (mug[i] + r.per_category["can"][i]) / 2.0).abs() < 1e-12);
    }
    let table = r.to_table();
    assert!(table.lines().count() == 4 && table.contains("mean"));
}

#[test]
fn records_round_trip_through_text() {
    let mut rng = Rng::new(4);
    let records: Vec<EvalRecord> = (0..10)
        .map(|i| {
            let p = pose(
                linalg::random_rotation(&mut rng),
                [rng.normal(), rng.normal(), 0.5],
                [0.3, 0.2, 0.1],
            );
            let sym = if i % 2 == 0 {
                Symmetry::None
            } else {
                Symmetry::Axial([0.0, 1.0, 0.0])
            };
            record(if i < 5 { "bottle" } else { "laptop" }, sym, p, p)
        })
        .collect();
    let back = parse_records(&write_records(&records)).unwrap();
    assert_eq!(back, records);
    let r = MetricsReport::compute(&back, 50_000, 1).unwrap();
    assert!(r.mean.iter().all(|&v| v == 1.0), "{:?}", r.mean);
}
