mod common;

use common::{random_mask, scan};
use mmlayout::encoders::{EntityDoc, LayoutDoc};
use mmlayout::layoutkit::*;
use mmlayout::scenes::{gen_scene, SceneConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

#[test]
fn mask_box_equals_scan_on_a_thousand_masks() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    for _ in 0..1000 {
        let m = random_mask(&mut rng);
        assert_eq!(mask_to_bbox(&m).unwrap().to_array(), scan(&m));
    }
}

#[test]
fn mask_box_is_minimal() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
    for _ in 0..200 {
        let m = random_mask(&mut rng);
        let b = mask_to_bbox(&m).unwrap();
        let cell_in = |i: usize, j: usize, b: [f64; 4]| {
            let (cx, cy) = ((j as f64 + 0.5) / m.cols as f64, (i as f64 + 0.5) / m.rows as f64);
            cx > b[0] && cx < b[2] && cy > b[1] && cy < b[3]
        };
        let all_in = |b: [f64; 4]| (0..m.rows).all(|i| (0..m.cols).all(|j| !m.get(i, j) || cell_in(i, j, b)));
        let a = b.to_array();
        assert!(all_in(a));
        let (dx, dy) = (1.0 / m.cols as f64, 1.0 / m.rows as f64);
        for (k, step) in [(0, dx), (1, dy), (2, -dx), (3, -dy)] {
            let mut s = a;
            s[k] += step;
            assert!(!all_in(s), "shrinking side {k} kept every cell");
        }
    }
}

#[test]
fn empty_mask_is_rejected() {
    assert!(mask_to_bbox(&Mask::new(3, 5, vec![false; 15]).unwrap()).is_err());
}

#[test]
fn adversarial_suite_has_no_valid_layout() {
    let rules = DatasetRules::default();
    let reports: Vec<_> = adversarial_suite(&rules).iter().map(|(_, d)| validate(d, Mode::Dataset, &rules)).collect();
    assert_eq!(suite_accuracy(&reports), 0.0);
    let rules = DatasetRules::for_scenes(&SceneConfig::default());
    let reports: Vec<_> = adversarial_suite(&rules).iter().map(|(_, d)| validate(d, Mode::Dataset, &rules)).collect();
    assert_eq!(suite_accuracy(&reports), 0.0);
}

#[test]
fn generated_scenes_pass_dataset_rules() {
    let cfg = SceneConfig::default();
    let rules = DatasetRules::for_scenes(&cfg);
    let reports: Vec<_> = (0..500).map(|s| validate(&gen_scene(s, &cfg).spec.to_doc(), Mode::Dataset, &rules)).collect();
    assert_eq!(suite_accuracy(&reports), 1.0);
}

fn as_doc(b: [f64; 4]) -> LayoutDoc {
    LayoutDoc {
        caption: String::new(),
        entities: vec![EntityDoc {
            bbox: b,
            caption: "red square".into(),
        }],
    }
}

fn format_ok(b: [f64; 4]) -> bool {
    validate(&as_doc(b), Mode::Format, &DatasetRules::default()).valid()
}

proptest! {
    #[test]
    fn scribble_boxes_are_valid_and_cover_points(
        pts in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 2..12),
        pad in 0.001f64..0.2,
    ) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        let b = scribble_to_bbox(&pts, pad).unwrap();
        prop_assert!(format_ok(b.to_array()));
        for p in &pts {
            prop_assert!(b.contains(p[0], p[1]));
        }
    }

    #[test]
    fn point_boxes_are_valid_squares(x in 0.0f64..=1.0, y in 0.0f64..=1.0, size in 0.01f64..=1.0) {
        let b = point_to_bbox([x, y], size).unwrap();
        prop_assert!(format_ok(b.to_array()));
        prop_assert!((b.x1 - b.x0 - size).abs() < 1e-9 && (b.y1 - b.y0 - size).abs() < 1e-9);
    }

    #[test]
    fn mask_boxes_are_valid(seed in any::<u64>()) {
        let m = random_mask(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
        prop_assert!(format_ok(mask_to_bbox(&m).unwrap().to_array()));
    }

    #[test]
    fn validate_agrees_with_box_constructor(b in prop::array::uniform4(-0.5f64..1.5)) {
        prop_assert_eq!(format_ok(b), mmlayout::encoders::BBox::from_array(b).is_ok());
    }
}
