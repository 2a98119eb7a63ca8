use moose::data::synthetic::{reverse_frames, MAX_SPEED};
use moose::data::{
    generate, read_tensor, write_tensor, ClassSet, Dataset, MotionClass, Split, SyntheticSpec,
};
use moose::tensor::Tensor;

const BINS: usize = 32;

/// Pixel-value histogram pooled over every frame of every clip of `class`,
/// normalised to a distribution.
fn frame_histogram(ds: &Dataset, class: MotionClass) -> Vec<f64> {
    let mut h = vec![0.0; BINS];
    let mut n = 0.0;
    for s in Split::ALL {
        for c in ds.split(s).iter().filter(|c| c.class == class) {
            for &v in c.frames.data() {
                h[((v * BINS as f64) as usize).min(BINS - 1)] += 1.0;
                n += 1.0;
            }
        }
    }
    h.iter().map(|x| x / n).collect()
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[test]
fn reversal_classes_share_frame_marginals() {
    let spec = SyntheticSpec {
        classes: ClassSet::Reversal,
        ..SyntheticSpec::default()
    };
    let ds = generate(&spec, 250, 13).unwrap();
    assert_eq!(ds.len(), 500);
    let lr = frame_histogram(&ds, MotionClass::SweepLr);
    let rl = frame_histogram(&ds, MotionClass::SweepRl);
    assert!(total_variation(&lr, &rl) < 1e-9);

    // The oracle does see differences: a different appearance model
    // separates clearly.
    let other = generate(
        &SyntheticSpec {
            classes: ClassSet::Reversal,
            blob_radius: 9.0,
            ..SyntheticSpec::default()
        },
        50,
        13,
    )
    .unwrap();
    assert!(total_variation(&lr, &frame_histogram(&other, MotionClass::SweepLr)) > 0.01);
}

#[test]
fn every_class_has_exactly_count_clips() {
    let ds = generate(
        &SyntheticSpec {
            classes: ClassSet::All,
            frames: 2,
            ..SyntheticSpec::default()
        },
        7,
        3,
    )
    .unwrap();
    for (label, _) in ds.classes.iter().enumerate() {
        let n: usize = Split::ALL
            .iter()
            .map(|&s| ds.split(s).iter().filter(|c| c.label == label).count())
            .sum();
        assert_eq!(n, 7);
    }
}

#[test]
fn clips_are_valid_frame_stacks() {
    let ds = generate(&SyntheticSpec::default(), 3, 5).unwrap();
    for c in ds.split(Split::Train) {
        assert_eq!(c.frames.shape(), &[9, 1, 32, 32]);
        assert_eq!(c.units(), 8);
        assert!(c.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn reversing_a_sweep_is_an_involution() {
    let ds = generate(
        &SyntheticSpec {
            classes: ClassSet::Reversal,
            ..SyntheticSpec::default()
        },
        2,
        6,
    )
    .unwrap();
    for c in &ds.train {
        let twice = reverse_frames(&reverse_frames(&c.frames).unwrap()).unwrap();
        assert!(twice.bitwise_eq(&c.frames));
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let too_fast = SyntheticSpec {
        speed: MAX_SPEED + 0.5,
        ..SyntheticSpec::default()
    };
    assert!(generate(&too_fast, 1, 0).is_err());
    let too_big = SyntheticSpec {
        blob_radius: 20.0,
        ..SyntheticSpec::default()
    };
    assert!(generate(&too_big, 1, 0).is_err());
}

#[test]
fn tensor_file_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let specials = [0.0, -0.0, 1e-310, f64::MAX, -1.5, std::f64::consts::PI];
    let t = Tensor::new(&[2, 3], specials.to_vec()).unwrap();
    let path = dir.path().join("t.mtsr");
    write_tensor(&path, &t).unwrap();
    let back = read_tensor(&path).unwrap();
    assert!(back.bitwise_eq(&t));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"MTSR");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    assert_eq!(bytes.len(), 4 + 4 + 4 + 2 * 4 + 6 * 8);
}
