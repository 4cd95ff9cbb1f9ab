use gvse_core::data::{
    generate_synthetic, load_dataset, read_images, read_labels, render_clean, write_images, write_labels, Dataset,
    DatasetPaths, PatternKind, SyntheticSpec,
};
use gvse_core::graph::{binarize_attributes, BinarizeMode};
use gvse_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gen(spec: &SyntheticSpec, seed: u64) -> Dataset {
    generate_synthetic(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn small(sigma: f64) -> SyntheticSpec {
    SyntheticSpec {
        samples_per_class: 6,
        noise_sigma: sigma,
        ..SyntheticSpec::default()
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn generator_is_bitwise_deterministic() {
    let a = gen(&small(0.1), 4);
    let b = gen(&small(0.1), 4);
    assert_eq!(bits(a.images()), bits(b.images()));
    assert_eq!(a.labels(), b.labels());
    assert_eq!(a.attributes(), b.attributes());
    assert_ne!(bits(a.images()), bits(gen(&small(0.1), 5).images()));
}

#[test]
fn noiseless_classes_have_zero_variance() {
    let d = gen(&small(0.0), 1);
    for y in 0..d.num_classes() {
        let members: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == y).collect();
        let first = d.image(members[0]);
        for &i in &members[1..] {
            assert_eq!(bits(&d.image(i)), bits(&first));
        }
    }
}

#[test]
fn pixel_noise_has_the_configured_variance() {
    for sigma in [0.05, 0.1, 0.3] {
        let d = gen(&small(sigma), 2);
        let size = d.image_shape()[1];
        let mut sq = 0.0;
        let mut n = 0usize;
        for i in 0..d.len() {
            let clean = render_clean(d.attributes().row(d.labels()[i]), size);
            for (a, b) in d.image(i).data().iter().zip(clean.data()) {
                sq += (a - b).powi(2);
                n += 1;
            }
        }
        assert!(n >= 10_000);
        let var = sq / n as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.1, "sigma {sigma}: variance {var}");
    }
}

#[test]
fn every_class_keeps_a_member_attribute() {
    for pattern_seed in 0..20 {
        let spec = SyntheticSpec { pattern_seed, samples_per_class: 2, ..SyntheticSpec::default() };
        let d = gen(&spec, 0);
        for mode in [BinarizeMode::Nonzero, BinarizeMode::MeanThreshold] {
            let b = binarize_attributes(d.attributes(), mode).unwrap();
            assert!((0..b.categories()).all(|y| !b.members(y).is_empty()));
        }
        // every attribute is visible to some seen class
        let b = binarize_attributes(d.attributes(), BinarizeMode::Nonzero).unwrap();
        for j in 0..b.attributes() {
            assert!(d.split().seen.iter().any(|&y| b.get(y, j)), "attribute {j}");
        }
    }
}

/// With one attribute per class and no noise, every image sits exactly on
/// its class centroid, so a nearest-centroid rule is perfect.
#[test]
fn one_per_class_images_are_separable() {
    let spec = SyntheticSpec {
        num_classes: 6,
        num_unseen: 2,
        num_attributes: 6,
        image_size: 16,
        samples_per_class: 3,
        noise_sigma: 0.0,
        pattern: PatternKind::OnePerClass,
        ..SyntheticSpec::default()
    };
    let d = gen(&spec, 0);
    let centroids: Vec<Tensor> = (0..6)
        .map(|y| {
            let members: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == y).collect();
            let mut acc = vec![0.0; d.image(0).len()];
            for &i in &members {
                acc.iter_mut().zip(d.image(i).data()).for_each(|(a, v)| *a += v / members.len() as f64);
            }
            Tensor::new(d.image(0).shape().to_vec(), acc).unwrap()
        })
        .collect();
    for i in 0..d.len() {
        let x = d.image(i);
        let nearest = (0..6)
            .min_by(|&a, &b| x.max_abs_diff(&centroids[a]).total_cmp(&x.max_abs_diff(&centroids[b])))
            .unwrap();
        assert_eq!(nearest, d.labels()[i]);
    }
}

#[test]
fn files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen(&small(0.1), 3);
    let paths = DatasetPaths::in_dir(dir.path());
    d.save(&paths).unwrap();
    let back = load_dataset(&paths).unwrap();
    assert_eq!(bits(back.images()), bits(d.images()));
    assert_eq!(back.labels(), d.labels());
    assert_eq!(back.split(), d.split());

    let img = dir.path().join("x.bin");
    write_images(&img, d.images()).unwrap();
    assert_eq!(bits(&read_images(&img).unwrap()), bits(d.images()));
    let lab = dir.path().join("y.bin");
    write_labels(&lab, d.labels()).unwrap();
    assert_eq!(read_labels(&lab).unwrap(), d.labels());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn partition_covers_each_sample_once(seed in any::<u64>(), frac in 0.05f64..0.9) {
        let d = gen(&small(0.1), seed);
        let p = d.partition(frac).unwrap();
        let mut all: Vec<usize> = p.train.iter().chain(&p.test_seen).chain(&p.test_unseen).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        for &i in &p.train {
            prop_assert!(d.split().seen.contains(&d.labels()[i]));
        }
        for &i in &p.test_unseen {
            prop_assert!(d.split().unseen.contains(&d.labels()[i]));
        }
        for &y in &d.split().seen {
            prop_assert!(p.train.iter().any(|&i| d.labels()[i] == y));
            prop_assert!(p.test_seen.iter().any(|&i| d.labels()[i] == y));
        }
    }
}
