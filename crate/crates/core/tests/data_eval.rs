//! Synthetic data protocol, feature extraction and retrieval metrics end to end.

use std::collections::BTreeSet;

use osnet_core::data::{
    cosine_distance_matrix, evaluate_cmc_map, evaluate_model, generate_dataset, stack_images, Meta, StyleProfile,
    SynthConfig,
};
use osnet_core::nn::{build_model, CandidateKind, ModelSpec};
use osnet_core::Tensor;

fn small_config() -> SynthConfig {
    SynthConfig { train_ids: 4, test_ids: 3, images_per_id: 4, cameras: 2, height: 32, width: 16, seed: 5, ..SynthConfig::default() }
}

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        width_multiplier: 0.0625,
        streams: 2,
        base_height: 32,
        base_width: 16,
        variants: vec![CandidateKind::OsInIn, CandidateKind::OsInOut, CandidateKind::Os, CandidateKind::OsInInOut, CandidateKind::Os, CandidateKind::Os],
        ..ModelSpec::default()
    }
}

#[test]
fn test_identities_are_disjoint_from_training_and_shared_by_query_and_gallery() {
    let ds = generate_dataset(&small_config()).unwrap();
    let ids = |v: &[osnet_core::data::PersonImage]| v.iter().map(|p| p.identity).collect::<BTreeSet<_>>();
    let (train, query, gallery) = (ids(&ds.train), ids(&ds.query), ids(&ds.gallery));
    assert!(train.is_disjoint(&query));
    assert!(train.is_disjoint(&gallery));
    assert_eq!(query, gallery);
    assert_eq!(train.len(), 4);
    assert_eq!(query.len(), 3);
}

#[test]
fn features_do_not_depend_on_batching() {
    let ds = generate_dataset(&small_config()).unwrap();
    let x = stack_images(&ds.gallery).unwrap();
    let mut model = build_model(&tiny_spec(), 3).unwrap();
    let one = model.extract_features(&x, 1).unwrap();
    let all = model.extract_features(&x, 32).unwrap();
    let three = model.extract_features(&x, 3).unwrap();
    assert_eq!(one.shape(), [ds.gallery.len(), 512]);
    for (a, b) in one.data().iter().zip(all.data()).chain(one.data().iter().zip(three.data())) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!(one.is_finite());
}

#[test]
fn duplicated_images_give_identical_rows() {
    let ds = generate_dataset(&small_config()).unwrap();
    let pair = [ds.query[0].clone(), ds.query[0].clone(), ds.query[1].clone()];
    let x = stack_images(&pair).unwrap();
    let mut model = build_model(&tiny_spec(), 4).unwrap();
    let f = model.extract_features(&x, 3).unwrap();
    assert_eq!(f.data()[..512], f.data()[512..1024]);
    assert_ne!(f.data()[..512], f.data()[1024..]);
}

#[test]
fn untrained_model_evaluation_is_well_formed() {
    let ds = generate_dataset(&small_config()).unwrap();
    let mut model = build_model(&tiny_spec(), 6).unwrap();
    let r = evaluate_model(&mut model, &ds.query, &ds.gallery, 8).unwrap();
    assert_eq!(r.queries.len() + r.excluded.len(), ds.query.len());
    assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*r.cmc.last().unwrap(), 1.0);
    for m in [r.r1(), r.r5(), r.r10(), r.map] {
        assert!((0.0..=1.0).contains(&m));
    }
}

#[test]
fn raw_pixels_already_rank_unstyled_identities() {
    let ds = generate_dataset(&SynthConfig { test_ids: 6, ..small_config() }).unwrap();
    let flat = |v: &[osnet_core::data::PersonImage]| {
        let x = stack_images(v).unwrap();
        let n = v.len();
        Tensor::new(&[n, x.len() / n], x.into_data()).unwrap()
    };
    let dist = cosine_distance_matrix(&flat(&ds.query), &flat(&ds.gallery)).unwrap();
    let qm: Vec<Meta> = ds.query.iter().map(Meta::from).collect();
    let gm: Vec<Meta> = ds.gallery.iter().map(Meta::from).collect();
    let r = evaluate_cmc_map(&dist, &qm, &gm).unwrap();
    // Chance level for rank 1 is about 1 in 6.
    assert!(r.r1() > 0.5, "rank-1 {}", r.r1());
}

#[test]
fn camera_styles_are_applied_per_camera() {
    let dark = StyleProfile { scale: [0.5, 0.5, 0.5], shift: [0.0; 3], noise: 0.0 };
    let plain = StyleProfile::default();
    let cfg = SynthConfig { styles: vec![dark.clone(), plain], pixel_noise: 0.0, ..small_config() };
    let ds = generate_dataset(&cfg).unwrap();
    let unstyled = generate_dataset(&SynthConfig { styles: vec![], ..cfg.clone() }).unwrap();
    for (a, b) in ds.train.iter().zip(&unstyled.train) {
        let expect = if a.camera == 0 { dark.apply_affine(&b.image) } else { b.image.clone() };
        for (p, q) in a.image.data().iter().zip(expect.data()) {
            assert!((p - q.clamp(0.0, 1.0)).abs() <= 1e-12);
        }
    }
}
