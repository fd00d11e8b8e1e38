//! Property tests for invariants that hold for every valid input.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use xdssl::data::split::apportion;
use xdssl::data::{patient_split, Domain, FrameRecord, Manifest, Split};
use xdssl::evaluation::{dsc, iou, wilcoxon_signed_rank};
use xdssl::fusion::{
    entropy_confidence, fuse, margin_confidence, EntropyBase, FusionInputs, FusionOptions, FusionStrategy, NormScope,
};
use xdssl::losses::{bce_loss, build_temporal_mask, dice_loss, mt_nxent_loss, EmbeddingBatch, SegPair};
use xdssl::model::{Backbone, BackboneConfig};

fn prob() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

fn seg_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(prob(), n),
            proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0)], n),
        )
    })
}

fn normalized_rows(b: usize, d: usize, raw: &[f64]) -> Array2<f64> {
    let mut z = Array2::from_shape_vec((b, d), raw.to_vec()).unwrap();
    for mut row in z.outer_iter_mut() {
        let n = row.dot(&row).sqrt().max(1e-9);
        row.mapv_inplace(|v| v / n);
    }
    z
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn segmentation_losses_are_bounded((p, y) in seg_pair()) {
        let pair = SegPair::new(&p, &y).unwrap();
        let d = dice_loss(&pair);
        let b = bce_loss(&pair);
        prop_assert!(d.is_finite() && (0.0..1.0).contains(&d), "dice {d}");
        prop_assert!(b.is_finite() && b >= 0.0, "bce {b}");
    }

    #[test]
    fn temporal_mask_is_symmetric_and_keeps_positives(
        meta in proptest::collection::vec((0u8..3, 0u64..40), 1..8),
        gap in 0u64..30,
    ) {
        let b = meta.len();
        let ids: Vec<String> = meta.iter().map(|(v, _)| format!("v{v}")).collect();
        let frames: Vec<u64> = meta.iter().map(|(_, f)| *f).collect();
        let m = build_temporal_mask(&ids, &frames, b, gap).unwrap();
        prop_assert_eq!(m.dim(), (2 * b, 2 * b));
        for k in 0..2 * b {
            prop_assert!(m[[k, k]]);
            prop_assert!(!m[[k, (k + b) % (2 * b)]]);
            for l in 0..2 * b {
                prop_assert_eq!(m[[k, l]], m[[l, k]]);
            }
        }
    }

    #[test]
    fn mt_nxent_is_invariant_to_batch_order(
        b in 2usize..7,
        raw in proptest::collection::vec(-1.0..1.0f64, 2 * 7 * 6),
        frames in proptest::collection::vec(0u64..30, 7),
        videos in proptest::collection::vec(0u8..3, 7),
        rotate in 1usize..6,
    ) {
        let d = 6;
        let z = normalized_rows(b, d, &raw[..b * d]);
        let zp = normalized_rows(b, d, &raw[7 * d..7 * d + b * d]);
        let ids: Vec<String> = videos[..b].iter().map(|v| format!("v{v}")).collect();
        let fr = frames[..b].to_vec();
        let batch = EmbeddingBatch::new(z.clone(), zp.clone(), ids.clone(), fr.clone(), 0.5, 10).unwrap();
        let base = mt_nxent_loss(&batch).unwrap();

        let order: Vec<usize> = (0..b).map(|i| (i + rotate) % b).collect();
        let perm = |a: &Array2<f64>| a.select(ndarray::Axis(0), &order);
        let batch2 = EmbeddingBatch::new(
            perm(&z),
            perm(&zp),
            order.iter().map(|&i| ids[i].clone()).collect(),
            order.iter().map(|&i| fr[i]).collect(),
            0.5,
            10,
        )
        .unwrap();
        let permuted = mt_nxent_loss(&batch2).unwrap();
        prop_assert!((base - permuted).abs() < 1e-9, "{base} vs {permuted}");
    }

    #[test]
    fn fused_probabilities_are_bounded_and_symmetric(
        n in 1usize..3,
        pg in proptest::collection::vec(prob(), 2 * 9),
        pc in proptest::collection::vec(prob(), 2 * 9),
        strategy in prop_oneof![
            Just(FusionStrategy::Entropy),
            Just(FusionStrategy::Margin),
            Just(FusionStrategy::Average),
        ],
        scope in prop_oneof![Just(NormScope::PerImage), Just(NormScope::PerBatch)],
    ) {
        let a = Array3::from_shape_vec((n, 3, 3), pg[..n * 9].to_vec()).unwrap();
        let c = Array3::from_shape_vec((n, 3, 3), pc[..n * 9].to_vec()).unwrap();
        let options = FusionOptions { entropy_base: EntropyBase::Two, scope };
        let fwd = fuse(&FusionInputs { p_g: a.clone(), p_c: c.clone(), strategy, options }).unwrap();
        let rev = fuse(&FusionInputs { p_g: c, p_c: a, strategy, options }).unwrap();
        for (&x, &y) in fwd.probabilities.iter().zip(rev.probabilities.iter()) {
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn confidences_are_monotone_in_distance_from_half(a in prob(), b in prob()) {
        let (near, far) = if (a - 0.5).abs() <= (b - 0.5).abs() { (a, b) } else { (b, a) };
        let pts = ndarray::arr1(&[near, far]);
        for c in [
            entropy_confidence(pts.view(), EntropyBase::Two),
            entropy_confidence(pts.view(), EntropyBase::Natural),
            margin_confidence(pts.view()),
        ] {
            prop_assert!(c[0] <= c[1] + 1e-12, "{c:?}");
        }
    }

    #[test]
    fn overlap_metrics_agree_and_are_symmetric(
        a in proptest::collection::vec(any::<bool>(), 1..60),
        seed in any::<u64>(),
    ) {
        let b: Vec<bool> = a.iter().enumerate().map(|(i, &v)| v ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let (va, vb) = (ndarray::arr1(&a), ndarray::arr1(&b));
        let d = dsc(va.view(), vb.view()).unwrap();
        let j = iou(va.view(), vb.view()).unwrap();
        prop_assert_eq!(d, dsc(vb.view(), va.view()).unwrap());
        prop_assert_eq!(j, iou(vb.view(), va.view()).unwrap());
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_p_is_a_probability(
        diffs in proptest::collection::vec(-5i32..6, 1..30),
    ) {
        let a: Vec<f64> = diffs.iter().map(|&d| 10.0 + d as f64).collect();
        let b = vec![10.0; a.len()];
        match wilcoxon_signed_rank(&a, &b) {
            Ok(r) => {
                prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0, "{r:?}");
                prop_assert_eq!(r.degenerate, diffs.iter().all(|&d| d == 0));
            }
            Err(_) => {
                let nonzero = diffs.iter().filter(|&&d| d != 0).count();
                prop_assert!(nonzero > 0 && nonzero < xdssl::evaluation::wilcoxon::MIN_PAIRS);
            }
        }
    }

    #[test]
    fn apportionment_is_total(n in 0usize..500, w in proptest::collection::vec(1u32..100, 1..5)) {
        let sum: u32 = w.iter().sum();
        let fractions: Vec<f64> = w.iter().map(|&x| x as f64 / sum as f64).collect();
        let counts = apportion(n, &fractions);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        if n >= fractions.len() {
            prop_assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        }
    }

    #[test]
    fn patient_splits_are_disjoint(patients in 3usize..30, seed in any::<u64>()) {
        let records = (0..patients)
            .flat_map(|p| {
                (0..2u64).map(move |f| FrameRecord {
                    patient_id: format!("p{p:02}"),
                    video_id: format!("p{p:02}_v0"),
                    frame_index: f,
                    domain: Domain::Target,
                    image_path: format!("img/p{p:02}_{f}.png"),
                    mask_path: None,
                    split: None,
                })
            })
            .collect();
        let manifest = Manifest::new(records, "/nonexistent").unwrap();
        let fractions: BTreeMap<Split, f64> =
            [(Split::Train, 0.7), (Split::Val, 0.15), (Split::Test, 0.15)].into_iter().collect();
        let out = patient_split(&manifest, Domain::Target, &fractions, seed).unwrap();
        let mut seen: BTreeMap<String, BTreeSet<Split>> = BTreeMap::new();
        for r in &out.records {
            seen.entry(r.patient_id.clone()).or_default().insert(out.split_of(r).unwrap());
        }
        prop_assert_eq!(seen.len(), patients);
        prop_assert!(seen.values().all(|s| s.len() == 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn model_partition_is_total_and_init_deterministic(seed in any::<u64>()) {
        let m = Backbone::<f32>::new(BackboneConfig::tiny(), seed).unwrap();
        prop_assert_eq!(m.group_param_counts().values().sum::<usize>(), m.num_params());
        let again = Backbone::<f32>::new(BackboneConfig::tiny(), seed).unwrap();
        prop_assert_eq!(m.group_digests(), again.group_digests());
    }
}
