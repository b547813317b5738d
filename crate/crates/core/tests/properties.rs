use chrono::{TimeZone, Utc};
use fqc_core::dataset::{consensus, split_dataset, Consensus, DatasetManifest, ManifestEntry, Split};
use fqc_core::eval::{accuracy, auc, band, Band, BandThresholds};
use fqc_core::model::{build_reduced_arch, decode_checkpoint, encode_checkpoint, CheckpointMeta};
use fqc_core::preprocess::{crop_resize, detect_fov, FovBox, RawImage};
use fqc_core::synth::{rule_grade, FieldType, RuleInput};
use fqc_core::trainer::{lr_at_epoch, TrainConfig};
use fqc_core::{BinaryClass, GradeRecord, ModelParams};
use proptest::prelude::*;

fn class() -> impl Strategy<Value = BinaryClass> {
    prop_oneof![Just(BinaryClass::Accept), Just(BinaryClass::Reject)]
}

fn grades() -> impl Strategy<Value = Vec<GradeRecord>> {
    prop::collection::vec((0..5usize, class(), 0..4i64), 0..8).prop_map(|v| {
        v.into_iter()
            .map(|(g, label, t)| GradeRecord {
                image_id: "img".into(),
                grader_id: format!("g{g}"),
                label,
                timestamp: Utc.timestamp_opt(1_600_000_000 + t, 0).unwrap(),
            })
            .collect()
    })
}

fn binary_data() -> impl Strategy<Value = (Vec<f64>, Vec<BinaryClass>)> {
    prop::collection::vec((-50i32..50, class()), 2..80)
        .prop_map(|v| {
            let mut scores: Vec<f64> = v.iter().map(|(s, _)| *s as f64 / 10.0).collect();
            let mut labels: Vec<BinaryClass> = v.iter().map(|(_, c)| *c).collect();
            labels[0] = BinaryClass::Accept;
            labels[1] = BinaryClass::Reject;
            scores.truncate(labels.len());
            (scores, labels)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn consensus_is_permutation_invariant(g in grades(), seed in any::<u64>()) {
        let mut shuffled = g.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(consensus(&g, 3), consensus(&shuffled, 3));
        let mut rev = g.clone();
        rev.reverse();
        prop_assert_eq!(consensus(&g, 3), consensus(&rev, 3));
    }

    #[test]
    fn every_finite_score_has_exactly_one_band(score in -1e6f64..1e6, lo in -10f64..0.0, gap in 1e-9f64..10.0) {
        let t = BandThresholds::new(lo, lo + gap).unwrap();
        let v = band(score, &t).unwrap();
        let memberships = [
            score < t.reject_below,
            t.reject_below <= score && score < t.accept_at_or_above,
            score >= t.accept_at_or_above,
        ];
        prop_assert_eq!(memberships.iter().filter(|&&m| m).count(), 1);
        let expected = [Band::Reject, Band::Ambiguous, Band::Accept][memberships.iter().position(|&m| m).unwrap()];
        prop_assert_eq!(v.band, expected);
    }

    #[test]
    fn auc_invariant_under_increasing_maps((s, l) in binary_data(), a in 0.01f64..100.0, b in -100f64..100.0) {
        let base = auc(&s, &l).unwrap();
        let affine: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        let expd: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        prop_assert!((auc(&affine, &l).unwrap() - base).abs() <= 1e-12);
        prop_assert!((auc(&expd, &l).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn auc_of_inverted_labels_is_complement((s, l) in binary_data()) {
        let inv: Vec<BinaryClass> = l.iter().map(|c| c.flip()).collect();
        prop_assert_eq!(auc(&s, &l).unwrap() + auc(&s, &inv).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_is_permutation_invariant(pairs in prop::collection::vec((class(), class()), 1..50), rot in 0usize..50) {
        let (d, l): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let mut p2 = pairs.clone();
        let k = rot % p2.len();
        p2.rotate_left(k);
        p2.reverse();
        let (d2, l2): (Vec<_>, Vec<_>) = p2.into_iter().unzip();
        prop_assert_eq!(accuracy(&d, &l).unwrap(), accuracy(&d2, &l2).unwrap());
    }

    #[test]
    fn fov_box_grows_as_threshold_drops(
        pixels in prop::collection::vec(any::<u8>(), 3 * 12 * 9),
        t_hi in 0u8..=255, drop in 0u8..=255,
    ) {
        let img = RawImage::new(12, 9, pixels).unwrap();
        let t_lo = t_hi.saturating_sub(drop);
        if let Ok(hi) = detect_fov(&img, t_hi) {
            let lo = detect_fov(&img, t_lo).unwrap();
            prop_assert!(lo.x0 <= hi.x0 && lo.y0 <= hi.y0 && lo.x1 >= hi.x1 && lo.y1 >= hi.y1);
        }
    }

    #[test]
    fn crop_resize_stays_in_range(
        pixels in prop::collection::vec(any::<u8>(), 3 * 10 * 7),
        x0 in 0usize..9, y0 in 0usize..6, side in 1usize..20,
    ) {
        let img = RawImage::new(10, 7, pixels).unwrap();
        let b = FovBox { x0, y0, x1: 10, y1: 7 };
        let t = crop_resize::<f64>(&img, &b, side).unwrap();
        prop_assert_eq!(t.shape(), &[1, 3, side, side]);
        prop_assert!(t.data().iter().all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn rule_grade_monotone_in_visibility(
        center in 0f64..4.0, edge in -1f64..4.0, near in 0f64..1.0, global in 0f64..1.0,
        d_near in 0f64..1.0, d_global in 0f64..1.0, fine in any::<bool>(), macula in any::<bool>(),
    ) {
        let field = if macula { FieldType::MaculaCentered } else { FieldType::DiscCentered };
        let input = RuleInput {
            fovea_center_dd: Some(center),
            fovea_edge_dd: Some(edge),
            disc_center_dd: Some(center),
            disc_edge_dd: Some(edge),
            vessel_visibility_global: Some(global),
            vessel_visibility_near_fovea: Some(near),
            fine_vessels_on_disc: Some(fine),
        };
        let raised = RuleInput {
            vessel_visibility_global: Some((global + d_global).min(1.0)),
            vessel_visibility_near_fovea: Some((near + d_near).min(1.0)),
            ..input
        };
        prop_assert!(rule_grade(&raised, field).unwrap() >= rule_grade(&input, field).unwrap());
    }

    #[test]
    fn lr_schedule_is_log_linear(epochs in 2usize..60, start in 1e-4f64..1.0, ratio in 1e-4f64..1.0) {
        let cfg = TrainConfig { epochs, lr_start: start, lr_end: start * ratio, ..Default::default() };
        let logs: Vec<f64> = (1..=epochs).map(|e| lr_at_epoch(&cfg, e).unwrap().ln()).collect();
        let slope = (logs[epochs - 1] - logs[0]) / (epochs - 1) as f64;
        for (i, l) in logs.iter().enumerate() {
            prop_assert!((l - (logs[0] + slope * i as f64)).abs() <= 1e-12);
        }
        if ratio < 1.0 {
            prop_assert!(logs.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn adding_an_image_moves_at_most_one_split(n in 1usize..40, seed in any::<u64>(), accept in any::<bool>()) {
        let entry = |id: String, c: Consensus| ManifestEntry {
            image_id: id, path: "x.ppm".into(), grades: vec![], consensus: c,
            split: Split::Excluded, ground_truth: None,
        };
        let mut entries: Vec<_> = (0..n)
            .map(|i| entry(format!("i{i}"), if i % 3 == 0 { Consensus::Reject } else { Consensus::Accept }))
            .collect();
        let before = split_dataset(&DatasetManifest::new(entries.clone()).unwrap(), 0.5, seed).unwrap().manifest;
        entries.push(entry("new".into(), if accept { Consensus::Accept } else { Consensus::Reject }));
        let after = split_dataset(&DatasetManifest::new(entries).unwrap(), 0.5, seed).unwrap().manifest;
        let moved = before.entries.iter().zip(&after.entries).filter(|(a, b)| a.split != b.split).count();
        prop_assert!(moved <= 1, "{moved} entries moved");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), epoch in 0usize..100) {
        let arch = build_reduced_arch(8).unwrap();
        let p = ModelParams::<f32>::init(&arch, seed).unwrap();
        let meta = CheckpointMeta { seed: Some(seed), epoch: Some(epoch), created_at: None };
        let bytes = encode_checkpoint(&p, &arch, &meta).unwrap();
        let (q, a2, m2) = decode_checkpoint::<f32>(&bytes).unwrap();
        prop_assert_eq!(&a2, &arch);
        prop_assert_eq!(m2, meta);
        prop_assert_eq!(encode_checkpoint(&q, &a2, &CheckpointMeta { seed: Some(seed), epoch: Some(epoch), created_at: None }).unwrap(), bytes);
    }
}

#[test]
fn consensus_permutation_invariance_over_1000_multisets() {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(1000));
    runner
        .run(&grades(), |g| {
            let mut r = g.clone();
            r.rotate_left(g.len() / 2);
            r.reverse();
            prop_assert_eq!(consensus(&g, 3), consensus(&r, 3));
            Ok(())
        })
        .unwrap();
}
