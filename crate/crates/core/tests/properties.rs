mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use tokentrack::codec::*;
use tokentrack::merge_eval::*;
use tokentrack::windows::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn vocab(bins: usize, classes: usize, mode: CoordMode) -> Vocabulary {
    build_vocabulary(VocabConfig {
        bins,
        classes,
        reserved: 3,
        mode,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantize_error_is_at_most_half_a_bin(x in 0.0f64..=1.0, bins in 2usize..3000) {
        let q = quantize(x, bins);
        prop_assert!(!q.clamped);
        let back = dequantize(q.bin, bins).unwrap();
        prop_assert!((back - x).abs() <= 0.5 / (bins - 1) as f64 + 1e-12);
    }

    #[test]
    fn flatten_round_trips(y in 0u32..200, x in 0u32..200) {
        let f = flatten_coord(y, x, 200).unwrap();
        prop_assert_eq!(f, y * 200 + x);
        prop_assert_eq!(unflatten_coord(f, 200).unwrap(), (y, x));
    }

    #[test]
    fn video_round_trip(seed in any::<u64>(), n in 0usize..8, slots in 1usize..6, one_d in any::<bool>()) {
        let mode = if one_d { CoordMode::OneD } else { CoordMode::TwoD };
        let bins = if one_d { 100 } else { 160 };
        let v = vocab(bins, 4, mode);
        let mut r = rng(seed);
        let tracklets = random_tracklets(&mut r, n, slots, 4);
        let seq = encode_tracklets_auto(&tracklets, &v, slots, seed).unwrap();
        let per = mode.tokens_per_box() * slots + 1;
        prop_assert_eq!(seq.len(), n * per + 1);
        let dec = decode_video(&seq.tokens, &v, slots);
        prop_assert!(dec.diagnostics.is_empty());
        prop_assert_eq!(dec.tracklets.len(), n);
        let tol = 0.5 / (bins - 1) as f64 + 1e-12;
        let mut used = vec![false; n];
        for d in &dec.tracklets {
            let hit = tracklets.iter().enumerate().position(|(i, t)| {
                !used[i]
                    && t.class_index == d.class_index
                    && t.slots.iter().zip(&d.slots).all(|(a, b)| match (a, b) {
                        (Some(a), Some(b)) => a.ltrb().iter().zip(b.ltrb()).all(|(x, y)| (x - y).abs() <= tol),
                        (None, None) => true,
                        _ => false,
                    })
            });
            prop_assert!(hit.is_some());
            used[hit.unwrap()] = true;
        }
    }

    #[test]
    fn window_coverage_counts_frames(f in 1usize..40, n in 1usize..6, t in 1usize..6, g in 1usize..4) {
        let spec = WindowSpec::new(n, t, g);
        let e = enumerate_windows(f, &spec).unwrap();
        let cov = coverage(f, &spec).unwrap();
        let total: usize = cov.iter().sum();
        prop_assert_eq!(total, e.windows.len() * n);
        if f >= spec.span() {
            prop_assert_eq!(e.windows.last().unwrap().last() as usize, f);
            prop_assert_eq!(cov[0], 1);
            for w in &e.windows {
                prop_assert!(w.frames.windows(2).all(|p| p[1] - p[0] == g as u32));
            }
        } else {
            prop_assert!(e.windows.is_empty());
        }
    }

    #[test]
    fn nms_matches_quadratic_oracle(seed in any::<u64>(), n in 0usize..60, tau in 0.1f64..0.9, agnostic in any::<bool>(), tracklet in any::<bool>()) {
        let g = if tracklet { Granularity::Tracklet } else { Granularity::PerFrame };
        let dets = random_detections(&mut rng(seed), n, 3);
        prop_assert_eq!(canonical(&nms(&dets, tau, g, agnostic)), canonical(&oracle_nms(&dets, tau, g, agnostic)));
    }

    #[test]
    fn iou_tracklet_matches_oracle(seed in any::<u64>()) {
        let dets = random_detections(&mut rng(seed), 2, 4);
        prop_assert!((iou_tracklet(&dets[0], &dets[1]) - oracle_iou_tracklet(&dets[0], &dets[1])).abs() < 1e-12);
        prop_assert!((iou_tracklet(&dets[0], &dets[0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_threshold_sweep_oracle(seed in any::<u64>(), nd in 0usize..30, ng in 0usize..15, tracklet in any::<bool>()) {
        let g = if tracklet { Granularity::Tracklet } else { Granularity::PerFrame };
        let mut r = rng(seed);
        let dets = random_detections(&mut r, nd, if tracklet { 2 } else { 1 });
        let gts = random_ground_truth(&mut r, ng);
        let cfg = MatchConfig { iou_threshold: 0.5, class_agnostic: false, granularity: g };
        let rp = rp_auc(&dets, &gts, &cfg);
        let crp = crp_auc(&dets, &gts, &cfg);
        let orp = oracle_rp_auc(&dets, &gts, 0.5, false, g);
        let ocrp = oracle_rp_auc(&dets, &gts, 0.5, true, g);
        prop_assert_eq!(rp.is_none(), orp.is_none());
        if let (Some(a), Some(b), Some(c), Some(d)) = (rp, orp, crp, ocrp) {
            prop_assert!((a - b).abs() < 1e-9, "rp {} vs oracle {}", a, b);
            prop_assert!((c - d).abs() < 1e-9, "crp {} vs oracle {}", c, d);
            prop_assert!(c >= a - 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn rp_auc_depends_only_on_score_order(seed in any::<u64>(), nd in 1usize..25, ng in 1usize..10) {
        let mut r = rng(seed);
        let dets = random_detections(&mut r, nd, 1);
        let gts = random_ground_truth(&mut r, ng);
        let warped: Vec<Detection> = dets.iter().map(|d| Detection { score: (3.0 * d.score).exp() / 30.0, ..d.clone() }).collect();
        let cfg = MatchConfig::default();
        prop_assert_eq!(rp_auc(&dets, &gts, &cfg), rp_auc(&warped, &gts, &cfg));
    }

    #[test]
    fn pr_recall_falls_as_threshold_rises(seed in any::<u64>(), nd in 1usize..25, ng in 1usize..10) {
        let mut r = rng(seed);
        let dets = random_detections(&mut r, nd, 1);
        let gts = random_ground_truth(&mut r, ng);
        let curve = pr_curve(&dets, &gts, &MatchConfig::default());
        for w in curve.points.windows(2) {
            prop_assert!(w[0].threshold > w[1].threshold);
            prop_assert!(w[0].recall <= w[1].recall);
        }
        for p in &curve.points {
            prop_assert!((0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall));
        }
    }

    #[test]
    fn class_weights_equal_coordinate_mass(seed in any::<u64>(), n in 0usize..6, slots in 1usize..9, one_d in any::<bool>()) {
        let mode = if one_d { CoordMode::OneD } else { CoordMode::TwoD };
        let v = vocab(40, 3, mode);
        let tracklets = random_tracklets(&mut rng(seed), n, slots, 3);
        let seq = encode_tracklets_auto(&tracklets, &v, slots, seed).unwrap();
        let w = token_weights(&seq.tokens, &v, slots, true);
        let per = mode.tokens_per_box() * slots;
        for obj in 0..n {
            let group = &w[obj * (per + 1)..(obj + 1) * (per + 1)];
            prop_assert_eq!(group[per], group[..per].iter().sum::<f64>());
        }
    }
}

#[test]
fn merging_fills_in_a_missed_window() {
    // N=2, T=1 over 4 frames; the object at frame 3 is found by window (2,3) only
    let spec = WindowSpec::new(2, 1, 1);
    let windows = enumerate_windows(4, &spec).unwrap().windows;
    let b = BBox::from_ltrb(0.1, 0.1, 0.3, 0.3);
    let det = |w: &TemporalWindow, present: [bool; 2], score: f64| Detection {
        video_id: "v".into(),
        frames: w.frames.clone(),
        boxes: present.iter().map(|&p| p.then_some(b)).collect(),
        class_index: 0,
        score,
        source_window: w.index,
    };
    let per_window = vec![
        (
            windows[0].clone(),
            vec![det(&windows[0], [true, true], 0.9)],
        ),
        (
            windows[1].clone(),
            vec![det(&windows[1], [true, true], 0.8)],
        ),
        (
            windows[2].clone(),
            vec![det(&windows[2], [false, true], 0.7)],
        ),
    ];
    let merged = merge_windows(&per_window, &spec, Granularity::PerFrame, 0.5, false).unwrap();
    let mut frames: Vec<u32> = merged.iter().map(|d| d.frames[0]).collect();
    frames.sort();
    assert_eq!(frames, vec![1, 2, 3, 4]);

    let gts: Vec<GroundTruth> = (1..=4)
        .map(|f| GroundTruth {
            video_id: "v".into(),
            frames: vec![f],
            boxes: vec![Some(b)],
            class_index: 0,
        })
        .collect();
    let cfg = MatchConfig::default();
    for (_, single) in &per_window {
        let alone = match_detections(single, &gts, &cfg)
            .gt_matched
            .iter()
            .filter(|&&m| m)
            .count();
        let all = match_detections(&merged, &gts, &cfg)
            .gt_matched
            .iter()
            .filter(|&&m| m)
            .count();
        assert!(all >= alone);
    }
}
