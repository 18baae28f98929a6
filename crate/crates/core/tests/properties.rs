//! Property tests for the algebraic and combinatorial invariants.

use motkit::assoc::{cosine_cost, fill_trajectories, hungarian, CostMatrix, MotionConfig, MotionState, Track, TrackBox, TrackStatus, FORBIDDEN};
use motkit::bbox::BBox;
use motkit::metrics::{idf1, GroundTruth, MatchOptions, Predictions};
use motkit::mot_io::{format_mot, parse_mot, MotLine};
use motkit::tensor::{Tape, Tensor};
use proptest::prelude::*;

// ---- kernel algebra ----

proptest! {
    #[test]
    fn softmax_lanes_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..6,
        values in proptest::collection::vec(-30.0f64..30.0, 1..30),
    ) {
        let n = rows * cols;
        let data: Vec<f64> = (0..n).map(|i| values[i % values.len()]).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in 0..rows {
            let s: f64 = tape.value(y).data()[row * cols..(row + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_maps_compose(
        n in 1usize..4,
        k in 1usize..4,
        m in 1usize..4,
        p in 1usize..4,
        seed in 0u64..1000,
    ) {
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(vec![n, k], -2.0, 2.0, &mut r);
        let a = Tensor::<f64>::uniform(vec![k, m], -2.0, 2.0, &mut r);
        let b = Tensor::<f64>::uniform(vec![m, p], -2.0, 2.0, &mut r);
        let chained = x.matmul(&a).unwrap().matmul(&b).unwrap();
        let fused = x.matmul(&a.matmul(&b).unwrap()).unwrap();
        for (u, v) in chained.data().iter().zip(fused.data()) {
            prop_assert!((u - v).abs() <= 1e-10, "{} vs {}", u, v);
        }
    }

    #[test]
    fn bilinear_far_outside_is_zero(
        y in -100.0f64..-2.0,
        x in -100.0f64..-2.0,
    ) {
        let map = Tensor::<f64>::filled(vec![4, 4, 3], 9.0);
        let v = map.bilinear_sample(y, x).unwrap();
        prop_assert!(v.iter().all(|&c| c == 0.0));
    }
}

// ---- assignment ----

/// Reference solver by full enumeration: maximize match count, then
/// minimize cost over allowed pairs.
fn brute_best(costs: &CostMatrix) -> (usize, f64) {
    fn recurse(
        costs: &CostMatrix,
        row: usize,
        used: &mut Vec<bool>,
        count: usize,
        cost: f64,
        best: &mut (usize, f64),
    ) {
        if row == costs.rows() {
            if count > best.0 || (count == best.0 && cost < best.1) {
                *best = (count, cost);
            }
            return;
        }
        recurse(costs, row + 1, used, count, cost, best); // leave row unmatched
        for col in 0..costs.cols() {
            if !used[col] && !costs.is_forbidden(row, col) {
                used[col] = true;
                recurse(costs, row + 1, used, count + 1, cost + costs.get(row, col), best);
                used[col] = false;
            }
        }
    }
    let mut best = (0, f64::INFINITY);
    let mut used = vec![false; costs.cols()];
    recurse(costs, 0, &mut used, 0, 0.0, &mut best);
    if best.0 == 0 {
        best.1 = 0.0;
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn hungarian_matches_enumeration_with_forbidden_pairs(
        rows in 1usize..5,
        cols in 1usize..5,
        entries in proptest::collection::vec((0u32..50, proptest::bool::weighted(0.25)), 16),
    ) {
        let mut costs = CostMatrix::new(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let (value, forbidden) = entries[(i * cols + j) % entries.len()];
                if forbidden {
                    costs.forbid(i, j);
                } else {
                    costs.set(i, j, value as f64);
                }
            }
        }
        let got = hungarian(&costs);
        let (best_count, best_cost) = brute_best(&costs);
        prop_assert_eq!(got.pairs.len(), best_count, "match count must be maximal");
        prop_assert_eq!(got.total_cost, best_cost, "total cost must be minimal");
        for &(i, j) in &got.pairs {
            prop_assert!(!costs.is_forbidden(i, j));
            prop_assert_ne!(costs.get(i, j), FORBIDDEN);
        }
    }

    #[test]
    fn cosine_costs_stay_in_range(
        a in proptest::collection::vec(-1.0f64..1.0, 4),
        b in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let norm = |v: &[f64]| -> Option<Vec<f64>> {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-9 { None } else { Some(v.iter().map(|x| x / n).collect()) }
        };
        if let (Some(ua), Some(ub)) = (norm(&a), norm(&b)) {
            let costs = cosine_cost(&[ua], &[ub]);
            prop_assert!((0.0..=2.0).contains(&costs.get(0, 0)));
        }
    }
}

// ---- trajectories ----

fn track_from_frames(frames: &[usize]) -> Track {
    Track {
        id: 1,
        boxes: frames
            .iter()
            .map(|&f| TrackBox {
                frame: f,
                bbox: BBox::new(f as f64, 0.0, f as f64 + 5.0, 5.0),
                score: 1.0,
                filled: false,
            })
            .collect(),
        embedding: Vec::new(),
        motion: MotionState::initiate(&MotionConfig::default(), &BBox::new(0.0, 0.0, 5.0, 5.0))
            .unwrap(),
        status: TrackStatus::Finished,
        last_frame: *frames.last().unwrap(),
    }
}

proptest! {
    #[test]
    fn filling_preserves_observations_and_range(
        frames in proptest::collection::btree_set(1usize..60, 2..12),
        gap_max in 0usize..10,
    ) {
        let frames: Vec<usize> = frames.iter().copied().collect();
        let mut tracks = vec![track_from_frames(&frames)];
        let before = tracks[0].boxes.clone();
        fill_trajectories(&mut tracks, gap_max);
        let after = &tracks[0].boxes;

        // observed boxes unchanged, in order
        let observed: Vec<&TrackBox> = after.iter().filter(|b| !b.filled).collect();
        prop_assert_eq!(observed.len(), before.len());
        for (o, b) in observed.iter().zip(&before) {
            prop_assert_eq!(o.frame, b.frame);
            prop_assert_eq!(o.bbox, b.bbox);
        }
        // nothing outside the observed range, frames strictly increasing
        let first = frames[0];
        let last = *frames.last().unwrap();
        for pair in after.windows(2) {
            prop_assert!(pair[0].frame < pair[1].frame);
        }
        for b in after {
            prop_assert!(b.frame >= first && b.frame <= last);
        }
        // every interior gap of at most gap_max is closed
        for pair in after.windows(2) {
            let gap = pair[1].frame - pair[0].frame;
            prop_assert!(gap == 1 || gap - 1 > gap_max);
        }
    }
}

// ---- interchange format ----

fn arb_mot_line() -> impl Strategy<Value = MotLine> {
    (
        1usize..500,
        -1i64..40,
        (-100i32..2000, -100i32..2000, 1i32..400, 1i32..400),
        0u32..=100,
    )
        .prop_map(|(frame, id, (l, t, w, h), conf)| MotLine {
            frame,
            id,
            bb_left: l as f64 / 4.0,
            bb_top: t as f64 / 4.0,
            bb_width: w as f64 / 4.0,
            bb_height: h as f64 / 4.0,
            conf: conf as f64 / 100.0,
            x: -1.0,
            y: -1.0,
            z: -1.0,
        })
}

proptest! {
    #[test]
    fn mot_lines_survive_round_trip(lines in proptest::collection::vec(arb_mot_line(), 0..20)) {
        let text = format_mot(&lines);
        let parsed = parse_mot(&text).unwrap();
        // the writer sorts, so compare as multisets via a second pass
        let twice = parse_mot(&format_mot(&parsed)).unwrap();
        prop_assert_eq!(parsed.len(), lines.len());
        prop_assert_eq!(&parsed, &twice);
        prop_assert_eq!(format_mot(&parsed), text);
    }

    #[test]
    fn idf1_is_bounded(
        gt_ids in proptest::collection::vec(1u64..5, 1..10),
        pred_ids in proptest::collection::vec(1u64..5, 0..10),
    ) {
        let mut gt = GroundTruth::new();
        let mut preds = Predictions::new();
        for (f, &id) in gt_ids.iter().enumerate() {
            gt.insert(f + 1, id, BBox::new(id as f64 * 30.0, 0.0, id as f64 * 30.0 + 10.0, 10.0)).unwrap();
        }
        for (f, &id) in pred_ids.iter().enumerate() {
            preds.insert(f + 1, id, BBox::new(id as f64 * 30.0, 0.0, id as f64 * 30.0 + 10.0, 10.0)).unwrap();
        }
        let v = idf1(&gt, &preds, &MatchOptions::default());
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
