//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers. Tolerances and thresholds are pinned in
//! the assertions.

use std::time::{Duration, Instant};

use motkit::assoc::{
    embeddings_at_centers, hungarian, track_sequence, AssocConfig, CostMatrix, FrameObservations,
};
use motkit::bbox::BBox;
use motkit::detect::{
    box_loss, decode, heatmap_loss, perfect_maps, reid_loss, render_targets, total_loss,
    BoxAnnotation, LossWeightVars, LossWeights,
};
use motkit::gcd::{branch_vectors, context_vector, disentangle, GcdParams, GcdVars};
use motkit::gte::{
    deformable_attention, dense_attention, encoder_block, DeformAttnParams, DeformAttnVars,
    DenseAttnParams, EncoderBlockParams, EncoderBlockVars,
};
use motkit::metrics::{evaluate, idf1, GroundTruth, MatchOptions, Predictions};
use motkit::mot_io::{format_mot, parse_mot, MotIoError};
use motkit::optim::{zero_grads, Adam};
use motkit::pipeline::{
    cell_index, forward_maps, linear_head_forward, LinearHead, PipelineConfig, PipelineParams,
};
use motkit::synth::{synth_sequence, rasterize_frame, MotionPattern, SyntheticScenario};
use motkit::tensor::{grad_check, Parameter, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// The suite measures wall-clock scaling in several places; running
// criteria concurrently would corrupt those measurements, so every test
// takes this lock.
static SEQUENTIAL: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn run_alone() -> std::sync::MutexGuard<'static, ()> {
    SEQUENTIAL.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------- 1 ----

#[test]
fn criterion_1_gradient_suite() {
    let _alone = run_alone();
    const SEEDS: u64 = 20;
    const TOL: f64 = 1e-4;
    let (c, h, w) = (8usize, 6usize, 6usize);
    let (n_keys, n_heads) = (4usize, 2usize);
    let started = Instant::now();
    let mut worst_overall: f64 = 0.0;
    let mut check = |name: &str, err: f64| {
        assert!(err <= TOL, "{name}: rel err {err} > {TOL}");
        worst_overall = worst_overall.max(err);
    };

    for seed in 0..SEEDS {
        let mut r = rng(1000 + seed);

        // layer normalization, weighted so the gradient is non-trivial
        let x = Tensor::uniform(vec![2, c], -1.0, 1.0, &mut r);
        let weights = Tensor::uniform(vec![2, c], -1.0, 1.0, &mut r);
        let err = grad_check(&[x], |tape, vars| {
            let normed = tape.layer_norm(vars[0], 1e-5, 1)?;
            let weighted = tape.mul_const(normed, &weights)?;
            tape.sum(weighted)
        })
        .unwrap();
        check("layer_norm", err);

        // context disentangling w.r.t. features and all five weights
        let mut gcd = GcdParams::<f64>::new(c, &mut r);
        gcd.w_d2 = Parameter::fan_in_uniform(vec![2, c], &mut r);
        gcd.w_r2 = Parameter::fan_in_uniform(vec![2, c], &mut r);
        let x = Tensor::uniform(vec![h * w, c], -1.0, 1.0, &mut r);
        let inputs = [
            x,
            gcd.w_k.value.clone(),
            gcd.w_d1.value.clone(),
            gcd.w_d2.value.clone(),
            gcd.w_r1.value.clone(),
            gcd.w_r2.value.clone(),
        ];
        let err = grad_check(&inputs, |tape, vars| {
            let gv = GcdVars {
                w_k: vars[1],
                w_d1: vars[2],
                w_d2: vars[3],
                w_r1: vars[4],
                w_r2: vars[5],
                epsilon: 1e-5,
            };
            let (det, reid) = disentangle(tape, vars[0], &gv)?;
            let both = tape.add(det, reid)?;
            tape.sum(both)
        })
        .unwrap();
        check("gcd", err);

        // deformable attention through offsets and bilinear sampling
        let mut attn = DeformAttnParams::<f64>::new(c, n_heads, n_keys, &mut r);
        attn.offset_proj =
            Parameter::new(Tensor::uniform(vec![c, 2 * n_keys * n_heads], 0.05, 0.45, &mut r));
        let x = Tensor::uniform(vec![h * w, c], 0.4, 1.4, &mut r);
        let inputs = [
            x.clone(),
            attn.offset_proj.value.clone(),
            attn.key_proj.value.clone(),
            attn.attn_proj.value.clone(),
            attn.value_proj.value.clone(),
            attn.out_proj.value.clone(),
        ];
        let err = grad_check(&inputs, |tape, vars| {
            let av = DeformAttnVars {
                offset_proj: vars[1],
                key_proj: vars[2],
                attn_proj: vars[3],
                value_proj: vars[4],
                out_proj: vars[5],
                n_heads,
                n_keys,
            };
            let out = deformable_attention(tape, vars[0], h, w, &av)?;
            tape.sum(out)
        })
        .unwrap();
        check("deformable_attention", err);

        // a full encoder block, with a weighting so the final layer norm
        // keeps a non-vanishing gradient
        let mut block = EncoderBlockParams::<f64>::with_ffn_width(c, n_heads, n_keys, 2 * c, &mut r);
        block.attn.offset_proj =
            Parameter::new(Tensor::uniform(vec![c, 2 * n_keys * n_heads], 0.05, 0.45, &mut r));
        let loss_weights = Tensor::uniform(vec![h * w, c], -1.0, 1.0, &mut r);
        let inputs = [
            x,
            block.attn.offset_proj.value.clone(),
            block.attn.key_proj.value.clone(),
            block.attn.attn_proj.value.clone(),
            block.attn.value_proj.value.clone(),
            block.attn.out_proj.value.clone(),
            block.ffn_w1.value.clone(),
            block.ffn_b1.value.clone(),
            block.ffn_w2.value.clone(),
            block.ffn_b2.value.clone(),
        ];
        let err = grad_check(&inputs, |tape, vars| {
            let bv = EncoderBlockVars {
                attn: DeformAttnVars {
                    offset_proj: vars[1],
                    key_proj: vars[2],
                    attn_proj: vars[3],
                    value_proj: vars[4],
                    out_proj: vars[5],
                    n_heads,
                    n_keys,
                },
                ffn_w1: vars[6],
                ffn_b1: vars[7],
                ffn_w2: vars[8],
                ffn_b2: vars[9],
                epsilon: 1e-5,
            };
            let out = encoder_block(tape, vars[0], h, w, &bv)?;
            let weighted = tape.mul_const(out, &loss_weights)?;
            tape.sum(weighted)
        })
        .unwrap();
        check("encoder_block", err);

        // heatmap loss on a rendered target
        let boxes = [
            BoxAnnotation {
                bbox: BBox::new(2.0, 2.0, 12.0, 16.0),
                identity: 1,
            },
            BoxAnnotation {
                bbox: BBox::new(14.0, 8.0, 22.0, 22.0),
                identity: 2,
            },
        ];
        let targets = render_targets::<f64>(&boxes, 4 * h, 4 * w).unwrap();
        let pred = Tensor::uniform(vec![h, w], 0.05, 0.95, &mut r);
        let err = grad_check(&[pred], |tape, vars| {
            heatmap_loss(tape, vars[0], &targets.heatmap, 2.0, 4.0)
        })
        .unwrap();
        check("heatmap_loss", err);

        // box loss away from the zero-residual kink
        let pred_off = Tensor::uniform(vec![2, 2], 0.05, 0.95, &mut r);
        let pred_size = Tensor::uniform(vec![2, 2], 5.0, 20.0, &mut r);
        let err = grad_check(&[pred_off, pred_size], |tape, vars| {
            box_loss(tape, vars[0], vars[1], &targets)
        })
        .unwrap();
        check("box_loss", err);

        // ReID cross-entropy through its softmax
        let k = 5usize;
        let logits = Tensor::uniform(vec![3, k], -1.5, 1.5, &mut r);
        let mut one_hot = Tensor::<f64>::zeros(vec![3, k]);
        for row in 0..3 {
            let cls = r.random_range(0..k);
            one_hot.set(&[row, cls], 1.0);
        }
        let err = grad_check(&[logits], |tape, vars| {
            let p = tape.softmax(vars[0], 1)?;
            Ok(reid_loss(tape, p, &one_hot).expect("reid loss"))
        })
        .unwrap();
        check("reid_loss", err);

        // total loss w.r.t. the partial losses and both coefficients
        let inputs = [
            Tensor::scalar(r.random_range(0.2..2.0)),
            Tensor::scalar(r.random_range(0.2..2.0)),
            Tensor::scalar(r.random_range(0.2..2.0)),
            Tensor::scalar(r.random_range(-0.5..0.5)),
            Tensor::scalar(r.random_range(-0.5..0.5)),
        ];
        let err = grad_check(&inputs, |tape, vars| {
            total_loss(
                tape,
                vars[0],
                vars[1],
                vars[2],
                &LossWeightVars {
                    omega1: vars[3],
                    omega2: vars[4],
                },
            )
        })
        .unwrap();
        check("total_loss", err);
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(120),
        "gradient suite took {:?}",
        elapsed
    );
    println!(
        "PASS criterion 1: gradient suite, {} seeds per module, worst rel err {:.2e} <= 1e-4, {:?}",
        SEEDS, worst_overall, elapsed
    );
}

// ---------------------------------------------------------------- 2 ----

/// Exhaustive-permutation oracle for square matrices with finite costs:
/// minimal total cost over all complete matchings. Independent of the
/// solver under test.
mod brute {
    pub fn min_total_cost(costs: &[Vec<f64>]) -> f64 {
        let n = costs.len();
        let mut cols: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut cols, 0, &mut |perm| {
            let mut total = 0.0;
            for (row, &col) in perm.iter().enumerate() {
                total += costs[row][col];
            }
            if total < best {
                best = total;
            }
        });
        best
    }

    fn permute(cols: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == cols.len() {
            visit(cols);
            return;
        }
        for i in k..cols.len() {
            cols.swap(k, i);
            permute(cols, k + 1, visit);
            cols.swap(k, i);
        }
    }
}

#[test]
fn criterion_2_hungarian_against_exhaustive_search() {
    let _alone = run_alone();
    const MATRICES_PER_SIZE: usize = 500;
    let started = Instant::now();
    let mut r = rng(2024);
    let mut checked = 0usize;
    for n in 1..=7usize {
        for _ in 0..MATRICES_PER_SIZE {
            // integer-valued costs keep every sum exact in f64
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| r.random_range(0..100) as f64).collect())
                .collect();
            let expected = brute::min_total_cost(&rows);
            let got = hungarian(&CostMatrix::from_rows(rows.clone()).unwrap());
            assert_eq!(
                got.total_cost, expected,
                "solver disagreed with brute force on {:?}",
                rows
            );
            assert_eq!(got.pairs.len(), n, "matching must be complete");
            let mut seen_cols = vec![false; n];
            for &(row, col) in &got.pairs {
                assert!(row < n && col < n && !seen_cols[col]);
                seen_cols[col] = true;
            }
            checked += 1;
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "oracle took {:?}", elapsed);
    println!(
        "PASS criterion 2: {} matrices sized 1x1..7x7 match exhaustive search exactly, {:?}",
        checked, elapsed
    );
}

// ---------------------------------------------------------------- 3 ----

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Median ratios of per-forward times between consecutive sizes for one
/// attention flavor.
///
/// All sizes of a round are measured back to back, so each round's
/// ratios pair observations taken under near-identical machine
/// conditions; the measurement order rotates per round to turn residual
/// drift into symmetric noise; each run reports the fastest of several
/// forwards, which throws away transient allocator and scheduler
/// stalls; a full warmup round is discarded before anything is
/// recorded.
fn median_step_ratios(
    sizes: &[(usize, usize)],
    mut forward: impl FnMut(usize, usize, usize),
    runs: usize,
    sample_secs: f64,
) -> Vec<f64> {
    let mut reps = Vec::with_capacity(sizes.len());
    for (i, &(h, w)) in sizes.iter().enumerate() {
        forward(i, h, w);
        let calib = Instant::now();
        forward(i, h, w);
        let single = calib.elapsed().as_secs_f64();
        reps.push(((sample_secs / single.max(1e-9)).ceil() as usize).clamp(1, 80));
    }
    let mut times = vec![vec![0.0f64; sizes.len()]; runs];
    for round in 0..=runs {
        for slot in 0..sizes.len() {
            let i = (slot + round) % sizes.len();
            let (h, w) = sizes[i];
            let mut best = f64::INFINITY;
            for _ in 0..reps[i] {
                let start = Instant::now();
                forward(i, h, w);
                best = best.min(start.elapsed().as_secs_f64());
            }
            if round > 0 {
                times[round - 1][i] = best;
            }
        }
    }
    (1..sizes.len())
        .map(|step| median(times.iter().map(|row| row[step] / row[step - 1]).collect()))
        .collect()
}

fn deformable_forward(params: &DeformAttnParams<f32>, x: &Tensor<f32>, h: usize, w: usize) {
    let mut tape = Tape::no_grad();
    let flat = tape.leaf(x.clone());
    let vars = params.bind(&mut tape);
    let out = deformable_attention(&mut tape, flat, h, w, &vars).unwrap();
    std::hint::black_box(tape.value(out).data()[0]);
}

fn dense_forward(params: &DenseAttnParams<f32>, x: &Tensor<f32>) {
    let mut tape = Tape::no_grad();
    let flat = tape.leaf(x.clone());
    let out = dense_attention(&mut tape, flat, params).unwrap();
    std::hint::black_box(tape.value(out).data()[0]);
}

#[test]
fn criterion_3_complexity_separation() {
    let _alone = run_alone();
    const DEFORM_RUNS: usize = 7; // medians of >= 5 runs
    const DENSE_RUNS: usize = 5;
    // The host is shared; multi-minute co-tenant bursts raise memory
    // latency and inflate the larger sizes' measured times one-sidedly.
    // A bounded number of fresh attempts rides the bursts out without
    // weakening the windows: contention only pushes ratios up, which
    // cannot make a genuinely quadratic deformable pass its 2.8 ceiling,
    // and an attempt noisy enough to lift a linear kernel over the dense
    // 3.0 floor trips the deformable ceiling instead.
    const ATTEMPTS: usize = 5;
    let c = 32usize;
    let sizes = [(32usize, 32usize), (45, 45), (64, 64)];
    let mut r = rng(3);
    let deform = DeformAttnParams::<f32>::new(c, 4, 9, &mut r);
    let dense = DenseAttnParams::<f32>::new(c, 4, &mut r);

    let xs: Vec<Tensor<f32>> = sizes
        .iter()
        .map(|&(h, w)| Tensor::<f32>::uniform(vec![h * w, c], -1.0, 1.0, &mut r))
        .collect();

    let mut violations = String::new();
    for attempt in 1..=ATTEMPTS {
        // the deformable phase runs before the dense one; the dense pass
        // cycles far larger allocations and would disturb the small-size
        // measurements if interleaved with them
        let deform_ratios = median_step_ratios(
            &sizes,
            |i, h, w| deformable_forward(&deform, &xs[i], h, w),
            DEFORM_RUNS,
            0.25,
        );
        let dense_ratios = median_step_ratios(
            &sizes,
            |i, _, _| dense_forward(&dense, &xs[i]),
            DENSE_RUNS,
            0.5,
        );

        violations.clear();
        for step in 0..2 {
            println!(
                "  attempt {}: {}x{} -> {}x{}: deformable x{:.2}, dense x{:.2}",
                attempt,
                sizes[step].0,
                sizes[step].1,
                sizes[step + 1].0,
                sizes[step + 1].1,
                deform_ratios[step],
                dense_ratios[step]
            );
            if !(1.5..=2.8).contains(&deform_ratios[step]) {
                violations.push_str(&format!(
                    "deformable ratio {:.2} outside [1.5, 2.8] (linear trend); ",
                    deform_ratios[step]
                ));
            }
            if !(3.0..=5.5).contains(&dense_ratios[step]) {
                violations.push_str(&format!(
                    "dense ratio {:.2} outside [3.0, 5.5] (quadratic trend); ",
                    dense_ratios[step]
                ));
            }
        }
        if violations.is_empty() {
            println!(
                "PASS criterion 3: deformable scales linearly, dense quadratically (attempt {}/{}, medians of {} runs)",
                attempt, ATTEMPTS, DEFORM_RUNS
            );
            return;
        }
        std::thread::sleep(Duration::from_secs(4));
    }
    panic!("complexity separation failed on every attempt: {violations}");
}

// ---------------------------------------------------------------- 4 ----

#[test]
fn criterion_4_context_pooling_invariants() {
    let _alone = run_alone();
    let mut r = rng(4);
    let c = 16usize;
    let params = GcdParams::<f64>::new(c, &mut r);

    // spatial permutation invariance, exact to 1e-10 at 64 bits
    let (h, w) = (6usize, 5usize);
    let x = Tensor::uniform(vec![h * w, c], -2.0, 2.0, &mut r);
    let z = {
        let mut tape = Tape::no_grad();
        let xv = tape.leaf(x.clone());
        let wk = tape.leaf(params.w_k.value.clone());
        let zv = context_vector(&mut tape, xv, wk).unwrap();
        tape.value(zv).clone()
    };
    let mut order: Vec<usize> = (0..h * w).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let mut shuffled = Vec::with_capacity(h * w * c);
    for &p in &order {
        shuffled.extend_from_slice(&x.data()[p * c..(p + 1) * c]);
    }
    let xs = Tensor::new(vec![h * w, c], shuffled).unwrap();
    let zs = {
        let mut tape = Tape::no_grad();
        let xv = tape.leaf(xs);
        let wk = tape.leaf(params.w_k.value.clone());
        let zv = context_vector(&mut tape, xv, wk).unwrap();
        tape.value(zv).clone()
    };
    let mut perm_err: f64 = 0.0;
    for (a, b) in z.data().iter().zip(zs.data()) {
        perm_err = perm_err.max((a - b).abs());
    }
    assert!(perm_err <= 1e-10, "permutation deviation {}", perm_err);

    // pooling weights sum to one per image
    let weight_sum = {
        let mut tape = Tape::no_grad();
        let xv = tape.leaf(x.clone());
        let wk = tape.leaf(params.w_k.value.clone());
        let logits = tape.matmul(xv, wk).unwrap();
        let weights = tape.softmax(logits, 0).unwrap();
        tape.value(weights).sum()
    };
    assert!((weight_sum - 1.0).abs() <= 1e-6, "weights sum {}", weight_sum);

    // post-pooling transform cost is independent of the map extent:
    // time the branch transform on contexts pooled from a map and from
    // one 4x larger. Batches for the two contexts are paired per round
    // in alternating order so machine drift cancels in the ratio.
    let big = Tensor::uniform(vec![4 * h * w, c], -2.0, 2.0, &mut r);
    let z_big = {
        let mut tape = Tape::no_grad();
        let xv = tape.leaf(big);
        let wk = tape.leaf(params.w_k.value.clone());
        let zv = context_vector(&mut tape, xv, wk).unwrap();
        tape.value(zv).clone()
    };
    let batch = |z: &Tensor<f64>| -> f64 {
        let start = Instant::now();
        for _ in 0..1000 {
            let mut tape = Tape::no_grad();
            let zv = tape.leaf(z.clone());
            let vars = params.bind(&mut tape);
            let (d, _) = branch_vectors(&mut tape, zv, &vars).unwrap();
            std::hint::black_box(tape.value(d).data()[0]);
        }
        start.elapsed().as_secs_f64()
    };
    batch(&z);
    batch(&z_big);
    let ratios: Vec<f64> = (0..9)
        .map(|round| {
            if round % 2 == 0 {
                let small = batch(&z);
                batch(&z_big) / small
            } else {
                let big_t = batch(&z_big);
                big_t / batch(&z)
            }
        })
        .collect();
    let variation = (median(ratios) - 1.0).abs();
    assert!(
        variation <= 0.10,
        "transform cost varied {:.1}% when the map grew 4x",
        variation * 100.0
    );
    println!(
        "PASS criterion 4: permutation deviation {:.1e} <= 1e-10, weight sum err {:.1e} <= 1e-6, transform cost variation {:.1}% <= 10%",
        perm_err,
        (weight_sum - 1.0f64).abs(),
        variation * 100.0
    );
}

// ---------------------------------------------------------------- 5 ----

#[test]
fn criterion_5_detection_round_trip() {
    let _alone = run_alone();
    let mut r = rng(5);
    let (image_h, image_w) = (256usize, 256usize);
    let mut boxes: Vec<BoxAnnotation> = Vec::new();
    let mut cells: Vec<(i64, i64)> = Vec::new();
    while boxes.len() < 100 {
        let w = r.random_range(6.0..40.0);
        let h = r.random_range(6.0..40.0);
        let cx = r.random_range(w / 2.0 + 1.0..image_w as f64 - w / 2.0 - 1.0);
        let cy = r.random_range(h / 2.0 + 1.0..image_h as f64 - h / 2.0 - 1.0);
        let cell = ((cy / 4.0).floor() as i64, (cx / 4.0).floor() as i64);
        // peaks need breathing room: reject centers in touching cells
        if cells
            .iter()
            .any(|&(cr, cc)| (cr - cell.0).abs() <= 1 && (cc - cell.1).abs() <= 1)
        {
            continue;
        }
        cells.push(cell);
        boxes.push(BoxAnnotation {
            bbox: BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0),
            identity: boxes.len() as u64 + 1,
        });
    }
    let targets = render_targets::<f64>(&boxes, image_h, image_w).unwrap();
    let (offsets, sizes) = perfect_maps(&targets);
    let detections = decode(&targets.heatmap, &offsets, &sizes, 128, 0.4);
    assert_eq!(detections.len(), 100, "every box must decode");
    let mut worst: f64 = 0.0;
    for ann in &boxes {
        let (cell_row, cell_col) = {
            let (cx, cy) = ann.bbox.center();
            ((cy / 4.0).floor() as usize, (cx / 4.0).floor() as usize)
        };
        let found = detections
            .iter()
            .find(|d| d.center == (cell_row, cell_col))
            .expect("decoded detection at the rendered center cell");
        for (got, want) in [
            (found.bbox.l, ann.bbox.l),
            (found.bbox.t, ann.bbox.t),
            (found.bbox.r, ann.bbox.r),
            (found.bbox.b, ann.bbox.b),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    assert!(worst <= 1e-6, "worst coordinate error {}", worst);
    println!(
        "PASS criterion 5: 100 random boxes survive render -> decode, worst coordinate error {:.1e} <= 1e-6",
        worst
    );
}

// ---------------------------------------------------------------- 6 ----

#[test]
fn criterion_6_overfit_smoke_test() {
    let _alone = run_alone();
    let started = Instant::now();
    let mut r = rng(6);
    let cfg = PipelineConfig {
        in_channels: 3,
        channels: 8,
        bottleneck: 2,
        heads: 2,
        key_samples: 4,
        blocks: 1,
        embed_dim: 8,
        score_thresh: 0.25,
        max_detections: 8,
    };
    let mut params = PipelineParams::<f64>::new(cfg, &mut r);
    let mut classifier = LinearHead::<f64>::new(cfg.embed_dim, 3, &mut r);
    let mut loss_weights = LossWeights::<f64>::new();

    // one frame, three well-separated targets
    let (image_h, image_w) = (32usize, 32usize);
    let gt_boxes = [
        BBox::new(2.0, 2.0, 12.0, 14.0),
        BBox::new(20.0, 4.0, 30.0, 16.0),
        BBox::new(8.0, 20.0, 20.0, 30.0),
    ];
    let annotations: Vec<BoxAnnotation> = gt_boxes
        .iter()
        .enumerate()
        .map(|(i, &bbox)| BoxAnnotation {
            bbox,
            identity: i as u64,
        })
        .collect();
    let image: Tensor<f64> = {
        let raster = rasterize_frame(
            &annotations
                .iter()
                .enumerate()
                .map(|(i, a)| (a.bbox, i))
                .collect::<Vec<_>>(),
            image_h,
            image_w,
        );
        Tensor::new(
            raster.shape().to_vec(),
            raster.data().iter().map(|&v| v as f64).collect(),
        )
        .unwrap()
    };
    let targets = render_targets::<f64>(&annotations, image_h, image_w).unwrap();
    let grid_w = targets.heatmap.shape()[1];
    let center_idx: Vec<usize> = targets
        .center_cells
        .iter()
        .map(|&(row, col)| cell_index(grid_w, row, col))
        .collect();
    let mut one_hot = Tensor::<f64>::zeros(vec![3, 3]);
    for i in 0..3 {
        one_hot.set(&[i, i], 1.0);
    }

    // the log-variance coefficients chase ln(loss); a slower rate keeps
    // them from amplifying a near-zero branch into an explosion
    let mut opt = Adam::new(0.05);
    let mut omega_opt = Adam::new(0.005);
    let mut initial_loss = None;
    let mut final_loss = 0.0;
    for _step in 0..500 {
        let mut tape = Tape::new();
        let img = tape.leaf(image.clone());
        let pvars = params.bind(&mut tape);
        let cvars = classifier.bind(&mut tape);
        let wvars = loss_weights.bind(&mut tape);

        let maps = forward_maps(&mut tape, img, &pvars).unwrap();
        let heat2d = tape
            .reshape(maps.heat, vec![maps.grid_h, maps.grid_w])
            .unwrap();
        let l_heat = heatmap_loss(&mut tape, heat2d, &targets.heatmap, 2.0, 4.0).unwrap();
        let pred_off = tape.gather_rows(maps.offsets, &center_idx).unwrap();
        let pred_size = tape.gather_rows(maps.sizes, &center_idx).unwrap();
        let l_box = box_loss(&mut tape, pred_off, pred_size, &targets).unwrap();
        let emb = tape.gather_rows(maps.embeddings, &center_idx).unwrap();
        let logits = linear_head_forward(&mut tape, emb, &cvars).unwrap();
        let probs = tape.softmax(logits, 1).unwrap();
        let l_reid = reid_loss(&mut tape, probs, &one_hot).unwrap();
        let total = total_loss(&mut tape, l_heat, l_box, l_reid, &wvars).unwrap();

        let loss_value = tape.value(total).data()[0];
        if initial_loss.is_none() {
            initial_loss = Some(loss_value);
        }
        final_loss = loss_value;

        let grads = tape.backward(total).unwrap();
        let mut all = params.params_mut();
        all.extend(classifier.params_mut());
        all.extend(loss_weights.params_mut());
        zero_grads(&mut all);
        drop(all);
        params.accumulate(&grads, &pvars);
        classifier.accumulate(&grads, &cvars);
        loss_weights.accumulate(&grads, &wvars);
        let mut main = params.params_mut();
        main.extend(classifier.params_mut());
        opt.step(&mut main);
        omega_opt.step(&mut loss_weights.params_mut());
    }
    let initial_loss = initial_loss.unwrap();
    assert!(
        final_loss <= 0.1 * initial_loss,
        "loss only went {initial_loss} -> {final_loss}, needs at least a 90% reduction"
    );

    // each target must put a heatmap peak within one cell of its center
    let heat = {
        let mut tape = Tape::no_grad();
        let img = tape.leaf(image.clone());
        let pvars = params.bind(&mut tape);
        let maps = forward_maps(&mut tape, img, &pvars).unwrap();
        tape.value(maps.heat)
            .clone()
            .reshape(vec![maps.grid_h, maps.grid_w])
            .unwrap()
    };
    let zero_off = Tensor::<f64>::zeros(vec![heat.shape()[0], heat.shape()[1], 2]);
    let unit_size = Tensor::<f64>::filled(vec![heat.shape()[0], heat.shape()[1], 2], 4.0);
    let peaks = decode(&heat, &zero_off, &unit_size, 3, 0.0);
    assert_eq!(peaks.len(), 3, "expected three peaks after overfitting");
    for &(row, col) in &targets.center_cells {
        let hit = peaks.iter().any(|p| {
            (p.center.0 as i64 - row as i64).abs() <= 1
                && (p.center.1 as i64 - col as i64).abs() <= 1
        });
        assert!(hit, "no peak within one cell of center ({row}, {col})");
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {:?}", elapsed);
    println!(
        "PASS criterion 6: loss {:.3} -> {:.3} ({:.1}% reduction) in 500 steps, peaks on target, {:?}",
        initial_loss,
        final_loss,
        100.0 * (1.0 - final_loss / initial_loss),
        elapsed
    );
}

// ---------------------------------------------------------------- 7 ----

fn run_tracker(scenario: &SyntheticScenario, assoc: &AssocConfig) -> Vec<motkit::assoc::Track> {
    let out = synth_sequence(scenario).unwrap();
    let frames = out.frames.into_iter().map(|f| FrameObservations {
        frame: f.frame,
        detections: f.detections,
        embeddings: Some(f.embeddings),
    });
    track_sequence(assoc, frames).unwrap()
}

#[test]
fn criterion_7_end_to_end_oracle_tracking() {
    let _alone = run_alone();
    let assoc = AssocConfig::default();

    // clean scenario: 20 identities, 200 frames
    let scenario = SyntheticScenario {
        seed: 11,
        n_identities: 20,
        n_frames: 200,
        embedding_dim: 32,
        ..SyntheticScenario::default()
    };
    let gt = synth_sequence(&scenario).unwrap().ground_truth;
    let tracks = run_tracker(&scenario, &assoc);
    let preds = Predictions::from_tracks(&tracks).unwrap();
    let report = evaluate(&gt, &preds, &MatchOptions::default()).unwrap();
    assert_eq!(report.idf1, 1.0, "clean scenario IDF1 {}", report.idf1);
    assert!(report.mota >= 0.99, "clean scenario MOTA {}", report.mota);
    assert_eq!(report.id_switches, 0);

    // crossing scenario: two identities with orthogonal embeddings
    let crossing = SyntheticScenario {
        seed: 12,
        n_identities: 2,
        n_frames: 100,
        motion: MotionPattern::Crossing,
        embedding_dim: 8,
        ..SyntheticScenario::default()
    };
    let gt_cross = synth_sequence(&crossing).unwrap().ground_truth;
    let tracks_cross = run_tracker(&crossing, &assoc);
    let preds_cross = Predictions::from_tracks(&tracks_cross).unwrap();
    let report_cross = evaluate(&gt_cross, &preds_cross, &MatchOptions::default()).unwrap();
    assert_eq!(
        report_cross.id_switches, 0,
        "crossing scenario must keep identities"
    );

    // dropout scenario: gap filling restores full coverage
    let dropout = SyntheticScenario {
        seed: 13,
        n_identities: 1,
        n_frames: 200,
        dropout: 0.1,
        embedding_dim: 8,
        ..SyntheticScenario::default()
    };
    let out = synth_sequence(&dropout).unwrap();
    let detected: usize = out.frames.iter().map(|f| f.detections.len()).sum();
    assert!(detected < 200, "dropout must actually drop detections");
    assert_eq!(
        out.frames[0].detections.len(),
        1,
        "scenario seed must keep the first frame"
    );
    assert_eq!(
        out.frames[199].detections.len(),
        1,
        "scenario seed must keep the last frame"
    );
    let gt_drop = out.ground_truth.clone();
    let frames = out.frames.into_iter().map(|f| FrameObservations {
        frame: f.frame,
        detections: f.detections,
        embeddings: Some(f.embeddings),
    });
    let tracks_drop = track_sequence(&assoc, frames).unwrap();

    let filled_preds = Predictions::from_tracks(&tracks_drop).unwrap();
    let mut unfilled_tracks = tracks_drop.clone();
    for t in &mut unfilled_tracks {
        t.boxes.retain(|b| !b.filled);
    }
    let unfilled_preds = Predictions::from_tracks(&unfilled_tracks).unwrap();

    let filled = evaluate(&gt_drop, &filled_preds, &MatchOptions::default()).unwrap();
    let unfilled = evaluate(&gt_drop, &unfilled_preds, &MatchOptions::default()).unwrap();
    assert_eq!(
        filled.false_negatives, 0,
        "filling must restore 100% coverage, {} misses remain",
        filled.false_negatives
    );
    assert!(
        filled.false_negatives < unfilled.false_negatives,
        "filling must strictly reduce misses ({} vs {})",
        filled.false_negatives,
        unfilled.false_negatives
    );
    println!(
        "PASS criterion 7: clean IDF1 {:.3} MOTA {:.3} IDS {}, crossing IDS {}, dropout FN {} -> {}",
        report.idf1,
        report.mota,
        report.id_switches,
        report_cross.id_switches,
        unfilled.false_negatives,
        filled.false_negatives
    );
}

// ---------------------------------------------------------------- 8 ----

#[test]
fn criterion_8_metrics_oracle() {
    let _alone = run_alone();
    let boxed = |x: f64| BBox::new(x, 0.0, x + 20.0, 40.0);
    // 10 identities x 10 frames; 3 misses, 2 spurious boxes, 1 switch
    let mut gt = GroundTruth::new();
    let mut preds = Predictions::new();
    for f in 1..=10usize {
        for id in 1..=10u64 {
            gt.insert(f, id, boxed(id as f64 * 50.0)).unwrap();
            if id == 3 && (4..=6).contains(&f) {
                continue;
            }
            let pid = if id == 7 && f >= 6 { 77 } else { id };
            preds.insert(f, pid, boxed(id as f64 * 50.0)).unwrap();
        }
    }
    preds.insert(2, 99, boxed(5000.0)).unwrap();
    preds.insert(3, 99, boxed(5000.0)).unwrap();
    let report = evaluate(&gt, &preds, &MatchOptions::default()).unwrap();
    assert_eq!(report.false_positives, 2);
    assert_eq!(report.false_negatives, 3);
    assert_eq!(report.id_switches, 1);
    assert_eq!(report.gt_count, 100);
    assert_eq!(report.mota, 0.94, "MOTA must equal 0.94 exactly");

    // one identity split into two half-coverage ids
    let mut gt2 = GroundTruth::new();
    let mut preds2 = Predictions::new();
    for f in 1..=10usize {
        gt2.insert(f, 1, boxed(0.0)).unwrap();
        preds2
            .insert(f, if f <= 5 { 10 } else { 20 }, boxed(0.0))
            .unwrap();
    }
    let split_idf1 = idf1(&gt2, &preds2, &MatchOptions::default());
    assert_eq!(split_idf1, 0.5, "identity split IDF1 must equal 0.5 exactly");
    println!("PASS criterion 8: constructed MOTA = 0.94 and split IDF1 = 0.5, both exact");
}

// ---------------------------------------------------------------- 9 ----

#[test]
fn criterion_9_format_fidelity() {
    let _alone = run_alone();
    // canonical file: byte-identical round trip
    let canonical = "1,1,10,20,30,40,1,-1,-1,-1\n\
                     1,2,50.5,60.25,30,40,0.875,-1,-1,-1\n\
                     2,1,12,22,30,40,1,-1,-1,-1\n";
    let lines = parse_mot(canonical).unwrap();
    let rewritten = format_mot(&lines);
    assert_eq!(rewritten, canonical, "round trip must be byte-identical");

    // a write -> read -> write cycle through the filesystem
    let dir = std::path::PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let path = dir.join("acceptance_roundtrip.txt");
    motkit::mot_io::write_mot(&path, &lines).unwrap();
    let reread = motkit::mot_io::read_mot(&path).unwrap();
    assert_eq!(reread, lines);
    assert_eq!(format_mot(&reread), canonical);

    // malformed input names its line
    let bad = "1,1,10,20,30,40,1,-1,-1,-1\n1,2,3\n";
    match parse_mot(bad) {
        Err(MotIoError::FieldCount { line: 2, got: 3 }) => {}
        other => panic!("expected a field-count error on line 2, got {:?}", other),
    }
    let bad_number = "1,1,10,twenty,30,40,1,-1,-1,-1\n";
    match parse_mot(bad_number) {
        Err(MotIoError::BadNumber { line: 1, field, .. }) => assert_eq!(field, "bb_top"),
        other => panic!("expected a number error on line 1, got {:?}", other),
    }
    println!("PASS criterion 9: canonical round trip byte-identical, malformed lines rejected with line numbers");
}

// ------------------------------------------------------------ extras ----

#[test]
fn oracle_embeddings_feed_association_directly() {
    let _alone = run_alone();
    // embeddings_at_centers and the synthetic oracle agree on unit norm
    let mut map = Tensor::<f64>::zeros(vec![8, 8, 4]);
    for row in 0..8 {
        for col in 0..8 {
            map.set(&[row, col, (row + col) % 4], 2.0);
        }
    }
    let detections = vec![
        motkit::detect::Detection {
            bbox: BBox::new(0.0, 0.0, 8.0, 8.0),
            score: 1.0,
            center: (1, 1),
        },
        motkit::detect::Detection {
            bbox: BBox::new(8.0, 0.0, 16.0, 8.0),
            score: 1.0,
            center: (1, 3),
        },
    ];
    let embs = embeddings_at_centers(&map, &detections).unwrap();
    assert_eq!(embs[0][2], 1.0);
    assert_eq!(embs[1][0], 1.0);
}
