//! Verification subcommands: the finite-difference gradient suite and
//! the attention scaling benchmark.

use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use motkit::bbox::BBox;
use motkit::detect::{
    box_loss, heatmap_loss, reid_loss, render_targets, total_loss, BoxAnnotation, LossWeightVars,
};
use motkit::gcd::{disentangle, GcdParams, GcdVars};
use motkit::gte::{
    deformable_attention, dense_attention, encoder_block, DeformAttnParams, DeformAttnVars,
    DenseAttnParams, EncoderBlockParams, EncoderBlockVars,
};
use motkit::tensor::{grad_check, Parameter, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Runs every gradient check `seeds` times; prints one line per module
/// and exits 1 on any relative error above the tolerance.
pub fn gradcheck(seeds: u64) -> ExitCode {
    let (c, h, w) = (8usize, 6usize, 6usize);
    let (n_keys, n_heads) = (4usize, 2usize);
    let mut failures = 0usize;
    let started = Instant::now();

    let mut report = |name: &str, worst: f64| {
        let ok = worst <= GRAD_TOLERANCE;
        println!(
            "{:<22} worst rel err {:.3e}  {}",
            name,
            worst,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures += 1;
        }
    };

    let mut worst = [0.0f64; 8];
    for seed in 0..seeds {
        let mut r = ChaCha8Rng::seed_from_u64(9000 + seed);

        let x = Tensor::uniform(vec![2, c], -1.0, 1.0, &mut r);
        let weights = Tensor::uniform(vec![2, c], -1.0, 1.0, &mut r);
        let err = grad_check(&[x], |tape, vars| {
            let normed = tape.layer_norm(vars[0], 1e-5, 1)?;
            let weighted = tape.mul_const(normed, &weights)?;
            tape.sum(weighted)
        })
        .expect("layer norm check");
        worst[0] = worst[0].max(err);

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
        .expect("disentangling check");
        worst[1] = worst[1].max(err);

        let mut attn = DeformAttnParams::<f64>::new(c, n_heads, n_keys, &mut r);
        attn.offset_proj = Parameter::new(Tensor::uniform(
            vec![c, 2 * n_keys * n_heads],
            0.05,
            0.45,
            &mut r,
        ));
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
        .expect("deformable attention check");
        worst[2] = worst[2].max(err);

        let mut block =
            EncoderBlockParams::<f64>::with_ffn_width(c, n_heads, n_keys, 2 * c, &mut r);
        block.attn.offset_proj = Parameter::new(Tensor::uniform(
            vec![c, 2 * n_keys * n_heads],
            0.05,
            0.45,
            &mut r,
        ));
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
        .expect("encoder block check");
        worst[3] = worst[3].max(err);

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
        let targets = render_targets::<f64>(&boxes, 4 * h, 4 * w).expect("targets");
        let pred = Tensor::uniform(vec![h, w], 0.05, 0.95, &mut r);
        let err = grad_check(&[pred], |tape, vars| {
            heatmap_loss(tape, vars[0], &targets.heatmap, 2.0, 4.0)
        })
        .expect("heatmap loss check");
        worst[4] = worst[4].max(err);

        let pred_off = Tensor::uniform(vec![2, 2], 0.05, 0.95, &mut r);
        let pred_size = Tensor::uniform(vec![2, 2], 5.0, 20.0, &mut r);
        let err = grad_check(&[pred_off, pred_size], |tape, vars| {
            box_loss(tape, vars[0], vars[1], &targets)
        })
        .expect("box loss check");
        worst[5] = worst[5].max(err);

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
        .expect("reid loss check");
        worst[6] = worst[6].max(err);

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
        .expect("total loss check");
        worst[7] = worst[7].max(err);
    }

    let names = [
        "layer_norm",
        "disentangle",
        "deformable_attention",
        "encoder_block",
        "heatmap_loss",
        "box_loss",
        "reid_loss",
        "total_loss",
    ];
    for (name, &w) in names.iter().zip(&worst) {
        report(name, w);
    }
    println!(
        "{} seeds per module in {:?}, tolerance {:.0e}",
        seeds,
        started.elapsed(),
        GRAD_TOLERANCE
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{failures} gradient check(s) above tolerance");
        ExitCode::from(1)
    }
}

/// Prints per-size forward times and consecutive scaling ratios for the
/// two attention flavors.
pub fn bench(sizes_arg: &str) -> Result<()> {
    let sizes: Vec<usize> = sizes_arg
        .split(',')
        .map(|s| s.trim().parse::<usize>().context("sizes must be integers"))
        .collect::<Result<_>>()?;
    if sizes.len() < 2 {
        anyhow::bail!("need at least two sizes to compute ratios");
    }
    let c = 32usize;
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let deform = DeformAttnParams::<f32>::new(c, 4, 9, &mut r);
    let dense = DenseAttnParams::<f32>::new(c, 4, &mut r);

    let time_forward = |f: &mut dyn FnMut()| -> f64 {
        f(); // warmup
        let mut samples = Vec::with_capacity(5);
        for _ in 0..5 {
            let start = Instant::now();
            f();
            samples.push(start.elapsed().as_secs_f64());
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        samples[2]
    };

    println!("{:<10}{:>16}{:>16}", "size", "deformable [s]", "dense [s]");
    let mut deform_times = Vec::new();
    let mut dense_times = Vec::new();
    for &n in &sizes {
        let x = Tensor::<f32>::uniform(vec![n * n, c], -1.0, 1.0, &mut r);
        let deform_time = time_forward(&mut || {
            let mut tape = Tape::no_grad();
            let flat = tape.leaf(x.clone());
            let vars = deform.bind(&mut tape);
            let out = deformable_attention(&mut tape, flat, n, n, &vars).unwrap();
            std::hint::black_box(tape.value(out).data()[0]);
        });
        let dense_time = time_forward(&mut || {
            let mut tape = Tape::no_grad();
            let flat = tape.leaf(x.clone());
            let out = dense_attention(&mut tape, flat, &dense).unwrap();
            std::hint::black_box(tape.value(out).data()[0]);
        });
        println!("{:<10}{:>16.5}{:>16.5}", format!("{n}x{n}"), deform_time, dense_time);
        deform_times.push(deform_time);
        dense_times.push(dense_time);
    }
    for i in 1..sizes.len() {
        println!(
            "{}x{} -> {}x{}: positions x{:.2}, deformable x{:.2}, dense x{:.2}",
            sizes[i - 1],
            sizes[i - 1],
            sizes[i],
            sizes[i],
            (sizes[i] * sizes[i]) as f64 / (sizes[i - 1] * sizes[i - 1]) as f64,
            deform_times[i] / deform_times[i - 1],
            dense_times[i] / dense_times[i - 1],
        );
    }
    Ok(())
}
