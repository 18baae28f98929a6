//! Track / eval / synth / viz / config subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use motkit::assoc::{track_sequence, FrameObservations};
use motkit::config::{Config, FeaturePath};
use motkit::detect::render_targets;
use motkit::metrics::evaluate;
use motkit::mot_io::{
    ground_truth_to_lines, lines_to_detections, lines_to_ground_truth, read_mot, write_mot,
    MotLine,
};
use motkit::pipeline::{infer_frame, PipelineConfig, PipelineParams};
use motkit::synth::{rasterize_frame, synth_sequence, SynthOutput};
use motkit::tensor::Tensor;
use motkit::viz::{read_map_dump, write_map_dump, write_ppm};
use motkit::BBox;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

/// A config file has `key=value` lines; a MOT file starts with CSV.
fn looks_like_config(text: &str) -> bool {
    text.lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .is_some_and(|l| l.contains('=') && !l.contains(','))
}

pub fn track(
    input: &Path,
    out: &Path,
    config: Option<&Path>,
    dump_heatmap: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("reading input {}", input.display()))?;

    let tracks = if looks_like_config(&text) {
        cfg.apply_text(&text)
            .with_context(|| format!("parsing scenario config {}", input.display()))?;
        let scenario = cfg.to_scenario();
        let out_seq = synth_sequence(&scenario).context("generating the synthetic scenario")?;
        match cfg.path {
            FeaturePath::Oracle => track_oracle(&cfg, out_seq, dump_heatmap)?,
            FeaturePath::Neural => track_neural(&cfg, out_seq, dump_heatmap)?,
        }
    } else {
        let lines = read_mot(input).with_context(|| format!("parsing {}", input.display()))?;
        let by_frame = lines_to_detections(&lines);
        if let Some(dump) = dump_heatmap {
            dump_first_frame_targets(&cfg, by_frame.values().next(), dump)?;
        }
        let frames = by_frame.into_iter().map(|(frame, detections)| FrameObservations {
            frame,
            detections,
            embeddings: None,
        });
        track_sequence(&cfg.to_assoc(), frames).context("tracking the detection file")?
    };

    let lines = motkit::mot_io::tracks_to_lines(&tracks);
    write_mot(out, &lines).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "tracked {} trajectories over {} boxes -> {}",
        tracks.len(),
        lines.len(),
        out.display()
    );
    Ok(())
}

fn track_oracle(
    cfg: &Config,
    seq: SynthOutput,
    dump_heatmap: Option<&Path>,
) -> Result<Vec<motkit::assoc::Track>> {
    if let Some(dump) = dump_heatmap {
        let first = seq.frames.first();
        dump_first_frame_targets(cfg, first.map(|f| &f.detections), dump)?;
    }
    let frames = seq.frames.into_iter().map(|f| FrameObservations {
        frame: f.frame,
        detections: f.detections,
        embeddings: Some(f.embeddings),
    });
    Ok(track_sequence(&cfg.to_assoc(), frames)?)
}

fn track_neural(
    cfg: &Config,
    seq: SynthOutput,
    dump_heatmap: Option<&Path>,
) -> Result<Vec<motkit::assoc::Track>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = PipelineParams::<f32>::new(PipelineConfig::from_config(cfg), &mut rng);
    let mut observations = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        let boxes: Vec<(BBox, usize)> = frame
            .detections
            .iter()
            .zip(&frame.identity_idx)
            .map(|(d, &i)| (d.bbox, i))
            .collect();
        let image = rasterize_frame(&boxes, cfg.image_h, cfg.image_w);
        let (detections, embeddings) =
            infer_frame(&params, &image).context("running the feature pipeline")?;
        if frame.frame == 1 {
            if let Some(dump) = dump_heatmap {
                dump_predicted_heatmap(&params, &image, dump)?;
            }
        }
        observations.push(FrameObservations {
            frame: frame.frame,
            detections,
            embeddings: Some(embeddings),
        });
    }
    Ok(track_sequence(&cfg.to_assoc(), observations)?)
}

fn dump_predicted_heatmap(
    params: &PipelineParams<f32>,
    image: &Tensor<f32>,
    dump: &Path,
) -> Result<()> {
    use motkit::pipeline::forward_maps;
    use motkit::Tape;
    let mut tape = Tape::no_grad();
    let img = tape.leaf(image.clone());
    let vars = params.bind(&mut tape);
    let maps = forward_maps(&mut tape, img, &vars)?;
    let heat = tape
        .value(maps.heat)
        .clone()
        .reshape(vec![maps.grid_h, maps.grid_w])?;
    write_map_dump(dump, &heat).with_context(|| format!("writing {}", dump.display()))?;
    Ok(())
}

/// Renders the target heatmap of the first frame's boxes (the oracle
/// stand-in for a predicted map).
fn dump_first_frame_targets(
    cfg: &Config,
    detections: Option<&Vec<motkit::detect::Detection>>,
    dump: &Path,
) -> Result<()> {
    let Some(detections) = detections else {
        bail!("no frames to dump a heatmap from");
    };
    let annotations: Vec<motkit::detect::BoxAnnotation> = detections
        .iter()
        .enumerate()
        .map(|(i, d)| motkit::detect::BoxAnnotation {
            bbox: d.bbox,
            identity: i as u64,
        })
        .collect();
    let targets = render_targets::<f64>(&annotations, cfg.image_h, cfg.image_w)
        .context("rendering the heatmap")?;
    write_map_dump(dump, &targets.heatmap)
        .with_context(|| format!("writing {}", dump.display()))?;
    Ok(())
}

pub fn eval(gt_path: &Path, pred_path: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let gt_lines = read_mot(gt_path).with_context(|| format!("parsing {}", gt_path.display()))?;
    let pred_lines =
        read_mot(pred_path).with_context(|| format!("parsing {}", pred_path.display()))?;
    let gt = lines_to_ground_truth(&gt_lines)?;
    let preds = lines_to_ground_truth(&pred_lines)?;
    let report = evaluate(&gt, &preds, &cfg.to_match_options())?;
    print!("{}", report.table());
    println!();
    print!("{}", report.csv());
    Ok(())
}

pub fn synth(config: Option<&Path>, out_dir: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let seq = synth_sequence(&cfg.to_scenario()).context("generating the scenario")?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let gt_lines = ground_truth_to_lines(&seq.ground_truth);
    write_mot(&out_dir.join("gt.txt"), &gt_lines)?;

    let mut det_lines = Vec::new();
    for frame in &seq.frames {
        for d in &frame.detections {
            det_lines.push(MotLine {
                frame: frame.frame,
                id: -1,
                bb_left: d.bbox.l,
                bb_top: d.bbox.t,
                bb_width: d.bbox.width(),
                bb_height: d.bbox.height(),
                conf: d.score,
                x: -1.0,
                y: -1.0,
                z: -1.0,
            });
        }
    }
    write_mot(&out_dir.join("det.txt"), &det_lines)?;
    println!(
        "wrote {} ground-truth and {} detection lines to {}",
        gt_lines.len(),
        det_lines.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn viz(tensor: &Path, out: &Path) -> Result<()> {
    let map = read_map_dump(tensor).with_context(|| format!("reading {}", tensor.display()))?;
    write_ppm(out, &map).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "rendered {}x{} map -> {}",
        map.shape()[0],
        map.shape()[1],
        out.display()
    );
    Ok(())
}

pub fn echo_config(config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    print!("{}", cfg.canonical());
    Ok(())
}
