//! Command-line front end for the identity-matching engine.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. All diagnostics go to
//! standard error; machine-readable results go to standard output or `--out`
//! files. Every command takes `--seed` and is deterministic given identical
//! flags, files, and seed.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use idmatch::formats::{
    self, load_json, parse_run_config, save_json, write_ppm, AssignDoc, MatchingDoc, PoseDoc,
    PositionsDoc,
};
use idmatch::graph::{build_img, consistency_score, FeatureMap, Mode, MqaParams};
use idmatch::guidance::{assign_identities, render_ieg, Assignment, GuidanceConfig};
use idmatch::mask::CharacterMask;
use idmatch::sampling::{classify_pairs, CharacterPositions, PairPolicy, PairSampler, SamplerConfig};
use idmatch::synth::{gen_dataset, SceneSpec};
use idmatch::tensor::Tensor;
use idmatch::train::{
    evaluate_ic, grad_check_scene, train_from_config, write_eval_csv, write_metrics_csv, ToyModel,
    PROJECTION_DIM,
};
use idmatch::{Error, Result};

/// Projection scale for scoring without trained weights: shared orthonormal
/// rows at this scale keep attention sharp enough to separate characters.
const SCORE_PROJECTION_SCALE: f64 = 8.0;

#[derive(Parser)]
#[command(name = "idmatch", version, about = "Differentiable identity matching over masked attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score identity correspondence between a reference and a generated frame
    ImgScore {
        /// Reference features, TSR1 [c,h,w]
        #[arg(long)]
        features_ref: PathBuf,
        /// Generated features, TSR1 [c,h,w]
        #[arg(long)]
        features_gen: PathBuf,
        /// Directory of reference mask PGMs, identity = sorted position
        #[arg(long)]
        masks_ref: PathBuf,
        /// Directory of generated mask PGMs, identity = sorted position
        #[arg(long)]
        masks_gen: PathBuf,
        /// Ground-truth matching JSON
        #[arg(long)]
        matching: PathBuf,
        /// Attention projection width
        #[arg(long, default_value_t = PROJECTION_DIM)]
        d: usize,
        #[arg(long, default_value = "fast", value_parser = parse_mode)]
        mode: Mode,
        /// Restrict attention keys to reference character tokens
        #[arg(long)]
        background_mask: bool,
        /// Seed for the random projections
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Edge-weight CSV destination (optional)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign persistent identities to posed persons via box enclosure
    IegAssign {
        /// Pose JSON with per-frame persons and identity boxes
        #[arg(long)]
        poses: PathBuf,
        /// Enclosure-ratio acceptance threshold
        #[arg(long, default_value_t = 0.6)]
        tau: f64,
        /// Keypoints below this confidence are ignored
        #[arg(long, default_value_t = 0.3)]
        min_confidence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Assignment JSON destination
        #[arg(long)]
        out: PathBuf,
    },
    /// Render color-coded skeletons for one frame
    IegRender {
        #[arg(long)]
        poses: PathBuf,
        /// Assignment JSON produced by ieg-assign
        #[arg(long)]
        assign: PathBuf,
        /// Raster size as WIDTHxHEIGHT
        #[arg(long, default_value = "256x256", value_parser = parse_size)]
        size: (usize, usize),
        /// Frame index to render
        #[arg(long, default_value_t = 0)]
        frame: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// PPM destination
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify swap pairs and report sampling statistics
    PcsPlan {
        /// Character positions JSON
        #[arg(long)]
        positions: PathBuf,
        /// Probability of drawing from the swap-pair pool
        #[arg(long, default_value_t = 0.3)]
        rho: f64,
        #[arg(long, default_value_t = 10000)]
        draws: usize,
        /// Minimum |frame_a - frame_b| for a candidate pair
        #[arg(long, default_value_t = 1)]
        min_distance: u32,
        /// Maximum |frame_a - frame_b|, unlimited when absent
        #[arg(long)]
        max_distance: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Statistics CSV destination
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scene dataset with a manifest
    SynthGen {
        /// Characters per scene
        #[arg(long, default_value_t = 2)]
        chars: usize,
        #[arg(long)]
        count: usize,
        /// Fraction of scenes with swapped character positions
        #[arg(long, default_value_t = 0.3)]
        swap_share: f64,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        /// Feature noise level
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Per-region probability of a wrong identity cue
        #[arg(long, default_value_t = 0.25)]
        corrupt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset directory (created if missing)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy generator against a scene manifest
    TrainDemo {
        /// key=value run configuration
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the configuration
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV destination
        #[arg(long)]
        out: PathBuf,
        /// Trained model destination (optional)
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Score every manifest scene with a trained model
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Model TSR1 written by train-demo
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluation CSV destination
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare tape gradients against central finite differences
    Gradcheck {
        /// Scene seed
        #[arg(long)]
        scene: u64,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s}"))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .map_err(|_| format!("expected WIDTHxHEIGHT, got {s}"))
    };
    Ok((parse(w)?, parse(h)?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::ImgScore {
            features_ref,
            features_gen,
            masks_ref,
            masks_gen,
            matching,
            d,
            mode,
            background_mask,
            seed,
            out,
        } => img_score(
            &features_ref,
            &features_gen,
            &masks_ref,
            &masks_gen,
            &matching,
            d,
            mode,
            background_mask,
            seed,
            out.as_deref(),
        ),
        Command::IegAssign { poses, tau, min_confidence, seed: _, out } => {
            ieg_assign(&poses, tau, min_confidence, &out)
        }
        Command::IegRender { poses, assign, size, frame, seed: _, out } => {
            ieg_render(&poses, &assign, size, frame, &out)
        }
        Command::PcsPlan { positions, rho, draws, min_distance, max_distance, seed, out } => {
            pcs_plan(&positions, rho, draws, min_distance, max_distance, seed, &out)
        }
        Command::SynthGen {
            chars,
            count,
            swap_share,
            height,
            width,
            channels,
            sigma,
            corrupt,
            seed,
            out,
        } => {
            let spec = SceneSpec {
                h: height,
                w: width,
                c: channels,
                m: chars,
                sigma,
                corrupt_p: corrupt,
                ..SceneSpec::default()
            };
            gen_dataset(&spec, count, swap_share, seed, &out)?;
            println!("wrote {count} scenes under {}", out.display());
            Ok(())
        }
        Command::TrainDemo { config, seed, out, model_out } => {
            train_demo(&config, seed, &out, model_out.as_deref())
        }
        Command::Evaluate { config, model, seed: _, out } => evaluate(&config, &model, &out),
        Command::Gradcheck { scene, eps, seed: _ } => {
            let worst = grad_check_scene(scene, eps)?;
            println!("max_rel_err,{worst:.3e}");
            Ok(())
        }
    }
}

/// Reads every `.pgm` in `dir` in file-name order; identity = position.
fn read_mask_dir(dir: &Path) -> Result<Vec<CharacterMask>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "pgm"))
        .collect();
    if names.is_empty() {
        return Err(Error::domain(format!("no .pgm masks under {}", dir.display())));
    }
    names.sort();
    names
        .iter()
        .enumerate()
        .map(|(k, p)| formats::read_mask_pgm(p, k as u32))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn img_score(
    features_ref: &Path,
    features_gen: &Path,
    masks_ref: &Path,
    masks_gen: &Path,
    matching: &Path,
    d: usize,
    mode: Mode,
    background_mask: bool,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let f_ref = FeatureMap::new(Tensor::load_tsr(features_ref)?, 0)?;
    let f_gen = FeatureMap::new(Tensor::load_tsr(features_gen)?, 0)?;
    let masks_ref = read_mask_dir(masks_ref)?;
    let masks_gen = read_mask_dir(masks_gen)?;
    let doc: MatchingDoc = load_json(matching)?;
    let gt: BTreeMap<u32, u32> = doc.pairs.iter().map(|p| (p.generated, p.reference)).collect();

    let params = MqaParams::random_shared_orthonormal(f_ref.channels(), d, SCORE_PROJECTION_SCALE, seed)?
        .with_mode(mode)
        .with_background_mask(background_mask);
    let img = build_img(&f_ref, &f_gen, &masks_ref, &masks_gen, &gt, &params, 0)?
        .ok_or_else(|| Error::domain("every generated mask is empty: nothing to score"))?;
    if !img.dropped_gen_ids.is_empty() {
        eprintln!("dropped generated identities with empty masks: {:?}", img.dropped_gen_ids);
    }
    let (c, degenerate) = consistency_score(&img);
    if degenerate {
        eprintln!("warning: a generated character collected no attention mass");
    }
    println!("C,{c:.6}");

    if let Some(out) = out {
        let mut csv = String::from("gen,ref,weight\n");
        for (j, &g) in img.gen_ids.iter().enumerate() {
            for (i, &r) in img.ref_ids.iter().enumerate() {
                let _ = writeln!(csv, "{g},{r},{}", img.weights[j][i]);
            }
        }
        std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn ieg_assign(poses: &Path, tau: f64, min_confidence: f64, out: &Path) -> Result<()> {
    let doc: PoseDoc = load_json(poses)?;
    formats::validate_poses(&doc)?;
    let config = GuidanceConfig { tau, min_confidence };
    let mut frames = Vec::with_capacity(doc.frames.len());
    for frame in &doc.frames {
        let assignment = assign_identities(&frame.persons, &frame.boxes, &config)?;
        frames.push(assignment.to_doc(frame.index));
    }
    save_json(out, &AssignDoc { frames })
}

fn ieg_render(poses: &Path, assign: &Path, size: (usize, usize), frame: u32, out: &Path) -> Result<()> {
    let pose_doc: PoseDoc = load_json(poses)?;
    formats::validate_poses(&pose_doc)?;
    let assign_doc: AssignDoc = load_json(assign)?;
    let pose_frame = pose_doc
        .frames
        .iter()
        .find(|f| f.index == frame)
        .ok_or_else(|| Error::domain(format!("pose file has no frame {frame}")))?;
    let assign_frame = assign_doc
        .frames
        .iter()
        .find(|f| f.index == frame)
        .ok_or_else(|| Error::domain(format!("assignment file has no frame {frame}")))?;
    let (w, h) = size;
    let raster = render_ieg(
        pose_frame,
        &Assignment::from_doc(assign_frame),
        &GuidanceConfig::default(),
        h,
        w,
    )?;
    write_ppm(out, w, h, &raster.rgb)
}

fn pcs_plan(
    positions: &Path,
    rho: f64,
    draws: usize,
    min_distance: u32,
    max_distance: Option<u32>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let doc: PositionsDoc = load_json(positions)?;
    let frames: Vec<CharacterPositions> = doc
        .frames
        .iter()
        .map(|f| {
            CharacterPositions::new(f.index, f.chars.iter().map(|c| (c.id, c.cx)).collect())
        })
        .collect::<Result<_>>()?;
    let index = classify_pairs(&frames, &PairPolicy { min_distance, max_distance })?;
    let mut sampler = PairSampler::new(index, &SamplerConfig { rho, seed })?;
    for _ in 0..draws {
        sampler.draw();
    }
    for warning in &sampler.index().warnings {
        eprintln!("warning: {warning}");
    }
    let idx = sampler.index();
    let csv = format!(
        "draws,swap_draws,swap_fraction,swap_pairs,all_pairs,excluded_frames\n{},{},{},{},{},{}\n",
        draws,
        sampler.swap_draws,
        sampler.swap_fraction(),
        idx.swap_pairs.len(),
        idx.all_pairs.len(),
        idx.excluded_frames.len(),
    );
    std::fs::write(out, csv).map_err(|e| Error::io(out, e))
}

fn train_demo(config: &Path, seed: Option<u64>, out: &Path, model_out: Option<&Path>) -> Result<()> {
    let mut run = parse_run_config(config)?;
    if let Some(seed) = seed {
        run.seed = seed;
    }
    let (model, outcome) = train_from_config(&run)?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    if outcome.skipped_draws > 0 {
        eprintln!("skipped {} degenerate draws", outcome.skipped_draws);
    }
    write_metrics_csv(out, &outcome.records)?;
    if let Some(model_out) = model_out {
        model.save(model_out)?;
    }
    let last = outcome.records.last().expect("steps >= 1 is enforced");
    println!("c_mean,{:.6}", last.c_mean);
    Ok(())
}

fn evaluate(config: &Path, model: &Path, out: &Path) -> Result<()> {
    let run = parse_run_config(config)?;
    let entries = idmatch::synth::load_manifest(&run.manifest)?;
    let first = entries
        .first()
        .ok_or_else(|| Error::domain(format!("manifest {} lists no scenes", run.manifest.display())))?;
    let dir = run.manifest.parent().unwrap_or_else(|| Path::new("."));
    let probe = idmatch::synth::load_scene(dir, first)?;
    let model = ToyModel::load(
        model,
        probe.cue.channels(),
        probe.f_ref.channels(),
        run.layers,
        PROJECTION_DIM,
    )?;
    let report = evaluate_ic(&model, &run)?;
    write_eval_csv(out, &report)?;
    println!("mean_c,{:.6}", report.mean_c);
    Ok(())
}
