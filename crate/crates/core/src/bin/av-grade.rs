use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use av_grade::mdtnet::{grad_cam, load_submodel, MDTNetModel};
use av_grade::nn::{argmax, SubModel};
use av_grade::pipeline::{self, Layout, PipelineConfig, RunTiming};
use av_grade::raster::{heat_to_rgb, load_png, save_png, Grid, Pixel, RgbImage};
use av_grade::synthgen::{generate_scene, render_scene_rgb, SceneSpec, Severity};
use av_grade::vesselgraph::{detect_crossing_candidates, refine_av_map, skeletonize, AVMap, CupZone, DetectParams};
use av_grade::{Error, Result};

#[derive(Parser)]
#[command(name = "av-grade", about = "Arteriolosclerosis grading from retinal artery/vein crossings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Validate,
    Grade,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Pipeline config (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(d) = &self.out_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes: label map, shaded rendering and ground truth.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Scene template (JSON `SceneSpec`).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Detect crossing candidates on a palette-coded A/V map.
    Detect {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        cup_x: i64,
        #[arg(long)]
        cup_y: i64,
        #[arg(long)]
        cup_r: f64,
        #[arg(long, default_value_t = 64)]
        patch_size: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the validation model or the grading sub-models.
    Train {
        #[arg(long, value_enum)]
        task: Task,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the fusion head on the frozen grading sub-models.
    Fuse {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate the persisted models on the test split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Classify one patch PNG with a checkpoint.
    Grade {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        patch: PathBuf,
    },
    /// Write a Grad-CAM heat map for one patch.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target class; the predicted class when omitted.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Run every stage end to end.
    RunAll {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            seed,
            count,
            out_dir,
            spec,
        } => generate(seed, count, &out_dir, spec.as_deref()),
        Command::Detect {
            input,
            cup_x,
            cup_y,
            cup_r,
            patch_size,
            out_dir,
        } => detect(&input, CupZone { center: Pixel::new(cup_x, cup_y), radius: cup_r }, patch_size, &out_dir),
        Command::Train { task, cfg } => train(task, &cfg.load()?),
        Command::Fuse { cfg } => fuse(&cfg.load()?),
        Command::Evaluate { cfg } => evaluate(&cfg.load()?),
        Command::Grade { model, patch } => grade(&model, &patch),
        Command::Explain {
            model,
            patch,
            out,
            class,
        } => explain(&model, &patch, &out, class),
        Command::RunAll { cfg } => run_all(&cfg.load()?),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn generate(seed: u64, count: usize, out_dir: &Path, spec: Option<&Path>) -> Result<()> {
    let template: SceneSpec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text)?
        }
        None => SceneSpec::default(),
    };
    mkdir(out_dir)?;
    for i in 0..count {
        let spec = SceneSpec {
            seed: seed + i as u64,
            examinee_id: template.examinee_id + i as u64,
            ..template.clone()
        };
        let (map, truth) = generate_scene(&spec)?;
        let stem = format!("scene_{:04}", spec.seed);
        save_png(&map.to_palette_image(), &out_dir.join(format!("{stem}_av.png")))?;
        save_png(&render_scene_rgb(&map), &out_dir.join(format!("{stem}_rgb.png")))?;
        write_json(&out_dir.join(format!("{stem}.json")), &serde_json::json!({ "spec": spec, "truth": truth }))?;
        println!("{stem}: {} crossings", truth.crossings.len());
    }
    Ok(())
}

fn detect(input: &Path, cup: CupZone, patch_size: usize, out_dir: &Path) -> Result<()> {
    let raw = AVMap::from_palette_image(&load_png(input)?);
    let refined = refine_av_map(&raw, &raw.vessel_mask)?;
    let skel = skeletonize(&refined.vessel_mask);
    let params = DetectParams::for_canvas(refined.width(), patch_size);
    let candidates = detect_crossing_candidates(&refined, &skel, cup, &params);
    mkdir(out_dir)?;
    let mut records = Vec::new();
    for (k, c) in candidates.iter().enumerate() {
        let name = format!("candidate_{k:03}.png");
        save_png(&c.patch.rgb, &out_dir.join(&name))?;
        records.push(serde_json::json!({
            "center": c.center,
            "origin": c.patch.origin,
            "in_cup_zone": c.in_cup_zone,
            "skeleton_degree": c.skeleton_degree,
            "support": c.support,
            "patch": name,
        }));
    }
    write_json(&out_dir.join("candidates.json"), &records)?;
    println!("{} candidates written to {}", candidates.len(), out_dir.display());
    Ok(())
}

fn train(task: Task, cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let prov = cfg.provenance().to_json();
    let ds = pipeline::prepare_dataset(cfg, &layout)?;
    for w in &ds.split.warnings {
        eprintln!("warning: {w}");
    }
    match task {
        Task::Validate => {
            let (mut m, log) = pipeline::train_validation(cfg, &ds)?;
            av_grade::mdtnet::save_submodel(&mut m, &layout.validator(), &prov)?;
            mkdir(&layout.reports())?;
            write_json(&layout.reports().join("train_validation.json"), &log)?;
            println!("validation model: best epoch {} -> {}", log.best_epoch, layout.validator().display());
        }
        Task::Grade => {
            let mut validator = match cfg.grading.source {
                pipeline::GradingSource::Predicted => Some(pipeline::load_validator(cfg, &layout)?),
                pipeline::GradingSource::Annotated => None,
            };
            let splits = pipeline::grading_splits(cfg, &ds, validator.as_mut())?;
            let trained = pipeline::train_grading_submodels(cfg, &ds, &splits, cfg.seed)?;
            let mut logs = Vec::new();
            for (i, (mut m, log)) in trained.into_iter().enumerate() {
                av_grade::mdtnet::save_submodel(&mut m, &layout.grading_submodel(i), &prov)?;
                println!("{}: best epoch {}", log.label, log.best_epoch);
                logs.push(log);
            }
            mkdir(&layout.reports())?;
            write_json(&layout.reports().join("train_grading.json"), &logs)?;
        }
    }
    Ok(())
}

fn fuse(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let ds = pipeline::Dataset::load(&layout.dataset(), &cfg.provenance())?;
    let mut validator = match cfg.grading.source {
        pipeline::GradingSource::Predicted => Some(pipeline::load_validator(cfg, &layout)?),
        pipeline::GradingSource::Annotated => None,
    };
    let splits = pipeline::grading_splits(cfg, &ds, validator.as_mut())?;
    let subs = pipeline::load_grading_submodels(cfg, &layout)?;
    let mut out = pipeline::train_grading_fusion(cfg, &ds, &splits, subs, cfg.seed)?;
    out.model.save(&layout.grader(), &cfg.provenance().to_json())?;
    mkdir(&layout.reports())?;
    write_json(&layout.reports().join("ablation.json"), &out.ablation)?;
    write_json(&layout.reports().join("train_fusion.json"), &out.fusion_log)?;
    for p in &out.ablation {
        println!("n = {}: test accuracy {:.4}, kappa {}", p.n, p.accuracy, fmt(p.kappa));
    }
    println!("ensemble -> {}", layout.grader().display());
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("undef".into(), |v| format!("{v:.4}"))
}

fn print_summary(s: &pipeline::RunSummary) {
    println!(
        "detection: precision {} recall {}",
        fmt(s.detection.precision),
        fmt(s.detection.recall)
    );
    println!("{}", s.validation.to_text());
    println!("{}", s.grading.to_text());
    for p in &s.ablation {
        println!("n = {}: accuracy {:.4} kappa {}", p.n, p.accuracy, fmt(p.kappa));
    }
    println!(
        "saliency: {}/{} correct patches concentrate heat at the crossing",
        s.saliency.concentrated, s.saliency.correct
    );
}

fn evaluate(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let ds = pipeline::Dataset::load(&layout.dataset(), &cfg.provenance())?;
    let mut validator = pipeline::load_validator(cfg, &layout)?;
    let mut grader = pipeline::load_grader(cfg, &layout)?;
    let ablation = match std::fs::read_to_string(layout.reports().join("ablation.json")) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => Vec::new(),
    };
    let mut timing = RunTiming::default();
    let summary = pipeline::evaluate_models(cfg, &layout, &ds, &mut validator, &mut grader, ablation, &mut timing)?;
    write_json(&layout.timing(), &timing)?;
    print_summary(&summary);
    Ok(())
}

/// Either checkpoint kind.
enum Model {
    Ensemble(MDTNetModel),
    Single(SubModel),
}

fn load_model(path: &Path) -> Result<Model> {
    match MDTNetModel::load(path) {
        Ok((m, _)) => Ok(Model::Ensemble(m)),
        Err(Error::Checkpoint(_)) => Ok(Model::Single(load_submodel(path)?.0)),
        Err(e) => Err(e),
    }
}

fn class_name(k: usize, i: usize) -> String {
    match k {
        2 => pipeline::VALIDITY_CLASSES[i].to_string(),
        4 => Severity::ALL[i].name().to_string(),
        _ => i.to_string(),
    }
}

fn load_patch(path: &Path, size: usize) -> Result<RgbImage> {
    let img = load_png(path)?;
    if img.dims() != (size, size) {
        return Err(Error::DimensionMismatch {
            expected: (size, size),
            actual: img.dims(),
        });
    }
    Ok(img)
}

fn grade(model: &Path, patch: &Path) -> Result<()> {
    let (k, label, probs) = match load_model(model)? {
        Model::Ensemble(mut m) => {
            let img = load_patch(patch, m.sub_models[0].input_size())?;
            let (l, p) = m.predict(&img)?;
            (m.config.num_classes, l, p)
        }
        Model::Single(mut m) => {
            let img = load_patch(patch, m.input_size())?;
            let p = av_grade::mdtnet::predict_images(&mut m, &[&img])?;
            let p = p.row(0).to_vec();
            (m.num_classes(), argmax(&p), p)
        }
    };
    let named: serde_json::Map<String, serde_json::Value> =
        probs.iter().enumerate().map(|(i, &p)| (class_name(k, i), p.into())).collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({ "label": class_name(k, label), "probabilities": named }))?
    );
    Ok(())
}

fn explain(model: &Path, patch: &Path, out: &Path, class: Option<usize>) -> Result<()> {
    let heat: Grid<f64> = match load_model(model)? {
        Model::Ensemble(mut m) => {
            let img = load_patch(patch, m.sub_models[0].input_size())?;
            let c = match class {
                Some(c) => c,
                None => m.predict(&img)?.0,
            };
            m.grad_cam(&img, c)?
        }
        Model::Single(mut m) => {
            let img = load_patch(patch, m.input_size())?;
            let c = match class {
                Some(c) => c,
                None => argmax(av_grade::mdtnet::predict_images(&mut m, &[&img])?.row(0)),
            };
            grad_cam(&mut m, &img, c)?
        }
    };
    save_png(&heat_to_rgb(&heat), out)?;
    println!("heat map -> {}", out.display());
    Ok(())
}

fn run_all(cfg: &PipelineConfig) -> Result<()> {
    let out = pipeline::run_end_to_end(cfg)?;
    for w in &out.summary.split_warnings {
        eprintln!("warning: {w}");
    }
    print_summary(&out.summary);
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}
