use std::path::{Path, PathBuf};

use anyhow::Context;
use forma_core::checkpoint::load_model;
use forma_core::complexity::complexity as estimate;
use forma_core::data::{read_manifest, save_mask, save_prob_map, AugmentConfig, Perturbation};
use forma_core::infer::{
    evaluate_manifest, predict_image, robustness_sweep, write_robustness_csv, EvalOptions, InputMode,
};
use forma_core::loss::LossConfig;
use forma_core::train::{write_loss_curve, StepLog, TrainConfig, Trainer};
use forma_core::{Error, Forma, ModelConfig};
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| anyhow::Error::new(e).context(format!("creating {}", dir.display())))
}

fn model_config(cfg: &RunConfig) -> ModelConfig {
    ModelConfig::for_scale(cfg.scale).with_variant(cfg.variant)
}

fn mode(native: bool) -> InputMode {
    if native {
        InputMode::Native
    } else {
        InputMode::Resize
    }
}

/// The checkpointed model, or a seeded random one when no checkpoint is configured.
fn load_or_init(cfg: &RunConfig) -> anyhow::Result<Forma> {
    match &cfg.checkpoint {
        Some(p) => Ok(load_model(p)?),
        None => {
            warn!("no checkpoint given; using randomly initialized weights (seed {})", cfg.seed);
            Ok(Forma::new(model_config(cfg), cfg.seed)?)
        }
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    error: &'a str,
    step: u64,
    config: &'a TrainConfig,
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> anyhow::Result<()> {
    ensure_dir(&cfg.out)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::resume(p)?;
            t.cfg.steps = cfg.total_steps();
            info!("resumed {} at step {}", p.display(), t.steps_done());
            t
        }
        None => {
            let tc = TrainConfig {
                samples: cfg.samples,
                batch_size: cfg.batch_size,
                steps: cfg.total_steps(),
                lr: cfg.lr,
                seed: cfg.seed,
                augment: cfg.augment.then(AugmentConfig::default),
                loss: LossConfig::for_variant(cfg.variant),
                tau: cfg.tau,
                ..TrainConfig::default()
            };
            Trainer::new(model_config(cfg), tc)?
        }
    };
    let spe = trainer.cfg.steps_per_epoch();
    let mut epoch_f1 = Vec::new();
    let result = trainer.run(|l: &StepLog| {
        epoch_f1.push(l.f1);
        if let Some(loss) = l.epoch_loss {
            let f1 = epoch_f1.iter().sum::<f64>() / epoch_f1.len() as f64;
            info!("epoch {}: loss {loss:.5} lr {:e} f1 {f1:.4}", l.epoch, l.lr);
            epoch_f1.clear();
        }
        false
    });
    let logs = match result {
        Ok(l) => l,
        Err(e) => {
            if let Error::NonFinite(msg) = &e {
                let dump = cfg.out.join("nan_dump.json");
                let body = NanDump {
                    error: msg,
                    step: trainer.steps_done() + 1,
                    config: &trainer.cfg,
                };
                std::fs::write(&dump, serde_json::to_vec_pretty(&body)?)
                    .with_context(|| format!("writing {}", dump.display()))?;
                eprintln!("diagnostics written to {}", dump.display());
            }
            return Err(e.into());
        }
    };
    let ckpt = cfg.out.join("checkpoint.ckpt");
    trainer.save(&ckpt)?;
    let prior = resume.map(|_| trainer.steps_done() as usize - logs.len()).unwrap_or(0);
    let curve = cfg.out.join("loss_curve.csv");
    write_loss_curve(&curve, &logs)?;
    if let Some(last) = logs.last() {
        println!(
            "trained {} steps ({} per epoch) from step {prior}: final loss {:.5}, f1 {:.4}, lr {:e}",
            logs.len(),
            spe,
            last.loss,
            last.f1,
            trainer.opt.lr
        );
    }
    println!("checkpoint {}\nloss curve {}", ckpt.display(), curve.display());
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

pub fn infer(cfg: &RunConfig, images: &[PathBuf], native: bool) -> anyhow::Result<()> {
    let model = load_or_init(cfg)?;
    ensure_dir(&cfg.out)?;
    for path in images {
        let image = forma_core::data::load_image(path)?;
        let pred = predict_image(&model, &image, mode(native), cfg.tau)?;
        let name = stem(path);
        let prob = cfg.out.join(format!("{name}_prob.pgm"));
        let mask = cfg.out.join(format!("{name}_mask.png"));
        save_prob_map(&prob, &pred.prob)?;
        save_mask(&mask, &pred.mask)?;
        println!("{} -> {} {}", path.display(), prob.display(), mask.display());
    }
    Ok(())
}

fn manifest_entries(cfg: &RunConfig) -> anyhow::Result<Vec<forma_core::data::ManifestEntry>> {
    let path = cfg.manifest.as_ref().ok_or_else(|| usage("--manifest is required"))?;
    Ok(read_manifest(path)?)
}

pub fn eval(cfg: &RunConfig, native: bool) -> anyhow::Result<()> {
    let entries = manifest_entries(cfg)?;
    let needs_model = entries.iter().any(|e| e.prob_path.is_none());
    let model = if needs_model { Some(load_or_init(cfg)?) } else { None };
    let opts = EvalOptions {
        tau: cfg.tau,
        mode: mode(native),
        seed: cfg.seed,
    };
    let report = evaluate_manifest(model.as_ref(), &entries, &opts, None)?;
    ensure_dir(&cfg.out)?;
    let table = report.table();
    let txt = cfg.out.join("eval.txt");
    std::fs::write(&txt, &table).with_context(|| format!("writing {}", txt.display()))?;
    report.write_jsonl(&cfg.out.join("eval.jsonl"))?;
    if report.skipped > 0 {
        warn!("{} manifest entries skipped", report.skipped);
    }
    print!("{table}");
    Ok(())
}

fn parse_size(s: &str) -> anyhow::Result<(usize, usize)> {
    let bad = || usage(format!("size {s:?} is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

pub fn complexity(cfg: &RunConfig, sizes: &[String], write: bool) -> anyhow::Result<()> {
    let mc = model_config(cfg);
    let sizes: Vec<(usize, usize)> = if sizes.is_empty() {
        vec![mc.input_size]
    } else {
        sizes.iter().map(|s| parse_size(s)).collect::<anyhow::Result<_>>()?
    };
    let mut reports = Vec::new();
    for (h, w) in sizes {
        let r = estimate(&mc, h, w, cfg.flops_per_mac)?;
        print!("{}", r.table());
        reports.push(r);
    }
    if reports.len() > 1 {
        let base = reports[0].flops as f64;
        for r in &reports[1..] {
            println!(
                "FLOPs {}x{} / {}x{} = {:.4}",
                r.height,
                r.width,
                reports[0].height,
                reports[0].width,
                r.flops as f64 / base
            );
        }
    }
    if write {
        ensure_dir(&cfg.out)?;
        let path = cfg.out.join("complexity.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&reports)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// `kind:s1,s2,...` (or `kind=...`) into validated perturbations.
fn parse_grid(specs: &[String]) -> anyhow::Result<Vec<Perturbation>> {
    let mut out = Vec::new();
    for spec in specs {
        let (kind, values) = spec
            .split_once([':', '='])
            .ok_or_else(|| usage(format!("grid entry {spec:?} is not kind:s1,s2,...")))?;
        let kind = kind.trim().parse()?;
        for v in values.split(',').filter(|v| !v.trim().is_empty()) {
            let s: f64 = v
                .trim()
                .parse()
                .map_err(|_| usage(format!("strength {v:?} in {spec:?} is not a number")))?;
            out.push(Perturbation::new(kind, s).map_err(|e| usage(e.to_string()))?);
        }
    }
    Ok(out)
}

pub fn robustness(cfg: &RunConfig, grid: &[String], native: bool) -> anyhow::Result<()> {
    let grid = parse_grid(grid)?;
    let entries = manifest_entries(cfg)?;
    ensure_dir(&cfg.out)?;
    let path = cfg.out.join("robustness.csv");
    let rows = if grid.is_empty() {
        Vec::new()
    } else {
        let model = load_or_init(cfg)?;
        let opts = EvalOptions {
            tau: cfg.tau,
            mode: mode(native),
            seed: cfg.seed,
        };
        robustness_sweep(&model, &entries, &grid, &opts)?
    };
    write_robustness_csv(&path, &rows)?;
    for r in &rows {
        println!("{},{},{:.4},{:.4}", r.perturbation.kind, r.perturbation.strength, r.f1, r.iou);
    }
    println!("wrote {}", path.display());
    Ok(())
}
