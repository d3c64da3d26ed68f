use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use corrflow::io::{
    generate_clip, load_checkpoint, read_dataset, read_frames, read_keypoints, read_mask, read_masks, save_checkpoint,
    write_clip, write_keypoints, write_masks,
};
use corrflow::metrics::{davis_aggregate, pck_table, score_sequence};
use corrflow::propagation::{propagate_video, Annotation, Keypoint, Propagated};
use corrflow::training::{Dataset, Trainer, Video};
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::Failure;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Run(corrflow::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn synth(cfg: &RunConfig) -> Result<(), Failure> {
    let out = cfg.require_path("out")?;
    let spec = cfg.synth_spec()?;
    let clips = cfg.usize("clips")?;
    let seed = cfg.u64("seed")?;
    create_dir(&out)?;
    (0..clips).into_par_iter().try_for_each(|i| {
        let clip = generate_clip(&spec, seed + i as u64)?;
        write_clip(&out.join(format!("clip_{i:04}")), &clip)
    })?;
    println!("wrote {clips} clips to {} (seed {seed})", out.display());
    Ok(())
}

fn load_videos(dir: &Path) -> Result<Vec<Video>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(read_dataset(dir)?
        .into_iter()
        .enumerate()
        .map(|(i, frames)| Video {
            name: format!("video {i}"),
            frames,
        })
        .collect())
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let data = cfg.require_path("data")?;
    let out = cfg.require_path("out")?;
    let tc = cfg.train_config()?;
    let every = cfg.usize("checkpoint_every")?;
    let videos = load_videos(&data)?;
    let mut trainer = match cfg.path("resume") {
        Some(path) => {
            let ck = load_checkpoint(&path)?;
            let ds = Dataset::with_palette(videos, ck.palette.clone(), &tc)?;
            Trainer::resume(tc, ds, ck)?
        }
        None => Trainer::new(tc.clone(), Dataset::prepare(videos, &tc)?)?,
    };
    create_dir(&out)?;
    let config_path = out.join("config.txt");
    fs::write(&config_path, cfg.to_text()).map_err(|e| io_err(&config_path, e))?;
    let log_path = out.join("train.jsonl");
    let log_file = File::options()
        .create(true)
        .append(cfg.path("resume").is_some())
        .write(true)
        .truncate(cfg.path("resume").is_none())
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    log::info!(
        "training {} parameters on {} videos for {} steps",
        trainer.params().parameter_count(),
        trainer.dataset().video_count(),
        trainer.config().total_steps
    );
    let snapshot = cfg.map().clone();
    trainer.run(|t, report| {
        let line = serde_json::to_string(report).expect("reports serialize");
        writeln!(log, "{line}").map_err(|e| corrflow::Error::io(&log_path, e))?;
        let done = t.steps_done();
        if done % 10 == 0 || t.finished() {
            log::info!("step {done}: loss {:.4} (p {:.3}, lr {:.2e})", report.total, report.p, report.lr);
        }
        if every > 0 && done % every == 0 && !t.finished() {
            log.flush().map_err(|e| corrflow::Error::io(&log_path, e))?;
            save_checkpoint(&out.join(format!("step_{done:07}.cflw")), &t.checkpoint(snapshot.clone()))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    let final_path = out.join("final.cflw");
    save_checkpoint(&final_path, &trainer.checkpoint(snapshot))?;
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

pub fn propagate(cfg: &RunConfig) -> Result<(), Failure> {
    let ck_path = cfg.require_path("checkpoint")?;
    let frames_dir = cfg.require_path("frames")?;
    let ann_path = cfg.require_path("annotation")?;
    let out = cfg.require_path("out")?;
    let prop = cfg.prop_config()?;
    let ck = load_checkpoint(&ck_path)?;
    let frames = read_frames(&frames_dir)?;
    let keypoint_mode = cfg.str("mode") == "keypoint";
    let annotation = if keypoint_mode {
        let points: Vec<Keypoint> = read_keypoints(&ann_path)?.into_iter().filter(|k| k.frame == 0).collect();
        Annotation::Keypoints(points)
    } else {
        Annotation::Mask(read_mask(&ann_path)?)
    };
    let result = propagate_video(&frames, &annotation, &ck.encoder, &prop)?;
    create_dir(&out)?;
    match result {
        Propagated::Masks(masks) => write_masks(&out, &masks)?,
        Propagated::Keypoints(points) => write_keypoints(&out.join("keypoints.csv"), &points)?,
    }
    println!(
        "propagated {} frames ({} mode) to {}",
        frames.len(),
        cfg.str("mode"),
        out.display()
    );
    Ok(())
}

fn has_ext(dir: &Path, ext: &str) -> bool {
    fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .any(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        })
        .unwrap_or(false)
}

/// A directory holding the files itself is one sequence; otherwise each
/// subdirectory is a sequence, using its `sub` folder when present.
fn sequences(root: &Path, sub: &str, ext: &str) -> Result<Vec<(String, PathBuf)>, Failure> {
    if !root.exists() {
        return Err(Failure::Usage(format!("{} does not exist", root.display())));
    }
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if root.is_file() || has_ext(root, ext) {
        return Ok(vec![(name(root), root.to_path_buf())]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs
        .into_iter()
        .map(|d| {
            let inner = d.join(sub);
            (name(&d), if inner.exists() { inner } else { d })
        })
        .collect())
}

fn paired(pred: &Path, gt: &Path, sub: &str, ext: &str) -> Result<Vec<(String, PathBuf, PathBuf)>, Failure> {
    let (p, g) = (sequences(pred, sub, ext)?, sequences(gt, sub, ext)?);
    if p.len() != g.len() {
        return Err(Failure::Usage(format!(
            "{} predicted sequences for {} ground-truth sequences",
            p.len(),
            g.len()
        )));
    }
    if p.len() > 1 {
        if let Some(((a, _), (b, _))) = p.iter().zip(&g).find(|((a, _), (b, _))| a != b) {
            return Err(Failure::Usage(format!("sequence {a} has no ground-truth counterpart (found {b})")));
        }
    }
    Ok(p.into_iter().zip(g).map(|((n, pp), (_, gp))| (n, pp, gp)).collect())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), Failure> {
    let pred = cfg.require_path("pred")?;
    let gt = cfg.require_path("gt")?;
    if cfg.str("mode") == "keypoint" {
        return evaluate_keypoints(cfg, &pred, &gt);
    }
    let tolerance = cfg.tolerance()?;
    let mut objects = Vec::new();
    for (name, p, g) in paired(&pred, &gt, "masks", "pgm")? {
        let preds = read_masks(&p)?;
        let gts = read_masks(&g)?;
        objects.extend(score_sequence(&name, &preds, &gts, tolerance)?);
    }
    let s = davis_aggregate(objects)?;
    println!("{:>9} {:>7} {:>9} {:>7} {:>9}", "J&F-Mean", "J-Mean", "J-Recall", "F-Mean", "F-Recall");
    println!(
        "{:>9.1} {:>7.1} {:>9.1} {:>7.1} {:>9.1}",
        100.0 * s.jf_mean,
        100.0 * s.j_mean,
        100.0 * s.j_recall,
        100.0 * s.f_mean,
        100.0 * s.f_recall
    );
    let record = json!({
        "objects": s.objects.len(),
        "jf_mean": s.jf_mean,
        "j_mean": s.j_mean,
        "j_recall": s.j_recall,
        "f_mean": s.f_mean,
        "f_recall": s.f_recall,
    });
    println!("{record}");
    Ok(())
}

fn evaluate_keypoints(cfg: &RunConfig, pred: &Path, gt: &Path) -> Result<(), Failure> {
    let alphas = cfg.alphas()?;
    let skip_first = cfg.bool("skip_first")?;
    let file = |p: &Path| if p.is_dir() { p.join("keypoints.csv") } else { p.to_path_buf() };
    // sequences are pooled by shifting frame indices past the previous one
    let (mut all_pred, mut all_gt) = (Vec::new(), Vec::new());
    let mut offset = 0;
    for (_, p, g) in paired(pred, gt, "", "csv")? {
        let keep = |k: &Keypoint| !(skip_first && k.frame == 0);
        let shift = |k: Keypoint| Keypoint {
            frame: k.frame + offset,
            ..k
        };
        let ps = read_keypoints(&file(&p))?;
        let gs = read_keypoints(&file(&g))?;
        let last = gs.iter().chain(&ps).map(|k| k.frame).max().unwrap_or(0);
        all_pred.extend(ps.into_iter().filter(keep).map(shift));
        all_gt.extend(gs.into_iter().filter(keep).map(shift));
        offset += last + 1;
    }
    let t = pck_table(&all_pred, &all_gt, &alphas, false);
    let header: Vec<String> = alphas
        .iter()
        .map(|a| {
            let label = a.to_string();
            format!("{:>7}", format!("@{}", label.strip_prefix('0').unwrap_or(&label)))
        })
        .collect();
    println!("{:<14}{}", "PCK", header.concat());
    let row = |vals: &[Option<f64>]| vals.iter().map(|&v| format!("{:>7}", pct(v))).collect::<String>();
    println!("{:<14}{}", "instance", row(&t.instance));
    println!("{:<14}{}", "max", row(&t.max));
    let record = json!({
        "alphas": t.alphas,
        "instance": t.instance,
        "max": t.max,
    });
    println!("{record}");
    Ok(())
}

pub fn verify(cfg: &RunConfig) -> Result<(), Failure> {
    let seed = cfg.u64("seed")?;
    let ck = match cfg.path("checkpoint") {
        Some(p) => Some(load_checkpoint(&p)?),
        None => None,
    };
    let checks = crate::verify::run_suite(seed, ck.as_ref());
    let mut failed = Vec::new();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(failed))
    }
}
