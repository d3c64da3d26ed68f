//! Acceptance harness: one PASS/FAIL line per criterion, tolerances pinned
//! below. Runs with `cargo test --test acceptance`; the long desk-scale
//! training run dominates the runtime.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use corrflow::attention::{full_affinity, resource_estimate, restricted_affinity, FeatureMap};
use corrflow::colour::Frame;
use corrflow::encoder::EncoderParams;
use corrflow::io::{encode_checkpoint, generate_clip, read_masks, SyntheticSpec};
use corrflow::metrics::{contour_f, davis_aggregate, pck_max, pck_table, region_j, score_sequence, ObjectFrames};
use corrflow::propagation::{propagate_video, Annotation, Keypoint, MaskAnnotation, Propagated, PropagationConfig};
use corrflow::training::{gradient_check, learning_rate, ss_probability, Clip, Dataset, StepReport, TrainConfig, Trainer, Video};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-3;
const GRAD_SECONDS: f64 = 60.0;
const ROW_SUM_TOL: f64 = 1e-6;
const EQUIV_TOL: f64 = 1e-6;
const ACCOUNTING_TOL: f64 = 1e-6;
const LOSS_RATIO: f64 = 0.70;
const DESK_SECONDS: f64 = 600.0;
const HELD_OUT: u64 = 20;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.failed += usize::from(!ok);
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, spread: f64) -> FeatureMap<f64> {
    let v = (0..h * w * c).map(|_| rng.random_range(-spread..spread)).collect();
    FeatureMap::new(h, w, c, v).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gradient_integrity(r: &mut Report) {
    let t0 = Instant::now();
    let cfg = TrainConfig {
        n: 2,
        max_disparity: 2,
        palette_sample: 4000,
        ..TrainConfig::tiny()
    };
    let spec = SyntheticSpec {
        height: 16,
        width: 16,
        clip_len: 2,
        ..SyntheticSpec::default()
    };
    let frames = generate_clip(&spec, 3).unwrap().frames;
    let video = Video {
        name: "g".into(),
        frames: frames.clone(),
    };
    let palette = Dataset::fit_palette(&[video], &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clip = Clip::new(frames, &palette, cfg.bottleneck.sample_mask(&mut rng), cfg.bottleneck.sample_jitter(&mut rng)).unwrap();
    let params: EncoderParams<f64> = EncoderParams::<f32>::init(&cfg.encoder, 3).unwrap().cast();
    let rep = gradient_check(&params, &clip, &cfg, 64, 3).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    r.line(
        "gradient integrity",
        rep.max_rel_error < GRAD_TOL && rep.checked >= 50 && secs < GRAD_SECONDS,
        format!("max rel error {:.2e} over {} parameters in {secs:.1}s (< {GRAD_TOL:e}, < {GRAD_SECONDS}s)", rep.max_rel_error, rep.checked),
    );
}

fn affinity_invariants(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut negative, mut leaked) = (0f64, 0usize, 0usize);
    for _ in 0..1000 {
        let (h, w, c) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..9));
        let m = rng.random_range(0..7);
        let spread = rng.random_range(0.01..20.0);
        let a = random_map(&mut rng, h, w, c, spread);
        let b = random_map(&mut rng, h, w, c, spread);
        let t = rng.random_range(0.05..5.0);
        let aff = restricted_affinity(&a, &b, m, t).unwrap();
        for i in 0..h {
            for j in 0..w {
                let win = aff.window(i, j);
                worst = worst.max((win.iter().sum::<f64>() - 1.0).abs());
                for (&x, &ok) in win.iter().zip(aff.window_valid(i, j)) {
                    negative += usize::from(x < 0.0);
                    leaked += usize::from(!ok && x != 0.0);
                }
            }
        }
    }
    r.line(
        "affinity invariants",
        worst <= ROW_SUM_TOL && negative == 0 && leaked == 0,
        format!("1000 pairs, worst |row sum - 1| {worst:.1e}, {negative} negative, {leaked} nonzero out-of-bounds"),
    );
}

fn restricted_equals_full(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (h, w, m) = (8usize, 8usize, 8usize);
    let side = 2 * m + 1;
    let mut worst = 0f64;
    for _ in 0..20 {
        let a = random_map(&mut rng, h, w, 6, 1.5);
        let b = random_map(&mut rng, h, w, 6, 1.5);
        let res = restricted_affinity(&a, &b, m, 1.0).unwrap();
        let full = full_affinity(&a, &b, 1.0).unwrap();
        for i in 0..h {
            for j in 0..w {
                for y in 0..h {
                    for x in 0..w {
                        let o = (y + m - i) * side + (x + m - j);
                        worst = worst.max((res.window(i, j)[o] - full[(y * w + x) * h * w + i * w + j]).abs());
                    }
                }
            }
        }
    }
    r.line("restricted equals full", worst < EQUIV_TOL, format!("8x8, M=8, max abs deviation {worst:.1e}"));
}

/// One-hot feature per cell, so every cell is its own unique match.
fn unique(h: usize, w: usize, at: impl Fn(isize, isize) -> Option<usize>) -> FeatureMap<f64> {
    let n = h * w;
    let mut v = vec![0.0; n * n];
    for i in 0..h {
        for j in 0..w {
            if let Some(id) = at(i as isize, j as isize) {
                v[(i * w + j) * n + id] = 1.0;
            }
        }
    }
    FeatureMap::new(h, w, n, v).unwrap()
}

fn translation_oracle(r: &mut Report) {
    let (h, w) = (10usize, 10usize);
    let (mut cells, mut hits) = (0usize, 0usize);
    for m in 1..=6isize {
        for dy in -m..=m {
            for dx in -m..=m {
                let inside = |i: isize, j: isize| (0..h as isize).contains(&i) && (0..w as isize).contains(&j);
                let id = |i: isize, j: isize| inside(i, j).then(|| i as usize * w + j as usize);
                let reference = unique(h, w, id);
                // target cell (i, j) shows reference cell (i + dy, j + dx)
                let target = unique(h, w, |i, j| id(i + dy, j + dx));
                let aff = restricted_affinity(&reference, &target, m as usize, 1.0).unwrap();
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        if inside(i + dy, j + dx) {
                            cells += 1;
                            hits += usize::from(aff.argmax_offset(i as usize, j as usize) == (dy, dx));
                        }
                    }
                }
            }
        }
    }
    r.line(
        "translation oracle",
        hits == cells,
        format!("{hits}/{cells} interior cells recover (dy, dx) for M = 1..6"),
    );
}

fn desk_data(count: u64, first_seed: u64) -> Vec<Video> {
    (0..count)
        .map(|i| Video {
            name: format!("clip {i}"),
            frames: generate_clip(&SyntheticSpec::default(), first_seed + i).unwrap().frames,
        })
        .collect()
}

fn accounting(r: &mut Report, reports: &[StepReport], cfg: &TrainConfig) {
    let worst = reports
        .iter()
        .map(|s| (s.total - StepReport::weighted_total(&s.l1, &s.l2, cfg.alpha1, cfg.alpha2)).abs())
        .fold(0.0, f64::max);
    let t = 1_000_000;
    let ends = ss_probability(0, t, 0.9, 0.6) == 0.9 && ss_probability(t, t, 0.9, 0.6) == 0.6;
    let base = 2e-4;
    let halvings = [(0, 1.0), (399_999, 1.0), (400_000, 0.5), (599_999, 0.5), (600_000, 0.25), (799_999, 0.25), (800_000, 0.125), (t, 0.125)]
        .iter()
        .all(|&(s, f)| learning_rate(s, t, base) == base * f);
    r.line(
        "objective accounting",
        worst <= ACCOUNTING_TOL && ends && halvings,
        format!(
            "{} steps, worst |total - weighted sum| {worst:.1e}; p(0)=0.9, p(T)=0.6 {}; lr halvings at 0.4/0.6/0.8 T {}",
            reports.len(),
            if ends { "exact" } else { "off" },
            if halvings { "exact" } else { "off" }
        ),
    );
}

fn desk_learning(r: &mut Report) -> (EncoderParams<f32>, TrainConfig) {
    let cfg = TrainConfig::tiny();
    let t0 = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (trainer, reports) = pool.install(|| {
        let ds = Dataset::prepare(desk_data(100, 0), &cfg).unwrap();
        let mut tr = Trainer::new(cfg.clone(), ds).unwrap();
        let mut reports = Vec::new();
        tr.run(|_, s| {
            reports.push(s.clone());
            Ok(())
        })
        .unwrap();
        (tr, reports)
    });
    let secs = t0.elapsed().as_secs_f64();
    let totals: Vec<f64> = reports.iter().map(|s| s.total).collect();
    let (first, last) = (mean(&totals[..50]), mean(&totals[totals.len() - 50..]));
    let per_term = last / ((cfg.alpha1 + cfg.alpha2) * (cfg.n - 1) as f64);
    let ln16 = 16f64.ln();
    r.line(
        "desk-scale learning",
        last <= LOSS_RATIO * first && per_term < ln16 && secs < DESK_SECONDS,
        format!(
            "200 steps on 100 clips: first-50 mean {first:.3}, last-50 mean {last:.3} (ratio {:.3} <= {LOSS_RATIO}); \
             per weighted term {per_term:.3} < ln 16 = {ln16:.4}; {secs:.1}s single thread",
            last / first
        ),
    );
    accounting(r, &reports, &cfg);
    (trainer.params().clone(), cfg)
}

/// Hard nearest neighbour on raw 4x4 RGB pixel blocks inside the same
/// window, carrying hard labels frame to frame.
fn raw_pixel_nn(frames: &[Frame], first: &MaskAnnotation, m: isize) -> Vec<MaskAnnotation> {
    let (h, w) = (first.height(), first.width());
    let (ch, cw) = ((h / 4) as isize, (w / 4) as isize);
    let block = |f: &Frame, i: isize, j: isize| -> Vec<f32> {
        (0..16).flat_map(|p| f.pixel(i as usize * 4 + p / 4, j as usize * 4 + p % 4)).collect()
    };
    let mut labels: Vec<u8> = (0..ch * cw).map(|c| first.id((c / cw) as usize * 4 + 2, (c % cw) as usize * 4 + 2)).collect();
    let mut out = vec![first.clone()];
    for t in 1..frames.len() {
        let mut next = vec![0u8; labels.len()];
        for i in 0..ch {
            for j in 0..cw {
                let tgt = block(&frames[t], i, j);
                let mut best = (f32::INFINITY, 0);
                for y in (i - m).max(0)..=(i + m).min(ch - 1) {
                    for x in (j - m).max(0)..=(j + m).min(cw - 1) {
                        let d: f32 = block(&frames[t - 1], y, x).iter().zip(&tgt).map(|(a, b)| (a - b) * (a - b)).sum();
                        if d < best.0 {
                            best = (d, (y * cw + x) as usize);
                        }
                    }
                }
                next[(i * cw + j) as usize] = labels[best.1];
            }
        }
        labels = next;
        out.push(MaskAnnotation::from_fn(h, w, |y, x| labels[(y / 4) * cw as usize + x / 4]).unwrap());
    }
    out
}

fn sequence_j(name: &str, preds: &[MaskAnnotation], gts: &[MaskAnnotation]) -> Vec<ObjectFrames> {
    score_sequence(name, preds, gts, None).unwrap()
}

fn propagation_quality(r: &mut Report, params: &EncoderParams<f32>, cfg: &TrainConfig) {
    let prop = PropagationConfig {
        max_disparity: cfg.max_disparity,
        ..PropagationConfig::default()
    };
    let (mut trained, mut identity, mut raw) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..HELD_OUT {
        let clip = generate_clip(&SyntheticSpec::default(), 10_000 + s).unwrap();
        let name = format!("held-out {s}");
        let Propagated::Masks(p) = propagate_video(&clip.frames, &Annotation::Mask(clip.masks[0].clone()), params, &prop).unwrap() else {
            unreachable!("mask annotation yields masks")
        };
        trained.extend(sequence_j(&name, &p, &clip.masks));
        identity.extend(sequence_j(&name, &vec![clip.masks[0].clone(); clip.masks.len()], &clip.masks));
        raw.extend(sequence_j(&name, &raw_pixel_nn(&clip.frames, &clip.masks[0], cfg.max_disparity as isize), &clip.masks));
    }
    let j = |o: Vec<ObjectFrames>| davis_aggregate(o).unwrap().j_mean;
    let (jt, ji, jr) = (j(trained), j(identity), j(raw));
    r.line(
        "propagation quality",
        jt > ji && jt > jr,
        format!("{HELD_OUT} held-out clips, J-mean trained {jt:.3}, identity {ji:.3}, raw-pixel nearest neighbour {jr:.3}"),
    );
}

fn resource_accounting(r: &mut Report) {
    let e = resource_estimate(120, 214, 6);
    let ok = e.restricted_elements == 4_339_920
        && e.full_elements == 659_462_400
        && e.full_elements > 150 * e.restricted_elements
        && resource_estimate(64, 64, 6).restricted_elements * 4096 == 169 * resource_estimate(64, 64, 6).full_elements;
    r.line(
        "resource accounting",
        ok,
        format!(
            "480p at stride 4, M=6: restricted {:.3e} vs full {:.3e} elements ({:.0}x fewer)",
            e.restricted_elements as f64,
            e.full_elements as f64,
            1.0 / e.ratio
        ),
    );
}

fn pixels(h: usize, w: usize, on: &[(usize, usize)]) -> MaskAnnotation {
    MaskAnnotation::from_fn(h, w, |y, x| u8::from(on.contains(&(y, x)))).unwrap()
}

fn rect(y0: usize, x0: usize) -> MaskAnnotation {
    MaskAnnotation::from_fn(32, 32, |y, x| u8::from((y0..y0 + 10).contains(&y) && (x0..x0 + 10).contains(&x))).unwrap()
}

fn kp(frame: usize, id: usize, x: f64, y: f64) -> Keypoint {
    Keypoint {
        frame,
        id,
        x,
        y,
        visible: true,
    }
}

fn metric_suite(r: &mut Report) {
    let mut bad = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            bad.push(name.to_string());
        }
    };
    let a = pixels(1, 3, &[(0, 0), (0, 1)]);
    let b = pixels(1, 3, &[(0, 1), (0, 2)]);
    check("J identical", region_j(&a, &a, 1).unwrap() == 1.0);
    check("J one third", region_j(&a, &b, 1).unwrap() == 1.0 / 3.0);
    check("J disjoint", region_j(&pixels(1, 3, &[(0, 0)]), &pixels(1, 3, &[(0, 2)]), 1).unwrap() == 0.0);
    check("J both empty", region_j(&pixels(2, 2, &[]), &pixels(2, 2, &[]), 1).unwrap() == 1.0);
    check("F identical", contour_f(&rect(5, 5), &rect(5, 5), 1, 1).unwrap() == 1.0);
    check("F shift within tolerance", contour_f(&rect(5, 6), &rect(5, 5), 1, 1).unwrap() == 1.0);
    check("F shift beyond tolerance", contour_f(&rect(20, 20), &rect(2, 2), 1, 2).unwrap() == 0.0);

    let gts = [kp(1, 0, 0.0, 0.0), kp(1, 1, 30.0, 40.0)];
    check("PCK exact", pck_table(&gts, &gts, &[0.1, 0.2], false).instance == vec![Some(1.0), Some(1.0)]);
    // bbox diagonal 50: 7.5 px is 0.15 of it
    let preds = [kp(1, 0, 7.5, 0.0), kp(1, 1, 30.0, 40.0)];
    check("PCK one of two", pck_table(&preds, &gts, &[0.1, 0.2], false).instance == vec![Some(0.5), Some(1.0)]);
    let at = [kp(1, 0, 5.0, 0.0), kp(1, 1, 30.0, 40.0)];
    check("PCK strict", pck_table(&at, &gts, &[0.1], false).instance == vec![Some(0.5)]);
    let g = [kp(0, 0, 10.0, 10.0)];
    check("PCKmax within", pck_max(&[kp(0, 0, 14.0, 10.0)], &g, 0.1, 40.0, 40.0) == Some(1.0));
    check("PCKmax beyond", pck_max(&[kp(0, 0, 14.01, 10.0)], &g, 0.1, 40.0, 40.0) == Some(0.0));
    check("PCKmax alpha 0", pck_max(&[kp(0, 0, 10.0, 10.0)], &g, 0.0, 40.0, 40.0) == Some(1.0) && pck_max(&[kp(0, 0, 10.5, 10.0)], &g, 0.0, 40.0, 40.0) == Some(0.0));
    check("PCK none visible", pck_table(&[], &[Keypoint { visible: false, ..g[0] }], &[0.1], false).instance == vec![None]);

    let constant = |object| ObjectFrames {
        sequence: "s".into(),
        object,
        j: vec![1.0, 0.477, 0.477, 0.477],
        f: vec![1.0, 0.513, 0.513, 0.513],
    };
    let s = davis_aggregate(vec![constant(1), constant(2)]).unwrap();
    let table = (s.jf_mean * 1000.0).round() == 495.0 && (s.j_mean - 0.477).abs() < 1e-12 && (s.f_mean - 0.513).abs() < 1e-12;
    check("J&F 49.5", table);
    check("recall", s.j_recall == 0.0 && s.f_recall == 1.0);
    r.line(
        "metric suite",
        bad.is_empty(),
        if bad.is_empty() {
            format!("all examples exact; J&F-Mean {:.1} from 47.7 / 51.3", 100.0 * s.jf_mean)
        } else {
            format!("failed: {}", bad.join(", "))
        },
    );
}

fn davis_identity(r: &mut Report) {
    let Some(root) = std::env::var_os("CORRFLOW_DAVIS_ROOT").map(PathBuf::from) else {
        println!("SKIP DAVIS identity baseline: CORRFLOW_DAVIS_ROOT not set");
        return;
    };
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root).unwrap().filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let mut objects = Vec::new();
    for d in &dirs {
        let masks_dir = if d.join("masks").is_dir() { d.join("masks") } else { d.clone() };
        let gts = read_masks(&masks_dir).unwrap();
        let copies = vec![gts[0].clone(); gts.len()];
        objects.extend(score_sequence(&d.display().to_string(), &copies, &gts, None).unwrap());
    }
    let s = davis_aggregate(objects).unwrap();
    let (j, f) = (100.0 * s.j_mean, 100.0 * s.f_mean);
    r.line(
        "DAVIS identity baseline",
        (j - 22.1).abs() <= 1.5 && (f - 23.6).abs() <= 1.5,
        format!("{} sequences: J-mean {j:.1} (22.1 +- 1.5), F-mean {f:.1} (23.6 +- 1.5)", dirs.len()),
    );
}

fn determinism(r: &mut Report) {
    let cfg = TrainConfig {
        total_steps: 4,
        batch_size: 3,
        palette_sample: 5000,
        ..TrainConfig::tiny()
    };
    let run = || {
        let ds = Dataset::prepare(desk_data(6, 500), &cfg).unwrap();
        let mut tr = Trainer::new(cfg.clone(), ds).unwrap();
        tr.run(|_, _| Ok(())).unwrap();
        let bytes = encode_checkpoint(&tr.checkpoint(BTreeMap::new()));
        let clip = generate_clip(&SyntheticSpec::default(), 900).unwrap();
        let out = propagate_video(&clip.frames, &Annotation::Mask(clip.masks[0].clone()), tr.params(), &PropagationConfig::default()).unwrap();
        (bytes, out)
    };
    let (a, b) = (run(), run());
    r.line(
        "determinism",
        a == b,
        format!("two runs: checkpoints {} bytes {}, propagation {}", a.0.len(), if a.0 == b.0 { "identical" } else { "differ" }, if a.1 == b.1 { "identical" } else { "differs" }),
    );
}

fn main() {
    let mut r = Report { failed: 0 };
    gradient_integrity(&mut r);
    affinity_invariants(&mut r);
    restricted_equals_full(&mut r);
    translation_oracle(&mut r);
    let (params, cfg) = desk_learning(&mut r);
    propagation_quality(&mut r, &params, &cfg);
    resource_accounting(&mut r);
    metric_suite(&mut r);
    davis_identity(&mut r);
    determinism(&mut r);
    println!("{} criteria failed", r.failed);
}
