//! Built-in self-check suite behind `corrflow verify`.

use corrflow::attention::{full_affinity, resource_estimate, restricted_affinity, FeatureMap};
use corrflow::encoder::EncoderParams;
use corrflow::io::{generate_clip, Checkpoint, SyntheticSpec};
use corrflow::training::{gradient_check, Clip, Dataset, TrainConfig, Video};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn from_result(name: &str, r: corrflow::Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Check::new(name, passed, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, spread: f64) -> FeatureMap<f64> {
    let values = (0..h * w * c).map(|_| rng.random_range(-spread..spread)).collect();
    FeatureMap::new(h, w, c, values).expect("sizes agree")
}

fn gradients(seed: u64, checkpoint: Option<&Checkpoint>) -> corrflow::Result<(bool, String)> {
    let mut cfg = TrainConfig {
        n: 2,
        max_disparity: 2,
        palette_sample: 4000,
        seed,
        ..TrainConfig::tiny()
    };
    let params: EncoderParams<f64> = match checkpoint {
        Some(ck) => {
            cfg.encoder = ck.encoder.config().clone();
            ck.encoder.cast()
        }
        None => EncoderParams::<f32>::init(&cfg.encoder, seed)?.cast(),
    };
    let spec = SyntheticSpec {
        height: 16,
        width: 16,
        clip_len: 2,
        ..SyntheticSpec::default()
    };
    let frames = generate_clip(&spec, seed)?.frames;
    let video = Video {
        name: "check".into(),
        frames: frames.clone(),
    };
    let palette = match checkpoint {
        Some(ck) => ck.palette.clone(),
        None => Dataset::fit_palette(&[video], &cfg)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = Clip::new(
        frames,
        &palette,
        cfg.bottleneck.sample_mask(&mut rng),
        cfg.bottleneck.sample_jitter(&mut rng),
    )?;
    let report = gradient_check(&params, &clip, &cfg, 50, seed)?;
    let ok = report.max_rel_error < 1e-3;
    Ok((ok, format!("max relative error {:.2e} over {} parameters", report.max_rel_error, report.checked)))
}

fn row_sums(seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut bad_mask = 0usize;
    let trials = 200;
    for _ in 0..trials {
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let c = rng.random_range(1..6);
        let m = rng.random_range(0..5);
        let spread = rng.random_range(0.1..10.0);
        let a = random_map(&mut rng, h, w, c, spread);
        let b = random_map(&mut rng, h, w, c, spread);
        let aff = restricted_affinity(&a, &b, m, 1.0).expect("valid sizes");
        for i in 0..h {
            for j in 0..w {
                let (ws, valid) = (aff.window(i, j), aff.window_valid(i, j));
                worst = worst.max((ws.iter().sum::<f64>() - 1.0).abs());
                bad_mask += ws.iter().zip(valid).filter(|&(&x, &ok)| x < 0.0 || (!ok && x != 0.0)).count();
            }
        }
    }
    (
        worst <= 1e-6 && bad_mask == 0,
        format!("{trials} volumes, worst |sum - 1| {worst:.1e}, {bad_mask} invalid weights"),
    )
}

fn restricted_matches_full(seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, m) = (8usize, 8usize, 8usize);
    let side = 2 * m + 1;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let a = random_map(&mut rng, h, w, 4, 1.0);
        let b = random_map(&mut rng, h, w, 4, 1.0);
        let r = restricted_affinity(&a, &b, m, 1.0).expect("valid sizes");
        let f = full_affinity(&a, &b, 1.0).expect("small map");
        for i in 0..h {
            for j in 0..w {
                let win = r.window(i, j);
                for k in 0..side {
                    for l in 0..side {
                        let (y, x) = (i as isize + k as isize - m as isize, j as isize + l as isize - m as isize);
                        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                            continue;
                        }
                        let full = f[(y as usize * w + x as usize) * h * w + i * w + j];
                        worst = worst.max((win[k * side + l] - full).abs());
                    }
                }
            }
        }
    }
    (worst < 1e-6, format!("8x8, M=8, max deviation {worst:.1e}"))
}

/// Element counts for a few feature-grid sizes, plus the check that
/// restriction shrinks the 480p volume by more than 150x.
pub fn resource_table() -> (bool, String) {
    let rows = [(120usize, 214usize, 6usize), (64, 64, 6), (32, 32, 6)];
    let mut text = String::from("    cells      M  restricted       full         ratio\n");
    let mut ok = true;
    for (h, w, m) in rows {
        let e = resource_estimate(h, w, m);
        text.push_str(&format!(
            "    {:>3}x{:<3}  {m:>2}  {:>10.3e}  {:>10.3e}  {:>9.5} (1/{:.1})\n",
            h,
            w,
            e.restricted_elements as f64,
            e.full_elements as f64,
            e.ratio,
            1.0 / e.ratio
        ));
        if (h, w) == (120, 214) {
            ok &= e.full_elements > 150 * e.restricted_elements;
        }
        if (h, w) == (64, 64) {
            ok &= e.restricted_elements * 4096 == 169 * e.full_elements;
        }
    }
    (ok, text.trim_end().to_string())
}

pub fn run_suite(seed: u64, checkpoint: Option<&Checkpoint>) -> Vec<Check> {
    let mut checks = Vec::new();
    if let Some(ck) = checkpoint {
        let finite = ck.encoder.is_finite() && ck.palette.centroids().iter().flatten().all(|v| v.is_finite());
        checks.push(Check::new(
            "checkpoint values finite",
            finite,
            format!("{} parameters", ck.encoder.parameter_count()),
        ));
    }
    checks.push(Check::from_result("objective gradient", gradients(seed, checkpoint)));
    let (ok, d) = row_sums(seed);
    checks.push(Check::new("affinity rows", ok, d));
    let (ok, d) = restricted_matches_full(seed);
    checks.push(Check::new("restricted equals full", ok, d));
    let (ok, d) = resource_table();
    checks.push(Check::new("resource estimate", ok, format!("\n{d}")));
    checks
}
