//! Flat `key=value` run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use corrflow::colour::BottleneckConfig;
use corrflow::encoder::{EncoderConfig, NormMode};
use corrflow::io::SyntheticSpec;
use corrflow::propagation::PropagationConfig;
use corrflow::training::TrainConfig;
use corrflow::FEATURE_STRIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Tiny,
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(ConfigError(format!("preset must be paper or tiny, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Res<T> = Result<T, ConfigError>;

/// Subcommands a key applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    Synth,
    Train,
    Propagate,
    Evaluate,
    Verify,
}

pub struct KeyInfo {
    pub name: &'static str,
    pub scopes: &'static [Scope],
    /// Value taken from the published training setup.
    pub published: bool,
    pub help: &'static str,
}

const fn key(name: &'static str, scopes: &'static [Scope], published: bool, help: &'static str) -> KeyInfo {
    KeyInfo {
        name,
        scopes,
        published,
        help,
    }
}

use Scope::*;

const TRAINING: &[Scope] = &[Train];
const MODEL: &[Scope] = &[Train, Propagate, Synth];

pub static KEYS: &[KeyInfo] = &[
    key("preset", &[All], false, "default set: paper or tiny"),
    key("seed", &[Synth, Train, Verify], false, "random seed"),
    key("out", &[Synth, Train, Propagate], false, "output directory"),
    key("data", TRAINING, false, "dataset directory of clips holding frames/"),
    key("resume", TRAINING, false, "checkpoint to continue from"),
    key("checkpoint_every", TRAINING, false, "steps between checkpoints, 0 for final only"),
    key("n", TRAINING, true, "frames per training clip"),
    key("max_disparity", MODEL, true, "attention window radius M in feature cells"),
    key("alpha1", TRAINING, true, "forward loss weight"),
    key("alpha2", TRAINING, true, "backward loss weight"),
    key("ss_start", TRAINING, true, "initial ground-truth reference probability"),
    key("ss_end", TRAINING, true, "final ground-truth reference probability"),
    key("total_steps", TRAINING, true, "optimizer steps"),
    key("lr", TRAINING, true, "base learning rate, halved at 40/60/80% of the run"),
    key("batch_size", TRAINING, true, "clips per step"),
    key("temperature", TRAINING, false, "affinity softmax temperature"),
    key("l2_normalize", TRAINING, false, "normalize features before the affinity"),
    key("temporal_stride", TRAINING, false, "frame gap inside a clip"),
    key("palette_sample", TRAINING, true, "pixels sampled to fit the 16-colour palette"),
    key("ce_eps", TRAINING, false, "epsilon inside the cross-entropy log"),
    key("cycle_from_prediction", TRAINING, false, "start the backward path from the last prediction"),
    key("drop_probs", TRAINING, false, "probabilities of dropping 0,1,2 colour channels"),
    key("jitter", TRAINING, false, "brightness/contrast/saturation jitter range"),
    key("per_clip_dropout", TRAINING, false, "share one dropout draw across the clip"),
    key("per_frame_jitter", TRAINING, false, "draw jitter for every frame"),
    key("encoder_widths", TRAINING, true, "channel widths of the five encoder stages"),
    key("norm", TRAINING, false, "normalization mode: batch or frozen"),
    key("adam_beta1", TRAINING, false, "Adam first-moment decay"),
    key("adam_beta2", TRAINING, false, "Adam second-moment decay"),
    key("adam_eps", TRAINING, false, "Adam denominator epsilon"),
    key("clips", &[Synth], false, "number of clips to generate"),
    key("height", &[Synth], false, "canvas height in pixels"),
    key("width", &[Synth], false, "canvas width in pixels"),
    key("patches", &[Synth], false, "moving patches per clip"),
    key("max_speed", &[Synth], false, "velocity bound per axis, pixels per frame"),
    key("clip_len", &[Synth], false, "frames per clip"),
    key("background_texture", &[Synth], false, "texture the static background"),
    key("checkpoint", &[Propagate, Verify], false, "trained checkpoint"),
    key("frames", &[Propagate], false, "directory of input frames"),
    key("annotation", &[Propagate], false, "first-frame mask (PGM) or keypoint CSV"),
    key("mode", &[Propagate, Evaluate], false, "mask or keypoint"),
    key("prop_temperature", &[Propagate], false, "affinity temperature at inference"),
    key("prop_l2_normalize", &[Propagate], false, "normalize features at inference"),
    key("pred", &[Evaluate], false, "predicted masks or keypoints"),
    key("gt", &[Evaluate], false, "ground-truth masks or keypoints"),
    key("alphas", &[Evaluate], true, "PCK thresholds"),
    key("tolerance", &[Evaluate], false, "boundary tolerance in pixels, or auto"),
    key("skip_first", &[Evaluate], false, "exclude the given first frame from scores"),
];

pub fn key_info(name: &str) -> Option<&'static KeyInfo> {
    KEYS.iter().find(|k| k.name == name)
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn put(map: &mut BTreeMap<String, String>, k: &str, v: impl fmt::Display) {
    map.insert(k.to_string(), v.to_string());
}

/// Default values for `preset`.
pub fn defaults(preset: Preset) -> BTreeMap<String, String> {
    let t = match preset {
        Preset::Paper => TrainConfig::paper(),
        Preset::Tiny => TrainConfig::tiny(),
    };
    let s = SyntheticSpec::default();
    let p = PropagationConfig::default();
    let mut m = BTreeMap::new();
    put(&mut m, "preset", if preset == Preset::Paper { "paper" } else { "tiny" });
    put(&mut m, "seed", t.seed);
    for k in ["out", "data", "resume", "checkpoint", "frames", "annotation", "pred", "gt"] {
        put(&mut m, k, "");
    }
    put(&mut m, "checkpoint_every", 0);
    put(&mut m, "n", t.n);
    put(&mut m, "max_disparity", t.max_disparity);
    put(&mut m, "alpha1", t.alpha1);
    put(&mut m, "alpha2", t.alpha2);
    put(&mut m, "ss_start", t.ss_start);
    put(&mut m, "ss_end", t.ss_end);
    put(&mut m, "total_steps", t.total_steps);
    put(&mut m, "lr", t.lr);
    put(&mut m, "batch_size", t.batch_size);
    put(&mut m, "temperature", t.temperature);
    put(&mut m, "l2_normalize", t.l2_normalize);
    put(&mut m, "temporal_stride", t.temporal_stride);
    put(&mut m, "palette_sample", t.palette_sample);
    put(&mut m, "ce_eps", t.ce_eps);
    put(&mut m, "cycle_from_prediction", t.cycle_from_prediction);
    put(&mut m, "drop_probs", join(&t.bottleneck.drop_count_probs));
    put(&mut m, "jitter", t.bottleneck.jitter);
    put(&mut m, "per_clip_dropout", t.bottleneck.per_clip_dropout);
    put(&mut m, "per_frame_jitter", t.bottleneck.per_frame_jitter);
    put(&mut m, "encoder_widths", join(&t.encoder.widths));
    put(&mut m, "norm", t.encoder.norm.as_str());
    put(&mut m, "adam_beta1", t.adam.beta1);
    put(&mut m, "adam_beta2", t.adam.beta2);
    put(&mut m, "adam_eps", t.adam.eps);
    put(&mut m, "clips", 100);
    put(&mut m, "height", s.height);
    put(&mut m, "width", s.width);
    put(&mut m, "patches", s.patches);
    put(&mut m, "max_speed", s.max_speed);
    put(&mut m, "clip_len", s.clip_len);
    put(&mut m, "background_texture", s.background_texture);
    put(&mut m, "mode", "mask");
    put(&mut m, "prop_temperature", p.temperature);
    put(&mut m, "prop_l2_normalize", p.l2_normalize);
    put(&mut m, "alphas", "0.1,0.2");
    put(&mut m, "tolerance", "auto");
    put(&mut m, "skip_first", true);
    debug_assert!(m.keys().all(|k| key_info(k).is_some()) && m.len() == KEYS.len());
    m
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_text(text: &str) -> Res<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError(format!("line {}: expected key=value, got {line:?}", i + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses `--key value` and `--key=value` pairs.
pub fn parse_flags(args: &[String]) -> Res<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            return Err(ConfigError(format!("expected --key value, got {arg:?}")));
        };
        let (k, v) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| ConfigError(format!("--{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        out.push((k.replace('-', "_"), v));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Applies `assignments` in order over the defaults of the preset they
    /// select (the last `preset` assignment wins, `paper` otherwise).
    pub fn from_assignments(assignments: &[(String, String)]) -> Res<Self> {
        for (k, _) in assignments {
            if key_info(k).is_none() {
                return Err(ConfigError(format!("unknown config key {k:?}")));
            }
        }
        let preset = match assignments.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Paper,
        };
        let mut values = defaults(preset);
        for (k, v) in assignments {
            values.insert(k.clone(), v.clone());
        }
        let cfg = RunConfig { values };
        cfg.check()?;
        Ok(cfg)
    }

    /// Config file (if any) first, then command-line overrides.
    pub fn load(file: Option<&Path>, flags: &[String]) -> Res<Self> {
        let mut assignments = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
                parse_text(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
            }
            None => Vec::new(),
        };
        assignments.extend(parse_flags(flags)?);
        Self::from_assignments(&assignments)
    }

    #[cfg(test)]
    pub fn parse(text: &str) -> Res<Self> {
        Self::from_assignments(&parse_text(text)?)
    }

    /// Key-sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Validates every typed value, so errors surface before any work.
    fn check(&self) -> Res<()> {
        self.preset()?;
        self.train_config()?;
        self.synth_spec()?;
        self.prop_config()?;
        self.alphas()?;
        self.tolerance()?;
        self.bool("skip_first")?;
        self.usize("checkpoint_every")?;
        self.usize("clips")?;
        match self.str("mode") {
            "mask" | "keypoint" => Ok(()),
            m => Err(ConfigError(format!("mode must be mask or keypoint, got {m:?}"))),
        }
    }

    pub fn str(&self, k: &str) -> &str {
        self.values.get(k).map(String::as_str).unwrap_or_default()
    }

    fn typed<T: FromStr>(&self, k: &str, what: &str) -> Res<T> {
        self.str(k)
            .parse()
            .map_err(|_| ConfigError(format!("{k} must be {what}, got {:?}", self.str(k))))
    }

    pub fn usize(&self, k: &str) -> Res<usize> {
        self.typed(k, "a non-negative integer")
    }

    pub fn u64(&self, k: &str) -> Res<u64> {
        self.typed(k, "a non-negative integer")
    }

    pub fn f64(&self, k: &str) -> Res<f64> {
        let v: f64 = self.typed(k, "a number")?;
        if !v.is_finite() {
            return Err(ConfigError(format!("{k} must be finite")));
        }
        Ok(v)
    }

    pub fn bool(&self, k: &str) -> Res<bool> {
        self.typed(k, "true or false")
    }

    /// Unset paths are empty strings.
    pub fn path(&self, k: &str) -> Option<PathBuf> {
        let v = self.str(k);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn require_path(&self, k: &str) -> Res<PathBuf> {
        self.path(k).ok_or_else(|| ConfigError(format!("--{k} is required")))
    }

    fn list<T: FromStr>(&self, k: &str) -> Res<Vec<T>> {
        self.str(k)
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| ConfigError(format!("{k} must be a comma-separated list, got {:?}", self.str(k))))
    }

    pub fn preset(&self) -> Res<Preset> {
        self.str("preset").parse()
    }

    pub fn train_config(&self) -> Res<TrainConfig> {
        let widths: Vec<usize> = self.list("encoder_widths")?;
        let widths: [usize; 5] = widths
            .try_into()
            .map_err(|_| ConfigError("encoder_widths needs five values".into()))?;
        let probs: Vec<f64> = self.list("drop_probs")?;
        let probs: [f64; 3] = probs
            .try_into()
            .map_err(|_| ConfigError("drop_probs needs three values".into()))?;
        let norm: NormMode = self
            .str("norm")
            .parse()
            .map_err(|_| ConfigError(format!("norm must be batch or frozen, got {:?}", self.str("norm"))))?;
        let cfg = TrainConfig {
            n: self.usize("n")?,
            max_disparity: self.usize("max_disparity")?,
            alpha1: self.f64("alpha1")?,
            alpha2: self.f64("alpha2")?,
            ss_start: self.f64("ss_start")?,
            ss_end: self.f64("ss_end")?,
            total_steps: self.usize("total_steps")?,
            lr: self.f64("lr")?,
            batch_size: self.usize("batch_size")?,
            seed: self.u64("seed")?,
            temperature: self.f64("temperature")?,
            l2_normalize: self.bool("l2_normalize")?,
            temporal_stride: self.usize("temporal_stride")?,
            palette_sample: self.usize("palette_sample")?,
            ce_eps: self.f64("ce_eps")?,
            cycle_from_prediction: self.bool("cycle_from_prediction")?,
            bottleneck: BottleneckConfig {
                drop_count_probs: probs,
                jitter: self.f64("jitter")?,
                per_clip_dropout: self.bool("per_clip_dropout")?,
                per_frame_jitter: self.bool("per_frame_jitter")?,
            },
            encoder: EncoderConfig { widths, norm },
            adam: corrflow::autodiff::AdamConfig {
                beta1: self.f64("adam_beta1")?,
                beta2: self.f64("adam_beta2")?,
                eps: self.f64("adam_eps")?,
            },
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn synth_spec(&self) -> Res<SyntheticSpec> {
        let spec = SyntheticSpec {
            height: self.usize("height")?,
            width: self.usize("width")?,
            patches: self.usize("patches")?,
            max_speed: self.usize("max_speed")?,
            velocities: None,
            clip_len: self.usize("clip_len")?,
            background_texture: self.bool("background_texture")?,
            stride: FEATURE_STRIDE,
            max_disparity: self.usize("max_disparity")?,
        };
        spec.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(spec)
    }

    pub fn prop_config(&self) -> Res<PropagationConfig> {
        let t = self.f64("prop_temperature")?;
        if t <= 0.0 {
            return Err(ConfigError(format!("prop_temperature must be positive, got {t}")));
        }
        Ok(PropagationConfig {
            max_disparity: self.usize("max_disparity")?,
            temperature: t,
            l2_normalize: self.bool("prop_l2_normalize")?,
        })
    }

    pub fn alphas(&self) -> Res<Vec<f64>> {
        let a: Vec<f64> = self.list("alphas")?;
        if a.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(ConfigError("alphas must be positive".into()));
        }
        Ok(a)
    }

    /// `None` selects the default tolerance for the frame size.
    pub fn tolerance(&self) -> Res<Option<usize>> {
        match self.str("tolerance") {
            "auto" => Ok(None),
            _ => self.usize("tolerance").map(Some),
        }
    }
}

/// Help section listing the keys of `scope` with their defaults.
pub fn key_help(scope: Scope) -> String {
    let paper = defaults(Preset::Paper);
    let tiny = defaults(Preset::Tiny);
    let mut out = String::from("Config keys (set in --config FILE as key=value, or as --key value):\n");
    for k in KEYS.iter().filter(|k| k.scopes.contains(&scope) || k.scopes.contains(&All)) {
        let (p, t) = (&paper[k.name], &tiny[k.name]);
        let mut default = if p.is_empty() { "unset".to_string() } else { p.clone() };
        if t != p {
            default.push_str(&format!(", tiny: {t}"));
        }
        let mark = if k.published { " [published setting]" } else { "" };
        out.push_str(&format!("  {:<22} {} (default {default}){mark}\n", k.name, k.help));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::load(None, &flags(&["--preset", "tiny", "--lr=0.003", "--seed", "9"])).unwrap();
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::parse("learning_rate=0.1\n").unwrap_err();
        assert!(err.0.contains("learning_rate"));
    }

    #[test]
    fn flags_override_file_values() {
        let mut a = parse_text("lr = 0.5\npreset=tiny\n").unwrap();
        a.extend(parse_flags(&flags(&["--lr", "0.25"])).unwrap());
        let c = RunConfig::from_assignments(&a).unwrap();
        assert_eq!(c.f64("lr").unwrap(), 0.25);
        assert_eq!(c.str("encoder_widths"), "8,8,16,32,32");
    }

    #[test]
    fn paper_defaults() {
        let c = RunConfig::parse("").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t, TrainConfig::paper());
        assert_eq!(c.str("max_disparity"), "6");
        assert_eq!(c.str("lr"), "0.0002");
    }

    #[test]
    fn bad_values_named() {
        assert!(RunConfig::parse("n=1").unwrap_err().0.contains("n = 1"));
        assert!(RunConfig::parse("norm=group").unwrap_err().0.contains("norm"));
        assert!(RunConfig::parse("max_speed=30").unwrap_err().0.contains("24"));
    }

    #[test]
    fn help_lists_every_training_key() {
        let h = key_help(Scope::Train);
        for k in KEYS.iter().filter(|k| k.scopes.contains(&Scope::Train)) {
            assert!(h.contains(k.name), "{}", k.name);
        }
        assert!(h.contains("[published setting]"));
    }
}
