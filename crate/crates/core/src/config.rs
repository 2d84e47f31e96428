//! Flat `key = value` run configuration with dotted keys and `#` comments.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datagen::{Modality, SynthConfig};
use crate::error::{Error, Result};
use crate::localizer::{AttentionMode, LocalizerConfig};
use crate::metrics::{ApMode, EvalConfig};

/// Everything a subcommand may consume, merged from a file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub localizer: LocalizerConfig,
    pub eval: EvalConfig,
    pub modes: Vec<AttentionMode>,
    pub seeds: Vec<u64>,
    pub paths: Paths,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub instance: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub a: Option<PathBuf>,
    pub b: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            localizer: LocalizerConfig::default(),
            eval: EvalConfig::default(),
            modes: vec![AttentionMode::None, AttentionMode::Sac],
            seeds: (0..6).collect(),
            paths: Paths::default(),
        }
    }
}

/// Every key [`RunConfig::set`] accepts.
pub const KEYS: &[&str] = &[
    "synth.train_videos",
    "synth.test_videos",
    "synth.frames",
    "synth.dim",
    "synth.classes",
    "synth.actions_min",
    "synth.actions_max",
    "synth.length_min",
    "synth.length_max",
    "synth.preference",
    "synth.amplitude",
    "synth.noise",
    "synth.seed",
    "localizer.mode",
    "localizer.classes",
    "localizer.hidden",
    "localizer.learning_rate",
    "localizer.momentum",
    "localizer.epochs",
    "localizer.seed",
    "localizer.batch_size",
    "localizer.threads",
    "localizer.threshold",
    "localizer.grad_clip",
    "sac.embed_width",
    "sac.pool_ratio",
    "sac.eta",
    "sac.lambda_smooth",
    "sac.lambda_fnorm",
    "sac.smooth_abs",
    "sinkhorn.epsilon",
    "sinkhorn.gamma",
    "sinkhorn.iterations",
    "sinkhorn.stop_tolerance",
    "eval.iou_thresholds",
    "eval.ap_mode",
    "experiment.modes",
    "experiment.seeds",
    "out",
    "data",
    "checkpoint",
    "instance",
    "detections",
    "annotations",
    "a",
    "b",
];

fn parse<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_list<T>(key: &str, value: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_optional(key: &str, value: &str) -> Result<Option<f64>> {
    match value.trim() {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl RunConfig {
    /// Apply one `key = value` setting; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (s, l, e) = (&mut self.synth, &mut self.localizer, &mut self.eval);
        let path = || Some(PathBuf::from(value.trim()));
        match key {
            "synth.train_videos" => s.train_videos = parse(key, value)?,
            "synth.test_videos" => s.test_videos = parse(key, value)?,
            "synth.frames" => s.frames = parse(key, value)?,
            "synth.dim" => s.dim = parse(key, value)?,
            "synth.classes" => {
                s.classes = parse(key, value)?;
                l.classes = s.classes;
            }
            "synth.actions_min" => s.actions.0 = parse(key, value)?,
            "synth.actions_max" => s.actions.1 = parse(key, value)?,
            "synth.length_min" => s.action_len.0 = parse(key, value)?,
            "synth.length_max" => s.action_len.1 = parse(key, value)?,
            "synth.preference" => {
                s.preference = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(Modality::parse)
                    .collect::<Result<_>>()?
            }
            "synth.amplitude" => s.amplitude = parse(key, value)?,
            "synth.noise" => s.noise = parse(key, value)?,
            "synth.seed" => s.seed = parse(key, value)?,
            "localizer.mode" => l.mode = parse(key, value)?,
            "localizer.classes" => l.classes = parse(key, value)?,
            "localizer.hidden" => l.hidden = parse(key, value)?,
            "localizer.learning_rate" => l.learning_rate = parse(key, value)?,
            "localizer.momentum" => l.momentum = parse(key, value)?,
            "localizer.epochs" => l.epochs = parse(key, value)?,
            "localizer.seed" => l.seed = parse(key, value)?,
            "localizer.batch_size" => l.batch_size = parse(key, value)?,
            "localizer.threads" => l.threads = parse(key, value)?,
            "localizer.threshold" => l.threshold = parse(key, value)?,
            "localizer.grad_clip" => l.grad_clip = parse_optional(key, value)?,
            "sac.embed_width" => l.sac.embed_width = parse(key, value)?,
            "sac.pool_ratio" => l.sac.pool_ratio = parse(key, value)?,
            "sac.eta" => l.sac.eta = parse(key, value)?,
            "sac.lambda_smooth" => l.sac.lambda_smooth = parse(key, value)?,
            "sac.lambda_fnorm" => l.sac.lambda_fnorm = parse(key, value)?,
            "sac.smooth_abs" => l.sac.smooth_abs = parse(key, value)?,
            "sinkhorn.epsilon" => l.sac.sinkhorn.epsilon = parse(key, value)?,
            "sinkhorn.gamma" => l.sac.sinkhorn.gamma = parse(key, value)?,
            "sinkhorn.iterations" => l.sac.sinkhorn.iterations = parse(key, value)?,
            "sinkhorn.stop_tolerance" => l.sac.sinkhorn.stop_tolerance = parse_optional(key, value)?,
            "eval.iou_thresholds" => e.iou_thresholds = parse_list(key, value)?,
            "eval.ap_mode" => e.ap_mode = parse::<ApMode>(key, value)?,
            "experiment.modes" => self.modes = parse_list(key, value)?,
            "experiment.seeds" => self.seeds = parse_list(key, value)?,
            "out" => self.paths.out = path(),
            "data" => self.paths.data = path(),
            "checkpoint" => self.paths.checkpoint = path(),
            "instance" => self.paths.instance = path(),
            "detections" => self.paths.detections = path(),
            "annotations" => self.paths.annotations = path(),
            "a" => self.paths.a = path(),
            "b" => self.paths.b = path(),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Apply every setting of a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.localizer.validate()?;
        self.eval.validate()?;
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one mode and one seed".into()));
        }
        Ok(())
    }

    /// Serialise every key in [`KEYS`] order; reading the text back reproduces `self`.
    pub fn to_text(&self) -> String {
        let (s, l, e) = (&self.synth, &self.localizer, &self.eval);
        let join = |xs: Vec<String>| xs.join(",");
        let opt = |x: Option<f64>| x.map_or("none".to_string(), |v| v.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines = vec![
            ("synth.train_videos", s.train_videos.to_string()),
            ("synth.test_videos", s.test_videos.to_string()),
            ("synth.frames", s.frames.to_string()),
            ("synth.dim", s.dim.to_string()),
            ("synth.classes", s.classes.to_string()),
            ("synth.actions_min", s.actions.0.to_string()),
            ("synth.actions_max", s.actions.1.to_string()),
            ("synth.length_min", s.action_len.0.to_string()),
            ("synth.length_max", s.action_len.1.to_string()),
            ("synth.preference", join(s.preference.iter().map(|m| m.as_str().to_string()).collect())),
            ("synth.amplitude", s.amplitude.to_string()),
            ("synth.noise", s.noise.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("localizer.mode", l.mode.to_string()),
            ("localizer.classes", l.classes.to_string()),
            ("localizer.hidden", l.hidden.to_string()),
            ("localizer.learning_rate", l.learning_rate.to_string()),
            ("localizer.momentum", l.momentum.to_string()),
            ("localizer.epochs", l.epochs.to_string()),
            ("localizer.seed", l.seed.to_string()),
            ("localizer.batch_size", l.batch_size.to_string()),
            ("localizer.threads", l.threads.to_string()),
            ("localizer.threshold", l.threshold.to_string()),
            ("localizer.grad_clip", opt(l.grad_clip)),
            ("sac.embed_width", l.sac.embed_width.to_string()),
            ("sac.pool_ratio", l.sac.pool_ratio.to_string()),
            ("sac.eta", l.sac.eta.to_string()),
            ("sac.lambda_smooth", l.sac.lambda_smooth.to_string()),
            ("sac.lambda_fnorm", l.sac.lambda_fnorm.to_string()),
            ("sac.smooth_abs", l.sac.smooth_abs.to_string()),
            ("sinkhorn.epsilon", l.sac.sinkhorn.epsilon.to_string()),
            ("sinkhorn.gamma", l.sac.sinkhorn.gamma.to_string()),
            ("sinkhorn.iterations", l.sac.sinkhorn.iterations.to_string()),
            ("sinkhorn.stop_tolerance", opt(l.sac.sinkhorn.stop_tolerance)),
            ("eval.iou_thresholds", join(e.iou_thresholds.iter().map(f64::to_string).collect())),
            ("eval.ap_mode", e.ap_mode.as_str().to_string()),
            ("experiment.modes", join(self.modes.iter().map(|m| m.to_string()).collect())),
            ("experiment.seeds", join(self.seeds.iter().map(u64::to_string).collect())),
        ];
        let p = &self.paths;
        for (k, v) in [
            ("out", &p.out),
            ("data", &p.data),
            ("checkpoint", &p.checkpoint),
            ("instance", &p.instance),
            ("detections", &p.detections),
            ("annotations", &p.annotations),
            ("a", &p.a),
            ("b", &p.b),
        ] {
            if let Some(v) = path(v) {
                lines.push((k, v));
            }
        }
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let mut c = RunConfig::default();
        c.apply_text("# header\nsinkhorn.epsilon = 0.01  # coarser\n\nlocalizer.mode=frame_only\nexperiment.seeds = 1, 2\n")
            .unwrap();
        assert_eq!(c.localizer.sac.sinkhorn.epsilon, 0.01);
        assert_eq!(c.localizer.mode, AttentionMode::FrameOnly);
        assert_eq!(c.seeds, vec![1, 2]);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("sinkhorn.epsilonn = 1"), Err(Error::Config(_))));
        assert!(c.apply_text("sinkhorn.epsilon = fast").is_err());
        assert!(c.apply_text("no equals sign").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.set("localizer.grad_clip", "none").unwrap();
        c.set("eval.ap_mode", "standard").unwrap();
        c.set("out", "runs/x").unwrap();
        c.set("synth.preference", "m,a").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(KEYS.len(), c.to_text().lines().count() + 7);
    }
}
