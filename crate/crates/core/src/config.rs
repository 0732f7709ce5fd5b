//! Flat key=value run configuration: trivial to parse, unknown keys
//! rejected with a nearest-key suggestion, fully-resolved copy echoed into
//! every output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::amf::FlowMode;
use crate::error::{AmfError, Result};
use crate::guidance::GuidanceConfig;
use crate::pipeline::StackParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Translating,
    Static,
    MultiObject,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub velocity_y: f64,
    pub velocity_x: f64,
    pub amplitude: f64,
    pub scenario: Scenario,
    pub seed: u64,
    pub outer_steps: usize,
    pub guided_fraction: f64,
    pub inner_steps: usize,
    pub delta_skip: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub force_full_gradients: bool,
    pub moments_on_reuse: bool,
    pub d_h: usize,
    pub tau: f64,
    pub tile: usize,
    pub stride: usize,
    pub window_l: usize,
    pub s_f: usize,
    pub lambda_amf: f64,
    pub lambda_window: f64,
    pub alpha: f64,
    pub flow_mode: FlowMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        let s = StackParams::default();
        Self {
            frames: 9,
            channels: 8,
            height: 32,
            width: 32,
            velocity_y: 0.0,
            velocity_x: 1.0,
            amplitude: 60.0,
            scenario: Scenario::Translating,
            seed: 20260826,
            outer_steps: 50,
            guided_fraction: 0.2,
            inner_steps: g.inner_steps,
            delta_skip: g.delta_skip,
            lr_start: g.lr_start,
            lr_end: g.lr_end,
            beta1: g.betas.0,
            beta2: g.betas.1,
            eps: g.eps,
            weight_decay: g.weight_decay,
            force_full_gradients: g.force_full_gradients,
            moments_on_reuse: g.moments_on_reuse,
            d_h: s.d_h,
            tau: s.tau,
            tile: s.tile,
            stride: s.stride,
            window_l: s.window_l,
            s_f: s.s_f,
            lambda_amf: s.lambda_amf,
            lambda_window: s.lambda_window,
            alpha: s.alpha,
            flow_mode: FlowMode::Hard,
        }
    }
}

const KEYS: &[&str] = &[
    "frames",
    "channels",
    "height",
    "width",
    "velocity_y",
    "velocity_x",
    "amplitude",
    "scenario",
    "seed",
    "outer_steps",
    "guided_fraction",
    "inner_steps",
    "delta_skip",
    "lr_start",
    "lr_end",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "force_full_gradients",
    "moments_on_reuse",
    "d_h",
    "tau",
    "tile",
    "stride",
    "window_l",
    "s_f",
    "lambda_amf",
    "lambda_window",
    "alpha",
    "flow_mode",
];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn suggest(key: &str) -> Option<&'static str> {
    KEYS.iter()
        .map(|k| (levenshtein(key, k), *k))
        .min()
        .filter(|(d, _)| *d <= 3)
        .map(|(_, k)| k)
}

impl RunConfig {
    /// Apply one key=value assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| AmfError::Config {
                key: key.to_string(),
                message: format!("invalid value '{v}'"),
            })
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v.trim() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(AmfError::Config {
                    key: key.to_string(),
                    message: format!("invalid flag '{other}'"),
                }),
            }
        }
        match key {
            "frames" => self.frames = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "velocity_y" => self.velocity_y = num(key, value)?,
            "velocity_x" => self.velocity_x = num(key, value)?,
            "amplitude" => self.amplitude = num(key, value)?,
            "scenario" => {
                self.scenario = match value.trim() {
                    "translating" => Scenario::Translating,
                    "static" => Scenario::Static,
                    "multi_object" => Scenario::MultiObject,
                    other => {
                        return Err(AmfError::Config {
                            key: key.to_string(),
                            message: format!(
                                "unknown scenario '{other}' (translating|static|multi_object)"
                            ),
                        })
                    }
                }
            }
            "seed" => self.seed = num(key, value)?,
            "outer_steps" => self.outer_steps = num(key, value)?,
            "guided_fraction" => self.guided_fraction = num(key, value)?,
            "inner_steps" => self.inner_steps = num(key, value)?,
            "delta_skip" => self.delta_skip = num(key, value)?,
            "lr_start" => self.lr_start = num(key, value)?,
            "lr_end" => self.lr_end = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "force_full_gradients" => self.force_full_gradients = flag(key, value)?,
            "moments_on_reuse" => self.moments_on_reuse = flag(key, value)?,
            "d_h" => self.d_h = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "tile" => self.tile = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "window_l" => self.window_l = num(key, value)?,
            "s_f" => self.s_f = num(key, value)?,
            "lambda_amf" => self.lambda_amf = num(key, value)?,
            "lambda_window" => self.lambda_window = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "flow_mode" => {
                self.flow_mode = match value.trim() {
                    "hard" => FlowMode::Hard,
                    "soft" => FlowMode::Soft,
                    other => {
                        return Err(AmfError::Config {
                            key: key.to_string(),
                            message: format!("unknown flow mode '{other}' (hard|soft)"),
                        })
                    }
                }
            }
            unknown => {
                let hint = suggest(unknown)
                    .map(|s| format!("; did you mean '{s}'?"))
                    .unwrap_or_default();
                return Err(AmfError::Config {
                    key: unknown.to_string(),
                    message: format!("unknown key{hint}"),
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance().validate()?;
        if self.lambda_amf < 0.0 || self.lambda_window < 0.0 {
            return Err(AmfError::Config {
                key: "lambda_amf".into(),
                message: "loss weights must be nonnegative".into(),
            });
        }
        if self.window_l % 2 == 0 {
            return Err(AmfError::Config {
                key: "window_l".into(),
                message: "window side must be odd".into(),
            });
        }
        if self.frames < 2 {
            return Err(AmfError::Config {
                key: "frames".into(),
                message: "need at least 2 frames".into(),
            });
        }
        Ok(())
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            inner_steps: self.inner_steps,
            delta_skip: self.delta_skip,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            betas: (self.beta1, self.beta2),
            eps: self.eps,
            weight_decay: self.weight_decay,
            force_full_gradients: self.force_full_gradients,
            moments_on_reuse: self.moments_on_reuse,
        }
    }

    pub fn stack(&self) -> StackParams {
        StackParams {
            d_h: self.d_h,
            tau: self.tau,
            tile: self.tile,
            stride: self.stride,
            window_l: self.window_l,
            s_f: self.s_f,
            lambda_amf: self.lambda_amf,
            lambda_window: self.lambda_window,
            alpha: self.alpha,
        }
    }

    /// Parse a flat key=value file onto the defaults. '#' starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_overrides(&text, &RunConfig::default())
    }

    pub fn from_str_overrides(text: &str, base: &RunConfig) -> Result<Self> {
        let mut cfg = base.clone();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| AmfError::Config {
                key: format!("line {}", n + 1),
                message: format!("expected key=value, got '{line}'"),
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Render back to the same key=value format, keys in canonical order.
    pub fn echo(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("frames", self.frames.to_string());
        m.insert("channels", self.channels.to_string());
        m.insert("height", self.height.to_string());
        m.insert("width", self.width.to_string());
        m.insert("velocity_y", self.velocity_y.to_string());
        m.insert("velocity_x", self.velocity_x.to_string());
        m.insert("amplitude", self.amplitude.to_string());
        m.insert(
            "scenario",
            match self.scenario {
                Scenario::Translating => "translating",
                Scenario::Static => "static",
                Scenario::MultiObject => "multi_object",
            }
            .to_string(),
        );
        m.insert("seed", self.seed.to_string());
        m.insert("outer_steps", self.outer_steps.to_string());
        m.insert("guided_fraction", self.guided_fraction.to_string());
        m.insert("inner_steps", self.inner_steps.to_string());
        m.insert("delta_skip", self.delta_skip.to_string());
        m.insert("lr_start", self.lr_start.to_string());
        m.insert("lr_end", self.lr_end.to_string());
        m.insert("beta1", self.beta1.to_string());
        m.insert("beta2", self.beta2.to_string());
        m.insert("eps", self.eps.to_string());
        m.insert("weight_decay", self.weight_decay.to_string());
        m.insert("force_full_gradients", self.force_full_gradients.to_string());
        m.insert("moments_on_reuse", self.moments_on_reuse.to_string());
        m.insert("d_h", self.d_h.to_string());
        m.insert("tau", self.tau.to_string());
        m.insert("tile", self.tile.to_string());
        m.insert("stride", self.stride.to_string());
        m.insert("window_l", self.window_l.to_string());
        m.insert("s_f", self.s_f.to_string());
        m.insert("lambda_amf", self.lambda_amf.to_string());
        m.insert("lambda_window", self.lambda_window.to_string());
        m.insert("alpha", self.alpha.to_string());
        m.insert(
            "flow_mode",
            match self.flow_mode {
                FlowMode::Hard => "hard",
                FlowMode::Soft => "soft",
            }
            .to_string(),
        );
        // KEYS order, not BTree order, so the echo reads like the docs
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k}={}", m[k]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = RunConfig::from_str_overrides("", &RunConfig::default()).unwrap();
        assert_eq!(cfg.lambda_amf, 5.0);
        assert_eq!(cfg.lambda_window, 1.0);
        assert_eq!(cfg.alpha, 0.2);
        assert_eq!(cfg.inner_steps, 10);
        assert_eq!(cfg.lr_start, 0.003);
        assert_eq!(cfg.lr_end, 0.002);
        assert_eq!(cfg.outer_steps, 50);
        assert_eq!(cfg.guided_fraction, 0.2);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "lambda_amf=0   # ablation\n\n  s_f = 2\nflow_mode=soft\n";
        let cfg = RunConfig::from_str_overrides(text, &RunConfig::default()).unwrap();
        assert_eq!(cfg.lambda_amf, 0.0);
        assert_eq!(cfg.s_f, 2);
        assert_eq!(cfg.flow_mode, FlowMode::Soft);
    }

    #[test]
    fn typo_key_gets_suggestion() {
        let err = RunConfig::from_str_overrides("lamda_amf=5\n", &RunConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("lamda_amf"), "{err}");
        assert!(err.contains("lambda_amf"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        let d = RunConfig::default();
        assert!(RunConfig::from_str_overrides("frames=abc\n", &d).is_err());
        assert!(RunConfig::from_str_overrides("window_l=8\n", &d).is_err());
        assert!(RunConfig::from_str_overrides("lr_end=0\n", &d).is_err());
        assert!(RunConfig::from_str_overrides("no_equals_here\n", &d).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("velocity_x", "2").unwrap();
        cfg.set("delta_skip", "5").unwrap();
        let echoed = cfg.echo();
        let back = RunConfig::from_str_overrides(&echoed, &RunConfig::default()).unwrap();
        assert_eq!(back.echo(), echoed);
        assert_eq!(back.velocity_x, 2.0);
        assert_eq!(back.delta_skip, 5);
    }
}
