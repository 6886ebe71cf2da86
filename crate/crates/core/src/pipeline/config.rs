//! Generation settings and their plain-text `key = value` form.
//!
//! ```text
//! [model]
//! base = 128x128
//! channels = 4
//! spatial_factor = 8
//!
//! [generation]
//! target = 512x512
//! scales = 1,2,3,4
//! c = 0.3
//! ```
//!
//! Section headers group keys but every key belongs to exactly one section;
//! keys outside their section, unknown keys and duplicate keys are rejected.

use std::fmt::{self, Write as _};
use std::path::PathBuf;

use crate::denoiser::ToyKind;
use crate::error::{Error, Result};
use crate::structure::CannyParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaMode {
    /// Cosine decay from 1 at the first step to 0.
    Cosine,
    /// Patch branch only.
    Zero,
    /// Global branch only.
    One,
}

impl fmt::Display for EtaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EtaMode::Cosine => "cosine",
            EtaMode::Zero => "zero",
            EtaMode::One => "one",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Toy(ToyKind),
    Remote,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendKind::Toy(k) => k.fmt(f),
            BackendKind::Remote => f.write_str("remote"),
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "remote" {
            Ok(BackendKind::Remote)
        } else {
            s.parse().map(BackendKind::Toy)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub lambda: Option<f64>,
    pub bias: Option<f64>,
    pub context: Option<f64>,
    pub oracle_z0: Option<PathBuf>,
    pub oracle_eps: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    /// Attention down-sampling of toy backends; 0 disables synthetic attention.
    pub attention_scale: usize,
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            kind: BackendKind::Toy(ToyKind::Linear),
            lambda: Some(0.5),
            bias: None,
            context: None,
            oracle_z0: None,
            oracle_eps: None,
            endpoint: None,
            timeout_secs: 300.0,
            attention_scale: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub base_h: usize,
    pub base_w: usize,
    pub channels: usize,
    pub spatial_factor: usize,
    pub target_h: usize,
    pub target_w: usize,
    /// Per-side multiples of the base resolution, starting at 1.
    pub scales: Vec<usize>,
    pub steps: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// `None` means half the patch size.
    pub stride: Option<(usize, usize)>,
    pub c: f64,
    pub mask_radius: usize,
    /// `None` conditions every step.
    pub controlnet_steps: Option<usize>,
    pub eta: EtaMode,
    pub window_interaction: bool,
    pub residual: bool,
    pub seed: u64,
    pub guidance_scale: f32,
    pub canny: CannyParams,
    pub prompt_tokens: Vec<u32>,
    pub backend: BackendSpec,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            base_h: 16,
            base_w: 16,
            channels: 4,
            spatial_factor: 8,
            target_h: 32,
            target_w: 32,
            scales: vec![1, 2],
            steps: 50,
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            stride: None,
            c: crate::prompt::DEFAULT_THRESHOLD,
            mask_radius: crate::prompt::DEFAULT_RADIUS,
            controlnet_steps: None,
            eta: EtaMode::Cosine,
            window_interaction: true,
            residual: true,
            seed: 0,
            guidance_scale: 7.5,
            canny: CannyParams::default(),
            prompt_tokens: Vec::new(),
            backend: BackendSpec::default(),
        }
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    ("model", &["base", "channels", "spatial_factor"]),
    ("schedule", &["steps", "train_steps", "beta_start", "beta_end"]),
    (
        "generation",
        &[
            "target",
            "scales",
            "stride",
            "c",
            "mask_radius",
            "controlnet_steps",
            "eta",
            "window_interaction",
            "residual",
            "seed",
            "guidance_scale",
            "prompt_tokens",
        ],
    ),
    ("canny", &["canny_low", "canny_high", "canny_sigma"]),
    (
        "backend",
        &["backend", "lambda", "bias", "context", "oracle_z0", "oracle_eps", "endpoint", "timeout", "attention_scale"],
    ),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_dims(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once('x') {
        Some((h, w)) => Ok((parse_num(key, h.trim())?, parse_num(key, w.trim())?)),
        None => {
            let n = parse_num(key, v)?;
            Ok((n, n))
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl GenerationConfig {
    /// Applies one `key = value` setting; used for file entries and command-line flags alike.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "base" => (self.base_h, self.base_w) = parse_dims(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "spatial_factor" => self.spatial_factor = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "train_steps" => self.train_steps = parse_num(key, v)?,
            "beta_start" => self.beta_start = parse_num(key, v)?,
            "beta_end" => self.beta_end = parse_num(key, v)?,
            "target" => (self.target_h, self.target_w) = parse_dims(key, v)?,
            "scales" => self.scales = parse_list(key, v)?,
            "stride" => self.stride = if v == "auto" { None } else { Some(parse_dims(key, v)?) },
            "c" => self.c = parse_num(key, v)?,
            "mask_radius" => self.mask_radius = parse_num(key, v)?,
            "controlnet_steps" => {
                self.controlnet_steps = if v == "all" { None } else { Some(parse_num(key, v)?) }
            }
            "eta" => {
                self.eta = match v {
                    "cosine" => EtaMode::Cosine,
                    "zero" => EtaMode::Zero,
                    "one" => EtaMode::One,
                    _ => return Err(Error::Config(format!("eta: expected cosine|zero|one, got '{v}'"))),
                }
            }
            "window_interaction" => self.window_interaction = parse_bool(key, v)?,
            "residual" => self.residual = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "guidance_scale" => self.guidance_scale = parse_num(key, v)?,
            "prompt_tokens" => self.prompt_tokens = parse_list(key, v)?,
            "canny_low" => self.canny.low = parse_num(key, v)?,
            "canny_high" => self.canny.high = parse_num(key, v)?,
            "canny_sigma" => self.canny.sigma = parse_num(key, v)?,
            "backend" => self.backend.kind = v.parse()?,
            "lambda" => self.backend.lambda = parse_opt(key, v)?,
            "bias" => self.backend.bias = parse_opt(key, v)?,
            "context" => self.backend.context = parse_opt(key, v)?,
            "oracle_z0" => self.backend.oracle_z0 = if v == "none" { None } else { Some(v.into()) },
            "oracle_eps" => self.backend.oracle_eps = if v == "none" { None } else { Some(v.into()) },
            "endpoint" => self.backend.endpoint = if v == "none" { None } else { Some(v.to_string()) },
            "timeout" => self.backend.timeout_secs = parse_num(key, v)?,
            "attention_scale" => self.backend.attention_scale = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Sets the target and, as the default progression, scales `1, 2, ..., k`.
    pub fn set_target_with_default_scales(&mut self, h: usize, w: usize) -> Result<()> {
        if self.base_h == 0 || h % self.base_h != 0 || w % self.base_w != 0 || h / self.base_h != w / self.base_w {
            return Err(Error::Config(format!(
                "target {h}x{w} must be the same integer multiple of base {}x{} on both sides",
                self.base_h, self.base_w
            )));
        }
        self.target_h = h;
        self.target_w = w;
        self.scales = (1..=h / self.base_h).collect();
        Ok(())
    }

    /// Parses text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = GenerationConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(Error::Config(format!("line {line_no}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {line_no}: expected 'key = value', got '{line}'")));
            };
            let key = key.trim();
            match (section_of(key), &section) {
                (None, _) => return Err(Error::Config(format!("line {line_no}: unknown key '{key}'"))),
                (Some(expected), Some(current)) if expected != current => {
                    return Err(Error::Config(format!(
                        "line {line_no}: key '{key}' belongs in [{expected}], not [{current}]"
                    )))
                }
                _ => {}
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line_no}: duplicate key '{key}'")));
            }
            self.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {line_no}: {m}")),
                other => Error::Config(format!("line {line_no}: {other}")),
            })?;
        }
        Ok(())
    }

    /// Effective patch strides.
    pub fn strides(&self) -> (usize, usize) {
        self.stride.unwrap_or(((self.base_h / 2).max(1), (self.base_w / 2).max(1)))
    }

    pub fn conditioned_step_count(&self) -> usize {
        self.controlnet_steps.unwrap_or(self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_h == 0 || self.base_w == 0 || self.channels == 0 {
            return bad("base resolution and channels must be positive".into());
        }
        if self.spatial_factor == 0 {
            return bad("spatial_factor must be >= 1".into());
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return bad("c must be in (0,1)".into());
        }
        if self.scales.first() != Some(&1) {
            return bad("scales must start at 1".into());
        }
        if !self.scales.windows(2).all(|w| w[0] < w[1]) {
            return bad("scales must be strictly increasing".into());
        }
        let last = *self.scales.last().unwrap();
        if (self.target_h, self.target_w) != (self.base_h * last, self.base_w * last) {
            return bad(format!(
                "target {}x{} must equal base {}x{} times the last scale {last}",
                self.target_h, self.target_w, self.base_h, self.base_w
            ));
        }
        if self.steps == 0 || self.steps > self.train_steps {
            return bad(format!("steps must be in 1..={}", self.train_steps));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad("need 0 < beta_start <= beta_end < 1".into());
        }
        let (sh, sw) = self.strides();
        if sh == 0 || sw == 0 || sh > self.base_h || sw > self.base_w {
            return bad(format!("stride {sh}x{sw} must be in 1..=patch size"));
        }
        if self.conditioned_step_count() > self.steps {
            return bad("controlnet_steps must not exceed steps".into());
        }
        let p = &self.canny;
        if !(0.0 <= p.low && p.low <= p.high && p.high <= 255.0 && p.sigma >= 0.0) {
            return bad("canny thresholds need 0 <= low <= high <= 255 and sigma >= 0".into());
        }
        if !(self.guidance_scale.is_finite() && self.backend.timeout_secs > 0.0) {
            return bad("guidance_scale must be finite and timeout positive".into());
        }
        if self.backend.kind == BackendKind::Remote && self.backend.endpoint.is_none() {
            return bad("remote backend needs an endpoint".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = &self.backend;
        let (stride, cn) = (
            self.stride.map_or("auto".to_string(), |(h, w)| format!("{h}x{w}")),
            self.controlnet_steps.map_or("all".to_string(), |n| n.to_string()),
        );
        let _ = write!(
            s,
            "[model]\nbase = {}x{}\nchannels = {}\nspatial_factor = {}\n\n\
             [schedule]\nsteps = {}\ntrain_steps = {}\nbeta_start = {}\nbeta_end = {}\n\n\
             [generation]\ntarget = {}x{}\nscales = {}\nstride = {stride}\nc = {}\nmask_radius = {}\n\
             controlnet_steps = {cn}\neta = {}\nwindow_interaction = {}\nresidual = {}\nseed = {}\n\
             guidance_scale = {}\nprompt_tokens = {}\n\n\
             [canny]\ncanny_low = {}\ncanny_high = {}\ncanny_sigma = {}\n\n\
             [backend]\nbackend = {}\nlambda = {}\nbias = {}\ncontext = {}\noracle_z0 = {}\noracle_eps = {}\n\
             endpoint = {}\ntimeout = {}\nattention_scale = {}\n",
            self.base_h,
            self.base_w,
            self.channels,
            self.spatial_factor,
            self.steps,
            self.train_steps,
            self.beta_start,
            self.beta_end,
            self.target_h,
            self.target_w,
            join(&self.scales),
            self.c,
            self.mask_radius,
            self.eta,
            self.window_interaction,
            self.residual,
            self.seed,
            self.guidance_scale,
            join(&self.prompt_tokens),
            self.canny.low,
            self.canny.high,
            self.canny.sigma,
            b.kind,
            opt(&b.lambda),
            opt(&b.bias),
            opt(&b.context),
            opt(&b.oracle_z0.as_ref().map(|p| p.display().to_string())),
            opt(&b.oracle_eps.as_ref().map(|p| p.display().to_string())),
            opt(&b.endpoint),
            b.timeout_secs,
            b.attention_scale,
        );
        s
    }
}
