//! Run configuration: one JSON document, presets, validation.
//!
//! The on-disk form accepts partial documents (`{"preset": "small"}` is
//! complete); [`RunConfig`] always holds resolved values and serializes them
//! all, so `load(save(cfg)) == cfg`.

use std::fs;
use std::path::Path;

use dydila_core::attention::{BlockConfig, Grid, Variant};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Base,
    Large,
    Custom,
}

/// Values a preset fixes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PresetDims {
    pub d: usize,
    pub heads: usize,
    pub n_p: usize,
    pub n_f: usize,
    pub n_d: usize,
}

impl Preset {
    pub fn dims(self) -> Option<PresetDims> {
        let (d, heads, n_p, n_f) = match self {
            Preset::Small => (384, 6, 3, 9),
            Preset::Base => (512, 8, 5, 15),
            Preset::Large => (768, 12, 7, 21),
            Preset::Custom => return None,
        };
        Some(PresetDims {
            d,
            heads,
            n_p,
            n_f,
            n_d: n_f,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    #[default]
    TokenWise,
    MapWise,
}

impl From<VariantName> for Variant {
    fn from(v: VariantName) -> Self {
        match v {
            VariantName::TokenWise => Variant::TokenWise,
            VariantName::MapWise => Variant::MapWise,
        }
    }
}

/// Initial λ per block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSchedule {
    /// Every block starts at `lambda_init`.
    #[default]
    Constant,
    /// `start + (end − start)·b/(L − 1)` for block `b`.
    Linear { start: f64, end: f64 },
    /// One value per block.
    PerBlock(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DwcConfig {
    pub enabled: bool,
    pub identity_branch: bool,
    pub use_merged: bool,
}

impl Default for DwcConfig {
    fn default() -> Self {
        DwcConfig {
            enabled: true,
            identity_branch: true,
            use_merged: true,
        }
    }
}

pub const DEFAULT_GRID: GridSpec = GridSpec { h: 8, w: 8 };

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub d: usize,
    pub heads: usize,
    pub n_p: usize,
    pub n_f: usize,
    pub n_d: usize,
    pub gamma_init: f64,
    pub lambda_init: f64,
    pub lambda_init_schedule: LambdaSchedule,
    pub blocks: usize,
    pub grid: GridSpec,
    pub seed: u64,
    pub precision: Precision,
    pub variant: VariantName,
    pub normalize: bool,
    pub dwc: DwcConfig,
    /// Test hook: `check` perturbs one weight of the fast-path copy.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub inject_fault: bool,
}

/// What may appear in a config file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_preset")]
    preset: Preset,
    d: Option<usize>,
    heads: Option<usize>,
    n_p: Option<usize>,
    n_f: Option<usize>,
    n_d: Option<usize>,
    #[serde(default = "default_gamma")]
    gamma_init: f64,
    #[serde(default = "default_lambda")]
    lambda_init: f64,
    #[serde(default)]
    lambda_init_schedule: LambdaSchedule,
    #[serde(default = "default_blocks")]
    blocks: usize,
    grid: Option<GridSpec>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    precision: Precision,
    #[serde(default)]
    variant: VariantName,
    #[serde(default)]
    normalize: bool,
    #[serde(default)]
    dwc: DwcConfig,
    #[serde(default)]
    inject_fault: bool,
}

fn default_preset() -> Preset {
    Preset::Small
}
fn default_gamma() -> f64 {
    3.0
}
fn default_lambda() -> f64 {
    0.01
}
fn default_blocks() -> usize {
    9
}

impl RawConfig {
    fn resolve(self) -> Result<RunConfig, ConfigError> {
        let dims = match self.preset.dims() {
            Some(p) => {
                let pinned = [
                    ("d", self.d, p.d),
                    ("n_p", self.n_p, p.n_p),
                    ("n_f", self.n_f, p.n_f),
                    ("n_d", self.n_d, p.n_d),
                ];
                for (field, given, fixed) in pinned {
                    if given.is_some_and(|g| g != fixed) {
                        return Err(invalid(
                            field,
                            format!(
                                "preset {:?} fixes it to {fixed}; use preset \"custom\" to change it",
                                self.preset
                            ),
                        ));
                    }
                }
                PresetDims {
                    heads: self.heads.unwrap_or(p.heads),
                    ..p
                }
            }
            None => {
                let need = |field: &'static str, v: Option<usize>| {
                    v.ok_or_else(|| invalid(field, "required for preset \"custom\""))
                };
                PresetDims {
                    d: need("d", self.d)?,
                    heads: self.heads.unwrap_or(1),
                    n_p: need("n_p", self.n_p)?,
                    n_f: need("n_f", self.n_f)?,
                    n_d: need("n_d", self.n_d)?,
                }
            }
        };
        let cfg = RunConfig {
            preset: self.preset,
            d: dims.d,
            heads: dims.heads,
            n_p: dims.n_p,
            n_f: dims.n_f,
            n_d: dims.n_d,
            gamma_init: self.gamma_init,
            lambda_init: self.lambda_init,
            lambda_init_schedule: self.lambda_init_schedule,
            blocks: self.blocks,
            grid: self.grid.unwrap_or(DEFAULT_GRID),
            seed: self.seed,
            precision: self.precision,
            variant: self.variant,
            normalize: self.normalize,
            dwc: self.dwc,
            inject_fault: self.inject_fault,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    /// Defaults for a preset; `Custom` starts from the small dimensions.
    pub fn preset(preset: Preset) -> Self {
        let dims = preset.dims().unwrap_or(Preset::Small.dims().expect("small preset"));
        RunConfig {
            preset,
            d: dims.d,
            heads: dims.heads,
            n_p: dims.n_p,
            n_f: dims.n_f,
            n_d: dims.n_d,
            gamma_init: default_gamma(),
            lambda_init: default_lambda(),
            lambda_init_schedule: LambdaSchedule::Constant,
            blocks: default_blocks(),
            grid: DEFAULT_GRID,
            seed: 0,
            precision: Precision::F64,
            variant: VariantName::TokenWise,
            normalize: false,
            dwc: DwcConfig::default(),
            inject_fault: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str::<RawConfig>(text)?.resolve()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_json()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(p) = self.preset.dims() {
            if (self.d, self.n_p, self.n_f, self.n_d) != (p.d, p.n_p, p.n_f, p.n_d) {
                return Err(invalid("preset", format!("{:?} pins d, n_p, n_f, n_d", self.preset)));
            }
        }
        for (field, v) in [
            ("d", self.d),
            ("heads", self.heads),
            ("n_p", self.n_p),
            ("n_f", self.n_f),
            ("n_d", self.n_d),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(invalid(
                "heads",
                format!("{} does not divide d = {}", self.heads, self.d),
            ));
        }
        if !(self.gamma_init.is_finite() && self.gamma_init > 0.0) {
            return Err(invalid(
                "gamma_init",
                format!("must be finite and positive, got {}", self.gamma_init),
            ));
        }
        if !self.lambda_init.is_finite() {
            return Err(invalid("lambda_init", "must be finite"));
        }
        match &self.lambda_init_schedule {
            LambdaSchedule::Constant => {}
            LambdaSchedule::Linear { start, end } => {
                if !(start.is_finite() && end.is_finite()) {
                    return Err(invalid("lambda_init_schedule", "endpoints must be finite"));
                }
            }
            LambdaSchedule::PerBlock(values) => {
                if values.len() != self.blocks {
                    return Err(invalid(
                        "lambda_init_schedule",
                        format!("{} values for {} blocks", values.len(), self.blocks),
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("lambda_init_schedule", "values must be finite"));
                }
            }
        }
        if self.grid.h == 0 || self.grid.w == 0 {
            return Err(invalid("grid", "h and w must be at least 1"));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.grid.h * self.grid.w
    }

    /// Initial λ of block `b`.
    pub fn lambda_for_block(&self, b: usize) -> f64 {
        match &self.lambda_init_schedule {
            LambdaSchedule::Constant => self.lambda_init,
            LambdaSchedule::Linear { start, end } if self.blocks > 1 => {
                start + (end - start) * b as f64 / (self.blocks - 1) as f64
            }
            LambdaSchedule::Linear { start, .. } => *start,
            LambdaSchedule::PerBlock(values) => values[b],
        }
    }

    pub fn block_config(&self, b: usize) -> BlockConfig {
        BlockConfig {
            d: self.d,
            heads: self.heads,
            n_p: self.n_p,
            n_f: self.n_f,
            n_d: self.n_d,
            gamma_init: self.gamma_init,
            lambda_init: self.lambda_for_block(b),
            grid: Grid::new(self.grid.h, self.grid.w),
            dwc: self.dwc.enabled.then_some(self.dwc.identity_branch),
            use_merged: self.dwc.use_merged,
            normalize: self.normalize,
            variant: self.variant.into(),
        }
    }
}
