//! Model, loss, ablation and training configuration.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// Segments per video.
    pub t: usize,
    /// Classes including background.
    pub c: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub h: usize,
    pub w: usize,
    /// Audio-guided attention hidden width.
    pub d_m: usize,
    /// Bi-LSTM output width (two directions).
    pub d_l: usize,
    /// Similarity projection width inside positive sample propagation.
    pub d_p: usize,
    /// Segment-level encoded width.
    pub d_s: usize,
    /// Event representation channels; also the per-direction GRU width.
    pub d_e: usize,
    /// Bi-GRU output width, always `2 * d_e`.
    pub d_i: usize,
    pub d_f: usize,
    /// Weak head hidden width.
    pub d_h: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Fully,
    Weakly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    /// `L_c + L_t + L_avps` (fully) or `λ·L_bce + L_s-bce` (weakly).
    Full,
    /// Per-segment cross-entropy plus `λ_avps · L_avps` (fully only).
    CeAvps,
    /// `L_c + L_t` (fully only).
    CtOnly,
    /// Plain `L_bce` (weakly only).
    BceOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CereMode {
    On,
    /// Keep the recurrent enhancer but start it from zero hidden states.
    ZeroInit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub escm: bool,
    pub cere: CereMode,
    pub shared_cere: bool,
}

/// The four model variants compared in the module ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationName {
    Full,
    NoEscm,
    NoCere,
    NoCommonCere,
}

impl AblationName {
    pub const ALL: [AblationName; 4] = [
        AblationName::Full,
        AblationName::NoEscm,
        AblationName::NoCere,
        AblationName::NoCommonCere,
    ];

    pub fn ablation(self) -> Ablation {
        let full = Ablation {
            escm: true,
            cere: CereMode::On,
            shared_cere: true,
        };
        match self {
            AblationName::Full => full,
            AblationName::NoEscm => Ablation { escm: false, ..full },
            AblationName::NoCere => Ablation {
                cere: CereMode::ZeroInit,
                ..full
            },
            AblationName::NoCommonCere => Ablation {
                shared_cere: false,
                ..full
            },
        }
    }

    /// Row label in the module ablation table.
    pub fn table_label(self) -> &'static str {
        match self {
            AblationName::Full => "Full model(Ours)",
            AblationName::NoEscm => "w/o ESCM",
            AblationName::NoCere => "w/o CERE",
            AblationName::NoCommonCere => "w/o common CERE",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationName::Full => "full",
            AblationName::NoEscm => "no-escm",
            AblationName::NoCere => "no-cere",
            AblationName::NoCommonCere => "no-common-cere",
        }
    }
}

impl FromStr for AblationName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationName::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (full|no-escm|no-cere|no-common-cere)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub dims: Dims,
    pub background_index: usize,
    pub r_s: f64,
    /// `None` selects the mode default (0.2 fully, 0.5 weakly).
    pub r_i: Option<f64>,
    pub tau_psp: f64,
    pub tau_b: f64,
    /// Weight of the plain BCE term in the smooth loss.
    pub lambda: f64,
    /// Weight of `L_avps` in the per-segment cross-entropy variant.
    pub lambda_avps: f64,
    pub mode: Mode,
    pub variant: LossVariant,
    pub ablation: Ablation,
    pub train: TrainConfig,
}

impl Dims {
    pub fn desk() -> Self {
        Dims {
            t: 10,
            c: 6,
            d_a: 16,
            d_v: 24,
            h: 3,
            w: 3,
            d_m: 32,
            d_l: 128,
            d_p: 128,
            d_s: 128,
            d_e: 64,
            d_i: 128,
            d_f: 128,
            d_h: 64,
        }
    }

    /// Feature and category sizes of the full-scale benchmark setting.
    pub fn paper() -> Self {
        Dims {
            c: 29,
            d_a: 128,
            d_v: 512,
            h: 7,
            w: 7,
            d_l: 256,
            d_p: 256,
            d_s: 256,
            ..Dims::desk()
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Dims {
            t: 6,
            c: 3,
            d_a: 4,
            d_v: 6,
            h: 2,
            w: 2,
            d_m: 4,
            d_l: 6,
            d_p: 6,
            d_s: 5,
            d_e: 4,
            d_i: 8,
            d_f: 5,
            d_h: 4,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_dims(Dims::desk())
    }
}

impl ModelConfig {
    pub fn with_dims(dims: Dims) -> Self {
        ModelConfig {
            dims,
            background_index: dims.c - 1,
            r_s: 0.2,
            r_i: None,
            tau_psp: 0.095,
            tau_b: 0.7,
            lambda: 2.0,
            lambda_avps: 100.0,
            mode: Mode::Fully,
            variant: LossVariant::Full,
            ablation: AblationName::Full.ablation(),
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 128,
                epochs: 300,
                patience: 30,
                seed: 0,
            },
        }
    }

    pub fn desk() -> Self {
        Self::with_dims(Dims::desk())
    }

    pub fn paper() -> Self {
        Self::with_dims(Dims::paper())
    }

    pub fn tiny() -> Self {
        Self::with_dims(Dims::tiny())
    }

    pub fn r_i(&self) -> f64 {
        self.r_i.unwrap_or(match self.mode {
            Mode::Fully => 0.2,
            Mode::Weakly => 0.5,
        })
    }

    /// Length of the event representation after the two conv/pool blocks.
    pub fn event_len(&self) -> usize {
        self.dims.t / 2 / 2
    }

    /// Temporal kernel width of both extractor blocks: `ceil(T / 2)`.
    pub fn cere_kernel(&self) -> usize {
        self.dims.t.div_ceil(2)
    }

    pub fn uses_cere(&self) -> bool {
        self.ablation.escm && self.ablation.cere == CereMode::On
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let cfg = |m: String| Err(Error::Config(m));
        let sizes = [
            ("t", d.t),
            ("c", d.c),
            ("d_a", d.d_a),
            ("d_v", d.d_v),
            ("h", d.h),
            ("w", d.w),
            ("d_m", d.d_m),
            ("d_l", d.d_l),
            ("d_p", d.d_p),
            ("d_s", d.d_s),
            ("d_e", d.d_e),
            ("d_i", d.d_i),
            ("d_f", d.d_f),
            ("d_h", d.d_h),
        ];
        if let Some((k, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return cfg(format!("{k} must be >= 1"));
        }
        if d.c < 2 {
            return cfg("c must be >= 2 (one event class plus background)".into());
        }
        if self.background_index >= d.c {
            return cfg(format!("background_index {} must be < c = {}", self.background_index, d.c));
        }
        if d.d_i != 2 * d.d_e {
            return cfg(format!("d_i ({}) must equal 2 * d_e ({})", d.d_i, 2 * d.d_e));
        }
        if !d.d_l.is_multiple_of(2) {
            return cfg(format!("d_l ({}) must be even: two LSTM directions are concatenated", d.d_l));
        }
        if self.uses_cere() && d.t < 4 {
            return cfg(format!("t ({}) must be >= 4 for two pooling halvings", d.t));
        }
        if !(self.tau_b > 0.0 && self.tau_b < 1.0) {
            return cfg(format!("tau_b ({}) must lie in (0, 1)", self.tau_b));
        }
        if !(0.0..1.0).contains(&self.tau_psp) {
            return cfg(format!("tau_psp ({}) must lie in [0, 1)", self.tau_psp));
        }
        if self.lambda <= 0.0 || self.lambda_avps <= 0.0 {
            return cfg("lambda and lambda_avps must be > 0".into());
        }
        for (k, r) in [("r_s", self.r_s), ("r_i", self.r_i())] {
            if !(0.0..1.0).contains(&r) {
                return cfg(format!("{k} ({r}) must lie in [0, 1)"));
            }
        }
        let a = self.ablation;
        if !a.escm && (a.cere != CereMode::On || !a.shared_cere) {
            return cfg("cere/shared_cere ablations require escm = on".into());
        }
        if a.cere == CereMode::ZeroInit && !a.shared_cere {
            return cfg("shared_cere = off has no effect with cere = zero_init".into());
        }
        let variant_ok = match self.mode {
            Mode::Fully => matches!(self.variant, LossVariant::Full | LossVariant::CeAvps | LossVariant::CtOnly),
            Mode::Weakly => matches!(self.variant, LossVariant::Full | LossVariant::BceOnly),
        };
        if !variant_ok {
            return cfg(format!("loss variant {} is not defined for mode {}", self.variant, self.mode));
        }
        if self.train.batch_size == 0 {
            return cfg("batch_size must be >= 1".into());
        }
        if self.train.lr.is_nan() || self.train.lr <= 0.0 {
            return cfg("lr must be > 0".into());
        }
        Ok(())
    }

    /// Which named ablation this configuration corresponds to, if any.
    pub fn ablation_name(&self) -> Option<AblationName> {
        AblationName::ALL.into_iter().find(|a| a.ablation() == self.ablation)
    }

    pub const KEYS: [&'static str; 31] = [
        "t",
        "c",
        "d_a",
        "d_v",
        "h",
        "w",
        "d_m",
        "d_l",
        "d_p",
        "d_s",
        "d_e",
        "d_i",
        "d_f",
        "d_h",
        "background_index",
        "r_s",
        "r_i",
        "tau_psp",
        "tau_b",
        "lambda",
        "lambda_avps",
        "mode",
        "variant",
        "escm",
        "cere",
        "shared_cere",
        "lr",
        "batch_size",
        "epochs",
        "patience",
        "seed",
    ];

    /// Set one field from its textual `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "on" | "true" | "1" => Ok(true),
                "off" | "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!("invalid value `{v}` for `{key}` (on|off)"))),
            }
        }
        let d = &mut self.dims;
        match key {
            "t" => d.t = num(key, value)?,
            "c" => d.c = num(key, value)?,
            "d_a" => d.d_a = num(key, value)?,
            "d_v" => d.d_v = num(key, value)?,
            "h" => d.h = num(key, value)?,
            "w" => d.w = num(key, value)?,
            "d_m" => d.d_m = num(key, value)?,
            "d_l" => d.d_l = num(key, value)?,
            "d_p" => d.d_p = num(key, value)?,
            "d_s" => d.d_s = num(key, value)?,
            "d_e" => d.d_e = num(key, value)?,
            "d_i" => d.d_i = num(key, value)?,
            "d_f" => d.d_f = num(key, value)?,
            "d_h" => d.d_h = num(key, value)?,
            "background_index" => self.background_index = num(key, value)?,
            "r_s" => self.r_s = num(key, value)?,
            "r_i" => self.r_i = Some(num(key, value)?),
            "tau_psp" => self.tau_psp = num(key, value)?,
            "tau_b" => self.tau_b = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "lambda_avps" => self.lambda_avps = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "escm" => self.ablation.escm = flag(key, value)?,
            "cere" => {
                self.ablation.cere = match value {
                    "on" => CereMode::On,
                    "zero_init" => CereMode::ZeroInit,
                    _ => return Err(Error::Config(format!("invalid value `{value}` for `cere` (on|zero_init)"))),
                }
            }
            "shared_cere" => self.ablation.shared_cere = flag(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "patience" => self.train.patience = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dims;
        let onoff = |b: bool| if b { "on" } else { "off" }.to_string();
        let values = [
            d.t.to_string(),
            d.c.to_string(),
            d.d_a.to_string(),
            d.d_v.to_string(),
            d.h.to_string(),
            d.w.to_string(),
            d.d_m.to_string(),
            d.d_l.to_string(),
            d.d_p.to_string(),
            d.d_s.to_string(),
            d.d_e.to_string(),
            d.d_i.to_string(),
            d.d_f.to_string(),
            d.d_h.to_string(),
            self.background_index.to_string(),
            self.r_s.to_string(),
            self.r_i().to_string(),
            self.tau_psp.to_string(),
            self.tau_b.to_string(),
            self.lambda.to_string(),
            self.lambda_avps.to_string(),
            self.mode.to_string(),
            self.variant.to_string(),
            onoff(self.ablation.escm),
            match self.ablation.cere {
                CereMode::On => "on".into(),
                CereMode::ZeroInit => "zero_init".into(),
            },
            onoff(self.ablation.shared_cere),
            self.train.lr.to_string(),
            self.train.batch_size.to_string(),
            self.train.epochs.to_string(),
            self.train.patience.to_string(),
            self.train.seed.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    /// `key = value` lines, parseable by [`Self::from_text`].
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parse a flat `key = value` document (`#` starts a comment) on top of `base`.
    pub fn from_text(base: ModelConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)));
            };
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Fully => "fully",
            Mode::Weakly => "weakly",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fully" => Ok(Mode::Fully),
            "weakly" => Ok(Mode::Weakly),
            _ => Err(Error::Config(format!("unknown mode `{s}` (fully|weakly)"))),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::Full => "full",
            LossVariant::CeAvps => "ce_avps",
            LossVariant::CtOnly => "c_t_only",
            LossVariant::BceOnly => "bce_only",
        })
    }
}

impl FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossVariant::Full),
            "ce_avps" => Ok(LossVariant::CeAvps),
            "c_t_only" => Ok(LossVariant::CtOnly),
            "bce_only" => Ok(LossVariant::BceOnly),
            _ => Err(Error::Config(format!("unknown loss variant `{s}` (full|ce_avps|c_t_only|bce_only)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        let p = ModelConfig::paper();
        assert_eq!((p.dims.d_a, p.dims.d_v, p.dims.h, p.dims.w, p.dims.t), (128, 512, 7, 7, 10));
    }

    #[test]
    fn desk_schedule_gives_two_event_steps() {
        let c = ModelConfig::desk();
        assert_eq!(c.cere_kernel(), 5);
        assert_eq!(c.event_len(), 2);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::tiny();
        c.mode = Mode::Weakly;
        c.ablation = AblationName::NoCommonCere.ablation();
        c.train.lr = 3.5e-4;
        let back = ModelConfig::from_text(ModelConfig::desk(), &c.to_text()).unwrap();
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.r_i(), 0.5);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_constraints() {
        assert!(ModelConfig::from_text(ModelConfig::desk(), "bogus = 1").is_err());
        let mut c = ModelConfig::desk();
        c.dims.d_i = 100;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("d_i"), "{err}");
        let mut c = ModelConfig::desk();
        c.tau_b = 1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.mode = Mode::Weakly;
        c.variant = LossVariant::CeAvps;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.ablation.escm = false;
        c.ablation.shared_cere = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_defaults_for_dropout() {
        let mut c = ModelConfig::desk();
        assert_eq!(c.r_i(), 0.2);
        c.mode = Mode::Weakly;
        assert_eq!(c.r_i(), 0.5);
        assert_eq!(c.lambda, 2.0);
    }
}
