//! Experiment configuration: a flat `key = value` file with dotted keys.
//!
//! ```text
//! # PS-ada on the hard-skewed population
//! arm = ps-ada
//! steps = 300
//! controller.alpha = 0.05
//! population.preset = hard-skewed
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors that name the key.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::advantage::{GroupReduction, LengthNormalization, LossOptions};
use crate::controller::{ControllerParams, CooldownUnit};
use crate::env::PopulationSpec;
use crate::group::{classify_bucket, Bucket};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    Baseline,
    PsFix,
    PsAdaHardOnly,
    PsAda,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::PsFix, Arm::PsAdaHardOnly, Arm::PsAda];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::PsFix => "ps-fix",
            Arm::PsAdaHardOnly => "ps-ada-hard-only",
            Arm::PsAda => "ps-ada",
        }
    }

    /// Whether fresh groups in `bucket` seed a prefix under this arm.
    pub fn replays(self, bucket: Bucket) -> bool {
        match self {
            Arm::Baseline => false,
            Arm::PsAdaHardOnly => bucket.is_hard(),
            Arm::PsFix | Arm::PsAda => bucket.is_skewed(),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown arm `{s}` (expected baseline, ps-fix, ps-ada-hard-only or ps-ada)"))
    }
}

/// When a prefix saved at step `t` is replayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RerolloutTiming {
    #[default]
    SameStep,
    NextStep,
}

/// Which ratio a rerollout reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RatioSource {
    /// The bucket's current ratio, including updates made earlier in the step.
    #[default]
    Live,
    /// The ratio the bucket had when the step began.
    Snapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PopulationPreset {
    #[default]
    HardSkewed,
    Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationConfig {
    pub preset: PopulationPreset,
    pub size: usize,
    /// Fresh pass probability for the `point` preset.
    pub p0: f64,
    pub sensitivity: f64,
    pub sensitivity_sd: f64,
    pub length_min: u32,
    pub length_max: u32,
    pub mirror: bool,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            preset: PopulationPreset::HardSkewed,
            size: 512,
            p0: 0.5,
            sensitivity: 3.5,
            sensitivity_sd: 0.0,
            length_min: 8,
            length_max: 32,
            mirror: false,
        }
    }
}

impl PopulationConfig {
    pub fn spec(&self) -> PopulationSpec {
        let mut spec = match self.preset {
            PopulationPreset::HardSkewed => PopulationSpec::hard_skewed(self.size),
            PopulationPreset::Point => PopulationSpec::point(self.size, self.p0, self.sensitivity),
        };
        spec.sensitivity_mean = self.sensitivity;
        spec.sensitivity_sd = self.sensitivity_sd;
        spec.length_range = self.length_min..=self.length_max;
        spec.mirror = self.mirror;
        spec
    }
}

/// Optimizer settings of the original training recipe. They are parsed and
/// echoed but nothing consumes them.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerFlags {
    pub clip_high: f64,
    pub learning_rate: f64,
    pub compact_filtering: bool,
}

impl Default for OptimizerFlags {
    fn default() -> Self {
        Self {
            clip_high: 0.28,
            learning_rate: 1e-6,
            compact_filtering: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub arm: Arm,
    pub group_size: u32,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Ratio used by `ps-fix`.
    pub fixed_ratio: f64,
    pub controller: ControllerParams,
    pub population: PopulationConfig,
    pub loss: LossOptions,
    pub rerollout: RerolloutTiming,
    pub ratio_source: RatioSource,
    pub optimizer: OptimizerFlags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arm: Arm::PsAda,
            group_size: 8,
            batch_size: 64,
            steps: 300,
            seed: 1,
            fixed_ratio: 0.5,
            controller: ControllerParams::default(),
            population: PopulationConfig::default(),
            loss: LossOptions::default(),
            rerollout: RerolloutTiming::default(),
            ratio_source: RatioSource::default(),
            optimizer: OptimizerFlags::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

fn parse_choice<T: Copy>(key: &str, raw: &str, choices: &[(&str, T)]) -> Result<T> {
    choices
        .iter()
        .find(|(name, _)| *name == raw)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            let names: Vec<&str> = choices.iter().map(|(n, _)| *n).collect();
            Error::config(key, format!("`{raw}` is not one of {}", names.join(", ")))
        })
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parse a configuration, starting from the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "key given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assign one key. Does not validate cross-field constraints.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.controller;
        let p = &mut self.population;
        match key {
            "arm" => self.arm = v.parse().map_err(|e: String| Error::config(key, e))?,
            "group_size" => self.group_size = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "steps" => self.steps = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "fixed_ratio" => self.fixed_ratio = parse_value(key, v)?,

            "controller.alpha" => c.alpha = parse_value(key, v)?,
            "controller.deadzone" => c.deadzone = parse_value(key, v)?,
            "controller.step" => c.step = parse_value(key, v)?,
            "controller.min_ratio" => c.min_ratio = parse_value(key, v)?,
            "controller.max_ratio" => c.max_ratio = parse_value(key, v)?,
            "controller.cooldown" => c.cooldown = parse_value(key, v)?,
            "controller.cooldown_unit" => {
                c.cooldown_unit = parse_choice(
                    key,
                    v,
                    &[("updates", CooldownUnit::Updates), ("steps", CooldownUnit::Steps)],
                )?
            }
            "controller.initial_ratio" => c.initial_ratio = parse_value(key, v)?,
            "controller.initial_ema" => c.initial_ema = parse_value(key, v)?,

            "population.preset" => {
                p.preset = parse_choice(
                    key,
                    v,
                    &[("hard-skewed", PopulationPreset::HardSkewed), ("point", PopulationPreset::Point)],
                )?
            }
            "population.size" => p.size = parse_value(key, v)?,
            "population.p0" => p.p0 = parse_value(key, v)?,
            "population.sensitivity" => p.sensitivity = parse_value(key, v)?,
            "population.sensitivity_sd" => p.sensitivity_sd = parse_value(key, v)?,
            "population.length_min" => p.length_min = parse_value(key, v)?,
            "population.length_max" => p.length_max = parse_value(key, v)?,
            "population.mirror" => p.mirror = parse_value(key, v)?,

            "loss.normalization" => {
                self.loss.normalization = parse_choice(
                    key,
                    v,
                    &[
                        ("none", LengthNormalization::None),
                        ("unmasked-tokens", LengthNormalization::UnmaskedTokens),
                    ],
                )?
            }
            "loss.reduction" => {
                self.loss.reduction =
                    parse_choice(key, v, &[("sum", GroupReduction::Sum), ("mean", GroupReduction::Mean)])?
            }

            "schedule.rerollout" => {
                self.rerollout = parse_choice(
                    key,
                    v,
                    &[("same-step", RerolloutTiming::SameStep), ("next-step", RerolloutTiming::NextStep)],
                )?
            }
            "schedule.ratio" => {
                self.ratio_source =
                    parse_choice(key, v, &[("live", RatioSource::Live), ("snapshot", RatioSource::Snapshot)])?
            }

            "optimizer.clip_high" => self.optimizer.clip_high = parse_value(key, v)?,
            "optimizer.learning_rate" => self.optimizer.learning_rate = parse_value(key, v)?,
            "optimizer.compact_filtering" => self.optimizer.compact_filtering = parse_value(key, v)?,

            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let Err(e) = classify_bucket(0, self.group_size) {
            return Err(Error::config("group_size", e.to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let bounds = ControllerParams::default();
        if !(bounds.min_ratio..=bounds.max_ratio).contains(&self.fixed_ratio) {
            return Err(Error::config(
                "fixed_ratio",
                format!("{} outside [{}, {}]", self.fixed_ratio, bounds.min_ratio, bounds.max_ratio),
            ));
        }
        self.controller
            .check()
            .map_err(|(field, msg)| Error::config(format!("controller.{field}"), msg))?;
        let p = &self.population;
        if p.size == 0 {
            return Err(Error::config("population.size", "must be positive"));
        }
        if self.batch_size > p.size {
            return Err(Error::config(
                "batch_size",
                format!("{} exceeds population.size {}", self.batch_size, p.size),
            ));
        }
        if !(0.0..=1.0).contains(&p.p0) {
            return Err(Error::config("population.p0", format!("{} outside [0, 1]", p.p0)));
        }
        if !(p.sensitivity >= 0.0 && p.sensitivity.is_finite()) {
            return Err(Error::config("population.sensitivity", "must be finite and >= 0"));
        }
        if !(p.sensitivity_sd >= 0.0 && p.sensitivity_sd.is_finite()) {
            return Err(Error::config("population.sensitivity_sd", "must be finite and >= 0"));
        }
        if p.length_min < 2 {
            return Err(Error::config("population.length_min", "must be at least 2"));
        }
        if p.length_max < p.length_min {
            return Err(Error::config("population.length_max", "below population.length_min"));
        }
        Ok(())
    }

    /// Controller parameters the arm actually runs with. `ps-fix` uses the
    /// defaults with a zero step and `fixed_ratio` as the starting ratio.
    pub fn effective_controller(&self) -> ControllerParams {
        match self.arm {
            Arm::PsFix => ControllerParams {
                step: 0.0,
                initial_ratio: self.fixed_ratio,
                ..ControllerParams::default()
            },
            _ => self.controller.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_text() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn parses_every_section() {
        let text = "
            arm = ps-ada-hard-only   # trailing comment
            group_size = 16
            batch_size = 32
            steps = 12
            seed = 9
            controller.alpha = 0.1
            controller.cooldown = 3
            controller.cooldown_unit = steps
            population.preset = point
            population.p0 = 0.2
            population.mirror = true
            loss.normalization = unmasked-tokens
            loss.reduction = mean
            schedule.rerollout = next-step
            schedule.ratio = snapshot
            optimizer.compact_filtering = false
        ";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.arm, Arm::PsAdaHardOnly);
        assert_eq!(cfg.group_size, 16);
        assert_eq!(cfg.controller.alpha, 0.1);
        assert_eq!(cfg.controller.cooldown_unit, CooldownUnit::Steps);
        assert_eq!(cfg.population.preset, PopulationPreset::Point);
        assert!(cfg.population.mirror);
        assert_eq!(cfg.loss.reduction, GroupReduction::Mean);
        assert_eq!(cfg.rerollout, RerolloutTiming::NextStep);
        assert_eq!(cfg.ratio_source, RatioSource::Snapshot);
        assert!(!cfg.optimizer.compact_filtering);
    }

    fn err_key(text: &str) -> String {
        match ExperimentConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(err_key("controller.gain = 1"), "controller.gain");
        assert_eq!(err_key("steps = many"), "steps");
        assert_eq!(err_key("arm = ps-best"), "arm");
        assert_eq!(err_key("seed = 1\nseed = 2"), "seed");
        assert_eq!(err_key("group_size = 7"), "group_size");
        assert_eq!(err_key("batch_size = 1000"), "batch_size");
        assert_eq!(err_key("controller.min_ratio = 0.6"), "controller.initial_ratio");
        assert_eq!(err_key("controller.alpha = 0"), "controller.alpha");
        assert_eq!(err_key("population.length_min = 1"), "population.length_min");
        assert_eq!(err_key("just words"), "line 1");
    }

    #[test]
    fn ps_fix_ignores_controller_step() {
        let cfg = ExperimentConfig::parse("arm = ps-fix\nfixed_ratio = 0.3\ncontroller.step = 0.2").unwrap();
        let c = cfg.effective_controller();
        assert_eq!(c.step, 0.0);
        assert_eq!(c.initial_ratio, 0.3);
    }

    #[test]
    fn arm_routing() {
        let hard = classify_bucket(1, 8).unwrap();
        let easy = classify_bucket(7, 8).unwrap();
        let bal = classify_bucket(4, 8).unwrap();
        assert!(!Arm::Baseline.replays(hard));
        assert!(Arm::PsAdaHardOnly.replays(hard) && !Arm::PsAdaHardOnly.replays(easy));
        assert!(Arm::PsAda.replays(easy) && !Arm::PsAda.replays(bal));
        for a in Arm::ALL {
            assert_eq!(a.name().parse::<Arm>().unwrap(), a);
        }
    }
}
