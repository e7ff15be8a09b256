//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Keys are dotted; inline
//! scenarios use `token_class.<i>.<field>` tables, one per class, and assign
//! classes to tokens round-robin.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::cache::Schedule;
use crate::engine::{EngineConfig, StrategyParams};
use crate::error::{Error, Result};
use crate::predictor::{FamilyConfig, PredictorSpec};
use crate::selector::{MetricKind, ProxyMetric};
use crate::simulator::{ProbeMode, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Heterogeneous,
    RoughSmooth,
    Linear,
    Quadratic,
    /// One trajectory per token class, broadcast over batch and channels.
    Inline(Vec<Trajectory>),
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Heterogeneous => "heterogeneous",
            Scenario::RoughSmooth => "rough_smooth",
            Scenario::Linear => "linear",
            Scenario::Quadratic => "quadratic",
            Scenario::Inline(_) => "inline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModulationKind {
    Identity,
    Drifting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub batch: usize,
    pub tokens: usize,
    pub channels: usize,
    pub steps: usize,
    pub window: usize,
    pub warmup: usize,
    pub family: FamilyConfig,
    pub metric: ProxyMetric,
    pub strategy: String,
    pub global: PredictorSpec,
    pub threshold: f64,
    pub scenario: Scenario,
    pub probe_mode: ProbeMode,
    pub modulation: ModulationKind,
    pub seed: Option<u64>,
    pub probe_fraction: f64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            batch: 2,
            tokens: 64,
            channels: 16,
            steps: 50,
            window: 5,
            warmup: 3,
            family: FamilyConfig::default(),
            metric: ProxyMetric::default(),
            strategy: "tap".into(),
            global: StrategyParams::default().global,
            threshold: StrategyParams::default().threshold,
            scenario: Scenario::Heterogeneous,
            probe_mode: ProbeMode::Modulated,
            modulation: ModulationKind::Drifting,
            seed: None,
            probe_fraction: 0.0,
            out: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_positive(key: &str, value: &str) -> Result<usize> {
    let v: usize = parse_num(key, value)?;
    if v == 0 {
        return Err(Error::config(key, "must be at least 1"));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|s| parse_num::<f64>(key, s.trim()))
        .collect()
}

/// Fields of one inline token class, collected before assembly.
#[derive(Debug, Default, Clone)]
struct ClassTable(BTreeMap<String, String>);

impl ClassTable {
    fn get<T: std::str::FromStr>(&self, prefix: &str, field: &str, default: Option<T>) -> Result<T> {
        let key = format!("{prefix}.{field}");
        match self.0.get(field) {
            Some(v) => parse_num(&key, v),
            None => default.ok_or_else(|| Error::config(key, "missing")),
        }
    }

    fn build(&self, idx: usize) -> Result<Trajectory> {
        let prefix = format!("token_class.{idx}");
        let kind_key = format!("{prefix}.kind");
        let kind = self.0.get("kind").ok_or_else(|| Error::config(&kind_key, "missing"))?;
        let allowed: &[&str] = match kind.as_str() {
            "constant" => &["kind", "value"],
            "polynomial" => &["kind", "coefficients"],
            "sinusoid" => &["kind", "amplitude", "frequency", "phase", "decay"],
            "jump" => &["kind", "jump_step", "before", "after"],
            other => {
                return Err(Error::config(
                    kind_key,
                    format!("unknown kind `{other}` (constant, polynomial, sinusoid, jump)"),
                ))
            }
        };
        if let Some(extra) = self.0.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::config(
                format!("{prefix}.{extra}"),
                format!("not a field of `{kind}`"),
            ));
        }
        Ok(match kind.as_str() {
            "constant" => Trajectory::constant(self.get(&prefix, "value", None)?),
            "polynomial" => {
                let key = format!("{prefix}.coefficients");
                let raw = self.0.get("coefficients").ok_or_else(|| Error::config(&key, "missing"))?;
                Trajectory::Polynomial {
                    coefficients: parse_list(&key, raw)?,
                }
            }
            "sinusoid" => Trajectory::Sinusoid {
                amplitude: self.get(&prefix, "amplitude", None)?,
                frequency: self.get(&prefix, "frequency", None)?,
                phase: self.get(&prefix, "phase", Some(0.0))?,
                decay: self.get(&prefix, "decay", Some(0.0))?,
            },
            _ => Trajectory::PiecewiseJump {
                jump_step: self.get(&prefix, "jump_step", None)?,
                before: self.get(&prefix, "before", None)?,
                after: self.get(&prefix, "after", None)?,
            },
        })
    }
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut classes: BTreeMap<usize, ClassTable> = BTreeMap::new();
        let mut scenario_name: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(rest) = key.strip_prefix("token_class.") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::config(key, "expected token_class.<index>.<field>"))?;
                let idx: usize = parse_num(key, idx)?;
                classes.entry(idx).or_default().0.insert(field.to_string(), value.to_string());
            } else if key == "scenario" {
                scenario_name = Some(value.to_string());
            } else {
                cfg.set(key, value)?;
            }
        }
        match scenario_name.as_deref() {
            Some("inline") | None if !classes.is_empty() => {
                let mut list = Vec::with_capacity(classes.len());
                for (expected, (idx, table)) in classes.iter().enumerate() {
                    if *idx != expected {
                        return Err(Error::config(
                            format!("token_class.{expected}"),
                            "class indices must be contiguous from 0",
                        ));
                    }
                    list.push(table.build(*idx)?);
                }
                cfg.scenario = Scenario::Inline(list);
            }
            Some("inline") => return Err(Error::config("scenario", "inline scenario without token_class entries")),
            Some(name) => {
                if !classes.is_empty() {
                    return Err(Error::config(
                        "token_class",
                        format!("token classes given but scenario is `{name}`"),
                    ));
                }
                cfg.set("scenario", name)?;
            }
            None => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key. Used by the parser and for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch" => self.batch = parse_positive(key, value)?,
            "tokens" => self.tokens = parse_positive(key, value)?,
            "channels" => self.channels = parse_positive(key, value)?,
            "steps" | "T" => self.steps = parse_positive(key, value)?,
            "window" | "N" => self.window = parse_positive(key, value)?,
            "warmup" | "W" => self.warmup = parse_positive(key, value)?,
            "family.order_low" | "O_l" => self.family.order_low = parse_num(key, value)?,
            "family.order_high" | "O_r" => self.family.order_high = parse_num(key, value)?,
            "family.lambda" | "lambda" => self.family.lambda = parse_num(key, value)?,
            "family.delta" | "delta" => self.family.delta = parse_positive(key, value)?,
            "family.hermite" => self.family.include_hermite = parse_bool(key, value)?,
            "family.hermite_order" => self.family.hermite_order = parse_num(key, value)?,
            "family.hermite_window" => self.family.hermite_window = parse_positive(key, value)?,
            "metric" => {
                self.metric.kind = MetricKind::parse(value)
                    .ok_or_else(|| Error::config(key, format!("unknown metric `{value}` (cosine, l1, mse)")))?
            }
            "metric.epsilon" => self.metric.epsilon = parse_num(key, value)?,
            "strategy" => self.strategy = value.trim().to_ascii_lowercase(),
            "global.kind" => {
                self.global = match value {
                    "taylor" => PredictorSpec::Taylor {
                        order: self.global.order(),
                        horizon_offset: 0,
                    },
                    "hermite" => PredictorSpec::Hermite {
                        order: self.global.order(),
                        window: self.global.order() + 1,
                    },
                    _ => return Err(Error::config(key, format!("unknown predictor `{value}` (taylor, hermite)"))),
                }
            }
            "global.order" => {
                let order: usize = parse_num(key, value)?;
                match &mut self.global {
                    PredictorSpec::Taylor { order: o, .. } => *o = order,
                    PredictorSpec::Hermite { order: o, window } => {
                        *o = order;
                        *window = (*window).max(order + 1);
                    }
                }
            }
            "global.offset" => match &mut self.global {
                PredictorSpec::Taylor { horizon_offset, .. } => *horizon_offset = parse_num(key, value)?,
                PredictorSpec::Hermite { .. } => return Err(Error::config(key, "only taylor predictors have an offset")),
            },
            "global.window" => match &mut self.global {
                PredictorSpec::Hermite { window, .. } => *window = parse_positive(key, value)?,
                PredictorSpec::Taylor { .. } => return Err(Error::config(key, "only hermite predictors have a window")),
            },
            "threshold" => self.threshold = parse_num(key, value)?,
            "scenario" => {
                self.scenario = match value {
                    "heterogeneous" => Scenario::Heterogeneous,
                    "rough_smooth" => Scenario::RoughSmooth,
                    "linear" => Scenario::Linear,
                    "quadratic" => Scenario::Quadratic,
                    "inline" => return Err(Error::config(key, "inline scenarios are defined with token_class entries")),
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("unknown scenario `{value}` (heterogeneous, rough_smooth, linear, quadratic, inline)"),
                        ))
                    }
                }
            }
            "probe_mode" => {
                self.probe_mode = ProbeMode::parse(value).ok_or_else(|| {
                    Error::config(key, format!("unknown probe mode `{value}` (modulated, raw_input, truth_residual)"))
                })?
            }
            "modulation" => {
                self.modulation = match value {
                    "identity" => ModulationKind::Identity,
                    "drifting" => ModulationKind::Drifting,
                    _ => return Err(Error::config(key, format!("unknown modulation `{value}` (identity, drifting)"))),
                }
            }
            "seed" => self.seed = Some(parse_num(key, value)?),
            "probe_fraction" => self.probe_fraction = parse_num(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Cross-field checks, reported against the key most likely at fault.
    pub fn validate(&self) -> Result<()> {
        self.schedule().map_err(|e| Error::config("warmup", e.to_string()))?;
        self.family.validate().map_err(|e| Error::config("family", e.to_string()))?;
        self.metric.validate().map_err(|e| Error::config("metric.epsilon", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.probe_fraction) {
            return Err(Error::config("probe_fraction", "must lie in [0, 1]"));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::config("threshold", "must be non-negative"));
        }
        if let PredictorSpec::Hermite { order, window } = self.global {
            if window < order + 1 {
                return Err(Error::config("global.window", "must be at least order + 1"));
            }
        }
        if !crate::engine::StrategyRegistry::with_builtins().contains(&self.strategy) {
            return Err(Error::config("strategy", format!("unknown strategy `{}`", self.strategy)));
        }
        if let Scenario::Inline(classes) = &self.scenario {
            for (i, c) in classes.iter().enumerate() {
                if let Trajectory::PiecewiseJump { jump_step, .. } = c {
                    if *jump_step > self.steps {
                        return Err(Error::config(
                            format!("token_class.{i}.jump_step"),
                            format!("beyond {} steps", self.steps),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.tokens, self.channels)
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.steps, self.window, self.warmup)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::config("seed", "required (set it in the config or pass --seed)"))
    }

    pub fn strategy_params(&self) -> StrategyParams {
        StrategyParams {
            family: self.family,
            metric: self.metric,
            global: self.global,
            threshold: self.threshold,
        }
    }

    pub fn engine_config(&self) -> Result<EngineConfig> {
        let mut e = EngineConfig::new(self.schedule()?, &self.strategy).with_params(self.strategy_params());
        e.seed = self.seed()?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::parse(
            "# demo\nsteps = 20\nwindow = 4 # trailing\nmetric = l1\nseed = 9\nfamily.hermite = true\n",
        )
        .unwrap();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.window, 4);
        assert_eq!(cfg.metric.kind, MetricKind::L1);
        assert_eq!(cfg.seed, Some(9));
        assert!(cfg.family.include_hermite);
        assert_eq!(cfg.tokens, 64);
    }

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("not a config error: {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(ExperimentConfig::parse("window = five").unwrap_err()), "window");
        assert_eq!(key_of(ExperimentConfig::parse("colour = red").unwrap_err()), "colour");
        assert_eq!(key_of(ExperimentConfig::parse("metric = l7").unwrap_err()), "metric");
        assert_eq!(key_of(ExperimentConfig::parse("scenario = nope").unwrap_err()), "scenario");
        assert_eq!(key_of(ExperimentConfig::parse("strategy = speca").unwrap_err()), "strategy");
        assert_eq!(key_of(ExperimentConfig::parse("just words").unwrap_err()), "line 1");
        assert_eq!(key_of(ExperimentConfig::parse("steps = 2\nwarmup = 3").unwrap_err()), "warmup");
        assert_eq!(
            key_of(ExperimentConfig::parse("token_class.0.kind = sinusoid\ntoken_class.0.amplitude = 1").unwrap_err()),
            "token_class.0.frequency"
        );
        assert_eq!(
            key_of(ExperimentConfig::parse("token_class.0.kind = constant\ntoken_class.0.value = 1\ntoken_class.0.phase = 2").unwrap_err()),
            "token_class.0.phase"
        );
        assert_eq!(
            key_of(ExperimentConfig::parse("token_class.1.kind = constant\ntoken_class.1.value = 1").unwrap_err()),
            "token_class.0"
        );
    }

    #[test]
    fn inline_scenario() {
        let cfg = ExperimentConfig::parse(
            "token_class.0.kind = sinusoid\n\
             token_class.0.amplitude = 1.5\n\
             token_class.0.frequency = 2\n\
             token_class.1.kind = polynomial\n\
             token_class.1.coefficients = 1, 0.5\n\
             token_class.2.kind = jump\n\
             token_class.2.jump_step = 10\n\
             token_class.2.before = 0\n\
             token_class.2.after = 1\n",
        )
        .unwrap();
        let Scenario::Inline(classes) = &cfg.scenario else {
            panic!("expected inline scenario")
        };
        assert_eq!(classes.len(), 3);
        assert_eq!(
            classes[1],
            Trajectory::Polynomial {
                coefficients: vec![1.0, 0.5]
            }
        );
        assert!(matches!(classes[0], Trajectory::Sinusoid { phase, .. } if phase == 0.0));
    }

    #[test]
    fn seed_is_required_for_engine_config() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(key_of(cfg.engine_config().unwrap_err()), "seed");
    }

    #[test]
    fn global_predictor_keys() {
        let cfg = ExperimentConfig::parse("global.order = 1\nglobal.offset = 3").unwrap();
        assert_eq!(
            cfg.global,
            PredictorSpec::Taylor {
                order: 1,
                horizon_offset: 3
            }
        );
        let cfg = ExperimentConfig::parse("global.kind = hermite\nglobal.order = 2\nglobal.window = 4").unwrap();
        assert_eq!(cfg.global, PredictorSpec::Hermite { order: 2, window: 4 });
    }
}
