use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::strategy::{
    ExactStrategy, GlobalStrategy, ReuseStrategy, Strategy, TapStrategy, ThresholdStrategy,
};
use crate::error::{Error, Result};
use crate::predictor::{FamilyConfig, PredictorSpec};
use crate::selector::ProxyMetric;

/// Everything a builder may read. Each strategy picks the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyParams {
    pub family: FamilyConfig,
    pub metric: ProxyMetric,
    /// Predictor used by the `global` strategy.
    pub global: PredictorSpec,
    /// Accumulated-change threshold used by the `threshold` strategy.
    pub threshold: f64,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            family: FamilyConfig::default(),
            metric: ProxyMetric::default(),
            global: PredictorSpec::Taylor {
                order: 2,
                horizon_offset: 0,
            },
            threshold: 1.0,
        }
    }
}

pub type StrategyBuilder = Arc<dyn Fn(&StrategyParams) -> Result<Box<dyn Strategy>> + Send + Sync>;

/// Strategies addressable by name.
#[derive(Clone)]
pub struct StrategyRegistry {
    builders: BTreeMap<String, StrategyBuilder>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    /// `exact`, `reuse`, `global`, `threshold` and `tap`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("exact", |_| Ok(Box::new(ExactStrategy)));
        r.register("reuse", |_| Ok(Box::new(ReuseStrategy)));
        r.register("global", |p| Ok(Box::new(GlobalStrategy::new(p.global))));
        r.register("threshold", |p| Ok(Box::new(ThresholdStrategy::new(p.threshold)?)));
        r.register("tap", |p| Ok(Box::new(TapStrategy::from_config(&p.family, p.metric)?)));
        r
    }

    pub fn register<F>(&mut self, name: &str, builder: F)
    where
        F: Fn(&StrategyParams) -> Result<Box<dyn Strategy>> + Send + Sync + 'static,
    {
        self.builders.insert(name.to_ascii_lowercase(), Arc::new(builder));
    }

    pub fn build(&self, name: &str, params: &StrategyParams) -> Result<Box<dyn Strategy>> {
        let key = name.trim().to_ascii_lowercase();
        let builder = self
            .builders
            .get(&key)
            .ok_or_else(|| Error::UnknownStrategy(name.to_string()))?;
        builder(params)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.builders.contains_key(&name.trim().to_ascii_lowercase())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
