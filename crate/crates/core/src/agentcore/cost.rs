use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Dollars per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPrice {
    pub input: f64,
    pub output: f64,
}

impl ModelPrice {
    pub fn max(&self) -> f64 {
        self.input.max(self.output)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable {
    prices: BTreeMap<String, ModelPrice>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CostError {
    #[error("no price configured for model `{0}`")]
    UnknownModel(String),
    #[error("price for `{0}` must be positive")]
    NonPositive(String),
}

impl PriceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, model: &str, input: f64, output: f64) -> Self {
        self.prices.insert(model.to_string(), ModelPrice { input, output });
        self
    }

    pub fn price(&self, model: &str) -> Option<ModelPrice> {
        self.prices.get(model).copied()
    }

    /// Dollars spent on `prompt` + `completion` tokens of `model`.
    pub fn cost(&self, model: &str, prompt: u64, completion: u64) -> Result<f64, CostError> {
        let p = self.price(model).ok_or_else(|| CostError::UnknownModel(model.into()))?;
        Ok((prompt as f64 * p.input + completion as f64 * p.output) / 1e6)
    }

    /// Token ceiling a dollar budget buys when every token is charged at the
    /// most expensive rate among `models`. Conservative: spending up to the
    /// ceiling can never exceed the budget.
    pub fn token_ceiling<'a>(
        &self,
        dollars: f64,
        models: impl IntoIterator<Item = &'a str>,
    ) -> Result<u64, CostError> {
        let mut worst: f64 = 0.0;
        for m in models {
            let p = self.price(m).ok_or_else(|| CostError::UnknownModel(m.into()))?;
            if p.max() <= 0.0 {
                return Err(CostError::NonPositive(m.into()));
            }
            worst = worst.max(p.max());
        }
        if worst == 0.0 {
            return Ok(0);
        }
        Ok((dollars.max(0.0) * 1e6 / worst).floor() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanBudget {
    pub minutes: u64,
    pub dollars: f64,
}

impl ScanBudget {
    pub const DELTA: ScanBudget = ScanBudget { minutes: 120, dollars: 150.0 };
    pub const FULL: ScanBudget = ScanBudget { minutes: 240, dollars: 400.0 };
}
