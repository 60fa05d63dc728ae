//! Experiment configuration: a JSON file, overridden field by field by
//! command-line flags of the same name.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nosa_core::attention::{AttentionConfig, BudgetAccounting, Selector, VariantKind};
use nosa_core::sim::{CostModelParams, Policy, SimConfig};

use crate::CliError;

/// Every knob of every command. Unset fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub n_head: usize,
    pub n_kv_head: usize,
    pub d_head: usize,
    pub n_b: usize,
    pub n_s: usize,
    pub n_w: usize,
    pub k: usize,
    pub k_q: usize,
    pub k_e: usize,
    pub accounting: BudgetAccounting,
    pub variant: VariantKind,
    pub selector: Selector,
    /// Single policy to simulate; all three when absent.
    pub policy: Option<Policy>,
    /// Fixed batch size; otherwise each policy is sized from `memory_budgets`.
    pub batch: Option<usize>,
    pub steps: usize,
    pub warmup: usize,
    /// Model depth for byte accounting, and layer count of locality sweeps.
    pub n_layers: usize,
    pub element_width: usize,
    pub query_drift: f64,
    pub score_dim: usize,
    /// Context lengths of a simulation grid; `[n]` when empty.
    pub contexts: Vec<usize>,
    /// KV memory budgets in bytes.
    pub memory_budgets: Vec<u64>,
    /// Cost-model parameter file; A100-class defaults when absent.
    pub params: Option<PathBuf>,
    /// Output directory. Read from config files but never echoed or
    /// hashed, so reruns into different directories stay byte-identical.
    #[serde(skip_serializing)]
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 2048,
            d: 64,
            n_head: 4,
            n_kv_head: 2,
            d_head: 16,
            n_b: 32,
            n_s: 32,
            n_w: 128,
            k: 672,
            k_q: 128,
            k_e: 544,
            accounting: BudgetAccounting::default(),
            variant: VariantKind::EdDma,
            selector: Selector::Nosa,
            policy: None,
            batch: None,
            steps: 256,
            warmup: 8,
            n_layers: 4,
            element_width: 2,
            query_drift: 0.95,
            score_dim: 32,
            contexts: Vec::new(),
            memory_budgets: Vec::new(),
            params: None,
            out: PathBuf::from("out"),
        }
    }
}

/// Flag overrides, named exactly like the config fields.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Experiment config file (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long = "n_head")]
    pub n_head: Option<usize>,
    #[arg(long = "n_kv_head")]
    pub n_kv_head: Option<usize>,
    #[arg(long = "d_head")]
    pub d_head: Option<usize>,
    #[arg(long = "n_b")]
    pub n_b: Option<usize>,
    #[arg(long = "n_s")]
    pub n_s: Option<usize>,
    #[arg(long = "n_w")]
    pub n_w: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long = "k_q")]
    pub k_q: Option<usize>,
    #[arg(long = "k_e")]
    pub k_e: Option<usize>,
    /// fixed_inside_budget or fixed_outside_budget
    #[arg(long, value_parser = parse_accounting)]
    pub accounting: Option<BudgetAccounting>,
    /// retaining, dma, ed-dma or s-dma
    #[arg(long)]
    pub variant: Option<VariantKind>,
    /// nosa or infllmv2
    #[arg(long)]
    pub selector: Option<Selector>,
    /// nosa, infllmv2-offload or infllmv2-resident
    #[arg(long)]
    pub policy: Option<Policy>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long = "n_layers")]
    pub n_layers: Option<usize>,
    #[arg(long = "element_width")]
    pub element_width: Option<usize>,
    #[arg(long = "query_drift")]
    pub query_drift: Option<f64>,
    #[arg(long = "score_dim")]
    pub score_dim: Option<usize>,
    /// Comma-separated context lengths
    #[arg(long, value_delimiter = ',')]
    pub contexts: Option<Vec<usize>>,
    /// Comma-separated KV memory budgets in bytes
    #[arg(long = "memory_budgets", value_delimiter = ',')]
    pub memory_budgets: Option<Vec<u64>>,
    /// Cost-model parameter file (JSON)
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_accounting(s: &str) -> Result<BudgetAccounting, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown accounting `{s}` (expected fixed_inside_budget or fixed_outside_budget)"))
}

/// A loaded config plus where it came from, for diagnostics.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    source: Option<(PathBuf, String)>,
    overridden: Vec<&'static str>,
}

macro_rules! apply {
    ($cfg:ident, $ov:ident, $set:ident; $($field:ident),*) => {
        $(if let Some(v) = $ov.$field.clone() {
            $cfg.$field = v;
            $set.push(stringify!($field));
        })*
    };
}

impl Overrides {
    pub fn load(&self) -> Result<LoadedConfig, CliError> {
        let (mut config, source) = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
                    CliError::Usage(format!("{}:{}: {e}", path.display(), e.line()))
                })?;
                (cfg, Some((path.clone(), text)))
            }
            None => (ExperimentConfig::default(), None),
        };
        let mut overridden = Vec::new();
        apply!(config, self, overridden; seed, n, d, n_head, n_kv_head, d_head, n_b, n_s, n_w, k, k_q, k_e,
            accounting, variant, selector, steps, warmup, n_layers, element_width, query_drift,
            score_dim, contexts, memory_budgets, out);
        if let Some(p) = self.policy {
            config.policy = Some(p);
            overridden.push("policy");
        }
        if let Some(b) = self.batch {
            config.batch = Some(b);
            overridden.push("batch");
        }
        if let Some(p) = &self.params {
            config.params = Some(p.clone());
            overridden.push("params");
        }
        let loaded = LoadedConfig {
            config,
            source,
            overridden,
        };
        loaded.validate()?;
        Ok(loaded)
    }
}

/// 1-based line of the first `"field":` key in `text`.
pub fn field_line(text: &str, field: &str) -> Option<usize> {
    let needle = format!("\"{field}\"");
    text.lines().position(|line| {
        line.find(&needle)
            .map(|i| line[i + needle.len()..].trim_start().starts_with(':'))
            .unwrap_or(false)
    })
    .map(|i| i + 1)
}

impl LoadedConfig {
    pub fn from_config(config: ExperimentConfig) -> Self {
        Self {
            config,
            source: None,
            overridden: Vec::new(),
        }
    }

    /// Formats a problem with `field`, pointing at its line in the config
    /// file unless a flag supplied the value.
    pub fn field_error(&self, field: &str, message: &str) -> CliError {
        let located = match &self.source {
            Some((path, text)) if !self.overridden.contains(&field) => {
                match field_line(text, field) {
                    Some(line) => format!("{}:{line}: field `{field}`: {message}", path.display()),
                    None => format!("{}: field `{field}` (default value): {message}", path.display()),
                }
            }
            _ if self.overridden.contains(&field) => format!("flag --{field}: {message}"),
            _ => format!("field `{field}`: {message}"),
        };
        CliError::Usage(located)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        c.attention()
            .validate()
            .map_err(|e| self.field_error(e.field, &e.message))?;
        if c.steps == 0 {
            return Err(self.field_error("steps", "must be positive"));
        }
        if c.n_layers == 0 {
            return Err(self.field_error("n_layers", "must be positive"));
        }
        if !matches!(c.element_width, 2 | 4) {
            return Err(self.field_error("element_width", "must be 2 or 4"));
        }
        if !(0.0..=1.0).contains(&c.query_drift) {
            return Err(self.field_error("query_drift", "must lie in [0, 1]"));
        }
        if c.score_dim == 0 {
            return Err(self.field_error("score_dim", "must be positive"));
        }
        if c.batch == Some(0) {
            return Err(self.field_error("batch", "must be positive"));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            n: self.n,
            d: self.d,
            n_head: self.n_head,
            n_kv_head: self.n_kv_head,
            d_head: self.d_head,
            n_b: self.n_b,
            n_s: self.n_s,
            n_w: self.n_w,
            k: self.k,
            k_q: self.k_q,
            k_e: self.k_e,
            accounting: self.accounting,
        }
    }

    pub fn sim_config(&self, n: usize) -> SimConfig {
        let mut attention = self.attention();
        attention.n = n;
        SimConfig {
            attention,
            n_layers: self.n_layers,
            element_width: self.element_width,
            steps: self.steps,
            warmup: self.warmup,
            query_drift: self.query_drift,
            score_dim: self.score_dim,
            seed: self.seed,
        }
    }

    pub fn cost_params(&self) -> Result<CostModelParams, CliError> {
        let params = match &self.params {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Usage(format!("{}:{}: {e}", path.display(), e.line()))
                })?
            }
            None => CostModelParams::default(),
        };
        params
            .validate()
            .map_err(|e| CliError::Usage(format!("cost parameters: {e}")))?;
        Ok(params)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), e.line())))
}
