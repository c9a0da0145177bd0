//! Run configuration as read from TOML (or from the `config` entry of a run
//! manifest).

use crate::CliError;
use nhim::graphtransform::GtConfig;
use nhim::perron::{Method, PerronConfig};
use nhim::scenarios::RunOptions;
use nhim::system::expr::expr_system;
use nhim::system::{DeclaredRates, DomainX, SystemSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Catalog scenario; exclusive with `system`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<CustomSystem>,
    /// Parameter overrides for the scenario or values for the custom system.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub perron: PerronConfig,
    #[serde(default, rename = "graph-transform")]
    pub graph_transform: GtConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Derivative order `k` for fiber contraction and Hölder probes.
    #[serde(default)]
    pub order: usize,
    #[serde(default)]
    pub holder_probes: Vec<f64>,
    #[serde(default = "default_nx")]
    pub nx: usize,
    #[serde(default = "default_t_probe")]
    pub t_probe: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Perron, Method::GraphTransform]
}
fn default_nx() -> usize {
    128
}
fn default_t_probe() -> f64 {
    5.0
}
fn default_seed() -> u64 {
    7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: String,
    pub values: Vec<f64>,
}

/// A field given by expressions in `x`, `y1..yn`, `t` and the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSystem {
    #[serde(default = "default_name")]
    pub name: String,
    pub domain: DomainConfig,
    pub vx: String,
    pub vy: Vec<String>,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub epsilon: f64,
    /// Declared rates; measured from the field when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<DeclaredRates>,
}

fn default_name() -> String {
    "custom".into()
}
fn default_eta() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    /// Circumference of a circle base.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub circle: Option<f64>,
    /// `[lo, hi]` of a line window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[f64; 2]>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub order: Option<usize>,
    pub tol: Option<f64>,
}

impl RunConfig {
    /// Reads TOML, or a JSON run manifest whose `config` entry is replayed.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let inner = v.get("config").cloned().unwrap_or(v);
            serde_json::from_value(inner).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            Self::from_toml(&text).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
                other => other,
            })?
        };
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if !o.methods.is_empty() {
            self.methods = o.methods.clone();
        }
        if let Some(k) = o.order {
            self.order = k;
        }
        if let Some(t) = o.tol {
            self.perron.tol = t;
            self.graph_transform.tol = t;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.scenario, &self.system) {
            (Some(_), Some(_)) => return Err(CliError::Config("`scenario` and `system` are exclusive".into())),
            (None, None) => return Err(CliError::Config("one of `scenario` or `system` is required".into())),
            (Some(name), None) => {
                nhim::system::ScenarioId::parse(name).map_err(|e| CliError::Config(format!("scenario: {e}")))?;
            }
            (None, Some(_)) => {}
        }
        if self.order > 3 {
            return Err(CliError::Config(format!("order: {} exceeds the supported maximum 3", self.order)));
        }
        if self.methods.is_empty() {
            return Err(CliError::Config("methods: at least one method is required".into()));
        }
        if self.nx < 4 {
            return Err(CliError::Config(format!("nx: {} is below the minimum 4", self.nx)));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(CliError::Config("sweep.values: empty".into()));
            }
        }
        Ok(())
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            perron: self.perron.clone(),
            gt: self.graph_transform.clone(),
            nx: self.nx,
            methods: self.methods.clone(),
            order: self.order,
            t_probe: self.t_probe,
            seed: self.seed,
            holder_probes: self.holder_probes.clone(),
        }
    }

    /// Builds the custom system with the configured parameters.
    pub fn custom_spec(&self) -> Result<Option<SystemSpec>, CliError> {
        let Some(sys) = &self.system else { return Ok(None) };
        let domain = match (sys.domain.circle, sys.domain.window) {
            (Some(l), None) => DomainX::circle(l),
            (None, Some([lo, hi])) => DomainX::window(lo, hi),
            _ => return Err(CliError::Config("system.domain: give exactly one of `circle` or `window`".into())),
        }
        .map_err(|e| CliError::Config(format!("system.domain: {e}")))?;
        let mut spec =
            expr_system(&sys.name, domain, &sys.vx, &sys.vy, &self.params).map_err(|e| CliError::Config(format!("system: {e}")))?;
        spec.params = self.params.clone();
        spec.eta = sys.eta;
        spec.epsilon = sys.epsilon;
        spec.declared = sys.rates;
        Ok(Some(spec))
    }

    /// Label used in output file names and summaries.
    pub fn label(&self) -> String {
        match (&self.scenario, &self.system) {
            (Some(s), _) => s.clone(),
            (_, Some(s)) => s.name.clone(),
            _ => "run".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_config() {
        let c = RunConfig::from_toml("scenario = \"cohomological\"\n[params]\neps = 0.2\n").unwrap();
        assert_eq!(c.nx, 128);
        assert_eq!(c.methods, vec![Method::Perron, Method::GraphTransform]);
        assert_eq!(c.params["eps"], 0.2);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml("scenario = \"cohomological\"\n[perron]\ntoll = 1e-8\n").unwrap_err();
        assert!(e.to_string().contains("toll"), "{e}");
        let e = RunConfig::from_toml("scenario = \"cohomological\"\nnx = \"many\"\n").unwrap_err();
        assert!(e.to_string().contains("nx"), "{e}");
    }

    #[test]
    fn scenario_and_order_are_validated() {
        assert!(RunConfig::from_toml("scenario = \"nope\"").is_err());
        assert!(RunConfig::from_toml("scenario = \"cylinder\"\norder = 4").is_err());
        assert!(RunConfig::from_toml("nx = 16").is_err());
    }

    #[test]
    fn custom_system_builds() {
        let c = RunConfig::from_toml(
            "methods = [\"perron\"]\n[system]\nvx = \"a\"\nvy = [\"-2*y + 0.1*sin(x)\"]\ndomain = { circle = 6.283185307179586 }\n[params]\na = 1.0\n",
        )
        .unwrap();
        let s = c.custom_spec().unwrap().unwrap();
        assert_eq!(s.dim_y, 1);
        assert!(s.domain.is_circle());
        let bad = RunConfig { system: Some(CustomSystem { domain: DomainConfig { circle: None, window: None }, ..c.system.clone().unwrap() }), ..c };
        assert!(bad.custom_spec().is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut c = RunConfig::from_toml("scenario = \"cylinder\"").unwrap();
        c.apply(&Overrides { out: Some("o".into()), methods: vec![Method::Perron], order: Some(2), tol: Some(1e-9) }).unwrap();
        assert_eq!((c.order, c.perron.tol, c.graph_transform.tol), (2, 1e-9, 1e-9));
        assert_eq!(c.methods, vec![Method::Perron]);
        assert!(c.apply(&Overrides { order: Some(5), ..Default::default() }).is_err());
    }
}
