//! Experiment configuration file format.
//!
//! A config is one JSON document with a `schema_version` and six sections.
//! Every section field has a default, so a file only needs the values it
//! changes. Unknown keys are rejected at any depth.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::critic::{CriticBasis, GainConfig, PolynomialCriticBasis};
use crate::error::{Error, Result};
use crate::models::{ParameterSchedule, PlantState};
use crate::policy::SaturationSpec;
use crate::sim::{IdentifierConfig, ProbeConfig, SimConfig, WeightStep};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub reference: ReferenceSection,
    #[serde(default)]
    pub identifier: IdentifierSection,
    #[serde(default)]
    pub critic: CriticSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSection {
    pub schedule: ParameterSchedule,
    /// `[x1, x2]` at `t = 0`.
    pub x0: [f64; 2],
}

impl Default for PlantSection {
    fn default() -> Self {
        PlantSection {
            schedule: ParameterSchedule::benchmark(),
            x0: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub x1d: f64,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        ReferenceSection { x1d: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifierBasisId {
    /// `(x1, x2, x1³ | u)`
    SpringDamperCubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifierSection {
    pub basis: IdentifierBasisId,
    pub k_f: f64,
    pub l_f: f64,
    /// Scale of `Γ₁ = gamma1 · I`.
    pub gamma1: f64,
    #[serde(rename = "N")]
    pub capacity: usize,
    pub snapshot_period: f64,
    pub er_enabled: bool,
    /// 4 rows (regressor) by 2 columns (state derivative).
    #[serde(rename = "W_init")]
    pub w_init: Option<Vec<[f64; 2]>>,
    pub step: WeightStep,
}

impl Default for IdentifierSection {
    fn default() -> Self {
        let d = IdentifierConfig::default();
        IdentifierSection {
            basis: IdentifierBasisId::SpringDamperCubic,
            k_f: d.k_f,
            l_f: d.l_f,
            gamma1: d.gamma1,
            capacity: d.capacity,
            snapshot_period: d.snapshot_period,
            er_enabled: d.er_enabled,
            w_init: None,
            step: d.step,
        }
    }
}

/// A square matrix given either as a multiple of the identity or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scaled(f64),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, n: usize, field: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scaled(s) => Ok(DMatrix::identity(n, n) * *s),
            MatrixSpec::Full(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::config(field, format!("expected a {n}x{n} matrix")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticSection {
    pub gamma: f64,
    #[serde(rename = "T")]
    pub interval: f64,
    pub alpha: f64,
    pub k2: f64,
    pub l: f64,
    #[serde(rename = "K1")]
    pub k1: Vec<f64>,
    #[serde(rename = "K2")]
    pub k2_matrix: MatrixSpec,
    #[serde(rename = "Q")]
    pub q: f64,
    /// Diagonal of `R`, one entry per input.
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub u_m: f64,
    #[serde(rename = "W_init")]
    pub w_init: Vec<f64>,
    /// Forward Euler substeps allowed per `dt` for the critic weights.
    pub max_substeps: usize,
}

impl Default for CriticSection {
    fn default() -> Self {
        let n = PolynomialCriticBasis.len();
        let g = GainConfig::defaults(n);
        CriticSection {
            gamma: g.gamma,
            interval: g.interval,
            alpha: g.alpha,
            k2: g.exponent,
            l: g.offset,
            k1: vec![0.0; n],
            k2_matrix: MatrixSpec::Scaled(0.02),
            q: 10.0,
            r: vec![1.0],
            u_m: 2.0,
            w_init: vec![0.0; n],
            max_substeps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub dt: f64,
    pub duration: f64,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            dt: 1e-3,
            duration: 45.0,
            probe: ProbeConfig::disabled(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub csv: String,
    /// Emit `plot.py` next to the CSV after a run.
    pub plots: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            csv: "run.csv".into(),
            plots: false,
        }
    }
}

impl ExperimentConfig {
    /// All defaults: the benchmark schedule with the library gains.
    pub fn benchmark() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            plant: PlantSection::default(),
            reference: ReferenceSection::default(),
            identifier: IdentifierSection::default(),
            critic: CriticSection::default(),
            sim: SimSection::default(),
            output: OutputSection::default(),
        }
    }

    /// Build and validate the simulator configuration.
    pub fn to_sim_config(&self) -> Result<SimConfig> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        let n = PolynomialCriticBasis.len();
        let c = &self.critic;
        if c.k1.len() != n {
            return Err(Error::config("critic.K1", format!("expected {n} entries")));
        }
        if c.w_init.len() != n {
            return Err(Error::config("critic.W_init", format!("expected {n} entries")));
        }
        if c.r.len() != 1 {
            return Err(Error::config(
                "critic.R",
                "the plant has one input; expected 1 entry",
            ));
        }
        let saturation = SaturationSpec::new(c.u_m, c.r.clone()).map_err(|e| match e {
            Error::Domain(msg) if msg.contains("u_max") => Error::config("critic.u_m", msg),
            other => Error::config("critic.R", other.to_string()),
        })?;
        let gains = GainConfig {
            alpha: c.alpha,
            exponent: c.k2,
            offset: c.l,
            k1: DVector::from_vec(c.k1.clone()),
            k2: c.k2_matrix.to_matrix(n, "critic.K2")?,
            gamma: c.gamma,
            interval: c.interval,
        };
        let id = &self.identifier;
        let w_init = match &id.w_init {
            None => None,
            Some(rows) => {
                if rows.len() != 4 {
                    return Err(Error::config("identifier.W_init", "expected 4 rows of 2"));
                }
                Some(DMatrix::from_fn(4, 2, |i, j| rows[i][j]))
            }
        };
        let cfg = SimConfig {
            dt: self.sim.dt,
            duration: self.sim.duration,
            schedule: self.plant.schedule.clone(),
            x0: PlantState::new(self.plant.x0[0], self.plant.x0[1]),
            x1d: self.reference.x1d,
            identifier: IdentifierConfig {
                k_f: id.k_f,
                l_f: id.l_f,
                gamma1: id.gamma1,
                capacity: id.capacity,
                snapshot_period: id.snapshot_period,
                er_enabled: id.er_enabled,
                w_init,
                step: id.step,
            },
            gains,
            q: DMatrix::from_element(1, 1, c.q),
            saturation,
            critic_w_init: DVector::from_vec(c.w_init.clone()),
            critic_max_substeps: c.max_substeps,
            probe: self.sim.probe.clone(),
            seed: self.sim.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn json_path_error(err: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = err.path().to_string();
    let field = if path == "." { "<root>".to_string() } else { path };
    Error::config(field, err.into_inner().to_string())
}

fn from_value(value: Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(value).map_err(json_path_error)
}

/// Parse and validate a config document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(json_path_error)?;
    cfg.to_sim_config()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// One named override of the base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// JSON merge patch applied to the base config.
    #[serde(default)]
    pub overrides: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
}

/// Parse a variants file. Variant bodies are checked later, against a base.
pub fn parse_variants_str(text: &str) -> Result<AblationSpec> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: AblationSpec = serde_path_to_error::deserialize(de).map_err(json_path_error)?;
    let mut seen = std::collections::HashSet::new();
    for (i, v) in spec.variants.iter().enumerate() {
        if v.name.is_empty() {
            return Err(Error::config(format!("variants[{i}].name"), "must not be empty"));
        }
        if !seen.insert(v.name.as_str()) {
            return Err(Error::config(
                format!("variants[{i}].name"),
                format!("duplicate name `{}`", v.name),
            ));
        }
        if !(v.overrides.is_object() || v.overrides.is_null()) {
            return Err(Error::config(
                format!("variants[{i}].overrides"),
                "must be an object",
            ));
        }
    }
    Ok(spec)
}

pub fn parse_variants(path: &Path) -> Result<AblationSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_variants_str(&text)
}

fn merge_patch(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        (t, p) => *t = p.clone(),
    }
}

/// Apply a variant to `base` and validate the result. Errors carry the
/// variant name in the field path.
pub fn apply_variant(base: &ExperimentConfig, variant: &Variant) -> Result<ExperimentConfig> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    merge_patch(&mut value, &variant.overrides);
    let prefix = |e: Error| match e {
        Error::Config { field, reason } => Error::config(format!("{}:{field}", variant.name), reason),
        other => other,
    };
    let cfg = from_value(value).map_err(prefix)?;
    cfg.to_sim_config().map_err(prefix)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_takes_defaults() {
        let cfg = parse_config_str(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::benchmark());
        let sim = cfg.to_sim_config().unwrap();
        assert_eq!(sim.steps(), 45_000);
        assert_eq!(sim.gains.k2[(3, 3)], 0.02);
    }

    #[test]
    fn scaled_and_full_k2_agree() {
        let full: Vec<Vec<f64>> = (0..7)
            .map(|i| (0..7).map(|j| if i == j { 0.02 } else { 0.0 }).collect())
            .collect();
        let a = MatrixSpec::Scaled(0.02).to_matrix(7, "K2").unwrap();
        let b = MatrixSpec::Full(full).to_matrix(7, "K2").unwrap();
        assert_eq!(a, b);
        assert!(MatrixSpec::Full(vec![vec![1.0]]).to_matrix(7, "K2").is_err());
    }

    #[test]
    fn merge_patch_semantics() {
        let mut v = serde_json::json!({"a": {"b": 1, "c": 2}, "d": 3});
        merge_patch(&mut v, &serde_json::json!({"a": {"b": 5, "c": null}, "e": [1]}));
        assert_eq!(v, serde_json::json!({"a": {"b": 5}, "d": 3, "e": [1]}));
    }
}
