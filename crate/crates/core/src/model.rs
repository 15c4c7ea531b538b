//! Model-file schema: one versioned format covering 1-d diffusions, 2-d
//! diffusion fields and spin systems, readable from JSON (canonical) or TOML.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion1d::{DiffusionModel, FellerBoundary};
use crate::discretize::Grid2d;
use crate::expr::parse;
use crate::ips::{RateRule, SpinSystem};
use crate::multid::{CoefficientField, IndexSet, MultiIndex};
use crate::order::OrderSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("cannot parse model file: {0}")]
    Syntax(String),
    #[error("unsupported schema_version {0}, expected {SCHEMA_VERSION}")]
    Version(u32),
    #[error("coefficient `{name}` does not parse: {message}")]
    Coefficient { name: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

/// Interval endpoint: a number, or the strings "inf" / "-inf".
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EndpointValue {
    Number(f64),
    Named(NamedEndpoint),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum NamedEndpoint {
    #[serde(rename = "inf")]
    PlusInf,
    #[serde(rename = "-inf")]
    MinusInf,
}

impl EndpointValue {
    pub fn value(self) -> f64 {
        match self {
            EndpointValue::Number(v) => v,
            EndpointValue::Named(NamedEndpoint::PlusInf) => f64::INFINITY,
            EndpointValue::Named(NamedEndpoint::MinusInf) => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct BoundarySpec {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl BoundarySpec {
    pub fn to_boundary(&self) -> Result<FellerBoundary, ModelFileError> {
        let need = |o: Option<f64>, what: &str| {
            o.ok_or_else(|| {
                ModelFileError::Invalid(format!("boundary kind `{}` needs `{what}`", self.kind))
            })
        };
        Ok(match self.kind.as_str() {
            "reflecting" => FellerBoundary::Reflecting,
            "sticky" => FellerBoundary::Sticky {
                mass: need(self.mass, "mass")?,
            },
            "elastic" => FellerBoundary::Elastic {
                k: need(self.k, "k")?,
            },
            "absorbing" => FellerBoundary::Absorbing,
            "killing" => FellerBoundary::Killing,
            "trap" => FellerBoundary::Trap {
                gamma: need(self.gamma, "gamma")?,
            },
            "natural" => FellerBoundary::Natural,
            other => {
                return Err(ModelFileError::Invalid(format!(
                    "unknown boundary kind `{other}`"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coefficients1d {
    pub a: String,
    pub b: String,
    pub c: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diffusion1dSpec {
    pub interval: [EndpointValue; 2],
    pub coefficients: Coefficients1d,
    pub boundary: BoundaryPair,
    #[serde(default)]
    pub order: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryPair {
    pub left: BoundarySpec,
    pub right: BoundarySpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionMdSpec {
    pub dim: usize,
    /// Row-major matrix of coefficient expressions (symmetric).
    pub a: Vec<Vec<String>>,
    pub b: Vec<String>,
    /// "increasing", "supermodular", or an explicit list of 0/1 vectors.
    pub index_set: IndexSetSpec,
    /// Box the grid and samples live in.
    #[serde(rename = "box")]
    pub sample_box: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IndexSetSpec {
    Named(String),
    Explicit(Vec<Vec<u8>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpinSystemSpec {
    pub sites: usize,
    pub edges: Vec<[usize; 2]>,
    pub rule: RuleSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleSpec {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Diffusion1d(Diffusion1dSpec),
    DiffusionMd(DiffusionMdSpec),
    SpinSystem(SpinSystemSpec),
}

/// Numeric block: grid sizes, resolvent/evolution parameters, tolerances and
/// the seed. Everything has a default so model files stay short.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Numerics {
    pub grid: usize,
    pub grid2d: [usize; 2],
    pub lambdas: Vec<f64>,
    pub times: Vec<f64>,
    pub family: usize,
    pub tol: f64,
    pub seed: u64,
    pub paths: usize,
    pub truncation: Option<f64>,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            grid: 100,
            grid2d: [24, 24],
            lambdas: vec![0.01, 0.1, 1.0],
            times: vec![0.1, 1.0],
            family: 20,
            tol: 1e-9,
            seed: 7,
            paths: 100_000,
            truncation: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(flatten)]
    pub spec: ModelSpec,
    #[serde(default)]
    pub numerics: Numerics,
}

impl ModelFile {
    /// Parse from JSON (leading `{`) or TOML text.
    pub fn parse_str(text: &str) -> Result<ModelFile, ModelFileError> {
        let trimmed = text.trim_start();
        let file: ModelFile = if trimmed.starts_with('{') {
            serde_json::from_str(text).map_err(|e| ModelFileError::Syntax(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| ModelFileError::Syntax(e.to_string()))?
        };
        if file.schema_version != SCHEMA_VERSION {
            return Err(ModelFileError::Version(file.schema_version));
        }
        file.validate()?;
        Ok(file)
    }

    fn validate(&self) -> Result<(), ModelFileError> {
        match &self.spec {
            ModelSpec::Diffusion1d(d) => {
                d.to_model()?;
            }
            ModelSpec::DiffusionMd(d) => {
                d.to_field()?;
                d.to_index_set()?;
            }
            ModelSpec::SpinSystem(s) => {
                s.to_system()?;
            }
        }
        Ok(())
    }

    pub fn order_spec(&self, flag: Option<&str>) -> Result<OrderSpec, ModelFileError> {
        let name = match (&self.spec, flag) {
            (_, Some(name)) => name.to_string(),
            (ModelSpec::Diffusion1d(d), None) => {
                d.order.clone().unwrap_or_else(|| "increasing".to_string())
            }
            (ModelSpec::DiffusionMd(_), None) => "multi_index".to_string(),
            (ModelSpec::SpinSystem(_), None) => "spin_monotone".to_string(),
        };
        Ok(match name.as_str() {
            "increasing" => OrderSpec::Increasing,
            "convex" => OrderSpec::Convex,
            "increasing_convex" => OrderSpec::IncreasingConvex,
            "spin_monotone" => OrderSpec::SpinMonotone,
            "multi_index" => match &self.spec {
                ModelSpec::DiffusionMd(d) => OrderSpec::MultiIndex(d.to_index_set()?),
                _ => {
                    return Err(ModelFileError::Invalid(
                        "multi_index order needs a diffusion_md model".to_string(),
                    ))
                }
            },
            other => return Err(ModelFileError::Invalid(format!("unknown order `{other}`"))),
        })
    }
}

fn parse_coeff(name: &str, text: &str, dim: usize) -> Result<crate::expr::Expr, ModelFileError> {
    parse(text, dim).map_err(|e| ModelFileError::Coefficient {
        name: name.to_string(),
        message: e.to_string(),
    })
}

impl Diffusion1dSpec {
    pub fn to_model(&self) -> Result<DiffusionModel, ModelFileError> {
        DiffusionModel::new(
            self.interval[0].value(),
            self.interval[1].value(),
            parse_coeff("a", &self.coefficients.a, 1)?,
            parse_coeff("b", &self.coefficients.b, 1)?,
            parse_coeff("c", &self.coefficients.c, 1)?,
            self.boundary.left.to_boundary()?,
            self.boundary.right.to_boundary()?,
        )
        .map_err(|e| ModelFileError::Invalid(e.to_string()))
    }
}

impl DiffusionMdSpec {
    pub fn to_field(&self) -> Result<CoefficientField, ModelFileError> {
        if self.a.len() != self.dim
            || self.a.iter().any(|row| row.len() != self.dim)
            || self.b.len() != self.dim
        {
            return Err(ModelFileError::Invalid(format!(
                "coefficient field must be {dim}x{dim} with {dim} drifts",
                dim = self.dim
            )));
        }
        let mut field = CoefficientField::isotropic(self.dim);
        for i in 0..self.dim {
            for j in i..self.dim {
                let e = parse_coeff(&format!("a{}{}", i + 1, j + 1), &self.a[i][j], self.dim)?;
                field.set_a(i, j, e);
            }
            field.set_b(
                i,
                parse_coeff(&format!("b{}", i + 1), &self.b[i], self.dim)?,
            );
        }
        Ok(field)
    }

    pub fn to_index_set(&self) -> Result<IndexSet, ModelFileError> {
        match &self.index_set {
            IndexSetSpec::Named(name) => match name.as_str() {
                "increasing" => Ok(IndexSet::increasing(self.dim)),
                "supermodular" => Ok(IndexSet::supermodular(self.dim)),
                other => Err(ModelFileError::Invalid(format!(
                    "unknown index set `{other}`"
                ))),
            },
            IndexSetSpec::Explicit(list) => {
                let indices = list
                    .iter()
                    .map(|v| MultiIndex::new(v.clone()))
                    .collect::<Vec<_>>();
                IndexSet::new(self.dim, indices).map_err(|e| ModelFileError::Invalid(e.to_string()))
            }
        }
    }

    pub fn to_grid(&self, cells: [usize; 2]) -> Result<Grid2d, ModelFileError> {
        if self.sample_box.len() != 2 {
            return Err(ModelFileError::Invalid(
                "the numeric 2-d pipeline needs a 2-d box".to_string(),
            ));
        }
        Grid2d::uniform(
            [
                (self.sample_box[0][0], self.sample_box[0][1]),
                (self.sample_box[1][0], self.sample_box[1][1]),
            ],
            cells,
        )
        .map_err(|e| ModelFileError::Invalid(e.to_string()))
    }
}

impl SpinSystemSpec {
    pub fn to_system(&self) -> Result<SpinSystem, ModelFileError> {
        let rule = match self.rule.name.as_str() {
            "contact" => RateRule::Contact {
                lambda: self.rule.lambda.ok_or_else(|| {
                    ModelFileError::Invalid("contact rule needs `lambda`".to_string())
                })?,
            },
            "voter" => RateRule::Voter,
            "glauber" => RateRule::Glauber {
                beta: self.rule.beta.ok_or_else(|| {
                    ModelFileError::Invalid("glauber rule needs `beta`".to_string())
                })?,
            },
            "independent" => RateRule::Independent {
                rate: self.rule.rate.ok_or_else(|| {
                    ModelFileError::Invalid("independent rule needs `rate`".to_string())
                })?,
            },
            "custom" => RateRule::Custom {
                table: self.rule.table.clone().ok_or_else(|| {
                    ModelFileError::Invalid("custom rule needs `table`".to_string())
                })?,
            },
            other => {
                return Err(ModelFileError::Invalid(format!(
                    "unknown rate rule `{other}`"
                )))
            }
        };
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        SpinSystem::new(self.sites, &edges, rule)
            .map_err(|e| ModelFileError::Invalid(e.to_string()))
    }
}
