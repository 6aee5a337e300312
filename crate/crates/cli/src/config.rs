//! JSON experiment configs and their per-problem defaults.

use std::collections::BTreeMap;
use std::path::PathBuf;

use gbmei_core::harness::{ErrorNorm, ExperimentConfig, MomentConfig, Reference};
use gbmei_core::model::{self, BuiltinParams, SdeProblem};
use gbmei_core::noise::DEFAULT_LEVY_TERMS;
use gbmei_core::schemes::{SchemeKind, SchemeSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "GBMEI_SEED";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub problem: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schemes: Option<Vec<SchemeEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
    /// Step counts of the Δt ladder (convergence, efficiency).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<Vec<usize>>,
    /// Step count of the moment run (stiff).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levy_terms: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commutative_bypass: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_norm: Option<ErrorNormEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waive_commutators: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_self_test: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemeEntry {
    Name(String),
    Full(SchemeObject),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeObject {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceEntry {
    Exact {
        #[serde(default)]
        steps: Option<usize>,
    },
    Scheme {
        scheme: String,
        #[serde(default)]
        steps: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorNormEntry {
    Final,
    Sup,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub levy_terms: Option<usize>,
}

/// Byte offset of a serde_json error position (1-based line and column).
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

pub fn parse(text: &str) -> Result<RawConfig, CliError> {
    serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Syntax | Category::Eof => CliError::Config(format!(
                "malformed JSON at byte {}: {e}",
                byte_offset(text, e.line(), e.column())
            )),
            _ => CliError::Config(format!("config: {e}")),
        }
    })
}

struct Defaults {
    schemes: &'static [&'static str],
    t_final: f64,
    ladder: Vec<usize>,
    steps: usize,
    reference: Reference,
    samples: usize,
}

fn pow2(range: std::ops::RangeInclusive<u32>) -> Vec<usize> {
    range.map(|k| 1usize << k).collect()
}

fn defaults(problem: &str) -> Defaults {
    let exp_milstein = SchemeSpec::new(SchemeKind::ExpMilstein).expect("non-homotopy");
    match problem {
        "ginzburg_landau" => Defaults {
            schemes: &["EI0", "EI1", "EI2", "SETD1"],
            t_final: 1.0,
            ladder: pow2(5..=10),
            steps: 1 << 10,
            reference: Reference::Exact { steps: 1 << 16 },
            samples: 1000,
        },
        "diag_noise" => Defaults {
            schemes: &["EI0", "SETD0", "HomEI0", "EM"],
            t_final: 1.0,
            ladder: pow2(5..=9),
            steps: 1 << 9,
            reference: Reference::Scheme {
                spec: exp_milstein,
                steps: 1 << 14,
            },
            samples: 1000,
        },
        "noncomm_noise" => Defaults {
            schemes: &["EI0", "SETD0", "HomEI0", "EM"],
            t_final: 1.0,
            ladder: pow2(5..=9),
            steps: 1 << 9,
            reference: Reference::Scheme {
                spec: exp_milstein,
                steps: 1 << 14,
            },
            samples: 100,
        },
        _ => Defaults {
            schemes: &["SETD0", "EI0"],
            t_final: 50.0,
            ladder: vec![1000],
            steps: 1000,
            reference: Reference::Scheme {
                spec: exp_milstein,
                steps: 64_000,
            },
            samples: 1000,
        },
    }
}

fn scheme_spec(kind: &str, p: Option<f64>, problem: &SdeProblem) -> Result<SchemeSpec, CliError> {
    let kind: SchemeKind = kind.parse().map_err(CliError::from_core)?;
    let spec = match p {
        Some(p) => SchemeSpec::homotopy(kind, p),
        None => SchemeSpec::for_problem(kind, problem),
    };
    spec.map_err(CliError::from_core)
}

/// A config with every default and override applied.
pub struct Resolved {
    pub problem_name: String,
    pub problem: SdeProblem,
    pub schemes: Vec<SchemeSpec>,
    pub experiment: ExperimentConfig,
    pub steps: usize,
    pub output: Option<PathBuf>,
}

impl Resolved {
    pub fn moment_config(&self) -> MomentConfig {
        MomentConfig {
            steps: self.steps,
            t_final: self.experiment.t_final,
            samples: self.experiment.samples,
            seed: self.experiment.seed,
            levy_terms: self.experiment.levy_terms,
            workers: self.experiment.workers,
        }
    }

    /// The effective settings, for the metadata sidecar.
    pub fn echo(&self, raw: &RawConfig) -> serde_json::Value {
        let e = &self.experiment;
        let reference = match e.reference {
            Reference::Exact { steps } => serde_json::json!({"type": "exact", "steps": steps}),
            Reference::Scheme { spec, steps } => {
                serde_json::json!({"type": "scheme", "scheme": spec.label(), "steps": steps})
            }
        };
        serde_json::json!({
            "problem": self.problem_name,
            "params": raw.params,
            "schemes": self.schemes.iter().map(|s| serde_json::json!({"kind": s.label(), "p": s.p()})).collect::<Vec<_>>(),
            "t_final": e.t_final,
            "ladder": e.ladder,
            "steps": self.steps,
            "reference": reference,
            "samples": e.samples,
            "seed": e.seed,
            "levy_terms": e.levy_terms,
            "commutative_bypass": e.commutative_bypass,
            "workers": e.workers,
            "error_norm": match e.error_norm { ErrorNorm::Final => "final", ErrorNorm::SupOverGrid => "sup" },
            "waive_commutators": self.problem.waived(),
            "reference_self_test": e.reference_self_test,
        })
    }
}

pub fn resolve(
    raw: &RawConfig,
    overrides: &Overrides,
    env_seed: Option<&str>,
) -> Result<Resolved, CliError> {
    if model::builtin_param_names(&raw.problem).is_none() {
        return Err(CliError::Config(format!(
            "unknown problem `{}` (known: {})",
            raw.problem,
            model::BUILTIN_PROBLEMS.join(", ")
        )));
    }
    let mut params = BuiltinParams::new();
    for (k, v) in &raw.params {
        params = params.with(k, *v);
    }
    if let Some(w) = raw.waive_commutators {
        params = params.waive_commutators(w);
    }
    let problem = model::builtin(&raw.problem, &params).map_err(CliError::from_core)?;
    let def = defaults(&raw.problem);

    let schemes = match &raw.schemes {
        Some(list) => list
            .iter()
            .map(|entry| match entry {
                SchemeEntry::Name(name) => scheme_spec(name, None, &problem),
                SchemeEntry::Full(obj) => scheme_spec(&obj.kind, obj.p, &problem),
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => def
            .schemes
            .iter()
            .map(|name| scheme_spec(name, None, &problem))
            .collect::<Result<Vec<_>, _>>()?,
    };

    let reference = match &raw.reference {
        None => def.reference,
        Some(ReferenceEntry::Exact { steps }) => Reference::Exact {
            steps: steps.unwrap_or(def.reference.steps()),
        },
        Some(ReferenceEntry::Scheme { scheme, steps }) => Reference::Scheme {
            spec: scheme_spec(scheme, None, &problem)?,
            steps: steps.unwrap_or(def.reference.steps()),
        },
    };

    let env_seed = match env_seed {
        Some(s) => Some(s.trim().parse::<u64>().map_err(|_| {
            CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))
        })?),
        None => None,
    };
    let seed = overrides
        .seed
        .or(raw.seed)
        .or(env_seed)
        .unwrap_or(DEFAULT_SEED);

    let mut experiment = ExperimentConfig::new(
        schemes.clone(),
        raw.ladder.clone().unwrap_or(def.ladder),
        reference,
    );
    experiment.t_final = raw.t_final.unwrap_or(def.t_final);
    experiment.samples = overrides.samples.or(raw.samples).unwrap_or(def.samples);
    experiment.seed = seed;
    experiment.levy_terms = overrides
        .levy_terms
        .or(raw.levy_terms)
        .unwrap_or(DEFAULT_LEVY_TERMS);
    experiment.commutative_bypass = raw.commutative_bypass.unwrap_or(true);
    experiment.workers = overrides.workers.or(raw.workers);
    experiment.error_norm = match raw.error_norm {
        Some(ErrorNormEntry::Sup) => ErrorNorm::SupOverGrid,
        _ => ErrorNorm::Final,
    };
    experiment.reference_self_test = raw.reference_self_test.unwrap_or(true);
    if experiment.workers == Some(0) {
        return Err(CliError::Config("workers must be >= 1".into()));
    }
    if !(experiment.t_final > 0.0 && experiment.t_final.is_finite()) {
        return Err(CliError::Config(format!(
            "t_final must be positive, got {}",
            experiment.t_final
        )));
    }

    Ok(Resolved {
        problem_name: raw.problem.clone(),
        problem,
        schemes,
        experiment,
        steps: raw.steps.unwrap_or(def.steps),
        output: overrides.out.clone().or_else(|| raw.output.clone()),
    })
}
