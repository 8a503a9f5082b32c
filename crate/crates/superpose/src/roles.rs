//! Assigning a merge role to every tensor by name.
//!
//! Rules are tried in order and the first match wins. Patterns are globs
//! (`*layer_norm*`) unless prefixed with `re:`, in which case the rest is a
//! regular expression matched anywhere in the name. Unmatched 2-D tensors get
//! `default_2d`, everything else `default_other`.

use std::collections::BTreeMap;

use globset::{Glob, GlobMatcher};
use regex::Regex;
use serde::{Deserialize, Serialize};
use superpose_core::ParamRole;

use crate::error::{Error, Result};
use crate::store::Checkpoint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRule {
    pub pattern: String,
    #[serde(with = "role_serde")]
    pub role: ParamRole,
}

impl RoleRule {
    pub fn new(pattern: impl Into<String>, role: ParamRole) -> Self {
        Self { pattern: pattern.into(), role }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRules {
    #[serde(default, rename = "rule")]
    pub rules: Vec<RoleRule>,
    #[serde(with = "role_serde", default = "default_2d")]
    pub default_2d: ParamRole,
    #[serde(with = "role_serde", default = "default_other")]
    pub default_other: ParamRole,
}

fn default_2d() -> ParamRole {
    ParamRole::LinearMatrix
}

fn default_other() -> ParamRole {
    ParamRole::Bias
}

impl Default for RoleRules {
    /// Covers the usual T5, BERT, GPT-2 and Llama naming.
    fn default() -> Self {
        use ParamRole::*;
        let rules = [
            ("*norm*", Normalization),
            ("ln_*", Normalization),
            ("*.ln_*", Normalization),
            ("*bias", Bias),
            ("*embed*", Embedding),
            ("shared.*", Embedding),
            ("*.wte.*", Embedding),
            ("*.wpe.*", Embedding),
            ("wte.*", Embedding),
            ("wpe.*", Embedding),
        ]
        .into_iter()
        .map(|(p, r)| RoleRule::new(p, r))
        .collect();
        Self { rules, default_2d: LinearMatrix, default_other: Bias }
    }
}

enum Matcher {
    Glob(GlobMatcher),
    Regex(Regex),
}

impl Matcher {
    fn is_match(&self, name: &str) -> bool {
        match self {
            Matcher::Glob(g) => g.is_match(name),
            Matcher::Regex(r) => r.is_match(name),
        }
    }
}

/// Rules with their patterns compiled.
pub struct RoleClassifier {
    rules: Vec<(Matcher, RoleRule)>,
    default_2d: ParamRole,
    default_other: ParamRole,
}

impl RoleRules {
    pub fn compile(&self) -> Result<RoleClassifier> {
        if self.default_other == ParamRole::LinearMatrix {
            return Err(Error::Config("default_other cannot be `linear`: only 2-D tensors are linear maps".into()));
        }
        let rules = self
            .rules
            .iter()
            .map(|rule| {
                let matcher = match rule.pattern.strip_prefix("re:") {
                    Some(expr) => Matcher::Regex(
                        Regex::new(expr).map_err(|e| Error::Config(format!("role pattern {:?}: {e}", rule.pattern)))?,
                    ),
                    None => Matcher::Glob(
                        Glob::new(&rule.pattern)
                            .map_err(|e| Error::Config(format!("role pattern {:?}: {e}", rule.pattern)))?
                            .compile_matcher(),
                    ),
                };
                Ok((matcher, rule.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(RoleClassifier { rules, default_2d: self.default_2d, default_other: self.default_other })
    }
}

impl RoleClassifier {
    pub fn role_for(&self, name: &str, shape: &[usize]) -> Result<ParamRole> {
        let matched = self.rules.iter().find(|(m, _)| m.is_match(name));
        let role = match matched {
            Some((_, rule)) => rule.role,
            None if shape.len() == 2 => self.default_2d,
            None => self.default_other,
        };
        if role == ParamRole::LinearMatrix && shape.len() != 2 {
            let via = matched.map_or("default_2d".to_string(), |(_, r)| format!("rule {:?}", r.pattern));
            return Err(Error::Config(format!("{via} makes tensor {name} linear but its shape is {shape:?}")));
        }
        Ok(role)
    }
}

/// Role of every tensor in `store`, keyed by name.
pub fn classify(store: &Checkpoint, rules: &RoleRules) -> Result<BTreeMap<String, ParamRole>> {
    let classifier = rules.compile()?;
    store.infos().map(|(name, info)| Ok((name.to_string(), classifier.role_for(name, &info.shape)?))).collect()
}

pub(crate) mod role_serde {
    use serde::{Deserialize, Deserializer, Serializer};
    use superpose_core::ParamRole;

    pub fn serialize<S: Serializer>(role: &ParamRole, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(role.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ParamRole, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
