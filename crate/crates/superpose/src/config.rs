//! Run configuration: a TOML file layered under command-line flags.
//!
//! ```toml
//! base = "pre.safetensors"
//! output = "merged.safetensors"
//! report = "report.json"
//! threads = 4
//!
//! [[task]]
//! id = "sst2"
//! path = "sst2.safetensors"
//! lora_scale = 2.0
//!
//! [merge]
//! preset = "full-finetune"
//! eta = 0.2
//! gamma = 0.8
//! mode = "task-matrix"
//! baseline = "none"
//! lora = false
//!
//! [roles]
//! default_2d = "linear"
//! [[roles.rule]]
//! pattern = "lm_head.*"
//! role = "ignore"
//! ```
//!
//! Relative paths in the file resolve against the file's directory. Within
//! each layer a preset is applied first and explicit values after it.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use superpose_core::{Baseline, MergeConfig, MergeMode};

use crate::error::{Error, Result};
use crate::pipeline::{CheckpointSet, PipelineOptions, TaskInput};
use crate::roles::RoleRules;
use crate::store::Checkpoint;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub id: Option<String>,
    pub path: PathBuf,
    pub lora_scale: Option<f32>,
}

impl TaskEntry {
    /// Parses `[id=]path`.
    pub fn parse(arg: &str) -> Self {
        match arg.split_once('=') {
            Some((id, path)) if !id.is_empty() && !id.contains(['/', '\\']) => {
                Self { id: Some(id.to_string()), path: path.into(), lora_scale: None }
            }
            _ => Self { id: None, path: arg.into(), lora_scale: None },
        }
    }

    pub fn resolved_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            self.path.file_stem().map_or_else(|| self.path.display().to_string(), |s| s.to_string_lossy().into_owned())
        })
    }
}

/// Merge settings from one layer; unset fields leave the layer below intact.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSettings {
    pub preset: Option<String>,
    pub eta: Option<f64>,
    pub gamma: Option<f64>,
    pub rank_tol: Option<f64>,
    pub solver_tol: Option<f64>,
    pub mode: Option<String>,
    pub baseline: Option<String>,
    pub lora: Option<bool>,
    pub lora_scale: Option<f32>,
    pub keep_dtype: Option<bool>,
    pub compare_modes: Option<bool>,
}

/// One layer of configuration, from a file or from flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub base: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub threads: Option<usize>,
    #[serde(default, rename = "task")]
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub merge: MergeSettings,
    pub roles: Option<RoleRules>,
}

impl ConfigLayer {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut layer = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            layer.rebase(dir);
        }
        Ok(layer)
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        self.base.as_mut().map(fix);
        self.output.as_mut().map(fix);
        self.report.as_mut().map(fix);
        for t in &mut self.tasks {
            fix(&mut t.path);
        }
    }
}

pub fn preset(name: &str) -> Result<MergeConfig> {
    match name {
        "full-finetune" | "full" => Ok(MergeConfig::full_finetune()),
        "adapter" | "lora" => Ok(MergeConfig::adapter()),
        "large-model" | "large" => Ok(MergeConfig::large_model()),
        _ => Err(Error::Config(format!("unknown preset `{name}` (expected full-finetune, adapter or large-model)"))),
    }
}

/// The fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub base: PathBuf,
    pub tasks: Vec<TaskEntry>,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub threads: Option<usize>,
    pub merge: MergeConfig,
    pub rules: RoleRules,
    pub lora: bool,
    pub lora_scale: f32,
    pub keep_dtype: bool,
    pub compare_modes: bool,
}

fn apply(merge: &mut MergeConfig, s: &MergeSettings) -> Result<()> {
    if let Some(p) = &s.preset {
        let p = preset(p)?;
        merge.eta = p.eta;
        merge.gamma = p.gamma;
    }
    merge.eta = s.eta.unwrap_or(merge.eta);
    merge.gamma = s.gamma.unwrap_or(merge.gamma);
    merge.rank_tol = s.rank_tol.unwrap_or(merge.rank_tol);
    merge.solver_tol = s.solver_tol.unwrap_or(merge.solver_tol);
    if let Some(m) = &s.mode {
        merge.mode = m.parse::<MergeMode>()?;
    }
    if let Some(b) = &s.baseline {
        merge.baseline = b.parse::<Baseline>()?;
    }
    Ok(())
}

impl CliConfig {
    /// Resolves `layers` from lowest to highest precedence.
    pub fn resolve(layers: &[ConfigLayer]) -> Result<Self> {
        let pick = |f: fn(&ConfigLayer) -> Option<PathBuf>| layers.iter().rev().find_map(f);
        let base = pick(|l| l.base.clone())
            .ok_or_else(|| Error::Config("no base checkpoint given (--base or `base` in the config file)".into()))?;
        let tasks = layers.iter().rev().find(|l| !l.tasks.is_empty()).map(|l| l.tasks.clone()).unwrap_or_default();
        if tasks.is_empty() {
            return Err(Error::Config("no task checkpoints given (--task or [[task]] in the config file)".into()));
        }
        let flag =
            |f: fn(&MergeSettings) -> Option<bool>| layers.iter().rev().find_map(|l| f(&l.merge)).unwrap_or(false);
        let lora = flag(|m| m.lora);

        let mut merge = if lora { MergeConfig::adapter() } else { MergeConfig::full_finetune() };
        for l in layers {
            apply(&mut merge, &l.merge)?;
        }
        merge.validate()?;

        let threads = layers.iter().rev().find_map(|l| l.threads);
        if threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let lora_scale = layers.iter().rev().find_map(|l| l.merge.lora_scale).unwrap_or(1.0);
        if !lora_scale.is_finite() {
            return Err(Error::Config(format!("lora_scale must be finite, got {lora_scale}")));
        }
        Ok(Self {
            base,
            tasks,
            output: pick(|l| l.output.clone()),
            report: pick(|l| l.report.clone()),
            threads,
            merge,
            rules: layers.iter().rev().find_map(|l| l.roles.clone()).unwrap_or_default(),
            lora,
            lora_scale,
            keep_dtype: flag(|m| m.keep_dtype),
            compare_modes: flag(|m| m.compare_modes),
        })
    }

    pub fn open_set(&self) -> Result<CheckpointSet> {
        let base = Checkpoint::open(&self.base)?;
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                let ck = Checkpoint::open(&t.path)?;
                Ok(if self.lora {
                    TaskInput::lora(t.resolved_id(), ck, t.lora_scale.unwrap_or(self.lora_scale))
                } else {
                    TaskInput::full(t.resolved_id(), ck)
                })
            })
            .collect::<Result<_>>()?;
        CheckpointSet::new(base, tasks)
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            config: self.merge,
            rules: self.rules.clone(),
            threads: self.threads,
            keep_dtype: self.keep_dtype,
            compare_modes: self.compare_modes,
            progress: true,
        }
    }
}
