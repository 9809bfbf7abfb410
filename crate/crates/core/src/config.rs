//! Run configuration: one TOML document with `[model]`, `[schedule]`,
//! `[train]` (plus `[train.weights]`, `[train.ablations]`,
//! `[train.optimizer]`), `[haop]` and `[data]` tables.
//!
//! Overrides use dotted keys (`train.steps=10`); a bare leaf name
//! (`steps=10`) works when it is unambiguous. Values are parsed as TOML
//! literals and fall back to strings, so `stage=joint` needs no quotes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, Sharing};
use crate::error::{Error, Result};
use crate::haop::HaopParams;
use crate::schedule::ScheduleParams;
use crate::train::TrainConfig;

/// Where training scenes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory written by `gen-data`; generated in memory when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub scenes: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            scenes: 80,
            frames: 8,
            size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
    pub haop: HaopParams,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(one_line(&e.to_string())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the fully resolved configuration as `config.toml` in `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Applies `key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let ov = ov.as_ref().trim_start_matches("--");
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not of the form key=value")))?;
            let path = resolve_key(&root, key.trim())?;
            set_path(&mut root, &path, parse_value(raw.trim()))?;
        }
        let out: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.stage_model().validate()?;
        self.schedule.build()?;
        self.train.validate()?;
        self.haop.validate()?;
        let d = &self.data;
        if d.scenes == 0 || d.frames == 0 {
            return Err(Error::Config("data.scenes and data.frames must be >= 1".into()));
        }
        if d.size != self.model.latent_size {
            return Err(Error::Config(format!(
                "data.size ({}) must equal model.latent_size ({})",
                d.size, self.model.latent_size
            )));
        }
        Ok(())
    }

    /// The architecture trained in the configured stage: stage 1 drops the
    /// temporal and cross-modal layers; the separate-network ablation
    /// duplicates everything.
    pub fn stage_model(&self) -> DenoiserConfig {
        let mut m = match self.train.stage {
            crate::train::Stage::Haop => self.model.without_video_layers(),
            crate::train::Stage::Joint => self.model.clone(),
        };
        if self.train.ablations.separate_unets {
            m.sharing = Sharing::Separate;
        }
        m
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn leaf_paths(v: &toml::Value, prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                prefix.push(k.clone());
                leaf_paths(child, prefix, out);
                prefix.pop();
            }
        }
        _ => out.push(prefix.clone()),
    }
}

/// Dotted keys are taken as-is; a bare key must name exactly one leaf.
fn resolve_key(root: &toml::Value, key: &str) -> Result<Vec<String>> {
    if key.is_empty() {
        return Err(Error::Config("empty override key".into()));
    }
    let key = key.replace('-', "_");
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    let mut leaves = Vec::new();
    leaf_paths(root, &mut Vec::new(), &mut leaves);
    // optional keys are absent from `root` while unset
    let mut template = RunConfig::default();
    template.train.learning_rate = Some(0.0);
    template.data.dir = Some(PathBuf::new());
    if let Ok(t) = toml::Value::try_from(&template) {
        leaf_paths(&t, &mut Vec::new(), &mut leaves);
    }
    leaves.sort();
    leaves.dedup();
    let hits: Vec<_> = leaves.into_iter().filter(|p| p.last() == Some(&key)).collect();
    match hits.len() {
        1 => Ok(hits.into_iter().next().unwrap_or_default()),
        0 => Err(Error::Config(format!("unknown config key `{key}` (use a dotted section.key path)"))),
        _ => Err(Error::Config(format!(
            "ambiguous config key `{key}`: {}",
            hits.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<()> {
    let mut cur = root;
    for (i, part) in path.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", path[..i].join("."))))?;
        if i + 1 == path.len() {
            table.insert(part.clone(), value);
            return Ok(());
        }
        cur = table
            .get_mut(part)
            .ok_or_else(|| Error::Config(format!("unknown config section `{}`", path[..=i].join("."))))?;
    }
    Ok(())
}
