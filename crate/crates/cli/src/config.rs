//! Experiment configuration: TOML with one table per concern, every key
//! optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use guidelab::guidance::{DEFAULT_BACKWARD_LR, DEFAULT_STRENGTH, EMBED_DIM};
use guidelab::{
    Component, EmbeddingMap, GaussianMixtureWorld, GradientPath, GuidancePrompt, GuidanceSchedule,
    Point, SamplerConfig, ScheduleKind, SpdMatrix, Window,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub guidance: GuidanceSpec,
    pub sampler: SamplerSpec,
    pub output: OutputSpec,
    pub metrics: MetricSpec,
    pub sweep: SweepSpec,
    pub ablate: AblateSpec,
    pub switch: SwitchSpec,
    pub fphi: FphiSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorldKind {
    FourCorners,
    StandardNormal,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub kind: WorldKind,
    /// Corner distance from the origin along each axis (four-corners).
    pub offset: f64,
    /// Dimension of the standard-normal world.
    pub dim: usize,
    /// Component list for `kind = "custom"`.
    pub components: Vec<ComponentSpec>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            kind: WorldKind::FourCorners,
            offset: 4.0,
            dim: 2,
            components: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance.
    pub cov: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Class,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowMode {
    Always,
    OnThenOff,
    OffThenOn,
    Switch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSpec {
    pub target: TargetKind,
    pub label: usize,
    pub strength: f64,
    pub mode: WindowMode,
    pub p: f64,
    /// Second prompt's label in `switch` mode.
    pub switch_label: usize,
    pub k: usize,
    pub m: usize,
    pub backward_lr: f64,
    pub gradient_path: GradientPath,
    pub map_seed: u64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            target: TargetKind::Class,
            label: 0,
            strength: DEFAULT_STRENGTH,
            mode: WindowMode::Always,
            p: 0.6,
            switch_label: 2,
            k: 5,
            m: 10,
            backward_lr: DEFAULT_BACKWARD_LR,
            gradient_path: GradientPath::default(),
            map_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub steps: usize,
    pub chains: usize,
    pub seed: u64,
    pub schedule: ScheduleKind,
    /// Worker threads; 0 picks the machine default.
    pub threads: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            chains: 500,
            seed: 0,
            schedule: ScheduleKind::Cosine,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub plots: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            plots: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrechetReference {
    /// Exact moments of the target label's components.
    Target,
    /// Exact moments of the whole mixture.
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSpec {
    pub frechet_reference: FrechetReference,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            frechet_reference: FrechetReference::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub k: Vec<usize>,
    pub m: Vec<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            k: vec![1, 5, 10, 15],
            m: vec![0, 10, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSpec {
    /// Signed activation fractions: `p > 0` starts unguided, `p < 0` starts
    /// guided, `0` and `-1` guide throughout.
    pub p: Vec<f64>,
}

impl Default for AblateSpec {
    fn default() -> Self {
        Self {
            p: vec![-0.8, -0.6, -0.4, -0.1, 1.0, 0.8, 0.6, 0.4, 0.1, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchSpec {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub p: Vec<f64>,
}

impl Default for SwitchSpec {
    fn default() -> Self {
        Self {
            first: vec![0],
            second: vec![2],
            p: vec![0.1, 0.2, 0.4, 0.6, 0.8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FphiSpec {
    /// Chains for `dump`; records = chains * steps.
    pub dump_chains: usize,
    /// Dataset path; defaults to `trajectories.bin` in the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Checkpoint path; defaults to `fphi_model.bin` in the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub train_seed: u64,
}

impl Default for FphiSpec {
    fn default() -> Self {
        Self {
            dump_chains: 300,
            dataset: None,
            model: None,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            train_seed: 0,
        }
    }
}

/// A parsed configuration plus the dotted keys that fell back to defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub defaults_applied: Vec<String>,
}

/// Reads `path` (if any), applies `key=value` overrides and validates.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<LoadedConfig> {
    let mut table: Table = toml::from_str(text).context("config is not valid TOML")?;
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    let config: ExperimentConfig = Value::Table(table.clone())
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("invalid config: {}", e.message()))?;
    config.validate()?;
    let defaults = Value::try_from(ExperimentConfig::default()).expect("default config serializes");
    let mut defaults_applied = Vec::new();
    missing_keys(&defaults, &Value::Table(table), "", &mut defaults_applied);
    Ok(LoadedConfig { config, defaults_applied })
}

fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .with_context(|| format!("override `{item}` is not of the form key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty override key in `{item}`"))?;
    let mut cursor = table;
    for part in parts {
        cursor = cursor
            .entry(part)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .with_context(|| format!("override key `{key}`: `{part}` is not a table"))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn missing_keys(defaults: &Value, given: &Value, prefix: &str, out: &mut Vec<String>) {
    let Value::Table(d) = defaults else { return };
    for (k, v) in d {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let empty = Value::Table(Table::new());
        match (given.as_table().and_then(|g| g.get(k)), v) {
            (None, Value::Table(_)) => missing_keys(v, &empty, &path, out),
            (None, _) => out.push(path),
            (Some(g), Value::Table(_)) => missing_keys(v, g, &path, out),
            (Some(_), _) => {}
        }
    }
}

fn check_label(world: &GaussianMixtureWorld, key: &str, label: usize) -> Result<()> {
    if !world.has_label(label) {
        bail!("{key} = {label} names no component of the world (labels {:?})", world.labels());
    }
    Ok(())
}

fn range(ok: bool, what: &str) -> Result<()> {
    if !ok {
        bail!("out-of-range value: requires {what}");
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.guidance;
        range(g.k >= 1, "guidance.k >= 1 (k is the self-recurrence count)")?;
        range(g.strength >= 0.0 && g.strength.is_finite(), "guidance.strength >= 0")?;
        range(g.backward_lr > 0.0 && g.backward_lr.is_finite(), "guidance.backward_lr > 0")?;
        range((0.0..=1.0).contains(&g.p), "0 <= guidance.p <= 1")?;
        let s = &self.sampler;
        range(s.steps >= 1, "sampler.steps >= 1")?;
        range(s.chains >= 1, "sampler.chains >= 1")?;
        range(self.world.offset.is_finite(), "world.offset finite")?;
        range(self.world.dim >= 1 && self.world.dim <= guidelab::math::MAX_DIM, "1 <= world.dim <= 16")?;
        range(self.sweep.k.iter().all(|&k| k >= 1), "every sweep.k >= 1")?;
        range(self.ablate.p.iter().all(|p| (-1.0..=1.0).contains(p)), "every ablate.p in [-1, 1]")?;
        range(self.switch.p.iter().all(|p| (0.0..=1.0).contains(p)), "every switch.p in [0, 1]")?;
        range(self.fphi.dump_chains >= 1, "fphi.dump_chains >= 1")?;
        range(self.fphi.batch_size >= 1, "fphi.batch_size >= 1")?;
        range(self.fphi.learning_rate > 0.0, "fphi.learning_rate > 0")?;
        let world = self.build_world()?;
        check_label(&world, "guidance.label", g.label)?;
        if g.mode == WindowMode::Switch {
            check_label(&world, "guidance.switch_label", g.switch_label)?;
        }
        Ok(())
    }

    /// Labels named by the `[switch]` grid; only the `switch` command needs them.
    pub fn validate_switch_grid(&self, world: &GaussianMixtureWorld) -> Result<()> {
        for &l in &self.switch.first {
            check_label(world, "switch.first", l)?;
        }
        for &l in &self.switch.second {
            check_label(world, "switch.second", l)?;
        }
        Ok(())
    }

    pub fn build_world(&self) -> Result<GaussianMixtureWorld> {
        let w = &self.world;
        Ok(match w.kind {
            WorldKind::FourCorners => GaussianMixtureWorld::four_corners(w.offset)?,
            WorldKind::StandardNormal => GaussianMixtureWorld::standard_normal(w.dim)?,
            WorldKind::Custom => {
                if w.components.is_empty() {
                    bail!("world.kind = \"custom\" needs at least one [[world.components]] entry");
                }
                let comps = w
                    .components
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let d = c.mean.len();
                        if c.cov.len() != d * d {
                            bail!("world.components[{i}].cov must hold {} entries", d * d);
                        }
                        Ok(Component {
                            weight: c.weight,
                            mean: Point::from_column_slice(&c.mean),
                            cov: SpdMatrix::new(DMatrix::from_row_slice(d, d, &c.cov))?,
                            label: c.label.unwrap_or(i),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                GaussianMixtureWorld::new(comps)?
            }
        })
    }

    pub fn build_map(&self, dim: usize) -> Result<EmbeddingMap> {
        Ok(EmbeddingMap::from_seed(self.guidance.map_seed, EMBED_DIM, dim)?)
    }

    pub fn prompt_for(&self, label: usize, world: &GaussianMixtureWorld, map: &EmbeddingMap) -> Result<GuidancePrompt> {
        let s = self.guidance.strength;
        Ok(match self.guidance.target {
            TargetKind::Class => GuidancePrompt::class(label, s)?,
            TargetKind::Embedding => GuidancePrompt::embedding(map.class_embedding(world, label)?, s)?,
        })
    }

    /// The schedule described by the `[guidance]` table.
    pub fn build_schedule(&self, world: &GaussianMixtureWorld, map: &EmbeddingMap) -> Result<GuidanceSchedule> {
        let g = &self.guidance;
        let window = match g.mode {
            WindowMode::Always => Window::Always,
            WindowMode::OnThenOff => Window::OnThenOff(g.p),
            WindowMode::OffThenOn => Window::OffThenOn(g.p),
            WindowMode::Switch => Window::Switch {
                p: g.p,
                then: self.prompt_for(g.switch_label, world, map)?,
            },
        };
        self.schedule_with(self.prompt_for(g.label, world, map)?, window, g.k, g.m)
    }

    pub fn schedule_with(&self, prompt: GuidancePrompt, window: Window, k: usize, m: usize) -> Result<GuidanceSchedule> {
        Ok(GuidanceSchedule::new(prompt, window, k, m)?
            .with_backward_lr(self.guidance.backward_lr)?
            .with_gradient_path(self.guidance.gradient_path))
    }

    pub fn sampler_config(&self, dim: usize) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            dim,
            chains: self.sampler.chains,
            seed: self.sampler.seed,
            schedule_kind: self.sampler.schedule,
            record_traces: false,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default_table() {
        let loaded = parse_config_str("", &[]).unwrap();
        assert_eq!(loaded.config, ExperimentConfig::default());
        assert_eq!(loaded.config.sampler.steps, 100);
        assert_eq!((loaded.config.guidance.k, loaded.config.guidance.m), (5, 10));
        assert!(loaded.defaults_applied.contains(&"guidance.k".to_string()));
        assert!(loaded.defaults_applied.contains(&"sampler.steps".to_string()));
    }

    #[test]
    fn zero_recurrence_is_a_range_error() {
        let err = parse_config_str("[guidance]\nk = 0\n", &[]).unwrap_err().to_string();
        assert!(err.contains("k >= 1"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str("[guidance]\nkk = 3\n", &[]).unwrap_err().to_string();
        assert!(err.contains("kk"), "{err}");
        let err = parse_config_str("[nope]\n", &[]).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn type_mismatch_names_expected_type() {
        let err = parse_config_str("[sampler]\nsteps = \"many\"\n", &[]).unwrap_err().to_string();
        assert!(err.contains("integer") || err.contains("usize"), "{err}");
    }

    #[test]
    fn overrides_apply_and_are_not_defaults() {
        let loaded = parse_config_str(
            "",
            &["guidance.k=3".into(), "sampler.schedule=linear".into(), "output.dir = out".into()],
        )
        .unwrap();
        assert_eq!(loaded.config.guidance.k, 3);
        assert_eq!(loaded.config.sampler.schedule, ScheduleKind::Linear);
        assert_eq!(loaded.config.output.dir, PathBuf::from("out"));
        assert!(!loaded.defaults_applied.contains(&"guidance.k".to_string()));
        assert!(parse_config_str("", &["novalue".into()]).is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.guidance.mode = WindowMode::Switch;
        cfg.guidance.gradient_path = GradientPath::FrozenEpsilon;
        cfg.fphi.dataset = Some(PathBuf::from("data/x.bin"));
        cfg.world.kind = WorldKind::Custom;
        cfg.world.components = vec![ComponentSpec { weight: 1.0, mean: vec![0.0, 1.0], cov: vec![1.0, 0.0, 0.0, 1.0], label: None }];
        cfg.guidance.switch_label = 0;
        cfg.switch.second = vec![0];
        let back = parse_config_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn missing_label_is_rejected() {
        let err = parse_config_str("[guidance]\nlabel = 7\n", &[]).unwrap_err().to_string();
        assert!(err.contains("guidance.label"), "{err}");
    }
}
