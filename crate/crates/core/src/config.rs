//! TOML run configuration and its translation into training inputs.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, operator_config_text};
use crate::energy::{EnergySpec, ExternalPotential, GaussianMixture, TargetHandle};
use crate::error::{Error, Result};
use crate::geometry::ParticleEnsemble;
use crate::operator::OperatorConfig;
use crate::training::{
    keyed_rng, sample_initials, BarenblattFamily, EnergyFamily, GaussianFamily, InitialFamilySpec, InitialSample,
    LrSchedule, TrainConfig, UniformBox, UniformRectTri,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    LearnToEvolve,
    /// Fixed dataset drawn once from the family; no regeneration.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub mode: TrainMode,
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub batch: usize,
    #[serde(default)]
    pub warmup: usize,
    pub inner_max: usize,
    pub budget: usize,
    #[serde(default = "unit")]
    pub decay: f64,
    /// TOML integers are signed, so seeds above `i64::MAX` cannot be written.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub recenter: bool,
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Dataset size for baseline mode.
    #[serde(default = "one")]
    pub baseline_samples: usize,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

/// Where initial densities come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyConfig {
    /// One density reused every round: read from `path`, or drawn once from
    /// `from`. With `resample_points`, `from` is sampled afresh each round.
    Fixed {
        #[serde(default)]
        path: Option<String>,
        #[serde(default)]
        from: Option<Box<FamilyConfig>>,
        #[serde(default)]
        resample_points: bool,
    },
    UniformBox(UniformBox),
    UniformRectTri(UniformRectTri),
    Barenblatt(BarenblattFamily),
    GaussianMix(GaussianFamily),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergyConfig {
    Interaction {
        p: f64,
        q: f64,
    },
    InteractionRange {
        p: [f64; 2],
        q: [f64; 2],
    },
    Porous {
        exponent: f64,
    },
    External(ExternalPotential),
    /// KL towards a fixed mixture represented by `samples` draws.
    Kl {
        target: GaussianMixture,
        samples: usize,
    },
    /// KL towards a new random mixture per trajectory.
    KlFamily(GaussianFamily),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub operator: OperatorConfig,
    pub train: TrainSection,
    pub family: FamilyConfig,
    pub energy: EnergyConfig,
}

/// A parsed config together with the exact text it was read from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Text after overrides; this is what gets snapshotted and hashed.
    pub text: String,
}

impl LoadedConfig {
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.text)
    }
}

fn parse_error(e: toml::de::Error) -> Error {
    Error::config(e.to_string().trim_end().to_string())
}

/// Parse `text`, applying `key=value` overrides with dotted keys.
pub fn load_config_str(text: &str, overrides: &[String]) -> Result<LoadedConfig> {
    let text = if overrides.is_empty() {
        text.to_string()
    } else {
        let mut table: toml::Table = text.parse().map_err(parse_error)?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        toml::to_string(&table).map_err(|e| Error::config(e.to_string()))?
    };
    let config: RunConfig = toml::from_str(&text).map_err(parse_error)?;
    config.validate()?;
    Ok(LoadedConfig { config, text })
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    load_config_str(&text, overrides)
}

/// Set `a.b.c = value` in `table`. The value is read as a TOML literal, or
/// taken as a bare string if it does not parse as one.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl FamilyConfig {
    fn resolve(&self, workdir: &Path, seed: u64) -> Result<InitialFamilySpec> {
        Ok(match self {
            FamilyConfig::Fixed {
                path,
                from,
                resample_points,
            } => match (path, from) {
                (Some(p), None) => {
                    let e = ParticleEnsemble::read_file(workdir.join(p))
                        .map_err(|e| Error::config(format!("family.path {p}: {e}")))?;
                    InitialFamilySpec::Fixed(Arc::new(e))
                }
                (None, Some(gen)) => {
                    let inner = gen.resolve(workdir, seed)?;
                    if *resample_points {
                        inner
                    } else {
                        inner.validate()?;
                        let e = inner.sample(&mut keyed_rng(seed, 0, 0, "fixed"))?;
                        InitialFamilySpec::Fixed(Arc::new(e))
                    }
                }
                _ => return Err(Error::config("family.kind = \"fixed\" needs exactly one of `path` or `from`")),
            },
            FamilyConfig::UniformBox(b) => InitialFamilySpec::UniformBox(b.clone()),
            FamilyConfig::UniformRectTri(r) => InitialFamilySpec::UniformRectTri(r.clone()),
            FamilyConfig::Barenblatt(b) => InitialFamilySpec::Barenblatt(b.clone()),
            FamilyConfig::GaussianMix(g) => InitialFamilySpec::GaussianMix(g.clone()),
        })
    }
}

impl EnergyConfig {
    fn resolve(&self, seed: u64) -> Result<EnergyFamily> {
        Ok(match self {
            EnergyConfig::Interaction { p, q } => EnergyFamily::Fixed(EnergySpec::Interaction { p: *p, q: *q }),
            EnergyConfig::InteractionRange { p, q } => EnergyFamily::InteractionRange { p: *p, q: *q },
            EnergyConfig::Porous { exponent } => EnergyFamily::Fixed(EnergySpec::PorousInternal { exponent: *exponent }),
            EnergyConfig::External(pot) => EnergyFamily::Fixed(EnergySpec::External(pot.clone())),
            EnergyConfig::Kl { target, samples } => {
                if *samples == 0 {
                    return Err(Error::config("energy.samples must be >= 1"));
                }
                target.validate().map_err(|e| Error::config(format!("energy.target: {e}")))?;
                let handle = TargetHandle::sampled(target.clone(), *samples, &mut keyed_rng(seed, 0, 0, "target"))?;
                EnergyFamily::Fixed(EnergySpec::Kl(Arc::new(handle)))
            }
            EnergyConfig::KlFamily(g) => EnergyFamily::KlTargets(g.clone()),
        })
    }
}

impl RunConfig {
    /// Checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        self.operator.validate()?;
        let t = &self.train;
        if !(t.dt > 0.0 && t.dt.is_finite()) {
            return Err(Error::config(format!("train.dt must be > 0, got {}", t.dt)));
        }
        if t.mode == TrainMode::Baseline && t.baseline_samples == 0 {
            return Err(Error::config("train.baseline_samples must be >= 1"));
        }
        Ok(())
    }

    pub fn operator_fingerprint(&self) -> Result<String> {
        Ok(fingerprint(&operator_config_text(&self.operator)?))
    }

    /// Build the training inputs. Relative paths resolve against `workdir`.
    pub fn train_config(&self, workdir: &Path) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            dt: t.dt,
            steps: t.steps,
            batch: t.batch,
            warmup: t.warmup,
            inner_max: t.inner_max,
            budget: t.budget,
            decay: t.decay,
            seed: t.seed,
            lr: t.lr.clone(),
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            family: self.family.resolve(workdir, t.seed)?,
            energy: self.energy.resolve(t.seed)?,
            recenter: t.recenter,
            checkpoint_every: t.checkpoint_every,
        };
        cfg.validate()?;
        if cfg.family.dim() != self.operator.dim {
            return Err(Error::config(format!(
                "family is {}-dimensional but operator.dim = {}",
                cfg.family.dim(),
                self.operator.dim
            )));
        }
        Ok(cfg)
    }

    /// Frozen dataset for baseline training.
    pub fn baseline_data(&self, cfg: &TrainConfig) -> Result<Vec<InitialSample>> {
        sample_initials(&cfg.family, &cfg.energy, self.train.baseline_samples, cfg.seed, u64::MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
[operator]
dim = 2
embed_dim = 8
heads = 2
encoder_blocks = 1
lift_hidden = 8
ffn_hidden = 8
proj_hidden = 8

[train]
dt = 0.1
steps = 2
inner_max = 3
budget = 4
lr = { kind = "constant", lr = 1e-3 }

[family]
kind = "uniform_box"
lo = [-1.0, -1.0]
hi = [1.0, 1.0]
points = 16

[energy]
kind = "external"
potential = "quadratic"
"#;

    #[test]
    fn parses_and_resolves() {
        let c = load_config_str(SMOKE, &[]).unwrap();
        let t = c.config.train_config(Path::new(".")).unwrap();
        assert_eq!((t.steps, t.batch, t.budget), (2, 1, 4));
        assert!(matches!(t.energy, EnergyFamily::Fixed(EnergySpec::External(ExternalPotential::Quadratic))));
    }

    #[test]
    fn missing_dt_names_the_key() {
        let text = SMOKE.replace("dt = 0.1\n", "");
        let err = load_config_str(&text, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("dt"), "{err}");
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn overrides_apply_and_change_fingerprint() {
        let base = load_config_str(SMOKE, &[]).unwrap();
        let c = load_config_str(SMOKE, &["train.budget=7".into(), "train.seed = 3".into()]).unwrap();
        assert_eq!((c.config.train.budget, c.config.train.seed), (7, 3));
        assert_ne!(c.fingerprint(), base.fingerprint());
        let reparsed = load_config_str(&c.text, &[]).unwrap();
        assert_eq!(reparsed.config, c.config);
        assert!(load_config_str(SMOKE, &["train.budget".into()]).is_err());
        assert!(load_config_str(SMOKE, &["train.dt.x=1".into()]).is_err());
    }

    #[test]
    fn fixed_family_forms() {
        let text = SMOKE.replace(
            "kind = \"uniform_box\"",
            "kind = \"fixed\"\nfrom = { kind = \"uniform_box\", lo = [-1.0, -1.0], hi = [1.0, 1.0], points = 16 }",
        );
        let text = text.replace("lo = [-1.0, -1.0]\nhi = [1.0, 1.0]\npoints = 16\n", "");
        let c = load_config_str(&text, &[]).unwrap();
        let t = c.config.train_config(Path::new(".")).unwrap();
        assert!(matches!(t.family, InitialFamilySpec::Fixed(_)));
        let c = load_config_str(&text, &["family.resample_points=true".into()]).unwrap();
        let t = c.config.train_config(Path::new(".")).unwrap();
        assert!(matches!(t.family, InitialFamilySpec::UniformBox(_)));
        let bad = text.replace("kind = \"fixed\"", "kind = \"fixed\"\npath = \"x.txt\"");
        let c = load_config_str(&bad, &[]).unwrap();
        assert_eq!(c.config.train_config(Path::new(".")).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let typo = SMOKE.replace("steps = 2", "steps = 2\nstep = 2");
        assert_eq!(load_config_str(&typo, &[]).unwrap_err().exit_code(), 2);
        let c = load_config_str(SMOKE, &["operator.heads=3".into()]);
        assert_eq!(c.unwrap_err().exit_code(), 2);
        let c = load_config_str(SMOKE, &["operator.dim=1".into()]).unwrap();
        assert_eq!(c.config.train_config(Path::new(".")).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn kl_target_is_deterministic() {
        let text = SMOKE.replace(
            "kind = \"external\"\npotential = \"quadratic\"",
            "kind = \"kl\"\nsamples = 32\ntarget = { weights = [1.0], means = [[0.0, 0.0]], stds = [1.0] }",
        );
        let c = load_config_str(&text, &[]).unwrap();
        let a = c.config.train_config(Path::new(".")).unwrap();
        let b = c.config.train_config(Path::new(".")).unwrap();
        assert_eq!(a.energy, b.energy);
    }
}
