//! Run configuration: a JSON document with env / nets / train / path
//! sections. Unknown keys are rejected, every default is materialized into
//! the copy saved next to the run outputs, and dotted `--override` paths
//! patch the document before it is parsed.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use wmpolicy::envsim::PhysicalParams;
use wmpolicy::pathcmd::{PathKind, PursuitConfig};
use wmpolicy::trainer::{Phase, TrainConfig};
use wmpolicy::vaepolicy::PolicyConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub mass: f64,
    pub kp: f64,
    pub control_latency_ms: f64,
    pub max_torque: f64,
    pub joints: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection { mass: 5.74, kp: 50.0, control_latency_ms: 0.0, max_torque: 18.0, joints: 8 }
    }
}

impl EnvSection {
    pub fn params(&self) -> PhysicalParams {
        PhysicalParams {
            mass: self.mass,
            kp: self.kp,
            control_latency_ms: self.control_latency_ms,
            max_torque: self.max_torque,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetsSection {
    pub hidden: Vec<usize>,
    pub wm_hidden: Vec<usize>,
    pub z_dim: usize,
    pub sigma: f64,
    pub window: usize,
}

impl Default for NetsSection {
    fn default() -> Self {
        NetsSection {
            hidden: vec![256, 256],
            wm_hidden: vec![256, 256],
            z_dim: 16,
            sigma: 0.3,
            window: 2,
        }
    }
}

impl NetsSection {
    pub fn policy_config(&self, joints: usize) -> PolicyConfig {
        PolicyConfig {
            num_joints: joints,
            z_dim: self.z_dim,
            window: self.window,
            sigma: self.sigma,
            hidden: self.hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub phase: Phase,
    pub iterations: usize,
    pub samples_per_iter: usize,
    pub agents: usize,
    pub wm_updates: usize,
    pub policy_updates: usize,
    pub batch: usize,
    pub horizon: usize,
    pub lr_wm: f64,
    pub lr_policy: f64,
    pub buffer_capacity: usize,
    pub episode_len: usize,
    /// Save a checkpoint every this many iterations; 0 saves only the final
    /// one.
    pub checkpoint_every: usize,
    /// Decoder-drift regularizer weight for fine-tuning; 0 disables it.
    pub reg_weight: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            phase: Phase::MtScratch,
            iterations: 20,
            samples_per_iter: 1500,
            agents: 2,
            wm_updates: 200,
            policy_updates: 200,
            batch: 64,
            horizon: 8,
            lr_wm: 3e-4,
            lr_policy: 2e-4,
            buffer_capacity: 200_000,
            episode_len: 200,
            checkpoint_every: 0,
            reg_weight: 0.1,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            phase: self.phase,
            iterations: self.iterations,
            samples_per_iter: self.samples_per_iter,
            agents: self.agents,
            wm_updates: self.wm_updates,
            policy_updates: self.policy_updates,
            batch: self.batch,
            horizon: self.horizon,
            lr_wm: self.lr_wm,
            lr_policy: self.lr_policy,
            seed,
            buffer_capacity: self.buffer_capacity,
            episode_len: self.episode_len,
            reg_weight: self.reg_weight,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    pub kind: PathKind,
    pub scale: f64,
    pub speed: f64,
    pub lookahead: f64,
    pub omega_clamp: f64,
}

impl Default for PathSection {
    fn default() -> Self {
        PathSection {
            kind: PathKind::Oblong,
            scale: 1.0,
            speed: 0.9,
            lookahead: 0.6,
            omega_clamp: 1.5,
        }
    }
}

impl PathSection {
    pub fn pursuit(&self) -> PursuitConfig {
        PursuitConfig {
            lookahead: self.lookahead,
            speed: self.speed,
            omega_clamp: self.omega_clamp,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipsSection {
    /// Duration of each generated library clip, seconds.
    pub duration: f64,
}

impl Default for ClipsSection {
    fn default() -> Self {
        ClipsSection { duration: 10.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Input checkpoint for phases that continue from one; the CLI flag
    /// takes precedence and is materialized here so a saved config reruns
    /// without the original command line.
    pub checkpoint: Option<String>,
    /// Stored buffer files for off-policy fine-tuning.
    pub buffers: Vec<String>,
    pub env: EnvSection,
    pub nets: NetsSection,
    pub train: TrainSection,
    pub path: PathSection,
    pub clips: ClipsSection,
}

impl RunConfig {
    /// Load, apply overrides and the seed env var, and validate.
    pub fn load(
        path: Option<&std::path::Path>,
        overrides: &[String],
    ) -> anyhow::Result<RunConfig> {
        let mut value: serde_json::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => serde_json::json!({}),
        };
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let mut config: RunConfig = serde_json::from_value(value).context("config schema")?;
        if let Ok(seed) = std::env::var("WM_POLICY_SEED") {
            config.seed = seed.parse().context("WM_POLICY_SEED must be an integer")?;
        }
        if config.out_dir.is_empty() {
            config.out_dir = "runs/out".to_string();
        }
        if config.env.joints == 0 || config.env.joints % 2 != 0 {
            bail!("env.joints must be a positive even number");
        }
        config.env.params().validate()?;
        Ok(config)
    }

    /// Write the fully materialized configuration next to the run outputs.
    pub fn save_resolved(&self, dir: &std::path::Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("config_resolved.json"), text)?;
        Ok(())
    }
}

/// Apply one `key=value` override with a dotted path, e.g.
/// `env.mass=8.74` or `train.iterations=6`.
fn apply_override(value: &mut serde_json::Value, item: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = item.split_once('=') else {
        bail!("override `{item}` is not of the form key=value");
    };
    let parsed: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            bail!("override `{key}`: `{part}` is not an object");
        }
        let map = cursor.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_materialize_and_overrides_apply() {
        let cfg = RunConfig::load(None, &["env.mass=8.74".into(), "train.iterations=3".into()])
            .unwrap();
        assert_eq!(cfg.env.mass, 8.74);
        assert_eq!(cfg.train.iterations, 3);
        assert_eq!(cfg.nets.z_dim, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::json!({"env": {"masss": 1.0}});
        let err = serde_json::from_value::<RunConfig>(v.take()).unwrap_err();
        assert!(err.to_string().contains("masss"), "{err}");
    }
}
