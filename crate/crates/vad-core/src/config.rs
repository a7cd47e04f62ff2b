//! Run configuration: one JSON document drives the whole pipeline. Unknown
//! keys are rejected, and every run directory stores the resolved config
//! verbatim together with its hash.

use crate::cvae::{CvaeHyper, FinetuneHyper};
use crate::error::{Result, VadError};
use crate::flow::FlowParams;
use crate::memae::MemAeHyper;
use crate::scenegen::{
    self, AgentConfig, BrakingEvent, Environment, LeadConfig, ScenarioConfig, SpeedStep,
    WeatherConfig,
};
use crate::scoring::ScoreWeights;
use crate::stc::{DetectorStub, StcParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSource {
    /// Pyramidal variational estimate from rendered frames.
    Estimated,
    /// Analytic generator motion, for isolating model behavior from
    /// flow-estimator error.
    GroundTruth,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowStageConfig {
    pub source: FlowSource,
    pub params: FlowParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub train_scenarios: usize,
    pub test_scenarios: usize,
    pub frames_per_scenario: usize,
    pub agents: usize,
    pub ego_speed_range: (f64, f64),
    /// Max magnitude of gentle ego-speed steps in training clips.
    pub speed_step_max: f64,
    pub lead_gap_range: (f64, f64),
    pub braking_decel_range: (f64, f64),
    pub braking_onset_range: (usize, usize),
    pub stop_duration_range: (usize, usize),
    pub noise_sigma_range: (f64, f64),
    pub rain_scenario_fraction: f64,
    pub rain_density: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            train_scenarios: 20,
            test_scenarios: 8,
            frames_per_scenario: 150,
            agents: 2,
            ego_speed_range: (1.0, 1.6),
            speed_step_max: 0.15,
            lead_gap_range: (30.0, 44.0),
            braking_decel_range: (0.35, 0.6),
            braking_onset_range: (50, 80),
            stop_duration_range: (6, 12),
            noise_sigma_range: (0.01, 0.04),
            rain_scenario_fraction: 0.5,
            rain_density: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub enabled: bool,
    pub hyper: FinetuneHyper,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub max_cubes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightVariant {
    pub name: String,
    pub weights: ScoreWeights,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    pub variants: Vec<WeightVariant>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxSource {
    GroundTruth,
    Detected,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxCondition {
    pub name: String,
    pub source: BoxSource,
    /// Required when source is `detected`.
    pub stub: Option<DetectorStub>,
    /// IoU threshold for the greedy tracker over detections.
    pub tracker_iou: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub conditions: Vec<BoxCondition>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub frame_height: usize,
    pub frame_width: usize,
    pub generator: GeneratorConfig,
    pub flow: FlowStageConfig,
    pub stc: StcParams,
    pub memae: MemAeHyper,
    pub cvae: CvaeHyper,
    pub finetune: FinetuneConfig,
    pub calibration: CalibrationConfig,
    pub scoring: ScoringConfig,
    pub detector: DetectorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            precision: Precision::F32,
            frame_height: 64,
            frame_width: 64,
            generator: GeneratorConfig::default(),
            flow: FlowStageConfig {
                source: FlowSource::Estimated,
                params: FlowParams::default(),
            },
            stc: StcParams::default(),
            memae: MemAeHyper::default(),
            cvae: CvaeHyper::default(),
            finetune: FinetuneConfig {
                enabled: true,
                hyper: FinetuneHyper::default(),
            },
            calibration: CalibrationConfig { max_cubes: 1200 },
            scoring: ScoringConfig {
                variants: vec![
                    WeightVariant {
                        name: "default".into(),
                        weights: ScoreWeights {
                            w_r: 10.0,
                            w_p: 0.1,
                            w_rp: 10.0,
                            w_pp: 0.1,
                        },
                    },
                    WeightVariant {
                        name: "swapped".into(),
                        weights: ScoreWeights {
                            w_r: 0.1,
                            w_p: 10.0,
                            w_rp: 0.1,
                            w_pp: 10.0,
                        },
                    },
                    WeightVariant {
                        name: "flow-only".into(),
                        weights: ScoreWeights {
                            w_r: 10.0,
                            w_p: 0.0,
                            w_rp: 10.0,
                            w_pp: 0.0,
                        },
                    },
                ],
            },
            detector: DetectorConfig {
                conditions: vec![
                    BoxCondition {
                        name: "gt".into(),
                        source: BoxSource::GroundTruth,
                        stub: None,
                        tracker_iou: 0.2,
                    },
                    BoxCondition {
                        name: "detected".into(),
                        source: BoxSource::Detected,
                        stub: Some(DetectorStub {
                            miss_rate: 0.08,
                            jitter_sigma: 1.0,
                            size_bias: 1.0,
                            distance_miss_boost: 0.15,
                            small_area_threshold: 100,
                            seed: 71,
                        }),
                        tracker_iou: 0.2,
                    },
                    BoxCondition {
                        name: "detected-harsh".into(),
                        source: BoxSource::Detected,
                        stub: Some(DetectorStub {
                            miss_rate: 0.5,
                            jitter_sigma: 1.5,
                            size_bias: 1.0,
                            distance_miss_boost: 0.2,
                            small_area_threshold: 100,
                            seed: 72,
                        }),
                        tracker_iou: 0.2,
                    },
                ],
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_height % 4 != 0 || self.frame_width % 4 != 0 {
            return Err(VadError::Config("frame size must be divisible by 4".into()));
        }
        if self.stc.t_len < 2 {
            return Err(VadError::Config("stc.t_len must be at least 2".into()));
        }
        let flow_ch = (self.stc.t_len - 1) * 2;
        if self.memae.in_channels != flow_ch {
            return Err(VadError::Config(format!(
                "memae.in_channels must be (t_len - 1) * 2 = {flow_ch}"
            )));
        }
        if self.cvae.flow_channels != flow_ch {
            return Err(VadError::Config(format!(
                "cvae.flow_channels must be (t_len - 1) * 2 = {flow_ch}"
            )));
        }
        if self.cvae.cond_channels != self.stc.t_len * 3 {
            return Err(VadError::Config(format!(
                "cvae.cond_channels must be t_len * 3 = {}",
                self.stc.t_len * 3
            )));
        }
        if self.cvae.input_size != crate::stc::CUBE_SIZE {
            return Err(VadError::Config("cvae.input_size must match the cube size".into()));
        }
        if self.scoring.variants.is_empty() {
            return Err(VadError::Config("scoring.variants must not be empty".into()));
        }
        for v in &self.scoring.variants {
            v.weights.validate()?;
        }
        let mut names: Vec<&str> = self.scoring.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.scoring.variants.len() {
            return Err(VadError::Config("duplicate scoring variant names".into()));
        }
        if self.detector.conditions.is_empty() {
            return Err(VadError::Config("detector.conditions must not be empty".into()));
        }
        for c in &self.detector.conditions {
            if c.source == BoxSource::Detected && c.stub.is_none() {
                return Err(VadError::Config(format!(
                    "condition {} uses detected boxes but has no stub",
                    c.name
                )));
            }
        }
        let g = &self.generator;
        if g.train_scenarios == 0 || g.test_scenarios == 0 {
            return Err(VadError::Config("generator needs train and test scenarios".into()));
        }
        let worst_braking = (g.ego_speed_range.1 / g.braking_decel_range.0).ceil() as usize
            + g.stop_duration_range.1;
        if g.braking_onset_range.1 + worst_braking > g.frames_per_scenario {
            return Err(VadError::Config(
                "braking onset range leaves too little room before the clip ends".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| VadError::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path).map_err(|e| VadError::io(path.display().to_string(), e))?;
    let config: RunConfig = serde_json::from_slice(&bytes)
        .map_err(|e| VadError::Config(format!("parse {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn mix_seed(master: u64, tag: u64, index: u64, attempt: u64) -> u64 {
    let mut x = master
        ^ tag.wrapping_mul(0x9E3779B97F4A7C15)
        ^ index.wrapping_mul(0xC2B2AE3D27D4EB4F)
        ^ attempt.wrapping_mul(0xD1B54A32D192ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x ^ (x >> 31)
}

const AGENT_PALETTE: [[f32; 3]; 4] = [
    [0.15, 0.35, 0.85],
    [0.10, 0.65, 0.30],
    [0.80, 0.70, 0.15],
    [0.55, 0.20, 0.75],
];

const LEAD_PALETTE: [[f32; 3]; 3] = [
    [0.85, 0.15, 0.12],
    [0.90, 0.45, 0.10],
    [0.75, 0.10, 0.35],
];

fn sample_scenario(
    cfg: &RunConfig,
    braking: bool,
    index: usize,
    attempt: u64,
) -> ScenarioConfig {
    let g = &cfg.generator;
    let tag = if braking { 0xB } else { 0xA };
    let seed = mix_seed(cfg.seed, tag, index as u64, attempt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_speed = rng.gen_range(g.ego_speed_range.0..=g.ego_speed_range.1);

    let mut ego_speed = vec![SpeedStep {
        from_frame: 0,
        speed: base_speed,
    }];
    if !braking {
        // Gentle speed steps enrich the normal-motion distribution.
        let steps = rng.gen_range(0..=2);
        for _ in 0..steps {
            let at = rng.gen_range(20..g.frames_per_scenario.saturating_sub(20).max(21));
            let delta = rng.gen_range(-g.speed_step_max..=g.speed_step_max);
            let speed = (base_speed + delta)
                .clamp(g.ego_speed_range.0, g.ego_speed_range.1);
            ego_speed.push(SpeedStep {
                from_frame: at,
                speed,
            });
        }
        ego_speed.sort_by_key(|s| s.from_frame);
    }

    let agents = (0..g.agents)
        .map(|a| {
            let side = if a % 2 == 0 { -1.0 } else { 1.0 };
            AgentConfig {
                lane_offset: side * (0.27 + rng.gen_range(-0.03..=0.03)),
                initial_gap: rng.gen_range(45.0..80.0),
                relative_speed: rng.gen_range(0.1..0.35) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                width: rng.gen_range(9.0..13.0),
                height: rng.gen_range(7.0..10.0),
                color: AGENT_PALETTE[(index + a) % AGENT_PALETTE.len()],
            }
        })
        .collect();

    let braking_events = if braking {
        vec![BrakingEvent {
            onset_frame: rng.gen_range(g.braking_onset_range.0..=g.braking_onset_range.1),
            deceleration: rng.gen_range(g.braking_decel_range.0..=g.braking_decel_range.1),
            stop_duration: rng.gen_range(g.stop_duration_range.0..=g.stop_duration_range.1),
        }]
    } else {
        vec![]
    };

    let rain = rng.gen_bool(g.rain_scenario_fraction.clamp(0.0, 1.0));
    ScenarioConfig {
        seed: rng.gen(),
        frame_height: cfg.frame_height,
        frame_width: cfg.frame_width,
        num_frames: g.frames_per_scenario,
        ego_speed,
        lead: LeadConfig {
            width: rng.gen_range(14.0..18.0),
            height: rng.gen_range(10.0..13.0),
            color: LEAD_PALETTE[index % LEAD_PALETTE.len()],
            initial_gap: rng.gen_range(g.lead_gap_range.0..=g.lead_gap_range.1),
        },
        agents,
        braking_events,
        weather: WeatherConfig {
            noise_sigma: rng.gen_range(g.noise_sigma_range.0..=g.noise_sigma_range.1),
            rain_density: if rain { g.rain_density } else { 0.0 },
        },
        environment: if index % 2 == 0 {
            Environment::City
        } else {
            Environment::Highway
        },
    }
}

/// Sample a collision-free scenario config; colliding candidates are
/// resampled deterministically with a bumped attempt counter.
pub fn sample_valid_scenario(cfg: &RunConfig, braking: bool, index: usize) -> Result<ScenarioConfig> {
    const MAX_ATTEMPTS: u64 = 50;
    for attempt in 0..MAX_ATTEMPTS {
        let candidate = sample_scenario(cfg, braking, index, attempt);
        if scenegen::simulate(&candidate).is_ok() {
            return Ok(candidate);
        }
    }
    Err(VadError::Config(format!(
        "could not sample a collision-free scenario (braking={braking}, index={index}) in {MAX_ATTEMPTS} attempts"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hashes_stably() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        let mut other = RunConfig::default();
        other.seed = 8;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(RunConfig::default()).unwrap();
        value["surprise"] = serde_json::json!(1);
        let parsed: std::result::Result<RunConfig, _> = serde_json::from_value(value);
        assert!(parsed.is_err());
    }

    #[test]
    fn cross_field_validation() {
        let mut cfg = RunConfig::default();
        cfg.stc.t_len = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.scoring.variants[1].name = "default".into();
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.detector.conditions[1].stub = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sampled_scenarios_are_deterministic_and_valid() {
        let cfg = RunConfig::default();
        for idx in 0..4 {
            let a = sample_valid_scenario(&cfg, true, idx).unwrap();
            let b = sample_valid_scenario(&cfg, true, idx).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.braking_events.len(), 1);
            scenegen::simulate(&a).unwrap();

            let t = sample_valid_scenario(&cfg, false, idx).unwrap();
            assert!(t.braking_events.is_empty());
        }
    }
}
