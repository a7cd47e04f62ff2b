//! Stage orchestration. Every stage writes into its own directory under the
//! run root together with a manifest (config hash, seed, input hashes), and
//! each stage checks its prerequisites before running. `run_all` chains the
//! whole pipeline; reruns from the same config are byte-identical.

use crate::checkpoint;
use crate::config::{sha256_file, BoxSource, FlowSource, Precision, RunConfig};
use crate::cvae::{self, CvaeParams, CvaeSample, JointSample};
use crate::dataset::{self, SplitKind, SplitSpec};
use crate::error::{Result, VadError};
use crate::eval as metrics;
use crate::flow;
use crate::memae::{self, MemAeParams};
use crate::scalar::Scalar;
use crate::scenegen::{BBox, GroundTruth};
use crate::scoring::{self, CubeErrors, TrainStats};
use crate::stc::{self, IouTracker, STCube, CUBE_SIZE};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Flow,
    TrainFlowAe,
    TrainCvae,
    Finetune,
    Calibrate,
    Score,
    Eval,
    Report,
}

pub const STAGE_ORDER: [Stage; 9] = [
    Stage::Gen,
    Stage::Flow,
    Stage::TrainFlowAe,
    Stage::TrainCvae,
    Stage::Finetune,
    Stage::Calibrate,
    Stage::Score,
    Stage::Eval,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Flow => "flow",
            Stage::TrainFlowAe => "train-flowae",
            Stage::TrainCvae => "train-cvae",
            Stage::Finetune => "finetune",
            Stage::Calibrate => "calibrate",
            Stage::Score => "score",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = VadError;
    fn from_str(s: &str) -> Result<Self> {
        STAGE_ORDER
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| VadError::Config(format!("unknown stage {s}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Relative artifact path -> sha256 of the consumed input.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub config_hash: String,
}

impl Run {
    /// Open a run directory, writing `config.json` on first use. A directory
    /// created under a different config is rejected.
    pub fn open(dir: &Path, config: RunConfig) -> Result<Run> {
        config.validate()?;
        fs::create_dir_all(dir).map_err(|e| VadError::io(dir.display().to_string(), e))?;
        let config_hash = config.hash();
        let config_path = dir.join("config.json");
        if config_path.exists() {
            let existing = crate::config::load_config(&config_path)?;
            if existing.hash() != config_hash {
                return Err(VadError::Config(format!(
                    "run directory {} was created with a different config",
                    dir.display()
                )));
            }
        } else {
            let bytes = serde_json::to_vec_pretty(&config)
                .map_err(|e| VadError::Other(format!("serialize config: {e}")))?;
            fs::write(&config_path, bytes)
                .map_err(|e| VadError::io(config_path.display().to_string(), e))?;
        }
        Ok(Run {
            dir: dir.to_path_buf(),
            config,
            config_hash,
        })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.name())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dir.join("dataset")
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("manifest.json")
    }

    /// Load a prerequisite stage's manifest, verifying it belongs to this
    /// config.
    pub fn require_stage(&self, stage: Stage) -> Result<StageManifest> {
        let path = self.manifest_path(stage);
        if !path.exists() {
            return Err(VadError::MissingPrerequisite(format!(
                "stage '{}' has not run (missing {})",
                stage.name(),
                path.display()
            )));
        }
        let manifest: StageManifest = dataset::read_json(&path)?;
        if manifest.config_hash != self.config_hash {
            return Err(VadError::MissingPrerequisite(format!(
                "stage '{}' was produced under config hash {} but this run uses {}",
                stage.name(),
                manifest.config_hash,
                self.config_hash
            )));
        }
        Ok(manifest)
    }

    fn write_manifest(
        &self,
        stage: Stage,
        inputs: BTreeMap<String, String>,
        outputs: Vec<String>,
    ) -> Result<()> {
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(|e| VadError::io(dir.display().to_string(), e))?;
        let manifest = StageManifest {
            stage: stage.name().to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            inputs,
            outputs,
        };
        let bytes = serde_json::to_vec_pretty(&manifest)
            .map_err(|e| VadError::Other(format!("serialize manifest: {e}")))?;
        let path = self.manifest_path(stage);
        fs::write(&path, bytes).map_err(|e| VadError::io(path.display().to_string(), e))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir)
            .unwrap_or(path)
            .display()
            .to_string()
    }

    fn hash_input(&self, map: &mut BTreeMap<String, String>, path: &Path) -> Result<()> {
        map.insert(self.rel(path), sha256_file(path)?);
        Ok(())
    }
}

pub fn run_stage(run: &Run, stage: Stage) -> Result<()> {
    match stage {
        Stage::Gen => stage_gen(run),
        Stage::Flow => stage_flow(run),
        Stage::TrainFlowAe => dispatch_precision(run, stage_train_flowae::<f32>, stage_train_flowae::<f64>),
        Stage::TrainCvae => dispatch_precision(run, stage_train_cvae::<f32>, stage_train_cvae::<f64>),
        Stage::Finetune => dispatch_precision(run, stage_finetune::<f32>, stage_finetune::<f64>),
        Stage::Calibrate => dispatch_precision(run, stage_calibrate::<f32>, stage_calibrate::<f64>),
        Stage::Score => dispatch_precision(run, stage_score::<f32>, stage_score::<f64>),
        Stage::Eval => stage_eval(run),
        Stage::Report => stage_report(run),
    }
}

fn dispatch_precision(
    run: &Run,
    f32_path: impl Fn(&Run) -> Result<()>,
    f64_path: impl Fn(&Run) -> Result<()>,
) -> Result<()> {
    match run.config.precision {
        Precision::F32 => f32_path(run),
        Precision::F64 => f64_path(run),
    }
}

pub fn run_all(dir: &Path, config: RunConfig) -> Result<()> {
    let run = Run::open(dir, config)?;
    for stage in STAGE_ORDER {
        run_stage(&run, stage)?;
    }
    Ok(())
}

// ── gen ─────────────────────────────────────────────────────────────

fn stage_gen(run: &Run) -> Result<()> {
    let g = &run.config.generator;
    let train_configs = (0..g.train_scenarios)
        .map(|i| crate::config::sample_valid_scenario(&run.config, false, i))
        .collect::<Result<Vec<_>>>()?;
    let test_configs = (0..g.test_scenarios)
        .map(|i| crate::config::sample_valid_scenario(&run.config, true, i))
        .collect::<Result<Vec<_>>>()?;
    let splits = vec![
        SplitSpec {
            name: "train".into(),
            kind: SplitKind::Train,
            configs: train_configs,
        },
        SplitSpec {
            name: "test".into(),
            kind: SplitKind::Test,
            configs: test_configs,
        },
    ];
    dataset::build_dataset(&run.dataset_dir(), &splits)?;
    let manifest_file = run.dataset_dir().join("manifest.json");
    run.write_manifest(
        Stage::Gen,
        BTreeMap::new(),
        vec![run.rel(&manifest_file)],
    )
}

// ── flow ────────────────────────────────────────────────────────────

fn stage_flow(run: &Run) -> Result<()> {
    run.require_stage(Stage::Gen)?;
    let root = run.dataset_dir();
    let manifest = dataset::load_manifest(&root)?;
    let mut outputs = Vec::new();
    for split in &manifest.splits {
        for (i, cfg) in split.configs.iter().enumerate() {
            let dir = root.join(&split.name).join(dataset::scenario_id(&split.name, i));
            let flows = match run.config.flow.source {
                FlowSource::Estimated => {
                    let frames = checkpoint::load_single::<f32>(&dir.join("frames.vadt"), "frames")?;
                    flow::flow_stack(&frames, &run.config.flow.params)?
                }
                FlowSource::GroundTruth => crate::scenegen::ground_truth_flow(cfg)?,
            };
            let path = dir.join("flows.vadt");
            checkpoint::save_single(&path, "flows", &flows)?;
            outputs.push(run.rel(&path));
        }
    }
    let mut inputs = BTreeMap::new();
    run.hash_input(&mut inputs, &root.join("manifest.json"))?;
    run.write_manifest(Stage::Flow, inputs, outputs)
}

// ── cube plumbing ───────────────────────────────────────────────────

struct LoadedScenarioData {
    frames: Tensor<f32>,
    flows: Tensor<f32>,
    truth: GroundTruth,
}

fn load_scenario_data(dir: &Path) -> Result<LoadedScenarioData> {
    let loaded = dataset::load_scenario(dir)?;
    let flows_path = dir.join("flows.vadt");
    if !flows_path.exists() {
        return Err(VadError::MissingPrerequisite(format!(
            "flow field {} (run the flow stage)",
            flows_path.display()
        )));
    }
    let flows = checkpoint::load_single::<f32>(&flows_path, "flows")?;
    Ok(LoadedScenarioData {
        frames: loaded.frames,
        flows,
        truth: loaded.truth,
    })
}

fn gt_boxes_per_frame(truth: &GroundTruth) -> Vec<Vec<BBox>> {
    truth.frames.iter().map(|f| f.boxes.clone()).collect()
}

/// (scenario index, window-end frame, track id), in deterministic order.
fn train_cube_candidates(run: &Run) -> Result<Vec<(usize, usize, u32)>> {
    let root = run.dataset_dir();
    let dirs = dataset::scenario_dirs(&root, "train")?;
    let params = &run.config.stc;
    let mut candidates = Vec::new();
    for (si, dir) in dirs.iter().enumerate() {
        let truth: GroundTruth = dataset::read_json(&dir.join("gt.json"))?;
        let boxes = gt_boxes_per_frame(&truth);
        let num_frames = boxes.len();
        for t in params.t_len - 1..num_frames.saturating_sub(1) {
            let mut ids: Vec<u32> = boxes[t].iter().map(|b| b.track_id).collect();
            ids.sort_unstable();
            ids.dedup();
            for id in ids {
                if stc::cube_exists(&boxes, num_frames, t, id, params) {
                    candidates.push((si, t, id));
                }
            }
        }
    }
    Ok(candidates)
}

fn select_cubes(
    candidates: &[(usize, usize, u32)],
    count: usize,
    seed: u64,
) -> Vec<(usize, usize, u32)> {
    let mut picked = candidates.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    picked.shuffle(&mut rng);
    picked.truncate(count);
    picked.sort_unstable();
    picked
}

fn materialize_cubes(run: &Run, selection: &[(usize, usize, u32)]) -> Result<Vec<STCube>> {
    let root = run.dataset_dir();
    let dirs = dataset::scenario_dirs(&root, "train")?;
    let params = &run.config.stc;
    let mut cubes = Vec::with_capacity(selection.len());
    let mut i = 0usize;
    while i < selection.len() {
        let si = selection[i].0;
        let mut j = i;
        while j < selection.len() && selection[j].0 == si {
            j += 1;
        }
        let data = load_scenario_data(&dirs[si])?;
        let boxes = gt_boxes_per_frame(&data.truth);
        for &(_, t, id) in &selection[i..j] {
            if let Some(cube) = stc::extract_cube(&data.frames, &data.flows, &boxes, t, id, params)? {
                cubes.push(cube);
            }
        }
        i = j;
    }
    Ok(cubes)
}

fn flow_input<S: Scalar>(cube: &STCube, flow_ch: usize) -> Result<Tensor<S>> {
    Tensor::<S>::from_f32_tensor(&cube.flow_window)
        .reshaped(vec![flow_ch, CUBE_SIZE, CUBE_SIZE])
        .map_err(VadError::Tensor)
}

fn cond_input<S: Scalar>(cube: &STCube, cond_ch: usize) -> Result<Tensor<S>> {
    Tensor::<S>::from_f32_tensor(&cube.img_window)
        .reshaped(vec![cond_ch, CUBE_SIZE, CUBE_SIZE])
        .map_err(VadError::Tensor)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta<H> {
    stage: String,
    config_hash: String,
    hyper: H,
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| VadError::Other(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(|e| VadError::io(path.display().to_string(), e))
}

// ── training stages ─────────────────────────────────────────────────

fn stage_train_flowae<S: Scalar>(run: &Run) -> Result<()> {
    run.require_stage(Stage::Flow)?;
    let hyper = &run.config.memae;
    let candidates = train_cube_candidates(run)?;
    let selection = select_cubes(&candidates, hyper.max_cubes, run.config.seed ^ 0x11AE);
    let cubes = materialize_cubes(run, &selection)?;
    let inputs: Vec<Tensor<S>> = cubes
        .iter()
        .map(|c| flow_input::<S>(c, hyper.in_channels))
        .collect::<Result<_>>()?;
    let (params, curve) = memae::train(&inputs, hyper)?;

    let dir = run.stage_dir(Stage::TrainFlowAe);
    fs::create_dir_all(&dir).map_err(|e| VadError::io(dir.display().to_string(), e))?;
    let ckpt = dir.join("checkpoint.vadt");
    checkpoint::save(&ckpt, &params.named().iter().map(|(n, t)| (n.as_str(), *t)).collect::<Vec<_>>())?;
    write_json_file(
        &dir.join("hyper.json"),
        &CheckpointMeta {
            stage: Stage::TrainFlowAe.name().into(),
            config_hash: run.config_hash.clone(),
            hyper: hyper.clone(),
        },
    )?;
    write_json_file(&dir.join("loss_curve.json"), &curve)?;

    let mut in_hashes = BTreeMap::new();
    run.hash_input(&mut in_hashes, &run.dataset_dir().join("manifest.json"))?;
    run.write_manifest(
        Stage::TrainFlowAe,
        in_hashes,
        vec![run.rel(&ckpt), "train-flowae/loss_curve.json".into()],
    )
}

fn load_memae_params<S: Scalar>(run: &Run, stage: Stage, file: &str) -> Result<MemAeParams<S>> {
    let path = run.stage_dir(stage).join(file);
    if !path.exists() {
        return Err(VadError::MissingPrerequisite(format!(
            "checkpoint {} (run the {} stage)",
            path.display(),
            stage.name()
        )));
    }
    MemAeParams::from_named(checkpoint::load::<S>(&path)?, &run.config.memae)
}

fn load_cvae_params<S: Scalar>(run: &Run, stage: Stage, file: &str) -> Result<CvaeParams<S>> {
    let path = run.stage_dir(stage).join(file);
    if !path.exists() {
        return Err(VadError::MissingPrerequisite(format!(
            "checkpoint {} (run the {} stage)",
            path.display(),
            stage.name()
        )));
    }
    CvaeParams::from_named(checkpoint::load::<S>(&path)?, &run.config.cvae)
}

fn stage_train_cvae<S: Scalar>(run: &Run) -> Result<()> {
    run.require_stage(Stage::TrainFlowAe)?;
    let hyper = &run.config.cvae;
    let mem_hyper = &run.config.memae;
    let mem_params = load_memae_params::<S>(run, Stage::TrainFlowAe, "checkpoint.vadt")?;

    let candidates = train_cube_candidates(run)?;
    let selection = select_cubes(&candidates, hyper.max_cubes, run.config.seed ^ 0xC4AE);
    let cubes = materialize_cubes(run, &selection)?;

    // Stage-1 weights stay frozen: reconstruct the flow windows up front.
    let mut samples = Vec::with_capacity(cubes.len());
    for chunk in cubes.chunks(16) {
        let flows: Vec<Tensor<S>> = chunk
            .iter()
            .map(|c| flow_input::<S>(c, mem_hyper.in_channels))
            .collect::<Result<_>>()?;
        let batch = memae::stack_batch(&flows.iter().collect::<Vec<_>>())?;
        let recon = memae::reconstruct(&mem_params, &batch, mem_hyper)?;
        let flow_len = mem_hyper.in_channels * CUBE_SIZE * CUBE_SIZE;
        for (i, cube) in chunk.iter().enumerate() {
            samples.push(CvaeSample {
                cond: cond_input::<S>(cube, hyper.cond_channels)?,
                flow_recon: Tensor::from_vec(
                    vec![mem_hyper.in_channels, CUBE_SIZE, CUBE_SIZE],
                    recon.data()[i * flow_len..(i + 1) * flow_len].to_vec(),
                )
                .map_err(VadError::Tensor)?,
                target: Tensor::<S>::from_f32_tensor(&cube.target_img),
            });
        }
    }
    let (params, curve) = cvae::train(&samples, hyper)?;

    let dir = run.stage_dir(Stage::TrainCvae);
    fs::create_dir_all(&dir).map_err(|e| VadError::io(dir.display().to_string(), e))?;
    let ckpt = dir.join("checkpoint.vadt");
    checkpoint::save(&ckpt, &params.named().iter().map(|(n, t)| (n.as_str(), *t)).collect::<Vec<_>>())?;
    write_json_file(
        &dir.join("hyper.json"),
        &CheckpointMeta {
            stage: Stage::TrainCvae.name().into(),
            config_hash: run.config_hash.clone(),
            hyper: hyper.clone(),
        },
    )?;
    write_json_file(&dir.join("loss_curve.json"), &curve)?;

    let mut in_hashes = BTreeMap::new();
    run.hash_input(
        &mut in_hashes,
        &run.stage_dir(Stage::TrainFlowAe).join("checkpoint.vadt"),
    )?;
    run.write_manifest(
        Stage::TrainCvae,
        in_hashes,
        vec![run.rel(&ckpt), "train-cvae/loss_curve.json".into()],
    )
}

fn stage_finetune<S: Scalar>(run: &Run) -> Result<()> {
    run.require_stage(Stage::TrainCvae)?;
    let dir = run.stage_dir(Stage::Finetune);
    fs::create_dir_all(&dir).map_err(|e| VadError::io(dir.display().to_string(), e))?;
    let memae_out = dir.join("memae.vadt");
    let cvae_out = dir.join("cvae.vadt");
    let src_memae = run.stage_dir(Stage::TrainFlowAe).join("checkpoint.vadt");
    let src_cvae = run.stage_dir(Stage::TrainCvae).join("checkpoint.vadt");

    let ft = &run.config.finetune;
    let curve: Vec<f64> = if ft.enabled {
        let mut mem_params = load_memae_params::<S>(run, Stage::TrainFlowAe, "checkpoint.vadt")?;
        let mut cvae_params = load_cvae_params::<S>(run, Stage::TrainCvae, "checkpoint.vadt")?;
        let candidates = train_cube_candidates(run)?;
        let selection = select_cubes(&candidates, ft.hyper.max_cubes, run.config.seed ^ 0xF1E);
        let cubes = materialize_cubes(run, &selection)?;
        let samples: Vec<JointSample<S>> = cubes
            .iter()
            .map(|c| {
                Ok(JointSample {
                    cond: cond_input::<S>(c, run.config.cvae.cond_channels)?,
                    flow: flow_input::<S>(c, run.config.memae.in_channels)?,
                    target: Tensor::<S>::from_f32_tensor(&c.target_img),
                })
            })
            .collect::<Result<_>>()?;
        let curve = cvae::finetune_joint(
            &samples,
            &mut mem_params,
            &mut cvae_params,
            &run.config.memae,
            &run.config.cvae,
            &ft.hyper,
        )?;
        checkpoint::save(
            &memae_out,
            &mem_params.named().iter().map(|(n, t)| (n.as_str(), *t)).collect::<Vec<_>>(),
        )?;
        checkpoint::save(
            &cvae_out,
            &cvae_params.named().iter().map(|(n, t)| (n.as_str(), *t)).collect::<Vec<_>>(),
        )?;
        curve
    } else {
        // Pass the stage-1/2 checkpoints through byte-identically.
        fs::copy(&src_memae, &memae_out)
            .map_err(|e| VadError::io(memae_out.display().to_string(), e))?;
        fs::copy(&src_cvae, &cvae_out)
            .map_err(|e| VadError::io(cvae_out.display().to_string(), e))?;
        Vec::new()
    };
    write_json_file(&dir.join("loss_curve.json"), &curve)?;
    write_json_file(
        &dir.join("hyper.json"),
        &CheckpointMeta {
            stage: Stage::Finetune.name().into(),
            config_hash: run.config_hash.clone(),
            hyper: ft.clone(),
        },
    )?;

    let mut in_hashes = BTreeMap::new();
    run.hash_input(&mut in_hashes, &src_memae)?;
    run.hash_input(&mut in_hashes, &src_cvae)?;
    run.write_manifest(
        Stage::Finetune,
        in_hashes,
        vec![run.rel(&memae_out), run.rel(&cvae_out)],
    )
}

// ── calibration ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct StatsFile {
    config_hash: String,
    stats: TrainStats,
}

fn stage_calibrate<S: Scalar>(run: &Run) -> Result<()> {
    run.require_stage(Stage::Finetune)?;
    let mem_params = load_memae_params::<S>(run, Stage::Finetune, "memae.vadt")?;
    let cvae_params = load_cvae_params::<S>(run, Stage::Finetune, "cvae.vadt")?;

    let candidates = train_cube_candidates(run)?;
    let selection = select_cubes(
        &candidates,
        run.config.calibration.max_cubes,
        run.config.seed ^ 0xCA11,
    );
    let cubes = materialize_cubes(run, &selection)?;
    if cubes.is_empty() {
        return Err(VadError::Config("calibration found no cubes".into()));
    }
    let mut errors: Vec<CubeErrors> = Vec::with_capacity(cubes.len());
    for chunk in cubes.chunks(16) {
        let refs: Vec<&STCube> = chunk.iter().collect();
        errors.extend(scoring::cube_errors_batch(
            &refs,
            &mem_params,
            &cvae_params,
            &run.config.memae,
            &run.config.cvae,
        )?);
    }
    let stats = scoring::calibrate(&errors)?;

    let dir = run.stage_dir(Stage::Calibrate);
    fs::create_dir_all(&dir).map_err(|e| VadError::io(dir.display().to_string(), e))?;
    let stats_path = dir.join("stats.json");
    write_json_file(
        &stats_path,
        &StatsFile {
            config_hash: run.config_hash.clone(),
            stats,
        },
    )?;

    let mut in_hashes = BTreeMap::new();
    run.hash_input(&mut in_hashes, &run.stage_dir(Stage::Finetune).join("memae.vadt"))?;
    run.hash_input(&mut in_hashes, &run.stage_dir(Stage::Finetune).join("cvae.vadt"))?;
    run.write_manifest(Stage::Calibrate, in_hashes, vec![run.rel(&stats_path)])
}

// ── scoring ─────────────────────────────────────────────────────────

#[derive(Clone, Serialize, Deserialize)]
pub struct CubeScoreRecord {
    pub track_id: u32,
    pub s_r: f64,
    pub s_p: f64,
}

#[derive(Clone, Serialize, Deserialize)]
pub struct FrameScoreRecord {
    pub frame: usize,
    pub cubes: Vec<CubeScoreRecord>,
    /// Variant name -> frame score.
    pub scores: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
pub struct ScenarioScores {
    pub scenario: String,
    pub condition: String,
    pub config_hash: String,
    pub stats_hash: String,
    pub frames: Vec<FrameScoreRecord>,
}

fn condition_boxes(
    condition: &crate::config::BoxCondition,
    truth: &GroundTruth,
    h: usize,
    w: usize,
) -> Vec<Vec<BBox>> {
    match condition.source {
        BoxSource::GroundTruth => gt_boxes_per_frame(truth),
        BoxSource::Detected => {
            let stub = condition.stub.as_ref().expect("validated");
            let mut tracker = IouTracker::new(condition.tracker_iou);
            truth
                .frames
                .iter()
                .enumerate()
                .map(|(t, frame)| {
                    let detections = stc::detect_boxes(&frame.boxes, t, w, h, stub);
                    tracker.step(&detections)
                })
                .collect()
        }
    }
}

struct FrameOutput {
    target_frame: usize,
    cubes: Vec<CubeScoreRecord>,
    scores: BTreeMap<String, f64>,
    /// Per variant: the patches scattered into this frame's map.
    patches: Vec<Vec<(BBox, Vec<f64>)>>,
}

fn stage_score<S: Scalar>(run: &Run) -> Result<()> {
    run.require_stage(Stage::Calibrate)?;
    let stats_path = run.stage_dir(Stage::Calibrate).join("stats.json");
    let stats_file: StatsFile = dataset::read_json(&stats_path)?;
    if stats_file.config_hash != run.config_hash {
        return Err(VadError::MissingPrerequisite(format!(
            "calibration stats were computed under config hash {}",
            stats_file.config_hash
        )));
    }
    let stats = &stats_file.stats;
    let stats_hash = sha256_file(&stats_path)?;
    let mem_params = load_memae_params::<S>(run, Stage::Finetune, "memae.vadt")?;
    let cvae_params = load_cvae_params::<S>(run, Stage::Finetune, "cvae.vadt")?;

    let root = run.dataset_dir();
    let dirs = dataset::scenario_dirs(&root, "test")?;
    let stc_params = &run.config.stc;
    let variants = &run.config.scoring.variants;
    let mut outputs = Vec::new();

    for condition in &run.config.detector.conditions {
        for (si, scenario_dir) in dirs.iter().enumerate() {
            let scenario_name = dataset::scenario_id("test", si);
            let data = load_scenario_data(scenario_dir)?;
            let (t_total, h, w) = (
                data.frames.shape()[0],
                data.frames.shape()[2],
                data.frames.shape()[3],
            );
            let boxes = condition_boxes(condition, &data.truth, h, w);

            let frame_range: Vec<usize> = (stc_params.t_len - 1..t_total - 1).collect();
            let results: Vec<Result<FrameOutput>> = frame_range
                .par_iter()
                .map(|&t| {
                    let cubes = stc::extract_stc(&data.frames, &data.flows, &boxes, t, stc_params)?;
                    let refs: Vec<&STCube> = cubes.iter().collect();
                    let errors = scoring::cube_errors_batch(
                        &refs,
                        &mem_params,
                        &cvae_params,
                        &run.config.memae,
                        &run.config.cvae,
                    )?;
                    let cube_scores: Vec<(f64, f64)> =
                        errors.iter().map(|e| (e.s_r, e.s_p)).collect();
                    let mut scores = BTreeMap::new();
                    let mut patches = Vec::with_capacity(variants.len());
                    for variant in variants {
                        let (frame, _) = scoring::frame_score(&cube_scores, stats, &variant.weights);
                        scores.insert(variant.name.clone(), frame);
                        let entries: Vec<(BBox, Vec<f64>)> = cubes
                            .iter()
                            .zip(&errors)
                            .map(|(cube, err)| {
                                (
                                    cube.box_at_t1,
                                    scoring::pixel_score_patch(
                                        &err.e_r,
                                        &err.e_p,
                                        stats,
                                        &variant.weights,
                                    ),
                                )
                            })
                            .collect();
                        patches.push(entries);
                    }
                    Ok(FrameOutput {
                        target_frame: t + 1,
                        cubes: cubes
                            .iter()
                            .zip(&errors)
                            .map(|(c, e)| CubeScoreRecord {
                                track_id: c.track_id,
                                s_r: e.s_r,
                                s_p: e.s_p,
                            })
                            .collect(),
                        scores,
                        patches,
                    })
                })
                .collect();

            let mut frames: Vec<FrameScoreRecord> = (0..t_total)
                .map(|frame| FrameScoreRecord {
                    frame,
                    cubes: Vec::new(),
                    scores: variants
                        .iter()
                        .map(|v| (v.name.clone(), 0.0))
                        .collect(),
                })
                .collect();
            let mut maps: Vec<Vec<f32>> = vec![vec![0.0f32; t_total * h * w]; variants.len()];
            for result in results {
                let out = result?;
                for (vi, entries) in out.patches.iter().enumerate() {
                    let mut map = crate::stc::AnomalyMap::zeros(h, w);
                    for (bbox, patch) in entries {
                        let patch32: Vec<f32> = patch.iter().map(|&v| v as f32).collect();
                        stc::scatter_patch(&mut map, bbox, &patch32);
                    }
                    let base = out.target_frame * h * w;
                    maps[vi][base..base + h * w].copy_from_slice(&map.scores);
                }
                frames[out.target_frame].cubes = out.cubes;
                frames[out.target_frame].scores = out.scores;
            }

            let out_dir = run
                .stage_dir(Stage::Score)
                .join(&condition.name)
                .join(&scenario_name);
            fs::create_dir_all(&out_dir).map_err(|e| VadError::io(out_dir.display().to_string(), e))?;
            write_json_file(
                &out_dir.join("scores.json"),
                &ScenarioScores {
                    scenario: scenario_name.clone(),
                    condition: condition.name.clone(),
                    config_hash: run.config_hash.clone(),
                    stats_hash: stats_hash.clone(),
                    frames,
                },
            )?;
            write_json_file(&out_dir.join("boxes.json"), &boxes)?;
            for (vi, variant) in variants.iter().enumerate() {
                let path = out_dir.join(format!("maps_{}.vadt", variant.name));
                checkpoint::save_single(
                    &path,
                    "maps",
                    &Tensor::from_vec(vec![t_total, h, w], maps[vi].clone())
                        .map_err(VadError::Tensor)?,
                )?;
            }
            outputs.push(run.rel(&out_dir.join("scores.json")));
        }
    }

    let mut in_hashes = BTreeMap::new();
    run.hash_input(&mut in_hashes, &stats_path)?;
    run.write_manifest(Stage::Score, in_hashes, outputs)
}

// ── eval ────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
pub struct VariantMetrics {
    pub name: String,
    pub auroc: f64,
    pub fpr95_pixel: f64,
    pub per_scenario_auroc: BTreeMap<String, f64>,
    /// (threshold, tpr, fpr) triples of the pooled frame-score ROC.
    pub roc: Vec<(f64, f64, f64)>,
}

#[derive(Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub name: String,
    pub mean_iou: f64,
    pub variants: Vec<VariantMetrics>,
}

#[derive(Serialize, Deserialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub conditions: Vec<ConditionMetrics>,
}

fn stage_eval(run: &Run) -> Result<()> {
    run.require_stage(Stage::Score)?;
    let root = run.dataset_dir();
    let dirs = dataset::scenario_dirs(&root, "test")?;

    let mut conditions = Vec::new();
    for condition in &run.config.detector.conditions {
        let mut per_variant_scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut per_variant_scenario: BTreeMap<String, BTreeMap<String, (Vec<f64>, Vec<bool>)>> =
            BTreeMap::new();
        let mut labels: Vec<bool> = Vec::new();
        let mut iou_sum = 0.0f64;
        let mut iou_count = 0usize;

        struct PixelInputs {
            maps: Vec<Vec<f32>>,
            masks: Vec<Vec<bool>>,
            gt_boxes: Vec<Vec<BBox>>,
            pred_boxes: Vec<Vec<BBox>>,
        }
        let mut pixel: BTreeMap<String, PixelInputs> = BTreeMap::new();
        let mut frame_dims = (0usize, 0usize);

        for (si, scenario_dir) in dirs.iter().enumerate() {
            let scenario_name = dataset::scenario_id("test", si);
            let loaded = dataset::load_scenario(scenario_dir)?;
            let score_dir = run
                .stage_dir(Stage::Score)
                .join(&condition.name)
                .join(&scenario_name);
            let scores_path = score_dir.join("scores.json");
            if !scores_path.exists() {
                return Err(VadError::MissingPrerequisite(format!(
                    "scores {} (run the score stage)",
                    scores_path.display()
                )));
            }
            let scores: ScenarioScores = dataset::read_json(&scores_path)?;
            if scores.config_hash != run.config_hash {
                return Err(VadError::MissingPrerequisite(format!(
                    "scores for {scenario_name} were produced under a different config"
                )));
            }
            let pred_boxes: Vec<Vec<BBox>> = dataset::read_json(&score_dir.join("boxes.json"))?;
            let (h, w) = (loaded.frames.shape()[2], loaded.frames.shape()[3]);
            frame_dims = (h, w);

            for (frame, record) in scores.frames.iter().enumerate() {
                let flag = loaded.truth.frames[frame].anomaly_frame_flag;
                labels.push(flag);
                for (variant, value) in &record.scores {
                    per_variant_scores.entry(variant.clone()).or_default().push(*value);
                    let slot = per_variant_scenario
                        .entry(variant.clone())
                        .or_default()
                        .entry(scenario_name.clone())
                        .or_default();
                    slot.0.push(*value);
                    slot.1.push(flag);
                }
            }

            for (frame, gt_frame) in loaded.truth.frames.iter().enumerate() {
                iou_sum += metrics::mean_box_iou(&gt_frame.boxes, &pred_boxes[frame])
                    * gt_frame.boxes.len() as f64;
                iou_count += gt_frame.boxes.len();
            }

            for variant in &run.config.scoring.variants {
                let maps = checkpoint::load_single::<f32>(
                    &score_dir.join(format!("maps_{}.vadt", variant.name)),
                    "maps",
                )?;
                let t_total = maps.shape()[0];
                let entry = pixel.entry(variant.name.clone()).or_insert_with(|| PixelInputs {
                    maps: Vec::new(),
                    masks: Vec::new(),
                    gt_boxes: Vec::new(),
                    pred_boxes: Vec::new(),
                });
                for t in 0..t_total {
                    entry
                        .maps
                        .push(maps.data()[t * h * w..(t + 1) * h * w].to_vec());
                    entry.masks.push(loaded.masks[t].clone());
                    entry.gt_boxes.push(loaded.truth.frames[t].boxes.clone());
                    entry.pred_boxes.push(pred_boxes[t].clone());
                }
            }
        }

        let mut variant_metrics = Vec::new();
        for variant in &run.config.scoring.variants {
            let scores = &per_variant_scores[&variant.name];
            let curve = metrics::roc_curve(scores, &labels)?;
            let mut per_scenario = BTreeMap::new();
            for (scenario, (s, l)) in &per_variant_scenario[&variant.name] {
                if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
                    per_scenario.insert(scenario.clone(), metrics::auroc(s, l)?);
                }
            }
            let px = &pixel[&variant.name];
            let fpr95 = metrics::pixel_fpr95_overlap(
                &px.maps.iter().map(|m| m.as_slice()).collect::<Vec<_>>(),
                &px.masks.iter().map(|m| m.as_slice()).collect::<Vec<_>>(),
                &px.gt_boxes,
                &px.pred_boxes,
                frame_dims.0,
                frame_dims.1,
                0.95,
            )?;
            variant_metrics.push(VariantMetrics {
                name: variant.name.clone(),
                auroc: curve.auroc,
                fpr95_pixel: fpr95,
                per_scenario_auroc: per_scenario,
                // JSON has no infinity; clamp the synthetic top threshold.
                roc: curve
                    .points
                    .iter()
                    .map(|p| {
                        let thr = if p.threshold.is_finite() { p.threshold } else { f64::MAX };
                        (thr, p.tpr, p.fpr)
                    })
                    .collect(),
            });
        }
        conditions.push(ConditionMetrics {
            name: condition.name.clone(),
            mean_iou: if iou_count == 0 {
                0.0
            } else {
                iou_sum / iou_count as f64
            },
            variants: variant_metrics,
        });
    }

    let dir = run.stage_dir(Stage::Eval);
    fs::create_dir_all(&dir).map_err(|e| VadError::io(dir.display().to_string(), e))?;
    let out_path = dir.join("metrics.json");
    write_json_file(
        &out_path,
        &EvalOutput {
            config_hash: run.config_hash.clone(),
            conditions,
        },
    )?;

    let mut in_hashes = BTreeMap::new();
    run.hash_input(
        &mut in_hashes,
        &run.stage_dir(Stage::Calibrate).join("stats.json"),
    )?;
    run.write_manifest(Stage::Eval, in_hashes, vec![run.rel(&out_path)])
}

// ── report ──────────────────────────────────────────────────────────

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn stage_report(run: &Run) -> Result<()> {
    run.require_stage(Stage::Eval)?;
    let eval_out: EvalOutput =
        dataset::read_json(&run.stage_dir(Stage::Eval).join("metrics.json"))?;
    let dir = run.stage_dir(Stage::Report);
    fs::create_dir_all(&dir).map_err(|e| VadError::io(dir.display().to_string(), e))?;
    let mut outputs = Vec::new();

    // Pooled and per-scenario metric rows per condition and weight variant.
    let mut rows = Vec::new();
    for cond in &eval_out.conditions {
        for variant in &cond.variants {
            rows.push(format!(
                "{},{},pooled,{},{},{}",
                cond.name,
                variant.name,
                fmt6(variant.auroc),
                fmt6(variant.fpr95_pixel),
                fmt6(cond.mean_iou)
            ));
            for (scenario, auroc) in &variant.per_scenario_auroc {
                rows.push(format!(
                    "{},{},{scenario},{},,",
                    cond.name,
                    variant.name,
                    fmt6(*auroc)
                ));
            }
        }
    }
    let metrics_path = dir.join("metrics.csv");
    metrics::write_csv(
        &metrics_path,
        "condition,variant,scope,auroc,fpr95_pixel,mean_iou",
        &rows,
    )?;
    outputs.push(run.rel(&metrics_path));

    // ROC curve points of the first variant per condition.
    for cond in &eval_out.conditions {
        if let Some(variant) = cond.variants.first() {
            let rows: Vec<String> = variant
                .roc
                .iter()
                .map(|(thr, tpr, fpr)| format!("{thr},{tpr},{fpr}"))
                .collect();
            let path = dir.join(format!("roc_{}.csv", cond.name));
            metrics::write_csv(&path, "threshold,tpr,fpr", &rows)?;
            outputs.push(run.rel(&path));
        }
    }

    // Per-frame score timelines and heatmap snapshots from the first
    // condition's first variant.
    let root = run.dataset_dir();
    let dirs = dataset::scenario_dirs(&root, "test")?;
    let condition = &run.config.detector.conditions[0];
    let variant = &run.config.scoring.variants[0];
    for (si, scenario_dir) in dirs.iter().enumerate() {
        let scenario_name = dataset::scenario_id("test", si);
        let score_dir = run
            .stage_dir(Stage::Score)
            .join(&condition.name)
            .join(&scenario_name);
        let scores: ScenarioScores = dataset::read_json(&score_dir.join("scores.json"))?;
        let loaded = dataset::load_scenario(scenario_dir)?;
        let rows: Vec<String> = scores
            .frames
            .iter()
            .map(|f| {
                format!(
                    "{},{},{}",
                    f.frame,
                    fmt6(f.scores[&variant.name]),
                    loaded.truth.frames[f.frame].anomaly_frame_flag as u8
                )
            })
            .collect();
        let timeline = dir.join(format!("timeline_{scenario_name}.csv"));
        metrics::write_csv(&timeline, "frame,score,label", &rows)?;
        outputs.push(run.rel(&timeline));

        // Snapshot the highest-scoring frame's anomaly map.
        let best = scores
            .frames
            .iter()
            .max_by(|a, b| a.scores[&variant.name].total_cmp(&b.scores[&variant.name]))
            .map(|f| f.frame)
            .unwrap_or(0);
        let maps = checkpoint::load_single::<f32>(
            &score_dir.join(format!("maps_{}.vadt", variant.name)),
            "maps",
        )?;
        let (h, w) = (maps.shape()[1], maps.shape()[2]);
        let heatmap = dir.join(format!("heatmap_{scenario_name}_{best}.pgm"));
        metrics::write_pgm(&heatmap, &maps.data()[best * h * w..(best + 1) * h * w], h, w)?;
        outputs.push(run.rel(&heatmap));
    }

    let mut in_hashes = BTreeMap::new();
    run.hash_input(
        &mut in_hashes,
        &run.stage_dir(Stage::Eval).join("metrics.json"),
    )?;
    run.write_manifest(Stage::Report, in_hashes, outputs)
}
