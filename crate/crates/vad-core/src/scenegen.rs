//! Deterministic synthetic ego-view driving world.
//!
//! A scrolling textured road simulates ego motion; the lead vehicle and
//! background agents are flat-shaded sprites whose apparent size grows as the
//! longitudinal gap shrinks. Sudden braking of the lead vehicle closes the
//! gap per a simple kinematic recurrence and is annotated from onset until
//! the complete stop, with a pixel mask over the lead sprite.

use crate::error::{Result, VadError};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const DEPTH_SCALE: f64 = 48.0;
const HORIZON_FRAC: f64 = 0.30;
const SPRITE_SCALE: f64 = 2.0;
const MIN_GAP: f64 = 1.0;
const AGENT_FAR_GAP: f64 = 90.0;
const AGENT_NEAR_GAP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Environment {
    City,
    Highway,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedStep {
    pub from_frame: usize,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeadConfig {
    pub width: f64,
    pub height: f64,
    pub color: [f32; 3],
    pub initial_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Lateral lane position as a signed fraction of frame width from center.
    pub lane_offset: f64,
    pub initial_gap: f64,
    /// Constant speed relative to ego (px/frame); positive pulls away.
    pub relative_speed: f64,
    pub width: f64,
    pub height: f64,
    pub color: [f32; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrakingEvent {
    pub onset_frame: usize,
    /// Deceleration in px/frame^2.
    pub deceleration: f64,
    /// Frames the lead stays at a standstill before accelerating back.
    pub stop_duration: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherConfig {
    /// Additive Gaussian pixel noise sigma, in [0, 0.2].
    pub noise_sigma: f64,
    /// Vertical rain streak density (streak columns per frame-width pixel).
    pub rain_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub frame_height: usize,
    pub frame_width: usize,
    pub num_frames: usize,
    pub ego_speed: Vec<SpeedStep>,
    pub lead: LeadConfig,
    pub agents: Vec<AgentConfig>,
    pub braking_events: Vec<BrakingEvent>,
    pub weather: WeatherConfig,
    pub environment: Environment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectClass {
    Vehicle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    Detected,
}

/// Axis-aligned box with half-open pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
    pub class: ObjectClass,
    pub track_id: u32,
    pub provenance: Provenance,
}

impl BBox {
    pub fn width(&self) -> i32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> i32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> i64 {
        self.width() as i64 * self.height() as i64
    }

    pub fn clip(mut self, frame_w: usize, frame_h: usize) -> Option<BBox> {
        self.x_min = self.x_min.max(0);
        self.y_min = self.y_min.max(0);
        self.x_max = self.x_max.min(frame_w as i32);
        self.y_max = self.y_max.min(frame_h as i32);
        if self.x_min < self.x_max && self.y_min < self.y_max {
            Some(self)
        } else {
            None
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0) as i64;
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0) as i64;
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameTruth {
    pub boxes: Vec<BBox>,
    pub anomaly_frame_flag: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frames: Vec<FrameTruth>,
}

/// One generated clip: frames [T,3,H,W] in [0,1], per-frame truth, and the
/// anomaly pixel masks (one H*W bool plane per frame).
pub struct Scenario {
    pub frames: Tensor<f32>,
    pub truth: GroundTruth,
    pub masks: Vec<Vec<bool>>,
}

/// Kinematic state per frame, exposed so datasets can be audited without
/// re-rendering.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub v_ego: Vec<f64>,
    pub v_lead: Vec<f64>,
    pub gap: Vec<f64>,
    pub anomaly: Vec<bool>,
    /// Per-frame lead deceleration max(0, v(t-1) - v(t)).
    pub lead_decel: Vec<f64>,
}

fn ego_speed_at(cfg: &ScenarioConfig, t: usize) -> f64 {
    let mut v = cfg.ego_speed.first().map(|s| s.speed).unwrap_or(0.0);
    for step in &cfg.ego_speed {
        if step.from_frame <= t {
            v = step.speed;
        }
    }
    v
}

pub fn validate_config(cfg: &ScenarioConfig) -> Result<()> {
    if cfg.frame_height < 16 || cfg.frame_width < 16 {
        return Err(VadError::Config("frame size must be at least 16x16".into()));
    }
    if cfg.num_frames < 2 {
        return Err(VadError::Config("num_frames must be at least 2".into()));
    }
    if cfg.ego_speed.is_empty() {
        return Err(VadError::Config("ego_speed profile is empty".into()));
    }
    if cfg.weather.noise_sigma < 0.0 || cfg.weather.noise_sigma > 0.2 {
        return Err(VadError::Config("weather.noise_sigma must be in [0, 0.2]".into()));
    }
    if cfg.weather.rain_density < 0.0 {
        return Err(VadError::Config("weather.rain_density must be >= 0".into()));
    }
    if cfg.lead.initial_gap <= MIN_GAP {
        return Err(VadError::Config("lead.initial_gap too small".into()));
    }
    for ev in &cfg.braking_events {
        if ev.deceleration <= 0.0 {
            return Err(VadError::Config("braking deceleration must be > 0".into()));
        }
        if ev.onset_frame >= cfg.num_frames {
            return Err(VadError::Config("braking onset beyond clip".into()));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum LeadMode {
    Follow,
    Braking { decel: f64, stop_duration: usize },
    Stopped { until: usize, decel: f64 },
    Recovering { accel: f64 },
}

/// Run the lead/ego kinematics. Errors if the gap ever closes to the
/// collision margin, and if a braking window would extend past the clip.
pub fn simulate(cfg: &ScenarioConfig) -> Result<Trajectory> {
    validate_config(cfg)?;
    let t_total = cfg.num_frames;
    let mut v_ego = Vec::with_capacity(t_total);
    let mut v_lead = Vec::with_capacity(t_total);
    let mut gap = Vec::with_capacity(t_total);
    let mut anomaly = vec![false; t_total];
    let mut lead_decel = Vec::with_capacity(t_total);

    let mut events = cfg.braking_events.clone();
    events.sort_by_key(|e| e.onset_frame);

    let mut mode = LeadMode::Follow;
    let mut cur_gap = cfg.lead.initial_gap;
    let mut cur_v_lead = ego_speed_at(cfg, 0);
    for t in 0..t_total {
        let ve = ego_speed_at(cfg, t);
        if let Some(ev) = events.iter().find(|e| e.onset_frame == t) {
            mode = LeadMode::Braking {
                decel: ev.deceleration,
                stop_duration: ev.stop_duration,
            };
            // Annotated from onset; speed starts dropping on the next frame.
            anomaly[t] = true;
        }
        let prev_v_lead = cur_v_lead;
        match mode {
            LeadMode::Follow => {
                cur_v_lead = ve;
            }
            LeadMode::Braking {
                decel,
                stop_duration,
            } => {
                if t > events
                    .iter()
                    .rev()
                    .find(|e| e.onset_frame <= t)
                    .map(|e| e.onset_frame)
                    .unwrap_or(0)
                {
                    cur_v_lead = (cur_v_lead - decel).max(0.0);
                    if cur_v_lead <= 1e-9 {
                        cur_v_lead = 0.0;
                    }
                }
                anomaly[t] = true;
                if cur_v_lead == 0.0 {
                    mode = LeadMode::Stopped {
                        until: t + stop_duration,
                        decel,
                    };
                }
            }
            LeadMode::Stopped { until, decel } => {
                cur_v_lead = 0.0;
                if t >= until {
                    mode = LeadMode::Recovering { accel: decel };
                }
            }
            LeadMode::Recovering { accel } => {
                cur_v_lead = (cur_v_lead + accel).min(ve);
                if cur_v_lead >= ve {
                    mode = LeadMode::Follow;
                }
            }
        }
        v_ego.push(ve);
        v_lead.push(cur_v_lead);
        gap.push(cur_gap);
        lead_decel.push((prev_v_lead - cur_v_lead).max(0.0));
        cur_gap -= ve - cur_v_lead;
        if cur_gap <= MIN_GAP {
            return Err(VadError::Collision { frame: t + 1 });
        }
    }
    // A braking window must close inside the clip.
    if let Some(last) = anomaly.iter().rposition(|&f| f) {
        if last + 1 == t_total && !cfg.braking_events.is_empty() && v_lead[last] > 0.0 {
            return Err(VadError::Config(
                "braking window extends past the end of the clip".into(),
            ));
        }
    }
    Ok(Trajectory {
        v_ego,
        v_lead,
        gap,
        anomaly,
        lead_decel,
    })
}

// ── procedural texture ──────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, gx: i64, gy: i64) -> f64 {
    let h = splitmix64(
        seed ^ (gx as u64).wrapping_mul(0x9E3779B97F4A7C15)
            ^ (gy as u64).wrapping_mul(0xC2B2AE3D27D4EB4F),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64, spacing: f64) -> f64 {
    let fx = x / spacing;
    let fy = y / spacing;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let (gx, gy) = (x0 as i64, y0 as i64);
    let v00 = lattice(seed, gx, gy);
    let v10 = lattice(seed, gx + 1, gy);
    let v01 = lattice(seed, gx, gy + 1);
    let v11 = lattice(seed, gx + 1, gy + 1);
    let top = v00 + (v10 - v00) * tx;
    let bot = v01 + (v11 - v01) * tx;
    top + (bot - top) * ty
}

fn background_pixel(env: Environment, x: usize, y_tex: f64, frame_w: usize) -> [f32; 3] {
    let xf = x as f64;
    match env {
        Environment::City => {
            let mut rgb = [0.0f32; 3];
            for (c, slot) in rgb.iter_mut().enumerate() {
                let fine = value_noise(101 + c as u64, xf, y_tex, 5.0);
                let coarse = value_noise(211 + c as u64, xf, y_tex, 16.0);
                *slot = (0.40 + 0.33 * fine + 0.15 * coarse) as f32;
            }
            rgb
        }
        Environment::Highway => {
            let mut rgb = [0.0f32; 3];
            for (c, slot) in rgb.iter_mut().enumerate() {
                let fine = value_noise(307 + c as u64, xf, y_tex, 9.0);
                *slot = (0.30 + 0.20 * fine) as f32;
            }
            // Dashed lane markings and solid edge lines scroll with the road.
            let w = frame_w as f64;
            for lane_x in [0.32 * w, 0.68 * w] {
                if (xf - lane_x).abs() < 1.0 && y_tex.rem_euclid(14.0) < 7.0 {
                    rgb = [0.88, 0.88, 0.82];
                }
            }
            for edge_x in [0.08 * w, 0.92 * w] {
                if (xf - edge_x).abs() < 1.0 {
                    rgb = [0.80, 0.80, 0.78];
                }
            }
            rgb
        }
    }
}

// ── sprites ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
struct SpriteRect {
    x0: i32,
    y0: i32,
    x1: i32,
    y1: i32,
}

fn project_sprite(
    gap: f64,
    world_w: f64,
    world_h: f64,
    lane_offset: f64,
    frame_h: usize,
    frame_w: usize,
) -> SpriteRect {
    let s = DEPTH_SCALE / (DEPTH_SCALE + gap.max(0.0));
    let w = (world_w * s * SPRITE_SCALE).max(1.0);
    let h = (world_h * s * SPRITE_SCALE).max(1.0);
    let horizon = HORIZON_FRAC * frame_h as f64;
    let y_bot = horizon + (frame_h as f64 - horizon - 1.0) * s * 0.95;
    let cx = frame_w as f64 / 2.0 + lane_offset * frame_w as f64 * s;
    let x0 = (cx - w / 2.0).round() as i32;
    let y1 = y_bot.round() as i32;
    SpriteRect {
        x0,
        y0: y1 - h.round().max(1.0) as i32,
        x1: x0 + w.round().max(1.0) as i32,
        y1,
    }
}

fn draw_sprite(frame: &mut [f32], h: usize, w: usize, rect: SpriteRect, color: [f32; 3]) {
    let x0 = rect.x0.max(0) as usize;
    let y0 = rect.y0.max(0) as usize;
    let x1 = (rect.x1.min(w as i32)).max(0) as usize;
    let y1 = (rect.y1.min(h as i32)).max(0) as usize;
    if x0 >= x1 || y0 >= y1 {
        return;
    }
    let roof_split = y0 + (y1 - y0) * 2 / 5;
    for y in y0..y1 {
        for x in x0..x1 {
            let border = y == y0 || y + 1 == y1 || x == x0 || x + 1 == x1;
            for c in 0..3 {
                let base = color[c];
                let v = if border {
                    base * 0.25
                } else if y < roof_split {
                    base * 0.55
                } else {
                    base
                };
                frame[c * h * w + y * w + x] = v;
            }
        }
    }
}

struct AgentState {
    cfg_index: usize,
    gap: f64,
    track_id: u32,
}

struct WorldFrame {
    /// (track_id, rect, is_lead), ordered far to near as drawn.
    sprites: Vec<(u32, SpriteRect, bool)>,
}

/// Deterministic world layout for every frame: lead + agents with stable
/// track ids; agents that leave the visible gap range respawn far away under
/// a fresh id.
fn layout_world(cfg: &ScenarioConfig, traj: &Trajectory) -> Vec<WorldFrame> {
    let (h, w) = (cfg.frame_height, cfg.frame_width);
    let mut agents: Vec<AgentState> = cfg
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| AgentState {
            cfg_index: i,
            gap: a.initial_gap,
            track_id: (i + 1) as u32,
        })
        .collect();
    let mut next_track_id = cfg.agents.len() as u32 + 1;
    let mut frames = Vec::with_capacity(cfg.num_frames);
    for t in 0..cfg.num_frames {
        let mut sprites: Vec<(u32, SpriteRect, bool, f64)> = Vec::new();
        for agent in agents.iter_mut() {
            let a = &cfg.agents[agent.cfg_index];
            let rect = project_sprite(agent.gap, a.width, a.height, a.lane_offset, h, w);
            sprites.push((agent.track_id, rect, false, agent.gap));
            agent.gap += a.relative_speed;
            if agent.gap > AGENT_FAR_GAP || agent.gap < AGENT_NEAR_GAP {
                agent.gap = AGENT_FAR_GAP;
                agent.track_id = next_track_id;
                next_track_id += 1;
            }
        }
        let lead_rect = project_sprite(traj.gap[t], cfg.lead.width, cfg.lead.height, 0.0, h, w);
        sprites.push((0, lead_rect, true, traj.gap[t]));
        sprites.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap_or(std::cmp::Ordering::Equal));
        frames.push(WorldFrame {
            sprites: sprites.into_iter().map(|(id, r, lead, _)| (id, r, lead)).collect(),
        });
    }
    frames
}

pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    let traj = simulate(cfg)?;
    let (h, w) = (cfg.frame_height, cfg.frame_width);
    let world = layout_world(cfg, &traj);

    let mut stack = vec![0.0f32; cfg.num_frames * 3 * h * w];
    let mut truth_frames = Vec::with_capacity(cfg.num_frames);
    let mut masks = Vec::with_capacity(cfg.num_frames);

    let mut scroll = 0.0f64;
    let rain_count = (cfg.weather.rain_density * w as f64).round() as usize;

    for t in 0..cfg.num_frames {
        let frame = &mut stack[t * 3 * h * w..(t + 1) * 3 * h * w];
        for y in 0..h {
            let y_tex = y as f64 - scroll;
            for x in 0..w {
                let rgb = background_pixel(cfg.environment, x, y_tex, w);
                for c in 0..3 {
                    frame[c * h * w + y * w + x] = rgb[c];
                }
            }
        }

        let mut boxes = Vec::new();
        let mut lead_rect_drawn = None;
        for &(track_id, rect, is_lead) in &world[t].sprites {
            let color = if is_lead {
                cfg.lead.color
            } else {
                world_agent_color(cfg, track_id)
            };
            draw_sprite(frame, h, w, rect, color);
            if is_lead {
                lead_rect_drawn = Some(rect);
            }
            let bb = BBox {
                x_min: rect.x0,
                y_min: rect.y0,
                x_max: rect.x1,
                y_max: rect.y1,
                class: ObjectClass::Vehicle,
                track_id,
                provenance: Provenance::GroundTruth,
            };
            if let Some(clipped) = bb.clip(w, h) {
                boxes.push(clipped);
            }
        }

        // Weather: additive Gaussian noise, then rain streaks, then clamp.
        if cfg.weather.noise_sigma > 0.0 {
            let mut rng = frame_rng(cfg.seed, t as u64, 0xA1);
            for v in frame.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += (cfg.weather.noise_sigma * z) as f32;
            }
        }
        if rain_count > 0 {
            let mut streak_rng = frame_rng(cfg.seed, 0, 0xB2);
            let len = (h / 6).max(4) as i64;
            for _ in 0..rain_count {
                let x = streak_rng.gen_range(0..w);
                let phase = streak_rng.gen_range(0..(h as i64 + len));
                let head = (phase + t as i64 * 6).rem_euclid(h as i64 + len);
                for dy in 0..len {
                    let y = head - dy;
                    if y >= 0 && (y as usize) < h {
                        for c in 0..3 {
                            frame[c * h * w + y as usize * w + x] += 0.18;
                        }
                    }
                }
            }
        }
        for v in frame.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }

        // Anomaly mask: the braking lead's silhouette.
        let mut mask = vec![false; h * w];
        let mut flag = false;
        if traj.anomaly[t] {
            if let Some(rect) = lead_rect_drawn {
                let x0 = rect.x0.max(0) as usize;
                let y0 = rect.y0.max(0) as usize;
                let x1 = (rect.x1.min(w as i32)).max(0) as usize;
                let y1 = (rect.y1.min(h as i32)).max(0) as usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        mask[y * w + x] = true;
                        flag = true;
                    }
                }
            }
        }
        truth_frames.push(FrameTruth {
            boxes,
            anomaly_frame_flag: flag,
        });
        masks.push(mask);
        scroll += traj.v_ego[t];
    }

    Ok(Scenario {
        frames: Tensor::from_vec(vec![cfg.num_frames, 3, h, w], stack).map_err(VadError::Tensor)?,
        truth: GroundTruth {
            frames: truth_frames,
        },
        masks,
    })
}

fn world_agent_color(cfg: &ScenarioConfig, track_id: u32) -> [f32; 3] {
    if cfg.agents.is_empty() {
        return [0.2, 0.3, 0.8];
    }
    // Respawned tracks reuse the palette of their lane slot.
    let idx = (track_id as usize - 1) % cfg.agents.len();
    cfg.agents[idx].color
}

fn frame_rng(seed: u64, frame: u64, tag: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ frame.wrapping_mul(0x9E3779B97F4A7C15) ^ tag.wrapping_mul(0xC2B2AE3D27D4EB4F),
    ))
}

/// Analytic motion field [T-1, 2, H, W]: the road streams at ego speed and
/// each sprite moves per the affine map between its consecutive rects.
pub fn ground_truth_flow(cfg: &ScenarioConfig) -> Result<Tensor<f32>> {
    let traj = simulate(cfg)?;
    let (h, w) = (cfg.frame_height, cfg.frame_width);
    let world = layout_world(cfg, &traj);
    let pairs = cfg.num_frames - 1;
    let mut flow = vec![0.0f32; pairs * 2 * h * w];
    for t in 0..pairs {
        let (u_plane, v_plane) = {
            let base = t * 2 * h * w;
            (base, base + h * w)
        };
        let v_bg = traj.v_ego[t] as f32;
        for i in 0..h * w {
            flow[v_plane + i] = v_bg;
        }
        // Far to near so near sprites overwrite.
        for &(track_id, rect, _) in &world[t].sprites {
            let Some(&(_, next_rect, _)) = world[t + 1]
                .sprites
                .iter()
                .find(|(id, _, _)| *id == track_id)
            else {
                continue;
            };
            let (w0, h0) = ((rect.x1 - rect.x0) as f64, (rect.y1 - rect.y0) as f64);
            let (w1, h1) = (
                (next_rect.x1 - next_rect.x0) as f64,
                (next_rect.y1 - next_rect.y0) as f64,
            );
            if w0 <= 0.0 || h0 <= 0.0 {
                continue;
            }
            let x0 = rect.x0.max(0);
            let y0 = rect.y0.max(0);
            let x1 = rect.x1.min(w as i32);
            let y1 = rect.y1.min(h as i32);
            for y in y0..y1 {
                for x in x0..x1 {
                    let rx = (x - rect.x0) as f64 / w0;
                    let ry = (y - rect.y0) as f64 / h0;
                    let u = next_rect.x0 as f64 + rx * w1 - x as f64;
                    let v = next_rect.y0 as f64 + ry * h1 - y as f64;
                    let i = y as usize * w + x as usize;
                    flow[u_plane + i] = u as f32;
                    flow[v_plane + i] = v as f32;
                }
            }
        }
    }
    Tensor::from_vec(vec![pairs, 2, h, w], flow).map_err(VadError::Tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> ScenarioConfig {
        ScenarioConfig {
            seed: 42,
            frame_height: 64,
            frame_width: 64,
            num_frames: 150,
            ego_speed: vec![SpeedStep {
                from_frame: 0,
                speed: 1.5,
            }],
            lead: LeadConfig {
                width: 16.0,
                height: 12.0,
                color: [0.85, 0.15, 0.12],
                initial_gap: 36.0,
            },
            agents: vec![AgentConfig {
                lane_offset: -0.27,
                initial_gap: 50.0,
                relative_speed: 0.3,
                width: 12.0,
                height: 9.0,
                color: [0.15, 0.35, 0.8],
            }],
            braking_events: vec![],
            weather: WeatherConfig {
                noise_sigma: 0.02,
                rain_density: 0.0,
            },
            environment: Environment::City,
        }
    }

    #[test]
    fn steady_state_has_no_anomalies_and_stable_lead_box() {
        let cfg = base_config();
        let scenario = generate_scenario(&cfg).unwrap();
        assert!(scenario
            .truth
            .frames
            .iter()
            .all(|f| !f.anomaly_frame_flag));
        let lead_boxes: Vec<&BBox> = scenario
            .truth
            .frames
            .iter()
            .map(|f| f.boxes.iter().find(|b| b.track_id == 0).unwrap())
            .collect();
        let w0 = lead_boxes[0].width();
        let h0 = lead_boxes[0].height();
        for b in &lead_boxes {
            assert!((b.width() - w0).abs() <= 1);
            assert!((b.height() - h0).abs() <= 1);
            assert_eq!(b.x_min, lead_boxes[0].x_min);
        }
    }

    /// Independent kinematic recurrence: gap(t+1) = gap(t) - (v_ego - v_lead),
    /// v_lead dropping by d per frame after onset until zero.
    #[test]
    fn braking_matches_kinematic_oracle() {
        let mut cfg = base_config();
        cfg.braking_events = vec![BrakingEvent {
            onset_frame: 60,
            deceleration: 0.25,
            stop_duration: 6,
        }];
        let traj = simulate(&cfg).unwrap();

        let v0: f64 = 1.5;
        let d = 0.25;
        let steps = (v0 / d).ceil() as usize; // frames until v hits zero
        let stop_frame = 60 + steps;
        for t in 0..cfg.num_frames {
            let expect_v = if t < 60 {
                v0
            } else if t <= stop_frame {
                (v0 - d * (t - 60) as f64).max(0.0)
            } else {
                traj.v_lead[t] // recovery checked qualitatively below
            };
            if t <= stop_frame {
                assert!(
                    (traj.v_lead[t] - expect_v).abs() < 1e-12,
                    "frame {t}: {} vs {}",
                    traj.v_lead[t],
                    expect_v
                );
            }
            let on = t >= 60 && t <= stop_frame;
            assert_eq!(traj.anomaly[t], on, "flag at frame {t}");
        }
        // Gap strictly decreases while the lead is slower than ego.
        let mut expect_gap = cfg.lead.initial_gap;
        for t in 0..cfg.num_frames {
            assert!((traj.gap[t] - expect_gap).abs() < 1e-9, "gap at {t}");
            expect_gap -= traj.v_ego[t] - traj.v_lead[t];
            if traj.v_lead[t] < traj.v_ego[t] {
                assert!(expect_gap < traj.gap[t]);
            }
        }
    }

    #[test]
    fn braking_60_to_90_flags_31_frames() {
        let mut cfg = base_config();
        cfg.ego_speed = vec![SpeedStep {
            from_frame: 0,
            speed: 3.0,
        }];
        cfg.lead.initial_gap = 120.0;
        cfg.braking_events = vec![BrakingEvent {
            onset_frame: 60,
            deceleration: 0.1,
            stop_duration: 4,
        }];
        let traj = simulate(&cfg).unwrap();
        let flagged = traj.anomaly.iter().filter(|&&f| f).count();
        assert_eq!(flagged, 31);
        assert!(traj.anomaly[60] && traj.anomaly[90] && !traj.anomaly[59] && !traj.anomaly[91]);
    }

    #[test]
    fn collision_is_rejected_with_frame() {
        let mut cfg = base_config();
        cfg.lead.initial_gap = 6.0;
        cfg.braking_events = vec![BrakingEvent {
            onset_frame: 5,
            deceleration: 1.0,
            stop_duration: 60,
        }];
        match generate_scenario(&cfg) {
            Err(VadError::Collision { frame }) => assert!(frame > 5),
            Err(other) => panic!("expected collision, got {other:?}"),
            Ok(_) => panic!("expected collision, scenario generated"),
        }
    }

    #[test]
    fn generation_is_bit_deterministic() {
        let mut cfg = base_config();
        cfg.weather.rain_density = 0.05;
        cfg.braking_events = vec![BrakingEvent {
            onset_frame: 70,
            deceleration: 0.4,
            stop_duration: 8,
        }];
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&cfg).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn mask_matches_lead_silhouette_and_flag() {
        let mut cfg = base_config();
        cfg.braking_events = vec![BrakingEvent {
            onset_frame: 40,
            deceleration: 0.3,
            stop_duration: 5,
        }];
        let scenario = generate_scenario(&cfg).unwrap();
        let (h, w) = (cfg.frame_height, cfg.frame_width);
        for (t, frame) in scenario.truth.frames.iter().enumerate() {
            let mask = &scenario.masks[t];
            let nonempty = mask.iter().any(|&m| m);
            assert_eq!(frame.anomaly_frame_flag, nonempty, "frame {t}");
            if nonempty {
                let lead = frame.boxes.iter().find(|b| b.track_id == 0).unwrap();
                for y in 0..h {
                    for x in 0..w {
                        if mask[y * w + x] {
                            assert!(
                                (x as i32) >= lead.x_min
                                    && (x as i32) < lead.x_max
                                    && (y as i32) >= lead.y_min
                                    && (y as i32) < lead.y_max,
                                "mask pixel outside lead box at frame {t}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ground_truth_flow_has_background_stream() {
        let cfg = base_config();
        let flow = ground_truth_flow(&cfg).unwrap();
        assert_eq!(flow.shape(), &[149, 2, 64, 64]);
        // Corner pixel is background: u = 0, v = ego speed.
        let hw = 64 * 64;
        assert_eq!(flow.data()[0], 0.0);
        assert!((flow.data()[hw] - 1.5).abs() < 1e-6);
    }
}
