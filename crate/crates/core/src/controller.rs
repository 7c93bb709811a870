//! The suturing workflow as an explicit state machine driven over bus
//! services. Each suture runs capture-before, edge scan, placement,
//! capture-after and vision check on the right vessel and then the left,
//! followed by a holder rotation and the operator's pull-through and cut.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bus::{hash_text, log_to_jsonl, AdvanceHook, Bus, BusError, BusResult, Ctx, LogEntry, Reply};
use crate::config::{GlobalConfig, VisionMode};
use crate::devices::{
    calibrate, camera_capture, needle_drive, wrap_deg, Arm, CalibrationOffsets, CapturePhase, DeviceError,
    DriveTarget, Frame, Maps, NeedleDriveOutcome, Outage, Placement, Pose, RotateTarget, Side, VesselModel,
};
use crate::metrics::{cov_percent, mean, sample_sd, LumenOutcome, RunOutcome};
use crate::oct::{edge_scan, extract_template, AScanSource, Material, OctError, TemplateMatcher};
use crate::rng::{derive, derive_named, named_rng, rng_from, SimRng};
use crate::synth::{gen_ascan, LateralScene, SceneSource};
use crate::vision::{predict, PairClassifier, PairLabel};

pub const LOG_VERSION: u32 = 1;

pub const SVC_ROTATE: &str = "maps/rotate";
pub const SVC_CAPTURE: &str = "camera/capture";
pub const SVC_EDGE_SCAN: &str = "oct/edge_scan";
pub const SVC_JOG: &str = "oct/jog";
pub const SVC_MOVE: &str = "arm/move_to";
pub const SVC_DRIVE: &str = "tool/drive";
pub const SVC_VISION: &str = "vision/check";
/// Services that lose their connection when the arm drops out.
pub const ARM_SERVICES: [&str; 3] = [SVC_MOVE, SVC_EDGE_SCAN, SVC_DRIVE];
pub const EV_FAULT: &str = "arm/fault";
pub const EV_RECONNECT: &str = "arm/reconnect";
pub const CH_CONTROLLER: &str = "controller";
pub const CH_PROMPT: &str = "operator/prompt";
pub const CH_DECISION: &str = "operator/decision";

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Oct(#[from] OctError),
    #[error("vision: {0}")]
    Vision(String),
    #[error("operator policy: {0}")]
    Policy(String),
    #[error("decision {decision:?} does not answer a {prompt:?} prompt")]
    InvalidDecision { prompt: PromptKind, decision: OperatorDecision },
    #[error("illegal transition: {event:?} in {phase:?}")]
    IllegalTransition { phase: Phase, event: Event },
    #[error("replay: {0}")]
    Replay(String),
}

pub type Result<T> = std::result::Result<T, ControllerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    LoadVessels,
    RotateToStart,
    CaptureBefore,
    EdgeScan,
    PlaceSuture,
    CaptureAfter,
    MissedPrompt,
    AwaitPullAndCut,
    RotateToNext,
    RotateToBeginning,
    AwaitTieOff,
    Done,
    AwaitManualJog,
    AwaitReconnect,
}

impl Phase {
    /// Phases that talk to devices and can be interrupted by a dropout.
    pub fn uses_devices(self) -> bool {
        matches!(
            self,
            Phase::RotateToStart
                | Phase::CaptureBefore
                | Phase::EdgeScan
                | Phase::PlaceSuture
                | Phase::CaptureAfter
                | Phase::RotateToNext
                | Phase::RotateToBeginning
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    VesselsLoaded,
    Rotated,
    Captured,
    EdgeFound,
    NoEdge,
    Placed,
    VisionSuccess,
    VisionMissed,
    RetryYes,
    RetryNo,
    ManualJog,
    PullAndCutDone,
    TieOffDone,
    ConnectionLost,
    Reconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcedureState {
    pub phase: Phase,
    /// 1-based.
    pub suture: usize,
    pub side: Side,
    pub n_sutures: usize,
    /// Phase to return to after a reconnect.
    pub resume: Option<Phase>,
}

impl ProcedureState {
    pub fn new(n_sutures: usize) -> Self {
        Self {
            phase: Phase::LoadVessels,
            suture: 1,
            side: Side::Right,
            n_sutures,
            resume: None,
        }
    }

    fn at(self, phase: Phase) -> Self {
        Self { phase, ..self }
    }

    fn after_side(self) -> Self {
        match self.side {
            Side::Right => Self {
                phase: Phase::CaptureBefore,
                side: Side::Left,
                ..self
            },
            Side::Left => self.at(Phase::RotateToNext),
        }
    }
}

/// One step of the transition table. Illegal events leave the state as it
/// was and report an error.
pub fn transition(state: ProcedureState, event: Event) -> Result<ProcedureState> {
    use Event as E;
    use Phase as P;
    let next = match (state.phase, event) {
        (P::LoadVessels, E::VesselsLoaded) => state.at(P::RotateToStart),
        (P::RotateToStart, E::Rotated) => ProcedureState {
            phase: P::CaptureBefore,
            suture: 1,
            side: Side::Right,
            ..state
        },
        (P::CaptureBefore, E::Captured) => state.at(P::EdgeScan),
        (P::EdgeScan, E::EdgeFound) => state.at(P::PlaceSuture),
        (P::EdgeScan, E::NoEdge) => state.at(P::AwaitManualJog),
        (P::AwaitManualJog, E::ManualJog) => state.at(P::EdgeScan),
        (P::PlaceSuture, E::Placed) => state.at(P::CaptureAfter),
        (P::CaptureAfter, E::VisionSuccess) | (P::MissedPrompt, E::RetryNo) => state.after_side(),
        (P::CaptureAfter, E::VisionMissed) => state.at(P::MissedPrompt),
        (P::MissedPrompt, E::RetryYes) => state.at(P::CaptureBefore),
        (P::RotateToNext, E::Rotated) => state.at(P::AwaitPullAndCut),
        (P::AwaitPullAndCut, E::PullAndCutDone) if state.suture < state.n_sutures => ProcedureState {
            phase: P::CaptureBefore,
            suture: state.suture + 1,
            side: Side::Right,
            ..state
        },
        (P::AwaitPullAndCut, E::PullAndCutDone) => state.at(P::RotateToBeginning),
        (P::RotateToBeginning, E::Rotated) => state.at(P::AwaitTieOff),
        (P::AwaitTieOff, E::TieOffDone) => state.at(P::Done),
        (p, E::ConnectionLost) if p.uses_devices() => ProcedureState {
            phase: P::AwaitReconnect,
            resume: Some(p),
            ..state
        },
        (P::AwaitReconnect, E::Reconnected) => ProcedureState {
            phase: state.resume.expect("reconnect state records its resume phase"),
            resume: None,
            ..state
        },
        (phase, event) => return Err(ControllerError::IllegalTransition { phase, event }),
    };
    Ok(next)
}

/// Needle pose for a detected edge: `bite` inward from the edge along the
/// scan axis, then shifted by the calibration offsets.
pub fn position_from_edge(edge_position_mm: f64, offsets: CalibrationOffsets, bite_depth_target_mm: f64) -> Pose {
    offsets.apply(Pose::new(edge_position_mm - bite_depth_target_mm, 0.0, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    LoadVessels,
    RetryMissed,
    ManualJog,
    PullAndCut,
    TieOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub seq: u64,
    pub kind: PromptKind,
    pub suture: usize,
    pub side: Option<Side>,
    pub logical_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OperatorDecision {
    RetryYes,
    RetryNo,
    ManualJog { dx: f64, dy: f64, dz: f64 },
    VesselsLoaded,
    PullAndCutDone,
    TieOffDone,
}

impl OperatorDecision {
    pub fn answers(&self, kind: PromptKind) -> bool {
        matches!(
            (kind, self),
            (PromptKind::RetryMissed, OperatorDecision::RetryYes | OperatorDecision::RetryNo)
                | (PromptKind::ManualJog, OperatorDecision::ManualJog { .. })
                | (PromptKind::LoadVessels, OperatorDecision::VesselsLoaded)
                | (PromptKind::PullAndCut, OperatorDecision::PullAndCutDone)
                | (PromptKind::TieOff, OperatorDecision::TieOffDone)
        )
    }
}

/// Source of operator answers.
pub trait OperatorPolicy {
    fn decide(&mut self, prompt: &Prompt) -> Result<OperatorDecision>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetryChoice {
    RetryYes,
    RetryNo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedMiss {
    pub suture: usize,
    pub side: Side,
}

/// What the OCT fiber sees during edge scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OctScene {
    /// Tissue for a random extent, then air or nitinol.
    #[default]
    Random,
    AirOnly,
    /// Tissue reaching just past the scan travel.
    EdgeBeyondTravel,
}

/// Scripted scenario file. Prompt and jog answers are consumed in order;
/// once exhausted the operator defaults from the config apply.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub prompts: Vec<RetryChoice>,
    pub jogs: Vec<(f64, f64, f64)>,
    /// Arm disconnect times, ms from procedure start.
    pub faults: Vec<u64>,
    pub forced_misses: Vec<ForcedMiss>,
    pub oct: OctScene,
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ControllerError::Policy(format!("scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ControllerError::Policy(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }
}

/// Scripted operator: scenario answers first, then a seeded probabilistic
/// retry choice and the default jog.
pub struct ScriptedPolicy {
    prompts: VecDeque<RetryChoice>,
    jogs: VecDeque<(f64, f64, f64)>,
    retry_probability: f64,
    default_jog: (f64, f64, f64),
    rng: SimRng,
}

impl ScriptedPolicy {
    pub fn new(scenario: &Scenario, cfg: &GlobalConfig, seed: u64) -> Self {
        Self {
            prompts: scenario.prompts.iter().copied().collect(),
            jogs: scenario.jogs.iter().copied().collect(),
            retry_probability: cfg.operator.retry_probability,
            default_jog: cfg.operator.default_jog_mm,
            rng: named_rng(seed, "operator"),
        }
    }
}

impl OperatorPolicy for ScriptedPolicy {
    fn decide(&mut self, prompt: &Prompt) -> Result<OperatorDecision> {
        Ok(match prompt.kind {
            PromptKind::LoadVessels => OperatorDecision::VesselsLoaded,
            PromptKind::PullAndCut => OperatorDecision::PullAndCutDone,
            PromptKind::TieOff => OperatorDecision::TieOffDone,
            PromptKind::RetryMissed => match self.prompts.pop_front() {
                Some(RetryChoice::RetryYes) => OperatorDecision::RetryYes,
                Some(RetryChoice::RetryNo) => OperatorDecision::RetryNo,
                None if self.rng.random::<f64>() < self.retry_probability => OperatorDecision::RetryYes,
                None => OperatorDecision::RetryNo,
            },
            PromptKind::ManualJog => {
                let (dx, dy, dz) = self.jogs.pop_front().unwrap_or(self.default_jog);
                OperatorDecision::ManualJog { dx, dy, dz }
            }
        })
    }
}

/// Answers prompts with decisions recorded in an earlier event log.
pub struct ReplayPolicy {
    decisions: VecDeque<OperatorDecision>,
}

impl ReplayPolicy {
    pub fn new(decisions: impl IntoIterator<Item = OperatorDecision>) -> Self {
        Self {
            decisions: decisions.into_iter().collect(),
        }
    }

    pub fn from_log(entries: &[LogEntry]) -> Result<Self> {
        let mut out = Vec::new();
        for e in entries.iter().filter(|e| e.channel == CH_DECISION && e.kind == "decision") {
            let d = e
                .payload
                .get("decision")
                .cloned()
                .ok_or_else(|| ControllerError::Replay(format!("decision entry {} has no decision", e.seq)))?;
            out.push(serde_json::from_value(d).map_err(|err| ControllerError::Replay(err.to_string()))?);
        }
        Ok(Self::new(out))
    }
}

impl OperatorPolicy for ReplayPolicy {
    fn decide(&mut self, prompt: &Prompt) -> Result<OperatorDecision> {
        self.decisions
            .pop_front()
            .ok_or_else(|| ControllerError::Replay(format!("log has no decision for prompt {}", prompt.seq)))
    }
}

/// Maximum points in an A-scan trace sent to observers.
pub const ASCAN_VIEW_POINTS: usize = 512;

/// The A-scan that ended an edge scan, decimated for display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AScanView {
    pub suture: usize,
    pub side: Side,
    pub logical_time_ms: u64,
    pub position_mm: f64,
    pub depth_step_mm: f64,
    pub samples: Vec<f64>,
    pub material: Material,
    pub smoothed_max: f64,
    pub min_rmse: Option<f64>,
    pub tau_air: f64,
    pub tau_rmse: f64,
}

/// Before/after frames with the vision verdict; pixels scaled to 0..=255.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPairView {
    pub suture: usize,
    pub side: Side,
    pub logical_time_ms: u64,
    pub width: usize,
    pub height: usize,
    pub before: Vec<u8>,
    pub after: Vec<u8>,
    pub verdict: PairLabel,
    pub confidence: f64,
}

/// Side channel for bulky sensor data. Nothing sent here enters the event
/// log, so observing a run does not change its hash.
pub trait ProcedureObserver: Send {
    fn ascan(&mut self, _view: &AScanView) {}
    fn camera_pair(&mut self, _view: &CameraPairView) {}
}

/// Evenly spaced picks, at most `max` of them.
pub fn decimate(samples: &[f64], max: usize) -> Vec<f64> {
    if samples.len() <= max || max == 0 {
        return samples.to_vec();
    }
    (0..max)
        .map(|i| samples[i * (samples.len() - 1) / (max - 1)])
        .collect()
}

fn to_u8(pixels: &[f32]) -> Vec<u8> {
    pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Simulation state owned by the bus: devices, scene geometry and the
/// ground truth the controller never reads directly.
pub struct World {
    cfg: GlobalConfig,
    seed: u64,
    speed_factor: f64,
    vessel: VesselModel,
    maps: Maps,
    arm: Arm,
    calibrated: CalibrationOffsets,
    matcher: TemplateMatcher,
    oct_scene: OctScene,
    oct_scans: u64,
    jog_offset_mm: f64,
    needle_plane_mm: Option<f64>,
    last_outcome: Option<NeedleDriveOutcome>,
    frames: (Option<Frame>, Option<Frame>),
    forced_misses: BTreeSet<(usize, Side)>,
    classifier: Option<PairClassifier>,
    maps_rng: SimRng,
    needle_rng: SimRng,
    camera_rng: SimRng,
    vision_rng: SimRng,
    observer: Option<Box<dyn ProcedureObserver>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct SceneTruth {
    tissue_mm: f64,
    material: Material,
}

impl World {
    pub fn new(cfg: &GlobalConfig, seed: u64, scenario: &Scenario) -> Result<Self> {
        cfg.validate().map_err(|e| ControllerError::Config(e.to_string()))?;
        let d = &cfg.devices;
        let mut cal_rng = named_rng(seed, "calibration");
        let noise = |rng: &mut SimRng| {
            let sd = d.calibration.reading_noise_sd_mm;
            if sd > 0.0 {
                Normal::new(0.0, sd).expect("sd >= 0").sample(rng)
            } else {
                0.0
            }
        };
        let t = d.calibration.true_offsets;
        let flush = (t.z_offset_mm + noise(&mut cal_rng)).max(0.0);
        let jog = (t.x_offset_mm + noise(&mut cal_rng), t.y_offset_mm + noise(&mut cal_rng));
        let calibrated = calibrate(flush, jog)?;

        let mut speed_rng = named_rng(seed, "speed");
        let speed_factor = if cfg.timing.speed_factor_sd > 0.0 {
            Normal::new(1.0, cfg.timing.speed_factor_sd)
                .expect("sd checked")
                .sample(&mut speed_rng)
                .clamp(0.5, 1.5)
        } else {
            1.0
        };

        let tissue = cfg.oct.noise_model.profile(Material::Tissue, cfg.oct.procedure_noise_level);
        let reference = gen_ascan(&tissue, derive_named(seed, "oct-reference"));
        let template = extract_template(&reference, &cfg.oct.thresholds)?;
        let matcher = TemplateMatcher::new(&template, cfg.oct.thresholds)?;

        let classifier = match &cfg.vision.mode {
            VisionMode::Model { path } => Some(
                PairClassifier::load(Path::new(path))
                    .map_err(|e| ControllerError::Vision(format!("cannot load model {path}: {e}")))?,
            ),
            VisionMode::Simulated { .. } => None,
        };

        let mut arm = Arm::new(CalibrationOffsets::default(), d.arm);
        arm.fault_schedule(&scenario.faults);
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            speed_factor,
            vessel: VesselModel::new(d.vessel)?,
            maps: Maps::new(d.maps)?,
            arm,
            calibrated,
            matcher,
            oct_scene: scenario.oct,
            oct_scans: 0,
            jog_offset_mm: 0.0,
            needle_plane_mm: None,
            last_outcome: None,
            frames: (None, None),
            forced_misses: scenario.forced_misses.iter().map(|m| (m.suture, m.side)).collect(),
            classifier,
            maps_rng: named_rng(seed, "maps"),
            needle_rng: named_rng(seed, "needle"),
            camera_rng: named_rng(seed, "camera"),
            vision_rng: named_rng(seed, "vision"),
            observer: None,
        })
    }

    pub fn vessel(&self) -> &VesselModel {
        &self.vessel
    }

    pub fn maps(&self) -> &Maps {
        &self.maps
    }

    pub fn arm(&self) -> &Arm {
        &self.arm
    }

    pub fn calibrated_offsets(&self) -> CalibrationOffsets {
        self.calibrated
    }

    pub fn speed_factor(&self) -> f64 {
        self.speed_factor
    }

    pub fn frames(&self) -> (Option<&Frame>, Option<&Frame>) {
        (self.frames.0.as_ref(), self.frames.1.as_ref())
    }

    fn scaled(&self, ms: u64) -> u64 {
        (ms as f64 * self.speed_factor).round() as u64
    }

    /// Vessel geometry under the fiber for a suture side; fixed per side so
    /// re-scans see the same edge with fresh noise.
    fn scene_truth(&self, suture: usize, side: Side) -> SceneTruth {
        let o = &self.cfg.oct;
        match self.oct_scene {
            OctScene::AirOnly => SceneTruth {
                tissue_mm: 0.0,
                material: Material::Air,
            },
            OctScene::EdgeBeyondTravel => SceneTruth {
                tissue_mm: o.scan.start_mm + o.scan.max_travel_mm + 0.5,
                material: Material::Air,
            },
            OctScene::Random => {
                let mut rng = rng_from(derive(derive_named(self.seed, "oct-scene"), (suture * 2 + side.index()) as u64));
                let (lo, hi) = o.edge_distance_mm;
                let tissue_mm = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let material = if rng.random::<f64>() < o.nitinol_fraction {
                    Material::Nitinol
                } else {
                    Material::Air
                };
                SceneTruth { tissue_mm, material }
            }
        }
    }

    fn scene(&self, truth: SceneTruth) -> std::result::Result<LateralScene, OctError> {
        let o = &self.cfg.oct;
        let level = o.procedure_noise_level;
        let beyond = o.scan.start_mm + o.scan.max_travel_mm + 20.0;
        let mut segments = Vec::new();
        if truth.tissue_mm > 0.0 {
            segments.push((truth.tissue_mm, o.noise_model.profile(Material::Tissue, level)));
        }
        segments.push((beyond, o.noise_model.profile(truth.material, level)));
        LateralScene::new(segments)
    }
}

fn parse<T: DeserializeOwned>(service: &str, v: &Value) -> BusResult<T> {
    serde_json::from_value(v.clone()).map_err(|e| BusError::handler(service, format!("bad request: {e}")))
}

fn dev_err(service: &str) -> impl Fn(DeviceError) -> BusError + '_ {
    move |e| BusError::handler(service, e.to_string())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RotateMode {
    Home,
    Increment,
    ToBeginning,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RotateReq {
    mode: RotateMode,
    increment_deg: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct SiteReq {
    suture: usize,
    side: Side,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct CaptureReq {
    suture: usize,
    side: Side,
    phase: CapturePhase,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct JogReq {
    dx: f64,
    dy: f64,
    dz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeScanReply {
    pub found: bool,
    pub edge_position_mm: Option<f64>,
    pub transition_material: Option<Material>,
    pub attempts_used: u32,
    pub positions_scanned: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveReply {
    pub engaged: bool,
    /// The site already held a stitch; nothing new was placed.
    pub redundant: bool,
    pub bite_target_mm: f64,
    pub bite_depth_mm: Option<f64>,
    pub angular_position_deg: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisionReply {
    pub verdict: PairLabel,
    pub confidence: f64,
}

fn svc_rotate(w: &mut World, _ctx: &mut Ctx, req: &Value) -> BusResult<Reply> {
    let r: RotateReq = parse(SVC_ROTATE, req)?;
    let increment = match r.mode {
        RotateMode::Home => None,
        RotateMode::Increment => Some(r.increment_deg),
        RotateMode::ToBeginning => Some(-w.maps.commanded_deg()),
    };
    let rotation = match increment {
        Some(inc) => Some(
            w.maps
                .rotate(RotateTarget::Both, inc, &mut w.maps_rng)
                .map_err(dev_err(SVC_ROTATE))?,
        ),
        None => None,
    };
    let state = w.maps.state();
    Ok(Reply::new(
        json!({ "increment_deg": increment, "rotation": rotation, "state": state }),
        w.scaled(w.cfg.timing.rotate_ms),
    ))
}

fn svc_capture(w: &mut World, _ctx: &mut Ctx, req: &Value) -> BusResult<Reply> {
    let r: CaptureReq = parse(SVC_CAPTURE, req)?;
    let site = r.suture - 1;
    let outcome = match r.phase {
        CapturePhase::After => w.last_outcome,
        CapturePhase::Before => None,
    };
    let frame = camera_capture(
        &w.vessel,
        site,
        r.side,
        r.phase,
        outcome.as_ref(),
        derive_named(w.seed, "camera-scene"),
        &w.cfg.devices.camera,
        &mut w.camera_rng,
    )
    .map_err(dev_err(SVC_CAPTURE))?;
    let mean_intensity = frame.pixels.iter().map(|p| f64::from(*p)).sum::<f64>() / frame.pixels.len() as f64;
    match r.phase {
        CapturePhase::Before => w.frames = (Some(frame), None),
        CapturePhase::After => w.frames.1 = Some(frame),
    }
    Ok(Reply::new(
        json!({ "phase": r.phase, "mean_intensity": mean_intensity }),
        w.scaled(w.cfg.timing.imaging_ms),
    ))
}

fn svc_edge_scan(w: &mut World, ctx: &mut Ctx, req: &Value) -> BusResult<Reply> {
    let r: SiteReq = parse(SVC_EDGE_SCAN, req)?;
    let truth = w.scene_truth(r.suture, r.side);
    let scene = w.scene(truth).map_err(|e| BusError::handler(SVC_EDGE_SCAN, e.to_string()))?;
    let params = w.cfg.oct.scan;
    let mut passes = 0u32;
    let mut positions = 0usize;
    let mut found = None;
    let mut last = None;
    // a label change at the very first position is not a tissue-to-edge
    // transition; that pass counts as failed
    while passes < crate::oct::EDGE_SCAN_MAX_ATTEMPTS {
        let mut source = SceneSource::new(scene.clone(), derive(derive_named(w.seed, "oct-scan"), w.oct_scans));
        w.oct_scans += 1;
        source.set_offset(w.jog_offset_mm);
        let mut recording = |pos: f64| {
            let a = source.acquire(pos)?;
            last = Some(a.clone());
            Ok(a)
        };
        let result = edge_scan(&mut recording, &params, &w.matcher)
            .map_err(|e| BusError::handler(SVC_EDGE_SCAN, format!("sensor fault: {e}")))?;
        positions += result.positions_scanned();
        passes += result.attempts_used;
        if result.found() {
            let in_pass = result
                .classifications
                .iter()
                .filter(|s| s.attempt == result.attempts_used)
                .count();
            if in_pass > 1 {
                found = Some(result);
                break;
            }
        }
    }
    let passes = passes.min(crate::oct::EDGE_SCAN_MAX_ATTEMPTS);
    if let (Some(obs), Some(ascan)) = (w.observer.as_mut(), last) {
        if let Ok(c) = w.matcher.classify_detailed(&ascan) {
            let thr = w.matcher.thresholds();
            let samples = decimate(ascan.samples(), ASCAN_VIEW_POINTS);
            let stride = (ascan.len() - 1) as f64 / (samples.len().max(2) - 1) as f64;
            obs.ascan(&AScanView {
                suture: r.suture,
                side: r.side,
                logical_time_ms: ctx.now(),
                position_mm: ascan.fiber_position(),
                depth_step_mm: ascan.depth_per_sample() * stride,
                samples,
                material: c.material,
                smoothed_max: c.smoothed_max,
                min_rmse: c.min_rmse,
                tau_air: thr.tau_air,
                tau_rmse: thr.tau_rmse,
            });
        }
    }
    let reply = EdgeScanReply {
        found: found.is_some(),
        edge_position_mm: found.as_ref().and_then(|f| f.edge_position_mm),
        transition_material: found.as_ref().and_then(|f| f.transition_material),
        attempts_used: found.as_ref().map_or(passes, |f| f.attempts_used),
        positions_scanned: positions,
    };
    let t = &w.cfg.timing;
    let busy = t.edge_scan_setup_ms + t.edge_scan_per_position_ms * positions as u64;
    Ok(Reply::new(
        serde_json::to_value(reply).expect("reply serializes"),
        w.scaled(busy),
    ))
}

fn svc_jog(w: &mut World, _ctx: &mut Ctx, req: &Value) -> BusResult<Reply> {
    let r: JogReq = parse(SVC_JOG, req)?;
    w.jog_offset_mm += r.dx;
    Ok(Reply::new(
        json!({ "offset_mm": w.jog_offset_mm, "dy": r.dy, "dz": r.dz }),
        w.scaled(w.cfg.timing.manual_jog_ms),
    ))
}

fn svc_move(w: &mut World, _ctx: &mut Ctx, req: &Value) -> BusResult<Reply> {
    let pose: Pose = parse(SVC_MOVE, req)?;
    let state = w.arm.move_to(pose).map_err(|e| match e {
        DeviceError::ConnectionLost(_) => BusError::ConnectionLost(SVC_MOVE.into()),
        other => BusError::handler(SVC_MOVE, other.to_string()),
    })?;
    w.needle_plane_mm = Some(state.pose.x - w.cfg.devices.calibration.true_offsets.x_offset_mm);
    Ok(Reply::new(
        serde_json::to_value(state).expect("state serializes"),
        w.scaled(w.cfg.timing.move_ms),
    ))
}

fn svc_drive(w: &mut World, _ctx: &mut Ctx, req: &Value) -> BusResult<Reply> {
    let r: SiteReq = parse(SVC_DRIVE, req)?;
    let site = r.suture - 1;
    let plane = w
        .needle_plane_mm
        .ok_or_else(|| BusError::handler(SVC_DRIVE, "needle not positioned"))?;
    let truth = w.scene_truth(r.suture, r.side);
    let bite_target = truth.tissue_mm - w.jog_offset_mm - plane;
    let busy = w.scaled(w.cfg.timing.drive_ms);
    if w.vessel.is_sutured(r.side, site) {
        w.last_outcome = Some(NeedleDriveOutcome {
            engaged: true,
            applied_tangential_force_n: 0.0,
            applied_axial_force_n: 0.0,
            bite_depth_actual_mm: 0.0,
            slip: Default::default(),
        });
        let reply = DriveReply {
            engaged: true,
            redundant: true,
            bite_target_mm: bite_target,
            bite_depth_mm: None,
            angular_position_deg: None,
        };
        return Ok(Reply::new(serde_json::to_value(reply).expect("reply serializes"), busy));
    }
    let mut needle = w.cfg.devices.needle;
    if w.forced_misses.remove(&(r.suture, r.side)) {
        needle.miss_probability = 1.0;
    }
    let target = DriveTarget {
        bite_depth_mm: bite_target,
        angular_position_deg: wrap_deg(w.maps.total_angle(r.side)),
    };
    let grip = w.maps.config().grip_force_n;
    let slip = w.cfg.devices.slip;
    let outcome = needle_drive(&mut w.vessel, site, r.side, target, &needle, grip, &slip, &mut w.needle_rng)
        .map_err(dev_err(SVC_DRIVE))?;
    w.last_outcome = Some(outcome);
    let placed = w.vessel.placements(r.side).iter().find(|p| p.site == site).copied();
    let reply = DriveReply {
        engaged: outcome.engaged,
        redundant: false,
        bite_target_mm: bite_target,
        bite_depth_mm: placed.map(|p| p.bite_depth_mm),
        angular_position_deg: placed.map(|p| p.angular_position_deg),
    };
    Ok(Reply::new(serde_json::to_value(reply).expect("reply serializes"), busy))
}

fn svc_vision(w: &mut World, ctx: &mut Ctx, req: &Value) -> BusResult<Reply> {
    let busy = w.scaled(w.cfg.timing.vision_ms);
    let reply = match (&w.cfg.vision.mode, &w.classifier) {
        (_, Some(model)) => {
            let (Some(before), Some(after)) = (&w.frames.0, &w.frames.1) else {
                return Err(BusError::handler(SVC_VISION, "before/after frames not captured"));
            };
            let p = predict(model, before, after).map_err(|e| BusError::handler(SVC_VISION, e.to_string()))?;
            VisionReply {
                verdict: p.label,
                confidence: p.confidence,
            }
        }
        (
            VisionMode::Simulated {
                recall,
                false_alarm_rate,
            },
            None,
        ) => {
            let engaged = w.last_outcome.is_some_and(|o| o.engaged);
            let rate = if engaged { *false_alarm_rate } else { *recall };
            let u: f64 = w.vision_rng.random();
            let flagged = u < rate;
            VisionReply {
                verdict: if flagged { PairLabel::Missed } else { PairLabel::Success },
                confidence: if flagged { rate } else { 1.0 - rate },
            }
        }
        (VisionMode::Model { .. }, None) => return Err(BusError::handler(SVC_VISION, "model not loaded")),
    };
    if let (Some(obs), (Some(before), Some(after))) = (w.observer.as_mut(), &w.frames) {
        let r: SiteReq = parse(SVC_VISION, req)?;
        obs.camera_pair(&CameraPairView {
            suture: r.suture,
            side: r.side,
            logical_time_ms: ctx.now(),
            width: before.width,
            height: before.height,
            before: to_u8(&before.pixels),
            after: to_u8(&after.pixels),
            verdict: reply.verdict,
            confidence: reply.confidence,
        });
    }
    Ok(Reply::new(serde_json::to_value(reply).expect("reply serializes"), busy))
}

fn on_fault(w: &mut World, ctx: &mut Ctx, _payload: &Value) {
    let was = w.arm.state().connected;
    w.arm.advance_to(ctx.now());
    if was && !w.arm.state().connected {
        for s in ARM_SERVICES {
            ctx.set_connected(s, false);
        }
        if let Some(at) = w.arm.reconnect_due() {
            ctx.schedule(at, EV_RECONNECT, Value::Null);
        }
    }
}

fn on_reconnect(w: &mut World, ctx: &mut Ctx, _payload: &Value) {
    w.arm.advance_to(ctx.now());
    if w.arm.state().connected {
        for s in ARM_SERVICES {
            ctx.set_connected(s, true);
        }
    }
}


fn register_world(bus: &mut Bus<World>) {
    bus.register_service(SVC_ROTATE, None, Box::new(svc_rotate));
    bus.register_service(SVC_CAPTURE, None, Box::new(svc_capture));
    bus.register_service(SVC_EDGE_SCAN, None, Box::new(svc_edge_scan));
    bus.register_service(SVC_JOG, None, Box::new(svc_jog));
    bus.register_service(SVC_MOVE, None, Box::new(svc_move));
    bus.register_service(SVC_DRIVE, None, Box::new(svc_drive));
    bus.register_service(SVC_VISION, None, Box::new(svc_vision));
    bus.on_event(EV_FAULT, Box::new(on_fault));
    bus.on_event(EV_RECONNECT, Box::new(on_reconnect));
}

/// One pass through capture, scan, drive and check on a suture side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveAttempt {
    pub edge_position_mm: Option<f64>,
    pub transition_material: Option<Material>,
    pub scan_attempts: u32,
    pub manual_jogs: u32,
    pub bite_target_mm: Option<f64>,
    pub bite_depth_mm: Option<f64>,
    pub angular_position_deg: Option<f64>,
    pub engaged: Option<bool>,
    pub redundant: bool,
    pub vision: Option<PairLabel>,
    pub decision: Option<OperatorDecision>,
}

impl DriveAttempt {
    fn new() -> Self {
        Self {
            edge_position_mm: None,
            transition_material: None,
            scan_attempts: 0,
            manual_jogs: 0,
            bite_target_mm: None,
            bite_depth_mm: None,
            angular_position_deg: None,
            engaged: None,
            redundant: false,
            vision: None,
            decision: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutureRecord {
    pub suture: usize,
    pub side: Side,
    pub attempts: Vec<DriveAttempt>,
    pub retries: u32,
    /// Missed (per vision) and left unrepaired.
    pub unrepaired_miss: bool,
    pub interventions: u32,
}

impl SutureRecord {
    pub fn engaged_drives(&self) -> usize {
        self.attempts
            .iter()
            .filter(|a| a.engaged == Some(true) && !a.redundant)
            .count()
    }

    pub fn drives(&self) -> usize {
        self.attempts.iter().filter(|a| a.engaged.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterventionKind {
    RetryYes,
    RetryNo,
    ManualJog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub suture: usize,
    pub side: Side,
    pub kind: InterventionKind,
    pub logical_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ProcedureOutcome {
    Completed,
    Aborted { phase: Phase, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub bite_mean_mm: Option<f64>,
    pub bite_sd_mm: Option<f64>,
    pub bite_cov_percent: Option<f64>,
    pub spacing_cov_percent: Option<f64>,
    pub time_per_stitch_s: f64,
    pub lumen: Option<LumenOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureReport {
    pub run: usize,
    pub seed: u64,
    pub config_hash: String,
    pub outcome: ProcedureOutcome,
    pub sutures: Vec<SutureRecord>,
    /// Per-phase time with disconnected intervals removed.
    pub phase_durations_ms: BTreeMap<Phase, u64>,
    /// Elapsed time minus excluded time; equals the sum of phase durations.
    pub total_time_ms: u64,
    pub elapsed_ms: u64,
    pub excluded_ms: u64,
    pub disconnect_count: u32,
    pub outages: Vec<Outage>,
    pub interventions: Vec<Intervention>,
    pub sutures_without_intervention: usize,
    pub rotations: usize,
    pub crossed_stitch: bool,
    pub placements: Vec<(Side, Placement)>,
    pub vessel_diameter_mm: f64,
    pub speed_factor: f64,
    pub metrics: RunMetrics,
    pub state_trace_hash: String,
}

impl ProcedureReport {
    pub fn completed(&self) -> bool {
        self.outcome == ProcedureOutcome::Completed
    }

    pub fn engaged_drives(&self) -> usize {
        self.sutures.iter().map(SutureRecord::engaged_drives).sum()
    }

    pub fn drives(&self) -> usize {
        self.sutures.iter().map(SutureRecord::drives).sum()
    }

    /// Fraction of sutures that needed no operator intervention.
    pub fn autonomy_fraction(&self, n_sutures: usize) -> f64 {
        self.sutures_without_intervention as f64 / n_sutures.max(1) as f64
    }

    pub fn to_run_outcome(&self) -> RunOutcome {
        RunOutcome {
            run: self.run,
            seed: self.seed,
            placements: self.placements.clone(),
            vessel_diameter_mm: self.vessel_diameter_mm,
            lumen_reduction_percent: self.metrics.lumen.as_ref().map_or(0.0, |l| l.reduction_percent),
            time_per_stitch_s: self.metrics.time_per_stitch_s,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let status = match &self.outcome {
            ProcedureOutcome::Completed => "completed".to_string(),
            ProcedureOutcome::Aborted { phase, reason } => format!("aborted in {phase:?}: {reason}"),
        };
        let _ = writeln!(s, "# Procedure run {} (seed {})\n", self.run, self.seed);
        let _ = writeln!(s, "- Status: {status}");
        let _ = writeln!(s, "- Config hash: `{}`", self.config_hash);
        let _ = writeln!(s, "- State trace hash: `{}`", self.state_trace_hash);
        let _ = writeln!(
            s,
            "- Total time: {:.1} s ({:.1} s per stitch), {:.1} s excluded over {} disconnects",
            self.total_time_ms as f64 / 1000.0,
            self.metrics.time_per_stitch_s,
            self.excluded_ms as f64 / 1000.0,
            self.disconnect_count
        );
        let _ = writeln!(
            s,
            "- Drives: {} engaged of {}; interventions: {}; sutures without intervention: {}/{}",
            self.engaged_drives(),
            self.drives(),
            self.interventions.len(),
            self.sutures_without_intervention,
            self.sutures.len() / 2
        );
        let _ = writeln!(s, "- Crossed stitch: {}", if self.crossed_stitch { "yes" } else { "no" });
        let fmt = |v: Option<f64>, d: usize| v.map_or("n/a".to_string(), |x| format!("{x:.d$}"));
        let _ = writeln!(
            s,
            "- Bite depth: {} ± {} mm (COV {}%), spacing COV {}%",
            fmt(self.metrics.bite_mean_mm, 2),
            fmt(self.metrics.bite_sd_mm, 2),
            fmt(self.metrics.bite_cov_percent, 1),
            fmt(self.metrics.spacing_cov_percent, 1)
        );
        if let Some(l) = &self.metrics.lumen {
            let _ = writeln!(
                s,
                "- Lumen: raw {:.1} mm, anastomosis {:.1} mm (pin gauge), reduction {:.1}%",
                l.raw_measured_mm, l.anastomosis_measured_mm, l.reduction_percent
            );
        }
        let _ = writeln!(s, "\n## Sutures\n");
        let _ = writeln!(s, "| Suture | Side | Drives | Edge (mm) | Bite (mm) | Retries | Unrepaired | Interventions |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
        for r in &self.sutures {
            let last = r.attempts.last();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.suture,
                r.side.as_str(),
                r.drives(),
                fmt(last.and_then(|a| a.edge_position_mm), 2),
                fmt(
                    r.attempts.iter().rev().find_map(|a| a.bite_depth_mm),
                    2
                ),
                r.retries,
                if r.unrepaired_miss { "yes" } else { "no" },
                r.interventions
            );
        }
        let _ = writeln!(s, "\n## Phase durations\n");
        let _ = writeln!(s, "| Phase | Seconds |");
        let _ = writeln!(s, "|---|---|");
        for (p, ms) in &self.phase_durations_ms {
            let _ = writeln!(s, "| {p:?} | {:.1} |", *ms as f64 / 1000.0);
        }
        s
    }
}

/// Hooks for live observation, used by serve mode.
#[derive(Default)]
pub struct ProcedureHooks {
    pub on_log: Option<Box<dyn FnMut(&LogEntry) + Send>>,
    pub on_advance: Option<AdvanceHook>,
    pub observer: Option<Box<dyn ProcedureObserver>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub kind: String,
    pub version: u32,
    pub run: usize,
    pub seed: u64,
    pub config: GlobalConfig,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub kind: String,
    pub entries: usize,
    pub state_trace_hash: String,
}

#[derive(Debug)]
pub struct ProcedureOutput {
    pub report: ProcedureReport,
    pub log: Vec<LogEntry>,
    pub meta: LogMeta,
}

impl ProcedureOutput {
    /// Meta line, one line per bus entry, summary line.
    pub fn log_text(&self) -> String {
        let mut out = serde_json::to_string(&self.meta).expect("meta serializes");
        out.push('\n');
        out.push_str(&log_to_jsonl(&self.log));
        let summary = LogSummary {
            kind: "summary".into(),
            entries: self.log.len(),
            state_trace_hash: self.report.state_trace_hash.clone(),
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }
}

struct Runner<'a> {
    bus: Bus<World>,
    cfg: GlobalConfig,
    policy: &'a mut dyn OperatorPolicy,
    state: ProcedureState,
    phase_start: u64,
    intervals: Vec<(Phase, u64, u64)>,
    records: BTreeMap<(usize, Side), SutureRecord>,
    attempt: DriveAttempt,
    interventions: Vec<Intervention>,
    prompt_seq: u64,
    rotations: usize,
    jogs_this_scan: u32,
}

enum Step {
    Continue,
    Abort(String),
}

impl<'a> Runner<'a> {
    fn fire(&mut self, event: Event) -> Result<()> {
        let from = self.state;
        let to = transition(from, event)?;
        let now = self.bus.now();
        self.intervals.push((from.phase, self.phase_start, now));
        self.phase_start = now;
        self.state = to;
        self.bus.record(
            CH_CONTROLLER,
            "transition",
            json!({
                "from": from.phase,
                "to": to.phase,
                "event": event,
                "suture": to.suture,
                "side": to.side,
            }),
        );
        Ok(())
    }

    fn record_entry(&mut self) -> &mut SutureRecord {
        let (suture, side) = (self.state.suture, self.state.side);
        self.records.entry((suture, side)).or_insert_with(|| SutureRecord {
            suture,
            side,
            attempts: Vec::new(),
            retries: 0,
            unrepaired_miss: false,
            interventions: 0,
        })
    }

    fn intervene(&mut self, kind: InterventionKind) {
        let (suture, side, now) = (self.state.suture, self.state.side, self.bus.now());
        self.record_entry().interventions += 1;
        self.interventions.push(Intervention {
            suture,
            side,
            kind,
            logical_time_ms: now,
        });
    }

    fn ask(&mut self, kind: PromptKind) -> Result<OperatorDecision> {
        let prompt = Prompt {
            seq: self.prompt_seq,
            kind,
            suture: self.state.suture,
            side: matches!(kind, PromptKind::RetryMissed | PromptKind::ManualJog).then_some(self.state.side),
            logical_time_ms: self.bus.now(),
        };
        self.prompt_seq += 1;
        self.bus
            .record(CH_PROMPT, "prompt", serde_json::to_value(&prompt).expect("prompt serializes"));
        let decision = self.policy.decide(&prompt)?;
        if !decision.answers(kind) {
            return Err(ControllerError::InvalidDecision { prompt: kind, decision });
        }
        if let OperatorDecision::ManualJog { dx, dy, dz } = decision {
            let mag = (dx * dx + dy * dy + dz * dz).sqrt();
            if !(mag.is_finite() && mag <= self.cfg.controller.max_jog_mm + 1e-12) {
                return Err(ControllerError::Policy(format!(
                    "jog of {mag:.3} mm exceeds the {} mm limit",
                    self.cfg.controller.max_jog_mm
                )));
            }
        }
        self.bus.record(
            CH_DECISION,
            "decision",
            json!({ "prompt_seq": prompt.seq, "decision": decision }),
        );
        Ok(decision)
    }

    /// Calls a device; a dropped connection moves to AwaitReconnect and
    /// returns `None` so the phase is repeated after the reconnect.
    fn device(&mut self, service: &str, request: Value) -> Result<Option<Value>> {
        match self.bus.call(service, request) {
            Ok(v) => Ok(Some(v)),
            Err(BusError::ConnectionLost(_)) => {
                self.fire(Event::ConnectionLost)?;
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn wait(&mut self, ms: u64) {
        let scaled = self.bus.state().scaled(ms);
        let until = self.bus.now() + scaled;
        self.bus.step(until);
    }

    fn site(&self) -> Value {
        json!({ "suture": self.state.suture, "side": self.state.side })
    }

    fn step(&mut self) -> Result<Step> {
        let t = self.cfg.timing;
        match self.state.phase {
            Phase::LoadVessels => {
                self.ask(PromptKind::LoadVessels)?;
                self.fire(Event::VesselsLoaded)?;
            }
            Phase::RotateToStart => {
                if self.device(SVC_ROTATE, json!({ "mode": "home", "increment_deg": 0.0 }))?.is_some() {
                    self.fire(Event::Rotated)?;
                }
            }
            Phase::CaptureBefore => {
                let fresh_side = !self.records.contains_key(&(self.state.suture, self.state.side));
                if fresh_side && self.bus.state().jog_offset_mm != 0.0 {
                    let prev = std::mem::take(&mut self.bus.state_mut().jog_offset_mm);
                    self.bus.record(CH_CONTROLLER, "jog_reset", json!({ "previous_mm": prev }));
                }
                let req = json!({ "suture": self.state.suture, "side": self.state.side, "phase": CapturePhase::Before });
                if self.device(SVC_CAPTURE, req)?.is_some() {
                    self.record_entry();
                    self.attempt = DriveAttempt::new();
                    self.jogs_this_scan = 0;
                    self.fire(Event::Captured)?;
                }
            }
            Phase::EdgeScan => {
                let site = self.site();
                if let Some(v) = self.device(SVC_EDGE_SCAN, site)? {
                    let r: EdgeScanReply = serde_json::from_value(v).map_err(|e| BusError::handler(SVC_EDGE_SCAN, e.to_string()))?;
                    self.attempt.scan_attempts += r.attempts_used;
                    if r.found {
                        self.attempt.edge_position_mm = r.edge_position_mm;
                        self.attempt.transition_material = r.transition_material;
                        self.fire(Event::EdgeFound)?;
                    } else {
                        self.fire(Event::NoEdge)?;
                    }
                }
            }
            Phase::AwaitManualJog => {
                if self.jogs_this_scan >= self.cfg.controller.jog_cap {
                    return Ok(Step::Abort(format!(
                        "no vessel edge after {} manual jogs",
                        self.jogs_this_scan
                    )));
                }
                let decision = self.ask(PromptKind::ManualJog)?;
                self.intervene(InterventionKind::ManualJog);
                self.wait(t.prompt_response_ms);
                let OperatorDecision::ManualJog { dx, dy, dz } = decision else {
                    unreachable!("checked by ask")
                };
                self.bus.call(SVC_JOG, json!({ "dx": dx, "dy": dy, "dz": dz }))?;
                self.jogs_this_scan += 1;
                self.attempt.manual_jogs += 1;
                self.fire(Event::ManualJog)?;
            }
            Phase::PlaceSuture => {
                let edge = self.attempt.edge_position_mm.expect("edge found before placement");
                let offsets = self.bus.state().calibrated;
                let pose = position_from_edge(edge, offsets, self.cfg.controller.bite_depth_target_mm);
                if self.device(SVC_MOVE, serde_json::to_value(pose).expect("pose serializes"))?.is_none() {
                    return Ok(Step::Continue);
                }
                let site = self.site();
                if let Some(v) = self.device(SVC_DRIVE, site)? {
                    let r: DriveReply = serde_json::from_value(v).map_err(|e| BusError::handler(SVC_DRIVE, e.to_string()))?;
                    self.attempt.bite_target_mm = Some(r.bite_target_mm);
                    self.attempt.bite_depth_mm = r.bite_depth_mm;
                    self.attempt.angular_position_deg = r.angular_position_deg;
                    self.attempt.engaged = Some(r.engaged);
                    self.attempt.redundant = r.redundant;
                    self.fire(Event::Placed)?;
                }
            }
            Phase::CaptureAfter => {
                let req = json!({ "suture": self.state.suture, "side": self.state.side, "phase": CapturePhase::After });
                if self.device(SVC_CAPTURE, req)?.is_none() {
                    return Ok(Step::Continue);
                }
                let site = self.site();
                if let Some(v) = self.device(SVC_VISION, site)? {
                    let r: VisionReply = serde_json::from_value(v).map_err(|e| BusError::handler(SVC_VISION, e.to_string()))?;
                    self.attempt.vision = Some(r.verdict);
                    let missed = r.verdict == PairLabel::Missed;
                    if !missed {
                        self.finish_attempt();
                    }
                    self.fire(if missed { Event::VisionMissed } else { Event::VisionSuccess })?;
                }
            }
            Phase::MissedPrompt => {
                let retries = self.record_entry().retries;
                let decision = if retries >= self.cfg.controller.retry_cap {
                    self.bus.record(CH_CONTROLLER, "retry_cap", json!({ "retries": retries }));
                    OperatorDecision::RetryNo
                } else {
                    let d = self.ask(PromptKind::RetryMissed)?;
                    self.intervene(match d {
                        OperatorDecision::RetryYes => InterventionKind::RetryYes,
                        _ => InterventionKind::RetryNo,
                    });
                    self.wait(t.prompt_response_ms);
                    d
                };
                self.attempt.decision = Some(decision);
                self.finish_attempt();
                if decision == OperatorDecision::RetryYes {
                    self.record_entry().retries += 1;
                    self.fire(Event::RetryYes)?;
                } else {
                    self.record_entry().unrepaired_miss = true;
                    self.fire(Event::RetryNo)?;
                }
            }
            Phase::RotateToNext => {
                let inc = self.cfg.controller.rotation_increment_deg;
                if self.device(SVC_ROTATE, json!({ "mode": "increment", "increment_deg": inc }))?.is_some() {
                    self.rotations += 1;
                    self.fire(Event::Rotated)?;
                }
            }
            Phase::AwaitPullAndCut => {
                self.ask(PromptKind::PullAndCut)?;
                self.wait(t.pull_cut_ms);
                self.fire(Event::PullAndCutDone)?;
            }
            Phase::RotateToBeginning => {
                if self
                    .device(SVC_ROTATE, json!({ "mode": "to_beginning", "increment_deg": 0.0 }))?
                    .is_some()
                {
                    self.fire(Event::Rotated)?;
                }
            }
            Phase::AwaitTieOff => {
                self.ask(PromptKind::TieOff)?;
                self.wait(t.tie_off_ms);
                self.fire(Event::TieOffDone)?;
            }
            Phase::AwaitReconnect => {
                while self.bus.is_connected(SVC_MOVE) == Some(false) {
                    match self.bus.next_event_time() {
                        Some(at) => {
                            self.bus.step(at);
                        }
                        None => return Ok(Step::Abort("arm never reconnected".into())),
                    }
                }
                self.fire(Event::Reconnected)?;
            }
            Phase::Done => {}
        }
        Ok(Step::Continue)
    }

    fn finish_attempt(&mut self) {
        let a = std::mem::replace(&mut self.attempt, DriveAttempt::new());
        self.record_entry().attempts.push(a);
    }
}

fn overlap(a: (u64, u64), b: (u64, u64)) -> u64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    hi.saturating_sub(lo)
}

/// Runs one full procedure.
pub fn run_procedure(
    cfg: &GlobalConfig,
    run: usize,
    seed: u64,
    scenario: &Scenario,
    policy: &mut dyn OperatorPolicy,
    hooks: ProcedureHooks,
) -> Result<ProcedureOutput> {
    let mut world = World::new(cfg, seed, scenario)?;
    world.observer = hooks.observer;
    let mut bus = Bus::new(world, cfg.bus);
    if let Some(h) = hooks.on_log {
        bus.set_log_hook(h);
    }
    if let Some(h) = hooks.on_advance {
        bus.set_advance_hook(h);
    }
    register_world(&mut bus);
    let mut faults = scenario.faults.clone();
    faults.sort_unstable();
    faults.dedup();
    for at in faults {
        bus.schedule(at, EV_FAULT, json!({ "at": at }));
    }
    let mut runner = Runner {
        bus,
        cfg: cfg.clone(),
        policy,
        state: ProcedureState::new(cfg.controller.n_sutures),
        phase_start: 0,
        intervals: Vec::new(),
        records: BTreeMap::new(),
        attempt: DriveAttempt::new(),
        interventions: Vec::new(),
        prompt_seq: 0,
        rotations: 0,
        jogs_this_scan: 0,
    };
    let mut outcome = ProcedureOutcome::Completed;
    while runner.state.phase != Phase::Done {
        if let Step::Abort(reason) = runner.step()? {
            runner.bus.record(CH_CONTROLLER, "abort", json!({ "phase": runner.state.phase, "reason": reason }));
            outcome = ProcedureOutcome::Aborted {
                phase: runner.state.phase,
                reason,
            };
            break;
        }
    }
    let end = runner.bus.now();
    runner.intervals.push((runner.state.phase, runner.phase_start, end));
    finish(runner, cfg, run, seed, scenario, outcome, end)
}

fn finish(
    runner: Runner<'_>,
    cfg: &GlobalConfig,
    run: usize,
    seed: u64,
    scenario: &Scenario,
    outcome: ProcedureOutcome,
    end: u64,
) -> Result<ProcedureOutput> {
    let Runner {
        bus,
        intervals,
        records,
        interventions,
        rotations,
        ..
    } = runner;
    let world = bus.state();
    // outages still open at the end are cut at the end
    let outages: Vec<Outage> = world
        .arm
        .outages()
        .iter()
        .filter(|o| o.start_ms < end)
        .map(|o| Outage {
            start_ms: o.start_ms,
            end_ms: o.end_ms.min(end),
        })
        .collect();
    let excluded_ms: u64 = outages.iter().map(Outage::duration_ms).sum();
    let mut phase_durations_ms: BTreeMap<Phase, u64> = BTreeMap::new();
    for (phase, a, b) in intervals {
        let lost: u64 = outages.iter().map(|o| overlap((a, b), (o.start_ms, o.end_ms))).sum();
        *phase_durations_ms.entry(phase).or_default() += (b - a) - lost;
    }
    let total_time_ms = end - excluded_ms;

    let sutures: Vec<SutureRecord> = records.into_values().collect();
    let mut sutures_without_intervention = 0;
    for k in 1..=cfg.controller.n_sutures {
        let touched: u32 = sutures.iter().filter(|r| r.suture == k).map(|r| r.interventions).sum();
        let reached = sutures.iter().any(|r| r.suture == k);
        if reached && touched == 0 {
            sutures_without_intervention += 1;
        }
    }

    let vessel = world.vessel();
    let placements: Vec<(Side, Placement)> = [Side::Right, Side::Left]
        .iter()
        .flat_map(|s| vessel.placements(*s).iter().map(move |p| (*s, *p)))
        .collect();
    let bites: Vec<f64> = placements.iter().map(|(_, p)| p.bite_depth_mm).collect();
    let mut spacings = Vec::new();
    for side in [Side::Right, Side::Left] {
        let p = vessel.placements(side);
        if p.len() >= 2 {
            spacings.extend(crate::metrics::spacings_mm(p, vessel.diameter_mm));
        }
    }
    let lumen = if outcome == ProcedureOutcome::Completed {
        Some(
            cfg.lumen
                .simulate(&bites, &mut named_rng(seed, "lumen"))
                .map_err(|e| ControllerError::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let metrics = RunMetrics {
        bite_mean_mm: (!bites.is_empty()).then(|| mean(&bites)),
        bite_sd_mm: (bites.len() >= 2).then(|| sample_sd(&bites)),
        bite_cov_percent: cov_percent(&bites).ok(),
        spacing_cov_percent: cov_percent(&spacings).ok(),
        time_per_stitch_s: total_time_ms as f64 / 1000.0 / cfg.controller.n_sutures as f64,
        lumen,
    };
    let crossed_stitch = vessel.crossed_stitch(Side::Right) || vessel.crossed_stitch(Side::Left);
    let report = ProcedureReport {
        run,
        seed,
        config_hash: cfg.hash(),
        outcome,
        sutures,
        phase_durations_ms,
        total_time_ms,
        elapsed_ms: end,
        excluded_ms,
        disconnect_count: world.arm.state().disconnect_count,
        outages,
        interventions,
        sutures_without_intervention,
        rotations,
        crossed_stitch,
        placements,
        vessel_diameter_mm: vessel.diameter_mm,
        speed_factor: world.speed_factor(),
        metrics,
        state_trace_hash: bus.log_hash(),
    };
    let meta = LogMeta {
        kind: "meta".into(),
        version: LOG_VERSION,
        run,
        seed,
        config: cfg.clone(),
        scenario: scenario.clone(),
    };
    Ok(ProcedureOutput {
        report,
        log: bus.log().to_vec(),
        meta,
    })
}

/// Per-run seed for Monte-Carlo batches.
pub fn run_seed(master: u64, run: usize) -> u64 {
    derive_named(master, &format!("run-{run}"))
}

/// Independent scripted runs; results are ordered by run index and do not
/// depend on the thread count.
pub fn simulate_runs(cfg: &GlobalConfig, runs: usize, scenario: &Scenario, threads: usize) -> Result<Vec<ProcedureOutput>> {
    let one = |run: usize| -> Result<ProcedureOutput> {
        let seed = run_seed(cfg.seed, run);
        let mut policy = ScriptedPolicy::new(scenario, cfg, seed);
        run_procedure(cfg, run, seed, scenario, &mut policy, ProcedureHooks::default())
    };
    let threads = threads.clamp(1, runs.max(1));
    if threads == 1 {
        return (0..runs).map(one).collect();
    }
    let mut slots: Vec<Option<Result<ProcedureOutput>>> = (0..runs).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let one = &one;
                scope.spawn(move || (t..runs).step_by(threads).map(|r| (r, one(r))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (r, out) in h.join().expect("simulation thread panicked") {
                slots[r] = Some(out);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every run filled")).collect()
}

/// Parsed event-log file.
#[derive(Debug, Clone)]
pub struct LoadedLog {
    pub meta: LogMeta,
    pub entries: Vec<LogEntry>,
    pub summary: LogSummary,
}

pub fn parse_log(text: &str) -> Result<LoadedLog> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| ControllerError::Replay("empty log".into()))?;
    let meta: LogMeta =
        serde_json::from_str(first).map_err(|e| ControllerError::Replay(format!("meta line: {e}")))?;
    if meta.kind != "meta" || meta.version != LOG_VERSION {
        return Err(ControllerError::Replay(format!(
            "unsupported log header kind={} version={}",
            meta.kind, meta.version
        )));
    }
    let rest: Vec<&str> = lines.collect();
    let (last, body) = rest
        .split_last()
        .ok_or_else(|| ControllerError::Replay("log has no summary line".into()))?;
    let summary: LogSummary =
        serde_json::from_str(last).map_err(|e| ControllerError::Replay(format!("summary line: {e}")))?;
    let entries = body
        .iter()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| ControllerError::Replay(format!("entry {}: {e}", i + 1))))
        .collect::<Result<Vec<LogEntry>>>()?;
    Ok(LoadedLog { meta, entries, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayResult {
    pub expected_hash: String,
    pub recorded_hash: String,
    pub replayed_hash: String,
    pub matched: bool,
}

/// Re-executes a logged run with its recorded operator decisions and
/// compares state-trace hashes.
pub fn replay(text: &str) -> Result<ReplayResult> {
    let log = parse_log(text)?;
    let recorded_hash = hash_text(&log_to_jsonl(&log.entries));
    let mut policy = ReplayPolicy::from_log(&log.entries)?;
    let out = run_procedure(
        &log.meta.config,
        log.meta.run,
        log.meta.seed,
        &log.meta.scenario,
        &mut policy,
        ProcedureHooks::default(),
    )?;
    let replayed_hash = out.report.state_trace_hash;
    Ok(ReplayResult {
        matched: replayed_hash == log.summary.state_trace_hash && recorded_hash == log.summary.state_trace_hash,
        expected_hash: log.summary.state_trace_hash,
        recorded_hash,
        replayed_hash,
    })
}

/// A config with device noise, misses, false alarms and timing spread
/// switched off.
pub fn perfect_config(base: &GlobalConfig) -> GlobalConfig {
    let mut cfg = base.clone();
    cfg.devices.maps = crate::devices::MapsConfig::noiseless();
    cfg.devices.needle.miss_probability = 0.0;
    cfg.devices.needle.bite_noise_mean_mm = 0.0;
    cfg.devices.needle.bite_noise_sd_mm = 0.0;
    cfg.devices.needle.angle_noise_sd_deg = 0.0;
    cfg.devices.slip.axial_mm_per_n = 0.0;
    cfg.devices.slip.tangential_mm_per_n = 0.0;
    cfg.devices.calibration.reading_noise_sd_mm = 0.0;
    cfg.timing.speed_factor_sd = 0.0;
    cfg.vision.mode = VisionMode::Simulated {
        recall: 1.0,
        false_alarm_rate: 0.0,
    };
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(phase: Phase, suture: usize, side: Side) -> ProcedureState {
        ProcedureState {
            phase,
            suture,
            side,
            n_sutures: 8,
            resume: None,
        }
    }

    #[test]
    fn success_on_right_moves_to_left() {
        let s = transition(st(Phase::CaptureAfter, 3, Side::Right), Event::VisionSuccess).unwrap();
        assert_eq!((s.phase, s.suture, s.side), (Phase::CaptureBefore, 3, Side::Left));
        let s = transition(st(Phase::CaptureAfter, 3, Side::Left), Event::VisionSuccess).unwrap();
        assert_eq!(s.phase, Phase::RotateToNext);
    }

    #[test]
    fn retry_no_proceeds_and_retry_yes_repeats() {
        let s = transition(st(Phase::MissedPrompt, 2, Side::Right), Event::RetryNo).unwrap();
        assert_eq!((s.phase, s.side), (Phase::CaptureBefore, Side::Left));
        let s = transition(st(Phase::MissedPrompt, 2, Side::Left), Event::RetryYes).unwrap();
        assert_eq!((s.phase, s.suture, s.side), (Phase::CaptureBefore, 2, Side::Left));
    }

    #[test]
    fn illegal_event_is_rejected() {
        let before = st(Phase::EdgeScan, 1, Side::Right);
        match transition(before, Event::PullAndCutDone) {
            Err(ControllerError::IllegalTransition { phase, event }) => {
                assert_eq!(phase, Phase::EdgeScan);
                assert_eq!(event, Event::PullAndCutDone);
            }
            other => panic!("expected illegal transition, got {other:?}"),
        }
        assert!(transition(st(Phase::AwaitTieOff, 8, Side::Left), Event::ConnectionLost).is_err());
    }

    #[test]
    fn last_suture_goes_to_tie_off() {
        let s = transition(st(Phase::AwaitPullAndCut, 7, Side::Left), Event::PullAndCutDone).unwrap();
        assert_eq!((s.phase, s.suture, s.side), (Phase::CaptureBefore, 8, Side::Right));
        let s = transition(st(Phase::AwaitPullAndCut, 8, Side::Left), Event::PullAndCutDone).unwrap();
        assert_eq!(s.phase, Phase::RotateToBeginning);
        let s = transition(s.at(Phase::RotateToBeginning), Event::Rotated).unwrap();
        let s = transition(s, Event::TieOffDone).unwrap();
        assert_eq!(s.phase, Phase::Done);
    }

    #[test]
    fn reconnect_resumes_interrupted_phase() {
        let s = transition(st(Phase::PlaceSuture, 4, Side::Left), Event::ConnectionLost).unwrap();
        assert_eq!((s.phase, s.resume), (Phase::AwaitReconnect, Some(Phase::PlaceSuture)));
        let s = transition(s, Event::Reconnected).unwrap();
        assert_eq!((s.phase, s.suture, s.side, s.resume), (Phase::PlaceSuture, 4, Side::Left, None));
    }

    #[test]
    fn position_from_edge_examples() {
        let zero = CalibrationOffsets::default();
        assert!((position_from_edge(2.0, zero, 1.5).x - 0.5).abs() < 1e-12);
        assert_eq!(position_from_edge(2.0, zero, 0.0).x, 2.0);
        let off = CalibrationOffsets {
            x_offset_mm: 1.0,
            ..zero
        };
        assert!((position_from_edge(2.0, off, 1.5).x - 1.5).abs() < 1e-12);
    }

    #[test]
    fn decision_kinds_match_prompts() {
        assert!(OperatorDecision::RetryYes.answers(PromptKind::RetryMissed));
        assert!(!OperatorDecision::RetryYes.answers(PromptKind::ManualJog));
        assert!(OperatorDecision::ManualJog { dx: 0.5, dy: 0.0, dz: 0.0 }.answers(PromptKind::ManualJog));
        assert!(!OperatorDecision::TieOffDone.answers(PromptKind::PullAndCut));
    }

    #[test]
    fn decimate_keeps_ends() {
        let x: Vec<f64> = (0..1000).map(f64::from).collect();
        let d = decimate(&x, 512);
        assert_eq!(d.len(), 512);
        assert_eq!((d[0], d[511]), (0.0, 999.0));
        assert_eq!(decimate(&x[..10], 512).len(), 10);
    }

    #[test]
    fn overlap_of_intervals() {
        assert_eq!(overlap((0, 10), (5, 20)), 5);
        assert_eq!(overlap((0, 10), (10, 20)), 0);
        assert_eq!(overlap((3, 4), (0, 20)), 1);
    }
}
