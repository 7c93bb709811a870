//! Simulated devices: robotic arm with calibration offsets and connection
//! faults, MAPS rotator, vessel geometry with slip, needle driver and the
//! tool microcamera.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive, rng_from, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("connection lost to {0}")]
    ConnectionLost(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
}

pub type Result<T> = std::result::Result<T, DeviceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Right,
    Left,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Right => 0,
            Side::Left => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Right => "right",
            Side::Left => "left",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Orientation of the lateral scan axis in the tool plane.
    pub scan_axis_deg: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            scan_axis_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationOffsets {
    pub x_offset_mm: f64,
    pub y_offset_mm: f64,
    pub z_offset_mm: f64,
}

impl CalibrationOffsets {
    pub fn apply(&self, p: Pose) -> Pose {
        Pose {
            x: p.x + self.x_offset_mm,
            y: p.y + self.y_offset_mm,
            z: p.z + self.z_offset_mm,
            scan_axis_deg: p.scan_axis_deg,
        }
    }
}

/// z offset from the flush-contact OCT distance, x/y from the jog needed
/// to bring the needle puncture under the fiber.
pub fn calibrate(flush_distance_reading_mm: f64, puncture_jog_mm: (f64, f64)) -> Result<CalibrationOffsets> {
    let (dx, dy) = puncture_jog_mm;
    if ![flush_distance_reading_mm, dx, dy].iter().all(|v| v.is_finite()) {
        return Err(DeviceError::InvalidArgument("calibration readings must be finite".into()));
    }
    if flush_distance_reading_mm < 0.0 {
        return Err(DeviceError::InvalidArgument(format!(
            "flush distance {flush_distance_reading_mm} mm is negative"
        )));
    }
    Ok(CalibrationOffsets {
        x_offset_mm: dx,
        y_offset_mm: dy,
        z_offset_mm: flush_distance_reading_mm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub pose: Pose,
    pub connected: bool,
    pub disconnect_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    /// Time from a dropped connection until it is re-established.
    pub reconnect_delay_ms: u64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            reconnect_delay_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outage {
    pub start_ms: u64,
    pub end_ms: u64,
}

impl Outage {
    pub fn duration_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }
}

#[derive(Debug, Clone)]
pub struct Arm {
    state: ArmState,
    offsets: CalibrationOffsets,
    config: ArmConfig,
    pending_faults: Vec<u64>,
    outages: Vec<Outage>,
    reconnect_at: Option<u64>,
}

impl Arm {
    pub fn new(offsets: CalibrationOffsets, config: ArmConfig) -> Self {
        Self {
            state: ArmState {
                pose: Pose::default(),
                connected: true,
                disconnect_count: 0,
            },
            offsets,
            config,
            pending_faults: Vec::new(),
            outages: Vec::new(),
            reconnect_at: None,
        }
    }

    pub fn state(&self) -> ArmState {
        self.state
    }

    pub fn offsets(&self) -> CalibrationOffsets {
        self.offsets
    }

    pub fn config(&self) -> ArmConfig {
        self.config
    }

    /// Schedules connection drops at the given simulation times.
    pub fn fault_schedule(&mut self, disconnect_times_ms: &[u64]) {
        self.pending_faults.extend_from_slice(disconnect_times_ms);
        self.pending_faults.sort_unstable();
    }

    pub fn scheduled_faults(&self) -> &[u64] {
        &self.pending_faults
    }

    /// Applies scheduled drops and reconnects up to `now_ms`. A drop that
    /// lands while already disconnected is absorbed by the open outage.
    pub fn advance_to(&mut self, now_ms: u64) {
        loop {
            let next_fault = self.pending_faults.first().copied().filter(|t| *t <= now_ms);
            let next_reconnect = self.reconnect_at.filter(|t| *t <= now_ms);
            match (next_fault, next_reconnect) {
                (Some(f), Some(r)) if r <= f => self.finish_reconnect(r),
                (Some(f), _) => {
                    self.pending_faults.remove(0);
                    if self.state.connected {
                        self.state.connected = false;
                        self.state.disconnect_count += 1;
                        self.reconnect_at = Some(f + self.config.reconnect_delay_ms);
                        self.outages.push(Outage {
                            start_ms: f,
                            end_ms: f + self.config.reconnect_delay_ms,
                        });
                    }
                }
                (None, Some(r)) => self.finish_reconnect(r),
                (None, None) => break,
            }
        }
    }

    fn finish_reconnect(&mut self, _at: u64) {
        self.state.connected = true;
        self.reconnect_at = None;
    }

    /// When the current outage ends, if disconnected.
    pub fn reconnect_due(&self) -> Option<u64> {
        self.reconnect_at
    }

    /// Moves to `target` plus the calibration offsets.
    pub fn move_to(&mut self, target: Pose) -> Result<ArmState> {
        if !self.state.connected {
            return Err(DeviceError::ConnectionLost("arm".into()));
        }
        self.state.pose = self.offsets.apply(target);
        Ok(self.state)
    }

    pub fn outages(&self) -> &[Outage] {
        &self.outages
    }

    /// Total disconnected time, to be excluded from procedure timing.
    pub fn excluded_ms(&self) -> u64 {
        self.outages.iter().map(Outage::duration_ms).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotateTarget {
    Left,
    Right,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapsConfig {
    pub left_noise_sd_deg: f64,
    pub right_noise_sd_deg: f64,
    /// Bias per 45 degree step.
    pub left_mean_offset_deg: f64,
    pub right_mean_offset_deg: f64,
    pub grip_force_n: f64,
}

impl Default for MapsConfig {
    fn default() -> Self {
        Self {
            left_noise_sd_deg: 2.8,
            right_noise_sd_deg: 2.2,
            left_mean_offset_deg: -0.1,
            right_mean_offset_deg: 0.3,
            grip_force_n: 0.24,
        }
    }
}

impl MapsConfig {
    pub fn noiseless() -> Self {
        Self {
            left_noise_sd_deg: 0.0,
            right_noise_sd_deg: 0.0,
            left_mean_offset_deg: 0.0,
            right_mean_offset_deg: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapsState {
    pub left_angle_deg: f64,
    pub right_angle_deg: f64,
    pub left_noise_sd_deg: f64,
    pub right_noise_sd_deg: f64,
    pub grip_force_n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub left_deg: Option<f64>,
    pub right_deg: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Maps {
    config: MapsConfig,
    // unwrapped angles; the state view reports them modulo 360
    left_total_deg: f64,
    right_total_deg: f64,
    commanded_deg: f64,
}

pub fn wrap_deg(a: f64) -> f64 {
    a.rem_euclid(360.0)
}

impl Maps {
    pub fn new(config: MapsConfig) -> Result<Self> {
        if !(config.left_noise_sd_deg >= 0.0 && config.right_noise_sd_deg >= 0.0) {
            return Err(DeviceError::InvalidArgument("rotation noise SDs must be >= 0".into()));
        }
        if !(config.grip_force_n > 0.0) {
            return Err(DeviceError::InvalidArgument("grip force must be > 0".into()));
        }
        Ok(Self {
            config,
            left_total_deg: 0.0,
            right_total_deg: 0.0,
            commanded_deg: 0.0,
        })
    }

    pub fn config(&self) -> &MapsConfig {
        &self.config
    }

    pub fn state(&self) -> MapsState {
        MapsState {
            left_angle_deg: wrap_deg(self.left_total_deg),
            right_angle_deg: wrap_deg(self.right_total_deg),
            left_noise_sd_deg: self.config.left_noise_sd_deg,
            right_noise_sd_deg: self.config.right_noise_sd_deg,
            grip_force_n: self.config.grip_force_n,
        }
    }

    /// Unwrapped holder angle for `side`.
    pub fn total_angle(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.left_total_deg,
            Side::Right => self.right_total_deg,
        }
    }

    /// Sum of commanded increments since start; rotating by its negation
    /// returns the holders to the beginning.
    pub fn commanded_deg(&self) -> f64 {
        self.commanded_deg
    }

    fn achieved(increment: f64, sd: f64, bias_per_step: f64, rng: &mut SimRng) -> f64 {
        let noise = if sd > 0.0 {
            Normal::new(0.0, sd).expect("sd checked").sample(rng)
        } else {
            0.0
        };
        increment + bias_per_step * (increment / 45.0) + noise
    }

    /// Rotates one or both holders. Each side draws its own noise.
    pub fn rotate(&mut self, target: RotateTarget, increment_deg: f64, rng: &mut SimRng) -> Result<Rotation> {
        if !increment_deg.is_finite() || (increment_deg / 45.0).fract().abs() > 1e-9 {
            return Err(DeviceError::InvalidArgument(format!(
                "increment {increment_deg} is not a multiple of 45 degrees"
            )));
        }
        let mut out = Rotation {
            left_deg: None,
            right_deg: None,
        };
        // right drawn before left for a stable stream order
        if matches!(target, RotateTarget::Right | RotateTarget::Both) {
            let a = Self::achieved(
                increment_deg,
                self.config.right_noise_sd_deg,
                self.config.right_mean_offset_deg,
                rng,
            );
            self.right_total_deg += a;
            out.right_deg = Some(a);
        }
        if matches!(target, RotateTarget::Left | RotateTarget::Both) {
            let a = Self::achieved(
                increment_deg,
                self.config.left_noise_sd_deg,
                self.config.left_mean_offset_deg,
                rng,
            );
            self.left_total_deg += a;
            out.left_deg = Some(a);
        }
        if target == RotateTarget::Both {
            self.commanded_deg += increment_deg;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlipConfig {
    /// Axial slip per newton of force above grip.
    pub axial_mm_per_n: f64,
    /// Tangential (circumferential) slip per newton above grip.
    pub tangential_mm_per_n: f64,
}

impl Default for SlipConfig {
    fn default() -> Self {
        Self {
            axial_mm_per_n: 5.0,
            tangential_mm_per_n: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlipState {
    pub axial_mm: f64,
    pub angular_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub site: usize,
    pub bite_depth_mm: f64,
    pub angular_position_deg: f64,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VesselConfig {
    pub diameter_mm: f64,
    pub wall_thickness_mm: f64,
    pub n_sites: usize,
}

impl Default for VesselConfig {
    fn default() -> Self {
        Self {
            diameter_mm: 4.5,
            wall_thickness_mm: 1.0,
            n_sites: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselModel {
    pub diameter_mm: f64,
    pub wall_thickness_mm: f64,
    pub n_sites: usize,
    pub site_angles_deg: Vec<f64>,
    /// Indexed by [`Side::index`].
    pub placements: [Vec<Placement>; 2],
    pub slip_state: [SlipState; 2],
}

impl VesselModel {
    pub fn new(config: VesselConfig) -> Result<Self> {
        if !(config.diameter_mm > 0.0) {
            return Err(DeviceError::InvalidArgument("diameter must be > 0".into()));
        }
        if !(config.wall_thickness_mm > 0.0 && config.wall_thickness_mm < config.diameter_mm / 2.0) {
            return Err(DeviceError::InvalidArgument(format!(
                "wall thickness {} must be in (0, diameter/2)",
                config.wall_thickness_mm
            )));
        }
        if config.n_sites < 2 {
            return Err(DeviceError::InvalidArgument("need at least 2 suture sites".into()));
        }
        let pitch = 360.0 / config.n_sites as f64;
        Ok(Self {
            diameter_mm: config.diameter_mm,
            wall_thickness_mm: config.wall_thickness_mm,
            n_sites: config.n_sites,
            site_angles_deg: (0..config.n_sites).map(|i| i as f64 * pitch).collect(),
            placements: [Vec::new(), Vec::new()],
            slip_state: [SlipState::default(); 2],
        })
    }

    pub fn radius_mm(&self) -> f64 {
        self.diameter_mm / 2.0
    }

    pub fn pitch_deg(&self) -> f64 {
        360.0 / self.n_sites as f64
    }

    pub fn placements(&self, side: Side) -> &[Placement] {
        &self.placements[side.index()]
    }

    pub fn slip(&self, side: Side) -> SlipState {
        self.slip_state[side.index()]
    }

    pub fn is_sutured(&self, side: Side, site: usize) -> bool {
        self.placements[side.index()].iter().any(|p| p.site == site)
    }

    fn check_site(&self, site: usize) -> Result<()> {
        if site >= self.n_sites {
            return Err(DeviceError::InvalidArgument(format!(
                "site {site} out of range 0..{}",
                self.n_sites
            )));
        }
        Ok(())
    }

    /// Linear slip above the grip threshold. Tangential slip is converted
    /// to an angle through the vessel radius and shifts later sites.
    pub fn apply_forces(
        &mut self,
        side: Side,
        tangential_n: f64,
        axial_n: f64,
        grip_force_n: f64,
        slip: &SlipConfig,
    ) -> Result<SlipState> {
        if !(tangential_n >= 0.0 && axial_n >= 0.0) {
            return Err(DeviceError::InvalidArgument("forces must be >= 0".into()));
        }
        let axial_mm = if axial_n > grip_force_n {
            slip.axial_mm_per_n * (axial_n - grip_force_n)
        } else {
            0.0
        };
        let tangential_mm = if tangential_n > grip_force_n {
            slip.tangential_mm_per_n * (tangential_n - grip_force_n)
        } else {
            0.0
        };
        let delta = SlipState {
            axial_mm,
            angular_deg: (tangential_mm / self.radius_mm()).to_degrees(),
        };
        let s = &mut self.slip_state[side.index()];
        s.axial_mm += delta.axial_mm;
        s.angular_deg += delta.angular_deg;
        Ok(delta)
    }

    /// Final stitch overlaps the first: the wraparound gap between the last
    /// and first placement is under half a pitch.
    pub fn crossed_stitch(&self, side: Side) -> bool {
        let p = &self.placements[side.index()];
        let (Some(first), Some(last)) = (p.iter().min_by_key(|x| x.site), p.iter().max_by_key(|x| x.site)) else {
            return false;
        };
        if p.len() < self.n_sites {
            return false;
        }
        let gap = wrap_deg(first.angular_position_deg - last.angular_position_deg);
        gap < self.pitch_deg() / 2.0
    }

    /// Arc length between two angles on the outer circumference.
    pub fn arc_mm(&self, delta_deg: f64) -> f64 {
        PI * self.diameter_mm * delta_deg / 360.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleConfig {
    pub miss_probability: f64,
    pub bite_target_mm: f64,
    pub bite_noise_mean_mm: f64,
    pub bite_noise_sd_mm: f64,
    /// Circumferential placement scatter.
    pub angle_noise_sd_deg: f64,
    pub tangential_force_n: (f64, f64),
    pub axial_force_n: (f64, f64),
    pub puncture_force_n: f64,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        Self {
            miss_probability: 0.052,
            bite_target_mm: 1.5,
            bite_noise_mean_mm: 0.03,
            bite_noise_sd_mm: 0.205,
            angle_noise_sd_deg: 9.0,
            tangential_force_n: (0.1, 0.5),
            axial_force_n: (0.05, 0.3),
            puncture_force_n: 0.80,
        }
    }
}

impl NeedleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_probability) {
            return Err(DeviceError::InvalidArgument("miss_probability must be in [0,1]".into()));
        }
        if !(self.bite_noise_sd_mm >= 0.0 && self.angle_noise_sd_deg >= 0.0) {
            return Err(DeviceError::InvalidArgument("noise SDs must be >= 0".into()));
        }
        for (lo, hi) in [self.tangential_force_n, self.axial_force_n] {
            if !(lo >= 0.0 && lo <= hi && hi <= self.puncture_force_n) {
                return Err(DeviceError::InvalidArgument(format!(
                    "force range [{lo}, {hi}] must lie within [0, puncture force]"
                )));
            }
        }
        Ok(())
    }
}

/// Where the needle will enter, relative to the true vessel edge, as set up
/// by the arm positioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveTarget {
    pub bite_depth_mm: f64,
    pub angular_position_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeedleDriveOutcome {
    pub engaged: bool,
    pub applied_tangential_force_n: f64,
    pub applied_axial_force_n: f64,
    pub bite_depth_actual_mm: f64,
    pub slip: SlipState,
}

fn uniform(rng: &mut SimRng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Drives the needle at `site` on `side`. Forces are drawn first and may
/// slip the vessel; axial slip during the drive adds to the bite.
pub fn needle_drive(
    vessel: &mut VesselModel,
    site: usize,
    side: Side,
    target: DriveTarget,
    needle: &NeedleConfig,
    grip_force_n: f64,
    slip: &SlipConfig,
    rng: &mut SimRng,
) -> Result<NeedleDriveOutcome> {
    vessel.check_site(site)?;
    if vessel.is_sutured(side, site) {
        return Err(DeviceError::InvalidState(format!(
            "site {site} on the {} vessel is already sutured",
            side.as_str()
        )));
    }
    let tangential = uniform(rng, needle.tangential_force_n);
    let axial = uniform(rng, needle.axial_force_n);
    let delta = vessel.apply_forces(side, tangential, axial, grip_force_n, slip)?;
    let engaged = rng.random::<f64>() >= needle.miss_probability;
    let bite_noise = if needle.bite_noise_sd_mm > 0.0 {
        Normal::new(needle.bite_noise_mean_mm, needle.bite_noise_sd_mm)
            .expect("sd checked")
            .sample(rng)
    } else {
        needle.bite_noise_mean_mm
    };
    let angle_noise = if needle.angle_noise_sd_deg > 0.0 {
        Normal::new(0.0, needle.angle_noise_sd_deg).expect("sd checked").sample(rng)
    } else {
        0.0
    };
    let bite = (target.bite_depth_mm + bite_noise + delta.axial_mm).max(0.0);
    if engaged {
        let s = vessel.slip(side);
        vessel.placements[side.index()].push(Placement {
            site,
            bite_depth_mm: bite,
            angular_position_deg: wrap_deg(target.angular_position_deg + s.angular_deg + angle_noise),
            success: true,
        });
    }
    Ok(NeedleDriveOutcome {
        engaged,
        applied_tangential_force_n: tangential,
        applied_axial_force_n: axial,
        bite_depth_actual_mm: if engaged { bite } else { 0.0 },
        slip: delta,
    })
}

pub const FRAME_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapturePhase {
    Before,
    After,
}

/// Straight thread segment in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreadSegment {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub half_width: f64,
}

/// Ground truth for a rendered frame; never shown to the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub site: usize,
    pub side: Side,
    pub phase: CapturePhase,
    pub thread: Option<ThreadSegment>,
}

impl FrameAnnotation {
    /// The thread is visible iff a segment was rendered with at least one
    /// endpoint inside the frame.
    pub fn thread_visible(&self, width: usize, height: usize) -> bool {
        self.thread.is_some_and(|t| {
            let inside = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64;
            inside(t.x0, t.y0) || inside(t.x1, t.y1)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub annotation: FrameAnnotation,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, annotation: FrameAnnotation) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(DeviceError::InvalidArgument(format!(
                "{} pixels for a {width}x{height} frame",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels: pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect(),
            annotation,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub pixel_noise_sd: f64,
    /// Intensity drop along the thread core.
    pub thread_contrast: f64,
    pub thread_half_width_px: f64,
    /// Frame-to-frame brightness flicker.
    pub brightness_jitter: f64,
    /// Frame-to-frame camera shift in pixels.
    pub shift_jitter_px: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            pixel_noise_sd: 0.10,
            thread_contrast: 0.28,
            thread_half_width_px: 1.0,
            brightness_jitter: 0.04,
            shift_jitter_px: 0.7,
        }
    }
}

impl CameraConfig {
    pub fn noiseless() -> Self {
        Self {
            pixel_noise_sd: 0.0,
            brightness_jitter: 0.0,
            shift_jitter_px: 0.0,
            ..Self::default()
        }
    }
}

/// Scene layout for one site; shared by its before and after frames.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SiteLayout {
    edge_col: f64,
    edge_tilt: f64,
    tissue_level: f64,
    holder_row: f64,
    thread_angle: f64,
    thread_offset: f64,
}

fn site_layout(scene_seed: u64, site: usize, side: Side, angular_slip_deg: f64) -> SiteLayout {
    let mut rng = rng_from(derive(scene_seed, (site as u64) << 1 | side.index() as u64));
    SiteLayout {
        // slip rotates the vessel edge across the field of view
        edge_col: rng.random_range(22.0..42.0) + angular_slip_deg * 0.5,
        edge_tilt: rng.random_range(-0.25..0.25),
        tissue_level: rng.random_range(0.40..0.60),
        holder_row: rng.random_range(48.0..56.0),
        thread_angle: rng.random_range(-0.6..0.6),
        thread_offset: rng.random_range(-8.0..8.0),
    }
}

fn segment_distance(px: f64, py: f64, t: &ThreadSegment) -> f64 {
    let (dx, dy) = (t.x1 - t.x0, t.y1 - t.y0);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 {
        (((px - t.x0) * dx + (py - t.y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (t.x0 + u * dx, t.y0 + u * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders the suture site: dark background, tissue on one side of a soft
/// vessel edge, a bright holder band, and in `After` frames of an engaged
/// drive a dark thread crossing the edge. Pixel noise is additive.
pub fn camera_capture(
    vessel: &VesselModel,
    site: usize,
    side: Side,
    phase: CapturePhase,
    last_outcome: Option<&NeedleDriveOutcome>,
    scene_seed: u64,
    camera: &CameraConfig,
    rng: &mut SimRng,
) -> Result<Frame> {
    vessel.check_site(site)?;
    let layout = site_layout(scene_seed, site, side, vessel.slip(side).angular_deg);
    let shift_x = camera.shift_jitter_px * rng.random_range(-1.0..=1.0);
    let shift_y = camera.shift_jitter_px * rng.random_range(-1.0..=1.0);
    let brightness = camera.brightness_jitter * rng.random_range(-1.0..=1.0);
    let thread = match (phase, last_outcome) {
        (CapturePhase::After, Some(o)) if o.engaged => {
            let cx = layout.edge_col + layout.thread_offset * 0.3;
            let cy = 30.0 + layout.thread_offset;
            let (s, c) = layout.thread_angle.sin_cos();
            let half_len = 14.0;
            Some(ThreadSegment {
                x0: cx - c * half_len + shift_x,
                y0: cy - s * half_len + shift_y,
                x1: cx + c * half_len + shift_x,
                y1: cy + s * half_len + shift_y,
                half_width: camera.thread_half_width_px,
            })
        }
        _ => None,
    };
    let noise = Normal::new(0.0, camera.pixel_noise_sd.max(0.0)).expect("sd >= 0");
    let mut pixels = Vec::with_capacity(FRAME_SIZE * FRAME_SIZE);
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let (fx, fy) = (x as f64 - shift_x, y as f64 - shift_y);
            let edge = layout.edge_col + layout.edge_tilt * (fy - 32.0);
            let tissue = 1.0 / (1.0 + (-(fx - edge) / 1.5).exp());
            let mut v = 0.12 + (layout.tissue_level - 0.12) * tissue;
            let band = ((fy - layout.holder_row) / 2.5).powi(2);
            v += 0.4 * (-band).exp();
            if let Some(t) = &thread {
                let d = segment_distance(x as f64, y as f64, t);
                let core = (-(d / t.half_width.max(0.1)).powi(2)).exp();
                v -= camera.thread_contrast * core;
            }
            v += brightness;
            if camera.pixel_noise_sd > 0.0 {
                v += noise.sample(rng);
            }
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Frame::new(
        FRAME_SIZE,
        FRAME_SIZE,
        pixels,
        FrameAnnotation {
            site,
            side,
            phase,
            thread,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> SimRng {
        rng_from(seed)
    }

    #[test]
    fn arm_applies_offsets() {
        let p = Pose::new(1.0, 2.0, 3.0);
        let mut arm = Arm::new(CalibrationOffsets::default(), ArmConfig::default());
        assert_eq!(arm.move_to(p).unwrap().pose, p);
        let off = CalibrationOffsets {
            x_offset_mm: 1.0,
            y_offset_mm: 2.0,
            z_offset_mm: 3.0,
        };
        let mut arm = Arm::new(off, ArmConfig::default());
        assert_eq!(arm.move_to(p).unwrap().pose, Pose::new(2.0, 4.0, 6.0));
    }

    #[test]
    fn arm_rejects_motion_while_disconnected() {
        let mut arm = Arm::new(CalibrationOffsets::default(), ArmConfig { reconnect_delay_ms: 100 });
        arm.fault_schedule(&[10]);
        arm.advance_to(50);
        assert!(!arm.state().connected);
        assert_eq!(arm.move_to(Pose::default()), Err(DeviceError::ConnectionLost("arm".into())));
        arm.advance_to(110);
        assert!(arm.state().connected);
        assert!(arm.move_to(Pose::default()).is_ok());
    }

    #[test]
    fn idle_faults_only_toggle_connectivity() {
        let mut arm = Arm::new(CalibrationOffsets::default(), ArmConfig { reconnect_delay_ms: 20 });
        arm.fault_schedule(&[100, 200, 300, 400, 500]);
        arm.advance_to(10_000);
        let s = arm.state();
        assert!(s.connected);
        assert_eq!(s.disconnect_count, 5);
        assert_eq!(arm.excluded_ms(), 100);
        let empty = Arm::new(CalibrationOffsets::default(), ArmConfig::default());
        assert_eq!(empty.excluded_ms(), 0);
    }

    #[test]
    fn overlapping_fault_is_absorbed() {
        let mut arm = Arm::new(CalibrationOffsets::default(), ArmConfig { reconnect_delay_ms: 100 });
        arm.fault_schedule(&[10, 50]);
        arm.advance_to(1000);
        assert_eq!(arm.state().disconnect_count, 1);
        assert_eq!(arm.excluded_ms(), 100);
    }

    #[test]
    fn calibration_assigns_directly() {
        let c = calibrate(12.0, (1.5, -0.8)).unwrap();
        assert_eq!((c.x_offset_mm, c.y_offset_mm, c.z_offset_mm), (1.5, -0.8, 12.0));
        let c = calibrate(3.0, (0.0, 0.0)).unwrap();
        assert_eq!((c.x_offset_mm, c.y_offset_mm), (0.0, 0.0));
        assert!(calibrate(-1.0, (0.0, 0.0)).is_err());
    }

    #[test]
    fn noiseless_rotation_is_exact_and_tandem() {
        let mut maps = Maps::new(MapsConfig::noiseless()).unwrap();
        let mut r = rng(1);
        for _ in 0..8 {
            let rot = maps.rotate(RotateTarget::Both, 45.0, &mut r).unwrap();
            assert_eq!(rot.left_deg, Some(45.0));
            assert_eq!(rot.right_deg, Some(45.0));
        }
        let s = maps.state();
        assert_eq!(s.left_angle_deg, s.right_angle_deg);
        assert_eq!(maps.commanded_deg(), 360.0);
        assert!(maps.rotate(RotateTarget::Left, 30.0, &mut r).is_err());
    }

    #[test]
    fn slip_threshold() {
        let mut v = VesselModel::new(VesselConfig::default()).unwrap();
        let slip = SlipConfig::default();
        let d = v.apply_forces(Side::Right, 0.0, 0.20, 0.24, &slip).unwrap();
        assert_eq!(d.axial_mm, 0.0);
        let d = v.apply_forces(Side::Right, 0.0, 0.44, 0.24, &slip).unwrap();
        assert!((d.axial_mm - 1.0).abs() < 1e-12);
        let d = v.apply_forces(Side::Left, 0.24, 0.24, 0.24, &slip).unwrap();
        assert_eq!(d, SlipState::default());
        assert!(v.apply_forces(Side::Left, -0.1, 0.0, 0.24, &slip).is_err());
    }

    #[test]
    fn clean_drive_places_target_bite() {
        let mut v = VesselModel::new(VesselConfig::default()).unwrap();
        let needle = NeedleConfig {
            miss_probability: 0.0,
            bite_noise_mean_mm: 0.0,
            bite_noise_sd_mm: 0.0,
            angle_noise_sd_deg: 0.0,
            tangential_force_n: (0.1, 0.2),
            axial_force_n: (0.05, 0.2),
            ..Default::default()
        };
        let target = DriveTarget {
            bite_depth_mm: 1.5,
            angular_position_deg: 0.0,
        };
        let o = needle_drive(&mut v, 0, Side::Right, target, &needle, 0.24, &SlipConfig::default(), &mut rng(2)).unwrap();
        assert!(o.engaged);
        assert_eq!(o.bite_depth_actual_mm, 1.5);
        assert_eq!(v.placements(Side::Right).len(), 1);
        let again = needle_drive(&mut v, 0, Side::Right, target, &needle, 0.24, &SlipConfig::default(), &mut rng(3));
        assert!(matches!(again, Err(DeviceError::InvalidState(_))));
    }

    #[test]
    fn forced_miss_records_nothing() {
        let mut v = VesselModel::new(VesselConfig::default()).unwrap();
        let needle = NeedleConfig {
            miss_probability: 1.0,
            ..Default::default()
        };
        let target = DriveTarget {
            bite_depth_mm: 1.5,
            angular_position_deg: 0.0,
        };
        let o = needle_drive(&mut v, 3, Side::Left, target, &needle, 0.24, &SlipConfig::default(), &mut rng(4)).unwrap();
        assert!(!o.engaged);
        assert!(v.placements(Side::Left).is_empty());
    }

    #[test]
    fn crossed_stitch_from_accumulated_slip() {
        let mut v = VesselModel::new(VesselConfig::default()).unwrap();
        for site in 0..8 {
            // slip pushes each placement 4 degrees further than the last
            let angle = site as f64 * 45.0 + site as f64 * 4.0;
            v.placements[0].push(Placement {
                site,
                bite_depth_mm: 1.5,
                angular_position_deg: wrap_deg(angle),
                success: true,
            });
        }
        // final at 343 deg, gap to first 17 < 22.5
        assert!(v.crossed_stitch(Side::Right));
        assert!(!v.crossed_stitch(Side::Left));
    }

    #[test]
    fn camera_renders_thread_only_after_engagement() {
        let v = VesselModel::new(VesselConfig::default()).unwrap();
        let cam = CameraConfig::noiseless();
        let engaged = NeedleDriveOutcome {
            engaged: true,
            applied_tangential_force_n: 0.1,
            applied_axial_force_n: 0.1,
            bite_depth_actual_mm: 1.5,
            slip: SlipState::default(),
        };
        let missed = NeedleDriveOutcome {
            engaged: false,
            ..engaged
        };
        let before = camera_capture(&v, 2, Side::Right, CapturePhase::Before, None, 9, &cam, &mut rng(1)).unwrap();
        let after_ok = camera_capture(&v, 2, Side::Right, CapturePhase::After, Some(&engaged), 9, &cam, &mut rng(2)).unwrap();
        let after_miss = camera_capture(&v, 2, Side::Right, CapturePhase::After, Some(&missed), 9, &cam, &mut rng(3)).unwrap();
        assert!(after_ok.annotation.thread_visible(64, 64));
        assert!(!after_miss.annotation.thread_visible(64, 64));
        assert_eq!(before.pixels, after_miss.pixels);
        let diff: f32 = before.pixels.iter().zip(&after_ok.pixels).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 5.0, "thread barely visible: {diff}");
    }

    #[test]
    fn camera_is_deterministic() {
        let v = VesselModel::new(VesselConfig::default()).unwrap();
        let cam = CameraConfig::default();
        let a = camera_capture(&v, 1, Side::Left, CapturePhase::Before, None, 5, &cam, &mut rng(8)).unwrap();
        let b = camera_capture(&v, 1, Side::Left, CapturePhase::Before, None, 5, &cam, &mut rng(8)).unwrap();
        assert_eq!(a, b);
    }
}
