//! A-scan processing chain: smoothing, air gate, normalization, sliding
//! RMSE template matching, material classification, template extraction
//! and the lateral edge scan with retries.

pub mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of full lateral passes before the edge scan gives up.
pub const EDGE_SCAN_MAX_ATTEMPTS: u32 = 3;

/// Default depth resolution: 1024 samples over 5 mm.
pub const DEFAULT_DEPTH_PER_SAMPLE_MM: f64 = 5.0 / 1024.0;

/// Physical depth covered by an extracted tissue template.
pub const TEMPLATE_SPAN_MM: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OctError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate signal: maximum intensity is zero")]
    DegenerateSignal,
    #[error("no sample reaches the surface threshold {0}")]
    NoSurfaceFound(f64),
    #[error("insufficient depth: {available} samples remain past the surface, template needs {required}")]
    InsufficientDepth { available: usize, required: usize },
    #[error("sensor fault: {0}")]
    SensorFault(String),
}

pub type Result<T> = std::result::Result<T, OctError>;

/// One OCT depth profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AScan {
    samples: Vec<f64>,
    depth_per_sample: f64,
    fiber_position: f64,
}

impl AScan {
    pub fn new(samples: Vec<f64>, depth_per_sample: f64, fiber_position: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(OctError::InvalidArgument("empty A-scan".into()));
        }
        if !(depth_per_sample.is_finite() && depth_per_sample > 0.0) {
            return Err(OctError::InvalidArgument(format!(
                "depth_per_sample must be positive, got {depth_per_sample}"
            )));
        }
        if !fiber_position.is_finite() {
            return Err(OctError::InvalidArgument("fiber position is not finite".into()));
        }
        if let Some((i, v)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(OctError::InvalidArgument(format!(
                "sample {i} is {v}; intensities must be finite and non-negative"
            )));
        }
        Ok(Self {
            samples,
            depth_per_sample,
            fiber_position,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn depth_per_sample(&self) -> f64 {
        self.depth_per_sample
    }

    pub fn fiber_position(&self) -> f64 {
        self.fiber_position
    }

    pub fn max_intensity(&self) -> f64 {
        max_of(&self.samples)
    }

    /// Multiplies every sample by `factor` (must be positive).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(OctError::InvalidArgument(format!("scale factor {factor}")));
        }
        Self::new(
            self.samples.iter().map(|v| v * factor).collect(),
            self.depth_per_sample,
            self.fiber_position,
        )
    }

    fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            depth_per_sample: self.depth_per_sample,
            fiber_position: self.fiber_position,
        }
    }
}

/// The saved tissue signature used for RMSE matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueTemplate {
    samples: Vec<f64>,
    span_mm: f64,
}

impl TissueTemplate {
    pub fn new(samples: Vec<f64>, span_mm: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(OctError::InvalidArgument("empty template".into()));
        }
        if samples.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(OctError::InvalidArgument(
                "template intensities must be finite and non-negative".into(),
            ));
        }
        if max_of(&samples) <= 0.0 {
            return Err(OctError::DegenerateSignal);
        }
        if !(span_mm.is_finite() && span_mm > 0.0) {
            return Err(OctError::InvalidArgument(format!("template span {span_mm}")));
        }
        Ok(Self { samples, span_mm })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn span_mm(&self) -> f64 {
        self.span_mm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierThresholds {
    pub tau_air: f64,
    pub tau_rmse: f64,
    pub tau_surface: f64,
    pub smoothing_window: usize,
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        Self {
            tau_air: 0.15,
            tau_rmse: 0.20,
            tau_surface: 0.30,
            smoothing_window: 21,
        }
    }
}

impl ClassifierThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_air > 0.0 && self.tau_air < 1.0) {
            return Err(OctError::InvalidArgument(format!("tau_air {} not in (0,1)", self.tau_air)));
        }
        if !(self.tau_rmse > 0.0 && self.tau_rmse.is_finite()) {
            return Err(OctError::InvalidArgument(format!("tau_rmse {} must be > 0", self.tau_rmse)));
        }
        if !(self.tau_surface > 0.0 && self.tau_surface.is_finite()) {
            return Err(OctError::InvalidArgument(format!(
                "tau_surface {} must be > 0",
                self.tau_surface
            )));
        }
        check_window(self.smoothing_window)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Material {
    Air,
    Tissue,
    Nitinol,
}

impl Material {
    pub const ALL: [Material; 3] = [Material::Air, Material::Tissue, Material::Nitinol];

    pub fn as_str(self) -> &'static str {
        match self {
            Material::Air => "air",
            Material::Tissue => "tissue",
            Material::Nitinol => "nitinol",
        }
    }
}

impl std::fmt::Display for Material {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Material {
    type Err = OctError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "air" => Ok(Material::Air),
            "tissue" => Ok(Material::Tissue),
            "nitinol" => Ok(Material::Nitinol),
            other => Err(OctError::InvalidArgument(format!("unknown material {other:?}"))),
        }
    }
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(OctError::InvalidArgument(format!(
            "smoothing window must be odd and >= 1, got {window}"
        )));
    }
    Ok(())
}

/// Centered moving average over raw intensities. Windows are truncated at
/// the signal ends so the output has the input's length.
pub fn smooth_samples(samples: &[f64], window: usize) -> Result<Vec<f64>> {
    check_window(window)?;
    if window > samples.len() {
        return Err(OctError::InvalidArgument(format!(
            "window {window} exceeds signal length {}",
            samples.len()
        )));
    }
    let half = window / 2;
    let n = samples.len();
    let out = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            // running mean keeps constant windows exact
            let mut mean = 0.0;
            for (k, v) in samples[lo..=hi].iter().enumerate() {
                mean += (v - mean) / (k + 1) as f64;
            }
            mean
        })
        .collect();
    Ok(out)
}

pub fn smooth(signal: &AScan, window: usize) -> Result<AScan> {
    Ok(signal.with_samples(smooth_samples(&signal.samples, window)?))
}

/// Air gate: true iff the smoothed maximum is strictly below `tau_air`.
pub fn is_air(smoothed: &AScan, tau_air: f64) -> bool {
    smoothed.max_intensity() < tau_air
}

/// Divides every sample by the signal maximum.
pub fn normalize(signal: &[f64]) -> Result<Vec<f64>> {
    let max = max_of(signal);
    if !(max > 0.0) {
        return Err(OctError::DegenerateSignal);
    }
    Ok(signal.iter().map(|v| v / max).collect())
}

/// RMSE between the template and every window of the signal.
///
/// `out[i] = sqrt(1/N * sum_j (t[j] - s[i + j])^2)` for `i` in
/// `0..=signal.len() - N`.
pub fn rmse_profile(template_norm: &[f64], signal_norm: &[f64]) -> Result<Vec<f64>> {
    let n = template_norm.len();
    if n == 0 {
        return Err(OctError::InvalidArgument("empty template".into()));
    }
    if n > signal_norm.len() {
        return Err(OctError::InvalidArgument(format!(
            "template length {n} exceeds signal length {}",
            signal_norm.len()
        )));
    }
    let inv_n = 1.0 / n as f64;
    Ok(signal_norm
        .windows(n)
        .map(|w| {
            let sse: f64 = w
                .iter()
                .zip(template_norm)
                .map(|(s, t)| (t - s) * (t - s))
                .sum();
            (sse * inv_n).sqrt()
        })
        .collect())
}

/// Full classification trace for one A-scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub material: Material,
    pub smoothed_max: f64,
    /// Absent when the air gate fired.
    pub min_rmse: Option<f64>,
    pub best_offset: Option<usize>,
}

/// A template smoothed and normalized once, reusable across many A-scans.
#[derive(Debug, Clone)]
pub struct TemplateMatcher {
    template_norm: Vec<f64>,
    thresholds: ClassifierThresholds,
}

impl TemplateMatcher {
    pub fn new(template: &TissueTemplate, thresholds: ClassifierThresholds) -> Result<Self> {
        thresholds.validate()?;
        // template shorter than the window smooths with the largest odd window that fits
        let mut window = thresholds.smoothing_window.min(template.len());
        if window % 2 == 0 {
            window -= 1;
        }
        let smoothed = smooth_samples(&template.samples, window)?;
        Ok(Self {
            template_norm: normalize(&smoothed)?,
            thresholds,
        })
    }

    pub fn thresholds(&self) -> &ClassifierThresholds {
        &self.thresholds
    }

    pub fn template_len(&self) -> usize {
        self.template_norm.len()
    }

    pub fn classify_detailed(&self, ascan: &AScan) -> Result<Classification> {
        if ascan.len() < self.template_len() + 1 {
            return Err(OctError::InvalidArgument(format!(
                "A-scan has {} samples, needs at least template length + 1 = {}",
                ascan.len(),
                self.template_len() + 1
            )));
        }
        let smoothed = smooth_samples(&ascan.samples, self.thresholds.smoothing_window)?;
        let smoothed_max = max_of(&smoothed);
        if smoothed_max < self.thresholds.tau_air {
            return Ok(Classification {
                material: Material::Air,
                smoothed_max,
                min_rmse: None,
                best_offset: None,
            });
        }
        let signal_norm = normalize(&smoothed)?;
        let profile = rmse_profile(&self.template_norm, &signal_norm)?;
        let (best_offset, min_rmse) = profile
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best });
        let material = if min_rmse < self.thresholds.tau_rmse {
            Material::Tissue
        } else {
            Material::Nitinol
        };
        Ok(Classification {
            material,
            smoothed_max,
            min_rmse: Some(min_rmse),
            best_offset: Some(best_offset),
        })
    }

    pub fn classify(&self, ascan: &AScan) -> Result<Material> {
        Ok(self.classify_detailed(ascan)?.material)
    }
}

/// smooth -> air gate -> normalize both -> sliding RMSE -> threshold.
pub fn classify(ascan: &AScan, template: &TissueTemplate, thr: &ClassifierThresholds) -> Result<Material> {
    TemplateMatcher::new(template, *thr)?.classify(ascan)
}

/// Number of samples covering `span_mm` at the given resolution.
pub fn template_len_for(span_mm: f64, depth_per_sample: f64) -> usize {
    (span_mm / depth_per_sample).round() as usize
}

/// Saves the raw signal starting at the first smoothed sample that reaches
/// `tau_surface`, spanning one millimetre of depth.
pub fn extract_template(ascan: &AScan, thr: &ClassifierThresholds) -> Result<TissueTemplate> {
    thr.validate()?;
    let smoothed = smooth_samples(&ascan.samples, thr.smoothing_window)?;
    let surface = smoothed
        .iter()
        .position(|v| *v >= thr.tau_surface)
        .ok_or(OctError::NoSurfaceFound(thr.tau_surface))?;
    let required = template_len_for(TEMPLATE_SPAN_MM, ascan.depth_per_sample);
    let available = ascan.len() - surface;
    if available < required {
        return Err(OctError::InsufficientDepth { available, required });
    }
    TissueTemplate::new(
        ascan.samples[surface..surface + required].to_vec(),
        TEMPLATE_SPAN_MM,
    )
}

/// Produces an A-scan for a lateral fiber position.
pub trait AScanSource {
    fn acquire(&mut self, position_mm: f64) -> Result<AScan>;
}

impl<F> AScanSource for F
where
    F: FnMut(f64) -> Result<AScan>,
{
    fn acquire(&mut self, position_mm: f64) -> Result<AScan> {
        self(position_mm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeScanParams {
    pub start_mm: f64,
    pub step_mm: f64,
    pub max_travel_mm: f64,
}

impl Default for EdgeScanParams {
    fn default() -> Self {
        Self {
            start_mm: 0.0,
            step_mm: 0.05,
            max_travel_mm: 10.0,
        }
    }
}

impl EdgeScanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_mm > 0.0 && self.step_mm.is_finite()) {
            return Err(OctError::InvalidArgument(format!("step_mm {} must be > 0", self.step_mm)));
        }
        if !(self.max_travel_mm > 0.0 && self.max_travel_mm.is_finite()) {
            return Err(OctError::InvalidArgument(format!(
                "max_travel_mm {} must be > 0",
                self.max_travel_mm
            )));
        }
        if !self.start_mm.is_finite() {
            return Err(OctError::InvalidArgument("start_mm is not finite".into()));
        }
        Ok(())
    }

    /// Fiber positions visited in one pass.
    pub fn positions(&self) -> impl Iterator<Item = f64> + '_ {
        let steps = (self.max_travel_mm / self.step_mm + 1e-9).floor() as usize;
        (0..=steps).map(move |k| self.start_mm + k as f64 * self.step_mm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeOutcome {
    EdgeFound,
    NoEdgeAfterRetries,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSample {
    pub attempt: u32,
    pub position_mm: f64,
    pub material: Material,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScanResult {
    pub outcome: EdgeOutcome,
    pub edge_position_mm: Option<f64>,
    pub transition_material: Option<Material>,
    pub attempts_used: u32,
    pub classifications: Vec<ScanSample>,
}

impl EdgeScanResult {
    pub fn found(&self) -> bool {
        self.outcome == EdgeOutcome::EdgeFound
    }

    /// Number of A-scans acquired across all passes.
    pub fn positions_scanned(&self) -> usize {
        self.classifications.len()
    }
}

/// Steps the fiber laterally, classifying at every position, and stops at
/// the first air or nitinol label. A pass that sees only tissue is repeated
/// from the start, up to [`EDGE_SCAN_MAX_ATTEMPTS`] passes.
pub fn edge_scan<S: AScanSource + ?Sized>(
    source: &mut S,
    params: &EdgeScanParams,
    matcher: &TemplateMatcher,
) -> Result<EdgeScanResult> {
    params.validate()?;
    let mut classifications = Vec::new();
    for attempt in 1..=EDGE_SCAN_MAX_ATTEMPTS {
        for position in params.positions() {
            let ascan = source.acquire(position)?;
            let material = matcher.classify(&ascan)?;
            classifications.push(ScanSample {
                attempt,
                position_mm: position,
                material,
            });
            if material != Material::Tissue {
                return Ok(EdgeScanResult {
                    outcome: EdgeOutcome::EdgeFound,
                    edge_position_mm: Some(position),
                    transition_material: Some(material),
                    attempts_used: attempt,
                    classifications,
                });
            }
        }
    }
    Ok(EdgeScanResult {
        outcome: EdgeOutcome::NoEdgeAfterRetries,
        edge_position_mm: None,
        transition_material: None,
        attempts_used: EDGE_SCAN_MAX_ATTEMPTS,
        classifications,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan(samples: Vec<f64>) -> AScan {
        AScan::new(samples, DEFAULT_DEPTH_PER_SAMPLE_MM, 0.0).unwrap()
    }

    fn thr(window: usize) -> ClassifierThresholds {
        ClassifierThresholds {
            smoothing_window: window,
            ..Default::default()
        }
    }

    #[test]
    fn smooth_constant_is_exact() {
        let out = smooth_samples(&[0.5, 0.5, 0.5], 3).unwrap();
        assert_eq!(out, vec![0.5, 0.5, 0.5]);
        let c = vec![0.1; 200];
        assert_eq!(smooth_samples(&c, 21).unwrap(), c);
    }

    #[test]
    fn smooth_impulse_uses_truncated_windows() {
        let out = smooth_samples(&[0.0, 1.0, 0.0], 3).unwrap();
        let expected = [0.5, 1.0 / 3.0, 0.5];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn smooth_window_one_is_identity() {
        let s = vec![0.3, 0.0, 0.9, 0.2, 0.7];
        assert_eq!(smooth_samples(&s, 1).unwrap(), s);
    }

    #[test]
    fn smooth_rejects_bad_windows() {
        assert!(matches!(smooth_samples(&[1.0; 5], 4), Err(OctError::InvalidArgument(_))));
        assert!(matches!(smooth_samples(&[1.0; 5], 7), Err(OctError::InvalidArgument(_))));
        assert!(matches!(smooth_samples(&[1.0; 5], 0), Err(OctError::InvalidArgument(_))));
    }

    #[test]
    fn air_gate_is_strict() {
        let mut s = vec![0.0; 10];
        s[3] = 0.10;
        assert!(is_air(&scan(s.clone()), 0.15));
        s[3] = 0.15;
        assert!(!is_air(&scan(s), 0.15));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[2.0, 4.0, 8.0]).unwrap(), vec![0.25, 0.5, 1.0]);
        let n = vec![0.2, 1.0, 0.4];
        assert_eq!(normalize(&n).unwrap(), n);
        assert_eq!(normalize(&[0.0, 0.0]), Err(OctError::DegenerateSignal));
    }

    #[test]
    fn rmse_hand_example() {
        let out = rmse_profile(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rmse_exact_copy_is_zero() {
        let t = [0.2, 1.0, 0.5, 0.3];
        let mut s = vec![0.7, 0.1, 0.9];
        s.extend_from_slice(&t);
        s.push(0.4);
        let out = rmse_profile(&t, &s).unwrap();
        assert_eq!(out.len(), s.len() - t.len() + 1);
        assert_eq!(out[3], 0.0);
    }

    #[test]
    fn rmse_rejects_long_template() {
        assert!(matches!(
            rmse_profile(&[1.0, 1.0, 1.0], &[1.0, 1.0]),
            Err(OctError::InvalidArgument(_))
        ));
    }

    #[test]
    fn embedded_template_classifies_as_tissue() {
        let template: Vec<f64> = (0..40).map(|i| 0.8 * (-0.05 * i as f64).exp()).collect();
        let mut samples = vec![0.0; 30];
        samples.extend_from_slice(&template);
        samples.extend(vec![0.0; 30]);
        let t = TissueTemplate::new(template, 1.0).unwrap();
        let m = classify(&scan(samples), &t, &thr(1)).unwrap();
        assert_eq!(m, Material::Tissue);
    }

    #[test]
    fn short_ascan_is_rejected() {
        let t = TissueTemplate::new(vec![1.0; 10], 1.0).unwrap();
        let err = classify(&scan(vec![1.0; 10]), &t, &thr(1)).unwrap_err();
        assert!(matches!(err, OctError::InvalidArgument(_)));
    }

    #[test]
    fn template_length_at_default_resolution() {
        assert_eq!(template_len_for(1.0, 0.00488), 205);
        assert_eq!(template_len_for(1.0, DEFAULT_DEPTH_PER_SAMPLE_MM), 205);
    }

    #[test]
    fn extract_template_errors() {
        let t = thr(21);
        let noise = scan(vec![0.05; 1024]);
        assert_eq!(extract_template(&noise, &t), Err(OctError::NoSurfaceFound(0.30)));
        let mut deep = vec![0.0; 1024];
        for v in deep.iter_mut().skip(1000) {
            *v = 0.9;
        }
        assert!(matches!(
            extract_template(&scan(deep), &t),
            Err(OctError::InsufficientDepth { required: 205, .. })
        ));
    }

    #[test]
    fn edge_scan_exhausts_three_attempts_on_tissue() {
        let template: Vec<f64> = (0..205).map(|i| 0.8 * (-0.007 * i as f64).exp()).collect();
        let tt = TissueTemplate::new(template.clone(), 1.0).unwrap();
        let matcher = TemplateMatcher::new(&tt, thr(21)).unwrap();
        let mut calls = 0;
        let mut source = |pos: f64| {
            calls += 1;
            let mut s = vec![0.0; 100];
            s.extend_from_slice(&template);
            s.extend(vec![0.0; 100]);
            AScan::new(s, DEFAULT_DEPTH_PER_SAMPLE_MM, pos)
        };
        let params = EdgeScanParams {
            start_mm: 0.0,
            step_mm: 0.5,
            max_travel_mm: 2.0,
        };
        let r = edge_scan(&mut source, &params, &matcher).unwrap();
        assert_eq!(r.outcome, EdgeOutcome::NoEdgeAfterRetries);
        assert_eq!(r.attempts_used, 3);
        assert_eq!(r.positions_scanned(), 15);
        assert!(r.edge_position_mm.is_none() && r.transition_material.is_none());
        assert_eq!(calls, 15);
    }

    #[test]
    fn edge_scan_surfaces_sensor_fault() {
        let tt = TissueTemplate::new(vec![1.0; 20], 1.0).unwrap();
        let matcher = TemplateMatcher::new(&tt, thr(1)).unwrap();
        let mut source = |_pos: f64| -> Result<AScan> { Err(OctError::SensorFault("fiber unplugged".into())) };
        let err = edge_scan(&mut source, &EdgeScanParams::default(), &matcher).unwrap_err();
        assert!(matches!(err, OctError::SensorFault(_)));
    }

    #[test]
    fn edge_scan_rejects_bad_params() {
        let tt = TissueTemplate::new(vec![1.0; 20], 1.0).unwrap();
        let matcher = TemplateMatcher::new(&tt, thr(1)).unwrap();
        let mut source = |p: f64| AScan::new(vec![0.0; 64], 0.01, p);
        let bad = EdgeScanParams {
            step_mm: 0.0,
            ..Default::default()
        };
        assert!(edge_scan(&mut source, &bad, &matcher).is_err());
    }

    #[test]
    fn ascan_validation() {
        assert!(AScan::new(vec![0.1, -0.1], 0.01, 0.0).is_err());
        assert!(AScan::new(vec![0.1, f64::NAN], 0.01, 0.0).is_err());
        assert!(AScan::new(vec![0.1], 0.0, 0.0).is_err());
        assert!(TissueTemplate::new(vec![0.0; 4], 1.0).is_err());
    }
}
