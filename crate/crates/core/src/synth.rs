//! Labeled synthetic A-scans, lateral scan scenes and calibration corpora.
//!
//! Signal models (depth `d`, surface `s`, per-scan gain `g`):
//!
//! * air: uniform noise in `[0, noise_floor]`
//! * tissue: `g * peak * exp(-a * (d - s)) * (1 + c * u)` past the surface,
//!   `u ~ U[-1, 1]`, plus the noise floor, clamped to `[0, 1]`
//! * nitinol: a specular plateau of `g * peak` over a few samples at the
//!   surface, then noise floor only
//!
//! The jitter fields draw `g` and the attenuation afresh for every A-scan,
//! which gives the classifier error rates a smooth dependence on the noise
//! level instead of a hard cliff.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::oct::io::{ascan_to_csv, read_ascan_csv, AScanIoError};
use crate::oct::{
    edge_scan, extract_template, AScan, AScanSource, ClassifierThresholds, EdgeScanParams, Material,
    OctError, TemplateMatcher, DEFAULT_DEPTH_PER_SAMPLE_MM,
};
use crate::rng::{derive, rng_from, SimRng};

pub const DEFAULT_SAMPLES: usize = 1024;
pub const CORPUS_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialProfile {
    pub material: Material,
    pub surface_depth_mm: f64,
    pub peak_intensity: f64,
    pub attenuation_per_mm: f64,
    pub specular_width_samples: usize,
    pub noise_floor: f64,
    pub speckle_contrast: f64,
    /// Per-scan gain drawn from `U[1 - gain_jitter, 1]`.
    #[serde(default)]
    pub gain_jitter: f64,
    /// Per-scan attenuation drawn from `a * U[1 - j, 1 + j]`.
    #[serde(default)]
    pub attenuation_jitter: f64,
}

impl MaterialProfile {
    pub fn tissue() -> Self {
        Self {
            material: Material::Tissue,
            surface_depth_mm: 1.0,
            peak_intensity: 0.8,
            attenuation_per_mm: 1.5,
            specular_width_samples: 5,
            noise_floor: 0.0,
            speckle_contrast: 0.3,
            gain_jitter: 0.0,
            attenuation_jitter: 0.0,
        }
    }

    pub fn nitinol() -> Self {
        Self {
            material: Material::Nitinol,
            peak_intensity: 0.95,
            speckle_contrast: 0.0,
            ..Self::tissue()
        }
    }

    pub fn air() -> Self {
        Self {
            material: Material::Air,
            peak_intensity: 0.05,
            noise_floor: 0.05,
            speckle_contrast: 0.0,
            ..Self::tissue()
        }
    }

    pub fn default_for(material: Material) -> Self {
        match material {
            Material::Air => Self::air(),
            Material::Tissue => Self::tissue(),
            Material::Nitinol => Self::nitinol(),
        }
    }

    pub fn validate(&self) -> Result<(), OctError> {
        let bad = |m: String| Err(OctError::InvalidArgument(m));
        if !(self.peak_intensity > 0.0 && self.peak_intensity <= 1.0) {
            return bad(format!("peak_intensity {} not in (0,1]", self.peak_intensity));
        }
        if self.material != Material::Air && !(self.noise_floor < self.peak_intensity) {
            return bad("noise_floor must be below peak_intensity".into());
        }
        if !(self.noise_floor >= 0.0) || !(self.speckle_contrast >= 0.0) {
            return bad("noise_floor and speckle_contrast must be >= 0".into());
        }
        if !(self.attenuation_per_mm > 0.0) {
            return bad(format!("attenuation_per_mm {} must be > 0", self.attenuation_per_mm));
        }
        if self.specular_width_samples == 0 {
            return bad("specular_width_samples must be >= 1".into());
        }
        if !(self.surface_depth_mm >= 0.0) {
            return bad("surface_depth_mm must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.gain_jitter) || !(0.0..1.0).contains(&self.attenuation_jitter) {
            return bad("jitter fractions must be in [0,1)".into());
        }
        Ok(())
    }
}

/// Sampling geometry of a synthetic A-scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AScanGeometry {
    pub n_samples: usize,
    pub depth_per_sample: f64,
}

impl Default for AScanGeometry {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            depth_per_sample: DEFAULT_DEPTH_PER_SAMPLE_MM,
        }
    }
}

/// Maps a scalar noise level onto generator parameters. Level 0 is
/// noise-free; the operating point is found by calibration sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub noise_floor_per_level: f64,
    pub speckle_per_level: f64,
    pub gain_jitter_per_level: f64,
    pub attenuation_jitter_per_level: f64,
    /// Gain jitter of the nitinol specular return (reflection angle).
    pub specular_jitter_per_level: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            noise_floor_per_level: 0.06,
            speckle_per_level: 0.3,
            gain_jitter_per_level: 0.5,
            attenuation_jitter_per_level: 0.5,
            specular_jitter_per_level: 0.72,
        }
    }
}

impl NoiseModel {
    pub fn profile(&self, material: Material, level: f64) -> MaterialProfile {
        let level = level.max(0.0);
        let base = MaterialProfile::default_for(material);
        let noise_floor = self.noise_floor_per_level * level;
        let mut p = MaterialProfile {
            noise_floor,
            speckle_contrast: if material == Material::Tissue {
                self.speckle_per_level * level
            } else {
                0.0
            },
            gain_jitter: (self.gain_jitter_per_level * level).min(0.95),
            attenuation_jitter: (self.attenuation_jitter_per_level * level).min(0.95),
            ..base
        };
        if material == Material::Nitinol {
            p.gain_jitter = (self.specular_jitter_per_level * level).min(0.95);
        }
        if material == Material::Air {
            p.peak_intensity = noise_floor.max(f64::MIN_POSITIVE);
            p.gain_jitter = 0.0;
        }
        p
    }
}

pub fn gen_ascan(profile: &MaterialProfile, rng_seed: u64) -> AScan {
    gen_ascan_with(profile, &AScanGeometry::default(), 0.0, &mut rng_from(rng_seed))
}

/// Renders one A-scan. Draw order is fixed, so equal rng states give
/// bit-identical output.
pub fn gen_ascan_with(profile: &MaterialProfile, geometry: &AScanGeometry, fiber_position: f64, rng: &mut SimRng) -> AScan {
    let n = geometry.n_samples;
    let dps = geometry.depth_per_sample;
    let gain = 1.0 - profile.gain_jitter * rng.random::<f64>();
    let attenuation = profile.attenuation_per_mm * (1.0 + profile.attenuation_jitter * rng.random_range(-1.0..=1.0));
    let surface = (profile.surface_depth_mm / dps).round() as usize;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let noise = if profile.noise_floor > 0.0 {
            profile.noise_floor * rng.random::<f64>()
        } else {
            0.0
        };
        let signal = match profile.material {
            Material::Air => 0.0,
            Material::Tissue if i >= surface => {
                let d = (i - surface) as f64 * dps;
                let speckle = if profile.speckle_contrast > 0.0 {
                    1.0 + profile.speckle_contrast * rng.random_range(-1.0..=1.0)
                } else {
                    1.0
                };
                gain * profile.peak_intensity * (-attenuation * d).exp() * speckle
            }
            Material::Nitinol if i >= surface && i < surface + profile.specular_width_samples => {
                gain * profile.peak_intensity
            }
            _ => 0.0,
        };
        samples.push((signal + noise).clamp(0.0, 1.0));
    }
    AScan::new(samples, dps, fiber_position).expect("generator output is valid")
}

/// Contiguous segments under the scan path, starting at lateral position 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralScene {
    segments: Vec<(f64, MaterialProfile)>,
}

impl LateralScene {
    pub fn new(segments: Vec<(f64, MaterialProfile)>) -> Result<Self, OctError> {
        if segments.is_empty() {
            return Err(OctError::InvalidArgument("scene has no segments".into()));
        }
        for (len, p) in &segments {
            if !(len.is_finite() && *len > 0.0) {
                return Err(OctError::InvalidArgument(format!("segment length {len} must be > 0")));
            }
            p.validate()?;
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[(f64, MaterialProfile)] {
        &self.segments
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|(l, _)| l).sum()
    }

    /// Profile under `position_mm`; positions past the end see the last segment.
    pub fn profile_at(&self, position_mm: f64) -> &MaterialProfile {
        let mut end = 0.0;
        for (len, p) in &self.segments {
            end += len;
            if position_mm < end {
                return p;
            }
        }
        &self.segments.last().expect("non-empty").1
    }

    /// Lateral position where the first non-tissue segment begins.
    pub fn first_edge(&self) -> Option<(f64, Material)> {
        let mut start = 0.0;
        for (len, p) in &self.segments {
            if p.material != Material::Tissue {
                return Some((start, p.material));
            }
            start += len;
        }
        None
    }
}

/// One A-scan per `step_mm` from position 0 up to the scene length.
pub fn gen_lateral_scan(scene: &LateralScene, step_mm: f64, rng_seed: u64) -> Result<Vec<AScan>, OctError> {
    if !(step_mm > 0.0 && step_mm.is_finite()) {
        return Err(OctError::InvalidArgument(format!("step_mm {step_mm} must be > 0")));
    }
    let count = (scene.total_length() / step_mm - 1e-9).floor() as usize + 1;
    let geometry = AScanGeometry::default();
    Ok((0..count)
        .map(|k| {
            let position = k as f64 * step_mm;
            let mut rng = rng_from(derive(rng_seed, k as u64));
            gen_ascan_with(scene.profile_at(position), &geometry, position, &mut rng)
        })
        .collect())
}

/// Live acquisition over a scene: every call draws fresh noise, so repeated
/// passes over the same position see new speckle.
#[derive(Debug, Clone)]
pub struct SceneSource {
    scene: LateralScene,
    geometry: AScanGeometry,
    seed: u64,
    acquisitions: u64,
    offset_mm: f64,
}

impl SceneSource {
    pub fn new(scene: LateralScene, seed: u64) -> Self {
        Self {
            scene,
            geometry: AScanGeometry::default(),
            seed,
            acquisitions: 0,
            offset_mm: 0.0,
        }
    }

    /// Shifts the scene under the fiber; used for manual jogs.
    pub fn set_offset(&mut self, offset_mm: f64) {
        self.offset_mm = offset_mm;
    }

    pub fn scene(&self) -> &LateralScene {
        &self.scene
    }

    pub fn acquisitions(&self) -> u64 {
        self.acquisitions
    }
}

impl AScanSource for SceneSource {
    fn acquire(&mut self, position_mm: f64) -> Result<AScan, OctError> {
        let mut rng = rng_from(derive(self.seed, self.acquisitions));
        self.acquisitions += 1;
        let scene_pos = position_mm + self.offset_mm;
        Ok(gen_ascan_with(
            self.scene.profile_at(scene_pos),
            &self.geometry,
            position_mm,
            &mut rng,
        ))
    }
}

/// How many scans of each material to generate at each noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub counts: BTreeMap<Material, usize>,
    pub noise_levels: Vec<f64>,
    #[serde(default)]
    pub noise_model: NoiseModel,
}

impl CorpusSpec {
    /// 49 scans at one noise level, split across the three materials.
    pub fn standard(noise_level: f64) -> Self {
        Self {
            counts: BTreeMap::from([(Material::Air, 16), (Material::Tissue, 17), (Material::Nitinol, 16)]),
            noise_levels: vec![noise_level],
            noise_model: NoiseModel::default(),
        }
    }

    pub fn validate(&self) -> Result<(), OctError> {
        for m in Material::ALL {
            match self.counts.get(&m) {
                Some(c) if *c >= 1 => {}
                _ => {
                    return Err(OctError::InvalidArgument(format!(
                        "corpus count for {m} must be >= 1"
                    )))
                }
            }
        }
        if self.noise_levels.is_empty() {
            return Err(OctError::InvalidArgument("at least one noise level required".into()));
        }
        if self.noise_levels.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(OctError::InvalidArgument("noise levels must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub file: String,
    pub label: Material,
    pub profile_params: MaterialProfile,
    pub seed: u64,
    pub noise_level: f64,
    /// Tissue scan whose extracted template classifies this entry.
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub scans: Vec<AScan>,
    /// `(file name, scan)` per noise level, in `noise_levels` order.
    pub references: Vec<(String, AScan)>,
}

pub fn gen_corpus(spec: &CorpusSpec, rng_seed: u64) -> Result<Corpus, OctError> {
    spec.validate()?;
    let mut entries = Vec::new();
    let mut scans = Vec::new();
    let mut references = Vec::new();
    let mut index: u64 = 0;
    for (li, level) in spec.noise_levels.iter().enumerate() {
        let ref_name = format!("reference_{li:02}.csv");
        let ref_seed = derive(rng_seed, u64::MAX - li as u64);
        let ref_profile = spec.noise_model.profile(Material::Tissue, *level);
        references.push((ref_name.clone(), gen_ascan(&ref_profile, ref_seed)));
        for (material, count) in &spec.counts {
            let profile = spec.noise_model.profile(*material, *level);
            for _ in 0..*count {
                let seed = derive(rng_seed, index);
                let file = format!("ascan_{index:05}.csv");
                scans.push(gen_ascan(&profile, seed));
                entries.push(CorpusEntry {
                    file,
                    label: *material,
                    profile_params: profile,
                    seed,
                    noise_level: *level,
                    reference: ref_name.clone(),
                });
                index += 1;
            }
        }
    }
    Ok(Corpus {
        entries,
        scans,
        references,
    })
}

impl Corpus {
    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("manifest serializes")
    }

    /// SHA-256 over the manifest and every file body, in manifest order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.manifest_json().as_bytes());
        for (name, r) in &self.references {
            h.update(name.as_bytes());
            h.update(ascan_to_csv(r).as_bytes());
        }
        for s in &self.scans {
            h.update(ascan_to_csv(s).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Loads a corpus written by [`Corpus::write_to`].
    pub fn read_from(dir: &Path) -> Result<Self, AScanIoError> {
        let manifest = dir.join(CORPUS_MANIFEST);
        let text = fs::read_to_string(&manifest).map_err(|e| AScanIoError::Io {
            path: manifest.display().to_string(),
            source: e,
        })?;
        let entries: Vec<CorpusEntry> = serde_json::from_str(&text).map_err(|e| AScanIoError::Parse {
            path: manifest.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let read = |name: &str| read_ascan_csv(&dir.join(name), DEFAULT_DEPTH_PER_SAMPLE_MM, 0.0);
        let mut references: Vec<(String, AScan)> = Vec::new();
        for e in &entries {
            if !references.iter().any(|(n, _)| *n == e.reference) {
                references.push((e.reference.clone(), read(&e.reference)?));
            }
        }
        let scans = entries.iter().map(|e| read(&e.file)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            entries,
            scans,
            references,
        })
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), AScanIoError> {
        let io = |p: &Path, e: std::io::Error| AScanIoError::Io {
            path: p.display().to_string(),
            source: e,
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, scan) in &self.references {
            let p = dir.join(name);
            fs::write(&p, ascan_to_csv(scan)).map_err(|e| io(&p, e))?;
        }
        for (entry, scan) in self.entries.iter().zip(&self.scans) {
            let p = dir.join(&entry.file);
            fs::write(&p, ascan_to_csv(scan)).map_err(|e| io(&p, e))?;
        }
        let p = dir.join(CORPUS_MANIFEST);
        fs::write(&p, self.manifest_json()).map_err(|e| io(&p, e))
    }
}

/// Per-class and overall accuracy of a labeling run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSummary {
    /// `matrix[truth][predicted]`, indexed by `Material::ALL` order.
    pub matrix: [[usize; 3]; 3],
}

impl ConfusionSummary {
    fn idx(m: Material) -> usize {
        Material::ALL.iter().position(|x| *x == m).expect("exhaustive")
    }

    pub fn record(&mut self, truth: Material, predicted: Material) {
        self.matrix[Self::idx(truth)][Self::idx(predicted)] += 1;
    }

    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..3).map(|i| self.matrix[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        self.correct() as f64 / self.total() as f64
    }

    /// Recall of `truth`.
    pub fn recall(&self, truth: Material) -> f64 {
        let row = &self.matrix[Self::idx(truth)];
        let n: usize = row.iter().sum();
        if n == 0 {
            return 0.0;
        }
        row[Self::idx(truth)] as f64 / n as f64
    }

    /// Fraction of non-`truth` scans labeled `truth`.
    pub fn false_positive_rate(&self, truth: Material) -> f64 {
        let t = Self::idx(truth);
        let (mut fp, mut neg) = (0, 0);
        for (i, row) in self.matrix.iter().enumerate() {
            if i != t {
                neg += row.iter().sum::<usize>();
                fp += row[t];
            }
        }
        if neg == 0 {
            0.0
        } else {
            fp as f64 / neg as f64
        }
    }
}

/// Labels every corpus scan with the template of its reference scan.
pub fn classify_corpus(corpus: &Corpus, thr: &ClassifierThresholds) -> Result<(Vec<Material>, ConfusionSummary), OctError> {
    let mut matchers = BTreeMap::new();
    for (name, scan) in &corpus.references {
        let template = extract_template(scan, thr)?;
        matchers.insert(name.clone(), TemplateMatcher::new(&template, *thr)?);
    }
    let mut labels = Vec::with_capacity(corpus.scans.len());
    let mut summary = ConfusionSummary::default();
    for (entry, scan) in corpus.entries.iter().zip(&corpus.scans) {
        let matcher = matchers
            .get(&entry.reference)
            .ok_or_else(|| OctError::InvalidArgument(format!("unknown reference {}", entry.reference)))?;
        let m = matcher.classify(scan)?;
        summary.record(entry.label, m);
        labels.push(m);
    }
    Ok((labels, summary))
}

/// One (tau_air, tau_rmse) setting evaluated over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub tau_air: f64,
    pub tau_rmse: f64,
    pub accuracy: f64,
    pub tissue_recall: f64,
    pub tissue_fpr: f64,
}

pub const ROC_CSV_HEADER: &str = "tau_air,tau_rmse,accuracy,tissue_recall,tissue_fpr";

/// Grid sweep over the air gate and RMSE threshold; other settings come
/// from `base`.
pub fn sweep_thresholds(
    corpus: &Corpus,
    base: &ClassifierThresholds,
    tau_airs: &[f64],
    tau_rmses: &[f64],
) -> Result<Vec<ThresholdPoint>, OctError> {
    let mut out = Vec::with_capacity(tau_airs.len() * tau_rmses.len());
    for &tau_air in tau_airs {
        for &tau_rmse in tau_rmses {
            let thr = ClassifierThresholds {
                tau_air,
                tau_rmse,
                ..*base
            };
            thr.validate()?;
            let (_, summary) = classify_corpus(corpus, &thr)?;
            out.push(ThresholdPoint {
                tau_air,
                tau_rmse,
                accuracy: summary.accuracy(),
                tissue_recall: summary.recall(Material::Tissue),
                tissue_fpr: summary.false_positive_rate(Material::Tissue),
            });
        }
    }
    Ok(out)
}

/// Highest accuracy; ties go to the lower tissue false-positive rate and
/// then to the setting closest to `base`.
pub fn pick_threshold_point(points: &[ThresholdPoint], base: &ClassifierThresholds) -> Option<ThresholdPoint> {
    let dist = |p: &ThresholdPoint| (p.tau_air - base.tau_air).hypot(p.tau_rmse - base.tau_rmse);
    points.iter().copied().min_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then(a.tissue_fpr.total_cmp(&b.tissue_fpr))
            .then(dist(a).total_cmp(&dist(b)))
    })
}

pub fn roc_csv(points: &[ThresholdPoint]) -> String {
    let mut out = String::from(ROC_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.tau_air, p.tau_rmse, p.accuracy, p.tissue_recall, p.tissue_fpr
        ));
    }
    out
}

/// `n` evenly spaced values over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Lateral edge-scan trials: tissue for a random length in
/// `[tissue_min_mm, tissue_max_mm]`, then air or nitinol (alternating).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeTrialSpec {
    pub tissue_min_mm: f64,
    pub tissue_max_mm: f64,
    pub scene_length_mm: f64,
    pub scan: EdgeScanParams,
    /// An edge counts as found when within this distance of the true edge.
    pub edge_tolerance_mm: f64,
}

impl Default for EdgeTrialSpec {
    fn default() -> Self {
        Self {
            tissue_min_mm: 1.5,
            tissue_max_mm: 2.5,
            scene_length_mm: 10.0,
            scan: EdgeScanParams {
                start_mm: 0.0,
                step_mm: 0.05,
                max_travel_mm: 5.0,
            },
            edge_tolerance_mm: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeTrialStats {
    pub trials: usize,
    pub edges_found: usize,
    pub materials_correct: usize,
    pub no_edge: usize,
}

impl EdgeTrialStats {
    pub fn edge_rate(&self) -> f64 {
        self.edges_found as f64 / self.trials.max(1) as f64
    }

    /// Correct transition labels as a fraction of correctly found edges.
    pub fn material_rate(&self) -> f64 {
        if self.edges_found == 0 {
            return 0.0;
        }
        self.materials_correct as f64 / self.edges_found as f64
    }
}

/// Runs `trials` independent lateral edge scans at `noise_level`. The
/// template for each trial is extracted from the A-scan at the start
/// position, as the live system does before scanning.
pub fn run_edge_trials(
    noise: &NoiseModel,
    noise_level: f64,
    thr: &ClassifierThresholds,
    spec: &EdgeTrialSpec,
    trials: usize,
    seed: u64,
) -> Result<EdgeTrialStats, OctError> {
    let mut stats = EdgeTrialStats {
        trials,
        ..Default::default()
    };
    for t in 0..trials {
        let trial_seed = derive(seed, t as u64);
        let mut rng = rng_from(trial_seed);
        let tissue_len = rng.random_range(spec.tissue_min_mm..=spec.tissue_max_mm);
        let edge_material = if t % 2 == 0 { Material::Air } else { Material::Nitinol };
        let scene = LateralScene::new(vec![
            (tissue_len, noise.profile(Material::Tissue, noise_level)),
            (
                (spec.scene_length_mm - tissue_len).max(spec.scan.step_mm),
                noise.profile(edge_material, noise_level),
            ),
        ])?;
        let mut source = SceneSource::new(scene, derive(trial_seed, 1));
        let reference = source.acquire(spec.scan.start_mm)?;
        let template = match extract_template(&reference, thr) {
            Ok(t) => t,
            Err(OctError::NoSurfaceFound(_) | OctError::InsufficientDepth { .. }) => {
                stats.no_edge += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let matcher = TemplateMatcher::new(&template, *thr)?;
        let result = edge_scan(&mut source, &spec.scan, &matcher)?;
        match (result.edge_position_mm, result.transition_material) {
            (Some(pos), Some(m)) => {
                if (pos - tissue_len).abs() <= spec.edge_tolerance_mm + 1e-9 {
                    stats.edges_found += 1;
                    if m == edge_material {
                        stats.materials_correct += 1;
                    }
                }
            }
            _ => stats.no_edge += 1,
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepPoint {
    pub noise_level: f64,
    pub stats: EdgeTrialStats,
}

/// Edge/material rates over a grid of noise levels.
pub fn sweep_noise_levels(
    noise: &NoiseModel,
    levels: &[f64],
    thr: &ClassifierThresholds,
    spec: &EdgeTrialSpec,
    trials: usize,
    seed: u64,
) -> Result<Vec<NoiseSweepPoint>, OctError> {
    levels
        .iter()
        .map(|&l| {
            Ok(NoiseSweepPoint {
                noise_level: l,
                stats: run_edge_trials(noise, l, thr, spec, trials, seed)?,
            })
        })
        .collect()
}

/// Sweep point closest (squared distance) to the target edge/material rates.
pub fn pick_noise_point(points: &[NoiseSweepPoint], target_edge: f64, target_material: f64) -> Option<NoiseSweepPoint> {
    points.iter().copied().min_by(|a, b| {
        let da = (a.stats.edge_rate() - target_edge).powi(2) + (a.stats.material_rate() - target_material).powi(2);
        let db = (b.stats.edge_rate() - target_edge).powi(2) + (b.stats.material_rate() - target_material).powi(2);
        da.total_cmp(&db)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oct::{classify, smooth_samples};

    #[test]
    fn corpus_roundtrips_through_disk() {
        let corpus = gen_corpus(&CorpusSpec::standard(0.3), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write_to(dir.path()).unwrap();
        let back = Corpus::read_from(dir.path()).unwrap();
        assert_eq!(back.content_hash(), corpus.content_hash());
        assert_eq!(back.entries.len(), 49);
    }

    #[test]
    fn threshold_sweep_on_clean_corpus() {
        let corpus = gen_corpus(&CorpusSpec::standard(0.0), 9).unwrap();
        let base = ClassifierThresholds::default();
        let pts = sweep_thresholds(&corpus, &base, &linspace(0.05, 0.25, 5), &linspace(0.1, 0.3, 5)).unwrap();
        assert_eq!(pts.len(), 25);
        let best = pick_threshold_point(&pts, &base).unwrap();
        assert_eq!(best.accuracy, 1.0);
        // the defaults are on the grid and already perfect
        assert!((best.tau_air - base.tau_air).abs() < 1e-12);
        assert!((best.tau_rmse - base.tau_rmse).abs() < 1e-12);
        assert_eq!(roc_csv(&pts).lines().count(), 26);
    }

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(linspace(2.0, 3.0, 1), vec![2.0]);
        assert!(linspace(0.0, 1.0, 0).is_empty());
    }

    #[test]
    fn air_profile_stays_under_noise_floor() {
        let a = gen_ascan(&MaterialProfile::air(), 11);
        assert!(a.max_intensity() <= 0.05);
        assert!(a.max_intensity() < ClassifierThresholds::default().tau_air);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = NoiseModel::default().profile(Material::Tissue, 1.0);
        assert_eq!(gen_ascan(&p, 3), gen_ascan(&p, 3));
        assert_ne!(gen_ascan(&p, 3), gen_ascan(&p, 4));
    }

    #[test]
    fn clean_tissue_self_matches() {
        let p = MaterialProfile {
            speckle_contrast: 0.0,
            noise_floor: 0.0,
            ..MaterialProfile::tissue()
        };
        let a = gen_ascan(&p, 1);
        // no noise: smoothing the ideal curve reproduces smoothing of the scan
        let ideal: Vec<f64> = (0..DEFAULT_SAMPLES)
            .map(|i| {
                if i >= 205 {
                    0.8 * (-1.5 * (i - 205) as f64 * DEFAULT_DEPTH_PER_SAMPLE_MM).exp()
                } else {
                    0.0
                }
            })
            .collect();
        assert_eq!(smooth_samples(a.samples(), 21).unwrap(), smooth_samples(&ideal, 21).unwrap());
        let thr = ClassifierThresholds::default();
        let t = extract_template(&a, &thr).unwrap();
        assert_eq!(classify(&a, &t, &thr).unwrap(), Material::Tissue);
    }

    #[test]
    fn template_starts_at_generated_surface() {
        let p = MaterialProfile {
            speckle_contrast: 0.0,
            surface_depth_mm: 100.0 * DEFAULT_DEPTH_PER_SAMPLE_MM,
            ..MaterialProfile::tissue()
        };
        let a = gen_ascan(&p, 1);
        let thr = ClassifierThresholds {
            smoothing_window: 1,
            ..Default::default()
        };
        let t = extract_template(&a, &thr).unwrap();
        assert_eq!(t.samples(), &a.samples()[100..305]);
        // with the default window the crossing moves at most half a window early
        let t21 = extract_template(&a, &ClassifierThresholds::default()).unwrap();
        let start = a.samples().windows(205).position(|w| w == t21.samples()).unwrap();
        assert!((90..=100).contains(&start), "{start}");
    }

    #[test]
    fn lateral_scan_counts_and_truncation() {
        let scene = LateralScene::new(vec![(2.0, MaterialProfile::tissue()), (8.0, MaterialProfile::air())]).unwrap();
        let scans = gen_lateral_scan(&scene, 0.1, 5).unwrap();
        assert_eq!(scans.len(), 100);
        for (k, s) in scans.iter().enumerate() {
            let expect_tissue = k < 20;
            assert_eq!(s.max_intensity() > 0.1, expect_tissue, "scan {k}");
        }
        let odd = LateralScene::new(vec![(1.0, MaterialProfile::tissue())]).unwrap();
        assert_eq!(gen_lateral_scan(&odd, 0.3, 1).unwrap().len(), 4);
        assert!(gen_lateral_scan(&odd, 0.0, 1).is_err());
    }

    #[test]
    fn corpus_rejects_zero_counts() {
        let mut spec = CorpusSpec::standard(0.5);
        spec.counts.insert(Material::Nitinol, 0);
        assert!(gen_corpus(&spec, 1).is_err());
    }

    #[test]
    fn standard_corpus_has_49_entries_and_stable_hash() {
        let spec = CorpusSpec::standard(0.5);
        let a = gen_corpus(&spec, 9).unwrap();
        assert_eq!(a.entries.len(), 49);
        assert_eq!(a.content_hash(), gen_corpus(&spec, 9).unwrap().content_hash());
        assert_ne!(a.content_hash(), gen_corpus(&spec, 10).unwrap().content_hash());
    }

    #[test]
    fn profile_validation() {
        let mut p = MaterialProfile::tissue();
        p.peak_intensity = 1.5;
        assert!(p.validate().is_err());
        let mut p = MaterialProfile::tissue();
        p.attenuation_per_mm = 0.0;
        assert!(p.validate().is_err());
        assert!(MaterialProfile::air().validate().is_ok());
    }

    #[test]
    fn confusion_rates() {
        let mut c = ConfusionSummary::default();
        c.record(Material::Air, Material::Air);
        c.record(Material::Tissue, Material::Nitinol);
        c.record(Material::Nitinol, Material::Nitinol);
        assert_eq!(c.total(), 3);
        assert!((c.accuracy() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.recall(Material::Tissue), 0.0);
        assert!((c.false_positive_rate(Material::Nitinol) - 0.5).abs() < 1e-12);
    }
}
