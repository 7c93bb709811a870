//! Outcome statistics: COV%, lumen reduction with pin-gauge quantization,
//! placement extraction, one-way ANOVA with Tukey HSD, and comparison
//! reports against the embedded ex vivo outcome fixtures.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use rand_distr::{Distribution, Normal};

use crate::devices::{wrap_deg, Placement, Side};
use crate::rng::SimRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("fixture resource: {0}")]
    Fixture(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(values: &[f64]) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() as f64 - 1.0)).sqrt()
}

pub fn cov_percent(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(MetricsError::InsufficientData(format!(
            "COV% needs at least 2 values, got {}",
            values.len()
        )));
    }
    let m = mean(values);
    if m == 0.0 || !m.is_finite() {
        return Err(MetricsError::Undefined(format!("COV% with mean {m}")));
    }
    Ok(100.0 * sample_sd(values) / m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LumenReduction {
    pub percent: f64,
    /// Anastomosis ID exceeded the raw ID and the result was clamped to 0.
    pub clamped: bool,
}

pub fn lumen_reduction_checked(anastomosis_id_mm: f64, raw_id_mm: f64) -> Result<LumenReduction> {
    if !(anastomosis_id_mm > 0.0 && raw_id_mm > 0.0) || !anastomosis_id_mm.is_finite() || !raw_id_mm.is_finite() {
        return Err(MetricsError::InvalidArgument(format!(
            "diameters must be positive, got {anastomosis_id_mm} and {raw_id_mm}"
        )));
    }
    if anastomosis_id_mm > raw_id_mm {
        return Ok(LumenReduction {
            percent: 0.0,
            clamped: true,
        });
    }
    Ok(LumenReduction {
        percent: 100.0 * (1.0 - (anastomosis_id_mm / raw_id_mm).powi(2)),
        clamped: false,
    })
}

pub fn lumen_reduction(anastomosis_id_mm: f64, raw_id_mm: f64) -> Result<f64> {
    lumen_reduction_checked(anastomosis_id_mm, raw_id_mm).map(|r| r.percent)
}

pub const PIN_GAUGE_STEP_MM: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinReading {
    pub measured_mm: f64,
    /// Smaller than the smallest pin.
    pub below_smallest: bool,
}

/// Largest pin that fits.
pub fn pin_gauge_checked(true_id_mm: f64) -> Result<PinReading> {
    if !(true_id_mm >= 0.0) || !true_id_mm.is_finite() {
        return Err(MetricsError::InvalidArgument(format!("inner diameter {true_id_mm}")));
    }
    // tolerance keeps exact pin sizes from flooring down a step
    let steps = (true_id_mm / PIN_GAUGE_STEP_MM + 1e-9).floor();
    Ok(PinReading {
        measured_mm: steps * PIN_GAUGE_STEP_MM,
        below_smallest: steps < 1.0,
    })
}

pub fn pin_gauge(true_id_mm: f64) -> Result<f64> {
    pin_gauge_checked(true_id_mm).map(|r| r.measured_mm)
}

/// Lumen narrowing from tissue gathered by the sutures. The gathered
/// fraction of cross-sectional area grows with the mean bite depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LumenModel {
    pub raw_id_mean_mm: f64,
    pub raw_id_sd_mm: f64,
    /// Area fraction lost per millimetre of mean bite depth.
    pub gather_per_mm: f64,
    pub gather_sd: f64,
}

impl Default for LumenModel {
    fn default() -> Self {
        Self {
            raw_id_mean_mm: 3.1,
            raw_id_sd_mm: 0.15,
            gather_per_mm: 0.155,
            gather_sd: 0.12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LumenOutcome {
    pub raw_id_mm: f64,
    pub anastomosis_id_mm: f64,
    pub raw_measured_mm: f64,
    pub anastomosis_measured_mm: f64,
    pub reduction_percent: f64,
    pub warnings: Vec<String>,
}

impl LumenModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.raw_id_mean_mm > PIN_GAUGE_STEP_MM && self.raw_id_sd_mm >= 0.0 && self.gather_sd >= 0.0) {
            return Err(MetricsError::InvalidArgument(
                "raw ID mean must exceed the smallest pin and SDs must be >= 0".into(),
            ));
        }
        if !(self.gather_per_mm >= 0.0 && self.gather_per_mm.is_finite()) {
            return Err(MetricsError::InvalidArgument("gather_per_mm must be >= 0".into()));
        }
        Ok(())
    }

    /// Draws true diameters and measures both with the pin gauge. An empty
    /// bite list means nothing was gathered.
    pub fn simulate(&self, bites_mm: &[f64], rng: &mut SimRng) -> Result<LumenOutcome> {
        self.validate()?;
        let normal = |m: f64, sd: f64, rng: &mut SimRng| {
            if sd > 0.0 {
                Normal::new(m, sd).expect("sd checked").sample(rng)
            } else {
                m
            }
        };
        let raw = normal(self.raw_id_mean_mm, self.raw_id_sd_mm, rng).max(PIN_GAUGE_STEP_MM);
        let mean_bite = if bites_mm.is_empty() { 0.0 } else { mean(bites_mm) };
        let gathered = normal(self.gather_per_mm * mean_bite, self.gather_sd, rng).clamp(0.0, 0.95);
        let sewn = raw * (1.0 - gathered).sqrt();
        let raw_pin = pin_gauge_checked(raw)?;
        let sewn_pin = pin_gauge_checked(sewn)?;
        let mut warnings = Vec::new();
        if sewn_pin.below_smallest {
            warnings.push(format!("anastomosis ID {sewn:.2} mm is below the smallest pin"));
        }
        // a lumen too small for any pin counts as fully occluded
        let reduction = if sewn_pin.measured_mm <= 0.0 {
            100.0
        } else {
            let r = lumen_reduction_checked(sewn_pin.measured_mm, raw_pin.measured_mm)?;
            if r.clamped {
                warnings.push("anastomosis ID measured above raw ID; reduction clamped to 0".into());
            }
            r.percent
        };
        Ok(LumenOutcome {
            raw_id_mm: raw,
            anastomosis_id_mm: sewn,
            raw_measured_mm: raw_pin.measured_mm,
            anastomosis_measured_mm: sewn_pin.measured_mm,
            reduction_percent: reduction,
            warnings,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementStats {
    pub bites_mm: Vec<f64>,
    pub spacings_mm: Vec<f64>,
    pub bite_cov_percent: f64,
    pub spacing_cov_percent: f64,
}

/// Arc spacings between angularly adjacent placements, wraparound pair
/// included, on a vessel of the given outer diameter.
pub fn spacings_mm(placements: &[Placement], diameter_mm: f64) -> Vec<f64> {
    let mut angles: Vec<f64> = placements.iter().map(|p| wrap_deg(p.angular_position_deg)).collect();
    angles.sort_by(f64::total_cmp);
    let n = angles.len();
    (0..n)
        .map(|i| {
            let gap = if i + 1 < n {
                angles[i + 1] - angles[i]
            } else {
                360.0 - angles[n - 1] + angles[0]
            };
            PI * diameter_mm * gap / 360.0
        })
        .collect()
}

pub fn placement_stats(placements: &[Placement], diameter_mm: f64) -> Result<PlacementStats> {
    if placements.len() < 2 {
        return Err(MetricsError::InsufficientData(format!(
            "{} placements, need at least 2",
            placements.len()
        )));
    }
    let bites: Vec<f64> = placements.iter().map(|p| p.bite_depth_mm).collect();
    let spacings = spacings_mm(placements, diameter_mm);
    Ok(PlacementStats {
        bite_cov_percent: cov_percent(&bites)?,
        spacing_cov_percent: cov_percent(&spacings)?,
        bites_mm: bites,
        spacings_mm: spacings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl GroupSummary {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: mean(values),
            sd: if values.len() > 1 { sample_sd(values) } else { 0.0 },
            n: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p_value: f64,
    pub ms_within: f64,
}

pub fn anova_from_summary(groups: &[GroupSummary]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(MetricsError::InsufficientData("ANOVA needs at least 2 groups".into()));
    }
    if let Some(g) = groups.iter().find(|g| g.n < 2) {
        return Err(MetricsError::InsufficientData(format!("group with n = {}", g.n)));
    }
    let n_total: usize = groups.iter().map(|g| g.n).sum();
    let grand = groups.iter().map(|g| g.mean * g.n as f64).sum::<f64>() / n_total as f64;
    let ss_between: f64 = groups.iter().map(|g| g.n as f64 * (g.mean - grand).powi(2)).sum();
    let ss_within: f64 = groups.iter().map(|g| (g.n as f64 - 1.0) * g.sd.powi(2)).sum();
    let df_between = groups.len() - 1;
    let df_within = n_total - groups.len();
    let ms_between = ss_between / df_between as f64;
    let ms_within = ss_within / df_within as f64;
    let scale = groups.iter().map(|g| g.mean.abs()).fold(grand.abs(), f64::max).max(1.0);
    let (f, p_value) = if ms_between <= 1e-24 * scale * scale {
        (0.0, 1.0)
    } else if ms_within == 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = ms_between / ms_within;
        let dist = FisherSnedecor::new(df_between as f64, df_within as f64)
            .map_err(|e| MetricsError::InvalidArgument(e.to_string()))?;
        (f, dist.sf(f).clamp(0.0, 1.0))
    };
    Ok(AnovaResult {
        f,
        df_between,
        df_within,
        p_value,
        ms_within,
    })
}

pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    let summaries: Vec<GroupSummary> = groups.iter().map(|g| GroupSummary::of(g)).collect();
    anova_from_summary(&summaries)
}

pub const TUKEY_DF_GRID: [f64; 22] = [
    5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0, 18.0, 19.0, 20.0, 24.0, 30.0, 40.0, 60.0,
    120.0,
    f64::INFINITY,
];

/// Upper 5% points of the studentized range, rows k = 2..=6.
const Q_05: [[f64; 22]; 5] = [
    [
        3.6354, 3.4605, 3.3441, 3.2612, 3.1992, 3.1511, 3.1127, 3.0813, 3.0552, 3.0332, 3.0143, 2.9980, 2.9837, 2.9712,
        2.9600, 2.9500, 2.9188, 2.8882, 2.8582, 2.8288, 2.8000, 2.7718,
    ],
    [
        4.6017, 4.3392, 4.1649, 4.0410, 3.9485, 3.8768, 3.8196, 3.7729, 3.7341, 3.7014, 3.6734, 3.6491, 3.6280, 3.6093,
        3.5927, 3.5779, 3.5317, 3.4864, 3.4421, 3.3987, 3.3561, 3.3145,
    ],
    [
        5.2183, 4.8956, 4.6813, 4.5288, 4.4149, 4.3266, 4.2561, 4.1987, 4.1509, 4.1105, 4.0760, 4.0461, 4.0200, 3.9970,
        3.9766, 3.9583, 3.9013, 3.8454, 3.7907, 3.7371, 3.6846, 3.6332,
    ],
    [
        5.6731, 5.3049, 5.0601, 4.8858, 4.7554, 4.6543, 4.5736, 4.5077, 4.4529, 4.4066, 4.3670, 4.3327, 4.3027, 4.2763,
        4.2528, 4.2319, 4.1663, 4.1021, 4.0391, 3.9774, 3.9169, 3.8577,
    ],
    [
        6.0329, 5.6284, 5.3591, 5.1672, 5.0235, 4.9120, 4.8230, 4.7502, 4.6897, 4.6385, 4.5947, 4.5568, 4.5237, 4.4944,
        4.4685, 4.4452, 4.3727, 4.3015, 4.2316, 4.1632, 4.0960, 4.0301,
    ],
];

pub const TUKEY_MAX_GROUPS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QCritical {
    pub q: f64,
    /// df fell below the grid and the nearest entry was used.
    pub extrapolated: bool,
}

/// q(0.05, k, df), linear in df between grid points; between 120 and
/// infinity the interpolation is linear in 1/df.
pub fn q_critical_05(k: usize, df: usize) -> Result<QCritical> {
    if !(2..=TUKEY_MAX_GROUPS).contains(&k) {
        return Err(MetricsError::InvalidArgument(format!(
            "studentized range table covers k = 2..={TUKEY_MAX_GROUPS}, got {k}"
        )));
    }
    let row = &Q_05[k - 2];
    let df = df as f64;
    if df < TUKEY_DF_GRID[0] {
        return Ok(QCritical {
            q: row[0],
            extrapolated: true,
        });
    }
    let last_finite = TUKEY_DF_GRID.len() - 2;
    if df >= TUKEY_DF_GRID[last_finite] {
        let t = TUKEY_DF_GRID[last_finite] / df;
        return Ok(QCritical {
            q: row[last_finite + 1] + t * (row[last_finite] - row[last_finite + 1]),
            extrapolated: false,
        });
    }
    let i = TUKEY_DF_GRID.iter().rposition(|g| *g <= df).expect("df within grid");
    let (d0, d1) = (TUKEY_DF_GRID[i], TUKEY_DF_GRID[i + 1]);
    let t = (df - d0) / (d1 - d0);
    Ok(QCritical {
        q: row[i] + t * (row[i + 1] - row[i]),
        extrapolated: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyPair {
    pub i: usize,
    pub j: usize,
    pub mean_diff: f64,
    pub q: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyResult {
    pub alpha: f64,
    pub k: usize,
    pub df_within: usize,
    pub q_critical: f64,
    pub pairs: Vec<TukeyPair>,
    pub warnings: Vec<String>,
}

impl TukeyResult {
    pub fn pair(&self, a: usize, b: usize) -> Option<&TukeyPair> {
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        self.pairs.iter().find(|p| p.i == i && p.j == j)
    }

    pub fn significant(&self, a: usize, b: usize) -> bool {
        self.pair(a, b).is_some_and(|p| p.significant)
    }
}

/// Tukey-Kramer HSD at alpha = 0.05 from group summaries.
pub fn tukey_from_summary(groups: &[GroupSummary]) -> Result<TukeyResult> {
    let anova = anova_from_summary(groups)?;
    let k = groups.len();
    let crit = q_critical_05(k, anova.df_within)?;
    let mut warnings = Vec::new();
    if crit.extrapolated {
        warnings.push(format!(
            "df = {} below the critical-value table; nearest entry used",
            anova.df_within
        ));
    }
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let diff = (groups[i].mean - groups[j].mean).abs();
            let se = (anova.ms_within / 2.0 * (1.0 / groups[i].n as f64 + 1.0 / groups[j].n as f64)).sqrt();
            let q = if se > 0.0 {
                diff / se
            } else if diff > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            pairs.push(TukeyPair {
                i,
                j,
                mean_diff: groups[i].mean - groups[j].mean,
                q,
                significant: q > crit.q,
            });
        }
    }
    Ok(TukeyResult {
        alpha: 0.05,
        k,
        df_within: anova.df_within,
        q_critical: crit.q,
        pairs,
        warnings,
    })
}

pub fn tukey_hsd(groups: &[Vec<f64>]) -> Result<TukeyResult> {
    let summaries: Vec<GroupSummary> = groups.iter().map(|g| GroupSummary::of(g)).collect();
    tukey_from_summary(&summaries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovFixture {
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryFixture {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl From<SummaryFixture> for GroupSummary {
    fn from(s: SummaryFixture) -> Self {
        GroupSummary {
            mean: s.mean,
            sd: s.sd,
            n: s.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureGroup {
    pub name: String,
    pub bite_cov_percent: CovFixture,
    pub spacing_cov_percent: CovFixture,
    pub lumen_reduction_percent: SummaryFixture,
    pub bubble_leak_psi: SummaryFixture,
    pub time_per_stitch_s: SummaryFixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeFixtures {
    pub version: u32,
    pub source: String,
    pub groups: Vec<FixtureGroup>,
}

pub const FIXTURES_JSON: &str = include_str!("../resources/outcome_fixtures.json");
pub const FIXTURES_VERSION: u32 = 1;

impl OutcomeFixtures {
    pub fn embedded() -> Self {
        Self::parse(FIXTURES_JSON).expect("embedded fixtures are valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(text).map_err(|e| MetricsError::Fixture(e.to_string()))?;
        if f.version != FIXTURES_VERSION {
            return Err(MetricsError::Fixture(format!(
                "unsupported fixture version {} (expected {FIXTURES_VERSION})",
                f.version
            )));
        }
        Ok(f)
    }

    pub fn group(&self, name: &str) -> Option<&FixtureGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// The autonomous-system row.
    pub fn robot(&self) -> Option<&FixtureGroup> {
        self.groups.iter().find(|g| !g.name.starts_with("Surgeon"))
    }
}

/// Per-run outcome consumed by the comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    pub placements: Vec<(Side, Placement)>,
    pub vessel_diameter_mm: f64,
    pub lumen_reduction_percent: f64,
    pub time_per_stitch_s: f64,
}

impl RunOutcome {
    pub fn side_placements(&self, side: Side) -> Vec<Placement> {
        self.placements.iter().filter(|(s, _)| *s == side).map(|(_, p)| *p).collect()
    }

    pub fn bites(&self) -> Vec<f64> {
        self.placements.iter().map(|(_, p)| p.bite_depth_mm).collect()
    }

    /// Spacings per side, concatenated right then left.
    pub fn spacings(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for side in [Side::Right, Side::Left] {
            let p = self.side_placements(side);
            if p.len() >= 2 {
                out.extend(spacings_mm(&p, self.vessel_diameter_mm));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSummary {
    pub runs: usize,
    pub bite_mean_mm: f64,
    pub bite_sd_mm: f64,
    pub bite_cov_percent: Option<f64>,
    pub bite_n: usize,
    pub spacing_cov_percent: Option<f64>,
    pub spacing_n: usize,
    pub lumen_reduction_percent: GroupSummary,
    pub time_per_stitch_s: GroupSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTest {
    pub metric: String,
    pub groups: Vec<String>,
    /// Some groups enter as summary statistics only.
    pub from_summary: bool,
    pub anova: AnovaResult,
    pub tukey: Option<TukeyResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub simulated: SimulatedSummary,
    /// All placement COV% are zero.
    pub degenerate: bool,
    pub fixtures: Option<Vec<FixtureGroup>>,
    pub tests: Vec<OutcomeTest>,
    pub warnings: Vec<String>,
}

fn summary_or_point(values: &[f64]) -> GroupSummary {
    GroupSummary::of(values)
}

pub fn summarize_runs(runs: &[RunOutcome]) -> Result<SimulatedSummary> {
    if runs.is_empty() {
        return Err(MetricsError::InsufficientData("no runs".into()));
    }
    let bites: Vec<f64> = runs.iter().flat_map(RunOutcome::bites).collect();
    let spacings: Vec<f64> = runs.iter().flat_map(RunOutcome::spacings).collect();
    let lumen: Vec<f64> = runs.iter().map(|r| r.lumen_reduction_percent).collect();
    let time: Vec<f64> = runs.iter().map(|r| r.time_per_stitch_s).collect();
    let bite = GroupSummary::of(&bites);
    Ok(SimulatedSummary {
        runs: runs.len(),
        bite_mean_mm: bite.mean,
        bite_sd_mm: bite.sd,
        bite_cov_percent: cov_percent(&bites).ok(),
        bite_n: bites.len(),
        spacing_cov_percent: cov_percent(&spacings).ok(),
        spacing_n: spacings.len(),
        lumen_reduction_percent: summary_or_point(&lumen),
        time_per_stitch_s: summary_or_point(&time),
    })
}

pub const SIMULATED_GROUP: &str = "Simulated";

/// Tabulates simulated outcomes beside the fixtures and runs ANOVA/Tukey on
/// lumen reduction and time per stitch, with the simulated runs standing in
/// for the autonomous-system fixture row.
pub fn compare_report(runs: &[RunOutcome], fixtures: Option<&OutcomeFixtures>) -> Result<ComparisonReport> {
    let simulated = summarize_runs(runs)?;
    let mut warnings = Vec::new();
    let degenerate = simulated.bite_cov_percent.is_some_and(|c| c.abs() < 1e-9)
        && simulated.spacing_cov_percent.is_some_and(|c| c.abs() < 1e-9);
    if degenerate {
        warnings.push("all placement COV% are zero: runs look noiseless".into());
    }
    let mut tests = Vec::new();
    if let Some(fx) = fixtures.filter(|f| !f.groups.is_empty()) {
        let surgeons: Vec<&FixtureGroup> = fx.groups.iter().filter(|g| g.name.starts_with("Surgeon")).collect();
        type Pick = fn(&FixtureGroup) -> SummaryFixture;
        let metrics: [(&str, Pick, GroupSummary); 2] = [
            ("lumen_reduction_percent", |g| g.lumen_reduction_percent, simulated.lumen_reduction_percent),
            ("time_per_stitch_s", |g| g.time_per_stitch_s, simulated.time_per_stitch_s),
        ];
        for (name, pick, sim) in metrics {
            let mut groups: Vec<GroupSummary> = surgeons.iter().map(|g| pick(g).into()).collect();
            let mut names: Vec<String> = surgeons.iter().map(|g| g.name.clone()).collect();
            if sim.n >= 2 {
                groups.push(sim);
                names.push(SIMULATED_GROUP.into());
            } else {
                warnings.push(format!("{name}: fewer than 2 runs, simulated group left out of the test"));
            }
            if groups.len() < 2 {
                continue;
            }
            let anova = anova_from_summary(&groups)?;
            let tukey = if groups.len() <= TUKEY_MAX_GROUPS {
                Some(tukey_from_summary(&groups)?)
            } else {
                None
            };
            tests.push(OutcomeTest {
                metric: name.into(),
                groups: names,
                from_summary: true,
                anova,
                tukey,
            });
        }
        let leak: Vec<GroupSummary> = fx.groups.iter().map(|g| g.bubble_leak_psi.into()).collect();
        if leak.len() >= 2 && leak.len() <= TUKEY_MAX_GROUPS {
            tests.push(OutcomeTest {
                metric: "bubble_leak_psi".into(),
                groups: fx.groups.iter().map(|g| g.name.clone()).collect(),
                from_summary: true,
                anova: anova_from_summary(&leak)?,
                tukey: Some(tukey_from_summary(&leak)?),
            });
        }
    }
    Ok(ComparisonReport {
        simulated,
        degenerate,
        fixtures: fixtures.filter(|f| !f.groups.is_empty()).map(|f| f.groups.clone()),
        tests,
        warnings,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.1}"))
}

impl ComparisonReport {
    pub fn to_markdown(&self) -> String {
        let s = &self.simulated;
        let mut md = String::new();
        let _ = writeln!(md, "# Outcome comparison\n");
        let with_fixtures = self.fixtures.is_some();
        let _ = writeln!(
            md,
            "| Group | Bite depth COV% | Spacing COV% | Lumen reduction (%) | Bubble leak (psi) | Time per stitch (s) |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|---|");
        if let Some(groups) = &self.fixtures {
            for g in groups {
                let _ = writeln!(
                    md,
                    "| {} | {:.0} (n={}) | {:.0} (n={}) | {:.0}±{:.0} (n={}) | {:.2}±{:.2} (n={}) | {:.0}±{:.0} (n={}) |",
                    g.name,
                    g.bite_cov_percent.value,
                    g.bite_cov_percent.n,
                    g.spacing_cov_percent.value,
                    g.spacing_cov_percent.n,
                    g.lumen_reduction_percent.mean,
                    g.lumen_reduction_percent.sd,
                    g.lumen_reduction_percent.n,
                    g.bubble_leak_psi.mean,
                    g.bubble_leak_psi.sd,
                    g.bubble_leak_psi.n,
                    g.time_per_stitch_s.mean,
                    g.time_per_stitch_s.sd,
                    g.time_per_stitch_s.n,
                );
            }
        }
        let _ = writeln!(
            md,
            "| {SIMULATED_GROUP} ({} runs) | {} (n={}) | {} (n={}) | {:.0}±{:.0} (n={}) | n/a | {:.0}±{:.0} (n={}) |",
            s.runs,
            fmt_opt(s.bite_cov_percent),
            s.bite_n,
            fmt_opt(s.spacing_cov_percent),
            s.spacing_n,
            s.lumen_reduction_percent.mean,
            s.lumen_reduction_percent.sd,
            s.lumen_reduction_percent.n,
            s.time_per_stitch_s.mean,
            s.time_per_stitch_s.sd,
            s.time_per_stitch_s.n,
        );
        let _ = writeln!(
            md,
            "\nSimulated bite depth: {:.2} ± {:.2} mm over {} placements.",
            s.bite_mean_mm, s.bite_sd_mm, s.bite_n
        );
        if !with_fixtures {
            let _ = writeln!(md, "\nNo fixtures supplied; comparison columns omitted.");
        }
        if !self.tests.is_empty() {
            let _ = writeln!(md, "\n## One-way ANOVA with Tukey HSD (alpha 0.05)\n");
            for t in &self.tests {
                let flag = if t.from_summary { " [summary statistics]" } else { "" };
                let _ = writeln!(
                    md,
                    "- {}{flag}: F({}, {}) = {:.3}, p = {:.4}",
                    t.metric, t.anova.df_between, t.anova.df_within, t.anova.f, t.anova.p_value
                );
                if let Some(tk) = &t.tukey {
                    for p in tk.pairs.iter().filter(|p| p.significant) {
                        let _ = writeln!(md, "  - {} vs {}: q = {:.2} > {:.2}", t.groups[p.i], t.groups[p.j], p.q, tk.q_critical);
                    }
                }
            }
        }
        if self.degenerate {
            let _ = writeln!(md, "\n**Degenerate:** all placement COV% are zero.");
        }
        for w in &self.warnings {
            let _ = writeln!(md, "\nWarning: {w}");
        }
        md
    }
}

pub const RAW_CSV_HEADER: &str = "run,suture,side,bite_mm,spacing_mm";

/// One row per placement; spacing is the arc to the angularly next
/// placement on the same side.
pub fn raw_measurements_csv(runs: &[RunOutcome]) -> String {
    let mut out = String::from(RAW_CSV_HEADER);
    out.push('\n');
    for r in runs {
        for side in [Side::Right, Side::Left] {
            let mut p = r.side_placements(side);
            p.sort_by(|a, b| wrap_deg(a.angular_position_deg).total_cmp(&wrap_deg(b.angular_position_deg)));
            let spacings = if p.len() >= 2 {
                spacings_mm(&p, r.vessel_diameter_mm)
            } else {
                vec![f64::NAN; p.len()]
            };
            let mut rows: Vec<(usize, f64, f64)> =
                p.iter().zip(&spacings).map(|(pl, s)| (pl.site, pl.bite_depth_mm, *s)).collect();
            rows.sort_by_key(|row| row.0);
            for (site, bite, spacing) in rows {
                let spacing = if spacing.is_nan() { String::new() } else { format!("{spacing:.4}") };
                let _ = writeln!(out, "{},{},{},{bite:.4},{spacing}", r.run, site + 1, side.as_str());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn placements_at(angles: &[f64], bite: f64) -> Vec<Placement> {
        angles
            .iter()
            .enumerate()
            .map(|(site, a)| Placement {
                site,
                bite_depth_mm: bite,
                angular_position_deg: *a,
                success: true,
            })
            .collect()
    }

    #[test]
    fn cov_examples() {
        assert_eq!(cov_percent(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert_eq!(cov_percent(&[1.0, 2.0, 3.0]).unwrap(), 50.0);
        assert!(matches!(cov_percent(&[-1.0, 1.0]), Err(MetricsError::Undefined(_))));
        assert!(cov_percent(&[1.0]).is_err());
    }

    #[test]
    fn lumen_examples() {
        assert_eq!(lumen_reduction(4.5, 4.5).unwrap(), 0.0);
        assert!((lumen_reduction(3.5, 4.5).unwrap() - 39.51).abs() < 0.01);
        assert!((lumen_reduction(0.1, 4.5).unwrap() - 99.95).abs() < 0.01);
        let r = lumen_reduction_checked(5.0, 4.5).unwrap();
        assert!(r.clamped && r.percent == 0.0);
        assert!(lumen_reduction(0.0, 4.5).is_err());
        assert!(lumen_reduction(3.0, -1.0).is_err());
    }

    #[test]
    fn pin_gauge_examples() {
        assert_eq!(pin_gauge(3.7).unwrap(), 3.5);
        assert_eq!(pin_gauge(4.0).unwrap(), 4.0);
        let r = pin_gauge_checked(0.3).unwrap();
        assert_eq!(r.measured_mm, 0.0);
        assert!(r.below_smallest);
        assert!(pin_gauge(-0.1).is_err());
    }

    #[test]
    fn even_placements_have_zero_spacing_cov() {
        let p = placements_at(&[0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0], 1.5);
        let s = placement_stats(&p, 4.5).unwrap();
        for sp in &s.spacings_mm {
            assert!((sp - PI * 4.5 / 8.0).abs() < 1e-12);
        }
        assert!(s.spacing_cov_percent.abs() < 1e-9);
        assert_eq!(s.bite_cov_percent, 0.0);
        assert!(placement_stats(&p[..1], 4.5).is_err());
    }

    #[test]
    fn wraparound_spacing_sorted_by_angle() {
        let p = placements_at(&[350.0, 10.0, 100.0], 1.0);
        let s = spacings_mm(&p, 360.0 / PI);
        assert_eq!(s.len(), 3);
        let mut got = s.clone();
        got.sort_by(f64::total_cmp);
        let want = [20.0, 90.0, 250.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "{got:?}");
        }
    }

    #[test]
    fn identical_groups_give_f_zero() {
        let g = vec![vec![1.0, 2.0, 3.0]; 3];
        let r = anova_oneway(&g).unwrap();
        assert_eq!((r.f, r.p_value), (0.0, 1.0));
        let t = tukey_hsd(&g).unwrap();
        assert!(t.pairs.iter().all(|p| !p.significant));
        let flat = vec![vec![4.0, 4.0], vec![4.0, 4.0]];
        assert_eq!(anova_oneway(&flat).unwrap().p_value, 1.0);
    }

    #[test]
    fn q_table_interpolation() {
        assert_eq!(q_critical_05(3, 10).unwrap().q, 3.8768);
        let mid = q_critical_05(2, 22).unwrap().q;
        assert!((mid - (2.9500 + 2.9188) / 2.0).abs() < 1e-12);
        let low = q_critical_05(4, 3).unwrap();
        assert!(low.extrapolated);
        assert_eq!(low.q, 5.2183);
        assert_eq!(q_critical_05(2, 120).unwrap().q, 2.8000);
        let big = q_critical_05(2, 1_000_000).unwrap().q;
        assert!((big - 2.7718).abs() < 1e-3);
        assert!(q_critical_05(7, 10).is_err());
        assert!(q_critical_05(1, 10).is_err());
    }

    #[test]
    fn fixtures_round_trip() {
        let f = OutcomeFixtures::embedded();
        assert_eq!(f.groups.len(), 4);
        let robot = f.robot().unwrap();
        assert_eq!(robot.time_per_stitch_s.mean, 353.0);
        assert_eq!(robot.time_per_stitch_s.sd, 40.0);
        assert_eq!(robot.bite_cov_percent.value, 33.0);
        assert_eq!(robot.spacing_cov_percent.value, 30.0);
        assert!(OutcomeFixtures::parse(&FIXTURES_JSON.replace("\"version\": 1", "\"version\": 9")).is_err());
    }

    fn run(run: usize, bites: &[f64], angles: &[f64], time: f64, lumen: f64) -> RunOutcome {
        let mut placements = Vec::new();
        for side in [Side::Right, Side::Left] {
            for (site, (b, a)) in bites.iter().zip(angles).enumerate() {
                placements.push((
                    side,
                    Placement {
                        site,
                        bite_depth_mm: *b,
                        angular_position_deg: *a,
                        success: true,
                    },
                ));
            }
        }
        RunOutcome {
            run,
            seed: run as u64,
            placements,
            vessel_diameter_mm: 4.5,
            lumen_reduction_percent: lumen,
            time_per_stitch_s: time,
        }
    }

    #[test]
    fn report_flags_noiseless_runs() {
        let angles: Vec<f64> = (0..8).map(|i| i as f64 * 45.0).collect();
        let runs: Vec<RunOutcome> = (0..3).map(|i| run(i, &[1.5; 8], &angles, 350.0 + i as f64, 30.0)).collect();
        let fx = OutcomeFixtures::embedded();
        let rep = compare_report(&runs, Some(&fx)).unwrap();
        assert!(rep.degenerate);
        let md = rep.to_markdown();
        assert!(md.contains("353±40 (n=5)"), "{md}");
        assert!(md.contains("Degenerate"));
        let empty = OutcomeFixtures {
            version: 1,
            source: String::new(),
            groups: vec![],
        };
        let rep = compare_report(&runs, Some(&empty)).unwrap();
        assert!(rep.fixtures.is_none());
        assert!(rep.tests.is_empty());
        assert!(compare_report(&[], None).is_err());
    }

    #[test]
    fn raw_csv_rows() {
        let angles: Vec<f64> = (0..8).map(|i| i as f64 * 45.0).collect();
        let csv = raw_measurements_csv(&[run(0, &[1.5; 8], &angles, 1.0, 0.0)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], RAW_CSV_HEADER);
        assert_eq!(lines.len(), 17);
        assert_eq!(lines[1], "0,1,right,1.5000,1.7671");
    }
}
