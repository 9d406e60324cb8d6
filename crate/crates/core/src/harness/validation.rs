//! Model-vs-simulator comparison over parameter sets drawn from a manifest.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, YieldError};
use crate::layout::PadBlockGrid;
use crate::simulator::{simulate, BondMode};

use super::cache::LutCache;
use super::config::ProcessConfig;
use super::model::run_model;
use super::YieldReport;

pub const DEFAULT_MANIFEST: &str = include_str!("../../validation_manifest.toml");

pub const COMPONENTS: [&str; 4] = ["ovl", "cr", "df", "total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub sets: usize,
    pub seed: u64,
    pub modes: Vec<BondMode>,
    pub wafers: usize,
    pub dies: usize,
    pub pitch_um: [f64; 2],
    pub die_area_mm2: Vec<f64>,
    pub patterns: Vec<String>,
    pub defect_density_cm2: [f64; 2],
    pub misalignment_std_nm: [f64; 2],
    pub translation_mean_nm: [f64; 2],
    pub translation_std_nm: [f64; 2],
    pub rotation_mean_urad: [f64; 2],
    pub rotation_std_urad: [f64; 2],
    pub magnification_mean_ppm: [f64; 2],
    pub magnification_std_ppm: [f64; 2],
    pub recess_mean_nm: [f64; 2],
    pub recess_std_nm: [f64; 2],
    pub cu_expansion_nm: [f64; 2],
}

impl Default for Manifest {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_MANIFEST).expect("bundled manifest parses")
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    uniform(rng, [lo.ln(), hi.ln()]).exp()
}

impl Manifest {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| YieldError::Config(e.to_string()))?;
        if m.modes.is_empty() || m.die_area_mm2.is_empty() || m.patterns.is_empty() {
            return Err(YieldError::Config("manifest needs at least one mode, die size and pattern".into()));
        }
        if !(m.pitch_um[0] > 0.0 && m.defect_density_cm2[0] > 0.0) {
            return Err(YieldError::Config("manifest pitch and density ranges must be positive".into()));
        }
        Ok(m)
    }

    /// Draws the parameter sets on top of `base`. Modes alternate.
    pub fn draw(&self, base: &ProcessConfig) -> Result<Vec<ProcessConfig>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.sets);
        for i in 0..self.sets {
            let mut c = base.clone();
            c.mode = self.modes[i % self.modes.len()];
            let pitch = log_uniform(&mut rng, self.pitch_um);
            let side = self.die_area_mm2.choose(&mut rng).expect("non-empty").sqrt();
            let d = &mut c.design;
            d.top_pad_um = pitch * 0.3;
            d.bottom_pad_um = pitch * 0.5;
            d.pitch_um = pitch;
            d.die_width_mm = side;
            d.die_height_mm = side;
            c.layout.pattern = self.patterns.choose(&mut rng).expect("non-empty").clone();
            c.layout.seed = i as u64;

            let p = &mut c.process;
            p.defect_density_cm2 = log_uniform(&mut rng, self.defect_density_cm2);
            p.misalignment_std_nm = uniform(&mut rng, self.misalignment_std_nm);
            p.translation_x_mean_nm = uniform(&mut rng, self.translation_mean_nm);
            p.translation_y_mean_nm = uniform(&mut rng, self.translation_mean_nm);
            p.translation_x_std_nm = uniform(&mut rng, self.translation_std_nm);
            p.translation_y_std_nm = uniform(&mut rng, self.translation_std_nm);
            p.rotation_mean_urad = uniform(&mut rng, self.rotation_mean_urad);
            p.rotation_std_urad = uniform(&mut rng, self.rotation_std_urad);
            p.warpage_mean_um = None;
            p.warpage_std_um = None;
            p.magnification_mean_ppm = Some(uniform(&mut rng, self.magnification_mean_ppm));
            p.magnification_std_ppm = Some(uniform(&mut rng, self.magnification_std_ppm));
            let mu = uniform(&mut rng, self.recess_mean_nm);
            let sd = uniform(&mut rng, self.recess_std_nm);
            (p.recess_top_mean_nm, p.recess_bottom_mean_nm) = (mu, mu);
            (p.recess_top_std_nm, p.recess_bottom_std_nm) = (sd, sd);
            p.cu_expansion_nm = uniform(&mut rng, self.cu_expansion_nm);

            c.simulation.wafers = self.wafers;
            c.simulation.dies = self.dies;
            c.simulation.seed = self.seed.wrapping_add(i as u64);
            c.validate()?;
            out.push(c);
        }
        Ok(out)
    }
}

/// Produces a yield report for a configuration and a layout built for its mode.
pub trait Evaluator {
    fn evaluate(&self, cfg: &ProcessConfig, layout: &PadBlockGrid) -> Result<YieldReport>;
}

pub struct ModelEvaluator<'a> {
    pub cache: &'a LutCache,
}

impl Evaluator for ModelEvaluator<'_> {
    fn evaluate(&self, cfg: &ProcessConfig, layout: &PadBlockGrid) -> Result<YieldReport> {
        Ok(run_model(cfg, cfg.mode, layout, self.cache)?.report)
    }
}

pub struct SimEvaluator;

impl Evaluator for SimEvaluator {
    fn evaluate(&self, cfg: &ProcessConfig, layout: &PadBlockGrid) -> Result<YieldReport> {
        let start = std::time::Instant::now();
        let sc = cfg.sim_config(cfg.mode);
        let counts = simulate(&sc, layout)?;
        Ok(YieldReport::from_counts(cfg.mode, &counts, sc.seed, sc.samples, None, start.elapsed().as_secs_f64()))
    }
}

impl<F: Fn(&ProcessConfig, &PadBlockGrid) -> Result<YieldReport>> Evaluator for F {
    fn evaluate(&self, cfg: &ProcessConfig, layout: &PadBlockGrid) -> Result<YieldReport> {
        self(cfg, layout)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub set_id: usize,
    pub component: &'static str,
    pub y_model: f64,
    pub y_sim: f64,
    /// `max(0.02, 3·sqrt(y(1−y)/n))` with `n` the simulated dies.
    pub tolerance: f64,
}

impl ScatterRow {
    pub fn within_tolerance(&self) -> bool {
        (self.y_model - self.y_sim).abs() <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub rows: Vec<ScatterRow>,
    pub mse: BTreeMap<&'static str, f64>,
}

impl Validation {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("set_id,component,y_model,y_sim\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.set_id, r.component, r.y_model, r.y_sim));
        }
        s
    }

    pub fn mse_csv(&self) -> String {
        let mut s = String::from("component,mse\n");
        for c in COMPONENTS {
            s.push_str(&format!("{c},{}\n", self.mse[c]));
        }
        s
    }

    pub fn failures(&self) -> Vec<&ScatterRow> {
        self.rows.iter().filter(|r| !r.within_tolerance()).collect()
    }
}

fn components(r: &YieldReport) -> [f64; 4] {
    [r.y_ovl, r.y_cr, r.y_df, r.y_total]
}

pub fn tolerance(y_sim: f64, dies: Option<u64>) -> f64 {
    let ci = match dies {
        Some(n) if n > 0 => (y_sim * (1.0 - y_sim) / n as f64).sqrt(),
        _ => 0.0,
    };
    (3.0 * ci).max(0.02)
}

/// Evaluates every set with both evaluators. Each set's layout is built for
/// its own mode.
pub fn run_validation(sets: &[ProcessConfig], model: &dyn Evaluator, sim: &dyn Evaluator) -> Result<Validation> {
    if sets.len() < 2 {
        return Err(YieldError::Config("validation needs at least two parameter sets".into()));
    }
    let mut rows = Vec::with_capacity(sets.len() * COMPONENTS.len());
    for (id, cfg) in sets.iter().enumerate() {
        let layout = cfg.build_layout(cfg.mode)?;
        let m = model.evaluate(cfg, &layout)?;
        let s = sim.evaluate(cfg, &layout)?;
        log::info!("set {id} ({} {}): model {:.4} sim {:.4}", cfg.mode, cfg.layout.pattern, m.y_total, s.y_total);
        for ((c, ym), ys) in COMPONENTS.iter().zip(components(&m)).zip(components(&s)) {
            rows.push(ScatterRow { set_id: id, component: c, y_model: ym, y_sim: ys, tolerance: tolerance(ys, s.dies) });
        }
    }
    let mse = COMPONENTS
        .iter()
        .map(|&c| {
            let (sum, n) = rows
                .iter()
                .filter(|r| r.component == c)
                .fold((0.0, 0usize), |(s, n), r| (s + (r.y_model - r.y_sim).powi(2), n + 1));
            (c, sum / n as f64)
        })
        .collect();
    Ok(Validation { rows, mse })
}
