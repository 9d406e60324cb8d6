//! Process configuration: TOML with `design`, `process`, `model`, `grid`,
//! `simulation` and `layout` sections. Every field has a default, unknown
//! keys are rejected and field names carry their unit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::defect::{DefectParams, DiskRule, MainVoidTerm};
use crate::error::{Result, YieldError};
use crate::layout::{
    build_layout, build_random_redundant_layout, DieSpec, Fractions, PadBlockGrid, Pattern, RedundancyScheme,
    WaferSpec,
};
use crate::overlay::{magnification_from_warpage, OverlayDistribution};
use crate::recess::{RecessParams, DEFAULT_BONDING_CURVE};
use crate::simulator::{BondMode, Channels, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessConfig {
    pub mode: BondMode,
    pub design: Design,
    pub process: Process,
    pub model: Model,
    pub grid: Grid,
    pub simulation: Simulation,
    pub layout: LayoutSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Design {
    pub die_width_mm: f64,
    pub die_height_mm: f64,
    pub pitch_um: f64,
    pub top_pad_um: f64,
    pub bottom_pad_um: f64,
    pub wafer_diameter_mm: f64,
    pub edge_exclusion_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Process {
    pub misalignment_mean_nm: f64,
    pub misalignment_std_nm: f64,
    pub translation_x_mean_nm: f64,
    pub translation_x_std_nm: f64,
    pub translation_y_mean_nm: f64,
    pub translation_y_std_nm: f64,
    pub rotation_mean_urad: f64,
    pub rotation_std_urad: f64,
    /// Either magnification or warpage, not both. Neither means 0.05 (0.01) ppm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub magnification_mean_ppm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub magnification_std_ppm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warpage_mean_um: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warpage_std_um: Option<f64>,
    pub k_mag_per_m: f64,
    pub defect_density_cm2: f64,
    pub particle_min_thickness_um: f64,
    pub particle_shape_z: f64,
    pub recess_top_mean_nm: f64,
    pub recess_top_std_nm: f64,
    pub recess_bottom_mean_nm: f64,
    pub recess_bottom_std_nm: f64,
    pub cu_expansion_nm: f64,
    pub roughness_std_nm: f64,
    pub roughness_radius_um: f64,
    pub adhesion_energy_j_m2: f64,
    pub dielectric_modulus_gpa: f64,
    pub dielectric_poisson_ratio: f64,
    pub dielectric_thickness_um: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Model {
    pub k_ca: f64,
    pub k_cd: f64,
    pub k_peel_n_m3: f64,
    pub h0_nm: f64,
    pub k_r_per_sqrt_um: f64,
    pub k_r0_sqrt_um: f64,
    pub k_l_per_sqrt_um: f64,
    pub k_n_per_um_sqrt_um: f64,
    pub k_s_sqrt_um: f64,
    /// `[θ_ad, A_b*]` pairs.
    pub bonding_curve: Vec<[f64; 2]>,
    /// Adds the main void to the W2W tail element.
    pub w2w_main_void: bool,
    pub disk_rule: DiskRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub w2w_um: f64,
    pub d2w_um: f64,
    pub length_nodes: usize,
    pub theta_nodes: usize,
    pub radius_nodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Simulation {
    pub wafers: usize,
    pub dies: usize,
    pub seed: u64,
    pub cv_target: f64,
    /// Upper end of the convergence ladder, in wafers (W2W) or dies (D2W).
    pub max_wafers: usize,
    pub max_dies: usize,
    pub tail_end_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    /// full, sparse, peripheral or centralized.
    pub pattern: String,
    pub critical_fraction: f64,
    pub redundant_fraction: f64,
    pub dummy_fraction: f64,
    pub seed: u64,
    /// none, dedicated or shared. Anything but none builds a die made
    /// entirely of redundant blocks of the grid size.
    pub redundancy: String,
    pub spacing_um: f64,
    pub mains_per_spare: usize,
    /// Layout file; overrides the generated pattern.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        Self {
            mode: BondMode::W2W,
            design: Design::default(),
            process: Process::default(),
            model: Model::default(),
            grid: Grid::default(),
            simulation: Simulation::default(),
            layout: LayoutSection::default(),
        }
    }
}

impl Default for Design {
    fn default() -> Self {
        Self {
            die_width_mm: 10.0,
            die_height_mm: 10.0,
            pitch_um: 1.0,
            top_pad_um: 0.3,
            bottom_pad_um: 0.5,
            wafer_diameter_mm: 300.0,
            edge_exclusion_mm: 0.0,
        }
    }
}

impl Default for Process {
    fn default() -> Self {
        let r = RecessParams::default();
        let d = DefectParams::default();
        Self {
            misalignment_mean_nm: 0.0,
            misalignment_std_nm: 20.0,
            translation_x_mean_nm: 0.0,
            translation_x_std_nm: 20.0,
            translation_y_mean_nm: 0.0,
            translation_y_std_nm: 20.0,
            rotation_mean_urad: 0.05,
            rotation_std_urad: 0.01,
            magnification_mean_ppm: None,
            magnification_std_ppm: None,
            warpage_mean_um: None,
            warpage_std_um: None,
            k_mag_per_m: 0.09,
            defect_density_cm2: d.d_t,
            particle_min_thickness_um: d.t0,
            particle_shape_z: d.z,
            recess_top_mean_nm: r.mu_top_nm,
            recess_top_std_nm: r.sigma_top_nm,
            recess_bottom_mean_nm: r.mu_bot_nm,
            recess_bottom_std_nm: r.sigma_bot_nm,
            cu_expansion_nm: r.cu_expansion_total_nm,
            roughness_std_nm: r.sigma_z_nm,
            roughness_radius_um: r.r_z_um,
            adhesion_energy_j_m2: r.w_j_m2,
            dielectric_modulus_gpa: r.e_d_gpa,
            dielectric_poisson_ratio: r.poisson_ratio,
            dielectric_thickness_um: r.t_d_um,
        }
    }
}

impl Default for Model {
    fn default() -> Self {
        let r = RecessParams::default();
        let d = DefectParams::default();
        Self {
            k_ca: 0.5,
            k_cd: 0.5,
            k_peel_n_m3: r.k_peel,
            h0_nm: r.h0_nm,
            k_r_per_sqrt_um: d.k_r,
            k_r0_sqrt_um: d.k_r0,
            k_l_per_sqrt_um: d.k_l,
            k_n_per_um_sqrt_um: d.k_n,
            k_s_sqrt_um: d.k_s,
            bonding_curve: DEFAULT_BONDING_CURVE.iter().map(|&(a, b)| [a, b]).collect(),
            w2w_main_void: false,
            disk_rule: DiskRule::default(),
        }
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            w2w_um: 400.0,
            d2w_um: 100.0,
            length_nodes: crate::defect::DEFAULT_LENGTH_NODES,
            theta_nodes: crate::defect::DEFAULT_THETA_NODES,
            radius_nodes: crate::defect::DEFAULT_RADIUS_NODES,
        }
    }
}

impl Default for Simulation {
    fn default() -> Self {
        Self {
            wafers: 10,
            dies: 10_000,
            seed: 1,
            cv_target: 0.01,
            max_wafers: 1_024,
            max_dies: 1 << 20,
            tail_end_ratio: 0.25,
        }
    }
}

impl Default for LayoutSection {
    fn default() -> Self {
        Self {
            pattern: "full".into(),
            critical_fraction: 0.2,
            redundant_fraction: 0.5,
            dummy_fraction: 0.3,
            seed: 0,
            redundancy: "none".into(),
            spacing_um: 400.0,
            mains_per_spare: 20,
            file: None,
        }
    }
}

fn config_err(msg: impl std::fmt::Display) -> YieldError {
    YieldError::Config(msg.to_string())
}

/// Applies `section.key=value` to a TOML table. The value is parsed as a
/// TOML literal and taken as a bare string if that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override `{assignment}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| config_err(format!("`{k}` in `{path}` is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ProcessConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.process;
        let mag = p.magnification_mean_ppm.is_some() || p.magnification_std_ppm.is_some();
        let warp = p.warpage_mean_um.is_some() || p.warpage_std_um.is_some();
        if mag && warp {
            return Err(config_err("give either magnification_*_ppm or warpage_*_um, not both"));
        }
        if !(self.grid.w2w_um > 0.0 && self.grid.d2w_um > 0.0) {
            return Err(config_err("grid resolutions must be positive"));
        }
        if self.grid.length_nodes < 2 || self.grid.theta_nodes < 1 || self.grid.radius_nodes < 2 {
            return Err(config_err("integration grids need at least two length/radius nodes and one angle"));
        }
        if self.simulation.seed > i64::MAX as u64 || self.layout.seed > i64::MAX as u64 {
            return Err(config_err("seeds must fit in a signed 64-bit integer"));
        }
        if self.simulation.cv_target <= 0.0 {
            return Err(config_err("cv_target must be positive"));
        }
        self.pattern()?;
        self.redundancy()?;
        self.die()?;
        self.overlay_distribution().validate()?;
        self.defect_params().validate()?;
        self.recess_params().validate()?;
        self.sim_config(self.mode).validate()
    }

    pub fn die(&self) -> Result<DieSpec> {
        let d = &self.design;
        DieSpec::new(d.die_width_mm, d.die_height_mm, d.pitch_um, d.top_pad_um, d.bottom_pad_um)
    }

    pub fn wafer_radius_um(&self) -> f64 {
        self.design.wafer_diameter_mm * 500.0
    }

    pub fn wafer(&self) -> Result<WaferSpec> {
        Ok(WaferSpec {
            radius_mm: self.design.wafer_diameter_mm / 2.0,
            die: self.die()?,
            edge_exclusion_mm: self.design.edge_exclusion_mm,
        })
    }

    /// Magnification `(mean, std)`, dimensionless.
    pub fn magnification(&self) -> (f64, f64) {
        let p = &self.process;
        if p.warpage_mean_um.is_some() || p.warpage_std_um.is_some() {
            (
                magnification_from_warpage(p.warpage_mean_um.unwrap_or(0.0), p.k_mag_per_m),
                magnification_from_warpage(p.warpage_std_um.unwrap_or(0.0), p.k_mag_per_m),
            )
        } else {
            (p.magnification_mean_ppm.unwrap_or(0.05) * 1e-6, p.magnification_std_ppm.unwrap_or(0.01) * 1e-6)
        }
    }

    pub fn overlay_distribution(&self) -> OverlayDistribution {
        let p = &self.process;
        let nm = |m: f64, s: f64| (m * 1e-3, s * 1e-3);
        OverlayDistribution {
            u: nm(p.misalignment_mean_nm, p.misalignment_std_nm),
            tx: nm(p.translation_x_mean_nm, p.translation_x_std_nm),
            ty: nm(p.translation_y_mean_nm, p.translation_y_std_nm),
            alpha: (p.rotation_mean_urad * 1e-6, p.rotation_std_urad * 1e-6),
            magnification: self.magnification(),
            k_ca: self.model.k_ca,
            k_cd: self.model.k_cd,
        }
    }

    pub fn defect_params(&self) -> DefectParams {
        let m = &self.model;
        DefectParams {
            d_t: self.process.defect_density_cm2,
            t0: self.process.particle_min_thickness_um,
            z: self.process.particle_shape_z,
            k_r: m.k_r_per_sqrt_um,
            k_r0: m.k_r0_sqrt_um,
            k_l: m.k_l_per_sqrt_um,
            k_n: m.k_n_per_um_sqrt_um,
            k_s: m.k_s_sqrt_um,
        }
    }

    pub fn recess_params(&self) -> RecessParams {
        let p = &self.process;
        RecessParams {
            mu_top_nm: p.recess_top_mean_nm,
            sigma_top_nm: p.recess_top_std_nm,
            mu_bot_nm: p.recess_bottom_mean_nm,
            sigma_bot_nm: p.recess_bottom_std_nm,
            cu_expansion_total_nm: p.cu_expansion_nm,
            sigma_z_nm: p.roughness_std_nm,
            r_z_um: p.roughness_radius_um,
            e_d_gpa: p.dielectric_modulus_gpa,
            poisson_ratio: p.dielectric_poisson_ratio,
            w_j_m2: p.adhesion_energy_j_m2,
            t_d_um: p.dielectric_thickness_um,
            k_peel: self.model.k_peel_n_m3,
            h0_nm: self.model.h0_nm,
            bonding_curve: self.model.bonding_curve.iter().map(|&[a, b]| (a, b)).collect(),
        }
    }

    pub fn main_void_term(&self) -> Option<MainVoidTerm> {
        self.model.w2w_main_void.then(|| MainVoidTerm {
            rule: self.model.disk_rule,
            ..MainVoidTerm::from_params(&self.defect_params())
        })
    }

    pub fn resolution_um(&self, mode: BondMode) -> f64 {
        match mode {
            BondMode::W2W => self.grid.w2w_um,
            BondMode::D2W => self.grid.d2w_um,
        }
    }

    pub fn sim_config(&self, mode: BondMode) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            mode,
            samples: match mode {
                BondMode::W2W => s.wafers,
                BondMode::D2W => s.dies,
            },
            seed: s.seed,
            die: DieSpec {
                width_mm: self.design.die_width_mm,
                height_mm: self.design.die_height_mm,
                pitch_um: self.design.pitch_um,
                top_pad_um: self.design.top_pad_um,
                bottom_pad_um: self.design.bottom_pad_um,
            },
            wafer_radius_mm: self.design.wafer_diameter_mm / 2.0,
            edge_exclusion_mm: self.design.edge_exclusion_mm,
            overlay: self.overlay_distribution(),
            defects: self.defect_params(),
            recess: self.recess_params(),
            tail_end_ratio: s.tail_end_ratio,
            channels: Channels::default(),
        }
    }

    pub fn max_samples(&self, mode: BondMode) -> usize {
        match mode {
            BondMode::W2W => self.simulation.max_wafers,
            BondMode::D2W => self.simulation.max_dies,
        }
    }

    pub fn pattern(&self) -> Result<Pattern> {
        self.layout.pattern.parse().map_err(|_| config_err(format!("unknown layout pattern `{}`", self.layout.pattern)))
    }

    pub fn fractions(&self) -> Fractions {
        Fractions {
            critical: self.layout.critical_fraction,
            redundant: self.layout.redundant_fraction,
            dummy: self.layout.dummy_fraction,
        }
    }

    pub fn redundancy(&self) -> Result<RedundancyScheme> {
        match self.layout.redundancy.as_str() {
            "none" => Ok(RedundancyScheme::None),
            "dedicated" => Ok(RedundancyScheme::Dedicated { spacing_um: self.layout.spacing_um }),
            "shared" => Ok(RedundancyScheme::Shared { mains_per_spare: self.layout.mains_per_spare }),
            other => Err(config_err(format!("unknown redundancy scheme `{other}` (none, dedicated, shared)"))),
        }
    }

    /// The layout for `mode`: read from `layout.file` when set, otherwise
    /// generated at the mode's grid resolution.
    pub fn build_layout(&self, mode: BondMode) -> Result<PadBlockGrid> {
        let die = self.die()?;
        let layout = if let Some(path) = &self.layout.file {
            let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{path}: {e}")))?;
            PadBlockGrid::from_csv(&text)?
        } else {
            let res = self.resolution_um(mode);
            match self.redundancy()? {
                RedundancyScheme::None => build_layout(self.pattern()?, &die, (res, res), self.fractions(), self.layout.seed)?,
                scheme => build_random_redundant_layout(&die, res, scheme, self.layout.seed)?.0,
            }
        };
        check_layout_extent(&layout, &die)?;
        Ok(layout)
    }
}

pub fn check_layout_extent(layout: &PadBlockGrid, die: &DieSpec) -> Result<()> {
    let (w, h) = layout.die_extent_um();
    if (w - die.width_um()).abs() > 1e-6 * w.max(1.0) || (h - die.height_um()).abs() > 1e-6 * h.max(1.0) {
        return Err(config_err(format!(
            "layout covers {w} x {h} µm but the configured die is {} x {} µm",
            die.width_um(),
            die.height_um()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_baseline() {
        let c = ProcessConfig::default();
        c.validate().unwrap();
        let o = c.overlay_distribution();
        assert_eq!(o.u, (0.0, 0.02));
        assert!((o.alpha.0 - 5e-8).abs() < 1e-20);
        assert!((o.magnification.0 - 5e-8).abs() < 1e-20);
        assert_eq!(c.defect_params(), DefectParams::default());
        assert_eq!(c.recess_params(), RecessParams::default());
        assert_eq!(c.wafer_radius_um(), 150_000.0);
    }

    #[test]
    fn roundtrip_is_identity() {
        let mut c = ProcessConfig::default();
        c.process.warpage_mean_um = Some(12.5);
        c.layout.file = Some("x.csv".into());
        c.mode = BondMode::D2W;
        let text = c.to_toml_string();
        let back: ProcessConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn overrides_and_rejections() {
        let c = ProcessConfig::from_toml_str(
            "mode = \"d2w\"\n[design]\npitch_um = 0.5\ntop_pad_um = 0.15\nbottom_pad_um = 0.25\n",
            &["process.defect_density_cm2=0.02".into(), "layout.pattern = sparse".into()],
        )
        .unwrap();
        assert_eq!(c.mode, BondMode::D2W);
        assert_eq!(c.design.pitch_um, 0.5);
        assert_eq!(c.process.defect_density_cm2, 0.02);
        assert_eq!(c.layout.pattern, "sparse");

        let unknown = ProcessConfig::from_toml_str("[design]\npitch = 1.0\n", &[]).unwrap_err();
        assert!(matches!(unknown, YieldError::Config(_)), "{unknown}");
        assert_eq!(unknown.exit_code(), 2);
        let both = ProcessConfig::from_toml_str(
            "[process]\nmagnification_mean_ppm = 0.1\nwarpage_mean_um = 5.0\n",
            &[],
        );
        assert!(both.is_err());
        assert!(ProcessConfig::from_toml_str("", &["layout.pattern=zigzag".into()]).is_err());
        assert!(ProcessConfig::from_toml_str("", &["nonsense".into()]).is_err());
        let bad_die = ProcessConfig::from_toml_str("", &["design.bottom_pad_um=1.2".into()]).unwrap_err();
        assert_eq!(bad_die.exit_code(), 2);
    }

    #[test]
    fn warpage_sets_magnification() {
        let c = ProcessConfig::from_toml_str("[process]\nwarpage_mean_um = 10.0\n", &[]).unwrap();
        assert!((c.magnification().0 - 0.9e-6).abs() < 1e-18);
        assert_eq!(c.magnification().1, 0.0);
    }

    #[test]
    fn layout_follows_mode_resolution() {
        let c = ProcessConfig::default();
        assert_eq!(c.build_layout(BondMode::W2W).unwrap().resolution(), (400.0, 400.0));
        assert_eq!(c.build_layout(BondMode::D2W).unwrap().resolution(), (100.0, 100.0));
        let r = ProcessConfig::from_toml_str("", &["layout.redundancy=\"dedicated\"".into(), "grid.w2w_um=200".into()])
            .unwrap();
        let l = r.build_layout(BondMode::W2W).unwrap();
        assert_eq!(l.groups().len(), 1250);
    }
}
