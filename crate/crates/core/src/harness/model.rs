//! Analytical yield for one configuration and layout.

use std::time::Instant;

use crate::defect::{lambda_d2w, lambda_w2w, length_grid, radius_grid, theta_grid, LambdaEstimate, LutD2W, LutW2W};
use crate::error::{Result, YieldError};
use crate::layout::{cu_pattern_density, generate_wafer_map, PadBlockGrid};
use crate::overlay::{max_allowed_misalignment, yield_ovl_d2w, yield_ovl_w2w, FunctionalRegion};
use crate::recess::{yield_recess, PadCounts, RecessEvaluation};
use crate::simulator::BondMode;

use super::cache::LutCache;
use super::config::{check_layout_extent, ProcessConfig};
use super::{Source, YieldReport};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelResult {
    pub report: YieldReport,
    /// Maximum allowed misalignment, µm.
    pub delta_um: f64,
    pub lambda: LambdaEstimate,
    pub recess: RecessEvaluation,
}

/// Expected fatal defects per die for `layout`, via the cache.
pub fn defect_lambda(cfg: &ProcessConfig, mode: BondMode, layout: &PadBlockGrid, cache: &LutCache) -> Result<LambdaEstimate> {
    let p = cfg.defect_params();
    p.validate()?;
    match mode {
        BondMode::W2W => {
            let r = cfg.wafer_radius_um();
            let lut = cache.w2w(
                layout,
                &length_grid(&p, r, cfg.grid.length_nodes),
                &theta_grid(cfg.grid.theta_nodes),
                cfg.main_void_term(),
            )?;
            lambda_w2w(&lut, r, &p)
        }
        BondMode::D2W => {
            let r = cfg.die()?.effective_radius_um();
            let lut = cache.d2w(layout, &radius_grid(&p, r, cfg.grid.radius_nodes), cfg.model.disk_rule)?;
            lambda_d2w(&lut, r, &p)
        }
    }
}

/// Cache kind and fingerprint of the table [`defect_lambda`] uses.
pub fn lut_key(cfg: &ProcessConfig, mode: BondMode, layout: &PadBlockGrid) -> Result<(&'static str, String)> {
    let p = cfg.defect_params();
    Ok(match mode {
        BondMode::W2W => (
            "w2w",
            LutW2W::fingerprint_for(
                layout,
                &length_grid(&p, cfg.wafer_radius_um(), cfg.grid.length_nodes),
                &theta_grid(cfg.grid.theta_nodes),
                cfg.main_void_term(),
            ),
        ),
        BondMode::D2W => {
            let r = cfg.die()?.effective_radius_um();
            ("d2w", LutD2W::fingerprint_for(layout, &radius_grid(&p, r, cfg.grid.radius_nodes), cfg.model.disk_rule))
        }
    })
}

/// Evaluates the overlay, recess and defect components and multiplies them.
/// The layout's cell size must be the configured grid for `mode`.
pub fn run_model(cfg: &ProcessConfig, mode: BondMode, layout: &PadBlockGrid, cache: &LutCache) -> Result<ModelResult> {
    let start = Instant::now();
    let die = cfg.die()?;
    check_layout_extent(layout, &die)?;
    let res = cfg.resolution_um(mode);
    let (gx, gy) = layout.resolution();
    if (gx - res).abs() > 1e-9 * res || (gy - res).abs() > 1e-9 * res {
        return Err(YieldError::Config(format!(
            "layout cells are {gx} x {gy} µm but the {mode} grid is {res} µm"
        )));
    }

    let ovl = cfg.overlay_distribution();
    ovl.validate()?;
    let params = ovl.mean_params();
    let delta = max_allowed_misalignment(&die, params.k_ca, params.k_cd)?;
    let region = FunctionalRegion::from_layout(layout)?;
    let y_ovl = match mode {
        BondMode::W2W => yield_ovl_w2w(delta, &params, &region, &generate_wafer_map(&cfg.wafer()?)?)?,
        BondMode::D2W => yield_ovl_d2w(delta, &params, &region),
    };

    let recess = yield_recess(&cfg.recess_params(), cu_pattern_density(&die, layout), &PadCounts::from_layout(layout, die.pitch_um))?;
    let lambda = defect_lambda(cfg, mode, layout, cache)?;
    let y_df = lambda.yield_();
    let y_cr = recess.yield_cr;

    let report = YieldReport {
        mode,
        source: Source::Model,
        y_ovl,
        y_cr,
        y_df,
        y_total: y_ovl * y_cr * y_df,
        runtime_s: start.elapsed().as_secs_f64(),
        seed: None,
        samples: None,
        dies: None,
        cv: None,
    };
    Ok(ModelResult { report, delta_um: delta, lambda, recess })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_components_and_product() {
        let cfg = ProcessConfig::default();
        let layout = cfg.build_layout(BondMode::W2W).unwrap();
        let m = run_model(&cfg, BondMode::W2W, &layout, &LutCache::in_memory()).unwrap();
        let r = &m.report;
        for y in [r.y_ovl, r.y_cr, r.y_df, r.y_total] {
            assert!(y > 0.0 && y <= 1.0, "{r:?}");
        }
        assert!((r.y_total - r.y_ovl * r.y_cr * r.y_df).abs() < 1e-12);
        assert!((m.delta_um - 0.234331).abs() < 1e-5);
    }

    #[test]
    fn zero_density_leaves_other_components() {
        let cfg = ProcessConfig::from_toml_str("", &["process.defect_density_cm2=0.0".into()]).unwrap();
        let layout = cfg.build_layout(BondMode::D2W).unwrap();
        let r = run_model(&cfg, BondMode::D2W, &layout, &LutCache::in_memory()).unwrap().report;
        assert_eq!(r.y_df, 1.0);
        assert!((r.y_total - r.y_ovl * r.y_cr).abs() < 1e-12);
    }

    #[test]
    fn resolution_mismatch_is_config_error() {
        let cfg = ProcessConfig::default();
        let layout = cfg.build_layout(BondMode::D2W).unwrap();
        let e = run_model(&cfg, BondMode::W2W, &layout, &LutCache::in_memory()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn cached_sweep_matches_uncached() {
        let dir = tempfile::tempdir().unwrap();
        let cache = LutCache::new(dir.path()).unwrap();
        let base = ProcessConfig::default();
        let layout = base.build_layout(BondMode::W2W).unwrap();
        for k in 1..=10 {
            let mut cfg = base.clone();
            cfg.process.defect_density_cm2 = 0.02 * k as f64;
            let a = defect_lambda(&cfg, BondMode::W2W, &layout, &cache).unwrap();
            let b = defect_lambda(&cfg, BondMode::W2W, &layout, &LutCache::in_memory()).unwrap();
            assert_eq!(a.lambda.to_bits(), b.lambda.to_bits());
        }
        assert_eq!(cache.builds(), 1);
        let (kind, fp) = lut_key(&base, BondMode::W2W, &layout).unwrap();
        assert!(cache.path_for(kind, &fp).unwrap().exists());
    }
}
