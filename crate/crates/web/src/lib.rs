//! Browser demo: critical-area maps, defect yield against density and the
//! void-tail length distribution.

use hbyield::defect::{log_space, DefectParams};
use hbyield::harness::model::defect_lambda;
use hbyield::harness::{LutCache, ProcessConfig};
use hbyield::layout::CellKind;
use hbyield::morphology::{critical_area_map, rasterize_segment, AnchorDomain};
use hbyield::simulator::BondMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(pattern: &str, mode: &str) -> Result<(ProcessConfig, BondMode), String> {
    let mode: BondMode = mode.parse().map_err(|e: hbyield::YieldError| e.to_string())?;
    let mut cfg = ProcessConfig::default();
    cfg.mode = mode;
    cfg.layout.pattern = pattern.to_string();
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((cfg, mode))
}

/// Anchor-domain bitmap for one defect. Cell codes: 0 nothing, 1 functional
/// block, 2 fatal anchor, 3 fatal anchor on a functional block.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaMap {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<u8>,
    pub area_mm2: f64,
}

/// W2W: a tail of `size_um` at `theta_deg`, anchored anywhere in the plane.
/// D2W: a main void of radius `size_um`, anchored on the die.
pub fn area_map(pattern: &str, mode: &str, size_um: f64, theta_deg: f64) -> Result<AreaMap, String> {
    let (cfg, mode) = config(pattern, mode)?;
    let layout = cfg.build_layout(mode).map_err(|e| e.to_string())?;
    let (gx, gy) = layout.resolution();
    let (se, domain) = match mode {
        BondMode::W2W => (rasterize_segment(size_um.max(0.0), theta_deg.to_radians(), gx, gy), AnchorDomain::Plane),
        BondMode::D2W => (cfg.model.disk_rule.rasterize(size_um.max(0.0), gx, gy), AnchorDomain::Die),
    };
    let (map, (r0, c0)) = critical_area_map(&layout, &se, domain);
    let (rows, cols) = (map.rows(), map.cols());
    let mut cells = vec![0u8; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (lr, lc) = (r as i64 - r0, c as i64 - c0);
            let inside = lr >= 0 && lc >= 0 && (lr as usize) < layout.rows() && (lc as usize) < layout.cols();
            let functional = inside && layout.get(lr as usize, lc as usize).is_functional();
            // rows flipped so that the die's y axis points up on screen
            cells[(rows - 1 - r) * cols + c] = u8::from(functional) + 2 * u8::from(map.get(r, c));
        }
    }
    Ok(AreaMap { rows, cols, cells, area_mm2: map.area() * 1e-6 })
}

/// Model defect yield at `points` log-spaced densities in `[dt_min, dt_max]`
/// cm⁻², as `[d_0, y_0, d_1, y_1, …]`.
pub fn yield_curve(pattern: &str, mode: &str, dt_min: f64, dt_max: f64, points: usize) -> Result<Vec<f64>, String> {
    if !(dt_min > 0.0 && dt_max > dt_min) || points < 2 {
        return Err("need 0 < dt_min < dt_max and at least two points".into());
    }
    let (mut cfg, mode) = config(pattern, mode)?;
    let layout = cfg.build_layout(mode).map_err(|e| e.to_string())?;
    let cache = LutCache::in_memory();
    let mut out = Vec::with_capacity(2 * points);
    for d in log_space(dt_min, dt_max, points) {
        cfg.process.defect_density_cm2 = d;
        let y = defect_lambda(&cfg, mode, &layout, &cache).map_err(|e| e.to_string())?.yield_();
        out.extend([d, y]);
    }
    Ok(out)
}

/// Sampled against analytical tail-length density on the baseline wafer.
/// Returns `[lo, hi, sampled, model]` per bin, densities in 1/µm, over
/// log-spaced bins up to ten breakpoint lengths.
pub fn tail_histogram(samples: usize, seed: u64, bins: usize) -> Vec<f64> {
    let cfg = ProcessConfig::default();
    let p = DefectParams { d_t: 1.0, ..cfg.defect_params() };
    let rw = cfg.wafer_radius_um();
    let ls = p.tail_breakpoint(rw);
    let edges = log_space(ls * 0.05, ls * 10.0, bins.max(1) + 1);
    let mut counts = vec![0u64; bins.max(1)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let t = p.sample_thickness(&mut rng);
        let l = p.void_geometry(rw * rng.gen::<f64>().sqrt(), t).tail_length;
        let i = edges.partition_point(|&e| e <= l);
        if i >= 1 && i < edges.len() {
            counts[i - 1] += 1;
        }
    }
    let mut out = Vec::with_capacity(4 * counts.len());
    for (i, &n) in counts.iter().enumerate() {
        let (lo, hi) = (edges[i], edges[i + 1]);
        let model = p.tail_length_moments(lo, hi, rw).0 / (hi - lo);
        out.extend([lo, hi, n as f64 / samples.max(1) as f64 / (hi - lo), model]);
    }
    out
}

/// Cell counts by kind for the status line: critical, redundant, other.
pub fn layout_summary(pattern: &str, mode: &str) -> Result<Vec<u32>, String> {
    let (cfg, mode) = config(pattern, mode)?;
    let layout = cfg.build_layout(mode).map_err(|e| e.to_string())?;
    let crit = layout.count(|k| k == CellKind::Critical) as u32;
    let red = layout.count(|k| matches!(k, CellKind::Redundant { .. })) as u32;
    Ok(vec![crit, red, (layout.rows() * layout.cols()) as u32 - crit - red])
}

#[cfg(target_arch = "wasm32")]
mod bindings {
    use wasm_bindgen::prelude::*;

    #[wasm_bindgen]
    pub struct CriticalAreaMap(super::AreaMap);

    #[wasm_bindgen]
    impl CriticalAreaMap {
        #[wasm_bindgen(getter)]
        pub fn rows(&self) -> usize {
            self.0.rows
        }

        #[wasm_bindgen(getter)]
        pub fn cols(&self) -> usize {
            self.0.cols
        }

        #[wasm_bindgen(getter)]
        pub fn cells(&self) -> Vec<u8> {
            self.0.cells.clone()
        }

        #[wasm_bindgen(getter, js_name = areaMm2)]
        pub fn area_mm2(&self) -> f64 {
            self.0.area_mm2
        }
    }

    #[wasm_bindgen(js_name = criticalAreaMap)]
    pub fn critical_area_map(pattern: &str, mode: &str, size_um: f64, theta_deg: f64) -> Result<CriticalAreaMap, JsError> {
        super::area_map(pattern, mode, size_um, theta_deg).map(CriticalAreaMap).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = yieldCurve)]
    pub fn yield_curve(pattern: &str, mode: &str, dt_min: f64, dt_max: f64, points: usize) -> Result<Vec<f64>, JsError> {
        super::yield_curve(pattern, mode, dt_min, dt_max, points).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = tailHistogram)]
    pub fn tail_histogram(samples: usize, seed: u32, bins: usize) -> Vec<f64> {
        super::tail_histogram(samples, u64::from(seed), bins)
    }

    #[wasm_bindgen(js_name = layoutSummary)]
    pub fn layout_summary(pattern: &str, mode: &str) -> Result<Vec<u32>, JsError> {
        super::layout_summary(pattern, mode).map_err(|e| JsError::new(&e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_map_codes_and_area() {
        let m = area_map("full", "d2w", 0.0, 0.0).unwrap();
        // a point defect on a fully critical die hits exactly the functional cells
        assert!(m.cells.iter().all(|&c| c == 0 || c == 3));
        assert!((m.area_mm2 - 100.0).abs() < 1e-9);
        let tail = area_map("peripheral", "w2w", 3000.0, 30.0).unwrap();
        assert!(tail.rows > 25 && tail.cols > 25);
        assert!(tail.cells.iter().any(|&c| c == 2));
        assert!(area_map("full", "x2w", 1.0, 0.0).is_err());
    }

    #[test]
    fn yield_curve_decreases() {
        let v = yield_curve("sparse", "w2w", 0.01, 1.0, 6).unwrap();
        assert_eq!(v.len(), 12);
        assert!((v[0] - 0.01).abs() < 1e-12 && (v[10] - 1.0).abs() < 1e-12);
        for k in 1..6 {
            assert!(v[2 * k + 1] < v[2 * k - 1]);
        }
        assert!(yield_curve("full", "d2w", 1.0, 0.5, 4).is_err());
    }

    #[test]
    fn histogram_tracks_density() {
        let h = tail_histogram(200_000, 3, 12);
        assert_eq!(h.len(), 48);
        for b in h.chunks(4) {
            let (sampled, model) = (b[2], b[3]);
            assert!((sampled - model).abs() <= 0.1 * model + 1e-9, "{b:?}");
        }
    }

    #[test]
    fn summary_counts_cells() {
        assert_eq!(layout_summary("full", "w2w").unwrap(), vec![625, 0, 0]);
        let s = layout_summary("sparse", "d2w").unwrap();
        assert_eq!(s.iter().sum::<u32>(), 10_000);
        assert!(s[1] > 0);
    }
}
