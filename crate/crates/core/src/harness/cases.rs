//! Case-study sweeps emitted as long-format CSV, one row per configuration
//! and yield component.

use crate::error::{Result, YieldError};
use crate::layout::{build_random_redundant_layout, Fractions, RedundancyScheme};
use crate::simulator::BondMode;

use super::cache::LutCache;
use super::config::ProcessConfig;
use super::model::run_model;
use super::YieldReport;

pub const CASES: [&str; 5] = ["defect_density", "pitch", "chiplet_size", "pad_layouts", "redundancy_spacing"];

pub const HEADER: &str = "case,mode,pattern,pitch_um,die_area_mm2,defect_density_cm2,spacing_um,component,value";

/// Nominal system area for the D2W system yield.
pub const SYSTEM_AREA_MM2: f64 = 1000.0;

/// Block size of the redundancy study, µm.
pub const REDUNDANCY_BLOCK_UM: f64 = 200.0;
pub const REDUNDANCY_SPACINGS_UM: [f64; 5] = [200.0, 400.0, 600.0, 800.0, 1000.0];
pub const REDUNDANCY_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRow {
    pub case: &'static str,
    pub mode: BondMode,
    pub pattern: String,
    pub pitch_um: f64,
    pub die_area_mm2: f64,
    pub defect_density_cm2: f64,
    pub spacing_um: Option<f64>,
    pub component: &'static str,
    pub value: f64,
}

pub fn to_csv(rows: &[CaseRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        let spacing = r.spacing_um.map_or(String::new(), |v| v.to_string());
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.case, r.mode, r.pattern, r.pitch_um, r.die_area_mm2, r.defect_density_cm2, spacing, r.component, r.value
        ));
    }
    s
}

/// One study point: die shape, pitch and density applied on top of `base`.
#[derive(Clone, Debug)]
struct Point {
    mode: BondMode,
    pattern: String,
    pitch_um: f64,
    die_area_mm2: f64,
    defect_density_cm2: f64,
}

impl Point {
    fn config(&self, base: &ProcessConfig) -> ProcessConfig {
        let mut c = base.clone();
        c.mode = self.mode;
        let side = self.die_area_mm2.sqrt();
        let d = &mut c.design;
        d.die_width_mm = side;
        d.die_height_mm = side;
        d.pitch_um = self.pitch_um;
        d.top_pad_um = 0.3 * self.pitch_um;
        d.bottom_pad_um = 0.5 * self.pitch_um;
        c.process.defect_density_cm2 = self.defect_density_cm2;
        c.layout.pattern = self.pattern.clone();
        c
    }
}

fn report_rows(case: &'static str, p: &Point, spacing_um: Option<f64>, r: &YieldReport) -> Vec<CaseRow> {
    let mut comps = vec![("ovl", r.y_ovl), ("cr", r.y_cr), ("df", r.y_df), ("total", r.y_total)];
    if p.mode == BondMode::D2W {
        comps.push(("sys", r.y_total.powf(SYSTEM_AREA_MM2 / p.die_area_mm2)));
    }
    comps
        .into_iter()
        .map(|(component, value)| CaseRow {
            case,
            mode: p.mode,
            pattern: p.pattern.clone(),
            pitch_um: p.pitch_um,
            die_area_mm2: p.die_area_mm2,
            defect_density_cm2: p.defect_density_cm2,
            spacing_um,
            component,
            value,
        })
        .collect()
}

fn run_points(case: &'static str, base: &ProcessConfig, points: &[Point], cache: &LutCache) -> Result<Vec<CaseRow>> {
    let mut rows = Vec::new();
    for p in points {
        let cfg = p.config(base);
        cfg.validate()?;
        let layout = cfg.build_layout(p.mode)?;
        let r = run_model(&cfg, p.mode, &layout, cache)?.report;
        rows.extend(report_rows(case, p, None, &r));
    }
    Ok(rows)
}

const MODES: [BondMode; 2] = [BondMode::W2W, BondMode::D2W];

fn grid(modes: &[BondMode], pitches: &[f64], sizes: &[f64], densities: &[f64], patterns: &[&str]) -> Vec<Point> {
    let mut v = Vec::new();
    for &mode in modes {
        for &pitch_um in pitches {
            for &die_area_mm2 in sizes {
                for &defect_density_cm2 in densities {
                    for &pattern in patterns {
                        v.push(Point { mode, pattern: pattern.into(), pitch_um, die_area_mm2, defect_density_cm2 });
                    }
                }
            }
        }
    }
    v
}

/// Runs a named study on top of `base`. All studies except `pad_layouts`
/// and `redundancy_spacing` use an all-critical layout.
pub fn run_case_study(name: &str, base: &ProcessConfig, cache: &LutCache) -> Result<Vec<CaseRow>> {
    let dt = base.process.defect_density_cm2;
    let pitch = base.design.pitch_um;
    match name {
        "defect_density" => run_points(
            "defect_density",
            base,
            &grid(&MODES, &[pitch], &[10.0, 50.0, 100.0], &[0.01, 0.1], &["full"]),
            cache,
        ),
        "pitch" => run_points("pitch", base, &grid(&MODES, &[0.3, 1.0], &[10.0, 50.0, 100.0], &[dt], &["full"]), cache),
        "chiplet_size" => {
            run_points("chiplet_size", base, &grid(&MODES, &[pitch], &[10.0, 25.0, 50.0, 100.0], &[dt], &["full"]), cache)
        }
        "pad_layouts" => {
            let mut b = base.clone();
            let f = Fractions::MIXED;
            (b.layout.critical_fraction, b.layout.redundant_fraction, b.layout.dummy_fraction) =
                (f.critical, f.redundant, f.dummy);
            b.layout.redundancy = "none".into();
            b.layout.file = None;
            let area = b.design.die_width_mm * b.design.die_height_mm;
            run_points(
                "pad_layouts",
                &b,
                &grid(&MODES, &[0.3], &[area], &[dt], &["full", "sparse", "peripheral", "centralized"]),
                cache,
            )
        }
        "redundancy_spacing" => redundancy_spacing(base, cache),
        other => Err(YieldError::Config(format!("unknown case study `{other}` (one of {})", CASES.join(", ")))),
    }
}

pub fn redundancy_schemes() -> Vec<RedundancyScheme> {
    let mut v = vec![RedundancyScheme::None, RedundancyScheme::Shared { mains_per_spare: 20 }];
    v.extend(REDUNDANCY_SPACINGS_UM.iter().map(|&s| RedundancyScheme::Dedicated { spacing_um: s }));
    v
}

fn scheme_label(s: RedundancyScheme) -> (String, Option<f64>) {
    match s {
        RedundancyScheme::None => ("none".into(), None),
        RedundancyScheme::Shared { mains_per_spare } => (format!("shared{mains_per_spare}"), None),
        RedundancyScheme::Dedicated { spacing_um } => ("dedicated".into(), Some(spacing_um)),
    }
}

/// Model yields averaged over [`REDUNDANCY_SEEDS`] random placements of
/// 200 µm blocks, every block part of a redundancy group.
fn redundancy_spacing(base: &ProcessConfig, cache: &LutCache) -> Result<Vec<CaseRow>> {
    let mut b = base.clone();
    b.grid.w2w_um = REDUNDANCY_BLOCK_UM;
    b.grid.d2w_um = REDUNDANCY_BLOCK_UM;
    let die = b.die()?;
    let mut rows = Vec::new();
    for mode in MODES {
        for scheme in redundancy_schemes() {
            let mut sum = [0.0; 4];
            for &seed in &REDUNDANCY_SEEDS {
                let (layout, _) = build_random_redundant_layout(&die, REDUNDANCY_BLOCK_UM, scheme, seed)?;
                let r = run_model(&b, mode, &layout, cache)?.report;
                for (s, y) in sum.iter_mut().zip([r.y_ovl, r.y_cr, r.y_df, r.y_total]) {
                    *s += y / REDUNDANCY_SEEDS.len() as f64;
                }
            }
            let (pattern, spacing) = scheme_label(scheme);
            let p = Point {
                mode,
                pattern,
                pitch_um: die.pitch_um,
                die_area_mm2: die.width_mm * die.height_mm,
                defect_density_cm2: b.process.defect_density_cm2,
            };
            let r = YieldReport {
                mode,
                source: super::Source::Model,
                y_ovl: sum[0],
                y_cr: sum[1],
                y_df: sum[2],
                y_total: sum[3],
                runtime_s: 0.0,
                seed: None,
                samples: None,
                dies: None,
                cv: None,
            };
            rows.extend(report_rows("redundancy_spacing", &p, spacing, &r));
        }
    }
    Ok(rows)
}

/// Value of one component for the first row matching `pred`.
pub fn lookup(rows: &[CaseRow], component: &str, pred: impl Fn(&CaseRow) -> bool) -> Option<f64> {
    rows.iter().find(|r| r.component == component && pred(r)).map(|r| r.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_case_is_config_error() {
        let e = run_case_study("nope", &ProcessConfig::default(), &LutCache::in_memory()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn system_yield_row() {
        let p = Point { mode: BondMode::D2W, pattern: "full".into(), pitch_um: 1.0, die_area_mm2: 50.0, defect_density_cm2: 0.1 };
        let r = YieldReport {
            mode: BondMode::D2W,
            source: super::super::Source::Model,
            y_ovl: 1.0,
            y_cr: 1.0,
            y_df: 0.99,
            y_total: 0.99,
            runtime_s: 0.0,
            seed: None,
            samples: None,
            dies: None,
            cv: None,
        };
        let rows = report_rows("x", &p, None, &r);
        assert_eq!(rows.len(), 5);
        assert!((rows[4].value - 0.99f64.powi(20)).abs() < 1e-15);
        let csv = to_csv(&rows);
        assert!(csv.starts_with(HEADER));
        assert!(csv.contains("\nx,d2w,full,1,50,0.1,,sys,"));
    }
}
