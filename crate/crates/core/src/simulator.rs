//! Monte Carlo bonding simulator.
//!
//! Every random quantity comes from a ChaCha stream keyed by
//! `(seed, wafer, die, channel)`, so results do not depend on thread count
//! and switching one channel off leaves the others' draws untouched.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::defect::{DefectParams, UM2_TO_CM2};
use crate::error::{Result, YieldError};
use crate::layout::{cu_pattern_density, generate_wafer_map, CellKind, DieSite, DieSpec, PadBlockGrid, WaferSpec};
use crate::overlay::{max_allowed_misalignment, s_range_rect, FunctionalRegion, OverlayDistribution, OverlayParams};
use crate::recess::{ln_group_pad_survival, PadCounts, RecessParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondMode {
    W2W,
    D2W,
}

impl std::str::FromStr for BondMode {
    type Err = YieldError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w2w" => Ok(Self::W2W),
            "d2w" => Ok(Self::D2W),
            other => Err(YieldError::Config(format!("unknown bonding mode `{other}` (expected w2w or d2w)"))),
        }
    }
}

impl std::fmt::Display for BondMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::W2W => "w2w",
            Self::D2W => "d2w",
        })
    }
}

/// Which failure mechanisms are simulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channels {
    pub overlay: bool,
    pub defect: bool,
    pub recess: bool,
}

impl Default for Channels {
    fn default() -> Self {
        Self { overlay: true, defect: true, recess: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub mode: BondMode,
    /// Wafers for W2W, dies for D2W.
    pub samples: usize,
    pub seed: u64,
    pub die: DieSpec,
    pub wafer_radius_mm: f64,
    pub edge_exclusion_mm: f64,
    pub overlay: OverlayDistribution,
    pub defects: DefectParams,
    pub recess: RecessParams,
    /// Last tail disk radius over the first.
    pub tail_end_ratio: f64,
    pub channels: Channels,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(YieldError::param("sample count must be at least 1"));
        }
        if !(self.tail_end_ratio > 0.0 && self.tail_end_ratio <= 1.0) {
            return Err(YieldError::param("tail end ratio must lie in (0, 1]"));
        }
        self.die.validate()?;
        self.overlay.validate()?;
        self.defects.validate()?;
        self.recess.validate()
    }

    pub fn wafer(&self) -> WaferSpec {
        WaferSpec { radius_mm: self.wafer_radius_mm, die: self.die, edge_exclusion_mm: self.edge_exclusion_mm }
    }
}

/// Surviving-die counts, per channel alone and jointly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimCounts {
    pub dies: u64,
    pub ovl: u64,
    pub cr: u64,
    pub df: u64,
    pub total: u64,
}

impl SimCounts {
    fn add(self, o: Self) -> Self {
        Self {
            dies: self.dies + o.dies,
            ovl: self.ovl + o.ovl,
            cr: self.cr + o.cr,
            df: self.df + o.df,
            total: self.total + o.total,
        }
    }

    fn frac(&self, n: u64) -> f64 {
        if self.dies == 0 {
            0.0
        } else {
            n as f64 / self.dies as f64
        }
    }

    pub fn y_ovl(&self) -> f64 {
        self.frac(self.ovl)
    }

    pub fn y_cr(&self) -> f64 {
        self.frac(self.cr)
    }

    pub fn y_df(&self) -> f64 {
        self.frac(self.df)
    }

    pub fn y_total(&self) -> f64 {
        self.frac(self.total)
    }
}

const CH_OVERLAY: u64 = 1;
const CH_DEFECT: u64 = 2;
const CH_RECESS: u64 = 3;
/// Die index used for wafer-level streams.
const WAFER_LEVEL: u64 = u64::MAX;

fn stream(seed: u64, wafer: u64, die: u64, channel: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, wafer, die, channel].into_iter().enumerate() {
        key[8 * i..8 * i + 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disk {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

/// One particle-induced void: the main void at the particle and the tail
/// disks trailing radially outward.
#[derive(Clone, Debug, PartialEq)]
pub struct VoidInstance {
    pub origin: (f64, f64),
    pub main_radius: f64,
    pub orientation: f64,
    pub tail: Vec<Disk>,
}

impl VoidInstance {
    pub fn disks(&self) -> impl Iterator<Item = Disk> + '_ {
        std::iter::once(Disk { x: self.origin.0, y: self.origin.1, r: self.main_radius }).chain(self.tail.iter().copied())
    }
}

/// Tail disks for a void of length `l`, `n` disks and total area `s`,
/// starting at `origin` and heading along `theta`. Radii fall linearly to
/// `end_ratio` of the first.
pub fn tail_disks(origin: (f64, f64), theta: f64, l: f64, n: f64, s: f64, end_ratio: f64) -> Vec<Disk> {
    if !(s > 0.0) || !(l > 0.0) {
        return Vec::new();
    }
    let nd = (n.round() as usize).max(1);
    let shape: Vec<f64> = (0..nd)
        .map(|i| if nd == 1 { 1.0 } else { 1.0 - (1.0 - end_ratio) * i as f64 / (nd - 1) as f64 })
        .collect();
    let rho_max = (s / (PI * shape.iter().map(|c| c * c).sum::<f64>())).sqrt();
    let (c, sn) = (theta.cos(), theta.sin());
    (0..nd)
        .map(|i| {
            let d = l * (i + 1) as f64 / nd as f64;
            Disk { x: origin.0 + d * c, y: origin.1 + d * sn, r: rho_max * shape[i] }
        })
        .collect()
}

/// Voids on one simulated wafer, in wafer coordinates.
pub fn sample_wafer_voids(cfg: &SimConfig, wafer: u64) -> Vec<VoidInstance> {
    let p = &cfg.defects;
    let radius = cfg.wafer_radius_mm * 1e3;
    let mean = p.d_t * PI * radius * radius * UM2_TO_CM2;
    let mut rng = stream(cfg.seed, wafer, WAFER_LEVEL, CH_DEFECT);
    let count = poisson(&mut rng, mean);
    (0..count)
        .map(|_| {
            let rr = radius * rng.gen::<f64>().sqrt();
            let phi = TAU * rng.gen::<f64>();
            let t = p.sample_thickness(&mut rng);
            let g = p.void_geometry(rr, t);
            let origin = (rr * phi.cos(), rr * phi.sin());
            let tail = tail_disks(origin, phi, g.tail_length, g.tail_count, g.tail_area, cfg.tail_end_ratio);
            VoidInstance { origin, main_radius: g.main_radius, orientation: phi, tail }
        })
        .collect()
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Layout facts the per-die checks need, computed once.
struct LayoutIndex {
    rows: usize,
    cols: usize,
    gx: f64,
    gy: f64,
    width: f64,
    height: f64,
    region: FunctionalRegion,
    /// Per cell: functional-cell slot, if any.
    functional: Vec<Option<usize>>,
    critical: Vec<usize>,
    groups: Vec<GroupInfo>,
    /// Survival probability of all critical pads.
    p_critical: f64,
    /// Per group class, survival probability given `f` members already lost.
    class_prob: Vec<Vec<f64>>,
    recess_on: bool,
}

struct GroupInfo {
    members: Vec<usize>,
    tolerance: usize,
    class: usize,
}

impl LayoutIndex {
    fn new(layout: &PadBlockGrid, cfg: &SimConfig) -> Result<Self> {
        let region = FunctionalRegion::from_layout(layout)?;
        let (rows, cols) = (layout.rows(), layout.cols());
        let mut functional = vec![None; rows * cols];
        for (slot, (_, (r, c))) in region.cells.iter().enumerate() {
            functional[r * cols + c] = Some(slot);
        }
        let critical = layout
            .iter_cells()
            .filter(|c| c.2 == CellKind::Critical)
            .map(|(r, c, _)| r * cols + c)
            .collect();
        let counts = PadCounts::from_layout(layout, cfg.die.pitch_um);
        let q = if cfg.channels.recess {
            cfg.recess.pad_failure(cu_pattern_density(&cfg.die, layout))
        } else {
            0.0
        };
        let p_critical = if counts.critical == 0 { 1.0 } else { (counts.critical as f64 * (-q).ln_1p()).exp() };
        let mut classes: HashMap<(u64, usize, usize), usize> = HashMap::new();
        let mut class_prob = Vec::new();
        let mut groups = Vec::new();
        for (gc, &(pads, m, k)) in layout.group_cells().into_iter().zip(&counts.groups) {
            let class = *classes.entry((pads, m, k)).or_insert_with(|| {
                class_prob.push(
                    (0..=k)
                        .map(|f| if pads == 0 { 1.0 } else { (pads as f64 * ln_group_pad_survival(q, m - f, k - f)).exp() })
                        .collect(),
                );
                class_prob.len() - 1
            });
            groups.push(GroupInfo {
                members: gc.members.iter().map(|&(r, c)| r * cols + c).collect(),
                tolerance: gc.tolerance,
                class,
            });
        }
        let (gx, gy) = layout.resolution();
        let (width, height) = layout.die_extent_um();
        Ok(Self {
            rows,
            cols,
            gx,
            gy,
            width,
            height,
            region,
            functional,
            critical,
            groups,
            p_critical,
            class_prob,
            recess_on: q > 0.0,
        })
    }

    /// Marks functional cells hit by a disk given in die-local coordinates
    /// (origin at the die's lower-left corner).
    fn mark_disk(&self, dead: &mut [u8], d: Disk, bit: u8) {
        if d.r <= 0.0 {
            return;
        }
        let c0 = ((d.x - d.r) / self.gx).floor().max(0.0) as usize;
        let r0 = ((d.y - d.r) / self.gy).floor().max(0.0) as usize;
        let c1 = ((d.x + d.r) / self.gx).floor();
        let r1 = ((d.y + d.r) / self.gy).floor();
        if c1 < 0.0 || r1 < 0.0 {
            return;
        }
        let c1 = (c1 as usize).min(self.cols - 1);
        let r1 = (r1 as usize).min(self.rows - 1);
        let r2 = d.r * d.r;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let idx = r * self.cols + c;
                if self.functional[idx].is_none() {
                    continue;
                }
                let x0 = c as f64 * self.gx;
                let y0 = r as f64 * self.gy;
                let x1 = (x0 + self.gx).min(self.width);
                let y1 = (y0 + self.gy).min(self.height);
                let dx = (x0 - d.x).max(d.x - x1).max(0.0);
                let dy = (y0 - d.y).max(d.y - y1).max(0.0);
                if dx * dx + dy * dy < r2 {
                    dead[idx] |= bit;
                }
            }
        }
    }

    /// Marks overlay failures for field `p` and offset `u` on a die centered
    /// at `center`. Returns false when no cell fails.
    fn mark_overlay(&self, dead: &mut Option<Vec<u8>>, p: &OverlayParams, u: f64, delta: f64, center: (f64, f64)) {
        if u >= -delta && u + self.region.s_max(p, center) <= delta {
            return;
        }
        let dead = dead.get_or_insert_with(|| vec![0; self.rows * self.cols]);
        for &(rect, (r, c)) in &self.region.cells {
            let (s_min, s_max) = s_range_rect(p, center, rect);
            if u > delta - s_max || u < -delta - s_min {
                dead[r * self.cols + c] |= OVL;
            }
        }
    }

    fn recess_uniforms(&self, cfg: &SimConfig, wafer: u64, die: u64) -> Option<Vec<f64>> {
        if !self.recess_on {
            return None;
        }
        let mut rng = stream(cfg.seed, wafer, die, CH_RECESS);
        Some((0..=self.groups.len()).map(|_| rng.gen::<f64>()).collect())
    }

    /// Die survival counting only the cell failures in `mask`, optionally
    /// with recess.
    fn survives(&self, dead: Option<&[u8]>, mask: u8, recess: Option<&[f64]>) -> bool {
        if let Some(u) = recess {
            if u[0] >= self.p_critical {
                return false;
            }
        }
        let lost = |i: usize| dead.is_some_and(|d| d[i] & mask != 0);
        if mask != 0 && dead.is_some() && self.critical.iter().any(|&i| lost(i)) {
            return false;
        }
        for (g, info) in self.groups.iter().enumerate() {
            let f = if mask != 0 && dead.is_some() { info.members.iter().filter(|&&i| lost(i)).count() } else { 0 };
            if f > info.tolerance {
                return false;
            }
            if let Some(u) = recess {
                if u[1 + g] >= self.class_prob[info.class][f] {
                    return false;
                }
            }
        }
        true
    }

    fn outcome(&self, dead: Option<&[u8]>, recess: Option<&[f64]>) -> SimCounts {
        let b = |x: bool| x as u64;
        SimCounts {
            dies: 1,
            ovl: b(self.survives(dead, OVL, None)),
            df: b(self.survives(dead, DF, None)),
            cr: b(self.survives(None, 0, recess)),
            total: b(self.survives(dead, OVL | DF, recess)),
        }
    }
}

const OVL: u8 = 1;
const DF: u8 = 2;

/// Runs the configured number of wafers or dies.
pub fn simulate(cfg: &SimConfig, layout: &PadBlockGrid) -> Result<SimCounts> {
    simulate_range(cfg, layout, 0, cfg.samples as u64)
}

/// Simulates wafers (W2W) or dies (D2W) with indices `start..end`.
pub fn simulate_range(cfg: &SimConfig, layout: &PadBlockGrid, start: u64, end: u64) -> Result<SimCounts> {
    cfg.validate()?;
    let (w, h) = layout.die_extent_um();
    if (w - cfg.die.width_um()).abs() > 1e-6 || (h - cfg.die.height_um()).abs() > 1e-6 {
        return Err(YieldError::Config(format!(
            "layout covers {w}x{h} µm but the die is {}x{} µm",
            cfg.die.width_um(),
            cfg.die.height_um()
        )));
    }
    let index = LayoutIndex::new(layout, cfg)?;
    let delta = max_allowed_misalignment(&cfg.die, cfg.overlay.k_ca, cfg.overlay.k_cd)?;
    match cfg.mode {
        BondMode::W2W => {
            let sites = generate_wafer_map(&cfg.wafer())?;
            Ok((start..end)
                .into_par_iter()
                .map(|wafer| simulate_wafer(cfg, &index, &sites, delta, wafer))
                .reduce(SimCounts::default, SimCounts::add))
        }
        BondMode::D2W => Ok((start..end)
            .into_par_iter()
            .map(|die| simulate_d2w_die(cfg, &index, delta, die))
            .reduce(SimCounts::default, SimCounts::add)),
    }
}

fn simulate_wafer(cfg: &SimConfig, index: &LayoutIndex, sites: &[DieSite], delta: f64, wafer: u64) -> SimCounts {
    let (a, b) = (cfg.die.width_um(), cfg.die.height_um());
    let field = cfg.channels.overlay.then(|| {
        let mut rng = stream(cfg.seed, wafer, WAFER_LEVEL, CH_OVERLAY);
        cfg.overlay.sample(&mut rng).field
    });
    // disks by die, in die-local coordinates
    let mut hits: HashMap<usize, Vec<Disk>> = HashMap::new();
    if cfg.channels.defect {
        let lookup: HashMap<(i64, i64), usize> = sites.iter().enumerate().map(|(i, s)| ((s.row, s.col), i)).collect();
        for v in sample_wafer_voids(cfg, wafer) {
            for d in v.disks() {
                if d.r <= 0.0 {
                    continue;
                }
                let (j0, j1) = (((d.y - d.r) / b).floor() as i64, ((d.y + d.r) / b).floor() as i64);
                let (i0, i1) = (((d.x - d.r) / a).floor() as i64, ((d.x + d.r) / a).floor() as i64);
                for j in j0..=j1 {
                    for i in i0..=i1 {
                        if let Some(&k) = lookup.get(&(j, i)) {
                            let s = &sites[k];
                            let local = Disk { x: d.x - (s.x_um - 0.5 * a), y: d.y - (s.y_um - 0.5 * b), r: d.r };
                            hits.entry(k).or_default().push(local);
                        }
                    }
                }
            }
        }
    }
    sites
        .par_iter()
        .enumerate()
        .map(|(k, site)| {
            let mut dead: Option<Vec<u8>> = None;
            if let Some(p) = &field {
                let mut rng = stream(cfg.seed, wafer, k as u64, CH_OVERLAY);
                let u = sample_u(&cfg.overlay, &mut rng);
                index.mark_overlay(&mut dead, p, u, delta, (site.x_um, site.y_um));
            }
            if let Some(disks) = hits.get(&k) {
                let d = dead.get_or_insert_with(|| vec![0; index.rows * index.cols]);
                for &disk in disks {
                    index.mark_disk(d, disk, DF);
                }
            }
            let recess = index.recess_uniforms(cfg, wafer, k as u64);
            index.outcome(dead.as_deref(), recess.as_deref())
        })
        .reduce(SimCounts::default, SimCounts::add)
}

fn sample_u<R: Rng>(dist: &OverlayDistribution, rng: &mut R) -> f64 {
    let (m, s) = dist.u;
    if s > 0.0 {
        m + s * rng.sample::<f64, _>(rand_distr::StandardNormal)
    } else {
        m
    }
}

fn simulate_d2w_die(cfg: &SimConfig, index: &LayoutIndex, delta: f64, die: u64) -> SimCounts {
    let mut dead: Option<Vec<u8>> = None;
    if cfg.channels.overlay {
        let mut rng = stream(cfg.seed, 0, die, CH_OVERLAY);
        let s = cfg.overlay.sample(&mut rng);
        index.mark_overlay(&mut dead, &s.field, s.u_um, delta, (0.0, 0.0));
    }
    if cfg.channels.defect {
        let p = &cfg.defects;
        let (w, h) = (index.width, index.height);
        let mut rng = stream(cfg.seed, 0, die, CH_DEFECT);
        let count = poisson(&mut rng, p.d_t * w * h * UM2_TO_CM2);
        for _ in 0..count {
            let (x, y) = (w * rng.gen::<f64>(), h * rng.gen::<f64>());
            let t = p.sample_thickness(&mut rng);
            let r = p.void_geometry((x - 0.5 * w).hypot(y - 0.5 * h), t).main_radius;
            let d = dead.get_or_insert_with(|| vec![0; index.rows * index.cols]);
            index.mark_disk(d, Disk { x, y, r }, DF);
        }
    }
    let recess = index.recess_uniforms(cfg, 0, die);
    index.outcome(dead.as_deref(), recess.as_deref())
}

/// Result of a convergence run.
#[derive(Clone, Debug, PartialEq)]
pub struct Convergence {
    /// Smallest sample count per repetition meeting the CV target.
    pub samples: usize,
    pub cv: f64,
    /// Counts pooled over all repetitions at that sample count.
    pub counts: SimCounts,
    /// `(samples, cv)` for every rung tried.
    pub ladder: Vec<(usize, f64)>,
}

pub const CONVERGENCE_REPETITIONS: usize = 10;

/// Coefficient of variation of the overall yield across repetitions.
pub fn coefficient_of_variation(yields: &[f64]) -> f64 {
    let n = yields.len() as f64;
    let mean = yields.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return f64::INFINITY;
    }
    let var = yields.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    var.sqrt() / mean
}

/// Doubles the per-repetition sample count until the CV of the overall yield
/// over [`CONVERGENCE_REPETITIONS`] independent repetitions drops below
/// `cv_target`, up to `max_samples`.
///
/// The ladder starts at the smallest count whose batch holds at least
/// `1/cv_target` dies. Coarser batches can only report yields in steps larger
/// than the target, so ten equal batches say nothing about the CV.
pub fn converge(cfg: &SimConfig, layout: &PadBlockGrid, cv_target: f64, max_samples: usize) -> Result<Convergence> {
    if !(cv_target > 0.0) {
        return Err(YieldError::param("CV target must be positive"));
    }
    let dies_per_sample = match cfg.mode {
        BondMode::W2W => generate_wafer_map(&cfg.wafer())?.len().max(1),
        BondMode::D2W => 1,
    };
    let mut n = ((1.0 / (cv_target * dies_per_sample as f64)).ceil() as usize).clamp(1, max_samples.max(1));
    let mut ladder = Vec::new();
    loop {
        let reps: Vec<SimCounts> = (0..CONVERGENCE_REPETITIONS)
            .map(|rep| {
                let c = SimConfig { samples: n, seed: repetition_seed(cfg.seed, rep as u64), ..cfg.clone() };
                simulate(&c, layout)
            })
            .collect::<Result<_>>()?;
        let yields: Vec<f64> = reps.iter().map(SimCounts::y_total).collect();
        let cv = coefficient_of_variation(&yields);
        ladder.push((n, cv));
        if cv < cv_target {
            let counts = reps.into_iter().fold(SimCounts::default(), SimCounts::add);
            return Ok(Convergence { samples: n, cv, counts, ladder });
        }
        if n >= max_samples {
            return Err(YieldError::NotConverged { achieved: cv, samples: n, target: cv_target });
        }
        n = (n * 2).min(max_samples);
    }
}

fn repetition_seed(seed: u64, rep: u64) -> u64 {
    let mut z = seed ^ rep.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Disks of every void on a wafer as CSV `x_um,y_um,r_um,kind`.
pub fn void_map_csv(voids: &[VoidInstance]) -> String {
    let mut s = String::from("x_um,y_um,r_um,kind\n");
    for v in voids {
        s.push_str(&format!("{},{},{},main\n", v.origin.0, v.origin.1, v.main_radius));
        for d in &v.tail {
            s.push_str(&format!("{},{},{},tail\n", d.x, d.y, d.r));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_layout, Fractions, Pattern};
    use crate::recess::yield_recess;

    fn quiet(mode: BondMode, samples: usize) -> SimConfig {
        let die = DieSpec::new(10.0, 10.0, 1.0, 0.3, 0.5).unwrap();
        SimConfig {
            mode,
            samples,
            seed: 7,
            die,
            wafer_radius_mm: 150.0,
            edge_exclusion_mm: 0.0,
            overlay: OverlayDistribution {
                u: (0.0, 0.0),
                tx: (0.0, 0.0),
                ty: (0.0, 0.0),
                alpha: (0.0, 0.0),
                magnification: (0.0, 0.0),
                k_ca: 0.5,
                k_cd: 0.5,
            },
            defects: DefectParams { d_t: 0.0, ..Default::default() },
            recess: RecessParams { sigma_top_nm: 0.0, sigma_bot_nm: 0.0, ..Default::default() },
            tail_end_ratio: 0.25,
            channels: Channels::default(),
        }
    }

    fn full(cfg: &SimConfig, res: f64) -> PadBlockGrid {
        build_layout(Pattern::Full, &cfg.die, (res, res), Fractions::ALL_CRITICAL, 0).unwrap()
    }

    #[test]
    fn no_failure_sources_give_unit_yield() {
        for mode in [BondMode::W2W, BondMode::D2W] {
            let cfg = quiet(mode, 3);
            let c = simulate(&cfg, &full(&cfg, 400.0)).unwrap();
            assert_eq!((c.y_ovl(), c.y_cr(), c.y_df(), c.y_total()), (1.0, 1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn tail_disks_conserve_area_and_shrink() {
        let disks = tail_disks((1000.0, 0.0), 0.0, 3000.0, 4.4, 5e4, 0.25);
        assert_eq!(disks.len(), 4);
        let area: f64 = disks.iter().map(|d| PI * d.r * d.r).sum();
        assert!((area / 5e4 - 1.0).abs() < 1e-12);
        assert!(disks.windows(2).all(|w| w[1].r < w[0].r));
        assert!((disks[3].r / disks[0].r - 0.25).abs() < 1e-12);
        assert!((disks[3].x - 4000.0).abs() < 1e-9);
        assert!(tail_disks((0.0, 0.0), 0.0, 0.0, 0.0, 0.0, 0.25).is_empty());
    }

    #[test]
    fn deterministic_for_seed() {
        let mut cfg = quiet(BondMode::W2W, 2);
        cfg.defects.d_t = 0.5;
        cfg.overlay.u = (0.0, 0.1);
        let layout = full(&cfg, 400.0);
        let a = simulate(&cfg, &layout).unwrap();
        let b = simulate(&cfg, &layout).unwrap();
        assert_eq!(a, b);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        assert_eq!(single.install(|| simulate(&cfg, &layout).unwrap()), a);
        cfg.seed = 8;
        assert_ne!(simulate(&cfg, &layout).unwrap(), a);
    }

    #[test]
    fn disabled_channels_reproduce_standalone_yield() {
        let mut cfg = quiet(BondMode::W2W, 2);
        cfg.defects.d_t = 0.3;
        cfg.overlay.u = (0.0, 0.08);
        cfg.recess.sigma_top_nm = 3.0;
        cfg.recess.cu_expansion_total_nm = 26.0;
        let layout = build_layout(Pattern::Sparse, &cfg.die, (400.0, 400.0), Fractions::MIXED, 3).unwrap();
        let all = simulate(&cfg, &layout).unwrap();
        for (ch, pick) in [
            (Channels { overlay: true, defect: false, recess: false }, all.ovl),
            (Channels { overlay: false, defect: true, recess: false }, all.df),
            (Channels { overlay: false, defect: false, recess: true }, all.cr),
        ] {
            let one = simulate(&SimConfig { channels: ch, ..cfg.clone() }, &layout).unwrap();
            assert_eq!(one.total, pick, "{ch:?}");
        }
        assert!(all.total <= all.ovl.min(all.df).min(all.cr));
    }

    #[test]
    fn center_particle_has_no_tail() {
        let p = DefectParams::default();
        let g = p.void_geometry(0.0, 0.2);
        assert!(tail_disks((0.0, 0.0), 1.0, g.tail_length, g.tail_count, g.tail_area, 0.25).is_empty());
        assert!((g.main_radius - 230.0 * 0.2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn recess_rate_matches_model() {
        let mut cfg = quiet(BondMode::D2W, 20_000);
        cfg.channels = Channels { overlay: false, defect: false, recess: true };
        cfg.recess.sigma_top_nm = 1.0;
        cfg.recess.sigma_bot_nm = 1.0;
        cfg.recess.cu_expansion_total_nm = 26.4;
        cfg.die = DieSpec::new(1.0, 1.0, 1.0, 0.3, 0.5).unwrap();
        let layout = build_layout(Pattern::Sparse, &cfg.die, (100.0, 100.0), Fractions::MIXED, 1).unwrap();
        let counts = PadCounts::from_layout(&layout, 1.0);
        let model = yield_recess(&cfg.recess, cu_pattern_density(&cfg.die, &layout), &counts).unwrap().yield_cr;
        let sim = simulate(&cfg, &layout).unwrap().y_cr();
        let tol = 3.0 * (model * (1.0 - model) / 20_000.0).sqrt();
        assert!(model > 0.05 && model < 0.95, "{model}");
        assert!((sim - model).abs() <= tol, "sim {sim} model {model}");
    }

    #[test]
    fn overlay_rate_matches_pad_pos() {
        // uniform translation, no rotation: every cell sees the same s
        let mut cfg = quiet(BondMode::D2W, 100_000);
        cfg.channels = Channels { overlay: true, defect: false, recess: false };
        cfg.overlay.tx = (0.15, 0.0);
        cfg.overlay.u = (0.0, 0.06);
        let layout = full(&cfg, 400.0);
        let delta = max_allowed_misalignment(&cfg.die, 0.5, 0.5).unwrap();
        let model = crate::overlay::pad_pos(delta, 0.15, 0.06);
        let sim = simulate(&cfg, &layout).unwrap().y_ovl();
        let tol = 3.0 * (model * (1.0 - model) / 1e5).sqrt();
        assert!((sim - model).abs() <= tol, "sim {sim} model {model}");
    }

    #[test]
    fn convergence_of_deterministic_config_is_immediate() {
        let cfg = quiet(BondMode::W2W, 1);
        let c = converge(&cfg, &full(&cfg, 400.0), 0.01, 64).unwrap();
        assert_eq!((c.samples, c.cv), (1, 0.0));
        // a D2W batch needs 1/cv dies before its CV means anything
        let cfg = quiet(BondMode::D2W, 1);
        let c = converge(&cfg, &full(&cfg, 400.0), 0.01, 1 << 12).unwrap();
        assert_eq!((c.samples, c.cv), (100, 0.0));
    }

    #[test]
    fn convergence_cap_reports_cv() {
        let mut cfg = quiet(BondMode::D2W, 1);
        cfg.defects.d_t = 50.0;
        let err = converge(&cfg, &full(&cfg, 400.0), 1e-4, 4).unwrap_err();
        assert!(matches!(err, YieldError::NotConverged { samples: 4, .. }), "{err}");
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("W2W".parse::<BondMode>().unwrap(), BondMode::W2W);
        assert!("c2w".parse::<BondMode>().is_err());
        assert_eq!(BondMode::D2W.to_string(), "d2w");
    }
}
