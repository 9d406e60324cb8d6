//! Particle defects: thickness distribution, void geometry, void-size
//! densities, critical-area tables and the fatal-defect count `Λ`.
//!
//! Lengths are µm. Densities are per cm² like `D_t` itself, so
//! `∫ f_l(l) dl = D_t` in cm⁻² and areas are converted with [`UM2_TO_CM2`].

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, YieldError};
use crate::layout::PadBlockGrid;
use crate::morphology::{
    critical_area_map_parts, rasterize_disk, rasterize_disk_coverage, rasterize_segment, AnchorDomain,
    StructuringElement,
};

pub const UM2_TO_CM2: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DefectParams {
    /// Particle density over all thicknesses, cm⁻².
    pub d_t: f64,
    /// Minimum particle thickness, µm.
    pub t0: f64,
    pub z: f64,
    /// µm^-1/2
    pub k_r: f64,
    /// µm^1/2
    pub k_r0: f64,
    /// µm^-1/2
    pub k_l: f64,
    /// µm^-3/2
    pub k_n: f64,
    /// µm^1/2
    pub k_s: f64,
}

impl Default for DefectParams {
    fn default() -> Self {
        Self { d_t: 0.1, t0: 0.1, z: 3.0, k_r: 1.8e-4, k_r0: 230.0, k_l: 6.2e-2, k_n: 9e-5, k_s: 2.7 }
    }
}

impl DefectParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.z > 1.0) {
            return Err(YieldError::param(format!("shaping factor z = {} must exceed 1", self.z)));
        }
        if !(self.t0 > 0.0) || !(self.d_t >= 0.0) {
            return Err(YieldError::param("t0 must be positive and D_t non-negative"));
        }
        if [self.k_r, self.k_r0, self.k_l, self.k_n, self.k_s].iter().any(|k| !(*k >= 0.0)) {
            return Err(YieldError::param("void fitting coefficients must be non-negative"));
        }
        Ok(())
    }

    /// Thickness density `D(t)`, cm⁻²·µm⁻¹.
    pub fn thickness_pdf(&self, t: f64) -> f64 {
        if t <= self.t0 {
            return 0.0;
        }
        self.d_t * (self.z - 1.0) * self.t0.powf(self.z - 1.0) / t.powf(self.z)
    }

    /// Inverse-CDF draw from `D(t)/D_t`.
    pub fn sample_thickness<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        self.t0 * (1.0 - u).powf(-1.0 / (self.z - 1.0))
    }

    /// Void geometry for a particle of thickness `t` at distance `l_center`
    /// from the wafer (W2W) or die (D2W) center.
    pub fn void_geometry(&self, l_center: f64, t: f64) -> VoidGeometry {
        let st = t.sqrt();
        VoidGeometry {
            main_radius: (self.k_r * l_center + self.k_r0) * st,
            tail_length: self.k_l * l_center * st,
            tail_count: self.k_n * l_center * st,
            tail_area: self.k_s * l_center * st,
        }
    }

    /// Tail-length breakpoint `k_l·R·√t0`.
    pub fn tail_breakpoint(&self, wafer_radius: f64) -> f64 {
        self.k_l * wafer_radius * self.t0.sqrt()
    }

    /// Tail-length density `f_l` for particles uniform over a wafer of radius
    /// `wafer_radius`.
    pub fn tail_length_pdf(&self, l: f64, wafer_radius: f64) -> f64 {
        let ls = self.tail_breakpoint(wafer_radius);
        if l < 0.0 || ls <= 0.0 {
            return 0.0;
        }
        let (c1, c2, p) = self.tail_coefficients(wafer_radius);
        if l <= ls {
            c1 * l
        } else {
            c2 * l.powf(-p)
        }
    }

    /// `(c1, c2, p)` with `f_l = c1·l` below the breakpoint and `c2·l^{-p}` above.
    fn tail_coefficients(&self, wafer_radius: f64) -> (f64, f64, f64) {
        let z = self.z;
        let k = self.k_l * self.k_l * wafer_radius * wafer_radius * self.t0;
        let c1 = 2.0 * self.d_t * (z - 1.0) / (z * k);
        let c2 = 2.0 * self.d_t * (z - 1.0) * k.powf(z - 1.0) / z;
        (c1, c2, 2.0 * z - 1.0)
    }

    /// `(∫ f_l, ∫ l·f_l)` over `[a, b]`; `b` may be infinite.
    pub fn tail_length_moments(&self, a: f64, b: f64, wafer_radius: f64) -> (f64, f64) {
        let ls = self.tail_breakpoint(wafer_radius);
        let a = a.max(0.0);
        if b <= a || ls <= 0.0 {
            return (0.0, 0.0);
        }
        let (c1, c2, p) = self.tail_coefficients(wafer_radius);
        let mut m = (0.0, 0.0);
        let (lo1, hi1) = (a.min(ls), b.min(ls));
        if hi1 > lo1 {
            m.0 += c1 * (hi1 * hi1 - lo1 * lo1) / 2.0;
            m.1 += c1 * (hi1.powi(3) - lo1.powi(3)) / 3.0;
        }
        let (lo2, hi2) = (a.max(ls), b.max(ls));
        if hi2 > lo2 {
            // ∫ l^{-q} = (hi^{1-q} - lo^{1-q}) / (1-q), with q = 1 as log
            let power = |q: f64| {
                if (q - 1.0).abs() < 1e-12 {
                    if hi2.is_finite() { (hi2 / lo2).ln() } else { f64::INFINITY }
                } else if hi2.is_finite() {
                    (hi2.powf(1.0 - q) - lo2.powf(1.0 - q)) / (1.0 - q)
                } else if q > 1.0 {
                    lo2.powf(1.0 - q) / (q - 1.0)
                } else {
                    f64::INFINITY
                }
            };
            m.0 += c2 * power(p);
            m.1 += c2 * power(p - 1.0);
        }
        m
    }

    /// Lower end `k_r0·√t0` and breakpoint `(k_r·R + k_r0)·√t0` of `f_r`.
    pub fn main_void_bounds(&self, die_radius: f64) -> (f64, f64) {
        let st = self.t0.sqrt();
        (self.k_r0 * st, (self.k_r * die_radius + self.k_r0) * st)
    }

    /// Main-void radius density `f_r` for particles uniform over a disk of
    /// radius `die_radius` (the die's effective radius `√(ab/π)`).
    pub fn main_void_pdf(&self, r: f64, die_radius: f64) -> f64 {
        let (lo, hi) = self.main_void_bounds(die_radius);
        if r <= lo || r <= 0.0 {
            return 0.0;
        }
        let z = self.z;
        let t0 = self.t0;
        let kr0 = self.k_r0;
        let c = self.d_t * (z - 1.0) * t0.powf(z - 1.0);
        let kr2r2 = (self.k_r * die_radius).powi(2);
        if r < hi {
            c / kr2r2
                * (2.0 * r / (z * t0.powf(z))
                    + 2.0 * kr0.powf(2.0 * z) / (z * (2.0 * z - 1.0) * r.powf(2.0 * z - 1.0))
                    - 2.0 * kr0 / ((z - 0.5) * t0.powf(z - 0.5)))
        } else {
            r.powf(1.0 - 2.0 * z) * self.main_void_tail_coefficient(die_radius)
        }
    }

    /// `K` with `f_r = K·r^{1-2z}` above the breakpoint.
    fn main_void_tail_coefficient(&self, die_radius: f64) -> f64 {
        let z = self.z;
        let t0 = self.t0;
        let kr0 = self.k_r0;
        let c = self.d_t * (z - 1.0) * t0.powf(z - 1.0);
        let b = self.k_r * die_radius + kr0;
        let first = 2.0 * c * b.powf(2.0 * z - 2.0);
        let kr2r2 = (self.k_r * die_radius).powi(2);
        if kr2r2 == 0.0 {
            return first;
        }
        let bracket = (b.powf(2.0 * z) - kr0.powf(2.0 * z)) / z
            - (2.0 * kr0 * b.powf(2.0 * z - 1.0) - 2.0 * kr0.powf(2.0 * z)) / (z - 0.5)
            + (kr0 * kr0 * b.powf(2.0 * z - 2.0) - kr0.powf(2.0 * z)) / (z - 1.0);
        first - 2.0 * self.d_t * (z - 1.0).powi(2) * t0.powf(z - 1.0) / kr2r2 * bracket
    }

    /// `∫_r^∞ f_r` for `r` at or above the breakpoint.
    fn main_void_tail_mass(&self, r: f64, die_radius: f64) -> f64 {
        self.main_void_tail_coefficient(die_radius) * r.powf(2.0 - 2.0 * self.z) / (2.0 * self.z - 2.0)
    }

    /// `∫ g(r)·f_r(r) dr` over `[a, b]` by 8-point Gauss–Legendre, split at
    /// the breakpoint.
    pub fn main_void_integral(&self, a: f64, b: f64, die_radius: f64, g: impl Fn(f64) -> f64) -> f64 {
        let (lo, hi) = self.main_void_bounds(die_radius);
        let a = a.max(lo);
        if b <= a {
            return 0.0;
        }
        let mut total = 0.0;
        let pieces = if a < hi && hi < b { vec![(a, hi), (hi, b)] } else { vec![(a, b)] };
        for (x0, x1) in pieces {
            total += gauss_legendre(x0, x1, |r| g(r) * self.main_void_pdf(r, die_radius));
        }
        total
    }
}

const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

fn gauss_legendre(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (m, h) = (0.5 * (a + b), 0.5 * (b - a));
    GL8.iter().map(|&(x, w)| w * f(m + h * x)).sum::<f64>() * h
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoidGeometry {
    pub main_radius: f64,
    pub tail_length: f64,
    pub tail_count: f64,
    pub tail_area: f64,
}

/// `n` log-spaced points on `[lo, hi]`.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

fn insert_sorted(v: &mut Vec<f64>, x: f64) {
    let i = v.partition_point(|&y| y < x);
    if v.get(i).is_none_or(|&y| (y - x).abs() > 1e-9 * x.abs().max(1.0)) {
        v.insert(i, x);
    }
}

/// Default tail-length nodes: `0`, `n` log points from `l*/10` to `10·l*`,
/// and `l*` itself.
pub fn length_grid(p: &DefectParams, wafer_radius: f64, n: usize) -> Vec<f64> {
    let ls = p.tail_breakpoint(wafer_radius);
    if ls <= 0.0 {
        return vec![0.0];
    }
    let mut v = vec![0.0];
    v.extend(log_space(ls / 10.0, ls * 10.0, n.max(2)));
    insert_sorted(&mut v, ls);
    v
}

pub const DEFAULT_LENGTH_NODES: usize = 64;
pub const DEFAULT_THETA_NODES: usize = 32;
pub const DEFAULT_RADIUS_NODES: usize = 256;

/// `n` uniform orientations over `[0, 2π)`.
pub fn theta_grid(n: usize) -> Vec<f64> {
    (0..n.max(1)).map(|j| std::f64::consts::TAU * j as f64 / n.max(1) as f64).collect()
}

/// Default main-void radius nodes: `n` log points from the smallest void to
/// 20× the breakpoint, plus the breakpoint.
pub fn radius_grid(p: &DefectParams, die_radius: f64, n: usize) -> Vec<f64> {
    let (lo, hi) = p.main_void_bounds(die_radius);
    let start = if lo > 0.0 { lo } else { (hi * 1e-3).max(1e-6) };
    let mut v = if lo > 0.0 { Vec::new() } else { vec![0.0] };
    v.extend(log_space(start, 20.0 * hi.max(start), n.max(2)));
    insert_sorted(&mut v, hi.max(start));
    v
}

/// How a disk becomes cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiskRule {
    /// Cells whose center lies within the radius.
    Center,
    /// Cells reached from at least half of the anchor cell.
    #[default]
    Coverage,
}

impl DiskRule {
    pub fn rasterize(self, radius_um: f64, gx: f64, gy: f64) -> StructuringElement {
        match self {
            Self::Center => rasterize_disk(radius_um, gx, gy),
            Self::Coverage => rasterize_disk_coverage(radius_um, gx, gy),
        }
    }

    fn tag(self) -> &'static [u8] {
        match self {
            Self::Center => b"center",
            Self::Coverage => b"coverage",
        }
    }
}

/// Main void added to the W2W tail element: radius `r0 + slope·l`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MainVoidTerm {
    pub r0: f64,
    pub slope: f64,
    pub rule: DiskRule,
}

impl MainVoidTerm {
    /// Main-void radius attached to a tail of length `l`, taking the particle
    /// at the minimum thickness: `k_r0·√t0 + (k_r/k_l)·l`.
    pub fn from_params(p: &DefectParams) -> Self {
        let slope = if p.k_l > 0.0 { p.k_r / p.k_l } else { 0.0 };
        Self { r0: p.k_r0 * p.t0.sqrt(), slope, rule: DiskRule::default() }
    }
}

fn hash_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn floats(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Critical area over tail length × orientation for one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LutW2W {
    pub lengths: Vec<f64>,
    pub thetas: Vec<f64>,
    /// Row-major `[length][theta]`, µm².
    pub area: Vec<f64>,
    pub fingerprint: String,
}

/// Critical area over main-void radius for one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LutD2W {
    pub radii: Vec<f64>,
    /// µm²
    pub area: Vec<f64>,
    pub fingerprint: String,
}

fn check_grid(v: &[f64], what: &'static str) -> Result<()> {
    if v.is_empty() {
        return Err(YieldError::EmptyInput(what));
    }
    if v.windows(2).any(|w| !(w[1] > w[0])) || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(YieldError::param(format!("{what} must be non-negative and strictly increasing")));
    }
    Ok(())
}

/// Evaluates the critical area for each element, computing each distinct
/// element once.
fn areas_for(layout: &PadBlockGrid, elements: Vec<StructuringElement>, domain: AnchorDomain) -> Vec<f64> {
    let mut index: HashMap<&[(i64, i64)], usize> = HashMap::new();
    let mut unique: Vec<&StructuringElement> = Vec::new();
    let slots: Vec<usize> = elements
        .iter()
        .map(|se| {
            *index.entry(se.offsets()).or_insert_with(|| {
                unique.push(se);
                unique.len() - 1
            })
        })
        .collect();
    let groups = layout.group_cells();
    let values: Vec<f64> =
        unique.par_iter().map(|se| critical_area_map_parts(layout, &groups, se, domain).0.area()).collect();
    slots.into_iter().map(|i| values[i]).collect()
}

impl LutW2W {
    pub fn fingerprint_for(
        layout: &PadBlockGrid,
        lengths: &[f64],
        thetas: &[f64],
        main_void: Option<MainVoidTerm>,
    ) -> String {
        let mv = main_void.map_or(Vec::new(), |m| [floats(&[m.r0, m.slope]), m.rule.tag().to_vec()].concat());
        hash_hex(&[b"w2w-v2", &layout.key_bytes(), &floats(lengths), &floats(thetas), &mv])
    }

    pub fn build(
        layout: &PadBlockGrid,
        lengths: &[f64],
        thetas: &[f64],
        main_void: Option<MainVoidTerm>,
    ) -> Result<Self> {
        check_grid(lengths, "tail-length grid")?;
        check_grid(thetas, "orientation grid")?;
        let (gx, gy) = layout.resolution();
        let elements = lengths
            .iter()
            .flat_map(|&l| thetas.iter().map(move |&th| (l, th)))
            .map(|(l, th)| {
                let seg = rasterize_segment(l, th, gx, gy);
                match main_void {
                    Some(m) => {
                        let disk = m.rule.rasterize(m.r0 + m.slope * l, gx, gy);
                        StructuringElement::from_offsets(seg.offsets().iter().chain(disk.offsets()).copied())
                    }
                    None => seg,
                }
            })
            .collect();
        let area = areas_for(layout, elements, AnchorDomain::Plane);
        Ok(Self {
            lengths: lengths.to_vec(),
            thetas: thetas.to_vec(),
            area,
            fingerprint: Self::fingerprint_for(layout, lengths, thetas, main_void),
        })
    }

    pub fn get(&self, i_l: usize, j_theta: usize) -> f64 {
        self.area[i_l * self.thetas.len() + j_theta]
    }

    /// Table with a constant area, for analytic checks.
    pub fn constant(lengths: Vec<f64>, thetas: Vec<f64>, area_um2: f64) -> Self {
        let area = vec![area_um2; lengths.len() * thetas.len()];
        Self { lengths, thetas, area, fingerprint: String::new() }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# fingerprint={}\nl_um,theta_rad,area_um2\n", self.fingerprint);
        for (i, l) in self.lengths.iter().enumerate() {
            for (j, th) in self.thetas.iter().enumerate() {
                let _ = writeln!(s, "{l:?},{th:?},{:?}", self.get(i, j));
            }
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (fingerprint, rows) = parse_lut_csv(text, "l_um,theta_rad,area_um2", 3)?;
        let mut lengths: Vec<f64> = Vec::new();
        let mut thetas: Vec<f64> = Vec::new();
        for r in &rows {
            if lengths.last() != Some(&r[0]) {
                lengths.push(r[0]);
            }
            if lengths.len() == 1 {
                thetas.push(r[1]);
            }
        }
        if lengths.len() * thetas.len() != rows.len() {
            return Err(YieldError::Parse { line: 0, msg: "table is not a full length × orientation grid".into() });
        }
        for (k, r) in rows.iter().enumerate() {
            if r[0] != lengths[k / thetas.len()] || r[1] != thetas[k % thetas.len()] {
                return Err(YieldError::Parse { line: k + 3, msg: "rows out of grid order".into() });
            }
        }
        Ok(Self { lengths, thetas, area: rows.iter().map(|r| r[2]).collect(), fingerprint })
    }
}

impl LutD2W {
    pub fn fingerprint_for(layout: &PadBlockGrid, radii: &[f64], rule: DiskRule) -> String {
        hash_hex(&[b"d2w-v2", &layout.key_bytes(), &floats(radii), rule.tag()])
    }

    pub fn build(layout: &PadBlockGrid, radii: &[f64], rule: DiskRule) -> Result<Self> {
        check_grid(radii, "main-void radius grid")?;
        let (gx, gy) = layout.resolution();
        let elements = radii.iter().map(|&r| rule.rasterize(r, gx, gy)).collect();
        let area = areas_for(layout, elements, AnchorDomain::Die);
        Ok(Self { radii: radii.to_vec(), area, fingerprint: Self::fingerprint_for(layout, radii, rule) })
    }

    pub fn constant(radii: Vec<f64>, area_um2: f64) -> Self {
        let area = vec![area_um2; radii.len()];
        Self { radii, area, fingerprint: String::new() }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# fingerprint={}\nr_um,area_um2\n", self.fingerprint);
        for (r, a) in self.radii.iter().zip(&self.area) {
            let _ = writeln!(s, "{r:?},{a:?}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (fingerprint, rows) = parse_lut_csv(text, "r_um,area_um2", 2)?;
        Ok(Self { radii: rows.iter().map(|r| r[0]).collect(), area: rows.iter().map(|r| r[1]).collect(), fingerprint })
    }
}

fn parse_lut_csv(text: &str, header: &str, width: usize) -> Result<(String, Vec<Vec<f64>>)> {
    let mut lines = text.lines().enumerate();
    let perr = |line: usize, msg: &str| YieldError::Parse { line, msg: msg.to_string() };
    let fingerprint = lines
        .next()
        .and_then(|(_, l)| l.strip_prefix("# fingerprint="))
        .ok_or_else(|| perr(1, "missing fingerprint line"))?
        .trim()
        .to_string();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(perr(2, &format!("expected header `{header}`"))),
    }
    let mut rows = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| perr(ln + 1, &e.to_string()))?;
        if row.len() != width {
            return Err(perr(ln + 1, &format!("expected {width} columns")));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(YieldError::EmptyInput("critical-area table"));
    }
    Ok((fingerprint, rows))
}

/// `Λ` with a discretization error estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaEstimate {
    pub lambda: f64,
    /// Absolute error estimate from halving the node sets.
    pub error: f64,
}

impl LambdaEstimate {
    pub fn relative_error(&self) -> f64 {
        if self.lambda == 0.0 {
            0.0
        } else {
            self.error / self.lambda
        }
    }

    pub fn yield_(&self) -> f64 {
        (-self.lambda).exp()
    }

    fn warn_if_coarse(self, what: &str) -> Self {
        if self.relative_error() > 0.01 {
            log::warn!(
                "{what}: estimated discretization error {:.2}% of Λ; use a denser grid",
                100.0 * self.relative_error()
            );
        }
        self
    }
}

/// Every other node, always keeping the first, the last and `keep`.
fn coarse_indices(x: &[f64], keep: f64) -> Vec<usize> {
    let n = x.len();
    (0..n)
        .filter(|&i| i % 2 == 0 || i == n - 1 || (x[i] - keep).abs() <= 1e-9 * keep.max(1.0))
        .collect()
}

/// Moments of `f_l` on each node interval, past the last node and below the
/// first.
struct TailMoments {
    l: Vec<f64>,
    intervals: Vec<(f64, f64)>,
    beyond: (f64, f64),
    below: f64,
}

impl TailMoments {
    fn new(p: &DefectParams, wafer_radius: f64, l: Vec<f64>) -> Self {
        let intervals = l.windows(2).map(|w| p.tail_length_moments(w[0], w[1], wafer_radius)).collect();
        let last = l[l.len() - 1];
        let beyond = p.tail_length_moments(last, f64::INFINITY, wafer_radius);
        let below = if l[0] > 0.0 { p.tail_length_moments(0.0, l[0], wafer_radius).0 } else { 0.0 };
        Self { l, intervals, beyond, below }
    }

    /// `∫_0^∞ A(l)·f_l(l) dl` with `A` piecewise linear on the nodes and
    /// extended linearly past the last one.
    fn integrate(&self, a: impl Fn(usize) -> f64) -> f64 {
        let l = &self.l;
        let mut sum = 0.0;
        let mut slope = 0.0;
        for (i, &(m0, m1)) in self.intervals.iter().enumerate() {
            slope = (a(i + 1) - a(i)) / (l[i + 1] - l[i]);
            sum += a(i) * m0 + slope * (m1 - l[i] * m0);
        }
        let last = l.len() - 1;
        let (m0, m1) = self.beyond;
        sum += a(last) * m0;
        if m1.is_finite() {
            sum += slope.max(0.0) * (m1 - l[last] * m0);
        }
        // nodes that start above zero miss the mass below the first one
        sum + a(0) * self.below
    }
}

/// Expected fatal tail defects per die, orientation uniform over `[0, 2π)`.
pub fn lambda_w2w(lut: &LutW2W, wafer_radius: f64, p: &DefectParams) -> Result<LambdaEstimate> {
    p.validate()?;
    let nt = lut.thetas.len();
    let fine_m = TailMoments::new(p, wafer_radius, lut.lengths.clone());
    let coarse_l = coarse_indices(&lut.lengths, p.tail_breakpoint(wafer_radius));
    let coarse_m = TailMoments::new(p, wafer_radius, coarse_l.iter().map(|&i| lut.lengths[i]).collect());
    let cols: Vec<f64> = (0..nt).map(|j| fine_m.integrate(|i| lut.get(i, j))).collect();
    let fine = cols.iter().sum::<f64>() / nt as f64;
    let coarse = (0..nt).map(|j| coarse_m.integrate(|i| lut.get(coarse_l[i], j))).sum::<f64>() / nt as f64;
    // the even and odd orientation subsets are two independent half rules
    let half = |start: usize| {
        let v: Vec<f64> = cols.iter().skip(start).step_by(2).copied().collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let theta_err = if nt >= 2 { (half(0) - half(1)).abs() / 2.0 } else { 0.0 };
    let error = (fine - coarse).abs() + theta_err;
    Ok(LambdaEstimate { lambda: fine * UM2_TO_CM2, error: error * UM2_TO_CM2 }.warn_if_coarse("W2W defect integral"))
}

fn integrate_radii(p: &DefectParams, die_radius: f64, r: &[f64], a: &[f64]) -> f64 {
    let (lo, hi) = p.main_void_bounds(die_radius);
    let mut sum = 0.0;
    if r[0] > lo {
        sum += a[0] * p.main_void_integral(lo, r[0], die_radius, |_| 1.0);
    }
    for i in 0..r.len() - 1 {
        let (r0, r1, a0, a1) = (r[i], r[i + 1], a[i], a[i + 1]);
        sum += p.main_void_integral(r0, r1, die_radius, |x| a0 + (a1 - a0) * (x - r0) / (r1 - r0));
    }
    let last = *r.last().expect("non-empty");
    let tail = if last >= hi {
        p.main_void_tail_mass(last, die_radius)
    } else {
        p.main_void_integral(last, hi, die_radius, |_| 1.0) + p.main_void_tail_mass(hi, die_radius)
    };
    sum + a[r.len() - 1] * tail
}

/// Expected fatal main voids per die.
pub fn lambda_d2w(lut: &LutD2W, die_radius: f64, p: &DefectParams) -> Result<LambdaEstimate> {
    p.validate()?;
    let fine = integrate_radii(p, die_radius, &lut.radii, &lut.area);
    let idx = coarse_indices(&lut.radii, p.main_void_bounds(die_radius).1);
    let r: Vec<f64> = idx.iter().map(|&i| lut.radii[i]).collect();
    let a: Vec<f64> = idx.iter().map(|&i| lut.area[i]).collect();
    let coarse = integrate_radii(p, die_radius, &r, &a);
    Ok(LambdaEstimate { lambda: fine * UM2_TO_CM2, error: (fine - coarse).abs() * UM2_TO_CM2 }.warn_if_coarse("D2W defect integral"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::CellKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const R_WAFER: f64 = 150_000.0;

    #[test]
    fn thickness_normalization_and_median() {
        let p = DefectParams::default();
        // substitute t = t0·e^u to integrate the power law on a finite grid
        let n = 200_000;
        let umax = 40.0;
        let h = umax / n as f64;
        let mass: f64 = (0..n)
            .map(|i| {
                let u = (i as f64 + 0.5) * h;
                let t = p.t0 * u.exp();
                p.thickness_pdf(t) * t * h
            })
            .sum();
        assert!((mass / p.d_t - 1.0).abs() < 1e-7, "{mass}");
        // median at U = 0.5
        let med = p.t0 * 0.5f64.powf(-1.0 / (p.z - 1.0));
        assert!((med - 0.141_421_356).abs() < 1e-8);
        assert!(DefectParams { z: 1.0, ..p }.validate().is_err());
    }

    #[test]
    fn void_geometry_examples() {
        let p = DefectParams::default();
        let g = p.void_geometry(0.0, 0.3);
        assert_eq!((g.tail_length, g.tail_count, g.tail_area), (0.0, 0.0, 0.0));
        assert!((g.main_radius - 230.0 * 0.3f64.sqrt()).abs() < 1e-12);
        let g = p.void_geometry(1e5, 1.0);
        assert!((g.tail_length - 6200.0).abs() < 1e-9);
        assert!((g.main_radius - 248.0).abs() < 1e-9);
    }

    #[test]
    fn tail_pdf_mass_and_continuity() {
        for z in [2.0, 2.5, 3.0] {
            let p = DefectParams { z, ..Default::default() };
            let ls = p.tail_breakpoint(R_WAFER);
            let below = p.tail_length_pdf(ls * (1.0 - 1e-12), R_WAFER);
            let above = p.tail_length_pdf(ls * (1.0 + 1e-12), R_WAFER);
            assert!((below - above).abs() < 1e-9 * below);
            let (m0, _) = p.tail_length_moments(0.0, f64::INFINITY, R_WAFER);
            assert!((m0 / p.d_t - 1.0).abs() < 1e-12, "z={z}: {m0}");
            let below_mass = p.tail_length_moments(0.0, ls, R_WAFER).0;
            assert!((below_mass / p.d_t - (z - 1.0) / z).abs() < 1e-12);
        }
    }

    #[test]
    fn main_void_pdf_mass_and_continuity() {
        let rd = (1e8f64 / std::f64::consts::PI).sqrt();
        for z in [2.0, 2.5, 3.0] {
            let p = DefectParams { z, ..Default::default() };
            let (lo, hi) = p.main_void_bounds(rd);
            let a = p.main_void_pdf(hi * (1.0 - 1e-12), rd);
            let b = p.main_void_pdf(hi * (1.0 + 1e-12), rd);
            assert!((a - b).abs() < 1e-6 * a.abs(), "z={z}: {a} {b}");
            let nodes = log_space(lo, 1e4 * hi, 4000);
            let mut mass = p.main_void_integral(lo, nodes[0], rd, |_| 1.0);
            for w in nodes.windows(2) {
                mass += p.main_void_integral(w[0], w[1], rd, |_| 1.0);
            }
            mass += p.main_void_tail_mass(*nodes.last().unwrap(), rd);
            assert!((mass / p.d_t - 1.0).abs() < 1e-6, "z={z}: {mass}");
        }
    }

    #[test]
    fn sampled_tail_lengths_follow_pdf_mean() {
        let p = DefectParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let ls = p.tail_breakpoint(R_WAFER);
        let mut below = 0usize;
        for _ in 0..n {
            let big_l = R_WAFER * rng.gen::<f64>().sqrt();
            let t = p.sample_thickness(&mut rng);
            if p.void_geometry(big_l, t).tail_length <= ls {
                below += 1;
            }
        }
        let frac = below as f64 / n as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.005, "{frac}");
    }

    #[test]
    fn constant_area_reduces_to_density() {
        let p = DefectParams::default();
        let l = length_grid(&p, R_WAFER, 64);
        let lut = LutW2W::constant(l, theta_grid(16), 1e8);
        let est = lambda_w2w(&lut, R_WAFER, &p).unwrap();
        assert!((est.lambda - 0.1).abs() < 1e-12, "{}", est.lambda);
        assert!((est.yield_() - 0.904_837_418).abs() < 1e-9);
        let rd = 5641.9;
        let lut = LutD2W::constant(radius_grid(&p, rd, 64), 1e8);
        let est = lambda_d2w(&lut, rd, &p).unwrap();
        assert!((est.lambda - 0.1).abs() < 1e-6, "{}", est.lambda);
        let zero = LutD2W::constant(radius_grid(&p, rd, 8), 0.0);
        assert_eq!(lambda_d2w(&zero, rd, &p).unwrap().yield_(), 1.0);
    }

    #[test]
    fn full_layout_matches_rectangle_minkowski_sum() {
        let g = PadBlockGrid::filled(10_000.0, 10_000.0, 400.0, 400.0, CellKind::Critical).unwrap();
        let lengths = vec![0.0, 1000.0, 3000.0, 6000.0];
        let thetas = theta_grid(8);
        let lut = LutW2W::build(&g, &lengths, &thetas, None).unwrap();
        for (i, &l) in lengths.iter().enumerate() {
            for (j, &th) in thetas.iter().enumerate() {
                let exact = 1e8 + 1e4 * l * (th.cos().abs() + th.sin().abs());
                let tol = 400.0 * (1e4 + l) * 2.0;
                assert!((lut.get(i, j) - exact).abs() <= tol, "l={l} θ={th}: {} vs {exact}", lut.get(i, j));
            }
        }
        for j in 0..thetas.len() {
            for i in 1..lengths.len() {
                assert!(lut.get(i, j) >= lut.get(i - 1, j));
            }
        }
    }

    #[test]
    fn lut_csv_roundtrip() {
        let g = PadBlockGrid::filled(2_000.0, 2_000.0, 400.0, 400.0, CellKind::Critical).unwrap();
        let lut = LutW2W::build(&g, &[0.0, 500.0, 1500.0], &theta_grid(4), None).unwrap();
        assert_eq!(LutW2W::from_csv(&lut.to_csv()).unwrap(), lut);
        let d = LutD2W::build(&g, &[50.0, 400.0, 900.0], DiskRule::Coverage).unwrap();
        assert_eq!(LutD2W::from_csv(&d.to_csv()).unwrap(), d);
        assert!(LutD2W::from_csv("# fingerprint=x\nr_um,area_um2\n1,nope\n").is_err());
    }

    #[test]
    fn fingerprint_tracks_resolution() {
        let a = PadBlockGrid::filled(2_000.0, 2_000.0, 400.0, 400.0, CellKind::Critical).unwrap();
        let b = PadBlockGrid::filled(2_000.0, 2_000.0, 200.0, 200.0, CellKind::Critical).unwrap();
        let l = [0.0, 100.0];
        let t = theta_grid(2);
        assert_ne!(LutW2W::fingerprint_for(&a, &l, &t, None), LutW2W::fingerprint_for(&b, &l, &t, None));
        assert_eq!(LutW2W::fingerprint_for(&a, &l, &t, None), LutW2W::fingerprint_for(&a, &l, &t, None));
    }
}
