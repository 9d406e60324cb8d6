//! Overlay yield: systematic distortion field, allowable misalignment and
//! per-die probability of survival.
//!
//! Lengths are µm, angles rad, magnification dimensionless.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::erfc;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, YieldError};
use crate::layout::{DieSite, DieSpec, PadBlockGrid};

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Magnification from bonded-wafer warpage, `E = k_mag·B`.
pub fn magnification_from_warpage(warpage_um: f64, k_mag_per_m: f64) -> f64 {
    k_mag_per_m * warpage_um * 1e-6
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlayParams {
    /// Mean of the random misalignment `u`.
    pub u_mean_um: f64,
    /// Standard deviation of `u`.
    pub sigma1_um: f64,
    pub tx_um: f64,
    pub ty_um: f64,
    pub alpha_rad: f64,
    pub magnification: f64,
    pub k_ca: f64,
    pub k_cd: f64,
}

impl Default for OverlayParams {
    fn default() -> Self {
        Self {
            u_mean_um: 0.0,
            sigma1_um: 0.0,
            tx_um: 0.0,
            ty_um: 0.0,
            alpha_rad: 0.0,
            magnification: 0.0,
            k_ca: 0.5,
            k_cd: 0.5,
        }
    }
}

impl OverlayParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1_um >= 0.0) {
            return Err(YieldError::param("random misalignment sigma must be non-negative"));
        }
        for (name, k) in [("k_ca", self.k_ca), ("k_cd", self.k_cd)] {
            if !(0.0..=1.0).contains(&k) {
                return Err(YieldError::param(format!("{name} = {k} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// `(Δx, Δy, s)` at `(x, y)`.
    pub fn systematic_shift(&self, x_um: f64, y_um: f64) -> (f64, f64, f64) {
        let dx = self.tx_um - self.alpha_rad * y_um + self.magnification * x_um;
        let dy = self.ty_um + self.alpha_rad * x_um + self.magnification * y_um;
        (dx, dy, dx.hypot(dy))
    }
}

/// Overlap area of a top pad (radius `r1`) and bottom pad (`r2 ≥ r1`) whose
/// centers are `s` apart.
pub fn contact_area(s: f64, r1: f64, r2: f64) -> f64 {
    let s = s.abs();
    if s < r2 - r1 {
        return PI * r1 * r1;
    }
    if s > r1 + r2 {
        return 0.0;
    }
    if s == 0.0 {
        // r1 == r2 and concentric
        return PI * r1 * r1;
    }
    let c1 = ((s * s + r1 * r1 - r2 * r2) / (2.0 * s * r1)).clamp(-1.0, 1.0);
    let c2 = ((s * s + r2 * r2 - r1 * r1) / (2.0 * s * r2)).clamp(-1.0, 1.0);
    let (t1, t2) = (c1.acos(), c2.acos());
    t1 * r1 * r1 + t2 * r2 * r2 - s * r1 * t1.sin()
}

/// Largest misalignment at which a pad still satisfies both the contact-area
/// and the critical-distance constraint.
pub fn max_allowed_misalignment(die: &DieSpec, k_ca: f64, k_cd: f64) -> Result<f64> {
    die.validate()?;
    if !(0.0..=1.0).contains(&k_ca) || !(0.0..=1.0).contains(&k_cd) {
        return Err(YieldError::param("k_ca and k_cd must lie in [0, 1]"));
    }
    let (r1, r2) = (die.top_radius_um(), die.bottom_radius_um());
    let target = k_ca * PI * r1 * r1;
    let (mut lo, mut hi) = ((r2 - r1).max(0.0), r1 + r2);
    let s_star = if target <= 0.0 {
        hi
    } else {
        while hi - lo > 1e-9 {
            let mid = 0.5 * (lo + hi);
            if contact_area(mid, r1, r2) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let cd = (1.0 - k_cd) * die.pitch_um - 0.5 * die.top_pad_um + (k_cd - 0.5) * die.bottom_pad_um;
    Ok(s_star.min(cd).max(0.0))
}

/// Probability that `|u + s| < δ` for `u ~ N(0, σ1²)`.
pub fn pad_pos(delta: f64, s: f64, sigma1: f64) -> f64 {
    if sigma1 <= 0.0 {
        return if s.abs() < delta { 1.0 } else { 0.0 };
    }
    // difference of upper tails keeps precision when both CDFs are near 1
    let hi = (delta - s) / sigma1;
    let lo = (-delta - s) / sigma1;
    let p = if lo > 0.0 { normal_cdf(-lo) - normal_cdf(-hi) } else { normal_cdf(hi) - normal_cdf(lo) };
    p.clamp(0.0, 1.0)
}

/// Functional (critical + redundant) cells of a layout in die-centered
/// coordinates, with the convex hull of their corners.
#[derive(Clone, Debug)]
pub struct FunctionalRegion {
    /// `(x0, y0, x1, y1)` per functional cell, die-centered, plus the layout
    /// cell index `(row, col)`.
    pub cells: Vec<((f64, f64, f64, f64), (usize, usize))>,
    pub hull: Vec<(f64, f64)>,
}

impl FunctionalRegion {
    pub fn from_layout(layout: &PadBlockGrid) -> Result<Self> {
        let (w, h) = layout.die_extent_um();
        let mut cells = Vec::new();
        let mut corners = Vec::new();
        let mut row_start = 0;
        for (r, c, k) in layout.iter_cells() {
            if k.is_functional() {
                let (x0, y0, x1, y1) = layout.cell_rect(r, c);
                let rect = (x0 - 0.5 * w, y0 - 0.5 * h, x1 - 0.5 * w, y1 - 0.5 * h);
                cells.push((rect, (r, c)));
            }
            if c + 1 == layout.cols() {
                // only the outermost cells of a row can reach the hull
                let row = &cells[row_start..];
                for (rect, _) in row.first().into_iter().chain(row.last()) {
                    corners.extend([(rect.0, rect.1), (rect.2, rect.1), (rect.0, rect.3), (rect.2, rect.3)]);
                }
                row_start = cells.len();
            }
        }
        if cells.is_empty() {
            return Err(YieldError::EmptyInput("functional cells"));
        }
        Ok(Self { cells, hull: convex_hull(corners) })
    }

    /// Maximum systematic error over the region for a die centered at
    /// `center` (wafer coordinates for W2W, origin for D2W).
    pub fn s_max(&self, p: &OverlayParams, center: (f64, f64)) -> f64 {
        self.hull
            .iter()
            .map(|&(x, y)| p.systematic_shift(center.0 + x, center.1 + y).2)
            .fold(0.0, f64::max)
    }
}

/// Extreme values of `s` over one rectangle: `(min, max)`.
pub fn s_range_rect(p: &OverlayParams, center: (f64, f64), rect: (f64, f64, f64, f64)) -> (f64, f64) {
    let corners = [(rect.0, rect.1), (rect.2, rect.1), (rect.0, rect.3), (rect.2, rect.3)];
    let max = corners
        .iter()
        .map(|&(x, y)| p.systematic_shift(center.0 + x, center.1 + y).2)
        .fold(0.0, f64::max);
    // the map is a scaled rotation plus a shift, so |Δ| = λ·|q − q*| where q*
    // is the zero of the field
    let lambda = p.magnification.hypot(p.alpha_rad);
    let min = if lambda == 0.0 {
        p.tx_um.hypot(p.ty_um)
    } else {
        let l2 = lambda * lambda;
        let qx = -(p.magnification * p.tx_um + p.alpha_rad * p.ty_um) / l2 - center.0;
        let qy = -(p.magnification * p.ty_um - p.alpha_rad * p.tx_um) / l2 - center.1;
        let dx = (rect.0 - qx).max(qx - rect.2).max(0.0);
        let dy = (rect.1 - qy).max(qy - rect.3).max(0.0);
        lambda * dx.hypot(dy)
    };
    (min, max)
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() + 1);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Die POS: the lowest pad POS over the functional region.
pub fn die_pos(delta: f64, p: &OverlayParams, region: &FunctionalRegion, center: (f64, f64)) -> f64 {
    pad_pos(delta, region.s_max(p, center) + p.u_mean_um, p.sigma1_um)
}

/// Wafer-level overlay yield: mean die POS over all sites.
pub fn yield_ovl_w2w(delta: f64, p: &OverlayParams, region: &FunctionalRegion, sites: &[DieSite]) -> Result<f64> {
    if sites.is_empty() {
        return Err(YieldError::EmptyInput("die sites"));
    }
    let sum: f64 = sites.iter().map(|d| die_pos(delta, p, region, (d.x_um, d.y_um))).sum();
    Ok(sum / sites.len() as f64)
}

/// Die-to-wafer overlay yield: die POS in die-local coordinates.
pub fn yield_ovl_d2w(delta: f64, p: &OverlayParams, region: &FunctionalRegion) -> f64 {
    die_pos(delta, p, region, (0.0, 0.0))
}

/// Distributions of the overlay terms, sampled per wafer (W2W) or per die
/// (D2W) by the simulator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlayDistribution {
    pub u: (f64, f64),
    pub tx: (f64, f64),
    pub ty: (f64, f64),
    pub alpha: (f64, f64),
    pub magnification: (f64, f64),
    pub k_ca: f64,
    pub k_cd: f64,
}

/// One sampled distortion field plus random offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlaySample {
    pub field: OverlayParams,
    pub u_um: f64,
}

impl OverlayDistribution {
    /// Parameters used by the analytical model: means of the systematic terms.
    pub fn mean_params(&self) -> OverlayParams {
        OverlayParams {
            u_mean_um: self.u.0,
            sigma1_um: self.u.1,
            tx_um: self.tx.0,
            ty_um: self.ty.0,
            alpha_rad: self.alpha.0,
            magnification: self.magnification.0,
            k_ca: self.k_ca,
            k_cd: self.k_cd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (m, s)) in
            [("u", self.u), ("tx", self.tx), ("ty", self.ty), ("alpha", self.alpha), ("magnification", self.magnification)]
        {
            if !m.is_finite() || !(s >= 0.0 && s.is_finite()) {
                return Err(YieldError::param(format!("overlay term {name}: mean {m}, std {s}")));
            }
        }
        self.mean_params().validate()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> OverlaySample {
        let mut draw = |(m, s): (f64, f64)| {
            if s > 0.0 {
                Normal::new(m, s).expect("validated").sample(rng)
            } else {
                m
            }
        };
        let u_um = draw(self.u);
        let field = OverlayParams {
            u_mean_um: 0.0,
            sigma1_um: 0.0,
            tx_um: draw(self.tx),
            ty_um: draw(self.ty),
            alpha_rad: draw(self.alpha),
            magnification: draw(self.magnification),
            k_ca: self.k_ca,
            k_cd: self.k_cd,
        };
        OverlaySample { field, u_um }
    }
}
