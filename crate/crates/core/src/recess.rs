//! Cu recess yield: combined pad-height window after annealing, peeling-stress
//! limit and die yield with redundancy.
//!
//! Heights are nm (negative = recessed), stresses Pa unless noted.

use crate::error::{Result, YieldError};
use crate::layout::{CellKind, PadBlockGrid};
use crate::overlay::normal_cdf;

/// Default bonded-fraction curve: `(θ_ad, A_b*)` pairs, interpolated
/// log-linearly and extrapolated exponentially past the last point.
pub const DEFAULT_BONDING_CURVE: [(f64, f64); 7] =
    [(0.0, 1.0), (0.5, 0.85), (1.0, 0.6), (2.0, 0.3), (3.0, 0.15), (4.0, 0.07), (6.0, 0.02)];

#[derive(Clone, Debug, PartialEq)]
pub struct RecessParams {
    pub mu_top_nm: f64,
    pub sigma_top_nm: f64,
    pub mu_bot_nm: f64,
    pub sigma_bot_nm: f64,
    /// Height gap the post-bond Cu expansion of a pad pair can close.
    pub cu_expansion_total_nm: f64,
    pub sigma_z_nm: f64,
    pub r_z_um: f64,
    pub e_d_gpa: f64,
    pub poisson_ratio: f64,
    pub w_j_m2: f64,
    pub t_d_um: f64,
    /// N·m⁻³
    pub k_peel: f64,
    pub h0_nm: f64,
    pub bonding_curve: Vec<(f64, f64)>,
}

impl Default for RecessParams {
    fn default() -> Self {
        Self {
            mu_top_nm: -10.0,
            sigma_top_nm: 1.0,
            mu_bot_nm: -10.0,
            sigma_bot_nm: 1.0,
            cu_expansion_total_nm: 29.0,
            sigma_z_nm: 1.0,
            r_z_um: 1.0,
            e_d_gpa: 73.0,
            poisson_ratio: 0.17,
            w_j_m2: 1.2,
            t_d_um: 1.5,
            k_peel: 6.55e15,
            h0_nm: 75.0,
            bonding_curve: DEFAULT_BONDING_CURVE.to_vec(),
        }
    }
}

/// `k_exp·(T_anneal − T_ref)·pad_depth` for users with expansion-coefficient data.
pub fn cu_expansion_from_cte(k_exp_per_k: f64, t_anneal_c: f64, t_ref_c: f64, pad_depth_nm: f64) -> f64 {
    (k_exp_per_k * (t_anneal_c - t_ref_c) * pad_depth_nm).max(0.0)
}

impl RecessParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_top_nm >= 0.0 && self.sigma_bot_nm >= 0.0) {
            return Err(YieldError::param("pad height sigmas must be non-negative"));
        }
        if !(self.e_d_gpa > 0.0 && self.w_j_m2 > 0.0 && self.t_d_um > 0.0) {
            return Err(YieldError::param("modulus, adhesion energy and dielectric thickness must be positive"));
        }
        if !(self.cu_expansion_total_nm >= 0.0) {
            return Err(YieldError::param("Cu expansion must be non-negative"));
        }
        if !(self.sigma_z_nm >= 0.0 && self.r_z_um > 0.0 && self.k_peel > 0.0) {
            return Err(YieldError::param("roughness, asperity radius and k_peel out of range"));
        }
        if !(0.0..0.5).contains(&self.poisson_ratio) {
            return Err(YieldError::param("Poisson ratio must lie in [0, 0.5)"));
        }
        validate_curve(&self.bonding_curve)
    }

    pub fn mu_h(&self) -> f64 {
        self.mu_top_nm + self.mu_bot_nm
    }

    pub fn sigma_h(&self) -> f64 {
        self.sigma_top_nm.hypot(self.sigma_bot_nm)
    }

    /// Normalized modulus of two identical contacting surfaces, Pa.
    pub fn reduced_modulus_pa(&self) -> f64 {
        self.e_d_gpa * 1e9 / (2.0 * (1.0 - self.poisson_ratio * self.poisson_ratio))
    }

    /// Adhesion parameter `θ = E*·σ_z^{3/2} / (w·R_z^{1/2})`.
    pub fn adhesion_parameter(&self) -> f64 {
        let sz = self.sigma_z_nm * 1e-9;
        let rz = self.r_z_um * 1e-6;
        self.reduced_modulus_pa() * sz.powf(1.5) / (self.w_j_m2 * rz.sqrt())
    }

    pub fn effective_contact_area(&self) -> f64 {
        bonding_fraction(&self.bonding_curve, self.adhesion_parameter())
    }

    /// `A_b*·√(2·E_d·w/t_d)`, Pa.
    pub fn tolerable_peeling_stress(&self) -> f64 {
        self.effective_contact_area() * (2.0 * self.e_d_gpa * 1e9 * self.w_j_m2 / (self.t_d_um * 1e-6)).sqrt()
    }

    /// `(ζ−, ζ+)` for Cu pattern density `d_cu`.
    pub fn height_bounds(&self, d_cu: f64) -> (f64, f64) {
        let zeta_minus = -self.cu_expansion_total_nm;
        let h_peel = if d_cu > 0.0 {
            self.h0_nm + self.tolerable_peeling_stress() / (self.k_peel * d_cu) * 1e9
        } else {
            f64::INFINITY
        };
        (zeta_minus, h_peel.min(0.0))
    }

    /// Per-pad probability that the combined height lands inside `(ζ−, ζ+)`.
    pub fn pad_pos(&self, d_cu: f64) -> f64 {
        let (lo, hi) = self.height_bounds(d_cu);
        window_probability(self.mu_h(), self.sigma_h(), lo, hi)
    }

    /// `1 − pad_pos`, without cancellation when it is tiny.
    pub fn pad_failure(&self, d_cu: f64) -> f64 {
        let (lo, hi) = self.height_bounds(d_cu);
        window_failure(self.mu_h(), self.sigma_h(), lo, hi)
    }
}

fn validate_curve(curve: &[(f64, f64)]) -> Result<()> {
    if curve.len() < 2 {
        return Err(YieldError::param("bonding curve needs at least two points"));
    }
    if curve[0].0 != 0.0 || curve[0].1 != 1.0 {
        return Err(YieldError::param("bonding curve must start at (0, 1)"));
    }
    for w in curve.windows(2) {
        if !(w[1].0 > w[0].0 && w[1].1 < w[0].1 && w[1].1 > 0.0) {
            return Err(YieldError::param("bonding curve must be strictly decreasing in (0, 1]"));
        }
    }
    Ok(())
}

/// Bonded area fraction at adhesion parameter `theta`.
pub fn bonding_fraction(curve: &[(f64, f64)], theta: f64) -> f64 {
    let theta = theta.max(0.0);
    let i = curve.partition_point(|p| p.0 <= theta).clamp(1, curve.len() - 1);
    let (a, b) = (curve[i - 1], curve[i]);
    let slope = (b.1.ln() - a.1.ln()) / (b.0 - a.0);
    (a.1.ln() + slope * (theta - a.0)).exp().min(1.0)
}

/// `P(lo < h < hi)` for `h ~ N(µ, σ²)`.
pub fn window_probability(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    if sigma <= 0.0 {
        return if mu > lo && mu < hi { 1.0 } else { 0.0 };
    }
    let (a, b) = ((lo - mu) / sigma, (hi - mu) / sigma);
    let p = if a > 0.0 { normal_cdf(-a) - normal_cdf(-b) } else { normal_cdf(b) - normal_cdf(a) };
    p.clamp(0.0, 1.0)
}

/// Probability that the complement `1 − POS` is computed without cancellation.
fn window_failure(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return 1.0;
    }
    if sigma <= 0.0 {
        return if mu > lo && mu < hi { 0.0 } else { 1.0 };
    }
    (normal_cdf((lo - mu) / sigma) + normal_cdf((mu - hi) / sigma)).min(1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    (1..=k).map(|i| ((n + 1 - i) as f64 / i as f64).ln()).sum()
}

/// `ln P(at most k of m pads fail)` for per-pad failure probability `q`.
pub fn ln_group_pad_survival(q: f64, m: usize, k: usize) -> f64 {
    if k >= m {
        return 0.0;
    }
    if q <= 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return f64::NEG_INFINITY;
    }
    let (lq, lp) = (q.ln(), (-q).ln_1p());
    let term = |i: usize| (ln_choose(m, i) + i as f64 * lq + (m - i) as f64 * lp).exp();
    if q < 0.5 {
        let tail: f64 = (k + 1..=m).map(term).sum();
        (-tail.min(1.0)).ln_1p()
    } else {
        (0..=k).map(term).sum::<f64>().ln()
    }
}

/// Pad counts behind the recess yield.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PadCounts {
    /// Pads that must all survive.
    pub critical: u64,
    /// Per redundancy group: `(pad positions, members, tolerated failures)`.
    pub groups: Vec<(u64, usize, usize)>,
}

impl PadCounts {
    /// Pads per cell are `⌊w/p⌋·⌊h/p⌋`. Pad `j` of every member of a group
    /// backs up pad `j` of the others; when members hold different pad
    /// counts the surplus pads are counted as critical.
    pub fn from_layout(layout: &PadBlockGrid, pitch_um: f64) -> Self {
        let mut out = Self::default();
        for (r, c, k) in layout.iter_cells() {
            if k == CellKind::Critical {
                out.critical += layout.pads_in_cell(r, c, pitch_um);
            }
        }
        for (members, gc) in layout.groups().values().zip(layout.group_cells()) {
            let pads: Vec<u64> = members.iter().map(|&(r, c, _)| layout.pads_in_cell(r, c, pitch_um)).collect();
            let shared = pads.iter().copied().min().unwrap_or(0);
            out.critical += pads.iter().map(|n| n - shared).sum::<u64>();
            out.groups.push((shared, members.len(), gc.tolerance));
        }
        out
    }

    pub fn total(&self) -> u64 {
        self.critical + self.groups.iter().map(|g| g.0 * g.1 as u64).sum::<u64>()
    }
}

/// Breakdown of a recess evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RecessEvaluation {
    pub a_b: f64,
    pub sigma_tol_pa: f64,
    pub zeta_minus_nm: f64,
    pub zeta_plus_nm: f64,
    pub pad_pos: f64,
    pub yield_cr: f64,
}

/// Die yield: every critical pad survives and no group loses more pads at
/// any position than it tolerates. Evaluated in log space.
pub fn yield_recess(params: &RecessParams, d_cu: f64, counts: &PadCounts) -> Result<RecessEvaluation> {
    params.validate()?;
    let (lo, hi) = params.height_bounds(d_cu);
    let q = window_failure(params.mu_h(), params.sigma_h(), lo, hi);
    Ok(RecessEvaluation {
        a_b: params.effective_contact_area(),
        sigma_tol_pa: params.tolerable_peeling_stress(),
        zeta_minus_nm: lo,
        zeta_plus_nm: hi,
        pad_pos: 1.0 - q,
        yield_cr: yield_from_failure(q, counts),
    })
}

/// Recess die yield for per-pad failure probability `q`.
pub fn yield_from_failure(q: f64, counts: &PadCounts) -> f64 {
    let mut ln_y = if counts.critical == 0 {
        0.0
    } else if q >= 1.0 {
        f64::NEG_INFINITY
    } else {
        counts.critical as f64 * (-q).ln_1p()
    };
    for &(n, m, k) in &counts.groups {
        if n > 0 {
            ln_y += n as f64 * ln_group_pad_survival(q, m, k);
        }
    }
    ln_y.exp()
}

/// `POS^{N_cr}·[1 − (1 − POS)^{M_r}]^{N_r}` with uniform groups in which any
/// single surviving replica suffices.
pub fn yield_recess_uniform(pos: f64, n_cr: u64, n_r: u64, m_r: u32) -> f64 {
    let q = 1.0 - pos;
    let ln_cr = if n_cr == 0 { 0.0 } else { n_cr as f64 * pos.ln() };
    let ln_rd = if n_r == 0 { 0.0 } else { n_r as f64 * (-q.powi(m_r as i32)).ln_1p() };
    (ln_cr + ln_rd).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_random_redundant_layout, DieSpec, RedundancyScheme};

    #[test]
    fn peeling_stress_scale() {
        let p = RecessParams { bonding_curve: vec![(0.0, 1.0), (1e9, 0.999_999)], ..Default::default() };
        // A_b* ≈ 1: √(2·73e9·1.2/1.5e-6) Pa
        let s = p.tolerable_peeling_stress();
        assert!((s / 1e6 - 341.760_149_2).abs() < 1e-3, "{s}");
        let thick = RecessParams { t_d_um: 3.0, ..p.clone() };
        assert!((s / thick.tolerable_peeling_stress() - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn baseline_bonding_fraction_is_frozen() {
        let p = RecessParams::default();
        let theta = p.adhesion_parameter();
        assert!((theta - 0.990_484).abs() < 1e-5, "{theta}");
        let ab = p.effective_contact_area();
        assert!(ab > 0.0 && ab <= 1.0);
        assert!((ab - 0.603_990).abs() < 1e-5, "{ab}");
    }

    #[test]
    fn bonding_fraction_limits() {
        let c = DEFAULT_BONDING_CURVE;
        assert_eq!(bonding_fraction(&c, 0.0), 1.0);
        let mut prev = 1.0;
        for i in 1..200 {
            let v = bonding_fraction(&c, i as f64 * 0.05);
            assert!(v < prev);
            prev = v;
        }
        assert!(bonding_fraction(&c, 20.0) > 0.0);
    }

    #[test]
    fn bounds_examples() {
        let p = RecessParams::default();
        let (lo, hi) = p.height_bounds(0.196);
        assert_eq!((lo, hi), (-29.0, 0.0));
        assert_eq!(p.height_bounds(1e-12).1, 0.0);
        let zero = RecessParams { cu_expansion_total_nm: 0.0, ..p.clone() };
        assert_eq!(zero.pad_pos(0.196), 0.0);
        // h_peel itself: h0 + σ_tol/(k_peel·D_Cu)
        let hp = p.h0_nm + p.tolerable_peeling_stress() / (p.k_peel * 0.196) * 1e9;
        assert!(hp > 75.0);
    }

    #[test]
    fn window_examples() {
        let p = window_probability(-20.0, 2f64.sqrt(), -40.0, 0.0);
        assert!(1.0 - p < 1e-40);
        assert!(window_probability(-20.0, 1e9, -40.0, 0.0) < 1e-7);
        let best = window_probability(-20.0, 5.0, -40.0, 0.0);
        for mu in [-25.0, -15.0, -21.0, -19.0] {
            assert!(window_probability(mu, 5.0, -40.0, 0.0) < best);
        }
        assert_eq!(window_probability(0.0, 1.0, 1.0, -1.0), 0.0);
    }

    #[test]
    fn uniform_form_reductions() {
        let pos: f64 = 0.999;
        assert!((yield_recess_uniform(pos, 10, 5, 1) - pos.powi(15)).abs() < 1e-15);
        assert_eq!(yield_recess_uniform(1.0, 1_000_000, 1000, 2), 1.0);
        let y = yield_recess_uniform(1.0 - 1e-8, 1_000_000, 0, 2);
        assert!((y - (-0.01f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn generalized_groups_match_uniform_form() {
        let q = 1e-3;
        for m in 2..6 {
            let counts = PadCounts { critical: 100, groups: vec![(40, m, m - 1)] };
            let a = yield_from_failure(q, &counts);
            let b = yield_recess_uniform(1.0 - q, 100, 40, m as u32);
            assert!((a - b).abs() < 1e-12 * b, "{m}: {a} {b}");
        }
    }

    #[test]
    fn log_space_matches_direct() {
        for &q in &[1e-3f64, 0.02, 0.3, 0.7] {
            for n in [1u64, 10, 100, 1000] {
                let direct = (1.0 - q).powi(n as i32);
                let via = yield_from_failure(q, &PadCounts { critical: n, groups: vec![] });
                assert!((direct - via).abs() <= 1e-12 * direct.max(1e-300));
            }
            // shared group of 5 tolerating one failure, direct binomial
            let p = 1.0 - q;
            let direct = p.powi(5) + 5.0 * q * p.powi(4);
            assert!((ln_group_pad_survival(q, 5, 1).exp() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn counts_from_layouts() {
        let die = DieSpec::new(10.0, 10.0, 1.0, 0.3, 0.5).unwrap();
        let (g, _) =
            build_random_redundant_layout(&die, 200.0, RedundancyScheme::Dedicated { spacing_um: 400.0 }, 1).unwrap();
        let c = PadCounts::from_layout(&g, 1.0);
        assert_eq!(c.critical, 0);
        assert_eq!(c.groups.len(), 1250);
        assert!(c.groups.iter().all(|&g| g == (40_000, 2, 1)));
        assert_eq!(c.total(), 100_000_000);
    }
}
