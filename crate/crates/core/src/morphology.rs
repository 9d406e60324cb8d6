//! Packed binary rasters and the dilation-based critical-area engine.
//!
//! A [`BitGrid`] stores one bit per pad block, row-major, packed into `u64`
//! words. Row `r` covers `y ∈ [r·gy, (r+1)·gy)` and column `c` covers
//! `x ∈ [c·gx, (c+1)·gx)` in die-local coordinates (origin at the lower-left
//! die corner).
//!
//! Dilation follows the defect-anchor convention: `dilate(X, S)` is the set of
//! anchor cells `a` such that the translated element `a + S` touches `X`,
//! i.e. the Minkowski sum of `X` with the point reflection of `S`.

use std::fmt::Write as _;

use crate::error::{Result, YieldError};
use crate::layout::{CellKind, PadBlockGrid};

const WORD: usize = 64;

/// Dense 2-D binary raster with per-cell area metadata (µm²).
#[derive(Clone, Debug, PartialEq)]
pub struct BitGrid {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    bits: Vec<u64>,
    cell_area: f64,
}

impl BitGrid {
    pub fn new(rows: usize, cols: usize, cell_area: f64) -> Self {
        assert!(rows >= 1 && cols >= 1, "bit grid must be at least 1x1");
        let words_per_row = cols.div_ceil(WORD);
        Self {
            rows,
            cols,
            words_per_row,
            bits: vec![0; rows * words_per_row],
            cell_area,
        }
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        cell_area: f64,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let mut g = Self::new(rows, cols, cell_area);
        for r in 0..rows {
            for c in 0..cols {
                if f(r, c) {
                    g.set(r, c, true);
                }
            }
        }
        g
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_area
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        let w = self.bits[r * self.words_per_row + c / WORD];
        (w >> (c % WORD)) & 1 == 1
    }

    /// Bounds-checked read for signed coordinates; out-of-grid reads as unset.
    #[inline]
    pub fn get_signed(&self, r: i64, c: i64) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols
            && self.get(r as usize, c as usize)
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        debug_assert!(r < self.rows && c < self.cols);
        let idx = r * self.words_per_row + c / WORD;
        let mask = 1u64 << (c % WORD);
        if value {
            self.bits[idx] |= mask;
        } else {
            self.bits[idx] &= !mask;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Area covered by set cells, µm².
    pub fn area(&self) -> f64 {
        self.count_ones() as f64 * self.cell_area
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let row = self.row(r);
            row.iter().enumerate().flat_map(move |(wi, &w)| {
                let mut w = w;
                std::iter::from_fn(move || {
                    if w == 0 {
                        return None;
                    }
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some((r, wi * WORD + b))
                })
            })
        })
    }

    /// Cell-wise complement (trailing padding bits stay clear).
    pub fn not(&self) -> Self {
        let mut out = self.clone();
        for w in out.bits.iter_mut() {
            *w = !*w;
        }
        out.clear_padding();
        out
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(YieldError::DimensionMismatch {
                expected: (self.rows, self.cols),
                found: (other.rows, other.cols),
            });
        }
        Ok(())
    }

    pub fn and_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= *b;
        }
        Ok(())
    }

    pub fn or_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    fn row(&self, r: usize) -> &[u64] {
        &self.bits[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    fn clear_padding(&mut self) {
        let tail = self.cols % WORD;
        if tail == 0 {
            return;
        }
        let mask = (1u64 << tail) - 1;
        for r in 0..self.rows {
            let i = r * self.words_per_row + self.words_per_row - 1;
            self.bits[i] &= mask;
        }
    }

    /// `self |= src` translated by `(dr, dc)` cells, clipped to `self`.
    ///
    /// `src` may have different dimensions; cell `(r, c)` of `src` lands on
    /// `(r + dr, c + dc)` of `self`.
    fn or_translated(&mut self, src: &BitGrid, dr: i64, dc: i64) {
        let r_lo = dr.max(0);
        let r_hi = (src.rows as i64 + dr).min(self.rows as i64);
        if r_lo >= r_hi {
            return;
        }
        let wpr = self.words_per_row;
        for dst_r in r_lo..r_hi {
            let src_r = (dst_r - dr) as usize;
            let src_row = src.row(src_r);
            let dst_row = &mut self.bits[dst_r as usize * wpr..(dst_r as usize + 1) * wpr];
            or_shifted_row(dst_row, src_row, dc);
        }
        self.clear_padding();
    }

    /// Writes the grid as a plain (P1) portable bitmap. Row 0 is emitted first.
    pub fn to_pbm(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols * 2 + 1) + 32);
        let _ = writeln!(s, "P1");
        let _ = writeln!(s, "{} {}", self.cols, self.rows);
        for r in 0..self.rows {
            let line: Vec<&str> = (0..self.cols)
                .map(|c| if self.get(r, c) { "1" } else { "0" })
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

/// `dst |= src << shift` on bit rows (positive shift moves toward higher columns).
fn or_shifted_row(dst: &mut [u64], src: &[u64], shift: i64) {
    let n_dst = dst.len() as i64;
    let n_src = src.len() as i64;
    if shift >= 0 {
        let ws = shift / WORD as i64;
        let bs = (shift % WORD as i64) as u32;
        for i in 0..n_src {
            let j = i + ws;
            if j >= n_dst {
                break;
            }
            let w = src[i as usize];
            if w == 0 {
                continue;
            }
            dst[j as usize] |= w << bs;
            if bs != 0 && j + 1 < n_dst {
                dst[(j + 1) as usize] |= w >> (WORD as u32 - bs);
            }
        }
    } else {
        let s = -shift;
        let ws = s / WORD as i64;
        let bs = (s % WORD as i64) as u32;
        for i in ws..n_src {
            let j = i - ws;
            if j >= n_dst {
                break;
            }
            let w = src[i as usize];
            if w == 0 {
                continue;
            }
            dst[j as usize] |= w >> bs;
            if bs != 0 && j >= 1 {
                dst[(j - 1) as usize] |= w << (WORD as u32 - bs);
            }
        }
    }
}

/// A rasterized defect footprint: a set of cell offsets `(drow, dcol)`
/// relative to the defect anchor (the origin, always a member).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StructuringElement {
    offsets: Vec<(i64, i64)>,
    min: (i64, i64),
    max: (i64, i64),
}

impl StructuringElement {
    /// Builds an element from offsets; duplicates are removed and the result is
    /// sorted. Empty input yields the single-cell identity element.
    pub fn from_offsets(offsets: impl IntoIterator<Item = (i64, i64)>) -> Self {
        let mut v: Vec<(i64, i64)> = offsets.into_iter().collect();
        if v.is_empty() {
            v.push((0, 0));
        }
        v.sort_unstable();
        v.dedup();
        let min = v.iter().fold((i64::MAX, i64::MAX), |m, &(r, c)| (m.0.min(r), m.1.min(c)));
        let max = v.iter().fold((i64::MIN, i64::MIN), |m, &(r, c)| (m.0.max(r), m.1.max(c)));
        Self { offsets: v, min, max }
    }

    pub fn single() -> Self {
        Self::from_offsets([(0, 0)])
    }

    pub fn offsets(&self) -> &[(i64, i64)] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Inclusive bounding box `((min_row, min_col), (max_row, max_col))`.
    pub fn bounds(&self) -> ((i64, i64), (i64, i64)) {
        (self.min, self.max)
    }

    pub fn contains(&self, off: (i64, i64)) -> bool {
        self.offsets.binary_search(&off).is_ok()
    }

    pub fn reflect(&self) -> Self {
        Self::from_offsets(self.offsets.iter().map(|&(r, c)| (-r, -c)))
    }

    /// Bitmap view with the origin cell reported alongside.
    pub fn to_bitgrid(&self, cell_area: f64) -> (BitGrid, (usize, usize)) {
        let rows = (self.max.0 - self.min.0 + 1) as usize;
        let cols = (self.max.1 - self.min.1 + 1) as usize;
        let mut g = BitGrid::new(rows, cols, cell_area);
        for &(r, c) in &self.offsets {
            g.set((r - self.min.0) as usize, (c - self.min.1) as usize, true);
        }
        (g, ((-self.min.0) as usize, (-self.min.1) as usize))
    }

    fn lookup(&self) -> OffsetLookup {
        OffsetLookup::new(self)
    }
}

/// Dense membership table over an element's bounding box.
struct OffsetLookup {
    min: (i64, i64),
    rows: i64,
    cols: i64,
    mask: Vec<bool>,
}

impl OffsetLookup {
    fn new(se: &StructuringElement) -> Self {
        let rows = se.max.0 - se.min.0 + 1;
        let cols = se.max.1 - se.min.1 + 1;
        let mut mask = vec![false; (rows * cols) as usize];
        for &(r, c) in &se.offsets {
            mask[((r - se.min.0) * cols + (c - se.min.1)) as usize] = true;
        }
        Self { min: se.min, rows, cols, mask }
    }

    #[inline]
    fn contains(&self, r: i64, c: i64) -> bool {
        let rr = r - self.min.0;
        let cc = c - self.min.1;
        rr >= 0 && cc >= 0 && rr < self.rows && cc < self.cols && self.mask[(rr * self.cols + cc) as usize]
    }
}

/// Digital line from the origin over Euclidean length `length_um` at angle
/// `theta`.
///
/// Steps one cell at a time along the major axis and rounds the minor
/// coordinate of the exact line, so the element spans `round(l/step) + 1`
/// cells along its major axis. Lines of the same angle are nested in `l`,
/// and `θ`, `θ + π` give exact point reflections.
pub fn rasterize_segment(length_um: f64, theta: f64, gx: f64, gy: f64) -> StructuringElement {
    let length_um = length_um.max(0.0);
    let fc = length_um * theta.cos() / gx;
    let fr = length_um * theta.sin() / gy;
    let x_major = fc.abs() >= fr.abs();
    let (major, minor) = if x_major { (fc, fr) } else { (fr, fc) };
    let end = major.round() as i64;
    let slope = if major != 0.0 { minor / major } else { 0.0 };
    let cells = (0..=end.abs()).map(|k| {
        let k = k * end.signum();
        let m = (k as f64 * slope).round() as i64;
        if x_major { (m, k) } else { (k, m) }
    });
    StructuringElement::from_offsets(cells)
}

/// Cells of the discrete line from `(0,0)` to `(dr, dc)`.
///
/// Traced in the first octant on `(|dr|, |dc|)` and mirrored so that the
/// result only depends on the endpoint's absolute values and signs.
pub fn bresenham(dr: i64, dc: i64) -> StructuringElement {
    let (ar, ac) = (dr.abs(), dc.abs());
    let (sr, sc) = (dr.signum(), dc.signum());
    let (major, minor, swap) = if ac >= ar { (ac, ar, false) } else { (ar, ac, true) };
    let mut cells = Vec::with_capacity(major as usize + 1);
    // integer midpoint rule; ties round away from the start
    let mut err = 2 * minor - major;
    let mut m = 0i64;
    for k in 0..=major {
        let (r, c) = if swap { (k, m) } else { (m, k) };
        cells.push((r * sr, c * sc));
        if err > 0 || (err == 0 && major > 0 && minor > 0) {
            m += 1;
            err -= 2 * major;
        }
        err += 2 * minor;
    }
    StructuringElement::from_offsets(cells)
}

/// Disk element: a cell is set iff its center lies within `radius_um` of the
/// origin cell's center.
pub fn rasterize_disk(radius_um: f64, gx: f64, gy: f64) -> StructuringElement {
    let radius_um = radius_um.max(0.0);
    let nr = (radius_um / gy).floor() as i64;
    let nc = (radius_um / gx).floor() as i64;
    let r2 = radius_um * radius_um * (1.0 + 1e-12);
    let mut offs = Vec::new();
    for r in -nr..=nr {
        for c in -nc..=nc {
            let y = r as f64 * gy;
            let x = c as f64 * gx;
            if x * x + y * y <= r2 {
                offs.push((r, c));
            }
        }
    }
    StructuringElement::from_offsets(offs)
}

/// Fraction of anchor positions, uniform over the origin cell, from which a
/// disk of radius `r` overlaps the cell at offset `(dr, dc)`.
pub fn disk_hit_fraction(r: f64, dr: i64, dc: i64, gx: f64, gy: f64) -> f64 {
    // target cell relative to the anchor cell's lower-left corner
    let (tx0, ty0) = (dc as f64 * gx, dr as f64 * gy);
    let (tx1, ty1) = (tx0 + gx, ty0 + gy);
    let gap = |p0: f64, p1: f64, t0: f64, t1: f64| (t0 - p1).max(p0 - t1).max(0.0);
    if gap(0.0, gx, tx0, tx1).hypot(gap(0.0, gy, ty0, ty1)) >= r {
        return 0.0;
    }
    // every anchor point within r of the target's nearest point
    let worst_x = gap(0.0, 0.0, tx0, tx1).max(gap(gx, gx, tx0, tx1));
    let worst_y = gap(0.0, 0.0, ty0, ty1).max(gap(gy, gy, ty0, ty1));
    if worst_x.hypot(worst_y) < r {
        return 1.0;
    }
    // midpoint rule in x, exact hit interval in y
    const N: usize = 256;
    let mut covered = 0.0;
    for i in 0..N {
        let x = (i as f64 + 0.5) / N as f64 * gx;
        let dx = (tx0 - x).max(x - tx1).max(0.0);
        if dx >= r {
            continue;
        }
        let h = (r * r - dx * dx).sqrt();
        let lo = (ty0 - h).max(0.0);
        let hi = (ty1 + h).min(gy);
        covered += (hi - lo).max(0.0);
    }
    covered / (N as f64 * gy)
}

/// Disk element by coverage: offset `(dr, dc)` is set iff at least half of
/// the anchor cell's positions put the disk over that cell. Unlike
/// [`rasterize_disk`] this stays faithful when `r` is comparable to a cell.
pub fn rasterize_disk_coverage(radius_um: f64, gx: f64, gy: f64) -> StructuringElement {
    let r = radius_um.max(0.0);
    if r == 0.0 {
        return StructuringElement::single();
    }
    let nr = (r / gy).ceil() as i64 + 1;
    let nc = (r / gx).ceil() as i64 + 1;
    let mut offs = Vec::new();
    for dr in -nr..=nr {
        for dc in -nc..=nc {
            if (dr, dc) == (0, 0) || disk_hit_fraction(r, dr, dc, gx, gy) >= 0.5 {
                offs.push((dr, dc));
            }
        }
    }
    StructuringElement::from_offsets(offs)
}

/// Anchor-convention dilation, clipped to the input extent.
pub fn dilate(image: &BitGrid, se: &StructuringElement) -> BitGrid {
    let mut out = BitGrid::new(image.rows, image.cols, image.cell_area);
    for &(r, c) in se.offsets() {
        out.or_translated(image, -r, -c);
    }
    out
}

pub fn intersect_all(grids: &[BitGrid]) -> Result<BitGrid> {
    let (first, rest) = grids.split_first().ok_or(YieldError::EmptyInput("intersect_all"))?;
    let mut out = first.clone();
    for g in rest {
        out.and_assign(g)?;
    }
    Ok(out)
}

pub fn union_all(grids: &[BitGrid]) -> Result<BitGrid> {
    let (first, rest) = grids.split_first().ok_or(YieldError::EmptyInput("union_all"))?;
    let mut out = first.clone();
    for g in rest {
        out.or_assign(g)?;
    }
    Ok(out)
}

pub fn area(grid: &BitGrid) -> f64 {
    grid.area()
}

/// Which defect anchors are counted by [`critical_area`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnchorDomain {
    /// Only anchors inside the die footprint.
    Die,
    /// Any anchor in the plane whose defect reaches the die: the die bitmap is
    /// padded by the element's bounding box before dilation.
    Plane,
}

/// A redundancy group as seen by the critical-area engine: member cells and
/// how many member failures the group tolerates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupCells {
    pub members: Vec<(usize, usize)>,
    pub tolerance: usize,
}

impl GroupCells {
    /// Member failures that make the group fatal.
    pub fn fatal_hits(&self) -> usize {
        (self.tolerance + 1).min(self.members.len()).max(1)
    }
}

/// Critical-area bitmap of `layout` for one defect element.
///
/// Fatal anchors are those whose defect touches a Critical cell, or touches
/// more members of some redundancy group than the group tolerates (all
/// replicas for dedicated groups). Dummy, power/ground and empty cells never
/// contribute.
///
/// Returns the bitmap together with the anchor-domain offset of die cell
/// `(0, 0)` inside it.
pub fn critical_area_map(
    layout: &PadBlockGrid,
    se: &StructuringElement,
    domain: AnchorDomain,
) -> (BitGrid, (i64, i64)) {
    let groups = layout.group_cells();
    critical_area_map_parts(layout, &groups, se, domain)
}

pub(crate) fn critical_area_map_parts(
    layout: &PadBlockGrid,
    groups: &[GroupCells],
    se: &StructuringElement,
    domain: AnchorDomain,
) -> (BitGrid, (i64, i64)) {
    let (rows, cols) = (layout.rows(), layout.cols());
    let cell_area = layout.cell_area();
    // anchors a with a + s inside the die: a ∈ [-max, dims-1-min]
    let ((min_r, min_c), (max_r, max_c)) = se.bounds();
    let (top, left, out_rows, out_cols) = match domain {
        AnchorDomain::Die => (0, 0, rows, cols),
        AnchorDomain::Plane => {
            let top = max_r.max(0);
            let left = max_c.max(0);
            let bottom = (-min_r).max(0);
            let right = (-min_c).max(0);
            (
                top,
                left,
                rows + (top + bottom) as usize,
                cols + (left + right) as usize,
            )
        }
    };
    let mut crit = BitGrid::new(rows, cols, cell_area);
    for (r, c, kind) in layout.iter_cells() {
        if kind == CellKind::Critical {
            crit.set(r, c, true);
        }
    }
    let mut out = BitGrid::new(out_rows, out_cols, cell_area);
    if !crit.is_empty() {
        for &(dr, dc) in se.offsets() {
            out.or_translated(&crit, top - dr, left - dc);
        }
    }
    if !groups.is_empty() {
        let lookup = se.lookup();
        let mut scratch = Counter { counts: vec![0; out_rows * out_cols], touched: Vec::new() };
        for g in groups {
            mark_group(&mut out, g, se, &lookup, (top, left), &mut scratch);
        }
    }
    (out, (top, left))
}

fn mark_group(
    out: &mut BitGrid,
    group: &GroupCells,
    se: &StructuringElement,
    lookup: &OffsetLookup,
    origin: (i64, i64),
    scratch: &mut Counter,
) {
    let need = group.fatal_hits();
    let mut mark = |a: (i64, i64)| {
        let r = a.0 + origin.0;
        let c = a.1 + origin.1;
        if r >= 0 && c >= 0 && (r as usize) < out.rows && (c as usize) < out.cols {
            out.set(r as usize, c as usize, true);
        }
    };
    if need == 1 {
        for &(mr, mc) in &group.members {
            for &(dr, dc) in se.offsets() {
                mark((mr as i64 - dr, mc as i64 - dc));
            }
        }
        return;
    }
    if need == group.members.len() {
        // every member must be hit: walk the first member's anchors and test the rest
        let (r0, c0) = group.members[0];
        'anchor: for &(dr, dc) in se.offsets() {
            let a = (r0 as i64 - dr, c0 as i64 - dc);
            for &(mr, mc) in &group.members[1..] {
                if !lookup.contains(mr as i64 - a.0, mc as i64 - a.1) {
                    continue 'anchor;
                }
            }
            mark(a);
        }
        return;
    }
    let (rows, cols) = (out.rows as i64, out.cols as i64);
    for &(mr, mc) in &group.members {
        for &(dr, dc) in se.offsets() {
            let r = mr as i64 - dr + origin.0;
            let c = mc as i64 - dc + origin.1;
            if r >= 0 && c >= 0 && r < rows && c < cols {
                let i = (r * cols + c) as usize;
                if scratch.counts[i] == 0 {
                    scratch.touched.push(i);
                }
                scratch.counts[i] += 1;
            }
        }
    }
    for i in scratch.touched.drain(..) {
        if scratch.counts[i] as usize >= need {
            out.set(i / out.cols, i % out.cols, true);
        }
        scratch.counts[i] = 0;
    }
}

/// Per-anchor hit counter reused across groups.
struct Counter {
    counts: Vec<u32>,
    touched: Vec<usize>,
}

/// Critical area (µm²) of `layout` for one defect element.
pub fn critical_area(layout: &PadBlockGrid, se: &StructuringElement, domain: AnchorDomain) -> f64 {
    critical_area_map(layout, se, domain).0.area()
}
