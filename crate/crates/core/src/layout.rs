//! Wafers, dies and gridded pad-block layouts.
//!
//! A die is divided into a grid of pad blocks; every block carries one kind of
//! I/O pad. Redundant blocks belong to a group: a group survives a defect as
//! long as no more than `tolerance` of its member blocks are lost, where the
//! tolerance is the number of replica (spare) members.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, YieldError};
use crate::morphology::GroupCells;

const EPS: f64 = 1e-9;

/// Die footprint and pad geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DieSpec {
    pub width_mm: f64,
    pub height_mm: f64,
    pub pitch_um: f64,
    /// Top pad diameter `d1`.
    pub top_pad_um: f64,
    /// Bottom pad diameter `d2`.
    pub bottom_pad_um: f64,
}

impl DieSpec {
    pub fn new(width_mm: f64, height_mm: f64, pitch_um: f64, top_pad_um: f64, bottom_pad_um: f64) -> Result<Self> {
        let d = Self { width_mm, height_mm, pitch_um, top_pad_um, bottom_pad_um };
        d.validate()?;
        Ok(d)
    }

    /// Square die of the given area with pads scaled to the pitch
    /// (`d2 = p/2`, `d1 = 0.3·p`).
    pub fn square_scaled(area_mm2: f64, pitch_um: f64) -> Result<Self> {
        let side = area_mm2.sqrt();
        Self::new(side, side, pitch_um, 0.3 * pitch_um, 0.5 * pitch_um)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.width_mm, self.height_mm, self.pitch_um, self.top_pad_um, self.bottom_pad_um];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(YieldError::param("die dimensions, pitch and pad sizes must be positive"));
        }
        if self.top_pad_um > self.bottom_pad_um {
            return Err(YieldError::param(format!(
                "top pad ({} µm) must not exceed bottom pad ({} µm)",
                self.top_pad_um, self.bottom_pad_um
            )));
        }
        if self.bottom_pad_um >= self.pitch_um {
            return Err(YieldError::param(format!(
                "bottom pad ({} µm) must be smaller than the pitch ({} µm)",
                self.bottom_pad_um, self.pitch_um
            )));
        }
        Ok(())
    }

    pub fn width_um(&self) -> f64 {
        self.width_mm * 1e3
    }

    pub fn height_um(&self) -> f64 {
        self.height_mm * 1e3
    }

    pub fn area_um2(&self) -> f64 {
        self.width_um() * self.height_um()
    }

    pub fn top_radius_um(&self) -> f64 {
        0.5 * self.top_pad_um
    }

    pub fn bottom_radius_um(&self) -> f64 {
        0.5 * self.bottom_pad_um
    }

    /// Radius of the disk with the same area as the die, µm.
    pub fn effective_radius_um(&self) -> f64 {
        (self.area_um2() / std::f64::consts::PI).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaferSpec {
    pub radius_mm: f64,
    pub die: DieSpec,
    pub edge_exclusion_mm: f64,
}

impl WaferSpec {
    pub fn radius_um(&self) -> f64 {
        self.radius_mm * 1e3
    }
}

/// One die site on a wafer. Coordinates are the die center in wafer
/// coordinates (µm, origin at the wafer center).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DieSite {
    pub row: i64,
    pub col: i64,
    pub x_um: f64,
    pub y_um: f64,
}

/// Places dies on an axis-aligned grid whose lines pass through the wafer
/// center, keeping every die whose four corners lie inside the usable radius.
///
/// Sites are ordered row-major starting from the most negative `(y, x)`.
pub fn generate_wafer_map(wafer: &WaferSpec) -> Result<Vec<DieSite>> {
    wafer.die.validate()?;
    if !(wafer.radius_mm > 0.0) || wafer.edge_exclusion_mm < 0.0 {
        return Err(YieldError::param("wafer radius must be positive and edge exclusion non-negative"));
    }
    let usable = (wafer.radius_mm - wafer.edge_exclusion_mm) * 1e3;
    let a = wafer.die.width_um();
    let b = wafer.die.height_um();
    let r2 = usable * usable * (1.0 + 1e-12);
    let ni = (usable / a).ceil() as i64 + 1;
    let nj = (usable / b).ceil() as i64 + 1;
    let mut sites = Vec::new();
    for j in -nj..nj {
        for i in -ni..ni {
            let (x0, y0) = (i as f64 * a, j as f64 * b);
            let inside = [(x0, y0), (x0 + a, y0), (x0, y0 + b), (x0 + a, y0 + b)]
                .iter()
                .all(|&(x, y)| x * x + y * y <= r2);
            if inside {
                sites.push(DieSite { row: j, col: i, x_um: x0 + 0.5 * a, y_um: y0 + 0.5 * b });
            }
        }
    }
    if sites.is_empty() {
        return Err(YieldError::geometry(format!(
            "no {}x{} mm die fits inside a usable radius of {} mm",
            wafer.die.width_mm,
            wafer.die.height_mm,
            usable / 1e3
        )));
    }
    Ok(sites)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CellKind {
    Empty,
    Dummy,
    PowerGround,
    Critical,
    /// Member of a redundancy group. Replica index 0 is a main block,
    /// anything above is a replica (spare).
    Redundant { group: u32, replica: u32 },
}

impl CellKind {
    pub fn is_functional(self) -> bool {
        matches!(self, Self::Critical | Self::Redundant { .. })
    }
}

/// Gridded die layout. Cell `(row, col)` covers `x ∈ [col·gx, (col+1)·gx)`,
/// `y ∈ [row·gy, (row+1)·gy)` from the die's lower-left corner; the last
/// row/column is truncated when the die is not a multiple of the block size.
#[derive(Clone, Debug, PartialEq)]
pub struct PadBlockGrid {
    rows: usize,
    cols: usize,
    gx_um: f64,
    gy_um: f64,
    width_um: f64,
    height_um: f64,
    cells: Vec<CellKind>,
}

fn cell_count(extent: f64, size: f64) -> usize {
    ((extent / size) - EPS).ceil().max(1.0) as usize
}

impl PadBlockGrid {
    pub fn filled(width_um: f64, height_um: f64, gx_um: f64, gy_um: f64, kind: CellKind) -> Result<Self> {
        if !(gx_um > 0.0 && gy_um > 0.0 && width_um > 0.0 && height_um > 0.0) {
            return Err(YieldError::param("grid resolution and die extent must be positive"));
        }
        if gx_um > width_um + EPS || gy_um > height_um + EPS {
            return Err(YieldError::geometry(format!(
                "grid resolution {gx_um}x{gy_um} µm is coarser than the {width_um}x{height_um} µm die"
            )));
        }
        let rows = cell_count(height_um, gy_um);
        let cols = cell_count(width_um, gx_um);
        Ok(Self { rows, cols, gx_um, gy_um, width_um, height_um, cells: vec![kind; rows * cols] })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn resolution(&self) -> (f64, f64) {
        (self.gx_um, self.gy_um)
    }

    pub fn die_extent_um(&self) -> (f64, f64) {
        (self.width_um, self.height_um)
    }

    /// Nominal (untruncated) block area, µm².
    pub fn cell_area(&self) -> f64 {
        self.gx_um * self.gy_um
    }

    pub fn get(&self, row: usize, col: usize) -> CellKind {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, kind: CellKind) {
        self.cells[row * self.cols + col] = kind;
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, CellKind)> + '_ {
        self.cells.iter().enumerate().map(move |(i, &k)| (i / self.cols, i % self.cols, k))
    }

    /// Compact encoding of geometry and cell kinds, for hashing.
    pub fn key_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(48 + 9 * self.cells.len());
        for x in [self.rows as f64, self.cols as f64, self.gx_um, self.gy_um, self.width_um, self.height_um] {
            v.extend(x.to_le_bytes());
        }
        for &k in &self.cells {
            let (tag, a, b) = match k {
                CellKind::Empty => (0u8, 0u32, 0u32),
                CellKind::Dummy => (1, 0, 0),
                CellKind::PowerGround => (2, 0, 0),
                CellKind::Critical => (3, 0, 0),
                CellKind::Redundant { group, replica } => (4, group, replica),
            };
            v.push(tag);
            if tag == 4 {
                v.extend(a.to_le_bytes());
                v.extend(b.to_le_bytes());
            }
        }
        v
    }

    pub fn count(&self, pred: impl Fn(CellKind) -> bool) -> usize {
        self.cells.iter().filter(|&&k| pred(k)).count()
    }

    /// Die-local rectangle `(x0, y0, x1, y1)` of a cell, µm, truncated at the
    /// die edge.
    pub fn cell_rect(&self, row: usize, col: usize) -> (f64, f64, f64, f64) {
        let x0 = col as f64 * self.gx_um;
        let y0 = row as f64 * self.gy_um;
        (x0, y0, (x0 + self.gx_um).min(self.width_um), (y0 + self.gy_um).min(self.height_um))
    }

    /// Pads that fit in a cell at pitch `p`: `⌊w/p⌋·⌊h/p⌋` of the truncated cell.
    pub fn pads_in_cell(&self, row: usize, col: usize, pitch_um: f64) -> u64 {
        let (x0, y0, x1, y1) = self.cell_rect(row, col);
        let nx = ((x1 - x0) / pitch_um + EPS).floor().max(0.0) as u64;
        let ny = ((y1 - y0) / pitch_um + EPS).floor().max(0.0) as u64;
        nx * ny
    }

    /// Redundancy groups keyed by id, members in row-major order with their
    /// replica index.
    pub fn groups(&self) -> BTreeMap<u32, Vec<(usize, usize, u32)>> {
        let mut map: BTreeMap<u32, Vec<(usize, usize, u32)>> = BTreeMap::new();
        for (r, c, k) in self.iter_cells() {
            if let CellKind::Redundant { group, replica } = k {
                map.entry(group).or_default().push((r, c, replica));
            }
        }
        map
    }

    /// Groups in the form used by the critical-area engine.
    pub fn group_cells(&self) -> Vec<GroupCells> {
        self.groups()
            .into_values()
            .map(|members| {
                let tolerance = members.iter().filter(|m| m.2 > 0).count();
                GroupCells { members: members.iter().map(|&(r, c, _)| (r, c)).collect(), tolerance }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (id, members) in self.groups() {
            if members.len() < 2 {
                return Err(YieldError::param(format!("redundancy group {id} has a single member")));
            }
            if members.iter().all(|m| m.2 > 0) {
                return Err(YieldError::param(format!("redundancy group {id} has no main block")));
            }
        }
        Ok(())
    }

    /// Serializes to the plain-text layout format.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#die_mm={},{}", self.width_um / 1e3, self.height_um / 1e3);
        let _ = writeln!(s, "#grid_um={},{}", self.gx_um, self.gy_um);
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|c| match self.get(r, c) {
                    CellKind::Empty => "E".to_string(),
                    CellKind::Dummy => "D".to_string(),
                    CellKind::PowerGround => "P".to_string(),
                    CellKind::Critical => "C".to_string(),
                    CellKind::Redundant { group, replica } => format!("R:{group}:{replica}"),
                })
                .collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    /// Parses the layout format. Tokens `E`, `D`, `P`, `C`, `R:<group>` and
    /// `R:<group>:<replica>`; bare `R:<group>` members are numbered in
    /// row-major order with the first one as the main block.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut die = None;
        let mut grid = None;
        let mut rows: Vec<Vec<(CellKind, bool)>> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| YieldError::Parse { line: ln + 1, msg };
            if let Some(h) = line.strip_prefix('#') {
                let (key, val) = h.split_once('=').ok_or_else(|| perr(format!("bad header `{line}`")))?;
                let nums: Vec<f64> = val
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| perr(e.to_string()))?;
                if nums.len() != 2 {
                    return Err(perr(format!("header `{key}` needs two values")));
                }
                match key.trim() {
                    "die_mm" => die = Some((nums[0], nums[1])),
                    "grid_um" => grid = Some((nums[0], nums[1])),
                    other => return Err(perr(format!("unknown header `{other}`"))),
                }
                continue;
            }
            let mut row = Vec::new();
            for tok in line.split(',') {
                let tok = tok.trim();
                let cell = match tok {
                    "E" => (CellKind::Empty, true),
                    "D" => (CellKind::Dummy, true),
                    "P" => (CellKind::PowerGround, true),
                    "C" => (CellKind::Critical, true),
                    _ => {
                        let rest = tok.strip_prefix("R:").ok_or_else(|| perr(format!("unknown cell token `{tok}`")))?;
                        let mut parts = rest.split(':');
                        let group = parts
                            .next()
                            .and_then(|g| g.parse::<u32>().ok())
                            .ok_or_else(|| perr(format!("bad group in `{tok}`")))?;
                        match parts.next() {
                            Some(rep) => {
                                let replica = rep.parse::<u32>().map_err(|_| perr(format!("bad replica in `{tok}`")))?;
                                (CellKind::Redundant { group, replica }, true)
                            }
                            None => (CellKind::Redundant { group, replica: 0 }, false),
                        }
                    }
                };
                row.push(cell);
            }
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(perr(format!("row has {} cells, expected {}", row.len(), first.len())));
                }
            }
            rows.push(row);
        }
        let (w_mm, h_mm) = die.ok_or(YieldError::Parse { line: 0, msg: "missing #die_mm header".into() })?;
        let (gx, gy) = grid.ok_or(YieldError::Parse { line: 0, msg: "missing #grid_um header".into() })?;
        let mut g = Self::filled(w_mm * 1e3, h_mm * 1e3, gx, gy, CellKind::Empty)?;
        if rows.len() != g.rows || rows.first().map_or(0, Vec::len) != g.cols {
            return Err(YieldError::Parse {
                line: 0,
                msg: format!(
                    "grid body is {}x{}, headers imply {}x{}",
                    rows.len(),
                    rows.first().map_or(0, Vec::len),
                    g.rows,
                    g.cols
                ),
            });
        }
        let mut next_replica: BTreeMap<u32, u32> = BTreeMap::new();
        for (r, row) in rows.into_iter().enumerate() {
            for (c, (kind, explicit)) in row.into_iter().enumerate() {
                let kind = match (kind, explicit) {
                    (CellKind::Redundant { group, .. }, false) => {
                        let n = next_replica.entry(group).or_insert(0);
                        let k = CellKind::Redundant { group, replica: *n };
                        *n += 1;
                        k
                    }
                    (k, _) => k,
                };
                g.set(r, c, kind);
            }
        }
        g.validate()?;
        Ok(g)
    }
}

/// The canonical I/O layout patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Full,
    Sparse,
    Peripheral,
    Centralized,
}

impl std::str::FromStr for Pattern {
    type Err = YieldError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "sparse" => Ok(Self::Sparse),
            "peripheral" => Ok(Self::Peripheral),
            "centralized" | "central" => Ok(Self::Centralized),
            other => Err(YieldError::param(format!("unknown layout pattern `{other}`"))),
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Sparse => "sparse",
            Self::Peripheral => "peripheral",
            Self::Centralized => "centralized",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fractions {
    pub critical: f64,
    pub redundant: f64,
    pub dummy: f64,
}

impl Fractions {
    pub const ALL_CRITICAL: Self = Self { critical: 1.0, redundant: 0.0, dummy: 0.0 };
    /// 20 % critical, 50 % redundant, 30 % dummy.
    pub const MIXED: Self = Self { critical: 0.2, redundant: 0.5, dummy: 0.3 };

    fn validate(&self) -> Result<()> {
        let v = [self.critical, self.redundant, self.dummy];
        if v.iter().any(|f| !(0.0..=1.0).contains(f)) || ((v.iter().sum::<f64>()) - 1.0).abs() > 1e-6 {
            return Err(YieldError::param(format!("layout fractions {v:?} must lie in [0,1] and sum to 1")));
        }
        Ok(())
    }
}

/// Builds one of the canonical layouts.
///
/// Cell counts: Critical `round(f_cr·N)` (Centralized snaps to a centered
/// rectangle within one row of that), Redundant `round(f_rd·N)` capped by
/// what is left, Dummy takes the remainder. Redundant cells are paired by
/// splitting them in row-major order into two halves and matching cell `i`
/// with cell `i + N/2`; an odd leftover joins the last group as a second
/// replica.
pub fn build_layout(
    pattern: Pattern,
    die: &DieSpec,
    resolution: (f64, f64),
    fractions: Fractions,
    seed: u64,
) -> Result<PadBlockGrid> {
    die.validate()?;
    let fractions = if pattern == Pattern::Full { Fractions::ALL_CRITICAL } else { fractions };
    fractions.validate()?;
    let mut g = PadBlockGrid::filled(die.width_um(), die.height_um(), resolution.0, resolution.1, CellKind::Dummy)?;
    let n = g.rows * g.cols;
    let n_cr = ((fractions.critical * n as f64).round() as usize).min(n);
    let n_rd = ((fractions.redundant * n as f64).round() as usize).min(n - n_cr);

    let (critical, redundant): (Vec<usize>, Vec<usize>) = match pattern {
        Pattern::Full => ((0..n).collect(), Vec::new()),
        Pattern::Peripheral => {
            let order = ring_order(g.rows, g.cols, |r, c| {
                r.min(c).min(g.rows - 1 - r).min(g.cols - 1 - c) as i64
            });
            let crit = take_spread(&order, n_cr);
            let rest = remove(&order, &crit);
            let red = take_spread(&rest, n_rd);
            (flatten(&crit), flatten(&red))
        }
        Pattern::Centralized => {
            let rect = centered_rect(g.rows, g.cols, n_cr);
            let (r0, c0, h, w) = rect;
            let inside = |r: usize, c: usize| r >= r0 && r < r0 + h && c >= c0 && c < c0 + w;
            let crit: Vec<usize> = (0..n).filter(|&i| inside(i / g.cols, i % g.cols)).collect();
            let order = ring_order(g.rows, g.cols, |r, c| {
                let dr = if r < r0 { r0 - r } else if r >= r0 + h { r + 1 - r0 - h } else { 0 };
                let dc = if c < c0 { c0 - c } else if c >= c0 + w { c + 1 - c0 - w } else { 0 };
                dr.max(dc) as i64
            });
            let rest: Vec<Vec<usize>> = order
                .into_iter()
                .map(|ring| ring.into_iter().filter(|&i| !inside(i / g.cols, i % g.cols)).collect::<Vec<_>>())
                .filter(|ring| !ring.is_empty())
                .collect();
            let red = take_spread(&rest, n_rd);
            (crit, flatten(&red))
        }
        Pattern::Sparse => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let crit = stratified(g.rows, g.cols, n_cr, &mut rng);
            let mut rest: Vec<usize> = (0..n).filter(|i| crit.binary_search(i).is_err()).collect();
            rest.shuffle(&mut rng);
            rest.truncate(n_rd);
            (crit, rest)
        }
    };
    for &i in &critical {
        g.cells[i] = CellKind::Critical;
    }
    let mut red = redundant;
    red.sort_unstable();
    for (i, group, replica) in split_half_pairs(&red) {
        g.cells[i] = CellKind::Redundant { group, replica };
    }
    g.validate()?;
    Ok(g)
}

/// Pairs sorted cells `i ↔ i + N/2`. Yields `(cell, group, replica)`.
fn split_half_pairs(cells: &[usize]) -> Vec<(usize, u32, u32)> {
    let half = cells.len() / 2;
    if half == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(cells.len());
    for k in 0..half {
        out.push((cells[k], k as u32, 0));
        out.push((cells[k + half], k as u32, 1));
    }
    if cells.len() % 2 == 1 {
        out.push((cells[2 * half], (half - 1) as u32, 2));
    }
    out
}

/// Cells grouped by a ring index, each ring in angular order around the die
/// center.
fn ring_order(rows: usize, cols: usize, ring: impl Fn(usize, usize) -> i64) -> Vec<Vec<usize>> {
    let mut by_ring: BTreeMap<i64, Vec<(f64, usize)>> = BTreeMap::new();
    let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    for r in 0..rows {
        for c in 0..cols {
            let ang = (r as f64 - cy).atan2(c as f64 - cx);
            by_ring.entry(ring(r, c)).or_default().push((ang, r * cols + c));
        }
    }
    by_ring
        .into_values()
        .map(|mut v| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            v.into_iter().map(|x| x.1).collect()
        })
        .collect()
}

/// Takes `k` cells ring by ring; a partially used ring contributes evenly
/// spaced members. Returns the chosen cells in ring structure.
fn take_spread(rings: &[Vec<usize>], mut k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for ring in rings {
        if k == 0 {
            break;
        }
        if ring.len() <= k {
            out.push(ring.clone());
            k -= ring.len();
        } else {
            let m = ring.len();
            let pick: Vec<usize> = (0..k).map(|i| ring[((2 * i + 1) * m) / (2 * k)]).collect();
            out.push(pick);
            k = 0;
        }
    }
    out
}

fn remove(rings: &[Vec<usize>], taken: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut t: Vec<usize> = flatten(taken);
    t.sort_unstable();
    rings
        .iter()
        .map(|r| r.iter().copied().filter(|i| t.binary_search(i).is_err()).collect::<Vec<_>>())
        .filter(|r| !r.is_empty())
        .collect()
}

fn flatten(v: &[Vec<usize>]) -> Vec<usize> {
    v.iter().flatten().copied().collect()
}

/// Centered `h×w` rectangle for `k` cells: an exact factorization within
/// 1.25× of the grid aspect if one exists, otherwise the nearest rectangle of
/// grid aspect. Returns `(row0, col0, h, w)`.
fn centered_rect(rows: usize, cols: usize, k: usize) -> (usize, usize, usize, usize) {
    if k == 0 {
        return (0, 0, 0, 0);
    }
    let aspect = rows as f64 / cols as f64;
    let skew = |h: usize, w: usize| ((h as f64 / w as f64) / aspect).ln().abs();
    let exact = (1..=rows)
        .filter(|&h| k % h == 0 && k / h <= cols)
        .map(|h| (h, k / h))
        .min_by(|a, b| skew(a.0, a.1).total_cmp(&skew(b.0, b.1)))
        .filter(|&(h, w)| skew(h, w) <= 1.25f64.ln());
    let (h, w) = exact.unwrap_or_else(|| {
        let h = ((k as f64 * aspect).sqrt().round() as usize).clamp(1, rows);
        let w = ((k as f64 / h as f64).round() as usize).clamp(1, cols);
        (h, w)
    });
    ((rows - h) / 2, (cols - w) / 2, h, w)
}

/// One cell per super-cell of a stratified partition, chosen at random.
fn stratified(rows: usize, cols: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let n = rows * cols;
    let side = ((n as f64 / k as f64).sqrt().floor() as usize).max(1);
    let mut strata: Vec<Vec<usize>> = Vec::new();
    for br in (0..rows).step_by(side) {
        for bc in (0..cols).step_by(side) {
            let cells: Vec<usize> = (br..(br + side).min(rows))
                .flat_map(|r| (bc..(bc + side).min(cols)).map(move |c| r * cols + c))
                .collect();
            strata.push(cells);
        }
    }
    strata.shuffle(rng);
    let mut chosen: Vec<usize> = strata.iter().take(k).map(|s| s[rng.gen_range(0..s.len())]).collect();
    if chosen.len() < k {
        let mut rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
        rest.shuffle(rng);
        chosen.extend(rest.into_iter().take(k - chosen.len()));
    }
    chosen.sort_unstable();
    chosen
}

/// How redundant blocks back each other up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RedundancyScheme {
    None,
    /// 1:1 main/replica pairs at a center-to-center distance.
    Dedicated { spacing_um: f64 },
    /// `mains_per_spare` main blocks share one spare block.
    Shared { mains_per_spare: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanGroup {
    pub id: u32,
    pub mains: Vec<(usize, usize)>,
    pub replicas: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RedundancyPlan {
    pub scheme: RedundancyScheme,
    pub groups: Vec<PlanGroup>,
}

impl RedundancyPlan {
    /// Reconstructs the plan implied by a layout's redundant cells.
    pub fn from_layout(layout: &PadBlockGrid, scheme: RedundancyScheme) -> Self {
        let groups = layout
            .groups()
            .into_iter()
            .map(|(id, members)| PlanGroup {
                id,
                mains: members.iter().filter(|m| m.2 == 0).map(|m| (m.0, m.1)).collect(),
                replicas: members.iter().filter(|m| m.2 > 0).map(|m| (m.0, m.1)).collect(),
            })
            .collect();
        Self { scheme, groups }
    }

    /// Companion CSV: `group_id,cell_row,cell_col,role`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group_id,cell_row,cell_col,role\n");
        for g in &self.groups {
            for &(r, c) in &g.mains {
                let _ = writeln!(s, "{},{},{},main", g.id, r, c);
            }
            for &(r, c) in &g.replicas {
                let _ = writeln!(s, "{},{},{},replica", g.id, r, c);
            }
        }
        s
    }

    pub fn from_csv(text: &str, scheme: RedundancyScheme) -> Result<Self> {
        let mut groups: BTreeMap<u32, PlanGroup> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: &str| YieldError::Parse { line: ln + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(perr("expected group_id,cell_row,cell_col,role"));
            }
            let id: u32 = f[0].parse().map_err(|_| perr("bad group_id"))?;
            let r: usize = f[1].parse().map_err(|_| perr("bad cell_row"))?;
            let c: usize = f[2].parse().map_err(|_| perr("bad cell_col"))?;
            let g = groups.entry(id).or_insert_with(|| PlanGroup { id, mains: vec![], replicas: vec![] });
            match f[3] {
                "main" => g.mains.push((r, c)),
                "replica" => g.replicas.push((r, c)),
                _ => return Err(perr("role must be main or replica")),
            }
        }
        Ok(Self { scheme, groups: groups.into_values().collect() })
    }

    /// Writes the plan's roles into a layout (cells become Redundant).
    pub fn apply(&self, layout: &mut PadBlockGrid) -> Result<()> {
        for g in &self.groups {
            for (k, &(r, c)) in g.mains.iter().chain(&g.replicas).enumerate() {
                if r >= layout.rows || c >= layout.cols {
                    return Err(YieldError::param(format!("plan cell ({r},{c}) outside the layout")));
                }
                let replica = if k < g.mains.len() { 0 } else { (k - g.mains.len() + 1) as u32 };
                layout.set(r, c, CellKind::Redundant { group: g.id, replica });
            }
        }
        layout.validate()
    }
}

/// Die made entirely of redundant blocks of size `block_um`, organised by
/// `scheme`.
///
/// * `None`: every block is Critical.
/// * `Dedicated`: blocks are paired 1:1 at the requested center distance
///   (±½ block). Mains are drawn in random order, always taking the open
///   block with the fewest remaining partners next; the partner is likewise
///   the most constrained candidate. A few reshuffles are attempted before a
///   stranded block is reported.
/// * `Shared`: compact clusters of `n` mains plus one spare.
pub fn build_random_redundant_layout(
    die: &DieSpec,
    block_um: f64,
    scheme: RedundancyScheme,
    seed: u64,
) -> Result<(PadBlockGrid, RedundancyPlan)> {
    die.validate()?;
    let mut g = PadBlockGrid::filled(die.width_um(), die.height_um(), block_um, block_um, CellKind::Critical)?;
    match scheme {
        RedundancyScheme::None => {}
        RedundancyScheme::Dedicated { spacing_um } => {
            if spacing_um <= 0.0 {
                return Err(YieldError::param("dedicated redundancy needs a positive spacing"));
            }
            let pairs = pair_at_distance(&g, spacing_um, seed)?;
            for c in g.cells.iter_mut() {
                *c = CellKind::Dummy;
            }
            for (k, (a, b)) in pairs.into_iter().enumerate() {
                g.cells[a] = CellKind::Redundant { group: k as u32, replica: 0 };
                g.cells[b] = CellKind::Redundant { group: k as u32, replica: 1 };
            }
        }
        RedundancyScheme::Shared { mains_per_spare } => {
            if mains_per_spare == 0 {
                return Err(YieldError::param("shared redundancy needs at least one main per spare"));
            }
            let size = mains_per_spare + 1;
            let n = g.cells.len();
            if n < size {
                return Err(YieldError::geometry(format!("a shared group needs {size} blocks, die has {n}")));
            }
            // compact clusters: walk bands of ⌊√size⌋ rows column by column;
            // a band's leftover cells join its last cluster
            let band = ((size as f64).sqrt().floor() as usize).clamp(1, g.rows);
            let mut next_group = 0u32;
            let mut pending: Vec<usize> = Vec::new();
            for r0 in (0..g.rows).step_by(band) {
                let mut order = Vec::new();
                for c in 0..g.cols {
                    for r in r0..(r0 + band).min(g.rows) {
                        order.push(r * g.cols + c);
                    }
                }
                pending.extend(order);
                if pending.len() < size {
                    // too short to form a group; carry into the next band
                    continue;
                }
                let n_chunks = pending.len() / size;
                for k in 0..n_chunks {
                    let end = if k == n_chunks - 1 { pending.len() } else { (k + 1) * size };
                    let chunk = &pending[k * size..end];
                    let spare = chunk.len() / 2;
                    for (i, &cell) in chunk.iter().enumerate() {
                        g.cells[cell] = CellKind::Redundant { group: next_group, replica: u32::from(i == spare) };
                    }
                    next_group += 1;
                }
                pending.clear();
            }
            if !pending.is_empty() {
                // trailing cells join the last cluster as extra mains
                let last = next_group - 1;
                for cell in pending {
                    g.cells[cell] = CellKind::Redundant { group: last, replica: 0 };
                }
            }
        }
    }
    g.validate()?;
    let plan = RedundancyPlan::from_layout(&g, scheme);
    Ok((g, plan))
}

fn pair_at_distance(g: &PadBlockGrid, spacing_um: f64, seed: u64) -> Result<Vec<(usize, usize)>> {
    let (rows, cols) = (g.rows as i64, g.cols as i64);
    let tol = 0.5 * g.gx_um.min(g.gy_um);
    let mr = ((spacing_um + tol) / g.gy_um).ceil() as i64;
    let mc = ((spacing_um + tol) / g.gx_um).ceil() as i64;
    let mut offsets = Vec::new();
    for dr in -mr..=mr {
        for dc in -mc..=mc {
            let d = ((dr as f64 * g.gy_um).powi(2) + (dc as f64 * g.gx_um).powi(2)).sqrt();
            if (dr, dc) != (0, 0) && (d - spacing_um).abs() <= tol + 1e-9 {
                offsets.push((dr, dc));
            }
        }
    }
    let n = g.cells.len();
    let neighbours = |i: usize| {
        let (r, c) = ((i / g.cols) as i64, (i % g.cols) as i64);
        offsets.iter().filter_map(move |&(dr, dc)| {
            let (rr, cc) = (r + dr, c + dc);
            (rr >= 0 && cc >= 0 && rr < rows && cc < cols).then_some((rr * cols + cc) as usize)
        })
    };
    let mut last_err = None;
    for attempt in 0..16u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut rank: Vec<usize> = (0..n).collect();
        rank.shuffle(&mut rng);
        let mut priority = vec![0usize; n];
        for (p, &i) in rank.iter().enumerate() {
            priority[i] = p;
        }
        let mut open = vec![true; n];
        let mut degree: Vec<usize> = (0..n).map(|i| neighbours(i).count()).collect();
        let mut pairs = Vec::with_capacity(n / 2);
        let mut remaining = n;
        let mut stranded = None;
        while remaining >= 2 {
            let main = (0..n)
                .filter(|&i| open[i])
                .min_by_key(|&i| (degree[i], priority[i]))
                .expect("open block exists");
            let cands: Vec<usize> = neighbours(main).filter(|&j| open[j]).collect();
            let Some(&partner) = cands.iter().min_by_key(|&&j| (degree[j], rng.gen::<u32>())) else {
                stranded = Some(main);
                break;
            };
            for &x in &[main, partner] {
                open[x] = false;
                for y in neighbours(x) {
                    degree[y] = degree[y].saturating_sub(1);
                }
            }
            remaining -= 2;
            // mains and replicas are interchangeable; randomise which is which
            if rng.gen::<bool>() {
                pairs.push((main, partner));
            } else {
                pairs.push((partner, main));
            }
        }
        match stranded {
            None => return Ok(pairs),
            Some(b) => {
                last_err = Some(YieldError::geometry(format!(
                    "no replica block at {spacing_um} µm for block ({}, {})",
                    b / g.cols,
                    b % g.cols
                )));
                if offsets.is_empty() {
                    break;
                }
            }
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Cu pattern density: `π·r2²/p²` scaled by the area fraction of non-empty
/// blocks (dummy and power/ground blocks carry Cu too).
pub fn cu_pattern_density(die: &DieSpec, layout: &PadBlockGrid) -> f64 {
    let (w, h) = layout.die_extent_um();
    let mut filled = 0.0;
    for (r, c, k) in layout.iter_cells() {
        if k != CellKind::Empty {
            let (x0, y0, x1, y1) = layout.cell_rect(r, c);
            filled += (x1 - x0) * (y1 - y0);
        }
    }
    let r2 = die.bottom_radius_um();
    std::f64::consts::PI * r2 * r2 / (die.pitch_um * die.pitch_um) * filled / (w * h)
}
