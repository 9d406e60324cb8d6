use std::collections::{BTreeMap, BTreeSet};

use hbyield::layout::{CellKind, PadBlockGrid};
use hbyield::morphology::{AnchorDomain, StructuringElement};

/// Counts anchor cells whose translated element hits a critical cell, or hits
/// more members of a group than the group's spares can cover.
pub fn oracle_area(layout: &PadBlockGrid, se: &StructuringElement, domain: AnchorDomain) -> f64 {
    let (rows, cols) = (layout.rows() as i64, layout.cols() as i64);
    let mut groups: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (_, _, k) in layout.iter_cells() {
        if let CellKind::Redundant { group, replica } = k {
            let e = groups.entry(group).or_insert((0, 0));
            e.0 += 1;
            if replica > 0 {
                e.1 += 1;
            }
        }
    }
    let reach = se.offsets().iter().map(|&(r, c)| r.abs().max(c.abs())).max().unwrap_or(0);
    let (lo_r, hi_r, lo_c, hi_c) = match domain {
        AnchorDomain::Die => (0, rows, 0, cols),
        AnchorDomain::Plane => (-reach, rows + reach, -reach, cols + reach),
    };
    let mut count = 0usize;
    for ar in lo_r..hi_r {
        for ac in lo_c..hi_c {
            let mut hits: BTreeMap<u32, BTreeSet<(i64, i64)>> = BTreeMap::new();
            let mut fatal = false;
            for &(dr, dc) in se.offsets() {
                let (r, c) = (ar + dr, ac + dc);
                if r < 0 || c < 0 || r >= rows || c >= cols {
                    continue;
                }
                match layout.get(r as usize, c as usize) {
                    CellKind::Critical => fatal = true,
                    CellKind::Redundant { group, .. } => {
                        hits.entry(group).or_default().insert((r, c));
                    }
                    _ => {}
                }
            }
            for (g, cells) in &hits {
                let (members, spares) = groups[g];
                let need = (spares + 1).min(members);
                if cells.len() >= need {
                    fatal = true;
                }
            }
            if fatal {
                count += 1;
            }
        }
    }
    count as f64 * layout.cell_area()
}
