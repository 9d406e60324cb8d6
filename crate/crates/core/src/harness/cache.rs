//! Critical-area tables on disk, keyed by fingerprint, built on a miss.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::defect::{DiskRule, LutD2W, LutW2W, MainVoidTerm};
use crate::error::Result;
use crate::layout::PadBlockGrid;

/// Tables are kept in memory and, with a directory, on disk.
#[derive(Debug, Default)]
pub struct LutCache {
    dir: Option<PathBuf>,
    builds: AtomicUsize,
    w2w: Mutex<HashMap<String, LutW2W>>,
    d2w: Mutex<HashMap<String, LutD2W>>,
}

impl LutCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir: Some(dir), ..Self::default() })
    }

    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Tables built (not loaded) so far.
    pub fn builds(&self) -> usize {
        self.builds.load(Ordering::Relaxed)
    }

    pub fn path_for(&self, kind: &str, fingerprint: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{kind}-{fingerprint}.csv")))
    }

    fn lookup<T: Clone>(
        &self,
        memory: &Mutex<HashMap<String, T>>,
        kind: &str,
        fingerprint: &str,
        parse: impl Fn(&str) -> Result<T>,
        fp_of: impl Fn(&T) -> &str,
        build: impl FnOnce() -> Result<T>,
        csv: impl Fn(&T) -> String,
    ) -> Result<T> {
        if let Some(t) = memory.lock().expect("cache lock").get(fingerprint) {
            return Ok(t.clone());
        }
        let path = self.path_for(kind, fingerprint);
        if let Some(p) = &path {
            if p.exists() {
                match std::fs::read_to_string(p).map_err(Into::into).and_then(|t| parse(&t)) {
                    Ok(t) if fp_of(&t) == fingerprint => {
                        memory.lock().expect("cache lock").insert(fingerprint.to_string(), t.clone());
                        return Ok(t);
                    }
                    Ok(_) => log::warn!("{}: fingerprint mismatch, rebuilding", p.display()),
                    Err(e) => log::warn!("{}: unreadable table ({e}), rebuilding", p.display()),
                }
            }
        }
        let table = build()?;
        self.builds.fetch_add(1, Ordering::Relaxed);
        if let Some(p) = &path {
            let tmp = p.with_extension("csv.tmp");
            std::fs::write(&tmp, csv(&table))?;
            std::fs::rename(&tmp, p)?;
        }
        memory.lock().expect("cache lock").insert(fingerprint.to_string(), table.clone());
        Ok(table)
    }

    pub fn w2w(
        &self,
        layout: &PadBlockGrid,
        lengths: &[f64],
        thetas: &[f64],
        main_void: Option<MainVoidTerm>,
    ) -> Result<LutW2W> {
        let fp = LutW2W::fingerprint_for(layout, lengths, thetas, main_void);
        self.lookup(
            &self.w2w,
            "w2w",
            &fp,
            LutW2W::from_csv,
            |t| &t.fingerprint,
            || LutW2W::build(layout, lengths, thetas, main_void),
            LutW2W::to_csv,
        )
    }

    pub fn d2w(&self, layout: &PadBlockGrid, radii: &[f64], rule: DiskRule) -> Result<LutD2W> {
        let fp = LutD2W::fingerprint_for(layout, radii, rule);
        self.lookup(&self.d2w, "d2w", &fp, LutD2W::from_csv, |t| &t.fingerprint, || LutD2W::build(layout, radii, rule), LutD2W::to_csv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defect::{length_grid, theta_grid, DefectParams};
    use crate::layout::{build_layout, DieSpec, Fractions, Pattern};

    fn layout() -> PadBlockGrid {
        let die = DieSpec::square_scaled(4.0, 1.0).unwrap();
        build_layout(Pattern::Sparse, &die, (400.0, 400.0), Fractions::MIXED, 3).unwrap()
    }

    #[test]
    fn hit_is_identical_and_corruption_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        let cache = LutCache::new(dir.path()).unwrap();
        let l = layout();
        let p = DefectParams::default();
        let (ls, ts) = (length_grid(&p, 150_000.0, 16), theta_grid(8));
        let a = cache.w2w(&l, &ls, &ts, None).unwrap();
        let b = cache.w2w(&l, &ls, &ts, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.builds(), 1);

        let path = cache.path_for("w2w", &a.fingerprint).unwrap();
        let fresh = LutCache::new(dir.path()).unwrap();
        assert_eq!(fresh.w2w(&l, &ls, &ts, None).unwrap(), a);
        assert_eq!(fresh.builds(), 0);

        std::fs::write(&path, "garbage,\n1,2").unwrap();
        let fresh = LutCache::new(dir.path()).unwrap();
        let c = fresh.w2w(&l, &ls, &ts, None).unwrap();
        assert_eq!(a, c);
        assert_eq!(fresh.builds(), 1);
        let again = LutCache::new(dir.path()).unwrap();
        assert_eq!(again.w2w(&l, &ls, &ts, None).unwrap(), a);
        assert_eq!(again.builds(), 0);
    }

    #[test]
    fn d2w_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = LutCache::new(dir.path()).unwrap();
        let l = layout();
        let r = [0.0, 50.0, 100.0, 400.0];
        let a = cache.d2w(&l, &r, DiskRule::Coverage).unwrap();
        let b = cache.d2w(&l, &r, DiskRule::Coverage).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.builds(), 1);
        cache.d2w(&l, &r, DiskRule::Center).unwrap();
        assert_eq!(cache.builds(), 2);
    }
}
