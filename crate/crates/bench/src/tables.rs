//! Lag tables rebuilt from a saved full-buffer history.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use streamopt::dense::Vector;
use streamopt::stream_ls::LagTable;

/// Reads `append,frame,component,value` rows back into per-append snapshots.
pub fn read_history(path: &Path) -> anyhow::Result<Vec<Vec<Vector>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cells: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 4 {
            bail!("{}: expected 4 columns, found {}", path.display(), rec.len());
        }
        let k: usize = rec[0].parse()?;
        let t: usize = rec[1].parse()?;
        let i: usize = rec[2].parse()?;
        let v: f64 = rec[3].parse()?;
        cells.entry((k, t)).or_default().push((i, v));
    }
    let mut history: Vec<Vec<Vector>> = Vec::new();
    for ((k, t), mut comps) in cells {
        comps.sort_by_key(|c| c.0);
        if comps.iter().enumerate().any(|(j, c)| c.0 != j) {
            bail!("{}: append {k} frame {t} has missing components", path.display());
        }
        if k == history.len() {
            history.push(Vec::new());
        }
        if k + 1 != history.len() || t != history[k].len() {
            bail!("{}: rows are not a contiguous history", path.display());
        }
        history[k].push(Vector::from_iterator(comps.len(), comps.into_iter().map(|c| c.1)));
    }
    Ok(history)
}

/// Lag table of a run directory, using the last snapshot as the reference.
pub fn lag_table_from_dir(dir: &Path) -> anyhow::Result<LagTable> {
    let path = dir.join("history.csv");
    if !path.is_file() {
        bail!("no history.csv in {}; run a least-squares scenario first", dir.display());
    }
    let history = read_history(&path)?;
    let Some(reference) = history.last().cloned() else {
        bail!("{} holds no appends", path.display());
    };
    Ok(LagTable::from_history(&history, &reference)?)
}
