//! Per-patch score export as `patch_index,x,y,score` CSV.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEATMAP_HEADER: &str = "patch_index,x,y,score";

/// Renders scores with 9 significant digits; `x,y` are `-1` without coordinates.
pub fn heatmap_csv(scores: &[f64], coords: Option<&[(i64, i64)]>) -> Result<String> {
    if let Some(c) = coords {
        if c.len() != scores.len() {
            return Err(Error::LengthMismatch(format!(
                "{} scores but {} coordinates",
                scores.len(),
                c.len()
            )));
        }
    }
    let mut out = String::from(HEATMAP_HEADER);
    out.push('\n');
    for (i, s) in scores.iter().enumerate() {
        let (x, y) = coords.map_or((-1, -1), |c| c[i]);
        out.push_str(&format!("{i},{x},{y},{s:.8e}\n"));
    }
    Ok(out)
}

pub fn export_heatmap(scores: &[f64], coords: Option<&[(i64, i64)]>, path: &Path) -> Result<()> {
    let csv = heatmap_csv(scores, coords)?;
    fs::write(path, csv).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// One parsed heatmap row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapRow {
    pub patch_index: usize,
    pub x: i64,
    pub y: i64,
    pub score: f64,
}

pub fn parse_heatmap(text: &str) -> Result<Vec<HeatmapRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEATMAP_HEADER) {
        return Err(Error::Parse(format!("heatmap must start with {HEATMAP_HEADER:?}")));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let bad = || Error::Parse(format!("heatmap line {}: {line:?}", k + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(HeatmapRow {
                patch_index: f[0].parse().map_err(|_| bad())?,
                x: f[1].parse().map_err(|_| bad())?,
                y: f[2].parse().map_err(|_| bad())?,
                score: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Reads `x<TAB>y` (or `x,y`) integer coordinate lines; `#` lines are skipped.
pub fn parse_coords(text: &str) -> Result<Vec<(i64, i64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let bad = || Error::Parse(format!("coordinate line {l:?}"));
            let (x, y) = l.split_once(['\t', ',']).ok_or_else(bad)?;
            Ok((x.trim().parse().map_err(|_| bad())?, y.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}
