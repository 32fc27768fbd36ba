//! Dataset manifests, coarse-group tables and in-memory slide bags.
//!
//! A manifest line is `slide_id<TAB>relative_path<TAB>leaf_class`; lines
//! starting with `#` and blank lines are ignored. Paths are relative to the
//! directory holding the manifest.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par;
use crate::taxonomy::Taxonomy;

use super::embedding::read_embeddings;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "# slide_id\tpath\tclass";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub path: String,
    pub class: usize,
}

/// Parses a manifest. With `n_classes`, labels are range-checked.
pub fn parse_manifest(text: &str, n_classes: Option<usize>) -> Result<Vec<ManifestEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let at = || format!("line {}", lineno + 1);
        if fields.len() != 3 {
            return Err(Error::Manifest(format!("{}: expected 3 tab-separated fields, found {}", at(), fields.len())));
        }
        let (id, path) = (fields[0].trim(), fields[1].trim());
        if id.is_empty() || path.is_empty() {
            return Err(Error::Manifest(format!("{}: empty slide id or path", at())));
        }
        let class: usize = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::Manifest(format!("{}: class {:?} is not a non-negative integer", at(), fields[2])))?;
        if let Some(n) = n_classes {
            if class >= n {
                return Err(Error::BadLabel(format!("{}: class {class} with {n} leaf classes", at())));
            }
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::Manifest(format!("{}: duplicate slide id {id}", at())));
        }
        out.push(ManifestEntry {
            slide_id: id.to_string(),
            path: path.to_string(),
            class,
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\n", e.slide_id, e.path, e.class));
    }
    s
}

pub fn read_manifest(path: &Path, n_classes: Option<usize>) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_manifest(&text, n_classes)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, format_manifest(entries)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses `leaf_name<TAB>coarse_class` lines into a grouping indexed by leaf
/// class. Every leaf must appear exactly once.
pub fn parse_grouping(text: &str, t: &Taxonomy) -> Result<Vec<usize>> {
    let mut grouping = vec![None; t.leaf_count()];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((name, group)) = line.split_once('\t') else {
            return Err(Error::IncompleteGrouping(format!("line {}: expected two fields", lineno + 1)));
        };
        let leaf = t
            .find_by_name(name.trim())
            .filter(|&id| t.is_leaf(id))
            .ok_or_else(|| Error::IncompleteGrouping(format!("line {}: {name:?} is not a leaf", lineno + 1)))?;
        let group: usize = group
            .trim()
            .parse()
            .map_err(|_| Error::IncompleteGrouping(format!("line {}: bad coarse class {group:?}", lineno + 1)))?;
        let class = t.class_of(leaf)?;
        if grouping[class].replace(group).is_some() {
            return Err(Error::IncompleteGrouping(format!("leaf {name:?} listed twice")));
        }
    }
    grouping
        .iter()
        .enumerate()
        .map(|(c, g)| g.ok_or_else(|| Error::IncompleteGrouping(format!("leaf class {c} has no coarse class"))))
        .collect()
}

/// One slide's patches and label.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub class: usize,
    pub patches: Tensor,
}

/// Every slide of a manifest, loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub bags: Vec<SlideBag>,
}

impl Dataset {
    /// Loads `root/manifest.tsv` and every file it references, validating
    /// labels, widths and finiteness.
    pub fn load(root: &Path, n_classes: usize, dim: Option<usize>) -> Result<Dataset> {
        let entries = read_manifest(&root.join(MANIFEST_FILE), Some(n_classes))?;
        let loaded = par::map_slice(&entries, |e| -> Result<SlideBag> {
            let patches = read_embeddings(&root.join(&e.path))?;
            if patches.rows() == 0 {
                return Err(Error::EmptyBag(format!("slide {}", e.slide_id)));
            }
            Ok(SlideBag {
                slide_id: e.slide_id.clone(),
                class: e.class,
                patches,
            })
        });
        let bags = loaded.into_iter().collect::<Result<Vec<_>>>()?;
        let width = dim.or_else(|| bags.first().map(|b| b.patches.cols()));
        if let Some(d) = width {
            if let Some(b) = bags.iter().find(|b| b.patches.cols() != d) {
                return Err(Error::DimensionMismatch(format!(
                    "slide {} has width {}, expected {d}",
                    b.slide_id,
                    b.patches.cols()
                )));
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
            bags,
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.bags.iter().map(|b| b.class).collect()
    }

    pub fn select(&self, idx: &[usize]) -> Vec<SlideBag> {
        idx.iter().map(|&i| self.bags[i].clone()).collect()
    }

    pub fn index_of(&self) -> BTreeMap<&str, usize> {
        self.bags.iter().enumerate().map(|(i, b)| (b.slide_id.as_str(), i)).collect()
    }
}
