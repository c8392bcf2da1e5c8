//! Dataset files, dictionaries and the text artefacts written next to runs.

use std::fs;
use std::path::{Path, PathBuf};

use kbgsat_core::data::{LoadReport, Split, Triple, TripleStore};
use serde::Serialize;

use crate::error::{CliError, Result};

/// File names tried for each split, in order.
fn candidates(split: Split) -> [String; 3] {
    let n = split.name();
    [format!("{n}.txt"), format!("{n}.tsv"), n.to_string()]
}

fn split_path(dir: &Path, split: Split) -> Result<PathBuf> {
    candidates(split)
        .iter()
        .map(|c| dir.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            CliError::Data(format!(
                "{}: no {} split (looked for {})",
                dir.display(),
                split.name(),
                candidates(split).join(", ")
            ))
        })
}

/// Reads `train`, `valid` and `test` triple files from `dir`.
pub fn load_dataset(dir: &Path) -> Result<(TripleStore, LoadReport)> {
    if dir.as_os_str().is_empty() {
        return Err(CliError::Usage("no dataset directory configured (set `dataset`)".into()));
    }
    if !dir.is_dir() {
        return Err(CliError::Data(format!("dataset directory {} not found", dir.display())));
    }
    let mut texts = Vec::with_capacity(3);
    for split in Split::ALL {
        let path = split_path(dir, split)?;
        texts.push(fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?);
    }
    Ok(TripleStore::parse(&texts[0], &texts[1], &texts[2])?)
}

/// Maps a triple file onto the ids of `store`; every name must already exist.
pub fn triples_in(store: &TripleStore, text: &str) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(CliError::Data(format!("line {}: expected 3 tab-separated fields", i + 1)));
        }
        let ent = |name: &str| {
            store
                .entities
                .id(name)
                .ok_or_else(|| CliError::Data(format!("line {}: unknown entity `{name}`", i + 1)))
        };
        let rel = store
            .relations
            .id(f[1])
            .ok_or_else(|| CliError::Data(format!("line {}: unknown relation `{}`", i + 1, f[1])))?;
        out.push(Triple::new(ent(f[0])?, rel, ent(f[2])?));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Unseen<'a> {
    split: &'static str,
    name: &'a str,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    entities: usize,
    relations: usize,
    train: usize,
    valid: usize,
    test: usize,
    unseen_entities: Vec<Unseen<'a>>,
    unseen_relations: Vec<Unseen<'a>>,
}

/// Load report as pretty-printed JSON.
pub fn load_report_json(r: &LoadReport) -> String {
    fn unseen(v: &[(Split, String)]) -> Vec<Unseen<'_>> {
        v.iter()
            .map(|(s, n)| Unseen {
                split: s.name(),
                name: n,
            })
            .collect()
    }
    let j = ReportJson {
        entities: r.entities,
        relations: r.relations,
        train: r.train,
        valid: r.valid,
        test: r.test,
        unseen_entities: unseen(&r.unseen_entities),
        unseen_relations: unseen(&r.unseen_relations),
    };
    let mut s = serde_json::to_string_pretty(&j).expect("report serialises");
    s.push('\n');
    s
}

/// One-line human summary of a load report.
pub fn load_report_summary(r: &LoadReport) -> String {
    format!(
        "loaded |E|={} |R|={} train={} valid={} test={} (unseen in train: {} entities, {} relations)",
        r.entities,
        r.relations,
        r.train,
        r.valid,
        r.test,
        r.unseen_entities.len(),
        r.unseen_relations.len()
    )
}

/// Writes `entities.dict` and `relations.dict` (`id<TAB>name`) into `dir`.
pub fn export_dicts(store: &TripleStore, dir: &Path) -> Result<[PathBuf; 2]> {
    let e = dir.join("entities.dict");
    let r = dir.join("relations.dict");
    write_file(&e, store.entities.to_tsv().as_bytes())?;
    write_file(&r, store.relations.to_tsv().as_bytes())?;
    Ok([e, r])
}

/// Creates parent directories and writes `bytes` to `path` via a temporary
/// sibling, so readers never observe a half-written file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
