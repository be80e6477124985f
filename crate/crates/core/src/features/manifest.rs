use std::path::{Path, PathBuf};

use super::{FeatureError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory when relative.
    pub path: PathBuf,
    /// Class ids; exactly one for single-label manifests.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub multi_label: bool,
}

impl Manifest {
    /// One more than the largest class id.
    pub fn num_classes(&self) -> usize {
        self.entries
            .iter()
            .flat_map(|e| e.labels.iter().copied())
            .max()
            .map_or(0, |m| m + 1)
    }
}

fn parse_id(field: &str, line: usize) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| FeatureError::Format(format!("manifest line {line}: bad class id {field:?}")))
}

/// Reads `path,label` (single-label) or `path,label_ids` with
/// semicolon-separated ids (multi-label).
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| FeatureError::Format(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| FeatureError::Format(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let path_col = col("path").ok_or_else(|| FeatureError::Format("manifest has no `path` column".into()))?;
    let (label_col, multi_label) = match (col("label"), col("label_ids")) {
        (Some(c), None) => (c, false),
        (None, Some(c)) => (c, true),
        _ => {
            return Err(FeatureError::Format(
                "manifest needs exactly one of `label` or `label_ids`".into(),
            ))
        }
    };
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| FeatureError::Format(format!("manifest line {line}: {e}")))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let labels = if multi_label {
            field(label_col)
                .split(';')
                .filter(|s| !s.trim().is_empty())
                .map(|s| parse_id(s, line))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![parse_id(field(label_col), line)?]
        };
        let p = PathBuf::from(field(path_col));
        entries.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            labels,
        });
    }
    if entries.is_empty() {
        return Err(FeatureError::Empty(format!("{}: manifest has no rows", path.display())));
    }
    Ok(Manifest { entries, multi_label })
}

/// Writes `path,label` or `path,label_ids`. Paths under the manifest's
/// directory are stored relative to it.
pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut w = csv::Writer::from_path(path).map_err(|e| FeatureError::Format(e.to_string()))?;
    let err = |e: csv::Error| FeatureError::Format(e.to_string());
    w.write_record(["path", if m.multi_label { "label_ids" } else { "label" }])
        .map_err(err)?;
    for e in &m.entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        let labels: Vec<String> = e.labels.iter().map(|k| k.to_string()).collect();
        w.write_record([p.to_string_lossy().as_ref(), labels.join(";").as_str()])
            .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}
