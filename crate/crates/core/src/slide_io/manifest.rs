//! Tab-separated dataset manifests.
//!
//! One record per line:
//! `id<TAB>slide_path<TAB>mask_path_or_dash<TAB>MetPos|MetNeg<TAB>pitch_um`.
//! Relative paths resolve against the manifest's directory. Lines starting
//! with `#` are comments, except `# name: ...` and `# seed: ...` which carry
//! the manifest metadata.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Label, Slide};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, read_gray_png, read_rgb_png, read_to_string};
use crate::raster::Mask;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub slide_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub label: Label,
    pub pitch_um: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub cases: Vec<CaseRecord>,
    /// Directory that relative case paths resolve against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.cases.iter().filter(|c| c.label == label).count()
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Reads the slide raster and annotation mask for one case.
    pub fn load_slide(&self, case: &CaseRecord) -> Result<Slide> {
        let pixels = read_rgb_png(&self.resolve(&case.slide_path))?;
        let annotation = match &case.mask_path {
            Some(p) => Some(Mask::from_gray(&read_gray_png(&self.resolve(p))?)),
            None => None,
        };
        Slide::new(case.id.clone(), pixels, case.pitch_um, case.label, annotation)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# name: {}", self.name);
        let _ = writeln!(out, "# seed: {}", self.seed);
        for c in &self.cases {
            let mask = c
                .mask_path
                .as_ref()
                .map_or_else(|| "-".to_string(), |p| p.display().to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                c.id,
                c.slide_path.display(),
                mask,
                c.label,
                c.pitch_um
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_tsv().as_bytes())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = read_to_string(path)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = parse_manifest(&text, path, base_dir)?;
    for c in &manifest.cases {
        let slide = manifest.resolve(&c.slide_path);
        if !slide.is_file() {
            return Err(Error::MissingFile(slide));
        }
        if let Some(m) = &c.mask_path {
            let m = manifest.resolve(m);
            if !m.is_file() {
                return Err(Error::MissingFile(m));
            }
        }
    }
    Ok(manifest)
}

pub(crate) fn parse_manifest(text: &str, path: &Path, base_dir: PathBuf) -> Result<DatasetManifest> {
    let malformed = |line: usize, reason: String| Error::MalformedManifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut seed = 0u64;
    let mut cases = Vec::new();
    let mut seen = HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(v) = comment.strip_prefix("name:") {
                name = v.trim().to_string();
            } else if let Some(v) = comment.strip_prefix("seed:") {
                seed = v
                    .trim()
                    .parse()
                    .map_err(|_| malformed(line_no, format!("bad seed {:?}", v.trim())))?;
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(malformed(
                line_no,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(malformed(line_no, "empty case id".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(malformed(line_no, format!("duplicate case id {id:?}")));
        }
        if fields[1].trim().is_empty() {
            return Err(malformed(line_no, "empty slide path".into()));
        }
        let mask_path = match fields[2].trim() {
            "-" => None,
            "" => return Err(malformed(line_no, "empty mask path (use '-')".into())),
            p => Some(PathBuf::from(p)),
        };
        let label = fields[3]
            .trim()
            .parse::<Label>()
            .map_err(|label| Error::UnknownLabel {
                label,
                line: line_no,
            })?;
        let pitch_um: f64 = fields[4]
            .trim()
            .parse()
            .map_err(|_| malformed(line_no, format!("bad pitch_um {:?}", fields[4])))?;
        if !(pitch_um > 0.0 && pitch_um.is_finite()) {
            return Err(malformed(line_no, format!("pitch_um {pitch_um} must be positive")));
        }
        cases.push(CaseRecord {
            id: id.to_string(),
            slide_path: PathBuf::from(fields[1].trim()),
            mask_path,
            label,
            pitch_um,
        });
    }
    if cases.is_empty() {
        return Err(malformed(0, "manifest lists no cases".into()));
    }
    Ok(DatasetManifest {
        name,
        seed,
        cases,
        base_dir,
    })
}
