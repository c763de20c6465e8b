//! On-disk formats: dataset directories, benchmark record files, guideline
//! index files and guideline ingestion.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use echoagent_core::domain::{validate_study, EchoStudy};
use echoagent_core::guidelines::{build_index, chunk, GuidelineDoc, GuidelineIndex, RetrievalError};
use echoagent_core::sim::{render_frames, BenchmarkCase, GroundTruth, SimConfig};

pub const DATASET_SCHEMA: &str = "echodataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STUDY_DIR: &str = "studies";

/// First bytes of an index file, followed by a little-endian u32 version.
pub const INDEX_MAGIC: &[u8; 8] = b"ECHOIDX\0";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, detail: impl ToString) -> StoreError {
    StoreError::Format { path: path.to_path_buf(), detail: detail.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub study_id: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub config: SimConfig,
    pub studies: Vec<ManifestEntry>,
}

/// Writes `manifest.json` plus one study document (and pixel payload, when
/// the study has one) per study under `studies/`.
pub fn write_dataset(dir: &Path, config: &SimConfig, studies: &[(EchoStudy, GroundTruth)]) -> Result<Manifest, StoreError> {
    let study_dir = dir.join(STUDY_DIR);
    fs::create_dir_all(&study_dir).map_err(io(&study_dir))?;
    let mut entries = Vec::with_capacity(studies.len());
    for (study, _) in studies {
        let rel = format!("{STUDY_DIR}/{}.json", study.study_id);
        let path = dir.join(&rel);
        let body = serde_json::to_string_pretty(study).map_err(|e| format_err(&path, e))?;
        fs::write(&path, body).map_err(io(&path))?;
        if let (Some(px), Some(bytes)) = (&study.pixels, render_frames(study)) {
            let raw = study_dir.join(&px.path);
            fs::write(&raw, bytes).map_err(io(&raw))?;
        }
        entries.push(ManifestEntry { study_id: study.study_id.clone(), path: rel });
    }
    let manifest = Manifest { schema: DATASET_SCHEMA.into(), config: config.clone(), studies: entries };
    let path = dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| format_err(&path, e))?;
    fs::write(&path, body).map_err(io(&path))?;
    Ok(manifest)
}

pub fn read_study(path: &Path) -> Result<EchoStudy, StoreError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let study: EchoStudy = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
    let report = validate_study(&study);
    if !report.is_ok() {
        return Err(format_err(path, format!("invalid study: {report:?}")));
    }
    Ok(study)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&path, e))?;
    if m.schema != DATASET_SCHEMA {
        return Err(format_err(&path, format!("unsupported dataset schema '{}'", m.schema)));
    }
    Ok(m)
}

/// Loads every study listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<EchoStudy>, StoreError> {
    read_manifest(dir)?.studies.iter().map(|e| read_study(&dir.join(&e.path))).collect()
}

/// Raw `frame_count × height × width` grayscale bytes for a study.
pub fn read_pixels(study_doc_dir: &Path, study: &EchoStudy) -> Result<Option<Vec<u8>>, StoreError> {
    let Some(px) = &study.pixels else { return Ok(None) };
    let path = study_doc_dir.join(&px.path);
    let bytes = fs::read(&path).map_err(io(&path))?;
    let want = study.frame_count as usize * px.width as usize * px.height as usize;
    if bytes.len() != want {
        return Err(format_err(&path, format!("expected {want} bytes, found {}", bytes.len())));
    }
    Ok(Some(bytes))
}

pub fn write_benchmark(path: &Path, cases: &[BenchmarkCase]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let mut f = fs::File::create(path).map_err(io(path))?;
    for c in cases {
        let line = serde_json::to_string(c).map_err(|e| format_err(path, e))?;
        writeln!(f, "{line}").map_err(io(path))?;
    }
    Ok(())
}

pub fn read_benchmark(path: &Path) -> Result<Vec<BenchmarkCase>, StoreError> {
    let f = fs::File::open(path).map_err(io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let case: BenchmarkCase =
            serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(case);
    }
    Ok(out)
}

/// Header, version, then the index as JSON.
pub fn save_index(path: &Path, index: &GuidelineIndex) -> Result<(), StoreError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(INDEX_MAGIC);
    bytes.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    serde_json::to_writer(&mut bytes, index).map_err(|e| format_err(path, e))?;
    // Write to a sibling and rename so readers never see a partial generation.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn load_index(path: &Path) -> Result<GuidelineIndex, StoreError> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() < 12 || &bytes[..8] != INDEX_MAGIC {
        return Err(format_err(path, "not a guideline index file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap_or_default());
    if version != INDEX_VERSION {
        return Err(format_err(path, format!("index version {version}, expected {INDEX_VERSION}")));
    }
    serde_json::from_slice(&bytes[12..]).map_err(|e| format_err(path, e))
}

/// Reads `.txt` and `.md` files under `dir` (sorted by path) as documents.
/// The first Markdown heading, or else the file stem, becomes the title.
pub fn read_guideline_dir(dir: &Path) -> Result<Vec<GuidelineDoc>, StoreError> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io(&d))? {
            let p = entry.map_err(io(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("txt" | "md")) {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut docs = Vec::new();
    for p in files {
        let body = fs::read_to_string(&p).map_err(io(&p))?;
        if body.trim().is_empty() {
            tracing::warn!(path = %p.display(), "skipping empty guideline file");
            continue;
        }
        let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("doc");
        let title = body
            .lines()
            .find_map(|l| l.strip_prefix('#').map(|t| t.trim_start_matches('#').trim().to_string()))
            .filter(|t| !t.is_empty())
            .unwrap_or_else(|| stem.to_string());
        let doc_id = rel.trim_end_matches(".md").trim_end_matches(".txt").replace('/', "-");
        docs.push(GuidelineDoc::new(&doc_id, &title, &rel, &body));
    }
    Ok(docs)
}

/// Builds a fresh index generation from a directory of guideline text.
pub fn ingest(dir: &Path, chunk_size: usize, overlap: usize) -> Result<GuidelineIndex, StoreError> {
    let docs = read_guideline_dir(dir)?;
    let mut passages = Vec::new();
    for d in &docs {
        passages.extend(chunk(d, chunk_size, overlap)?);
    }
    Ok(build_index(passages)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use echoagent_core::guidelines::reference_index;
    use echoagent_core::sim::generate_dataset;

    #[test]
    fn dataset_round_trip_with_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimConfig { studies: 3, pixels: true, pixel_size: (16, 20), ..SimConfig::default() };
        let data = generate_dataset(&cfg).unwrap();
        let m = write_dataset(dir.path(), &cfg, &data).unwrap();
        assert_eq!(m.studies.len(), 3);
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, data.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>());
        let px = read_pixels(&dir.path().join(STUDY_DIR), &back[0]).unwrap().unwrap();
        assert_eq!(px.len(), back[0].frame_count as usize * 16 * 20);
    }

    #[test]
    fn index_file_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("guidelines.idx");
        let idx = reference_index();
        save_index(&path, &idx).unwrap();
        assert_eq!(load_index(&path).unwrap(), idx);
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..8], INDEX_MAGIC);
        let mut bad = raw.clone();
        bad[8] = 9;
        fs::write(&path, bad).unwrap();
        assert!(matches!(load_index(&path), Err(StoreError::Format { .. })));
    }

    #[test]
    fn ingest_reads_text_and_markdown() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.md"), "# Chamber size\nLVID reference range is 3.8 to 5.8 cm.").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/b.txt"), "Septal thickness above 1.0 cm is increased.").unwrap();
        fs::write(dir.path().join("ignored.pdf"), "x").unwrap();
        let docs = read_guideline_dir(dir.path()).unwrap();
        assert_eq!(docs.iter().map(|d| d.doc_id.as_str()).collect::<Vec<_>>(), ["a", "sub-b"]);
        assert_eq!(docs[0].title, "Chamber size");
        let idx = ingest(dir.path(), 512, 128).unwrap();
        let hits = idx.search("septal thickness", 1).unwrap();
        assert_eq!(hits[0].doc_id, "sub-b");
    }
}
