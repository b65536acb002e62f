//! On-disk layout:
//!
//! ```text
//! manifest.json                      format version + taxonomy (+ revision per built category)
//! categories/<key>/instruction.md    L1 instruction
//! categories/<key>/index.json        [{doc_id, description}]
//! categories/<key>/docs/<doc_id>.md  header block + body
//! ```
//!
//! Document files open with a JSON metadata block fenced by `---` lines,
//! followed by the body verbatim.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::integrity::IntegrityMode;
use super::{
    CategoryKey, CategoryKind, IndexEntry, KnowledgeBase, KnowledgeError, L1IndexEntry, L1Value, L2Document,
    Provenance, Result,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_FENCE: &str = "---";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    categories: Vec<ManifestCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCategory {
    key: CategoryKey,
    kind: CategoryKind,
    description: String,
    /// Present iff the category has a built L1 value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    revision: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DocHeader {
    doc_id: String,
    description: String,
    provenance: Provenance,
    created_at: String,
}

fn format_err(path: &Path, message: impl Into<String>) -> KnowledgeError {
    KnowledgeError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| KnowledgeError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| KnowledgeError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("knowledge records serialize");
    text.push('\n');
    text
}

/// Reads a standalone taxonomy file: a JSON array of `{key, kind, description}`.
pub fn read_l1_index_file(path: &Path) -> Result<Vec<L1IndexEntry>> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn load_knowledge_base(root: &Path) -> Result<KnowledgeBase> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(format_err(&manifest_path, "missing manifest"));
    }
    let manifest: Manifest =
        serde_json::from_str(&read_text(&manifest_path)?).map_err(|e| format_err(&manifest_path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(
            &manifest_path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }

    let mut kb = KnowledgeBase::default();
    for cat in manifest.categories {
        let dir = root.join("categories").join(cat.key.as_str());
        let docs = load_docs(&cat.key, &dir.join("docs"))?;
        if !docs.is_empty() {
            kb.l2.insert(cat.key.clone(), docs);
        }
        if let Some(revision) = cat.revision {
            let instruction = read_text(&dir.join("instruction.md"))?;
            let index_path = dir.join("index.json");
            let l2_index: Vec<IndexEntry> =
                serde_json::from_str(&read_text(&index_path)?).map_err(|e| format_err(&index_path, e.to_string()))?;
            kb.l1_values.insert(
                cat.key.clone(),
                L1Value {
                    key: cat.key.clone(),
                    instruction,
                    l2_index,
                    revision,
                },
            );
        }
        kb.l1_index.push(L1IndexEntry {
            key: cat.key,
            kind: cat.kind,
            description: cat.description,
        });
    }

    let report = kb.validate_integrity(IntegrityMode::PendingEvolution);
    if !report.is_clean() {
        return Err(KnowledgeError::Integrity(report));
    }
    Ok(kb)
}

fn load_docs(key: &CategoryKey, dir: &Path) -> Result<BTreeMap<String, L2Document>> {
    let mut docs = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(docs);
    }
    let entries = fs::read_dir(dir).map_err(|e| KnowledgeError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| KnowledgeError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("md") {
            continue;
        }
        let doc = parse_doc(key, &path)?;
        docs.insert(doc.doc_id.clone(), doc);
    }
    Ok(docs)
}

fn parse_doc(key: &CategoryKey, path: &Path) -> Result<L2Document> {
    let text = read_text(path)?;
    let rest = text
        .strip_prefix(HEADER_FENCE)
        .and_then(|r| r.strip_prefix('\n'))
        .ok_or_else(|| format_err(path, "document must start with a header block"))?;
    let close = format!("\n{HEADER_FENCE}\n");
    let end = rest
        .find(&close)
        .ok_or_else(|| format_err(path, "unterminated header block"))?;
    let header: DocHeader =
        serde_json::from_str(&rest[..end]).map_err(|e| format_err(path, format!("bad header: {e}")))?;
    let body = rest[end + close.len()..].to_string();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    if stem != header.doc_id {
        return Err(format_err(
            path,
            format!("file name does not match doc_id `{}`", header.doc_id),
        ));
    }
    let created_at = DateTime::parse_from_rfc3339(&header.created_at)
        .map_err(|e| format_err(path, format!("bad created_at: {e}")))?
        .with_timezone(&Utc);
    Ok(L2Document {
        key: key.clone(),
        doc_id: header.doc_id,
        body,
        description: header.description,
        provenance: header.provenance,
        created_at,
    })
}

fn render_doc(doc: &L2Document) -> String {
    let header = DocHeader {
        doc_id: doc.doc_id.clone(),
        description: doc.description.clone(),
        provenance: doc.provenance.clone(),
        created_at: doc.created_at.to_rfc3339_opts(SecondsFormat::AutoSi, true),
    };
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    format!("{HEADER_FENCE}\n{json}\n{HEADER_FENCE}\n{}", doc.body)
}

/// Writes the whole knowledge base to `root`, replacing whatever was there.
/// The tree is assembled in a sibling staging directory and swapped in by
/// rename. Refuses to write a knowledge base that fails strict validation.
pub fn save_knowledge_base(kb: &KnowledgeBase, root: &Path) -> Result<()> {
    let report = kb.validate_integrity(IntegrityMode::Strict);
    if !report.is_clean() {
        return Err(KnowledgeError::Integrity(report));
    }
    let parent = match root.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| KnowledgeError::io(&parent, e))?;
    let name = root
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| format_err(root, "knowledge base path has no final component"))?;
    let staging = tempfile::Builder::new()
        .prefix(&format!(".{name}.staging-"))
        .tempdir_in(&parent)
        .map_err(|e| KnowledgeError::io(&parent, e))?;
    write_tree(kb, staging.path())?;

    let staged = staging.keep();
    if root.exists() {
        let old = tempfile::Builder::new()
            .prefix(&format!(".{name}.old-"))
            .tempdir_in(&parent)
            .map_err(|e| KnowledgeError::io(&parent, e))?
            .keep();
        // rename over an existing (empty) directory is allowed on unix
        fs::rename(root, &old).map_err(|e| KnowledgeError::io(root, e))?;
        fs::rename(&staged, root).map_err(|e| KnowledgeError::io(root, e))?;
        fs::remove_dir_all(&old).map_err(|e| KnowledgeError::io(&old, e))?;
    } else {
        fs::rename(&staged, root).map_err(|e| KnowledgeError::io(root, e))?;
    }
    Ok(())
}

fn write_tree(kb: &KnowledgeBase, dir: &Path) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        categories: kb
            .l1_index
            .iter()
            .map(|e| ManifestCategory {
                key: e.key.clone(),
                kind: e.kind,
                description: e.description.clone(),
                revision: kb.l1_values.get(&e.key).map(|v| v.revision),
            })
            .collect(),
    };
    write_text(&dir.join(MANIFEST_FILE), &to_json(&manifest))?;
    for entry in &kb.l1_index {
        let cat_dir = dir.join("categories").join(entry.key.as_str());
        let docs_dir = cat_dir.join("docs");
        fs::create_dir_all(&docs_dir).map_err(|e| KnowledgeError::io(&docs_dir, e))?;
        if let Some(value) = kb.l1_values.get(&entry.key) {
            write_text(&cat_dir.join("instruction.md"), &value.instruction)?;
            write_text(&cat_dir.join("index.json"), &to_json(&value.l2_index))?;
        }
        for doc in kb.documents(&entry.key) {
            write_text(&docs_dir.join(format!("{}.md", doc.doc_id)), &render_doc(doc))?;
        }
    }
    Ok(())
}

/// Exclusive writer lock for a knowledge base directory, held as a sibling
/// `<root>.lock` file for the lifetime of the guard.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        let mut name = root.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(KnowledgeError::Locked(root.to_path_buf()))
            }
            Err(e) => Err(KnowledgeError::io(&path, e)),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;
    use walk::count_files;

    mod walk {
        use std::path::Path;

        pub fn count_files(dir: &Path, ext: &str) -> usize {
            let mut n = 0;
            for entry in std::fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    n += count_files(&path, ext);
                } else if path.extension().and_then(|e| e.to_str()) == Some(ext)
                    && path.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()) == Some("docs")
                {
                    n += 1;
                }
            }
            n
        }
    }

    #[test]
    fn round_trip_preserves_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("kb");
        let kb = small_kb();
        save_knowledge_base(&kb, &root).unwrap();
        assert!(root.join("categories/tabular/docs/tabular-0001.md").is_file());
        assert!(root.join("categories/tabular/index.json").is_file());
        assert_eq!(count_files(&root, "md"), 3);
        let loaded = load_knowledge_base(&root).unwrap();
        assert_eq!(loaded, kb);
        assert_eq!(loaded.l1_index.len(), 2);
        assert_eq!(loaded.document_count(), 3);
    }

    #[test]
    fn second_save_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("kb");
        let mut kb = small_kb();
        save_knowledge_base(&kb, &root).unwrap();
        let v = kb.l1_values.get_mut(&key("vision")).unwrap();
        v.instruction.push_str("More.\n");
        v.revision = 2;
        save_knowledge_base(&kb, &root).unwrap();
        assert_eq!(load_knowledge_base(&root).unwrap(), kb);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1, "staging directories left behind");
    }

    #[test]
    fn empty_directory_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_knowledge_base(dir.path()),
            Err(KnowledgeError::Format { .. })
        ));
    }

    #[test]
    fn deleted_document_file_is_a_named_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("kb");
        save_knowledge_base(&small_kb(), &root).unwrap();
        fs::remove_file(root.join("categories/tabular/docs/tabular-0002.md")).unwrap();
        match load_knowledge_base(&root) {
            Err(KnowledgeError::Integrity(report)) => {
                assert_eq!(report.violations.len(), 1);
                assert_eq!(report.violations[0].key, "tabular");
                assert_eq!(report.violations[0].doc_id.as_deref(), Some("tabular-0002"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn refuses_to_save_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let mut kb = small_kb();
        kb.insert_document(&key("tabular"), draft("orphan", "orphan")).unwrap();
        let root = dir.path().join("kb");
        assert!(matches!(save_knowledge_base(&kb, &root), Err(KnowledgeError::Integrity(_))));
        assert!(!root.exists());
    }

    #[test]
    fn body_with_fence_lines_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("kb");
        let mut kb = small_kb();
        let doc = kb.l2.get_mut(&key("vision")).unwrap().get_mut("vision-0001").unwrap();
        doc.body = "---\nnot a header\n---\n\ntrailing".into();
        save_knowledge_base(&kb, &root).unwrap();
        assert_eq!(load_knowledge_base(&root).unwrap(), kb);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("kb");
        let guard = StoreLock::acquire(&root).unwrap();
        assert!(matches!(StoreLock::acquire(&root), Err(KnowledgeError::Locked(_))));
        drop(guard);
        assert!(StoreLock::acquire(&root).is_ok());
    }
}
