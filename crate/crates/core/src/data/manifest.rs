//! On-disk dataset layout.
//!
//! A manifest is a directory holding `index.tsv` plus one binary tensor file
//! per patch. The index starts with a header line
//!
//! ```text
//! #dsin-manifest  version=1  N=12  P=6  geometry=56x56x3,...,224x224x3
//! ```
//!
//! followed by one tab-separated record per sample:
//! `id  subject  labels  patch0.bin ... patchP-1.bin`, where `labels` is a
//! bitstring such as `010011` and patch paths are relative to the directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Dataset, PatchGeometry, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_INDEX: &str = "index.tsv";
pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &str = "#dsin-manifest";

fn manifest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn check_field(path: &Path, what: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains(['\t', '\n', '\r']) {
        return Err(manifest_err(path, format!("{what} {value:?} is empty or contains a tab/newline")));
    }
    Ok(())
}

pub fn save_manifest(dataset: &Dataset, dir: &Path) -> Result<()> {
    let patch_dir = dir.join("patches");
    fs::create_dir_all(&patch_dir).map_err(|e| Error::io(&patch_dir, e))?;
    let index_path = dir.join(MANIFEST_INDEX);
    let file = fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut out = BufWriter::new(file);
    let geometry: Vec<String> = dataset.geometry().iter().map(ToString::to_string).collect();
    let mut text = format!(
        "{MAGIC}\tversion={MANIFEST_VERSION}\tN={}\tP={}\tgeometry={}\n",
        dataset.num_labels(),
        dataset.num_streams(),
        geometry.join(",")
    );
    for s in dataset.samples() {
        check_field(&index_path, "id", &s.id)?;
        check_field(&index_path, "subject", &s.subject)?;
        if s.id.contains(['/', '\\']) {
            return Err(manifest_err(&index_path, format!("id {:?} contains a path separator", s.id)));
        }
        let bits: String = s.labels.iter().map(|&y| if y == 1 { '1' } else { '0' }).collect();
        text.push_str(&format!("{}\t{}\t{}", s.id, s.subject, bits));
        for (i, p) in s.patches.iter().enumerate() {
            let rel = format!("patches/{}_{i}.bin", s.id);
            let path = dir.join(&rel);
            fs::write(&path, p.to_bytes()).map_err(|e| Error::io(&path, e))?;
            text.push('\t');
            text.push_str(&rel);
        }
        text.push('\n');
    }
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(&index_path, e))
}

struct Header {
    num_labels: usize,
    geometry: Vec<PatchGeometry>,
}

fn parse_header(path: &Path, line: &str) -> Result<Header> {
    let mut fields = line.split('\t');
    if fields.next() != Some(MAGIC) {
        return Err(manifest_err(path, "missing #dsin-manifest header"));
    }
    let (mut version, mut n, mut p, mut geometry) = (None, None, None, None);
    for f in fields {
        let (key, value) = f
            .split_once('=')
            .ok_or_else(|| manifest_err(path, format!("bad header field {f:?}")))?;
        let num = || {
            value
                .parse::<usize>()
                .map_err(|_| manifest_err(path, format!("bad header value {f:?}")))
        };
        match key {
            "version" => version = Some(num()?),
            "N" => n = Some(num()?),
            "P" => p = Some(num()?),
            "geometry" => {
                geometry = Some(if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(str::parse)
                        .collect::<Result<Vec<PatchGeometry>>>()
                        .map_err(|e| manifest_err(path, e.to_string()))?
                })
            }
            other => return Err(manifest_err(path, format!("unknown header key {other:?}"))),
        }
    }
    let version = version.ok_or_else(|| manifest_err(path, "header lacks version"))?;
    if version != MANIFEST_VERSION as usize {
        return Err(manifest_err(
            path,
            format!("unsupported schema version {version} (supported: {MANIFEST_VERSION})"),
        ));
    }
    let num_labels = n.ok_or_else(|| manifest_err(path, "header lacks N"))?;
    let streams = p.ok_or_else(|| manifest_err(path, "header lacks P"))?;
    let geometry = geometry.ok_or_else(|| manifest_err(path, "header lacks geometry"))?;
    if geometry.len() != streams {
        return Err(manifest_err(
            path,
            format!("header declares P={streams} but {} geometries", geometry.len()),
        ));
    }
    Ok(Header { num_labels, geometry })
}

pub fn load_manifest(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join(MANIFEST_INDEX);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut lines = text.lines();
    let header = parse_header(&index_path, lines.next().unwrap_or(""))?;
    let mut dataset = Dataset::new(header.num_labels, header.geometry.clone());
    for (lineno, line) in lines.enumerate().map(|(i, l)| (i + 2, l)) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let row_err = |detail: String| manifest_err(&index_path, format!("row {lineno}: {detail}"));
        if fields.len() != 3 + header.geometry.len() {
            return Err(row_err(format!(
                "expected {} fields, found {}",
                3 + header.geometry.len(),
                fields.len()
            )));
        }
        let (id, subject, bits) = (fields[0], fields[1], fields[2]);
        if bits.chars().count() != header.num_labels {
            return Err(row_err(format!(
                "sample {id} has {} labels, header declares N={}",
                bits.chars().count(),
                header.num_labels
            )));
        }
        let labels = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(row_err(format!("sample {id} has non-binary label {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let mut patches = Vec::with_capacity(header.geometry.len());
        for (rel, geom) in fields[3..].iter().zip(&header.geometry) {
            let path: PathBuf = dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => row_err(format!("missing patch file {}", path.display())),
                _ => Error::io(&path, e),
            })?;
            let mut slice = bytes.as_slice();
            let t = Tensor::read_from(&mut slice)
                .map_err(|e| row_err(format!("unreadable patch file {}: {e}", path.display())))?;
            if !slice.is_empty() {
                return Err(row_err(format!("trailing bytes in patch file {}", path.display())));
            }
            if t.shape() != geom.shape() {
                return Err(row_err(format!(
                    "patch {} has shape {:?}, header declares {geom}",
                    path.display(),
                    t.shape()
                )));
            }
            patches.push(t);
        }
        dataset
            .push(Sample {
                id: id.to_string(),
                subject: subject.to_string(),
                patches,
                face: None,
                labels,
            })
            .map_err(|e| row_err(e.to_string()))?;
    }
    Ok(dataset)
}
