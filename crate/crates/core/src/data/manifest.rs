use std::fs;
use std::path::{Path, PathBuf};

use super::{
    generate_synthetic_pair, io_error, read_flo, read_image, sample_seed, write_flo, write_image, DataError,
    MotionSpec, SamplePair, UNKNOWN_FLOW_THRESHOLD,
};
use crate::tensor::{Shape, Tensor};

/// One manifest line: `image_a<TAB>image_b<TAB>flow`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub flow: PathBuf,
}

/// Reads a manifest. Relative paths are resolved against the manifest's
/// directory; blank lines and lines starting with `#` are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(DataError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 tab-separated paths, found {}", fields.len()),
            });
        }
        let resolve = |f: &str| base.join(f);
        out.push(ManifestEntry {
            image_a: resolve(fields[0]),
            image_b: resolve(fields[1]),
            flow: resolve(fields[2]),
        });
    }
    if out.is_empty() {
        return Err(DataError::Manifest {
            path: path.to_path_buf(),
            line: 0,
            msg: "manifest lists no samples".into(),
        });
    }
    Ok(out)
}

/// Writes a manifest, storing paths under the manifest's directory relative to it.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for (i, e) in entries.iter().enumerate() {
        let mut cols = Vec::with_capacity(3);
        for p in [&e.image_a, &e.image_b, &e.flow] {
            let rel = p.strip_prefix(base).unwrap_or(p);
            let s = rel.to_string_lossy();
            if s.contains(['\t', '\n']) {
                return Err(DataError::Manifest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("path `{s}` contains a tab or newline"),
                });
            }
            cols.push(s.into_owned());
        }
        text.push_str(&cols.join("\t"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_error(path))
}

/// Loads one sample. Flow components beyond [`UNKNOWN_FLOW_THRESHOLD`] mark
/// pixels as invalid and are zeroed.
pub fn load_sample(entry: &ManifestEntry) -> Result<SamplePair, DataError> {
    let a = read_image(&entry.image_a)?;
    let b = read_image(&entry.image_b)?;
    let mut flow = read_flo(&entry.flow)?;
    let (sa, sf) = (a.shape(), flow.shape());
    if sa.h() != sf.h() || sa.w() != sf.w() {
        return Err(DataError::Sample(format!(
            "{}: flow is {}x{} but the image is {}x{}",
            entry.flow.display(),
            sf.h(),
            sf.w(),
            sa.h(),
            sa.w()
        )));
    }
    let mut valid = Tensor::ones(Shape::new(1, 1, sf.h(), sf.w()));
    let mut sparse = false;
    for y in 0..sf.h() {
        for x in 0..sf.w() {
            let (u, v) = (flow.at(0, 0, y, x), flow.at(0, 1, y, x));
            if u.abs() > UNKNOWN_FLOW_THRESHOLD || v.abs() > UNKNOWN_FLOW_THRESHOLD || !u.is_finite() || !v.is_finite() {
                valid.set(0, 0, y, x, 0.0);
                flow.set(0, 0, y, x, 0.0);
                flow.set(0, 1, y, x, 0.0);
                sparse = true;
            }
        }
    }
    SamplePair::new(a, b, flow, sparse.then_some(valid))
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<SamplePair>, DataError> {
    read_manifest(manifest)?.iter().map(load_sample).collect()
}

/// Generates `count` synthetic pairs into `dir` and writes `dir/manifest.txt`.
/// Sample `i` uses [`sample_seed`]`(seed, i)`.
pub fn generate_dataset(
    dir: &Path,
    count: usize,
    seed: u64,
    height: usize,
    width: usize,
    motion: &MotionSpec,
) -> Result<PathBuf, DataError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let sp = generate_synthetic_pair(sample_seed(seed, i as u64), height, width, motion)?;
        let entry = ManifestEntry {
            image_a: dir.join(format!("{i:05}_a.ppm")),
            image_b: dir.join(format!("{i:05}_b.ppm")),
            flow: dir.join(format!("{i:05}_flow.flo")),
        };
        write_image(&entry.image_a, &sp.pair.image_a)?;
        write_image(&entry.image_b, &sp.pair.image_b)?;
        write_flo(&entry.flow, &sp.pair.flow)?;
        entries.push(entry);
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
