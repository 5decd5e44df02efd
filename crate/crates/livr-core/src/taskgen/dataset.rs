//! Dataset files: a line-delimited JSON manifest plus a raw raster blob.
//!
//! The manifest's first line is a header (kind, seed, count, config hash);
//! each following line describes one example and carries the byte offset of
//! its raster in the blob file, so examples are loadable by index without
//! scanning the blob.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TaskKind;

use super::raster::Raster;
use super::{TaskExample, TaskMeta};

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SplitHeader {
    pub kind: TaskKind,
    pub seed: u64,
    pub n: usize,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    index: u64,
    h: usize,
    w: usize,
    /// Byte offset of this raster in the blob file.
    offset: u64,
    prompt: Vec<usize>,
    answer: Vec<usize>,
    meta: TaskMeta,
}

fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.manifest.jsonl"))
}

fn blob_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.rasters.bin"))
}

/// Write one split. Returns the pair of file paths.
pub fn write_split(
    dir: &Path,
    split: &str,
    header: &SplitHeader,
    examples: &[TaskExample],
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let mpath = manifest_path(dir, split);
    let bpath = blob_path(dir, split);
    let mut manifest = BufWriter::new(File::create(&mpath)?);
    let mut blob = BufWriter::new(File::create(&bpath)?);

    let mut header = header.clone();
    header.n = examples.len();
    serde_json::to_writer(&mut manifest, &header)?;
    manifest.write_all(b"\n")?;

    let mut offset = 0u64;
    for ex in examples {
        let line = ManifestLine {
            index: ex.index,
            h: ex.image.h,
            w: ex.image.w,
            offset,
            prompt: ex.prompt_tokens.clone(),
            answer: ex.answer_tokens.clone(),
            meta: ex.meta.clone(),
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.write_all(b"\n")?;
        for v in &ex.image.data {
            blob.write_all(&v.to_le_bytes())?;
        }
        offset += (ex.image.data.len() * 8) as u64;
    }
    manifest.flush()?;
    blob.flush()?;
    Ok((mpath, bpath))
}

pub struct SplitReader {
    pub header: SplitHeader,
    lines: Vec<ManifestLine>,
    blob: File,
}

impl SplitReader {
    pub fn open(dir: &Path, split: &str) -> Result<SplitReader> {
        let mpath = manifest_path(dir, split);
        let file = File::open(&mpath)
            .map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
        let mut lines_it = BufReader::new(file).lines();
        let header_line = lines_it
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty manifest", mpath.display())))??;
        let header: SplitHeader = serde_json::from_str(&header_line)?;
        let mut lines = Vec::with_capacity(header.n);
        for l in lines_it {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            lines.push(serde_json::from_str(&l)?);
        }
        if lines.len() != header.n {
            return Err(Error::Data(format!(
                "{}: header says {} examples, found {}",
                mpath.display(),
                header.n,
                lines.len()
            )));
        }
        let blob = File::open(blob_path(dir, split))?;
        Ok(SplitReader { header, lines, blob })
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Load a single example by position in the split.
    pub fn load(&mut self, i: usize) -> Result<TaskExample> {
        let line = &self.lines[i];
        let mut bytes = vec![0u8; line.h * line.w * 8];
        self.blob.seek(SeekFrom::Start(line.offset))?;
        self.blob.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(TaskExample {
            kind: self.header.kind,
            seed: self.header.seed,
            index: line.index,
            image: Raster { h: line.h, w: line.w, data },
            prompt_tokens: line.prompt.clone(),
            answer_tokens: line.answer.clone(),
            meta: line.meta.clone(),
        })
    }

    /// Load the whole split in manifest order.
    pub fn load_all(&mut self) -> Result<Vec<TaskExample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Convenience: open and fully load a split.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<TaskExample>> {
    SplitReader::open(dir, split)?.load_all()
}
