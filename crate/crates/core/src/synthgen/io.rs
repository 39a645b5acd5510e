//! On-disk dataset: `manifest.txt` + `frames.bin` + `splits.txt` (+ `pairs.txt`).
//!
//! `frames.bin` is the concatenation of every sequence's `T×H×W×C` frames as
//! little-endian f32, row-major. Each manifest record carries the byte range
//! of its sequence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::dataset::Canvas;
use super::render::RenderedSequence;
use super::SynthError;

pub const MANIFEST: &str = "manifest.txt";
pub const FRAMES: &str = "frames.bin";
pub const SPLITS: &str = "splits.txt";
pub const PAIRS: &str = "pairs.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub sequence_id: String,
    pub embodiment_id: String,
    pub motion_id: String,
    pub scene_id: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

/// `(kind, id) -> partition`, e.g. `("embodiment", "E4") -> "test"`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitRecord {
    pub entries: BTreeMap<(String, String), String>,
}

impl SplitRecord {
    pub fn assign(&mut self, kind: &str, id: &str, partition: &str) {
        self.entries
            .insert((kind.to_string(), id.to_string()), partition.to_string());
    }

    pub fn get(&self, kind: &str, id: &str) -> Option<&str> {
        self.entries
            .get(&(kind.to_string(), id.to_string()))
            .map(String::as_str)
    }

    pub fn ids(&self, kind: &str, partition: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|((k, _), p)| k == kind && p.as_str() == partition)
            .map(|((_, id), _)| id.clone())
            .collect()
    }
}

/// A dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub canvas: Canvas,
    pub channels: usize,
    pub records: Vec<ManifestRecord>,
    pub splits: SplitRecord,
    pub pairs: Vec<(String, String)>,
    frames: Vec<u8>,
}

impl DatasetDir {
    pub fn record(&self, sequence_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.sequence_id == sequence_id)
    }

    pub fn sequence(&self, sequence_id: &str) -> Result<RenderedSequence, SynthError> {
        let rec = self
            .record(sequence_id)
            .ok_or_else(|| SynthError::UnknownId(sequence_id.to_string()))?;
        let start = rec.byte_offset as usize;
        let end = start + rec.byte_length as usize;
        if end > self.frames.len() {
            return Err(SynthError::Format(format!("{} extends past frames.bin", sequence_id)));
        }
        let data: Vec<f32> = self.frames[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let shape = [self.canvas.frames, self.canvas.height, self.canvas.width, self.channels];
        if data.len() != shape.iter().product::<usize>() {
            return Err(SynthError::Format(format!("{}: payload size", sequence_id)));
        }
        let mut seq = RenderedSequence::from_data(shape, data);
        seq.embodiment_id = rec.embodiment_id.clone();
        seq.motion_id = rec.motion_id.clone();
        seq.scene_id = rec.scene_id.clone();
        Ok(seq)
    }
}

pub fn write_dataset(
    dir: &Path,
    sequences: &[RenderedSequence],
    splits: &SplitRecord,
    pairs: &[(String, String)],
) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    let first = sequences
        .first()
        .ok_or_else(|| SynthError::Format("no sequences to write".into()))?;
    let [t, h, w, c] = first.shape();
    let mut manifest = String::new();
    manifest.push_str("# tape dataset v1\n");
    manifest.push_str(&format!("# frames={} height={} width={} channels={} dtype=f32le\n", t, h, w, c));
    manifest.push_str("# sequence_id\tembodiment_id\tmotion_id\tscene_id\tbyte_offset\tbyte_length\n");
    let mut blob = Vec::new();
    for s in sequences {
        if s.shape() != first.shape() {
            return Err(SynthError::Format(format!("{}: shape {:?}", s.sequence_id(), s.shape())));
        }
        let offset = blob.len() as u64;
        for v in &s.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            s.sequence_id(),
            s.embodiment_id,
            s.motion_id,
            s.scene_id,
            offset,
            blob.len() as u64 - offset
        ));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::File::create(dir.join(FRAMES))?.write_all(&blob)?;

    let mut text = String::from("# kind\tid\tpartition\n");
    for ((kind, id), part) in &splits.entries {
        text.push_str(&format!("{}\t{}\t{}\n", kind, id, part));
    }
    fs::write(dir.join(SPLITS), text)?;

    let mut text = String::from("# source_sequence_id\ttarget_sequence_id\n");
    for (a, b) in pairs {
        text.push_str(&format!("{}\t{}\n", a, b));
    }
    fs::write(dir.join(PAIRS), text)?;
    Ok(())
}

fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.split('\t').collect()))
}

pub fn read_dataset(dir: &Path) -> Result<DatasetDir, SynthError> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let mut dims: BTreeMap<String, usize> = BTreeMap::new();
    for line in manifest.lines().filter(|l| l.starts_with("# frames=")) {
        for kv in line.trim_start_matches("# ").split_whitespace() {
            if let Some((k, v)) = kv.split_once('=') {
                if let Ok(v) = v.parse() {
                    dims.insert(k.to_string(), v);
                }
            }
        }
    }
    let dim = |k: &str| {
        dims.get(k)
            .copied()
            .ok_or_else(|| SynthError::Format(format!("manifest header lacks {}", k)))
    };
    let canvas = Canvas {
        frames: dim("frames")?,
        height: dim("height")?,
        width: dim("width")?,
    };
    let channels = dim("channels")?;
    let mut recs = Vec::new();
    for (line, f) in records(&manifest) {
        if f.len() != 6 {
            return Err(SynthError::Format(format!("manifest line {}: {} fields", line, f.len())));
        }
        let num = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| SynthError::Format(format!("manifest line {}: bad number {}", line, s)))
        };
        recs.push(ManifestRecord {
            sequence_id: f[0].to_string(),
            embodiment_id: f[1].to_string(),
            motion_id: f[2].to_string(),
            scene_id: f[3].to_string(),
            byte_offset: num(f[4])?,
            byte_length: num(f[5])?,
        });
    }
    let mut splits = SplitRecord::default();
    if let Ok(text) = fs::read_to_string(dir.join(SPLITS)) {
        for (line, f) in records(&text) {
            if f.len() != 3 {
                return Err(SynthError::Format(format!("splits line {}", line)));
            }
            splits.assign(f[0], f[1], f[2]);
        }
    }
    let mut pairs = Vec::new();
    if let Ok(text) = fs::read_to_string(dir.join(PAIRS)) {
        for (line, f) in records(&text) {
            if f.len() != 2 {
                return Err(SynthError::Format(format!("pairs line {}", line)));
            }
            pairs.push((f[0].to_string(), f[1].to_string()));
        }
    }
    let frames = fs::read(dir.join(FRAMES))?;
    Ok(DatasetDir {
        canvas,
        channels,
        records: recs,
        splits,
        pairs,
        frames,
    })
}
