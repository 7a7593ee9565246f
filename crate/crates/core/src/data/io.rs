//! Dataset directory format and PGM export.
//!
//! A dataset directory holds `manifest.json` plus three payloads
//! (`train.bin`, `test.bin`, `sequences.bin`). Each payload starts with the
//! magic `NWDS`, the format version, the record count and the image side
//! (all `u32` little-endian), followed by fixed-layout records.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dataset, Frame, Manifest, Sample, SequenceGroup};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NWDS";
const FILES: [&str; 3] = ["train.bin", "test.bin", "sequences.bin"];

fn header(out: &mut Vec<u8>, count: usize, side: usize) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(side as u32).to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_pixels(out: &mut Vec<u8>, t: &Tensor<f64>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_samples(samples: &[Sample], side: usize) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, samples.len(), side);
    for s in samples {
        put_u32(&mut out, s.observed_label);
        put_u32(&mut out, s.clean_label);
        put_u32(&mut out, s.identity);
        out.push(u8::from(s.is_noisy));
        out.extend_from_slice(&s.intensity.to_le_bytes());
        put_pixels(&mut out, &s.image);
    }
    out
}

fn encode_sequences(groups: &[SequenceGroup], side: usize) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, groups.len(), side);
    for g in groups {
        put_u32(&mut out, g.clean_label);
        put_u32(&mut out, g.identity);
        put_u32(&mut out, g.train_index);
        put_u32(&mut out, g.frames.len());
        for f in &g.frames {
            out.extend_from_slice(&f.intensity.to_le_bytes());
            put_pixels(&mut out, &f.image);
        }
    }
    out
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the dataset and fills in the manifest checksums.
pub fn save_dataset(ds: &mut Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = ds.side();
    let payloads = [
        encode_samples(&ds.train, side),
        encode_samples(&ds.test, side),
        encode_sequences(&ds.sequences, side),
    ];
    ds.refresh_manifest();
    ds.manifest.checksums.clear();
    for (name, bytes) in FILES.iter().zip(&payloads) {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        ds.manifest.checksums.insert(name.to_string(), sha256_hex(bytes));
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&ds.manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

struct Reader<'a> {
    file: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                what: self.file.to_string(),
                detail: format!("need {n} bytes at offset {}, have {}", self.pos, self.bytes.len() - self.pos),
            });
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn pixels(&mut self, side: usize) -> Result<Tensor<f64>> {
        let raw = self.take(side * side * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(vec![1, side, side], data)
    }

    /// Checks the header and returns the record count.
    fn header(&mut self, side: usize) -> Result<usize> {
        if self.take(4)? != MAGIC {
            return Err(Error::Magic { what: self.file.to_string(), expected: "NWDS".into() });
        }
        let version = self.u32()? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Version { what: self.file.to_string(), found: version, expected: FORMAT_VERSION });
        }
        let count = self.u32()?;
        let file_side = self.u32()?;
        if file_side != side {
            return Err(Error::Truncated { what: self.file.to_string(), detail: format!("side {file_side}, manifest says {side}") });
        }
        Ok(count)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Truncated {
                what: self.file.to_string(),
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn decode_samples(file: &str, bytes: &[u8], side: usize, k: usize) -> Result<Vec<Sample>> {
    let mut r = Reader { file, bytes, pos: 0 };
    let count = r.header(side)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let observed_label = r.u32()?;
        let clean_label = r.u32()?;
        for l in [observed_label, clean_label] {
            if l >= k {
                return Err(Error::ClassOutOfRange { index: l, classes: k });
            }
        }
        let identity = r.u32()?;
        let is_noisy = r.take(1)?[0] != 0;
        let intensity = r.f64()?;
        let image = r.pixels(side)?;
        out.push(Sample { image, observed_label, clean_label, identity, intensity, is_noisy });
    }
    r.finish()?;
    Ok(out)
}

fn decode_sequences(bytes: &[u8], side: usize) -> Result<Vec<SequenceGroup>> {
    let mut r = Reader { file: "sequences.bin", bytes, pos: 0 };
    let count = r.header(side)?;
    let mut out = Vec::with_capacity(count);
    for g in 0..count {
        let clean_label = r.u32()?;
        let identity = r.u32()?;
        let train_index = r.u32()?;
        let n = r.u32()?;
        let frames = (0..n)
            .map(|_| Ok(Frame { intensity: r.f64()?, image: r.pixels(side)? }))
            .collect::<Result<Vec<_>>>()?;
        let group = SequenceGroup { clean_label, identity, frames, train_index };
        group.validate(g)?;
        out.push(group);
    }
    r.finish()?;
    Ok(out)
}

/// Reads a dataset directory, verifying the manifest version and every
/// payload checksum.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let version = serde_json::from_str::<serde_json::Value>(&text)?
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Missing("manifest.json: version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::Version { what: "manifest.json".into(), found: version as u32, expected: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest.spec.validate()?;
    let mut payloads = Vec::new();
    for name in FILES {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = manifest.checksums.get(name).ok_or_else(|| Error::Missing(format!("checksum for {name}")))?;
        let actual = sha256_hex(&bytes);
        if &actual != expected {
            return Err(Error::Checksum { file: name.into(), expected: expected.clone(), actual });
        }
        payloads.push(bytes);
    }
    let (side, k) = (manifest.spec.side, manifest.spec.num_classes);
    let ds = Dataset {
        train: decode_samples("train.bin", &payloads[0], side, k)?,
        test: decode_samples("test.bin", &payloads[1], side, k)?,
        sequences: decode_sequences(&payloads[2], side)?,
        manifest,
    };
    if ds.train.len() != ds.manifest.train_count || ds.test.len() != ds.manifest.test_count {
        return Err(Error::Truncated { what: "dataset".into(), detail: "record counts disagree with manifest".into() });
    }
    Ok(ds)
}

fn pgm_bytes(width: usize, height: usize, pixels: &[f64]) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for (i, &v) in pixels.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::PixelRange { index: i, value: v });
        }
        // Round half up.
        out.push((255.0 * v + 0.5).floor() as u8);
    }
    Ok(out)
}

fn plane(image: &Tensor<f64>) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape("export_pgm", &[1, 0, 0], image.shape())),
    }
}

/// Writes a single-channel image as binary PGM (maxval 255, `round(255·v)`
/// with halves rounded up).
pub fn export_pgm(image: &Tensor<f64>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = plane(image)?;
    let bytes = pgm_bytes(w, h, image.data())?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Tiles equally sized images row by row with a one-pixel black gutter.
pub fn export_pgm_grid(rows: &[Vec<Tensor<f64>>], path: impl AsRef<Path>) -> Result<()> {
    let first = rows.first().and_then(|r| r.first()).ok_or(Error::EmptyBatch)?;
    let (h, w) = plane(first)?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gw, gh) = (cols * (w + 1) - 1, rows.len() * (h + 1) - 1);
    let mut canvas = vec![0.0; gw * gh];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if plane(img)? != (h, w) {
                return Err(Error::shape("export_pgm_grid", &[1, h, w], img.shape()));
            }
            for y in 0..h {
                let dst = (r * (h + 1) + y) * gw + c * (w + 1);
                canvas[dst..dst + w].copy_from_slice(&img.data()[y * w..(y + 1) * w]);
            }
        }
    }
    let bytes = pgm_bytes(gw, gh, &canvas)?;
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
