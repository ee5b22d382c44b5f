//! File formats: tensor containers, checkpoints, PPM frames and datasets.
//!
//! Everything is little-endian; values are stored as `f32` and computed in `f64`.

use std::fs;
use std::path::Path;

use crate::datagen::{Dataset, LabeledClip};
use crate::error::{Error, Result};
use crate::numeric::{ParamSet, Tensor};
use crate::pwtp::PwtpParams;
use crate::recognizer::HeadParams;

pub const TENSOR_MAGIC: &[u8; 4] = b"PWTT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PWTC";
pub const VERSION: u8 = 1;
pub const THETA1: &str = "theta1/";
pub const THETA2: &str = "theta2/";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(Error::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &'static [u8; 4], name: &'static str) -> Result<()> {
        if self.take(4, "magic")? != magic {
            return Err(Error::BadMagic { expected: name });
        }
        match self.u8("version")? {
            VERSION => Ok(()),
            v => Err(Error::UnsupportedVersion(v)),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn push_body(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Malformed(format!("rank {} exceeds 255", t.rank())))?;
    out.push(rank);
    for &d in t.shape() {
        let d =
            u32::try_from(d).map_err(|_| Error::Malformed(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

fn read_body(r: &mut Reader) -> Result<Tensor> {
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dimensions")? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Malformed(format!("tensor of shape {shape:?} is too large")))?;
    let payload = r.take(n, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&shape, data)
}

/// Encode as a `PWTT` container.
pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(10 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(VERSION);
    push_body(&mut out, t)?;
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    r.header(TENSOR_MAGIC, "PWTT")?;
    let t = read_body(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_tensor(t)?)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// Encode a named set as a `PWTC` checkpoint. Every name must start with
/// `theta1/` or `theta2/`.
pub fn encode_checkpoint(set: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(VERSION);
    let count =
        u32::try_from(set.len()).map_err(|_| Error::Malformed("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in set.iter() {
        if !name.starts_with(THETA1) && !name.starts_with(THETA2) {
            return Err(Error::Malformed(format!(
                "tensor {name:?} is outside the {THETA1} and {THETA2} groups"
            )));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Malformed(format!("name {name:?} is too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        push_body(&mut out, t)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC, "PWTC")?;
    let count = r.u32("tensor count")?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let t = read_body(&mut r)?;
        set.insert(name, t)?;
    }
    r.finish()?;
    Ok(set)
}

/// Checkpoint for the projector and, when given, the recognizer.
pub fn checkpoint_set(theta1: &PwtpParams, theta2: Option<&HeadParams>) -> ParamSet {
    let mut set = theta1.to_param_set().with_prefix(THETA1);
    if let Some(h) = theta2 {
        set.extend(h.to_param_set().with_prefix(THETA2)).unwrap();
    }
    set
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    theta1: &PwtpParams,
    theta2: Option<&HeadParams>,
) -> Result<()> {
    Ok(fs::write(
        path,
        encode_checkpoint(&checkpoint_set(theta1, theta2))?,
    )?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    decode_checkpoint(&fs::read(path)?)
}

/// Projector parameters from a checkpoint set.
pub fn theta1(set: &ParamSet) -> Result<PwtpParams> {
    PwtpParams::from_param_set(&set.strip_prefix(THETA1))
}

/// Recognizer parameters from a checkpoint set.
pub fn theta2(set: &ParamSet) -> Result<HeadParams> {
    HeadParams::from_param_set(&set.strip_prefix(THETA2))
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM of an `[H, W, 3]` image with values in `[0, 1]`.
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let [h, w, 3] = *frame.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "PPM frames are [H, W, 3], got {:?}",
            frame.shape()
        )));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Parse a binary PPM with maxval 255 into `[H, W, 3]` values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Frames("PPM header ended early".into()));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .unwrap_or("")
                .to_string(),
        );
    }
    if fields[0] != "P6" {
        return Err(Error::Frames(format!(
            "expected a P6 image, found {:?}",
            fields[0]
        )));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Frames(format!("bad PPM header field {s:?}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Frames(format!(
            "maxval {maxval} unsupported, need 255"
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Frames("PPM header ended early".into()));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h * 3 {
        return Err(Error::Frames(format!(
            "{w}x{h} image needs {} bytes of pixels, found {}",
            w * h * 3,
            data.len()
        )));
    }
    Tensor::new(&[h, w, 3], data.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:05}.ppm")
}

fn frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".ppm")?;
    if digits.len() != 5 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Read `frame_00001.ppm`, `frame_00002.ppm`, ... from `dir` into `[T, H, W, 3]`.
pub fn read_frames(dir: impl AsRef<Path>) -> Result<Tensor> {
    let dir = dir.as_ref();
    let mut indices: Vec<usize> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| frame_index(&e.file_name().to_string_lossy()))
        .collect();
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::Frames(format!(
            "no frame_NNNNN.ppm files in {}",
            dir.display()
        )));
    }
    for (expect, &found) in (1..).zip(&indices) {
        if found != expect {
            return Err(Error::Frames(format!(
                "missing {} in {}",
                frame_name(expect),
                dir.display()
            )));
        }
    }
    let mut frames = Vec::with_capacity(indices.len());
    for &i in &indices {
        let path = dir.join(frame_name(i));
        let frame = decode_ppm(&fs::read(&path)?)
            .map_err(|e| Error::Frames(format!("{}: {e}", path.display())))?;
        if let Some(first) = frames.first().map(Tensor::shape) {
            if frame.shape() != first {
                return Err(Error::InconsistentFrameSize(format!(
                    "{} is {:?}, {} is {:?}",
                    frame_name(1),
                    first,
                    frame_name(i),
                    frame.shape()
                )));
            }
        }
        frames.push(frame);
    }
    Tensor::stack(&frames)
}

/// Write `[T, H, W, 3]` frames as `frame_00001.ppm`, ... into `dir`.
pub fn write_frames(dir: impl AsRef<Path>, frames: &Tensor) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    if frames.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "frames must be [T, H, W, 3], got {:?}",
            frames.shape()
        )));
    }
    for t in 0..frames.shape()[0] {
        fs::write(
            dir.join(frame_name(t + 1)),
            encode_ppm(&frames.index_axis0(t))?,
        )?;
    }
    Ok(())
}

/// Display a dynamic appearance `[H, W, C]` (C = 1 or 3) as a PPM with
/// `clamp(round(255 (0.5 + da / 2)))`; zero maps to 128.
pub fn export_da(da: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = *da.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "dynamic appearance must be [H, W, C], got {:?}",
            da.shape()
        )));
    };
    if c != 1 && c != 3 {
        return Err(Error::ShapeMismatch(format!("cannot display {c} channels")));
    }
    if !da.is_finite() {
        return Err(Error::Malformed("dynamic appearance is not finite".into()));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in da.data().chunks(c) {
        for ch in 0..3 {
            out.push(quantize(0.5 + px[ch % c] / 2.0));
        }
    }
    Ok(out)
}

/// Write one split as `<name>.pwtt` (clips `[N, S, T, H, W, 3]`),
/// `<name>_mask.pwtt` (motion masks `[N, S, H, W]`) and `<name>.manifest`.
pub fn write_split(dir: impl AsRef<Path>, name: &str, clips: &[LabeledClip]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let stacked = Tensor::stack(&clips.iter().map(|c| c.clip.clone()).collect::<Vec<_>>())?;
    let [n, s, _, h, w, _] = *stacked.shape() else {
        return Err(Error::ShapeMismatch("clips must be [S, T, H, W, C]".into()));
    };
    let mask: Vec<f64> = clips
        .iter()
        .flat_map(|c| c.motion_mask.iter().map(|&m| m as u8 as f64))
        .collect();
    write_tensor(dir.join(format!("{name}.pwtt")), &stacked)?;
    write_tensor(
        dir.join(format!("{name}_mask.pwtt")),
        &Tensor::new(&[n, s, h, w], mask)?,
    )?;
    let manifest: String = clips
        .iter()
        .enumerate()
        .map(|(i, c)| c.manifest_line(i) + "\n")
        .collect();
    fs::write(dir.join(format!("{name}.manifest")), manifest)?;
    Ok(())
}

fn parse_manifest_line(line: &str, expect: usize) -> Result<(usize, usize, Option<usize>)> {
    let bad = || Error::Malformed(format!("manifest line {line:?}"));
    let f: Vec<&str> = line.split('\t').collect();
    let [idx, label, bg, glyph] = f[..] else {
        return Err(bad());
    };
    if idx.parse::<usize>().map_err(|_| bad())? != expect {
        return Err(Error::Malformed(format!(
            "manifest index {idx}, expected {expect}"
        )));
    }
    let glyph = match glyph.parse::<i64>().map_err(|_| bad())? {
        -1 => None,
        g if g >= 0 => Some(g as usize),
        _ => return Err(bad()),
    };
    Ok((
        label.parse().map_err(|_| bad())?,
        bg.parse().map_err(|_| bad())?,
        glyph,
    ))
}

pub fn read_split(dir: impl AsRef<Path>, name: &str) -> Result<Vec<LabeledClip>> {
    let dir = dir.as_ref();
    let clips = read_tensor(dir.join(format!("{name}.pwtt")))?;
    let masks = read_tensor(dir.join(format!("{name}_mask.pwtt")))?;
    let manifest = fs::read_to_string(dir.join(format!("{name}.manifest")))?;
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.is_empty()).collect();
    let [n, s, _, h, w, _] = *clips.shape() else {
        return Err(Error::Malformed(format!(
            "{name}.pwtt has shape {:?}",
            clips.shape()
        )));
    };
    if masks.shape() != [n, s, h, w] || lines.len() != n {
        return Err(Error::Malformed(format!(
            "{name}: clips, masks and manifest disagree on size"
        )));
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let (label, background_id, glyph_id) = parse_manifest_line(line, i)?;
            Ok(LabeledClip {
                clip: clips.index_axis0(i),
                label,
                background_id,
                glyph_id,
                motion_mask: masks
                    .index_axis0(i)
                    .data()
                    .iter()
                    .map(|&v| v != 0.0)
                    .collect(),
            })
        })
        .collect()
}

pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_split(&dir, "train", &ds.train)?;
    write_split(&dir, "test", &ds.test)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    Ok(Dataset {
        train: read_split(&dir, "train")?,
        test: read_split(&dir, "test")?,
    })
}
