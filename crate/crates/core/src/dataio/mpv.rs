//! MPV container.
//!
//! ```text
//! magic: MPVOL1
//! kind: image|labels|checkpoint
//! dims: W H L
//! spacing: sx sy sz
//! dtype: f32|u8
//! phase: arterial|venous|none
//!
//! <payload: little-endian, x fastest, then y, then z>
//! ```

use std::fs;
use std::path::Path;

use super::{Dtype, Kind, LabelMap, Phase, Volume, VolumeHeader};
use crate::error::{Error, Result};

pub const MAGIC: &str = "MPVOL1";
const KEYS: [&str; 6] = ["magic", "kind", "dims", "spacing", "dtype", "phase"];

#[derive(Clone, Debug, PartialEq)]
pub enum MpvFile {
    Volume(Volume),
    Labels(LabelMap),
}

impl MpvFile {
    pub fn header(&self) -> &VolumeHeader {
        match self {
            MpvFile::Volume(v) => &v.header,
            MpvFile::Labels(l) => &l.header,
        }
    }

    pub fn into_volume(self) -> Result<Volume> {
        match self {
            MpvFile::Volume(v) => Ok(v),
            MpvFile::Labels(_) => Err(Error::format(0, "expected an f32 volume, found labels")),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            MpvFile::Labels(l) => Ok(l),
            MpvFile::Volume(_) => Err(Error::format(0, "expected a u8 label map, found f32 data")),
        }
    }
}

impl From<Volume> for MpvFile {
    fn from(v: Volume) -> Self {
        MpvFile::Volume(v)
    }
}

impl From<LabelMap> for MpvFile {
    fn from(l: LabelMap) -> Self {
        MpvFile::Labels(l)
    }
}

fn header_text(h: &VolumeHeader) -> String {
    format!(
        "magic: {MAGIC}\nkind: {}\ndims: {} {} {}\nspacing: {} {} {}\ndtype: {}\nphase: {}\n\n",
        h.kind,
        h.dims[0],
        h.dims[1],
        h.dims[2],
        h.spacing[0],
        h.spacing[1],
        h.spacing[2],
        h.dtype,
        h.phase
    )
}

pub fn encode(file: &MpvFile) -> Vec<u8> {
    let mut out = header_text(file.header()).into_bytes();
    match file {
        MpvFile::Volume(v) => {
            out.reserve(v.voxels.len() * 4);
            for x in &v.voxels {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        MpvFile::Labels(l) => out.extend_from_slice(&l.labels),
    }
    out
}

fn parse_triple<V: std::str::FromStr>(value: &str, offset: usize, key: &str) -> Result<[V; 3]> {
    let parts: Vec<&str> = value.split(' ').collect();
    if parts.len() != 3 {
        return Err(Error::format(offset, format!("{key} needs three values")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<V>()
                .map_err(|_| Error::format(offset, format!("bad {key} value {p:?}")))?,
        );
    }
    match <[V; 3]>::try_from(out) {
        Ok(a) => Ok(a),
        Err(_) => unreachable!("three values parsed"),
    }
}

pub fn decode(bytes: &[u8]) -> Result<MpvFile> {
    let mut pos = 0;
    let mut fields: [Option<(usize, String)>; 6] = Default::default();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| Error::format(pos, "header not terminated by a blank line"))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| Error::format(pos, "header line is not ASCII"))?;
        let line_start = pos;
        pos = end + 1;
        if line.is_empty() {
            break;
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| Error::format(line_start, format!("malformed header line {line:?}")))?;
        let slot = KEYS
            .iter()
            .position(|&k| k == key)
            .ok_or_else(|| Error::format(line_start, format!("unknown header key {key:?}")))?;
        if fields[slot].is_some() {
            return Err(Error::format(line_start, format!("duplicate header key {key:?}")));
        }
        fields[slot] = Some((line_start, value.to_string()));
    }
    let payload_start = pos;
    let get = |i: usize| -> Result<&(usize, String)> {
        fields[i]
            .as_ref()
            .ok_or_else(|| Error::format(payload_start, format!("missing header key {:?}", KEYS[i])))
    };
    let (off, magic) = get(0)?;
    if magic != MAGIC {
        return Err(Error::format(*off, format!("bad magic {magic:?}")));
    }
    let (off, kind) = get(1)?;
    let kind: Kind = kind
        .parse()
        .map_err(|_| Error::format(*off, format!("bad kind {kind:?}")))?;
    let (off, dims) = get(2)?;
    let dims: [usize; 3] = parse_triple(dims, *off, "dims")?;
    let (off, spacing) = get(3)?;
    let spacing: [f64; 3] = parse_triple(spacing, *off, "spacing")?;
    let (off, dtype) = get(4)?;
    let dtype: Dtype = dtype
        .parse()
        .map_err(|_| Error::format(*off, format!("bad dtype {dtype:?}")))?;
    let (off, phase) = get(5)?;
    let phase: Phase = phase
        .parse()
        .map_err(|_| Error::format(*off, format!("bad phase {phase:?}")))?;

    let header = VolumeHeader {
        dims,
        spacing,
        dtype,
        phase,
        kind,
    };
    header
        .validate()
        .map_err(|e| Error::format(payload_start, e.to_string()))?;
    let payload = &bytes[payload_start..];
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::U8 => 1,
    };
    let expected = header.voxel_count() * width;
    if payload.len() != expected {
        return Err(Error::format(
            payload_start,
            format!(
                "payload has {} bytes, dims {:?} of {dtype} need {expected}",
                payload.len(),
                dims
            ),
        ));
    }
    match dtype {
        Dtype::F32 => {
            let voxels = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(MpvFile::Volume(Volume::new(header, voxels)?))
        }
        Dtype::U8 => {
            if let Some(i) = payload.iter().position(|&l| l > super::MAX_LABEL) {
                return Err(Error::format(payload_start + i, "label value out of range"));
            }
            Ok(MpvFile::Labels(LabelMap::new(header, payload.to_vec())?))
        }
    }
}

pub fn write_volume(file: &MpvFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(file)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<MpvFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Volume {
        let h = VolumeHeader::image([2, 2, 2], [0.75, 0.75, 2.5], Phase::Venous);
        Volume::new(h, (0..8).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap()
    }

    #[test]
    fn one_f32_is_little_endian() {
        let h = VolumeHeader::image([1, 1, 1], [1.0; 3], Phase::None);
        let bytes = encode(&Volume::new(h, vec![1.0]).unwrap().into());
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn exact_header_text() {
        let bytes = encode(&tiny().into());
        let text = std::str::from_utf8(&bytes[..bytes.len() - 32]).unwrap();
        assert_eq!(
            text,
            "magic: MPVOL1\nkind: image\ndims: 2 2 2\nspacing: 0.75 0.75 2.5\ndtype: f32\nphase: venous\n\n"
        );
    }

    #[test]
    fn short_payload_rejected_with_offset() {
        let mut bytes = encode(&tiny().into());
        let header_len = bytes.len() - 32;
        bytes.truncate(bytes.len() - 4);
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, header_len),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_keys() {
        let good = encode(&tiny().into());
        let bad = String::from_utf8_lossy(&good).replacen("MPVOL1", "MPVOL2", 1);
        assert!(matches!(decode(bad.as_bytes()), Err(Error::Format { offset: 0, .. })));
        let dup = [b"magic: MPVOL1\n".as_slice(), &good].concat();
        assert!(matches!(decode(&dup), Err(Error::Format { offset: 14, .. })));
        assert!(decode(b"magic: MPVOL1\n").is_err());
        let bad_dtype = String::from_utf8_lossy(&good).replacen("dtype: f32", "dtype: f64", 1);
        assert!(decode(bad_dtype.as_bytes()).is_err());
    }

    #[test]
    fn labels_round_trip_and_range() {
        let l = LabelMap::from_labels([3, 1, 1], [1.0; 3], vec![0, 2, 3]).unwrap();
        let bytes = encode(&l.clone().into());
        assert_eq!(decode(&bytes).unwrap(), MpvFile::Labels(l));
        let mut broken = bytes.clone();
        *broken.last_mut().unwrap() = 9;
        assert!(matches!(decode(&broken), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("mpv-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("v.mpv");
        let v = tiny();
        write_volume(&v.clone().into(), &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), MpvFile::Volume(v));
        assert!(matches!(read_volume(dir.join("missing.mpv")), Err(Error::Io { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }
}
