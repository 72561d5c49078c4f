//! Volumes, label maps, the MPV container, preprocessing, synthetic
//! dual-phase phantoms and sliding-window coordinates.

pub mod manifest;
pub mod mpv;
pub mod patches;
pub mod phantom;
pub mod preprocess;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use manifest::{
    load_all, load_case, read_manifest, write_corpus, write_manifest, CaseManifest, ManifestEntry, MANIFEST_FILE,
};
pub use mpv::{decode, encode, read_volume, write_volume, MpvFile};
pub use patches::patch_grid;
pub use phantom::{gen_phantom, generate_corpus, Conspicuity, PhantomConfig};
pub use preprocess::truncate_normalize;

/// Label values.
pub const BACKGROUND: u8 = 0;
pub const TISSUE: u8 = 1;
pub const MASS: u8 = 2;
pub const DUCT: u8 = 3;
pub const MAX_LABEL: u8 = DUCT;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Arterial,
    Venous,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Image,
    Labels,
    Checkpoint,
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, $($var:path => $s:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($var => $s),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($var),)+
                    _ => Err(Error::config(format!("unknown {} {s:?}", $what))),
                }
            }
        }
    };
}

text_enum!(Dtype, "dtype", Dtype::F32 => "f32", Dtype::U8 => "u8");
text_enum!(Phase, "phase", Phase::Arterial => "arterial", Phase::Venous => "venous", Phase::None => "none");
text_enum!(Kind, "kind", Kind::Image => "image", Kind::Labels => "labels", Kind::Checkpoint => "checkpoint");

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    /// `(W, H, L)` voxels.
    pub dims: [usize; 3],
    /// Millimeters per voxel.
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    pub phase: Phase,
    pub kind: Kind,
}

impl VolumeHeader {
    pub fn image(dims: [usize; 3], spacing: [f64; 3], phase: Phase) -> Self {
        Self {
            dims,
            spacing,
            dtype: Dtype::F32,
            phase,
            kind: Kind::Image,
        }
    }

    pub fn labels(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Self {
            dims,
            spacing,
            dtype: Dtype::U8,
            phase: Phase::None,
            kind: Kind::Labels,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("dims must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::dim(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }
}

/// Scalar grid, x fastest, then y, then z.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(header: VolumeHeader, voxels: Vec<f32>) -> Result<Self> {
        header.validate()?;
        if header.dtype != Dtype::F32 {
            return Err(Error::dim("scalar volumes are stored as f32"));
        }
        if voxels.len() != header.voxel_count() {
            return Err(Error::dim(format!(
                "dims {:?} need {} voxels, got {}",
                header.dims,
                header.voxel_count(),
                voxels.len()
            )));
        }
        Ok(Self { header, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    /// Copies the window at `corner` with extent `size` into an x-fastest buffer.
    pub fn crop(&self, corner: [usize; 3], size: [usize; 3]) -> Result<Vec<f32>> {
        crop_grid(&self.voxels, self.header.dims, corner, size)
    }
}

/// Per-voxel labels in `{0 background, 1 tissue, 2 mass, 3 duct}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub header: VolumeHeader,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(header: VolumeHeader, labels: Vec<u8>) -> Result<Self> {
        header.validate()?;
        if header.dtype != Dtype::U8 {
            return Err(Error::dim("label maps are stored as u8"));
        }
        if labels.len() != header.voxel_count() {
            return Err(Error::dim(format!(
                "dims {:?} need {} labels, got {}",
                header.dims,
                header.voxel_count(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > MAX_LABEL) {
            return Err(Error::contract(format!("label value {bad} exceeds {MAX_LABEL}")));
        }
        Ok(Self { header, labels })
    }

    pub fn from_labels(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        Self::new(VolumeHeader::labels(dims, spacing), labels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims
    }

    pub fn crop(&self, corner: [usize; 3], size: [usize; 3]) -> Result<Vec<u8>> {
        crop_grid(&self.labels, self.header.dims, corner, size)
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

pub(crate) fn crop_grid<V: Copy>(src: &[V], dims: [usize; 3], corner: [usize; 3], size: [usize; 3]) -> Result<Vec<V>> {
    for a in 0..3 {
        if corner[a] + size[a] > dims[a] || size[a] == 0 {
            return Err(Error::dim(format!(
                "window {corner:?}+{size:?} exceeds volume {dims:?}"
            )));
        }
    }
    let [w, h, _] = dims;
    let mut out = Vec::with_capacity(size.iter().product());
    for z in corner[2]..corner[2] + size[2] {
        for y in corner[1]..corner[1] + size[1] {
            let base = (z * h + y) * w;
            out.extend_from_slice(&src[base + corner[0]..base + corner[0] + size[0]]);
        }
    }
    Ok(out)
}

/// Aligned arterial/venous pair with a shared label map.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedCase {
    pub case_id: String,
    pub arterial: Volume,
    pub venous: Volume,
    pub labels: LabelMap,
}

impl PairedCase {
    pub fn new(case_id: impl Into<String>, arterial: Volume, venous: Volume, labels: LabelMap) -> Result<Self> {
        let dims = labels.dims();
        if arterial.dims() != dims || venous.dims() != dims {
            return Err(Error::dim(format!(
                "case volumes disagree: arterial {:?}, venous {:?}, labels {:?}",
                arterial.dims(),
                venous.dims(),
                dims
            )));
        }
        if arterial.header.phase != Phase::Arterial || venous.header.phase != Phase::Venous {
            return Err(Error::contract("phase tags do not match their slots"));
        }
        Ok(Self {
            case_id: case_id.into(),
            arterial,
            venous,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.labels.dims()
    }

    pub fn phase(&self, phase: Phase) -> &Volume {
        match phase {
            Phase::Venous => &self.venous,
            _ => &self.arterial,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_extracts_window() {
        let dims = [4, 3, 2];
        let v: Vec<u32> = (0..24).collect();
        let c = crop_grid(&v, dims, [1, 1, 1], [2, 2, 1]).unwrap();
        assert_eq!(c, vec![17, 18, 21, 22]);
        assert!(crop_grid(&v, dims, [3, 0, 0], [2, 1, 1]).is_err());
    }

    #[test]
    fn label_map_rejects_out_of_range() {
        assert!(LabelMap::from_labels([2, 1, 1], [1.0; 3], vec![0, 4]).is_err());
        assert!(LabelMap::from_labels([2, 1, 1], [1.0; 3], vec![0, 3]).is_ok());
    }

    #[test]
    fn header_invariants() {
        let mut h = VolumeHeader::image([2, 2, 2], [1.0, 1.0, 1.0], Phase::Arterial);
        assert!(h.validate().is_ok());
        h.spacing[1] = 0.0;
        assert!(h.validate().is_err());
        assert_eq!("venous".parse::<Phase>().unwrap(), Phase::Venous);
        assert_eq!(Kind::Checkpoint.to_string(), "checkpoint");
    }

    #[test]
    fn paired_case_checks_dims_and_phase() {
        let a = Volume::new(VolumeHeader::image([2, 2, 2], [1.0; 3], Phase::Arterial), vec![0.0; 8]).unwrap();
        let v = Volume::new(VolumeHeader::image([2, 2, 2], [1.0; 3], Phase::Venous), vec![0.0; 8]).unwrap();
        let l = LabelMap::from_labels([2, 2, 2], [1.0; 3], vec![0; 8]).unwrap();
        assert!(PairedCase::new("c", a.clone(), v.clone(), l.clone()).is_ok());
        assert!(PairedCase::new("c", v, a, l).is_err());
    }
}
