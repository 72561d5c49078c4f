use super::{Dtype, Volume};
use crate::error::{Error, Result};

pub const HU_MIN: f64 = -100.0;
pub const HU_MAX: f64 = 240.0;

/// Clamps to `[HU_MIN, HU_MAX]`, then standardizes to zero mean and unit
/// population variance. A (near) constant case maps to all zeros.
pub fn truncate_normalize(v: &Volume) -> Result<Volume> {
    if v.header.dtype != Dtype::F32 {
        return Err(Error::contract("normalization needs an f32 volume"));
    }
    let clamped: Vec<f64> = v
        .voxels
        .iter()
        .map(|&x| (x as f64).clamp(HU_MIN, HU_MAX))
        .collect();
    let n = clamped.len() as f64;
    let mean = clamped.iter().sum::<f64>() / n;
    let var = clamped.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let voxels = if std < 1e-6 {
        vec![0.0; clamped.len()]
    } else {
        clamped.iter().map(|x| ((x - mean) / std) as f32).collect()
    };
    Volume::new(v.header.clone(), voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Phase, VolumeHeader};

    fn vol(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::new(VolumeHeader::image([n, 1, 1], [1.0; 3], Phase::Arterial), values).unwrap()
    }

    #[test]
    fn three_value_example() {
        // independent: clamp [-100, 0, 240], mean 140/3, population std
        let c = [-100.0f64, 0.0, 240.0];
        let m = c.iter().sum::<f64>() / 3.0;
        let s = (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
        let expect: Vec<f64> = c.iter().map(|x| (x - m) / s).collect();
        for (e, r) in expect.iter().zip([-1.0280, -0.3271, 1.3551]) {
            assert!((e - r).abs() < 1e-3);
        }
        let out = truncate_normalize(&vol(vec![-200.0, 0.0, 300.0])).unwrap();
        for (o, e) in out.voxels.iter().zip(&expect) {
            assert!((*o as f64 - e).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_input_is_zero() {
        let out = truncate_normalize(&vol(vec![42.0; 10])).unwrap();
        assert!(out.voxels.iter().all(|&v| v == 0.0));
        // constant after clamping
        let out = truncate_normalize(&vol(vec![500.0, 900.0, 241.0])).unwrap();
        assert!(out.voxels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_moments() {
        let v = vol((0..500).map(|i| ((i * 37) % 411) as f32 - 150.0).collect());
        let out = truncate_normalize(&v).unwrap();
        let n = out.voxels.len() as f64;
        let m = out.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
        let s = (out.voxels.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-5);
    }
}
