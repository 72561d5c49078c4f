use crate::error::{Error, Result};

fn axis_corners(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut c = 0;
    while c + patch < dim {
        c = (c + stride).min(dim - patch);
        out.push(c);
    }
    out
}

/// Window corners for sliding-window inference, z slowest and x fastest.
/// The last window on each axis is pulled back so it ends at the border.
pub fn patch_grid(dims: [usize; 3], patch: usize, stride: usize) -> Result<Vec<[usize; 3]>> {
    if stride == 0 || patch == 0 {
        return Err(Error::contract("patch and stride must be >= 1"));
    }
    if stride > patch {
        return Err(Error::contract(format!("stride {stride} > patch {patch} leaves gaps")));
    }
    if let Some(&d) = dims.iter().find(|&&d| d < patch) {
        return Err(Error::contract(format!("patch {patch} exceeds dim {d}")));
    }
    let xs = axis_corners(dims[0], patch, stride);
    let ys = axis_corners(dims[1], patch, stride);
    let zs = axis_corners(dims[2], patch, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}
