//! The 3D Tetris shapes: eight 4-cube polycubes including a chiral pair.

use ndarray::{Array4, Array5, Axis};

use crate::equiv::{cubic_rotations, rotate_array};
use crate::error::{NnError, Result};
use crate::field::FieldType;

pub const N_CLASSES: usize = 8;

/// Block coordinates in canonical orientation.
pub const SHAPES: [(&str, [[i32; 3]; 4]); N_CLASSES] = [
    ("chiral_1", [[0, 0, 0], [0, 0, 1], [1, 0, 0], [1, 1, 0]]),
    ("chiral_2", [[0, 0, 0], [0, 0, 1], [1, 0, 0], [1, -1, 0]]),
    ("square", [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]),
    ("line", [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]),
    ("corner", [[0, 0, 0], [0, 0, 1], [0, 1, 0], [1, 0, 0]]),
    ("l", [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 1, 0]]),
    ("t", [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 1, 1]]),
    ("zigzag", [[0, 0, 0], [1, 0, 0], [1, 1, 0], [2, 1, 0]]),
];

/// One-channel occupancy volume of `shape` on a `grid^3` lattice with
/// blocks `grid / 6` voxels wide, centered (floor offsets).
pub fn voxelize(blocks: &[[i32; 3]], grid: usize) -> Result<Array4<f64>> {
    if grid < 8 {
        return Err(NnError::Invalid(format!("tetris grid must be at least 8, got {grid}")));
    }
    let b = grid / 6;
    let mut lo = [i32::MAX; 3];
    let mut hi = [i32::MIN; 3];
    for p in blocks {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut offset = [0usize; 3];
    for a in 0..3 {
        let extent = (hi[a] - lo[a] + 1) as usize * b;
        if extent > grid {
            return Err(NnError::Invalid(format!("shape does not fit in a {grid}^3 grid")));
        }
        offset[a] = (grid - extent) / 2;
    }
    let mut v = Array4::zeros((1, grid, grid, grid));
    for p in blocks {
        let start: Vec<usize> = (0..3).map(|a| offset[a] + (p[a] - lo[a]) as usize * b).collect();
        for i in 0..b {
            for j in 0..b {
                for k in 0..b {
                    v[[0, start[0] + i, start[1] + j, start[2] + k]] = 1.0;
                }
            }
        }
    }
    Ok(v)
}

/// The eight canonical shapes as a batch `(8, 1, grid, grid, grid)` with
/// labels `0..8`.
pub fn tetris_dataset(grid: usize) -> Result<(Array5<f64>, Vec<usize>)> {
    let vols: Vec<Array4<f64>> = SHAPES.iter().map(|(_, s)| voxelize(s, grid)).collect::<Result<_>>()?;
    let views: Vec<_> = vols.iter().map(|v| v.view()).collect();
    let x = ndarray::stack(Axis(0), &views).map_err(|e| NnError::Shape(e.to_string()))?;
    Ok((x, (0..N_CLASSES).collect()))
}

/// Every shape under every one of the 24 cube rotations (rotation-major).
pub fn tetris_rotated_set(grid: usize, field: &FieldType) -> Result<(Array5<f64>, Vec<usize>, Vec<usize>)> {
    let (x, labels) = tetris_dataset(grid)?;
    let mut vols = Vec::new();
    let mut out_labels = Vec::new();
    let mut rot_ids = Vec::new();
    for (r, rot) in cubic_rotations().iter().enumerate() {
        for (i, &l) in labels.iter().enumerate() {
            vols.push(rotate_array(x.index_axis(Axis(0), i), field, rot)?);
            out_labels.push(l);
            rot_ids.push(r);
        }
    }
    let views: Vec<_> = vols.iter().map(|v| v.view()).collect();
    let xs = ndarray::stack(Axis(0), &views).map_err(|e| NnError::Shape(e.to_string()))?;
    Ok((xs, out_labels, rot_ids))
}
