//! Dense grids and trilinear upsampling of mask heatmaps.

use super::{SparseVoxelGrid, VoxelError};

/// Fill value for inactive voxels when densifying a heatmap. Large and
/// negative so an empty site never wins a per-voxel argmax.
pub const EMPTY_FILL: f64 = -1e4;

/// Values on a full `X×Y×Z` grid, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid {
    pub dims: [u32; 3],
    pub values: Vec<f64>,
}

impl DenseGrid {
    pub fn constant(dims: [u32; 3], v: f64) -> Self {
        let n = dims.iter().map(|&d| d as usize).product();
        Self {
            dims,
            values: vec![v; n],
        }
    }

    pub fn get(&self, x: u32, y: u32, z: u32) -> f64 {
        let [dx, dy, _] = self.dims;
        self.values[(x + dx * (y + dy * z)) as usize]
    }
}

/// Scatters per-voxel `values` onto the dense grid, `fill` elsewhere.
pub fn densify(grid: &SparseVoxelGrid, values: &[f64], fill: f64) -> DenseGrid {
    assert_eq!(values.len(), grid.nv(), "one value per active voxel");
    let mut out = DenseGrid::constant(grid.dims(), fill);
    let [dx, dy, _] = grid.dims();
    for (c, &v) in grid.coords().iter().zip(values) {
        out.values[(c[0] + dx * (c[1] + dy * c[2])) as usize] = v;
    }
    out
}

/// Output site `o` samples input coordinate `o / factor`, clamped to the last
/// input sample. Sites at multiples of `factor` reproduce input values.
fn axis_weights(n_in: u32, factor: u32) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let t = (f64::from(o) / f64::from(factor)).min(f64::from(n_in - 1));
            let i0 = t.floor() as usize;
            let i1 = (i0 + 1).min(n_in as usize - 1);
            (i0, i1, t - i0 as f64)
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Trilinear upsampling by `factor` ∈ {2, 4}.
pub fn upsample_mask(heat: &DenseGrid, factor: u32) -> Result<DenseGrid, VoxelError> {
    if factor != 2 && factor != 4 {
        return Err(VoxelError::BadFactor(factor));
    }
    let [nx, ny, nz] = heat.dims;
    let (wx, wy, wz) = (
        axis_weights(nx, factor),
        axis_weights(ny, factor),
        axis_weights(nz, factor),
    );
    let dims = [nx * factor, ny * factor, nz * factor];
    let at = |x: usize, y: usize, z: usize| heat.values[x + nx as usize * (y + ny as usize * z)];
    let mut values = Vec::with_capacity(dims.iter().map(|&d| d as usize).product());
    for &(z0, z1, tz) in &wz {
        for &(y0, y1, ty) in &wy {
            for &(x0, x1, tx) in &wx {
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), tx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), tx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), tx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), tx);
                let c0 = lerp(c00, c10, ty);
                let c1 = lerp(c01, c11, ty);
                values.push(lerp(c0, c1, tz));
            }
        }
    }
    Ok(DenseGrid { dims, values })
}
