//! Binary scene files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SPOTSCN1"
//! u32 X, Y, Z, Nv, C, Ncls, Nobj
//! Nv × (u32 x, u32 y, u32 z)         canonical order, x fastest
//! Nv × (C × f32)                     features
//! Nv × u32                           labels
//! Nobj × (u32 class_id, u32 mask_size, mask_size × u32 voxel index)
//! ```

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{GtObject, SceneGroundTruth, SparseVoxelGrid, VoxelError};
use crate::matrix::Matrix;

pub const SCENE_MAGIC: &[u8; 8] = b"SPOTSCN1";
const HEADER_LEN: usize = 8 + 7 * 4;

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("count mismatch: header declares Nv={header} but the payload holds {payload} voxel rows")]
    CountMismatch { header: usize, payload: usize },
    #[error("trailing bytes: {0}")]
    TrailingBytes(String),
    #[error("invalid payload")]
    Invalid(#[from] VoxelError),
}

struct Header {
    dims: [u32; 3],
    nv: usize,
    c: usize,
    ncls: u32,
    nobj: usize,
}

pub fn write_scene<W: Write>(mut w: W, grid: &SparseVoxelGrid, gt: &SceneGroundTruth) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + grid.nv() * (16 + 4 * grid.channels()));
    buf.extend_from_slice(SCENE_MAGIC);
    let d = grid.dims();
    for v in [
        d[0],
        d[1],
        d[2],
        grid.nv() as u32,
        grid.channels() as u32,
        gt.n_classes,
        gt.objects.len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in grid.coords() {
        for &x in c {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    for &f in grid.features().data() {
        buf.extend_from_slice(&(f as f32).to_le_bytes());
    }
    for &l in &gt.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for o in &gt.objects {
        buf.extend_from_slice(&o.class_id.to_le_bytes());
        buf.extend_from_slice(&(o.mask.len() as u32).to_le_bytes());
        for &i in &o.mask {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn save_scene(path: impl AsRef<Path>, grid: &SparseVoxelGrid, gt: &SceneGroundTruth) -> Result<(), SceneIoError> {
    let mut buf = Vec::new();
    write_scene(&mut buf, grid, gt)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<(SparseVoxelGrid, SceneGroundTruth), SceneIoError> {
    read_scene(&std::fs::read(path)?)
}

fn u32_at(bytes: &[u8], pos: usize) -> u32 {
    u32::from_le_bytes([bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]])
}

fn parse_header(bytes: &[u8]) -> Result<Header, SceneIoError> {
    if bytes.len() < 8 || &bytes[..8] != SCENE_MAGIC {
        return Err(SceneIoError::MalformedHeader("missing SPOTSCN1 magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(SceneIoError::Truncated(format!(
            "{} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    let f: Vec<u32> = (0..7).map(|i| u32_at(bytes, 8 + 4 * i)).collect();
    let dims = [f[0], f[1], f[2]];
    if dims.contains(&0) {
        return Err(SceneIoError::MalformedHeader(format!("zero extent in dims {dims:?}")));
    }
    if f[4] == 0 {
        return Err(SceneIoError::MalformedHeader("zero feature channels".into()));
    }
    if f[5] < 2 {
        return Err(SceneIoError::MalformedHeader(format!("n_classes = {} < 2", f[5])));
    }
    let dense: u64 = dims.iter().map(|&d| u64::from(d)).product();
    if u64::from(f[3]) > dense {
        return Err(SceneIoError::MalformedHeader(format!(
            "Nv = {} exceeds dense volume {dense}",
            f[3]
        )));
    }
    Ok(Header {
        dims,
        nv: f[3] as usize,
        c: f[4] as usize,
        ncls: f[5],
        nobj: f[6] as usize,
    })
}

fn fixed_len(nv: usize, c: usize) -> usize {
    HEADER_LEN + nv * (12 + 4 * c + 4)
}

/// Walks the object section assuming `nv` voxel rows. `Ok(())` iff it ends
/// exactly at the end of the file.
fn walk_objects(bytes: &[u8], nv: usize, c: usize, nobj: usize) -> Result<(), WalkFailure> {
    let mut pos = fixed_len(nv, c);
    if pos > bytes.len() {
        return Err(WalkFailure::Short);
    }
    for _ in 0..nobj {
        if bytes.len() - pos < 8 {
            return Err(WalkFailure::Short);
        }
        let size = u32_at(bytes, pos + 4) as usize;
        if size > nv {
            return Err(WalkFailure::Inconsistent);
        }
        pos += 8;
        if bytes.len() - pos < 4 * size {
            return Err(WalkFailure::Short);
        }
        pos += 4 * size;
    }
    if pos == bytes.len() {
        Ok(())
    } else {
        Err(WalkFailure::Trailing(bytes.len() - pos))
    }
}

enum WalkFailure {
    Short,
    Inconsistent,
    Trailing(usize),
}

/// Parses a scene file. Structural problems are classified as: bad header,
/// a payload shorter than the header implies, or a payload whose size only
/// fits a different voxel count than the header declares.
pub fn read_scene(bytes: &[u8]) -> Result<(SparseVoxelGrid, SceneGroundTruth), SceneIoError> {
    let h = parse_header(bytes)?;
    if let Err(fail) = walk_objects(bytes, h.nv, h.c, h.nobj) {
        let max_nv = bytes.len().saturating_sub(HEADER_LEN) / (16 + 4 * h.c);
        if let Some(actual) = (0..=max_nv).find(|&n| n != h.nv && walk_objects(bytes, n, h.c, h.nobj).is_ok()) {
            return Err(SceneIoError::CountMismatch {
                header: h.nv,
                payload: actual,
            });
        }
        return Err(match fail {
            WalkFailure::Trailing(n) => SceneIoError::TrailingBytes(format!("{n} bytes after the last object")),
            WalkFailure::Short | WalkFailure::Inconsistent => SceneIoError::Truncated(format!(
                "{} bytes do not hold Nv={} voxels of {} channels and {} objects",
                bytes.len(),
                h.nv,
                h.c,
                h.nobj
            )),
        });
    }

    let mut pos = HEADER_LEN;
    let mut next = || {
        let v = u32_at(bytes, pos);
        pos += 4;
        v
    };
    let coords: Vec<[u32; 3]> = (0..h.nv).map(|_| [next(), next(), next()]).collect();
    let features: Vec<f64> = (0..h.nv * h.c).map(|_| f32::from_bits(next()) as f64).collect();
    let labels: Vec<u32> = (0..h.nv).map(|_| next()).collect();
    let objects = (0..h.nobj)
        .map(|_| {
            let class_id = next();
            let size = next() as usize;
            GtObject {
                class_id,
                mask: (0..size).map(|_| next()).collect(),
            }
        })
        .collect();

    let grid = SparseVoxelGrid::new(h.dims, coords, Matrix::from_vec(h.nv, h.c, features))?;
    let gt = SceneGroundTruth {
        n_classes: h.ncls,
        labels,
        objects,
    };
    gt.validate(h.nv)?;
    Ok((grid, gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{generate_scene, SceneSpec};

    fn scene() -> (SparseVoxelGrid, SceneGroundTruth) {
        generate_scene(&SceneSpec {
            dims: [8, 8, 4],
            n_objects: 2,
            n_classes: 3,
            channels: 4,
            seed: 7,
        })
        .unwrap()
    }

    fn bytes_of(g: &SparseVoxelGrid, gt: &SceneGroundTruth) -> Vec<u8> {
        let mut b = Vec::new();
        write_scene(&mut b, g, gt).unwrap();
        b
    }

    #[test]
    fn generated_scene_round_trips() {
        let (g, gt) = scene();
        let b = bytes_of(&g, &gt);
        let (g2, gt2) = read_scene(&b).unwrap();
        assert_eq!(g, g2);
        assert_eq!(gt, gt2);
        assert_eq!(b, bytes_of(&g2, &gt2));
    }

    #[test]
    fn empty_object_list_round_trips() {
        let (g, _) = scene();
        let gt = SceneGroundTruth {
            n_classes: 3,
            labels: vec![0; g.nv()],
            objects: vec![],
        };
        let (g2, gt2) = read_scene(&bytes_of(&g, &gt)).unwrap();
        assert_eq!((g, gt), (g2, gt2));
    }

    #[test]
    fn header_count_disagreeing_with_rows_is_a_count_mismatch() {
        let (g, gt) = scene();
        let mut b = bytes_of(&g, &gt);
        let nv = g.nv() as u32;
        b[20..24].copy_from_slice(&(nv - 1).to_le_bytes());
        match read_scene(&b) {
            Err(SceneIoError::CountMismatch { header, payload }) => {
                assert_eq!(header, g.nv() - 1);
                assert_eq!(payload, g.nv());
            }
            other => panic!("expected count mismatch, got {other:?}"),
        }
        b[20..24].copy_from_slice(&(nv + 1).to_le_bytes());
        assert!(matches!(read_scene(&b), Err(SceneIoError::CountMismatch { .. })));
    }

    #[test]
    fn errors_are_distinguished() {
        let (g, gt) = scene();
        let b = bytes_of(&g, &gt);

        let mut bad_magic = b.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_scene(&bad_magic), Err(SceneIoError::MalformedHeader(_))));

        let mut zero_dim = b.clone();
        zero_dim[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_scene(&zero_dim), Err(SceneIoError::MalformedHeader(_))));

        assert!(matches!(read_scene(&b[..b.len() - 3]), Err(SceneIoError::Truncated(_))));
        assert!(matches!(read_scene(&b[..20]), Err(SceneIoError::Truncated(_))));

        let mut trailing = b.clone();
        trailing.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(read_scene(&trailing), Err(SceneIoError::TrailingBytes(_))));

        let mut bad_label = b.clone();
        let label0 = fixed_len(g.nv(), g.channels()) - 4 * g.nv();
        bad_label[label0..label0 + 4].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(read_scene(&bad_label), Err(SceneIoError::Invalid(_))));
    }
}
