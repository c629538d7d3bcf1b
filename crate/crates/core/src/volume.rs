//! Volumes with physical spacing and the VVF1 container.
//!
//! Layout (little-endian): 8-byte magic `VVOLF1\0\0`, `u32` version, `u8`
//! dtype (0 = f32, 1 = u8), three `u32` extents `D, H, W`, three `f32`
//! spacings in mm, then the row-major payload. No compression.

use std::path::Path;

use crate::error::{Result, VfError};

pub const MAGIC: [u8; 8] = *b"VVOLF1\0\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 1 + 12 + 12;

pub trait Voxel: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    const CODE: u8;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(b: &[u8]) -> Self;
}

impl Voxel for f32 {
    const CODE: u8 = 0;
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f32::from_le_bytes(b[..4].try_into().expect("4 bytes"))
    }
}

impl Voxel for u8 {
    const CODE: u8 = 1;
    const SIZE: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(b: &[u8]) -> Self {
        b[0]
    }
}

/// Dense 3-D grid, row-major over `(D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<V> {
    pub dims: [usize; 3],
    /// Voxel size in mm along `(D, H, W)`.
    pub spacing: [f32; 3],
    pub data: Vec<V>,
}

/// Intensity volume.
pub type Volume = Grid<f32>;
/// Binary label volume (0 background, 1 vessel).
pub type LabelVolume = Grid<u8>;

impl<V: Voxel> Grid<V> {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<V>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(VfError::config("dims", format!("extents must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VfError::config("spacing", format!("spacings must be positive, got {spacing:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(VfError::config("dims", format!("{dims:?} does not match {} voxels", data.len())));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], v: V) -> Result<Self> {
        Self::new(dims, spacing, vec![v; dims.iter().product()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> V {
        self.data[self.index(z, y, x)]
    }

    /// Copies the box starting at `origin` with extents `size`.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| origin[a] + size[a] > self.dims[a]) {
            return Err(VfError::config(
                "crop",
                format!("box at {origin:?} of size {size:?} exceeds {:?}", self.dims),
            ));
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(origin[0] + z, origin[1] + y, origin[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Grid::new(size, self.spacing, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * V::SIZE);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(V::CODE);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        self.data.iter().for_each(|v| v.put(&mut out));
        out
    }

    /// Parses a VVF1 buffer; `path` only labels errors.
    pub fn from_bytes(b: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, msg: String| VfError::Format {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        if b.len() < HEADER_LEN {
            return Err(fail(b.len(), format!("truncated header ({} of {HEADER_LEN} bytes)", b.len())));
        }
        if b[..8] != MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != VERSION {
            return Err(fail(8, format!("unsupported version {version}")));
        }
        if b[12] != V::CODE {
            return Err(fail(12, format!("dtype code {} where {} was expected", b[12], V::CODE)));
        }
        let dims = [u32_at(13) as usize, u32_at(17) as usize, u32_at(21) as usize];
        if dims.contains(&0) {
            return Err(fail(13, format!("zero extent in {dims:?}")));
        }
        let spacing = [25, 29, 33].map(|o| f32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes")));
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(fail(25, format!("non-positive spacing {spacing:?}")));
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let expect = n.and_then(|n| n.checked_mul(V::SIZE));
        let payload = &b[HEADER_LEN..];
        if expect != Some(payload.len()) {
            return Err(fail(
                HEADER_LEN,
                format!("payload of {} bytes does not match dims {dims:?}", payload.len()),
            ));
        }
        let data = payload.chunks_exact(V::SIZE).map(V::get).collect();
        Ok(Grid { dims, spacing, data })
    }
}

pub fn save_volume<V: Voxel>(v: &Grid<V>, path: &Path) -> Result<()> {
    std::fs::write(path, v.to_bytes()).map_err(|e| VfError::io(path, e))
}

pub fn load_volume<V: Voxel>(path: &Path) -> Result<Grid<V>> {
    let b = std::fs::read(path).map_err(|e| VfError::io(path, e))?;
    Grid::from_bytes(&b, path)
}
