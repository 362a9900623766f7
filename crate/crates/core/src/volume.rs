//! Dense multi-channel 3D scalar field with voxel spacing metadata, plus
//! the bit-exact `.vuda` container format.
//!
//! Layout is channel-major, then depth, row, column. Spacing is millimeters
//! per voxel along (z, y, x).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const VUDA_MAGIC: &[u8; 4] = b"VUDA";
pub const VUDA_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        channels: usize,
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        data: Vec<f32>,
    ) -> Result<Self> {
        let (d, h, w) = dims;
        if channels == 0 || d == 0 || h == 0 || w == 0 {
            return Err(CoreError::InvalidArgument(format!(
                "volume dims must be positive, got {}x{:?}",
                channels, dims
            )));
        }
        let n = channels * d * h * w;
        if data.len() != n {
            return Err(CoreError::ShapeMismatch {
                op: "volume_new",
                detail: format!("expected {} voxels for {}x{:?}, got {}", n, channels, dims, data.len()),
            });
        }
        let sp = [spacing.0, spacing.1, spacing.2];
        if sp.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "spacing must be strictly positive and finite, got {:?}",
                spacing
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("volume data".into()));
        }
        Ok(Volume { channels, dims, spacing, data })
    }

    pub fn zeros(channels: usize, dims: (usize, usize, usize), spacing: (f32, f32, f32)) -> Self {
        let n = channels * dims.0 * dims.1 * dims.2;
        Volume { channels, dims, spacing, data: vec![0.0; n] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxels_per_channel(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        let (_, h, w) = self.dims;
        ((c * self.dims.0 + z) * h + y) * w + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, z, y, x)]
    }

    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, z, y, x);
        self.data[i] = v;
    }

    /// True when every voxel is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn foreground_fraction(&self) -> f32 {
        let n = self.data.len() as f32;
        self.data.iter().filter(|&&v| v > 0.5).count() as f32 / n
    }

    pub fn to_tensor(&self) -> Tensor {
        let (d, h, w) = self.dims;
        Tensor { shape: vec![self.channels, d, h, w], data: self.data.clone() }
    }

    pub fn from_tensor(t: &Tensor, spacing: (f32, f32, f32)) -> Result<Self> {
        if t.shape.len() != 4 {
            return Err(CoreError::ShapeMismatch {
                op: "volume_from_tensor",
                detail: format!("expected rank-4 tensor, got {:?}", t.shape),
            });
        }
        Volume::new(t.shape[0], (t.shape[1], t.shape[2], t.shape[3]), spacing, t.data.clone())
    }

    /// Extract one channel as a new single-channel volume.
    pub fn channel(&self, c: usize) -> Result<Volume> {
        if c >= self.channels {
            return Err(CoreError::InvalidArgument(format!(
                "channel {} out of {}",
                c, self.channels
            )));
        }
        let n = self.voxels_per_channel();
        let data = self.data[c * n..(c + 1) * n].to_vec();
        Volume::new(1, self.dims, self.spacing, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Volume> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Volume::new(self.channels, self.dims, self.spacing, data)
    }
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_volume_to(&mut f, v)
}

pub fn write_volume_to(f: &mut impl Write, v: &Volume) -> Result<()> {
    f.write_all(VUDA_MAGIC)?;
    f.write_u16::<LittleEndian>(VUDA_VERSION)?;
    f.write_u16::<LittleEndian>(v.channels as u16)?;
    f.write_u32::<LittleEndian>(v.dims.0 as u32)?;
    f.write_u32::<LittleEndian>(v.dims.1 as u32)?;
    f.write_u32::<LittleEndian>(v.dims.2 as u32)?;
    f.write_f32::<LittleEndian>(v.spacing.0)?;
    f.write_f32::<LittleEndian>(v.spacing.1)?;
    f.write_f32::<LittleEndian>(v.spacing.2)?;
    for &x in &v.data {
        f.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let mut f = BufReader::new(File::open(path)?);
    read_volume_from(&mut f)
}

pub fn read_volume_from(f: &mut impl Read) -> Result<Volume> {
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != VUDA_MAGIC {
        return Err(CoreError::Data(format!("bad magic {:?}, expected VUDA", magic)));
    }
    let version = f.read_u16::<LittleEndian>()?;
    if version != VUDA_VERSION {
        return Err(CoreError::Data(format!("unsupported vuda version {}", version)));
    }
    let channels = f.read_u16::<LittleEndian>()? as usize;
    let d = f.read_u32::<LittleEndian>()? as usize;
    let h = f.read_u32::<LittleEndian>()? as usize;
    let w = f.read_u32::<LittleEndian>()? as usize;
    let sz = f.read_f32::<LittleEndian>()?;
    let sy = f.read_f32::<LittleEndian>()?;
    let sx = f.read_f32::<LittleEndian>()?;
    let n = channels * d * h * w;
    let mut data = vec![0.0f32; n];
    for x in data.iter_mut() {
        *x = f.read_f32::<LittleEndian>()?;
    }
    Volume::new(channels, (d, h, w), (sz, sy, sx), data)
}
