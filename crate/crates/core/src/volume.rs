use crate::error::{Error, Result};
use crate::geom::{GridSpec, Stencil};

/// Dense voxel grid of fixed-width channel vectors.
///
/// Storage is voxel-major with channels innermost: voxel `l` (see
/// [`GridSpec::linear_index`]) occupies `data[l * channels..(l + 1) * channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub grid: GridSpec,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl VoxelVolume {
    pub fn filled(grid: GridSpec, channels: usize, value: f64) -> Self {
        assert!(channels > 0, "volume needs at least one channel");
        Self {
            grid,
            channels,
            data: vec![value; grid.n_voxels() * channels],
        }
    }

    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        Self::filled(grid, channels, 0.0)
    }

    pub fn from_data(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != grid.n_voxels() * channels {
            return Err(Error::shape(
                "VoxelVolume::from_data",
                format!(
                    "{} values for {} voxels x {channels} channels",
                    data.len(),
                    grid.n_voxels()
                ),
            ));
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.grid.n_voxels()
    }

    pub fn at(&self, lin: usize) -> &[f64] {
        &self.data[lin * self.channels..(lin + 1) * self.channels]
    }

    pub fn at_mut(&mut self, lin: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[lin * c..(lin + 1) * c]
    }

    pub fn voxel(&self, idx: [usize; 3]) -> &[f64] {
        self.at(self.grid.linear_index(idx))
    }

    pub fn voxel_mut(&mut self, idx: [usize; 3]) -> &mut [f64] {
        let lin = self.grid.linear_index(idx);
        self.at_mut(lin)
    }

    /// Single-channel volumes as a flat per-voxel slice.
    pub fn scalars(&self) -> &[f64] {
        debug_assert_eq!(self.channels, 1);
        &self.data
    }

    pub fn apply_stencil(&self, st: &Stencil) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        for (&lin, &w) in st.index.iter().zip(st.weight.iter()) {
            for (o, v) in out.iter_mut().zip(self.at(lin)) {
                *o += w * v;
            }
        }
        out
    }

    /// Channel-first copy (`[C, X, Y, Z]`), the layout used by 3D convolutions.
    pub fn to_channel_first(&self) -> Vec<f64> {
        let n = self.n_voxels();
        let mut out = vec![0.0; n * self.channels];
        for l in 0..n {
            for c in 0..self.channels {
                out[c * n + l] = self.data[l * self.channels + c];
            }
        }
        out
    }

    pub fn from_channel_first(grid: GridSpec, channels: usize, cf: &[f64]) -> Result<Self> {
        let n = grid.n_voxels();
        if cf.len() != n * channels {
            return Err(Error::shape("VoxelVolume::from_channel_first", "length mismatch"));
        }
        let mut data = vec![0.0; n * channels];
        for c in 0..channels {
            for l in 0..n {
                data[l * channels + c] = cf[c * n + l];
            }
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    /// One channel as its own single-channel volume.
    pub fn channel(&self, c: usize) -> VoxelVolume {
        let data = (0..self.n_voxels()).map(|l| self.data[l * self.channels + c]).collect();
        VoxelVolume {
            grid: self.grid,
            channels: 1,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> VoxelVolume {
        VoxelVolume {
            grid: self.grid,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_same_grid(&self, other: &VoxelVolume) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::domain("volumes live on different grids"));
        }
        Ok(())
    }
}
