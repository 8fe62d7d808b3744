//! Minimal channel-major 3D tensor used by the voxel classifier.
//!
//! Layout: `data[((c * nz + z) * ny + y) * nx + x]`, i.e. each channel is a
//! contiguous x-fastest volume, matching [`crate::volume::Volume`] storage
//! so channel copies are plain memcpys.

use crate::error::{Error, Result};
use rayon::prelude::*;

use crate::volume::{Grid, ProbVolume, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor4 {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_data(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * dims[0] * dims[1] * dims[2] {
            return Err(Error::InvalidArgument(format!(
                "tensor data length {} != {} channels x {:?}",
                data.len(),
                channels,
                dims
            )));
        }
        Ok(Tensor4 {
            channels,
            dims,
            data,
        })
    }

    /// Voxels per channel.
    pub fn spatial_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Single-channel tensor sharing a volume's voxel data.
    pub fn from_volume(v: &Volume) -> Self {
        Tensor4 {
            channels: 1,
            dims: v.dims(),
            data: v.data().to_vec(),
        }
    }

    /// Interpret the channels as per-class probabilities on `grid`.
    pub fn into_prob_volume(self, grid: Grid) -> Result<ProbVolume> {
        if grid.dims != self.dims {
            return Err(Error::GridMismatch(format!(
                "tensor dims {:?} != grid dims {:?}",
                self.dims, grid.dims
            )));
        }
        // Clamp tiny numeric excursions outside [0, 1].
        let data = self
            .data
            .into_iter()
            .map(|p| p.clamp(0.0, 1.0))
            .collect();
        ProbVolume::new(grid, self.channels, data)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        if a.dims != b.dims {
            return Err(Error::GridMismatch(format!(
                "concat dims mismatch: {:?} vs {:?}",
                a.dims, b.dims
            )));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor4 {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        })
    }

    /// Split channels at `first` (inverse of [`Tensor4::concat_channels`]).
    pub fn split_channels(&self, first: usize) -> (Tensor4, Tensor4) {
        let n = self.spatial_len();
        let a = Tensor4 {
            channels: first,
            dims: self.dims,
            data: self.data[..first * n].to_vec(),
        };
        let b = Tensor4 {
            channels: self.channels - first,
            dims: self.dims,
            data: self.data[first * n..].to_vec(),
        };
        (a, b)
    }

    /// Zero-pad at the high side of each axis to `target` spatial dims.
    pub fn pad_to(&self, target: [usize; 3]) -> Tensor4 {
        if target == self.dims {
            return self.clone();
        }
        let [nx, ny, nz] = self.dims;
        let [tx, ty, tz] = target;
        let mut out = Tensor4::zeros(self.channels, target);
        for c in 0..self.channels {
            for z in 0..nz {
                for y in 0..ny {
                    let src = ((c * nz + z) * ny + y) * nx;
                    let dst = ((c * tz + z) * ty + y) * tx;
                    out.data[dst..dst + nx].copy_from_slice(&self.data[src..src + nx]);
                }
            }
        }
        out
    }

    /// Crop back to `target` spatial dims (low corner anchored).
    pub fn crop_to(&self, target: [usize; 3]) -> Tensor4 {
        if target == self.dims {
            return self.clone();
        }
        let [nx, ny, _nz] = self.dims;
        let [tx, ty, tz] = target;
        let mut out = Tensor4::zeros(self.channels, target);
        for c in 0..self.channels {
            for z in 0..tz {
                for y in 0..ty {
                    let src = ((c * self.dims[2] + z) * ny + y) * nx;
                    let dst = ((c * tz + z) * ty + y) * tx;
                    out.data[dst..dst + tx].copy_from_slice(&self.data[src..src + tx]);
                }
            }
        }
        out
    }

    /// In-place per-voxel softmax across channels.
    pub fn softmax_channels(&mut self) {
        let n = self.spatial_len();
        let c = self.channels;
        // Channel-major layout: run per-voxel reductions as channel-wise
        // passes, each parallel over disjoint voxel ranges.
        let mut max = vec![f64::NEG_INFINITY; n];
        for ch in 0..c {
            let src = &self.data[ch * n..(ch + 1) * n];
            max.par_chunks_mut(1 << 14)
                .zip(src.par_chunks(1 << 14))
                .for_each(|(ms, vs)| {
                    for (m, &v) in ms.iter_mut().zip(vs) {
                        if v > *m {
                            *m = v;
                        }
                    }
                });
        }
        let mut sum = vec![0.0f64; n];
        for ch in 0..c {
            let dst = &mut self.data[ch * n..(ch + 1) * n];
            dst.par_chunks_mut(1 << 14)
                .zip(sum.par_chunks_mut(1 << 14))
                .zip(max.par_chunks(1 << 14))
                .for_each(|((vs, ss), ms)| {
                    for i in 0..vs.len() {
                        let e = (vs[i] - ms[i]).exp();
                        vs[i] = e;
                        ss[i] += e;
                    }
                });
        }
        for ch in 0..c {
            let dst = &mut self.data[ch * n..(ch + 1) * n];
            dst.par_chunks_mut(1 << 14)
                .zip(sum.par_chunks(1 << 14))
                .for_each(|(vs, ss)| {
                    for i in 0..vs.len() {
                        vs[i] /= ss[i];
                    }
                });
        }
    }
}
