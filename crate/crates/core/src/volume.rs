//! Geometry-aware 3D volume container.
//!
//! A [`Volume`] couples a scalar grid with its physical placement: per-axis
//! spacing in mm and the world position of the *center* of voxel (0,0,0).
//! Data is stored x-fastest (`index = i + nx*(j + ny*k)`), matching the
//! NIfTI on-disk layout. Axis order is (x, y, z) everywhere.
//!
//! All operations return new volumes; values are immutable after
//! construction and safe to share across workers.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Interpolation mode for resampling and cropping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Linear,
    Nearest,
}

/// What the scalar values of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    /// Intensity in arbitrary HU-like units.
    Image,
    /// Non-negative integer class labels.
    Label,
    /// Values in [0, 1].
    Probability,
}

/// Grid geometry: extents, spacing and world placement, without data.
///
/// The origin is the world position of the center of voxel (0,0,0); the
/// physical extent of the grid therefore runs from `origin - spacing/2`
/// to `origin + (dims - 1/2) * spacing` on each axis.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if dims[a] < 1 {
                return Err(Error::DegenerateGeometry(format!(
                    "grid extent on axis {a} must be >= 1, got {}",
                    dims[a]
                )));
            }
            if !(spacing[a] > 0.0) || !spacing[a].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "spacing on axis {a} must be positive and finite, got {}",
                    spacing[a]
                )));
            }
            if !origin[a].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "origin on axis {a} must be finite"
                )));
            }
        }
        Ok(Grid {
            dims,
            spacing,
            origin,
        })
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// World position of the center of voxel `idx` (continuous indices allowed).
    pub fn voxel_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + idx[0] * self.spacing[0],
            self.origin[1] + idx[1] * self.spacing[1],
            self.origin[2] + idx[2] * self.spacing[2],
        ]
    }

    /// Continuous voxel index of world point `p`. Out-of-grid points are
    /// allowed; use [`Grid::contains_world`] to test containment.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical extent as (lower corner, upper corner) in world mm.
    pub fn world_extent(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.origin[a] - 0.5 * self.spacing[a];
            hi[a] = lo[a] + self.dims[a] as f64 * self.spacing[a];
        }
        (lo, hi)
    }

    /// Whether the world point lies inside the grid's physical extent
    /// (half-open: lower edge inclusive, upper edge exclusive).
    pub fn contains_world(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = self.world_extent();
        (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a])
    }
}

/// An axis-aligned crop region in world coordinates with a target spacing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoiBox {
    pub lower_corner: [f64; 3],
    pub upper_corner: [f64; 3],
    pub target_spacing: [f64; 3],
}

impl RoiBox {
    pub fn new(
        lower_corner: [f64; 3],
        upper_corner: [f64; 3],
        target_spacing: [f64; 3],
    ) -> Result<Self> {
        for a in 0..3 {
            if !(lower_corner[a] < upper_corner[a]) {
                return Err(Error::InvalidArgument(format!(
                    "roi lower corner must be < upper corner on axis {a}: {} vs {}",
                    lower_corner[a], upper_corner[a]
                )));
            }
            if !(target_spacing[a] > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "roi target spacing must be positive on axis {a}, got {}",
                    target_spacing[a]
                )));
            }
        }
        Ok(RoiBox {
            lower_corner,
            upper_corner,
            target_spacing,
        })
    }

    /// Box centered at `center` with the given half extent per axis.
    pub fn centered(center: [f64; 3], half_extent: [f64; 3], spacing: [f64; 3]) -> Result<Self> {
        let lower = [
            center[0] - half_extent[0],
            center[1] - half_extent[1],
            center[2] - half_extent[2],
        ];
        let upper = [
            center[0] + half_extent[0],
            center[1] + half_extent[1],
            center[2] + half_extent[2],
        ];
        RoiBox::new(lower, upper, spacing)
    }

    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.upper_corner[0] - self.lower_corner[0],
            self.upper_corner[1] - self.lower_corner[1],
            self.upper_corner[2] - self.lower_corner[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lower_corner[a] && p[a] < self.upper_corner[a])
    }

    /// Intersect with a grid's physical extent; `None` when disjoint.
    pub fn clipped_to(&self, grid: &Grid) -> Option<RoiBox> {
        let (lo, hi) = grid.world_extent();
        let mut lower = self.lower_corner;
        let mut upper = self.upper_corner;
        for a in 0..3 {
            lower[a] = lower[a].max(lo[a]);
            upper[a] = upper[a].min(hi[a]);
            if !(lower[a] < upper[a]) {
                return None;
            }
        }
        Some(RoiBox {
            lower_corner: lower,
            upper_corner: upper,
            target_spacing: self.target_spacing,
        })
    }
}

/// A 3D scalar grid with physical spacing and origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    kind: VolumeKind,
    data: Vec<f64>,
}

impl Volume {
    /// Build a volume, validating the per-kind value invariants.
    pub fn new(grid: Grid, kind: VolumeKind, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.num_voxels() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match grid voxel count {}",
                data.len(),
                grid.num_voxels()
            )));
        }
        match kind {
            VolumeKind::Image => {
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(
                        "image volumes must contain only finite values".into(),
                    ));
                }
            }
            VolumeKind::Label => {
                if data
                    .iter()
                    .any(|v| !v.is_finite() || *v < 0.0 || v.fract() != 0.0)
                {
                    return Err(Error::InvalidArgument(
                        "label volumes must contain only non-negative integers".into(),
                    ));
                }
            }
            VolumeKind::Probability => {
                if data.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
                    return Err(Error::InvalidArgument(
                        "probability volumes must lie in [0, 1]".into(),
                    ));
                }
            }
        }
        Ok(Volume { grid, kind, data })
    }

    /// Constant-filled volume.
    pub fn filled(grid: Grid, kind: VolumeKind, value: f64) -> Result<Self> {
        let n = grid.num_voxels();
        Volume::new(grid, kind, vec![value; n])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn voxel(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        self.grid.world_to_voxel(p)
    }

    pub fn voxel_to_world(&self, idx: [f64; 3]) -> [f64; 3] {
        self.grid.voxel_to_world(idx)
    }

    /// Sample at a continuous voxel index with edge-clamped trilinear
    /// interpolation.
    pub fn sample_linear(&self, idx: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.grid.dims;
        let cx = idx[0].clamp(0.0, (nx - 1) as f64);
        let cy = idx[1].clamp(0.0, (ny - 1) as f64);
        let cz = idx[2].clamp(0.0, (nz - 1) as f64);

        let x0 = cx.floor() as usize;
        let y0 = cy.floor() as usize;
        let z0 = cz.floor() as usize;
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let z1 = (z0 + 1).min(nz - 1);

        let fx = cx - x0 as f64;
        let fy = cy - y0 as f64;
        let fz = cz - z0 as f64;

        let at = |i: usize, j: usize, k: usize| self.data[self.grid.index(i, j, k)];

        let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
        let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
        let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
        let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;

        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;

        c0 * (1.0 - fz) + c1 * fz
    }

    /// Sample at a continuous voxel index by nearest voxel (round half away
    /// from zero), clamped to the grid.
    pub fn sample_nearest(&self, idx: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.grid.dims;
        let i = (idx[0].round().max(0.0) as usize).min(nx - 1);
        let j = (idx[1].round().max(0.0) as usize).min(ny - 1);
        let k = (idx[2].round().max(0.0) as usize).min(nz - 1);
        self.data[self.grid.index(i, j, k)]
    }

    fn sample(&self, idx: [f64; 3], mode: Interp) -> f64 {
        match mode {
            Interp::Linear => self.sample_linear(idx),
            Interp::Nearest => self.sample_nearest(idx),
        }
    }

    fn check_mode(&self, mode: Interp) -> Result<()> {
        if self.kind == VolumeKind::Label && mode == Interp::Linear {
            return Err(Error::InvalidArgument(
                "label volumes must be resampled with nearest mode; \
                 linear interpolation of labels is forbidden"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Resample to `target_spacing`, preserving the world extent.
    ///
    /// The output has `ceil(extent / target_spacing)` voxels per axis, so its
    /// extent may exceed the input's by less than one voxel; its origin is
    /// adjusted so world coordinates are preserved. Samples that fall within
    /// the half-voxel border are edge-clamped.
    pub fn resample(&self, target_spacing: [f64; 3], mode: Interp) -> Result<Volume> {
        for a in 0..3 {
            if !(target_spacing[a] > 0.0) || !target_spacing[a].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "target spacing must be positive on axis {a}, got {}",
                    target_spacing[a]
                )));
            }
        }
        self.check_mode(mode)?;
        if target_spacing == self.grid.spacing {
            return Ok(self.clone());
        }

        let mut dims = [0usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            let extent = self.grid.dims[a] as f64 * self.grid.spacing[a];
            dims[a] = (extent / target_spacing[a]).ceil() as usize;
            if dims[a] == 0 {
                return Err(Error::DegenerateGeometry(format!(
                    "resampling produced an empty grid on axis {a}"
                )));
            }
            let lower = self.grid.origin[a] - 0.5 * self.grid.spacing[a];
            origin[a] = lower + 0.5 * target_spacing[a];
        }
        let grid = Grid::new(dims, target_spacing, origin)?;
        let mut data = vec![0.0; grid.num_voxels()];
        let slab = dims[0] * dims[1];
        data.par_chunks_mut(slab).enumerate().for_each(|(k, zs)| {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                    let idx = self.grid.world_to_voxel(p);
                    zs[j * dims[0] + i] = self.sample(idx, mode);
                }
            }
        });
        Volume::new(grid, self.kind, data)
    }

    /// Crop the region `roi` out of this volume at `roi.target_spacing`.
    ///
    /// Regions of the roi outside the volume are filled with 0. The crop's
    /// origin records its world placement, so cropped sub-volumes can be
    /// pasted back without extra bookkeeping.
    pub fn crop(&self, roi: &RoiBox, mode: Interp) -> Result<Volume> {
        self.check_mode(mode)?;
        if roi.clipped_to(&self.grid).is_none() {
            return Err(Error::EmptyRoi(format!(
                "roi [{:?}..{:?}] does not intersect the volume extent",
                roi.lower_corner, roi.upper_corner
            )));
        }
        let extent = roi.extent_mm();
        let mut dims = [0usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            dims[a] = (extent[a] / roi.target_spacing[a]).ceil() as usize;
            if dims[a] == 0 {
                return Err(Error::DegenerateGeometry(format!(
                    "crop produced an empty grid on axis {a}"
                )));
            }
            origin[a] = roi.lower_corner[a] + 0.5 * roi.target_spacing[a];
        }
        let grid = Grid::new(dims, roi.target_spacing, origin)?;
        let mut data = vec![0.0; grid.num_voxels()];
        let slab = dims[0] * dims[1];
        data.par_chunks_mut(slab).enumerate().for_each(|(k, zs)| {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                    if self.grid.contains_world(p) {
                        let idx = self.grid.world_to_voxel(p);
                        zs[j * dims[0] + i] = self.sample(idx, mode);
                    }
                }
            }
        });
        Volume::new(grid, self.kind, data)
    }

    /// Place this sub-volume onto `reference`'s grid, zero elsewhere.
    ///
    /// Reference voxels whose centers fall inside the sub-volume's extent
    /// take its values: nearest-voxel lookup for labels, linear for images
    /// and probabilities. All other voxels are 0.
    pub fn paste_into_reference(&self, reference: &Volume) -> Result<Volume> {
        let ref_grid = reference.grid().clone();
        let mode = match self.kind {
            VolumeKind::Label => Interp::Nearest,
            _ => Interp::Linear,
        };
        let mut data = vec![0.0; ref_grid.num_voxels()];
        let [nx, ny, _nz] = ref_grid.dims;
        data.par_chunks_mut(nx * ny).enumerate().for_each(|(k, zs)| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = ref_grid.voxel_to_world([i as f64, j as f64, k as f64]);
                    if self.grid.contains_world(p) {
                        let idx = self.grid.world_to_voxel(p);
                        zs[j * nx + i] = self.sample(idx, mode);
                    }
                }
            }
        });
        Volume::new(ref_grid, self.kind, data)
    }

    /// Voxel indices (i, j, k) of all voxels with value > 0.
    pub fn foreground_indices(&self) -> Vec<[usize; 3]> {
        let [nx, ny, nz] = self.grid.dims;
        let mut out = Vec::new();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if self.data[self.grid.index(i, j, k)] > 0.0 {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }
}

/// Per-class probability maps sharing one grid (channel-major storage).
#[derive(Debug, Clone)]
pub struct ProbVolume {
    grid: Grid,
    num_classes: usize,
    data: Vec<f64>,
}

impl ProbVolume {
    pub fn new(grid: Grid, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "probability volumes need >= 2 classes, got {num_classes}"
            )));
        }
        if data.len() != num_classes * grid.num_voxels() {
            return Err(Error::InvalidArgument(format!(
                "probability data length {} != classes {} x voxels {}",
                data.len(),
                num_classes,
                grid.num_voxels()
            )));
        }
        Ok(ProbVolume {
            grid,
            num_classes,
            data,
        })
    }

    pub fn zeros(grid: Grid, num_classes: usize) -> Result<Self> {
        let n = grid.num_voxels() * num_classes;
        ProbVolume::new(grid, num_classes, vec![0.0; n])
    }

    /// One-hot probabilities from a label volume.
    pub fn one_hot(labels: &Volume, num_classes: usize) -> Result<Self> {
        if labels.kind() != VolumeKind::Label {
            return Err(Error::InvalidArgument(
                "one-hot encoding requires a label volume".into(),
            ));
        }
        let n = labels.grid().num_voxels();
        let mut data = vec![0.0; n * num_classes];
        for (vox, &l) in labels.data().iter().enumerate() {
            let c = l as usize;
            if c >= num_classes {
                return Err(Error::InvalidTarget(format!(
                    "label {c} out of range for {num_classes} classes"
                )));
            }
            data[c * n + vox] = 1.0;
        }
        ProbVolume::new(labels.grid().clone(), num_classes, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Probabilities of one class as a slice over the grid.
    pub fn class_slice(&self, c: usize) -> &[f64] {
        let n = self.grid.num_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, vox: usize) -> f64 {
        self.data[c * self.grid.num_voxels() + vox]
    }

    /// Per-voxel argmax as a label volume.
    pub fn argmax_labels(&self) -> Result<Volume> {
        let n = self.grid.num_voxels();
        let mut labels = vec![0.0; n];
        for v in 0..n {
            let mut best_c = 0usize;
            let mut best_p = self.data[v];
            for c in 1..self.num_classes {
                let p = self.data[c * n + v];
                if p > best_p {
                    best_p = p;
                    best_c = c;
                }
            }
            labels[v] = best_c as f64;
        }
        Volume::new(self.grid.clone(), VolumeKind::Label, labels)
    }
}
