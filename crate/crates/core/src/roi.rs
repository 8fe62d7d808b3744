//! Refinement ROIs, sliding-window inference, and mask merging.
//!
//! The refinement stage works on three kinds of crops from the original
//! image: one global box around all coarse foreground, two thin-bone boxes
//! centered on the paired left/right bony landmarks, and one fixed-extent
//! tooth box centered on the anchor landmark centroid.

use std::path::Path;

use crate::error::{Error, Result};
use crate::landmark::LandmarkSet;
use crate::model::{Tensor4, VoxelModel};
use crate::volume::{ProbVolume, RoiBox, Volume, VolumeKind};

/// The refinement plan derived from coarse outputs; serialized as a
/// provenance sidecar next to every inference result.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RoiPlan {
    pub global: RoiBox,
    /// Centering landmark name and box, in (left, right) order; a side is
    /// missing when its landmark was not detected.
    pub thin_bone: Vec<NamedRoi>,
    pub tooth: Option<RoiBox>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NamedRoi {
    pub landmark: String,
    pub roi: RoiBox,
}

impl RoiPlan {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Configuration(format!("roi plan serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Tight world-space bounding box of all foreground labels, expanded by
/// `margin_mm` per side and clipped to the mask's extent.
pub fn compute_global_roi(
    coarse_mask: &Volume,
    margin_mm: f64,
    target_spacing: [f64; 3],
) -> Result<RoiBox> {
    if coarse_mask.kind() != VolumeKind::Label {
        return Err(Error::InvalidArgument(
            "global roi computation expects a label volume".into(),
        ));
    }
    let grid = coarse_mask.grid();
    let [nx, ny, nz] = grid.dims;
    let mut min_idx = [usize::MAX; 3];
    let mut max_idx = [0usize; 3];
    let mut any = false;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if coarse_mask.voxel(i, j, k) > 0.0 {
                    any = true;
                    let idx = [i, j, k];
                    for a in 0..3 {
                        min_idx[a] = min_idx[a].min(idx[a]);
                        max_idx[a] = max_idx[a].max(idx[a]);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask(
            "coarse mask has no foreground voxels".into(),
        ));
    }
    let (vol_lo, vol_hi) = grid.world_extent();
    let mut lower = [0.0; 3];
    let mut upper = [0.0; 3];
    for a in 0..3 {
        let lo_center = grid.origin[a] + min_idx[a] as f64 * grid.spacing[a];
        let hi_center = grid.origin[a] + max_idx[a] as f64 * grid.spacing[a];
        lower[a] = (lo_center - 0.5 * grid.spacing[a] - margin_mm).max(vol_lo[a]);
        upper[a] = (hi_center + 0.5 * grid.spacing[a] + margin_mm).min(vol_hi[a]);
    }
    RoiBox::new(lower, upper, target_spacing)
}

/// Box centered on one named landmark with the given half extent.
pub fn thin_bone_roi(
    lms: &LandmarkSet,
    name: &str,
    half_extent_mm: [f64; 3],
    target_spacing: [f64; 3],
) -> Result<RoiBox> {
    let lm = lms
        .find(name)
        .filter(|lm| lm.present)
        .ok_or_else(|| Error::MissingLandmark(name.to_string()))?;
    RoiBox::centered(lm.position, half_extent_mm, target_spacing)
}

/// Both thin-bone boxes; a missing landmark skips its side with a warning
/// instead of failing the run.
pub fn compute_thin_bone_rois(
    lms: &LandmarkSet,
    pair: &[String; 2],
    half_extent_mm: [f64; 3],
    target_spacing: [f64; 3],
) -> (Vec<NamedRoi>, Vec<String>) {
    let mut rois = Vec::new();
    let mut warnings = Vec::new();
    for name in pair {
        match thin_bone_roi(lms, name, half_extent_mm, target_spacing) {
            Ok(roi) => rois.push(NamedRoi {
                landmark: name.clone(),
                roi,
            }),
            Err(e) => warnings.push(format!("thin-bone roi for '{name}' skipped: {e}")),
        }
    }
    (rois, warnings)
}

/// Fixed-extent tooth box centered at the centroid of the present anchor
/// landmarks. The extents must equal the tooth detector's training patch
/// extents exactly.
pub fn compute_tooth_roi(
    lms: &LandmarkSet,
    anchor_names: &[String],
    patch_extent_mm: [f64; 3],
    target_spacing: [f64; 3],
) -> Result<RoiBox> {
    let mut centroid = [0.0; 3];
    let mut n = 0usize;
    for name in anchor_names {
        if let Some(lm) = lms.find(name).filter(|lm| lm.present) {
            for a in 0..3 {
                centroid[a] += lm.position[a];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::MissingLandmark(format!(
            "no tooth anchor present (looked for {})",
            anchor_names.join(", ")
        )));
    }
    for c in &mut centroid {
        *c /= n as f64;
    }
    let half = [
        patch_extent_mm[0] / 2.0,
        patch_extent_mm[1] / 2.0,
        patch_extent_mm[2] / 2.0,
    ];
    RoiBox::centered(centroid, half, target_spacing)
}

/// Extract a zero-padded patch starting at voxel `start`.
fn extract_patch(volume: &Volume, start: [usize; 3], extent: [usize; 3]) -> Tensor4 {
    let dims = volume.dims();
    let mut t = Tensor4::zeros(1, extent);
    let copy = [
        extent[0].min(dims[0].saturating_sub(start[0])),
        extent[1].min(dims[1].saturating_sub(start[1])),
        extent[2].min(dims[2].saturating_sub(start[2])),
    ];
    let data = volume.data();
    for z in 0..copy[2] {
        for y in 0..copy[1] {
            let src = (start[2] + z) * dims[1] * dims[0] + (start[1] + y) * dims[0] + start[0];
            let dst = (z * extent[1] + y) * extent[0];
            t.data[dst..dst + copy[0]].copy_from_slice(&data[src..src + copy[0]]);
        }
    }
    t
}

/// Tile start positions along one axis for the given stride, always
/// covering the final voxels.
fn tile_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if patch >= dim {
        return vec![0];
    }
    let mut starts = Vec::new();
    let mut s = 0usize;
    loop {
        starts.push(s.min(dim - patch));
        if s + patch >= dim {
            break;
        }
        s += stride;
    }
    starts.dedup();
    starts
}

/// Center-peaked separable blending weight (never zero, so single-coverage
/// voxels at volume borders stay well defined).
fn triangle_weight(i: usize, n: usize) -> f64 {
    (i.min(n - 1 - i) + 1) as f64
}

/// Patch-based inference over a whole volume.
///
/// The volume is tiled with `overlap_fraction` overlap; per-class scores of
/// overlapping patches are blended with a separable triangular
/// (center-peaked) weight and renormalized so each voxel's class
/// probabilities sum to 1. Every voxel is covered at least once. Patches
/// are evaluated and accumulated in deterministic tile order.
pub fn sliding_window_infer(
    model: &dyn VoxelModel,
    volume: &Volume,
    patch_extent: [usize; 3],
    overlap_fraction: f64,
) -> Result<(ProbVolume, Vec<String>)> {
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::InvalidArgument(format!(
            "overlap fraction must lie in [0, 1), got {overlap_fraction}"
        )));
    }
    for (axis, &e) in patch_extent.iter().enumerate() {
        if e == 0 {
            return Err(Error::Shape {
                axis,
                message: "patch extent must be >= 1".into(),
            });
        }
    }
    let mut warnings = Vec::new();
    let dims = volume.dims();
    if (0..3).any(|a| patch_extent[a] > dims[a]) {
        warnings.push(format!(
            "patch extent {patch_extent:?} exceeds volume dims {dims:?}; \
             running a single zero-padded patch"
        ));
    }
    let classes = model.num_classes();
    let n = volume.grid().num_voxels();
    let mut acc = vec![0.0f64; classes * n];
    let mut wsum = vec![0.0f64; n];

    let stride = |a: usize| -> usize {
        let s = (patch_extent[a] as f64 * (1.0 - overlap_fraction)).round() as usize;
        s.max(1)
    };
    let sx = tile_starts(dims[0], patch_extent[0], stride(0));
    let sy = tile_starts(dims[1], patch_extent[1], stride(1));
    let sz = tile_starts(dims[2], patch_extent[2], stride(2));

    for &z0 in &sz {
        for &y0 in &sy {
            for &x0 in &sx {
                let patch = extract_patch(volume, [x0, y0, z0], patch_extent);
                let probs = model.predict_probs(&patch)?;
                if probs.channels != classes || probs.dims != patch_extent {
                    return Err(Error::Configuration(format!(
                        "model returned {}x{:?}, expected {classes}x{patch_extent:?}",
                        probs.channels, probs.dims
                    )));
                }
                let valid = [
                    patch_extent[0].min(dims[0] - x0),
                    patch_extent[1].min(dims[1] - y0),
                    patch_extent[2].min(dims[2] - z0),
                ];
                let pn = probs.spatial_len();
                for lz in 0..valid[2] {
                    let wz = triangle_weight(lz, patch_extent[2]);
                    for ly in 0..valid[1] {
                        let wy = triangle_weight(ly, patch_extent[1]);
                        let out_row = (z0 + lz) * dims[1] * dims[0] + (y0 + ly) * dims[0] + x0;
                        let in_row = (lz * patch_extent[1] + ly) * patch_extent[0];
                        for lx in 0..valid[0] {
                            let w = wz * wy * triangle_weight(lx, patch_extent[0]);
                            let ov = out_row + lx;
                            wsum[ov] += w;
                            for c in 0..classes {
                                acc[c * n + ov] += w * probs.data[c * pn + in_row + lx];
                            }
                        }
                    }
                }
            }
        }
    }

    for v in 0..n {
        let w = wsum[v];
        debug_assert!(w > 0.0, "every voxel must be covered at least once");
        let mut total = 0.0;
        for c in 0..classes {
            acc[c * n + v] /= w;
            total += acc[c * n + v];
        }
        if total > 0.0 {
            for c in 0..classes {
                acc[c * n + v] = (acc[c * n + v] / total).clamp(0.0, 1.0);
            }
        }
    }
    Ok((
        ProbVolume::new(volume.grid().clone(), classes, acc)?,
        warnings,
    ))
}

/// Merge refined label volumes onto the reference grid, zero elsewhere.
///
/// Precedence per reference voxel: thin-bone volumes (in list order), then
/// the global refined volume, then 0. The coarse mask is used only as a
/// fallback layer when the global refinement is unavailable (degraded
/// runs).
pub fn merge_refined_masks(
    coarse_upsampled: Option<&Volume>,
    global_refined: Option<&Volume>,
    thin_refined: &[Volume],
    reference: &Volume,
) -> Result<Volume> {
    let grid = reference.grid().clone();
    let [nx, ny, nz] = grid.dims;
    let mut data = vec![0.0f64; grid.num_voxels()];
    let lookup = |v: &Volume, p: [f64; 3]| -> Option<f64> {
        if v.grid().contains_world(p) {
            Some(v.sample_nearest(v.grid().world_to_voxel(p)))
        } else {
            None
        }
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                let mut value = None;
                for t in thin_refined {
                    if let Some(v) = lookup(t, p) {
                        value = Some(v);
                        break;
                    }
                }
                if value.is_none() {
                    if let Some(g) = global_refined {
                        value = lookup(g, p);
                    } else if let Some(c) = coarse_upsampled {
                        value = lookup(c, p);
                    }
                }
                data[grid.index(i, j, k)] = value.unwrap_or(0.0);
            }
        }
    }
    Volume::new(grid, VolumeKind::Label, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmark::{Landmark, LandmarkGroup};
    use crate::volume::Grid;

    struct ConstModel {
        probs: Vec<f64>,
    }

    impl VoxelModel for ConstModel {
        fn num_classes(&self) -> usize {
            self.probs.len()
        }
        fn predict_probs(&self, input: &Tensor4) -> Result<Tensor4> {
            let n = input.spatial_len();
            let mut t = Tensor4::zeros(self.probs.len(), input.dims);
            for (c, &p) in self.probs.iter().enumerate() {
                t.channel_mut(c).fill(p);
            }
            let _ = n;
            Ok(t)
        }
    }

    /// Echoes patch-local coordinates into the class-1 probability.
    struct CoordEchoModel;

    impl VoxelModel for CoordEchoModel {
        fn num_classes(&self) -> usize {
            2
        }
        fn predict_probs(&self, input: &Tensor4) -> Result<Tensor4> {
            let [px, py, pz] = input.dims;
            let mut t = Tensor4::zeros(2, input.dims);
            let n = t.spatial_len();
            for z in 0..pz {
                for y in 0..py {
                    for x in 0..px {
                        let p1 = (x + y + z) as f64 / ((px + py + pz) as f64);
                        let v = (z * py + y) * px + x;
                        t.data[v] = 1.0 - p1;
                        t.data[n + v] = p1;
                    }
                }
            }
            Ok(t)
        }
    }

    fn image(dims: [usize; 3]) -> Volume {
        let grid = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
        let data = (0..grid.num_voxels()).map(|i| (i % 7) as f64).collect();
        Volume::new(grid, VolumeKind::Image, data).unwrap()
    }

    fn label_volume(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Volume {
        let grid = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
        let mut data = vec![0.0; grid.num_voxels()];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data[grid.index(i, j, k)] = f(i, j, k);
                }
            }
        }
        Volume::new(grid, VolumeKind::Label, data).unwrap()
    }

    #[test]
    fn global_roi_single_voxel_and_full_grid() {
        let single = label_volume([8, 8, 8], |i, j, k| ((i, j, k) == (3, 4, 5)) as u8 as f64);
        let roi = compute_global_roi(&single, 0.0, [0.4; 3]).unwrap();
        assert_eq!(roi.lower_corner, [2.5, 3.5, 4.5]);
        assert_eq!(roi.upper_corner, [3.5, 4.5, 5.5]);

        let full = label_volume([8, 8, 8], |_, _, _| 1.0);
        let roi = compute_global_roi(&full, 25.0, [0.4; 3]).unwrap();
        let (lo, hi) = full.grid().world_extent();
        assert_eq!(roi.lower_corner, lo);
        assert_eq!(roi.upper_corner, hi);
    }

    #[test]
    fn global_roi_empty_mask_errors() {
        let empty = label_volume([4, 4, 4], |_, _, _| 0.0);
        assert!(matches!(
            compute_global_roi(&empty, 5.0, [0.4; 3]),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn global_roi_matches_brute_force_scan_and_is_monotone() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let mut blob = vec![false; 10 * 10 * 10];
        for _ in 0..30 {
            let i = rng.gen_range(2..8);
            let j = rng.gen_range(1..9);
            let k = rng.gen_range(0..10);
            blob[(k * 10 + j) * 10 + i] = true;
        }
        let v = label_volume([10, 10, 10], |i, j, k| blob[(k * 10 + j) * 10 + i] as u8 as f64);
        let roi = compute_global_roi(&v, 1.5, [0.5; 3]).unwrap();

        // Brute-force min/max scan over foreground world coordinates.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for k in 0..10 {
            for j in 0..10 {
                for i in 0..10 {
                    if v.voxel(i, j, k) > 0.0 {
                        let p = v.grid().voxel_to_world([i as f64, j as f64, k as f64]);
                        for a in 0..3 {
                            lo[a] = lo[a].min(p[a] - 0.5 - 1.5);
                            hi[a] = hi[a].max(p[a] + 0.5 + 1.5);
                        }
                    }
                }
            }
        }
        let (vlo, vhi) = v.grid().world_extent();
        for a in 0..3 {
            assert!((roi.lower_corner[a] - lo[a].max(vlo[a])).abs() < 1e-12);
            assert!((roi.upper_corner[a] - hi[a].min(vhi[a])).abs() < 1e-12);
        }

        // Monotonicity: adding foreground never shrinks the box.
        let mut more = blob.clone();
        more[(5 * 10 + 9) * 10 + 9] = true;
        let v2 = label_volume([10, 10, 10], |i, j, k| more[(k * 10 + j) * 10 + i] as u8 as f64);
        let roi2 = compute_global_roi(&v2, 1.5, [0.5; 3]).unwrap();
        for a in 0..3 {
            assert!(roi2.lower_corner[a] <= roi.lower_corner[a] + 1e-12);
            assert!(roi2.upper_corner[a] >= roi.upper_corner[a] - 1e-12);
        }
    }

    #[test]
    fn thin_bone_rois_center_on_landmarks_with_symmetric_extents() {
        let lms = LandmarkSet::new(vec![
            Landmark {
                name: "left".into(),
                group: LandmarkGroup::Bone,
                position: [30.0, 40.0, 50.0],
                present: true,
            },
            Landmark {
                name: "right".into(),
                group: LandmarkGroup::Bone,
                position: [-30.0, 40.0, 50.0],
                present: false,
            },
        ])
        .unwrap();
        let h = [15.0; 3];
        let roi = thin_bone_roi(&lms, "left", h, [0.4; 3]).unwrap();
        assert_eq!(roi.lower_corner, [15.0, 25.0, 35.0]);
        assert_eq!(roi.upper_corner, [45.0, 55.0, 65.0]);

        assert!(matches!(
            thin_bone_roi(&lms, "right", h, [0.4; 3]),
            Err(Error::MissingLandmark(name)) if name == "right"
        ));

        let (rois, warnings) = compute_thin_bone_rois(
            &lms,
            &["left".to_string(), "right".to_string()],
            h,
            [0.4; 3],
        );
        assert_eq!(rois.len(), 1);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("right"));
        // Extents are identical by construction for both sides.
        let e = rois[0].roi.extent_mm();
        assert_eq!(e, [30.0; 3]);
    }

    #[test]
    fn tooth_roi_centers_on_anchor_centroid_with_exact_extents() {
        let mk = |name: &str, x: f64, present: bool| Landmark {
            name: name.into(),
            group: LandmarkGroup::Bone,
            position: [x, 10.0, 5.0],
            present,
        };
        let lms = LandmarkSet::new(vec![mk("a", 10.0, true), mk("b", 20.0, true)]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let roi = compute_tooth_roi(&lms, &names, [25.6; 3], [0.8; 3]).unwrap();
        // Two anchors: centered at their midpoint.
        assert_eq!(roi.lower_corner[0], 15.0 - 12.8);
        assert_eq!(roi.upper_corner[0], 15.0 + 12.8);
        assert_eq!(roi.extent_mm(), [25.6; 3]);

        // Single anchor: centered on it.
        let solo = LandmarkSet::new(vec![mk("a", 10.0, true), mk("b", 20.0, false)]).unwrap();
        let roi = compute_tooth_roi(&solo, &names, [25.6; 3], [0.8; 3]).unwrap();
        assert!((roi.lower_corner[0] - (10.0 - 12.8)).abs() < 1e-12);

        let none = LandmarkSet::new(vec![mk("a", 10.0, false), mk("b", 20.0, false)]).unwrap();
        assert!(matches!(
            compute_tooth_roi(&none, &names, [25.6; 3], [0.8; 3]),
            Err(Error::MissingLandmark(_))
        ));
    }

    #[test]
    fn constant_model_stitching_is_overlap_independent() {
        let v = image([20, 16, 12]);
        let model = ConstModel {
            probs: vec![0.2, 0.5, 0.3],
        };
        for overlap in [0.0, 0.25, 0.5] {
            let (probs, warnings) = sliding_window_infer(&model, &v, [8, 8, 8], overlap).unwrap();
            assert!(warnings.is_empty());
            let n = probs.grid().num_voxels();
            for vix in 0..n {
                assert!((probs.at(0, vix) - 0.2).abs() < 1e-9, "overlap {overlap}");
                assert!((probs.at(1, vix) - 0.5).abs() < 1e-9);
                assert!((probs.at(2, vix) - 0.3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_overlap_matches_tile_index_oracle() {
        let v = image([16, 8, 8]);
        let (probs, _) = sliding_window_infer(&CoordEchoModel, &v, [4, 4, 4], 0.0).unwrap();
        let n = v.grid().num_voxels();
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..16 {
                    // Oracle: the unique tile containing this voxel.
                    let (lx, ly, lz) = (i % 4, j % 4, k % 4);
                    let expect = (lx + ly + lz) as f64 / 12.0;
                    let vix = (k * 8 + j) * 16 + i;
                    assert!(
                        (probs.data()[n + vix] - expect).abs() < 1e-9,
                        "voxel ({i},{j},{k})"
                    );
                }
            }
        }
    }

    #[test]
    fn probabilities_normalize_and_small_volume_pads_with_warning() {
        let v = image([6, 6, 6]);
        let (probs, warnings) =
            sliding_window_infer(&CoordEchoModel, &v, [8, 8, 8], 0.5).unwrap();
        assert_eq!(warnings.len(), 1);
        let n = v.grid().num_voxels();
        for vix in 0..n {
            let s: f64 = (0..2).map(|c| probs.at(c, vix)).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }

        let (probs2, _) = sliding_window_infer(&CoordEchoModel, &image([9, 9, 9]), [4, 4, 4], 0.25)
            .unwrap();
        let n2 = 9 * 9 * 9;
        for vix in 0..n2 {
            let s: f64 = (0..2).map(|c| probs2.at(c, vix)).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn merge_precedence_thin_over_global_and_zero_padding() {
        let reference = image([12, 12, 12]);
        // Global refined: label 1 everywhere on a sub-grid.
        let g_grid = Grid::new([8, 8, 8], [1.0; 3], [2.0, 2.0, 2.0]).unwrap();
        let global = Volume::filled(g_grid, VolumeKind::Label, 1.0).unwrap();
        // Thin box inside the global box with conflicting label 2.
        let t_grid = Grid::new([3, 3, 3], [1.0; 3], [4.0, 4.0, 4.0]).unwrap();
        let thin = Volume::filled(t_grid, VolumeKind::Label, 2.0).unwrap();

        let merged =
            merge_refined_masks(None, Some(&global), std::slice::from_ref(&thin), &reference)
                .unwrap();
        assert_eq!(merged.grid(), reference.grid());
        for k in 0..12 {
            for j in 0..12 {
                for i in 0..12 {
                    let p = [i as f64, j as f64, k as f64];
                    let expect = if thin.grid().contains_world(p) {
                        2.0
                    } else if global.grid().contains_world(p) {
                        1.0
                    } else {
                        0.0
                    };
                    assert_eq!(merged.voxel(i, j, k), expect, "at ({i},{j},{k})");
                }
            }
        }

        // No thin ROIs: merge equals the global paste (zero-padded).
        let merged2 = merge_refined_masks(None, Some(&global), &[], &reference).unwrap();
        let pasted = global.paste_into_reference(&reference).unwrap();
        assert_eq!(merged2.data(), pasted.data());
    }

    #[test]
    fn merge_random_geometry_matches_containment_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for trial in 0..50 {
            let reference = image([10, 10, 10]);
            let rand_grid = |rng: &mut rand_chacha::ChaCha8Rng| {
                let dims = [rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..6)];
                let spacing = [rng.gen_range(0.5..1.6); 3];
                let origin = [
                    rng.gen_range(-2.0..8.0),
                    rng.gen_range(-2.0..8.0),
                    rng.gen_range(-2.0..8.0),
                ];
                Grid::new(dims, spacing, origin).unwrap()
            };
            let global = Volume::filled(rand_grid(&mut rng), VolumeKind::Label, 1.0).unwrap();
            let thin_a = Volume::filled(rand_grid(&mut rng), VolumeKind::Label, 2.0).unwrap();
            let thin_b = Volume::filled(rand_grid(&mut rng), VolumeKind::Label, 2.0).unwrap();
            let thins = vec![thin_a, thin_b];
            let merged =
                merge_refined_masks(None, Some(&global), &thins, &reference).unwrap();
            for k in 0..10 {
                for j in 0..10 {
                    for i in 0..10 {
                        let p = [i as f64, j as f64, k as f64];
                        // Containment-test oracle for the source assignment.
                        let expect = if thins.iter().any(|t| t.grid().contains_world(p)) {
                            2.0
                        } else if global.grid().contains_world(p) {
                            1.0
                        } else {
                            0.0
                        };
                        assert_eq!(merged.voxel(i, j, k), expect, "trial {trial} at ({i},{j},{k})");
                    }
                }
            }
        }
    }
}
