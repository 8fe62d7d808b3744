//! Case loading, intensity normalization, flip augmentation, and
//! refinement patch sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::landmark::{Landmark, LandmarkManifest, LandmarkSet};
use crate::model::Tensor4;
use crate::trainer::config::{CaseEntry, DatasetManifest};
use crate::volume::{Grid, Interp, RoiBox, Volume, VolumeKind};

/// A case at its native resolution, as stored on disk.
#[derive(Debug, Clone)]
pub struct NativeCase {
    pub name: String,
    pub image: Volume,
    pub mask: Volume,
    pub landmarks: LandmarkSet,
}

/// Linear intensity rescale: (x - shift) / scale.
pub fn normalize_image(image: &Volume, shift: f64, scale: f64) -> Result<Volume> {
    let data = image.data().iter().map(|&x| (x - shift) / scale).collect();
    Volume::new(image.grid().clone(), VolumeKind::Image, data)
}

pub fn load_case(manifest: &DatasetManifest, entry: &CaseEntry) -> Result<NativeCase> {
    Ok(NativeCase {
        name: entry.name.clone(),
        image: crate::nifti::read_volume(manifest.resolve(&entry.image))?,
        mask: crate::nifti::read_volume(manifest.resolve(&entry.mask))?,
        landmarks: crate::landmark::read_landmarks(manifest.resolve(&entry.landmarks))?,
    })
}

/// Mirror a case along the left-right (x) axis, applying the paired
/// landmark relabeling from the manifest.
pub fn flip_case(case: &NativeCase, manifest: &LandmarkManifest) -> NativeCase {
    let flip_volume = |v: &Volume| -> Volume {
        let [nx, ny, nz] = v.dims();
        let mut data = vec![0.0; v.grid().num_voxels()];
        let src = v.data();
        for k in 0..nz {
            for j in 0..ny {
                let row = (k * ny + j) * nx;
                for i in 0..nx {
                    data[row + i] = src[row + (nx - 1 - i)];
                }
            }
        }
        Volume::new(v.grid().clone(), v.kind(), data).expect("flip preserves validity")
    };
    let grid = case.image.grid();
    let cx = grid.origin[0] + (grid.dims[0] as f64 - 1.0) / 2.0 * grid.spacing[0];
    let renamed = |name: &str| -> String {
        for pair in &manifest.flip_pairs {
            if pair[0] == name {
                return pair[1].clone();
            }
            if pair[1] == name {
                return pair[0].clone();
            }
        }
        name.to_string()
    };
    let mut entries: Vec<Landmark> = case
        .landmarks
        .entries()
        .iter()
        .map(|lm| Landmark {
            name: renamed(&lm.name),
            group: lm.group,
            position: [2.0 * cx - lm.position[0], lm.position[1], lm.position[2]],
            present: lm.present,
        })
        .collect();
    // Restore manifest order so class indices stay aligned.
    entries.sort_by_key(|lm| {
        manifest
            .landmarks
            .iter()
            .position(|e| e.name == lm.name)
            .unwrap_or(usize::MAX)
    });
    NativeCase {
        name: format!("{}#flip", case.name),
        image: flip_volume(&case.image),
        mask: flip_volume(&case.mask),
        landmarks: LandmarkSet::new(entries).expect("flip preserves name uniqueness"),
    }
}

/// One training patch with its world placement.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub input: Tensor4,
    pub target: Vec<u8>,
    pub roi: RoiBox,
    /// The sampled center voxel was foreground.
    pub center_is_foreground: bool,
    /// Set when foreground-biased sampling had to fall back to uniform.
    pub fallback_uniform: bool,
    /// Set when the patch exceeded the volume and was clipped-and-padded.
    pub clipped: bool,
}

/// Draw training patches at the refinement spacing, biased so at least
/// `foreground_bias` of the draws target foreground voxels. Patch centers
/// are clamped so boxes stay inside the volume whenever it is large
/// enough; each patch records its world placement.
pub fn sample_refinement_patches(
    image: &Volume,
    mask: &Volume,
    patch_extent: [usize; 3],
    spacing: [f64; 3],
    count: usize,
    foreground_bias: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatchSample>> {
    if image.grid() != mask.grid() {
        return Err(Error::GridMismatch(
            "patch sampling needs image and mask on one grid".into(),
        ));
    }
    let grid = image.grid().clone();
    let (lo, hi) = grid.world_extent();
    let half = [
        patch_extent[0] as f64 * spacing[0] / 2.0,
        patch_extent[1] as f64 * spacing[1] / 2.0,
        patch_extent[2] as f64 * spacing[2] / 2.0,
    ];
    let fg = mask.foreground_indices();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let want_fg = rng.gen_range(0.0..1.0) < foreground_bias;
        let fallback = want_fg && fg.is_empty();
        let (center, center_is_fg) = if want_fg && !fg.is_empty() {
            let idx = fg[rng.gen_range(0..fg.len())];
            (
                grid.voxel_to_world([idx[0] as f64, idx[1] as f64, idx[2] as f64]),
                true,
            )
        } else {
            let p = [
                rng.gen_range(lo[0]..hi[0]),
                rng.gen_range(lo[1]..hi[1]),
                rng.gen_range(lo[2]..hi[2]),
            ];
            let c = grid.world_to_voxel(p);
            let i = [
                c[0].round().clamp(0.0, (grid.dims[0] - 1) as f64) as usize,
                c[1].round().clamp(0.0, (grid.dims[1] - 1) as f64) as usize,
                c[2].round().clamp(0.0, (grid.dims[2] - 1) as f64) as usize,
            ];
            (p, mask.voxel(i[0], i[1], i[2]) > 0.0)
        };
        let mut clipped = false;
        let mut lower = [0.0; 3];
        let mut upper = [0.0; 3];
        for a in 0..3 {
            let mut c = center[a];
            if hi[a] - lo[a] >= 2.0 * half[a] {
                c = c.clamp(lo[a] + half[a], hi[a] - half[a]);
            } else {
                // Volume smaller than the patch: center it and pad.
                c = (lo[a] + hi[a]) / 2.0;
                clipped = true;
            }
            lower[a] = c - half[a];
            upper[a] = c + half[a];
        }
        let roi = RoiBox::new(lower, upper, spacing)?;
        let img_crop = image.crop(&roi, Interp::Linear)?;
        let msk_crop = mask.crop(&roi, Interp::Nearest)?;
        // ceil(extent/spacing) may exceed the requested patch by one voxel
        // from floating-point roundup; trim to the exact patch extent.
        let input = Tensor4::from_volume(&img_crop).crop_to(patch_extent);
        let target_t = Tensor4::from_volume(&msk_crop).crop_to(patch_extent);
        let target: Vec<u8> = target_t.data.iter().map(|&v| v as u8).collect();
        out.push(PatchSample {
            input,
            target,
            roi,
            center_is_foreground: center_is_fg,
            fallback_uniform: fallback,
            clipped,
        });
    }
    Ok(out)
}

/// Resample a case to a stage's working grid (linear image, nearest mask).
pub fn resample_case(
    case: &NativeCase,
    spacing: [f64; 3],
    shift: f64,
    scale: f64,
) -> Result<(Volume, Volume)> {
    let image = case.image.resample(spacing, Interp::Linear)?;
    let image = normalize_image(&image, shift, scale)?;
    let mask = case.mask.resample(spacing, Interp::Nearest)?;
    Ok((image, mask))
}

/// Labels of a volume as a u8 target buffer.
pub fn labels_to_target(mask: &Volume) -> Vec<u8> {
    mask.data().iter().map(|&v| v as u8).collect()
}

/// The grid a volume's tensor view lives on (used to re-attach geometry to
/// model outputs).
pub fn tensor_grid(v: &Volume) -> Grid {
    v.grid().clone()
}
