//! Procedural skull-like phantoms with analytically exact ground truth.
//!
//! Two disjoint structures stand in for the clinical anatomy:
//!
//! * label 1 ("midface"): an ellipsoid shell whose wall is locally thinned
//!   inside two lateral windows, so the walls there are thinner than the
//!   coarse spacing and coarse models plausibly produce holes;
//! * label 2 ("mandible"): a hollow horseshoe, a partial torus opening
//!   toward the back.
//!
//! Landmarks come in the three standard groups: bone points on closed-form
//! surface positions (including the left/right thin-wall pair and two jaw
//! anchor points), a tight "teeth" cluster along the horseshoe's upper rim
//! whose neighbor spacing is below twice the coarse spacing (unresolvable
//! at coarse resolution), and "face" points a fraction of a voxel outward
//! from the shell. Masks are built by exact per-voxel-center membership
//! tests, so ground truth is analytic rather than annotated.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::landmark::{
    Landmark, LandmarkGroup, LandmarkManifest, LandmarkSet, ManifestEntry,
};
use crate::trainer::config::{split_sizes, CaseEntry, DatasetManifest, Split};
use crate::volume::{Grid, Volume, VolumeKind};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    /// Shell ("midface") placement and size, mm.
    pub shell_center_offset: [f64; 3],
    pub shell_semi_axes: [f64; 3],
    pub shell_thickness: f64,
    /// Thin lateral wall patches: thickness deliberately below the coarse
    /// spacing so the coarse stage plausibly produces holes there.
    pub thin_thickness: f64,
    pub thin_window_halfwidth: f64,
    /// Horseshoe ("mandible") parameters, mm.
    pub jaw_center_offset: [f64; 3],
    pub jaw_ring_radius: f64,
    pub jaw_tube_radius: f64,
    pub jaw_tube_thickness: f64,
    pub jaw_arc_degrees: f64,
    /// Imaging model.
    pub fg_intensity: f64,
    pub noise_sigma: f64,
    pub smooth_sigma_mm: f64,
    /// The coarse spacing the thin walls must stay below.
    pub coarse_spacing_hint: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            extents: [128, 128, 128],
            spacing: [1.0, 1.0, 1.0],
            shell_center_offset: [0.0, 0.0, 18.0],
            shell_semi_axes: [38.0, 44.0, 34.0],
            shell_thickness: 5.0,
            thin_thickness: 1.4,
            thin_window_halfwidth: 12.0,
            jaw_center_offset: [0.0, -6.0, -28.0],
            jaw_ring_radius: 26.0,
            jaw_tube_radius: 8.0,
            jaw_tube_thickness: 4.5,
            jaw_arc_degrees: 240.0,
            fg_intensity: 1000.0,
            noise_sigma: 25.0,
            smooth_sigma_mm: 0.8,
            coarse_spacing_hint: 2.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.thin_thickness >= self.coarse_spacing_hint {
            return Err(Error::InvalidArgument(format!(
                "thin wall thickness {} must stay below the coarse spacing {}",
                self.thin_thickness, self.coarse_spacing_hint
            )));
        }
        if self.thin_thickness <= 0.0
            || self.shell_thickness <= 0.0
            || self.jaw_tube_thickness <= 0.0
        {
            return Err(Error::InvalidArgument(
                "all thicknesses must be positive".into(),
            ));
        }
        if self.jaw_tube_thickness > self.jaw_tube_radius {
            return Err(Error::InvalidArgument(
                "jaw tube thickness exceeds tube radius".into(),
            ));
        }
        for a in 0..3 {
            if self.shell_semi_axes[a] <= self.shell_thickness {
                return Err(Error::InvalidArgument(format!(
                    "shell semi-axis {a} too small for the wall thickness"
                )));
            }
        }
        Ok(())
    }

    fn grid(&self) -> Result<Grid> {
        Grid::new(self.extents, self.spacing, [0.0; 3])
    }

    fn grid_center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = (self.extents[a] as f64 - 1.0) / 2.0 * self.spacing[a];
        }
        c
    }

    fn shell_center(&self) -> [f64; 3] {
        let g = self.grid_center();
        [
            g[0] + self.shell_center_offset[0],
            g[1] + self.shell_center_offset[1],
            g[2] + self.shell_center_offset[2],
        ]
    }

    fn jaw_center(&self) -> [f64; 3] {
        let g = self.grid_center();
        [
            g[0] + self.jaw_center_offset[0],
            g[1] + self.jaw_center_offset[1],
            g[2] + self.jaw_center_offset[2],
        ]
    }
}

fn inside_ellipsoid(p: [f64; 3], c: [f64; 3], semi: [f64; 3]) -> bool {
    let mut s = 0.0;
    for a in 0..3 {
        let d = (p[a] - c[a]) / semi[a];
        s += d * d;
    }
    s <= 1.0
}

/// Shell membership: inside the outer ellipsoid but outside the inner one,
/// where the inner semi-axes shrink by the local wall thickness (thin
/// inside the two lateral windows).
fn in_shell(p: [f64; 3], spec: &PhantomSpec) -> bool {
    let c = spec.shell_center();
    let outer = spec.shell_semi_axes;
    if !inside_ellipsoid(p, c, outer) {
        return false;
    }
    let w = spec.thin_window_halfwidth;
    let in_window = (p[0] - c[0]).abs() > 0.55 * outer[0]
        && (p[1] - c[1]).abs() <= w
        && (p[2] - c[2]).abs() <= w;
    let t = if in_window {
        spec.thin_thickness
    } else {
        spec.shell_thickness
    };
    let inner = [outer[0] - t, outer[1] - t, outer[2] - t];
    !inside_ellipsoid(p, c, inner)
}

/// Horseshoe membership: a hollow tube around a partial ring.
fn in_jaw(p: [f64; 3], spec: &PhantomSpec) -> bool {
    let c = spec.jaw_center();
    let dx = p[0] - c[0];
    let dy = p[1] - c[1];
    let dz = p[2] - c[2];
    // Angle from the front (-y) direction.
    let psi = dx.atan2(-dy);
    if psi.abs() > spec.jaw_arc_degrees.to_radians() / 2.0 {
        return false;
    }
    let rho = (dx * dx + dy * dy).sqrt();
    let dr = rho - spec.jaw_ring_radius;
    let d_ring2 = dr * dr + dz * dz;
    let outer = spec.jaw_tube_radius;
    let inner = spec.jaw_tube_radius - spec.jaw_tube_thickness;
    d_ring2 <= outer * outer && d_ring2 >= inner * inner
}

/// Point on the horseshoe's upper rim at angle `psi` from the front.
fn jaw_rim_point(spec: &PhantomSpec, psi_deg: f64) -> [f64; 3] {
    let c = spec.jaw_center();
    let psi = psi_deg.to_radians();
    [
        c[0] + spec.jaw_ring_radius * psi.sin(),
        c[1] - spec.jaw_ring_radius * psi.cos(),
        c[2] + spec.jaw_tube_radius,
    ]
}

/// Point on the outer shell surface at spherical parameters, plus an
/// outward offset along the exact surface normal.
fn shell_surface_point(spec: &PhantomSpec, theta_deg: f64, phi_deg: f64, offset: f64) -> [f64; 3] {
    let c = spec.shell_center();
    let s = spec.shell_semi_axes;
    let th = theta_deg.to_radians();
    let ph = phi_deg.to_radians();
    let p = [
        c[0] + s[0] * th.sin() * ph.cos(),
        c[1] + s[1] * th.sin() * ph.sin(),
        c[2] + s[2] * th.cos(),
    ];
    // Gradient of the implicit ellipsoid function is the outward normal.
    let mut n = [
        (p[0] - c[0]) / (s[0] * s[0]),
        (p[1] - c[1]) / (s[1] * s[1]),
        (p[2] - c[2]) / (s[2] * s[2]),
    ];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    for v in &mut n {
        *v /= len;
    }
    [
        p[0] + offset * n[0],
        p[1] + offset * n[1],
        p[2] + offset * n[2],
    ]
}

/// Outward offset of the face landmarks from the shell surface, chosen
/// below half a voxel at the default spacing so the nearest-surface-voxel
/// property holds for every landmark.
const FACE_OFFSET_MM: f64 = 0.4;

/// Teeth rim angles in degrees from the front: neighbor chord spacing
/// 2 R sin(3 deg), about 2.7 mm at the default ring radius, which is below
/// twice the coarse spacing.
const TEETH_PSI_DEG: [f64; 6] = [-15.0, -9.0, -3.0, 3.0, 9.0, 15.0];

/// Jaw anchor angles (the tooth ROI centers on the anchor centroid).
const ANCHOR_PSI_DEG: f64 = 35.0;

/// Analytic landmark positions for a spec, in the standard manifest order.
pub fn landmark_positions(spec: &PhantomSpec) -> LandmarkSet {
    let c = spec.shell_center();
    let s = spec.shell_semi_axes;
    let mut entries = vec![
        Landmark {
            name: "thin_wall_left".into(),
            group: LandmarkGroup::Bone,
            position: [c[0] + s[0], c[1], c[2]],
            present: true,
        },
        Landmark {
            name: "thin_wall_right".into(),
            group: LandmarkGroup::Bone,
            position: [c[0] - s[0], c[1], c[2]],
            present: true,
        },
        Landmark {
            name: "crown".into(),
            group: LandmarkGroup::Bone,
            position: [c[0], c[1], c[2] + s[2]],
            present: true,
        },
        Landmark {
            name: "brow".into(),
            group: LandmarkGroup::Bone,
            position: [c[0], c[1] - s[1], c[2]],
            present: true,
        },
        Landmark {
            name: "jaw_left".into(),
            group: LandmarkGroup::Bone,
            position: jaw_rim_point(spec, ANCHOR_PSI_DEG),
            present: true,
        },
        Landmark {
            name: "jaw_right".into(),
            group: LandmarkGroup::Bone,
            position: jaw_rim_point(spec, -ANCHOR_PSI_DEG),
            present: true,
        },
    ];
    for (i, &psi) in TEETH_PSI_DEG.iter().enumerate() {
        entries.push(Landmark {
            name: format!("tooth_{}", i + 1),
            group: LandmarkGroup::Teeth,
            position: jaw_rim_point(spec, psi),
            present: true,
        });
    }
    entries.push(Landmark {
        name: "face_nose".into(),
        group: LandmarkGroup::Face,
        position: shell_surface_point(spec, 115.0, 270.0, FACE_OFFSET_MM),
        present: true,
    });
    entries.push(Landmark {
        name: "face_cheek_left".into(),
        group: LandmarkGroup::Face,
        position: shell_surface_point(spec, 100.0, 325.0, FACE_OFFSET_MM),
        present: true,
    });
    entries.push(Landmark {
        name: "face_cheek_right".into(),
        group: LandmarkGroup::Face,
        position: shell_surface_point(spec, 100.0, 215.0, FACE_OFFSET_MM),
        present: true,
    });
    LandmarkSet::new(entries).expect("phantom landmark names are unique")
}

/// The landmark inventory every phantom dataset shares.
pub fn phantom_landmark_manifest() -> LandmarkManifest {
    let set = landmark_positions(&PhantomSpec::default());
    let manifest = LandmarkManifest {
        landmarks: set
            .entries()
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                group: e.group,
            })
            .collect(),
        thin_pair: ["thin_wall_left".into(), "thin_wall_right".into()],
        tooth_anchors: vec!["jaw_left".into(), "jaw_right".into()],
        flip_pairs: vec![
            ["thin_wall_left".into(), "thin_wall_right".into()],
            ["jaw_left".into(), "jaw_right".into()],
            ["tooth_1".into(), "tooth_6".into()],
            ["tooth_2".into(), "tooth_5".into()],
            ["tooth_3".into(), "tooth_4".into()],
            ["face_cheek_left".into(), "face_cheek_right".into()],
        ],
    };
    manifest.validate().expect("builtin manifest is valid");
    manifest
}

/// A generated phantom: image, exact mask, exact landmarks.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub image: Volume,
    pub gt_mask: Volume,
    pub gt_landmarks: LandmarkSet,
}

/// Generate one phantom from its spec (pure given the seed).
pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let grid = spec.grid()?;
    let [nx, ny, nz] = grid.dims;
    let mut labels = vec![0.0f64; grid.num_voxels()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                let shell = in_shell(p, spec);
                let jaw = in_jaw(p, spec);
                if shell && jaw {
                    return Err(Error::InvalidArgument(format!(
                        "inconsistent phantom spec: structures overlap at {p:?}"
                    )));
                }
                labels[grid.index(i, j, k)] = if shell {
                    1.0
                } else if jaw {
                    2.0
                } else {
                    0.0
                };
            }
        }
    }

    let mut intensity: Vec<f64> = labels
        .iter()
        .map(|&l| if l > 0.0 { spec.fg_intensity } else { 0.0 })
        .collect();
    if spec.smooth_sigma_mm > 0.0 {
        gaussian_smooth(&mut intensity, grid.dims, spec.spacing, spec.smooth_sigma_mm);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("bad noise sigma: {e}")))?;
        for v in &mut intensity {
            *v += normal.sample(&mut rng);
        }
    }

    Ok(PhantomCase {
        image: Volume::new(grid.clone(), VolumeKind::Image, intensity)?,
        gt_mask: Volume::new(grid, VolumeKind::Label, labels)?,
        gt_landmarks: landmark_positions(spec),
    })
}

/// Separable Gaussian smoothing with zero boundary (background is 0).
fn gaussian_smooth(data: &mut [f64], dims: [usize; 3], spacing: [f64; 3], sigma_mm: f64) {
    let [nx, ny, nz] = dims;
    for axis in 0..3 {
        let sigma = sigma_mm / spacing[axis];
        let radius = (3.0 * sigma).ceil() as i64;
        if radius == 0 {
            continue;
        }
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let ksum: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.into_iter().map(|k| k / ksum).collect();

        let n = [nx, ny, nz];
        let stride = match axis {
            0 => 1,
            1 => nx,
            _ => nx * ny,
        };
        let len = n[axis] as i64;
        let mut line = vec![0.0f64; n[axis]];
        // Iterate all lines along `axis`.
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..n[ob] {
            for a in 0..n[oa] {
                let mut idx3 = [0usize; 3];
                idx3[oa] = a;
                idx3[ob] = b;
                let base = idx3[0] + nx * (idx3[1] + ny * idx3[2]);
                for i in 0..n[axis] {
                    line[i] = data[base + i * stride];
                }
                for i in 0..len {
                    let mut acc = 0.0;
                    for (kj, &kv) in kernel.iter().enumerate() {
                        let src = i + kj as i64 - radius;
                        if src >= 0 && src < len {
                            acc += kv * line[src as usize];
                        }
                    }
                    data[base + i as usize * stride] = acc;
                }
            }
        }
    }
}

/// Per-case pose/scale/thickness jitter rules.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterSpec {
    pub enabled: bool,
    pub scale_range: [f64; 2],
    pub translate_mm: f64,
    pub thickness_frac: f64,
    pub thin_range: [f64; 2],
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec {
            enabled: true,
            scale_range: [0.92, 1.08],
            translate_mm: 3.0,
            thickness_frac: 0.2,
            thin_range: [1.1, 1.7],
        }
    }
}

/// Derive case `index`'s spec from the base spec and jitter rules.
///
/// The jitter is a similarity transform (global scale + rigid translation)
/// plus thickness changes, so the structures stay disjoint by construction.
pub fn jittered_spec(base: &PhantomSpec, index: usize, jitter: &JitterSpec) -> PhantomSpec {
    let mut spec = base.clone();
    // Per-case seed for noise (and jitter), derived deterministically.
    let case_seed = base
        .seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(index as u64 + 1);
    spec.seed = case_seed;
    if !jitter.enabled {
        return spec;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    let s = rng.gen_range(jitter.scale_range[0]..=jitter.scale_range[1]);
    let t = [
        rng.gen_range(-jitter.translate_mm..=jitter.translate_mm),
        rng.gen_range(-jitter.translate_mm..=jitter.translate_mm),
        rng.gen_range(-jitter.translate_mm..=jitter.translate_mm),
    ];
    let tf = 1.0 + rng.gen_range(-jitter.thickness_frac..=jitter.thickness_frac);
    let thin = rng.gen_range(jitter.thin_range[0]..=jitter.thin_range[1]);

    for a in 0..3 {
        spec.shell_semi_axes[a] *= s;
        spec.shell_center_offset[a] = spec.shell_center_offset[a] * s + t[a];
        spec.jaw_center_offset[a] = spec.jaw_center_offset[a] * s + t[a];
    }
    spec.shell_thickness *= s * tf;
    spec.jaw_ring_radius *= s;
    spec.jaw_tube_radius *= s;
    spec.jaw_tube_thickness *= s * tf;
    spec.thin_window_halfwidth *= s;
    spec.thin_thickness = thin.min(spec.coarse_spacing_hint - 0.05);
    spec
}

/// Generate `n` phantoms under `out_dir` (NIfTI + landmark CSV per case)
/// plus the dataset manifest and the shared landmark manifest.
///
/// Split assignment is deterministic: the first `train` cases, then `val`,
/// then `test`, with sizes from [`split_sizes`].
pub fn generate_dataset(
    n: usize,
    base: &PhantomSpec,
    jitter: &JitterSpec,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train, val, _test) = split_sizes(n);
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let spec = jittered_spec(base, i, jitter);
        let case = generate(&spec)?;
        let name = format!("phantom_{i:03}");
        let case_dir = out_dir.join(&name);
        std::fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
        crate::nifti::write_volume(&case.image, case_dir.join("image.nii.gz"))?;
        crate::nifti::write_volume(&case.gt_mask, case_dir.join("mask.nii.gz"))?;
        crate::landmark::write_landmarks(&case.gt_landmarks, case_dir.join("landmarks.csv"))?;
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        cases.push(CaseEntry {
            name: name.clone(),
            image: Path::new(&name).join("image.nii.gz"),
            mask: Path::new(&name).join("mask.nii.gz"),
            landmarks: Path::new(&name).join("landmarks.csv"),
            split,
        });
    }
    let manifest = DatasetManifest {
        cases,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("manifest.toml"))?;
    phantom_landmark_manifest().save(out_dir.join("landmark_manifest.toml"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        // Quarter-scale phantom for fast tests.
        PhantomSpec {
            extents: [64, 64, 64],
            spacing: [2.0, 2.0, 2.0],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.gt_mask.data(), b.gt_mask.data());
        assert_eq!(a.gt_landmarks, b.gt_landmarks);
    }

    #[test]
    fn labels_are_within_range_and_structures_disjoint() {
        let case = generate(&small_spec()).unwrap();
        let mut have = [false; 3];
        for &v in case.gt_mask.data() {
            assert!(v == 0.0 || v == 1.0 || v == 2.0);
            have[v as usize] = true;
        }
        assert!(have[1] && have[2], "both structures must be present");
    }

    #[test]
    fn overlapping_structures_are_a_spec_error() {
        let mut spec = small_spec();
        // Ring plane through the shell equator, radius crossing the wall.
        spec.jaw_center_offset = [0.0, 0.0, 18.0];
        spec.jaw_ring_radius = 34.0;
        assert!(matches!(generate(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_noise_zero_smoothing_is_two_valued() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        spec.smooth_sigma_mm = 0.0;
        let case = generate(&spec).unwrap();
        for &v in case.image.data() {
            assert!(v == 0.0 || v == spec.fg_intensity);
        }
    }

    #[test]
    fn thin_pair_is_mirror_symmetric_before_jitter() {
        let spec = PhantomSpec::default();
        let lms = landmark_positions(&spec);
        let l = lms.find("thin_wall_left").unwrap();
        let r = lms.find("thin_wall_right").unwrap();
        let cx = spec.shell_center()[0];
        assert!((l.position[0] - cx - (cx - r.position[0])).abs() < 1e-6);
        assert!((l.position[1] - r.position[1]).abs() < 1e-6);
        assert!((l.position[2] - r.position[2]).abs() < 1e-6);
    }

    #[test]
    fn teeth_neighbor_spacing_is_unresolvable_at_coarse() {
        let spec = PhantomSpec::default();
        let lms = landmark_positions(&spec);
        let teeth: Vec<[f64; 3]> = lms
            .entries()
            .iter()
            .filter(|e| e.group == LandmarkGroup::Teeth)
            .map(|e| e.position)
            .collect();
        assert!(teeth.len() >= 6);
        for w in teeth.windows(2) {
            let d = (0..3)
                .map(|a| (w[0][a] - w[1][a]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(
                d < 2.0 * spec.coarse_spacing_hint,
                "neighbor spacing {d} is resolvable at coarse"
            );
        }
    }

    #[test]
    fn every_landmark_is_on_its_structure_surface() {
        // Brute-force nearest-surface-voxel oracle: the nearest voxel whose
        // 26-neighborhood straddles the structure boundary must be within
        // half a voxel (per axis) of the landmark.
        let spec = small_spec();
        let case = generate(&spec).unwrap();
        let grid = case.gt_mask.grid().clone();
        let [nx, ny, nz] = grid.dims;
        let structure_of = |lm: &Landmark| -> f64 {
            match (lm.group, lm.name.as_str()) {
                (LandmarkGroup::Teeth, _) => 2.0,
                (LandmarkGroup::Bone, "jaw_left" | "jaw_right") => 2.0,
                _ => 1.0,
            }
        };
        for lm in case.gt_landmarks.entries() {
            let s = structure_of(lm);
            let idx = grid.world_to_voxel(lm.position);
            let mut best = f64::INFINITY;
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        // 26-neighborhood straddles in/out of structure s?
                        let mut any_in = false;
                        let mut any_out = false;
                        for dz in -1i64..=1 {
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let (x, y, z) =
                                        (i as i64 + dx, j as i64 + dy, k as i64 + dz);
                                    if x < 0 || y < 0 || z < 0
                                        || x >= nx as i64 || y >= ny as i64 || z >= nz as i64
                                    {
                                        continue;
                                    }
                                    let v = case.gt_mask.voxel(x as usize, y as usize, z as usize);
                                    if v == s {
                                        any_in = true;
                                    } else {
                                        any_out = true;
                                    }
                                }
                            }
                        }
                        if any_in && any_out {
                            let d = (idx[0] - i as f64)
                                .abs()
                                .max((idx[1] - j as f64).abs())
                                .max((idx[2] - k as f64).abs());
                            best = best.min(d);
                        }
                    }
                }
            }
            assert!(
                best <= 0.5 + 1e-9,
                "landmark '{}' is {best} voxels from its structure surface",
                lm.name
            );
        }
    }

    #[test]
    fn dataset_split_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = small_spec();
        base.extents = [32, 32, 32];
        base.spacing = [4.0, 4.0, 4.0];
        base.seed = 9;
        // Keep structures inside the tiny grid.
        base.shell_semi_axes = [30.0, 34.0, 28.0];
        let jitter = JitterSpec {
            translate_mm: 1.0,
            ..JitterSpec::default()
        };
        let manifest = generate_dataset(10, &base, &jitter, dir.path()).unwrap();
        assert_eq!(manifest.split(Split::Train).len(), 7);
        assert_eq!(manifest.split(Split::Val).len(), 1);
        assert_eq!(manifest.split(Split::Test).len(), 2);

        // Every manifest path exists and loads.
        let loaded = DatasetManifest::load(dir.path().join("manifest.toml")).unwrap();
        for c in &loaded.cases {
            let img = crate::nifti::read_volume(loaded.resolve(&c.image)).unwrap();
            assert_eq!(img.kind(), VolumeKind::Image);
            crate::nifti::read_volume(loaded.resolve(&c.mask)).unwrap();
            crate::landmark::read_landmarks(loaded.resolve(&c.landmarks)).unwrap();
        }

        // Jitter disabled: identical geometry, different noise.
        let no_jitter = JitterSpec {
            enabled: false,
            ..JitterSpec::default()
        };
        let s0 = jittered_spec(&base, 0, &no_jitter);
        let s1 = jittered_spec(&base, 1, &no_jitter);
        assert_eq!(s0.shell_semi_axes, s1.shell_semi_axes);
        assert_ne!(s0.seed, s1.seed);
        let m0 = generate(&s0).unwrap();
        let m1 = generate(&s1).unwrap();
        assert_eq!(m0.gt_mask.data(), m1.gt_mask.data());
        assert_ne!(m0.image.data(), m1.image.data());
    }

    #[test]
    fn thin_walls_alias_at_coarse_but_not_at_native() {
        // The thin-wall columns must survive nearest resampling at native
        // spacing but lose voxels at the coarse spacing (the "holes").
        let spec = PhantomSpec::default();
        let case = generate(&spec).unwrap();
        let coarse = case
            .gt_mask
            .resample([2.0; 3], crate::volume::Interp::Nearest)
            .unwrap();
        let lms = landmark_positions(&spec);
        let probe = lms.find("thin_wall_left").unwrap().position;
        // Count shell voxels in a small box around the thin wall center.
        let count_near = |v: &Volume| -> usize {
            let mut n = 0;
            let g = v.grid();
            let dims = g.dims;
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        let p = g.voxel_to_world([i as f64, j as f64, k as f64]);
                        if (p[0] - probe[0]).abs() < 8.0
                            && (p[1] - probe[1]).abs() < 8.0
                            && (p[2] - probe[2]).abs() < 8.0
                            && v.voxel(i, j, k) == 1.0
                        {
                            n += 1;
                        }
                    }
                }
            }
            n
        };
        let native = count_near(&case.gt_mask);
        let coarse_n = count_near(&coarse);
        assert!(native > 0, "thin wall must exist at native spacing");
        // Normalize by voxel volume ratio (8x) to compare coverage.
        let coverage_ratio = (coarse_n * 8) as f64 / native as f64;
        assert!(
            coverage_ratio < 0.95,
            "coarse grid should under-cover the thin wall (got ratio {coverage_ratio})"
        );
    }
}
