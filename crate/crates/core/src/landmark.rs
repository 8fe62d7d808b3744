//! Landmarks and the voxel-mask codec.
//!
//! Landmark detection is cast as voxel classification: each landmark owns a
//! class, and training targets are label volumes where a sphere of voxels
//! around the landmark carries its class. Decoding recovers world-mm
//! coordinates from per-class probability maps.
//!
//! The sphere radius is measured in voxel-index space (so on anisotropic
//! grids it is a physical ellipsoid; this is deliberate and documented, not
//! corrected). Class 0 is background; class `i + 1` is the i-th landmark of
//! the encoded set, in set order.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Grid, ProbVolume, Volume, VolumeKind};

/// Anatomical landmark group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkGroup {
    Bone,
    Teeth,
    Face,
}

impl LandmarkGroup {
    pub const ALL: [LandmarkGroup; 3] = [LandmarkGroup::Bone, LandmarkGroup::Teeth, LandmarkGroup::Face];

    pub fn as_str(&self) -> &'static str {
        match self {
            LandmarkGroup::Bone => "bone",
            LandmarkGroup::Teeth => "teeth",
            LandmarkGroup::Face => "face",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bone" => Ok(LandmarkGroup::Bone),
            "teeth" => Ok(LandmarkGroup::Teeth),
            "face" => Ok(LandmarkGroup::Face),
            other => Err(Error::InvalidArgument(format!(
                "unknown landmark group '{other}' (expected bone, teeth or face)"
            ))),
        }
    }
}

impl std::fmt::Display for LandmarkGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named 3D point in world (mm) coordinates with a presence flag.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Landmark {
    pub name: String,
    pub group: LandmarkGroup,
    pub position: [f64; 3],
    pub present: bool,
}

/// An ordered set of landmarks; order defines class indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(entries: Vec<Landmark>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate landmark name '{}'",
                    e.name
                )));
            }
        }
        Ok(LandmarkSet { entries })
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<&Landmark> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Entries of one group, preserving set order.
    pub fn group_subset(&self, group: LandmarkGroup) -> LandmarkSet {
        LandmarkSet {
            entries: self
                .entries
                .iter()
                .filter(|e| e.group == group)
                .cloned()
                .collect(),
        }
    }

    /// Replace the entry with the same name (used to merge stage outputs).
    pub fn update(&mut self, lm: Landmark) -> Result<()> {
        match self.entries.iter_mut().find(|e| e.name == lm.name) {
            Some(slot) => {
                *slot = lm;
                Ok(())
            }
            None => Err(Error::MissingLandmark(lm.name)),
        }
    }
}

/// Sphere radius in voxels for landmark mask encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SphereRadius(u32);

impl SphereRadius {
    pub fn new(radius_voxels: u32) -> Result<Self> {
        if radius_voxels < 1 {
            return Err(Error::InvalidArgument(
                "sphere radius must be >= 1 voxel".into(),
            ));
        }
        Ok(SphereRadius(radius_voxels))
    }

    pub fn voxels(&self) -> u32 {
        self.0
    }
}

impl Default for SphereRadius {
    fn default() -> Self {
        SphereRadius(3)
    }
}

/// Lattice offsets within Euclidean index distance `r` of the origin
/// (boundary inclusive).
pub fn sphere_offsets(r: u32) -> Vec<[i64; 3]> {
    let ri = r as i64;
    let r2 = ri * ri;
    let mut out = Vec::new();
    for dz in -ri..=ri {
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Resolve a voxel claimed by several landmark spheres: nearest landmark by
/// squared index distance, ties broken by lowest class index. Returns the
/// winning position in `centers`.
pub fn resolve_overlap(voxel: [i64; 3], centers: &[[i64; 3]]) -> Option<usize> {
    let mut best: Option<(i64, usize)> = None;
    for (i, c) in centers.iter().enumerate() {
        let d = [voxel[0] - c[0], voxel[1] - c[1], voxel[2] - c[2]];
        let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        match best {
            Some((bd, _)) if bd <= d2 => {}
            _ => best = Some((d2, i)),
        }
    }
    best.map(|(_, i)| i)
}

/// Encode landmark coordinates as a multi-class sphere mask on `grid`.
///
/// Voxel gets label `i + 1` iff its index is within Euclidean index distance
/// `r` of landmark i's rounded voxel index; overlaps go to the nearest
/// landmark (ties to the lowest class index). Absent landmarks contribute
/// nothing. Landmarks whose spheres are (partly) clipped by the grid produce
/// a warning; fully clipped landmarks train as background.
pub fn encode_landmarks(
    set: &LandmarkSet,
    grid: &Grid,
    r: SphereRadius,
) -> Result<(Volume, Vec<String>)> {
    let n = grid.num_voxels();
    let mut labels = vec![0.0f64; n];
    let mut best_d2 = vec![u32::MAX; n];
    let mut warnings = Vec::new();
    let offsets = sphere_offsets(r.voxels());
    let [nx, ny, nz] = grid.dims;

    for (i, lm) in set.entries.iter().enumerate() {
        if !lm.present {
            continue;
        }
        let c = grid.world_to_voxel(lm.position);
        let center = [
            c[0].round() as i64,
            c[1].round() as i64,
            c[2].round() as i64,
        ];
        let mut stamped = 0usize;
        let mut clipped = 0usize;
        for d in &offsets {
            let x = center[0] + d[0];
            let y = center[1] + d[1];
            let z = center[2] + d[2];
            if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                clipped += 1;
                continue;
            }
            let vox = grid.index(x as usize, y as usize, z as usize);
            let d2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as u32;
            if d2 < best_d2[vox] {
                best_d2[vox] = d2;
                labels[vox] = (i + 1) as f64;
            }
            stamped += 1;
        }
        if clipped > 0 {
            warnings.push(format!(
                "landmark '{}' sphere clipped by grid boundary ({} of {} voxels kept)",
                lm.name,
                stamped,
                offsets.len()
            ));
        }
    }

    let volume = Volume::new(grid.clone(), VolumeKind::Label, labels)?;
    Ok((volume, warnings))
}

/// How decoded coordinates are recovered from probability maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Probability-weighted centroid of supra-threshold voxels (default).
    WeightedCentroid,
    /// World position of the maximum-probability voxel.
    Argmax,
}

impl Default for DecodeMode {
    fn default() -> Self {
        DecodeMode::WeightedCentroid
    }
}

/// Decode per-class probability maps back to landmark coordinates.
///
/// `expected` supplies names, groups and order; the probability volume must
/// have `expected.len() + 1` classes. A landmark is present when any voxel
/// of its class exceeds `threshold`.
pub fn decode_landmarks(
    prob: &ProbVolume,
    expected: &LandmarkSet,
    threshold: f64,
    mode: DecodeMode,
) -> Result<LandmarkSet> {
    if prob.num_classes() != expected.len() + 1 {
        return Err(Error::Configuration(format!(
            "probability volume has {} classes but the landmark list expects {}",
            prob.num_classes(),
            expected.len() + 1
        )));
    }
    let grid = prob.grid();
    let [nx, ny, nz] = grid.dims;
    let mut out = Vec::with_capacity(expected.len());
    for (i, lm) in expected.entries.iter().enumerate() {
        let ch = prob.class_slice(i + 1);
        let mut decoded = Landmark {
            name: lm.name.clone(),
            group: lm.group,
            position: [0.0; 3],
            present: false,
        };
        match mode {
            DecodeMode::WeightedCentroid => {
                let mut wsum = 0.0;
                let mut acc = [0.0f64; 3];
                let mut vox = 0usize;
                for k in 0..nz {
                    for j in 0..ny {
                        for ii in 0..nx {
                            let p = ch[vox];
                            if p > threshold {
                                let w = grid.voxel_to_world([ii as f64, j as f64, k as f64]);
                                wsum += p;
                                acc[0] += p * w[0];
                                acc[1] += p * w[1];
                                acc[2] += p * w[2];
                            }
                            vox += 1;
                        }
                    }
                }
                if wsum > 0.0 {
                    decoded.present = true;
                    decoded.position = [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum];
                }
            }
            DecodeMode::Argmax => {
                let mut best = threshold;
                let mut best_idx = None;
                for (vox, &p) in ch.iter().enumerate() {
                    if p > best {
                        best = p;
                        best_idx = Some(vox);
                    }
                }
                if let Some(vox) = best_idx {
                    let ii = vox % nx;
                    let j = (vox / nx) % ny;
                    let k = vox / (nx * ny);
                    decoded.present = true;
                    decoded.position = grid.voxel_to_world([ii as f64, j as f64, k as f64]);
                }
            }
        }
        out.push(decoded);
    }
    LandmarkSet::new(out)
}

/// Write landmarks as UTF-8 CSV with header `name,group,x,y,z,present`.
pub fn write_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["name", "group", "x", "y", "z", "present"])
        .map_err(|e| csv_error(path, e))?;
    for lm in &set.entries {
        w.write_record([
            lm.name.as_str(),
            lm.group.as_str(),
            &lm.position[0].to_string(),
            &lm.position[1].to_string(),
            &lm.position[2].to_string(),
            if lm.present { "1" } else { "0" },
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a landmark CSV written by [`write_landmarks`].
pub fn read_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut entries = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != 6 {
            return Err(Error::format(
                path,
                format!("expected 6 columns, got {}", rec.len()),
            ));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("bad {what} value '{s}'")))
        };
        entries.push(Landmark {
            name: rec[0].to_string(),
            group: LandmarkGroup::parse(rec[1].trim())
                .map_err(|e| Error::format(path, e.to_string()))?,
            position: [
                parse_f(&rec[2], "x")?,
                parse_f(&rec[3], "y")?,
                parse_f(&rec[4], "z")?,
            ],
            present: match rec[5].trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::format(
                        path,
                        format!("bad present flag '{other}' (expected 0 or 1)"),
                    ))
                }
            },
        });
    }
    LandmarkSet::new(entries)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// The configured landmark inventory: names, groups, and the named roles
/// (thin-bone pair, tooth anchors, flip pairs) the refinement stage needs.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LandmarkManifest {
    pub landmarks: Vec<ManifestEntry>,
    /// Left/right bony landmark names centering the thin-bone ROIs.
    pub thin_pair: [String; 2],
    /// Bony landmark names whose centroid centers the tooth ROI.
    pub tooth_anchors: Vec<String>,
    /// Left/right landmark name pairs swapped under mirror augmentation.
    #[serde(default)]
    pub flip_pairs: Vec<[String; 2]>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: LandmarkGroup,
}

impl LandmarkManifest {
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for e in &self.landmarks {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Configuration(format!(
                    "duplicate landmark '{}' in manifest",
                    e.name
                )));
            }
        }
        for required in self.thin_pair.iter().chain(self.tooth_anchors.iter()) {
            if !names.contains(required.as_str()) {
                return Err(Error::Configuration(format!(
                    "manifest role references unknown landmark '{required}'"
                )));
            }
        }
        for pair in &self.flip_pairs {
            for n in pair {
                if !names.contains(n.as_str()) {
                    return Err(Error::Configuration(format!(
                        "flip pair references unknown landmark '{n}'"
                    )));
                }
            }
        }
        if self.tooth_anchors.is_empty() {
            return Err(Error::Configuration(
                "manifest must declare at least one tooth anchor".into(),
            ));
        }
        Ok(())
    }

    /// A landmark set in manifest order with all entries absent.
    pub fn empty_set(&self) -> LandmarkSet {
        LandmarkSet {
            entries: self
                .landmarks
                .iter()
                .map(|e| Landmark {
                    name: e.name.clone(),
                    group: e.group,
                    position: [0.0; 3],
                    present: false,
                })
                .collect(),
        }
    }

    pub fn group_names(&self, group: LandmarkGroup) -> Vec<String> {
        self.landmarks
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Configuration(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: LandmarkManifest =
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}
