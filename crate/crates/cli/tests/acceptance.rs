//! Acceptance suite: one test per criterion, each printing a pass/fail
//! line. The end-to-end phantom experiment lives in `experiment.rs`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use cmfseg_core::landmark::{
    decode_landmarks, encode_landmarks, sphere_offsets, DecodeMode, Landmark, LandmarkGroup,
    LandmarkSet, SphereRadius,
};
use cmfseg_core::metrics;
use cmfseg_core::model::{
    build_model, focal_loss, loss::mean_cross_entropy, transfer_init, FocalParams, ModelWeights,
    Tensor4, VoxelClassifierSpec, VoxelModel,
};
use cmfseg_core::roi::{merge_refined_masks, sliding_window_infer};
use cmfseg_core::volume::{Grid, Interp, ProbVolume, RoiBox, Volume, VolumeKind};
use cmfseg_core::Result;

fn report(name: &str, ok: bool, detail: &str) {
    println!(
        "[{}] {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "{name} failed: {detail}");
}

/// Codec oracle suite: sphere voxel counts by lattice enumeration and the
/// encode -> one-hot -> decode round trip within half a voxel per axis.
#[test]
fn acceptance_codec_oracles() {
    let t0 = Instant::now();
    // Lattice enumeration oracle.
    let ball3 = sphere_offsets(3).len();
    let ball1 = sphere_offsets(1).len();

    let grid = Grid::new([30, 30, 30], [1.5, 1.5, 1.5], [-7.0, 3.0, 11.0]).unwrap();
    let single = |pos: [f64; 3]| {
        LandmarkSet::new(vec![Landmark {
            name: "p".into(),
            group: LandmarkGroup::Bone,
            position: pos,
            present: true,
        }])
        .unwrap()
    };
    let center = grid.voxel_to_world([15.0, 15.0, 15.0]);
    let (m3, _) = encode_landmarks(&single(center), &grid, SphereRadius::new(3).unwrap()).unwrap();
    let count3 = m3.data().iter().filter(|&&v| v == 1.0).count();
    let (m1, _) = encode_landmarks(&single(center), &grid, SphereRadius::new(1).unwrap()).unwrap();
    let count1 = m1.data().iter().filter(|&&v| v == 1.0).count();

    // Round trip over >= 100 random in-grid placements.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let r = SphereRadius::default();
    let (lo, hi) = grid.world_extent();
    let margin = 4.0 * 1.5;
    let mut worst = 0.0f64;
    for _ in 0..120 {
        let pos = [
            rng.gen_range(lo[0] + margin..hi[0] - margin),
            rng.gen_range(lo[1] + margin..hi[1] - margin),
            rng.gen_range(lo[2] + margin..hi[2] - margin),
        ];
        let set = single(pos);
        let (mask, _) = encode_landmarks(&set, &grid, r).unwrap();
        let probs = ProbVolume::one_hot(&mask, 2).unwrap();
        let decoded = decode_landmarks(&probs, &set, 0.5, DecodeMode::WeightedCentroid).unwrap();
        assert!(decoded.entries()[0].present);
        for a in 0..3 {
            worst = worst.max((decoded.entries()[0].position[a] - pos[a]).abs());
        }
    }
    let half_voxel = 0.75;
    let ok = ball3 == 123 && ball1 == 7 && count3 == 123 && count1 == 7 && worst <= half_voxel;
    report(
        "codec-oracles",
        ok && t0.elapsed().as_secs() < 10,
        &format!(
            "ball(3)={ball3} encode(3)={count3} ball(1)={ball1} encode(1)={count1}, \
             round-trip worst axis error {worst:.4} mm (limit {half_voxel}), {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

/// Focal loss: gamma = 0 equals cross-entropy within 1e-6; analytic
/// gradient matches central finite differences within 1e-3 relative error
/// on 20 random small tensors.
#[test]
fn acceptance_focal_loss() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut max_ce_diff = 0.0f64;
    let mut max_rel = 0.0f64;
    for _ in 0..20 {
        let c = rng.gen_range(2..5usize);
        let dims = [
            rng.gen_range(2..4usize),
            rng.gen_range(2..4usize),
            rng.gen_range(2..4usize),
        ];
        let n = dims[0] * dims[1] * dims[2];
        let logits = Tensor4::from_data(
            c,
            dims,
            (0..c * n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let target: Vec<u8> = (0..n).map(|_| rng.gen_range(0..c as u8)).collect();

        // gamma = 0, uniform alpha === cross-entropy.
        let (fl0, _) = focal_loss(&logits, &target, &FocalParams::uniform(c, 0.0)).unwrap();
        let ce = mean_cross_entropy(&logits, &target).unwrap();
        max_ce_diff = max_ce_diff.max((fl0 - ce).abs());

        // Gradient check at gamma = 2 with imbalance weighting.
        let params = FocalParams::weighted(c, 2.0, 0.75, 0.25);
        let (_, grad) = focal_loss(&logits, &target, &params).unwrap();
        let h = 1e-5;
        for i in 0..logits.data.len() {
            let mut up = logits.clone();
            up.data[i] += h;
            let mut dn = logits.clone();
            dn.data[i] -= h;
            let (lu, _) = focal_loss(&up, &target, &params).unwrap();
            let (ld, _) = focal_loss(&dn, &target, &params).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            let denom = grad.data[i].abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(((grad.data[i] - fd) / denom).abs());
        }
    }
    let ok = max_ce_diff < 1e-6 && max_rel < 1e-3;
    report(
        "focal-loss",
        ok && t0.elapsed().as_secs() < 30,
        &format!(
            "gamma=0 vs CE max diff {max_ce_diff:.2e} (limit 1e-6), \
             gradient max rel err {max_rel:.2e} (limit 1e-3), {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

/// Transfer init: segmentation -> detector re-initializes exactly the
/// final-layer tensors; all others are bitwise-equal to the source
/// (manifest-intersection oracle).
#[test]
fn acceptance_transfer_init() {
    let t0 = Instant::now();
    let seg_spec = VoxelClassifierSpec {
        in_channels: 1,
        num_classes: 3,
        depth: 3,
        base_channels: 4,
    };
    let det_spec = VoxelClassifierSpec {
        num_classes: 7,
        ..seg_spec.clone()
    };
    let seg = ModelWeights::from_model(&build_model(&seg_spec, 5).unwrap(), "coarse-seg", [2.0; 3]);
    let (out, rep) = transfer_init(&det_spec, &seg, 99).unwrap();

    // Manifest-intersection oracle over the two weight manifests.
    let fresh = ModelWeights::from_model(&build_model(&det_spec, 99).unwrap(), "x", [2.0; 3]);
    let mut oracle_copied = Vec::new();
    let mut oracle_reinit = Vec::new();
    for (name, t) in &fresh.tensors {
        match seg.tensors.get(name) {
            Some(s) if s.shape == t.shape => oracle_copied.push(name.clone()),
            _ => oracle_reinit.push(name.clone()),
        }
    }
    let bitwise = rep
        .copied
        .iter()
        .all(|n| out.tensors[n].data == seg.tensors[n].data);
    let ok = rep.copied == oracle_copied
        && rep.reinitialized == oracle_reinit
        && oracle_reinit == vec!["head.weight".to_string(), "head.bias".to_string()]
        && bitwise;
    report(
        "transfer-init",
        ok && t0.elapsed().as_secs() < 10,
        &format!(
            "{} copied bitwise, re-initialized {:?}, {:.1}s",
            rep.copied.len(),
            rep.reinitialized,
            t0.elapsed().as_secs_f64()
        ),
    );
}

struct ConstModel {
    probs: Vec<f64>,
}

impl VoxelModel for ConstModel {
    fn num_classes(&self) -> usize {
        self.probs.len()
    }
    fn predict_probs(&self, input: &Tensor4) -> Result<Tensor4> {
        let mut t = Tensor4::zeros(self.probs.len(), input.dims);
        for (c, &p) in self.probs.iter().enumerate() {
            t.channel_mut(c).fill(p);
        }
        Ok(t)
    }
}

/// Stitching: constant-mock-model sliding-window output equals the
/// whole-volume output for overlap in {0, 0.25, 0.5}; per-voxel
/// probability normalization within 1e-5.
#[test]
fn acceptance_stitching() {
    let t0 = Instant::now();
    let grid = Grid::new([40, 36, 28], [1.0; 3], [0.0; 3]).unwrap();
    let data = (0..grid.num_voxels()).map(|i| (i % 13) as f64).collect();
    let vol = Volume::new(grid, VolumeKind::Image, data).unwrap();
    let model = ConstModel {
        probs: vec![0.6, 0.1, 0.3],
    };
    // Whole-volume reference: the model output itself.
    let mut max_dev = 0.0f64;
    let mut max_norm_dev = 0.0f64;
    for overlap in [0.0, 0.25, 0.5] {
        let (probs, _) = sliding_window_infer(&model, &vol, [16, 16, 16], overlap).unwrap();
        let n = probs.grid().num_voxels();
        for v in 0..n {
            let mut sum = 0.0;
            for (c, &expect) in model.probs.iter().enumerate() {
                max_dev = max_dev.max((probs.at(c, v) - expect).abs());
                sum += probs.at(c, v);
            }
            max_norm_dev = max_norm_dev.max((sum - 1.0).abs());
        }
    }
    let ok = max_dev < 1e-9 && max_norm_dev < 1e-5;
    report(
        "stitching",
        ok && t0.elapsed().as_secs() < 60,
        &format!(
            "constant-model max deviation {max_dev:.2e} across overlaps {{0, 0.25, 0.5}}, \
             normalization max |sum-1| {max_norm_dev:.2e} (limit 1e-5), {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

/// Geometry: crop / paste / merge voxel assignments match brute-force
/// containment oracles on 50 randomized configurations; the merged mask
/// grid equals the input grid exactly.
#[test]
fn acceptance_geometry_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut trials = 0usize;
    for trial in 0..50 {
        // Random reference volume with random labels.
        let dims = [
            rng.gen_range(6..12usize),
            rng.gen_range(6..12usize),
            rng.gen_range(6..12usize),
        ];
        let spacing = [
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.5..2.0),
        ];
        let origin = [
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
        ];
        let grid = Grid::new(dims, spacing, origin).unwrap();
        let data: Vec<f64> = (0..grid.num_voxels())
            .map(|_| rng.gen_range(0..3) as f64)
            .collect();
        let reference = Volume::new(grid.clone(), VolumeKind::Label, data).unwrap();

        // Random roi intersecting the volume.
        let (lo, hi) = grid.world_extent();
        let roi = loop {
            let a = [
                rng.gen_range(lo[0] - 4.0..hi[0]),
                rng.gen_range(lo[1] - 4.0..hi[1]),
                rng.gen_range(lo[2] - 4.0..hi[2]),
            ];
            let b = [
                a[0] + rng.gen_range(1.0..8.0),
                a[1] + rng.gen_range(1.0..8.0),
                a[2] + rng.gen_range(1.0..8.0),
            ];
            let s = [
                rng.gen_range(0.4..1.5),
                rng.gen_range(0.4..1.5),
                rng.gen_range(0.4..1.5),
            ];
            let roi = RoiBox::new(a, b, s).unwrap();
            if roi.clipped_to(&grid).is_some() {
                break roi;
            }
        };

        // Crop against a per-voxel world-to-voxel lookup oracle.
        let cropped = reference.crop(&roi, Interp::Nearest).unwrap();
        let cg = cropped.grid();
        for k in 0..cg.dims[2] {
            for j in 0..cg.dims[1] {
                for i in 0..cg.dims[0] {
                    let p = cg.voxel_to_world([i as f64, j as f64, k as f64]);
                    let expect = if grid.contains_world(p) {
                        let idx = grid.world_to_voxel(p);
                        let vi = [
                            (idx[0].round().max(0.0) as usize).min(dims[0] - 1),
                            (idx[1].round().max(0.0) as usize).min(dims[1] - 1),
                            (idx[2].round().max(0.0) as usize).min(dims[2] - 1),
                        ];
                        reference.voxel(vi[0], vi[1], vi[2])
                    } else {
                        0.0
                    };
                    assert_eq!(cropped.voxel(i, j, k), expect, "crop trial {trial}");
                }
            }
        }

        // Paste against a brute-force containment + nearest-lookup oracle.
        let pasted = cropped.paste_into_reference(&reference).unwrap();
        assert_eq!(pasted.grid(), reference.grid());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                    let expect = if cg.contains_world(p) {
                        let idx = cg.world_to_voxel(p);
                        let vi = [
                            (idx[0].round().max(0.0) as usize).min(cg.dims[0] - 1),
                            (idx[1].round().max(0.0) as usize).min(cg.dims[1] - 1),
                            (idx[2].round().max(0.0) as usize).min(cg.dims[2] - 1),
                        ];
                        cropped.voxel(vi[0], vi[1], vi[2])
                    } else {
                        0.0
                    };
                    assert_eq!(pasted.voxel(i, j, k), expect, "paste trial {trial}");
                }
            }
        }

        // Merge precedence against the containment oracle.
        let thin_grid = Grid::new(
            [3, 3, 3],
            [1.0; 3],
            [
                rng.gen_range(lo[0]..hi[0]),
                rng.gen_range(lo[1]..hi[1]),
                rng.gen_range(lo[2]..hi[2]),
            ],
        )
        .unwrap();
        let thin = Volume::filled(thin_grid, VolumeKind::Label, 2.0).unwrap();
        let merged = merge_refined_masks(
            None,
            Some(&cropped),
            std::slice::from_ref(&thin),
            &reference,
        )
        .unwrap();
        assert_eq!(merged.grid(), reference.grid(), "merged grid must equal input grid");
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                    let expect = if thin.grid().contains_world(p) {
                        2.0
                    } else if cg.contains_world(p) {
                        let idx = cg.world_to_voxel(p);
                        let vi = [
                            (idx[0].round().max(0.0) as usize).min(cg.dims[0] - 1),
                            (idx[1].round().max(0.0) as usize).min(cg.dims[1] - 1),
                            (idx[2].round().max(0.0) as usize).min(cg.dims[2] - 1),
                        ];
                        cropped.voxel(vi[0], vi[1], vi[2])
                    } else {
                        0.0
                    };
                    assert_eq!(merged.voxel(i, j, k), expect, "merge trial {trial}");
                }
            }
        }
        trials += 1;
    }
    report(
        "geometry-oracles",
        trials == 50 && t0.elapsed().as_secs() < 60,
        &format!(
            "crop/paste/merge matched brute-force oracles on {trials}/50 randomized \
             configurations, {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

/// Metrics: DSC/SEN/PPV/RMSE/TPR match scalar oracles on hand-built cases;
/// dice symmetry and SEN(a,b) = PPV(b,a) duality hold on randomized masks.
#[test]
fn acceptance_metrics_oracles() {
    let t0 = Instant::now();
    let vol = |labels: Vec<f64>| {
        let grid = Grid::new([labels.len(), 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        Volume::new(grid, VolumeKind::Label, labels).unwrap()
    };
    // Hand-built scalar oracles.
    let mut p = vec![0.0; 300];
    let mut g = vec![0.0; 300];
    for i in 0..100 {
        p[i] = 1.0;
    }
    for i in 50..150 {
        g[i] = 1.0;
    }
    let (vp, vg) = (vol(p), vol(g));
    let dice_ok = (metrics::dice(&vp, &vg, 1).unwrap() - 0.5).abs() < 1e-12;
    let sen_ok = (metrics::sensitivity(&vp, &vg, 1).unwrap().unwrap() - 0.5).abs() < 1e-12;
    let ppv_ok = (metrics::ppv(&vp, &vg, 1).unwrap().unwrap() - 0.5).abs() < 1e-12;

    let lm = |name: &str, pos: [f64; 3], present: bool| Landmark {
        name: name.into(),
        group: LandmarkGroup::Bone,
        position: pos,
        present,
    };
    let gt = LandmarkSet::new(vec![
        lm("a", [0.0; 3], true),
        lm("b", [10.0, 0.0, 0.0], true),
    ])
    .unwrap();
    let pred = LandmarkSet::new(vec![
        lm("a", [3.0, 0.0, 0.0], true),
        lm("b", [10.0, 4.0, 3.0], true), // 5 mm off
    ])
    .unwrap();
    // Oracle: sqrt((9 + 25)/2).
    let rmse = metrics::landmark_rmse(&pred, &gt, LandmarkGroup::Bone).unwrap();
    let rmse_ok = (rmse - (34.0f64 / 2.0).sqrt()).abs() < 1e-12;
    // tau = 4: only 'a' (3 mm) hits -> 50%.
    let tpr = metrics::landmark_tpr(&pred, &gt, LandmarkGroup::Bone, 4.0).unwrap();
    let tpr_ok = (tpr - 50.0).abs() < 1e-12;

    // Randomized symmetry and duality.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut duality_ok = true;
    for _ in 0..25 {
        let a: Vec<f64> = (0..120).map(|_| rng.gen_range(0..2) as f64).collect();
        let b: Vec<f64> = (0..120).map(|_| rng.gen_range(0..2) as f64).collect();
        let (va, vb) = (vol(a), vol(b));
        if metrics::dice(&va, &vb, 1).unwrap() != metrics::dice(&vb, &va, 1).unwrap() {
            duality_ok = false;
        }
        if metrics::sensitivity(&va, &vb, 1).unwrap() != metrics::ppv(&vb, &va, 1).unwrap() {
            duality_ok = false;
        }
    }
    let ok = dice_ok && sen_ok && ppv_ok && rmse_ok && tpr_ok && duality_ok;
    report(
        "metrics-oracles",
        ok && t0.elapsed().as_secs() < 30,
        &format!(
            "scalar oracles matched (dice/sen/ppv/rmse/tpr), symmetry and \
             SEN(a,b)=PPV(b,a) held on 25 randomized masks, {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}
