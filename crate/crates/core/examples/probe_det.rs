use cmfseg_core::landmark::*;
use cmfseg_core::model::{ModelWeights, Tensor4, VoxelModel};
use cmfseg_core::nifti::read_volume;
use cmfseg_core::trainer::normalize_image;
use cmfseg_core::volume::Interp;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let weights = ModelWeights::load(&args[1]).unwrap();
    let group = match args[2].as_str() {
        "bone" => LandmarkGroup::Bone,
        "face" => LandmarkGroup::Face,
        _ => LandmarkGroup::Teeth,
    };
    let model = weights.instantiate().unwrap();
    let case = &args[3];
    let img = read_volume(format!("{case}/image.nii.gz")).unwrap();
    let gt_lms = read_landmarks(format!("{case}/landmarks.csv")).unwrap();
    let down = img.resample(weights.input_spacing, Interp::Linear).unwrap();
    let down = normalize_image(&down, 0.0, 1000.0).unwrap();
    let probs = model.predict_probs(&Tensor4::from_volume(&down)).unwrap();
    let probs = probs.into_prob_volume(down.grid().clone()).unwrap();
    let subset = gt_lms.group_subset(group);
    let n = probs.grid().num_voxels();
    for (i, lm) in subset.entries().iter().enumerate() {
        let ch = probs.class_slice(i + 1);
        let max_p = ch.iter().cloned().fold(0.0f64, f64::max);
        let count_05 = ch.iter().filter(|&&p| p > 0.5).count();
        let count_02 = ch.iter().filter(|&&p| p > 0.2).count();
        println!("{}: max_p {:.3}, >0.5: {count_05}, >0.2: {count_02}", lm.name, max_p);
    }
    let _ = n;
    for thr in [0.5, 0.3, 0.2, 0.1] {
        let decoded = decode_landmarks(&probs, &subset, thr, DecodeMode::WeightedCentroid).unwrap();
        let present = decoded.entries().iter().filter(|e| e.present).count();
        let rmse = cmfseg_core::metrics::landmark_rmse(&decoded, &subset, group);
        println!("thr {thr}: present {present}/{}, rmse {rmse:?}", subset.len());
    }
}
