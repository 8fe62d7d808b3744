use cmfseg_core::landmark::read_landmarks;
use cmfseg_core::metrics;
use cmfseg_core::model::{ModelWeights, Tensor4, VoxelModel};
use cmfseg_core::nifti::read_volume;
use cmfseg_core::trainer::normalize_image;
use cmfseg_core::volume::Interp;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let weights = ModelWeights::load(&args[1]).unwrap();
    let model = weights.instantiate().unwrap();
    let spacing = weights.input_spacing;
    for case in &args[2..] {
        let img = read_volume(format!("{case}/image.nii.gz")).unwrap();
        let gt = read_volume(format!("{case}/mask.nii.gz")).unwrap();
        let down = img.resample(spacing, Interp::Linear).unwrap();
        let down = normalize_image(&down, 0.0, 1000.0).unwrap();
        let gt_down = gt.resample(spacing, Interp::Nearest).unwrap();
        let probs = model.predict_probs(&Tensor4::from_volume(&down)).unwrap();
        let pred = probs
            .into_prob_volume(down.grid().clone())
            .unwrap()
            .argmax_labels()
            .unwrap();
        let _ = read_landmarks(format!("{case}/landmarks.csv")).unwrap();
        for (name, label) in [("midface", 1u32), ("mandible", 2u32)] {
            let d = metrics::dice(&pred, &gt_down, label).unwrap();
            let s = metrics::sensitivity(&pred, &gt_down, label).unwrap();
            let p = metrics::ppv(&pred, &gt_down, label).unwrap();
            let gt_count = gt_down.data().iter().filter(|&&v| v == label as f64).count();
            let pred_count = pred.data().iter().filter(|&&v| v == label as f64).count();
            println!(
                "{case} {name}: DSC {:.3} SEN {:?} PPV {:?} (gt {} voxels, pred {})",
                d,
                s.map(|v| (v * 1000.0).round() / 1000.0),
                p.map(|v| (v * 1000.0).round() / 1000.0),
                gt_count,
                pred_count
            );
        }
    }
}
