use cmfseg_core::model::{build_model, focal_loss, Adam, FocalParams, Tensor4, VoxelClassifierSpec};
use std::time::Instant;

fn main() {
    for (depth, base, dims) in [
        (3usize, 4usize, [64usize, 64, 64]),
        (3, 8, [64, 64, 64]),
        (3, 4, [32, 32, 32]),
        (3, 8, [32, 32, 32]),
    ] {
        let spec = VoxelClassifierSpec { in_channels: 1, num_classes: 3, depth, base_channels: base };
        let mut model = build_model(&spec, 0).unwrap();
        let n = dims[0] * dims[1] * dims[2];
        let x = Tensor4::from_data(1, dims, (0..n).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap();
        let target: Vec<u8> = (0..n).map(|i| ((i / 13) % 3) as u8).collect();
        let params = FocalParams::weighted(3, 2.0, 0.75, 0.25);
        let mut adam = Adam::new(1e-3);

        let t0 = Instant::now();
        let logits = model.forward(&x).unwrap();
        let fwd = t0.elapsed();

        let t1 = Instant::now();
        model.zero_grads();
        let (logits2, ctx) = model.forward_train(&x).unwrap();
        let (_, grad) = focal_loss(&logits2, &target, &params).unwrap();
        model.backward(&ctx, &grad).unwrap();
        adam.step(&mut model);
        let step = t1.elapsed();
        println!(
            "depth={depth} base={base} dims={dims:?}: forward {:.3}s, full step {:.3}s (logits {} ch)",
            fwd.as_secs_f64(), step.as_secs_f64(), logits.channels
        );
    }
}
