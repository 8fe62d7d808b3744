//! The shared voxel-classifier model family: one 3D U-Net architecture
//! serving segmentation and landmark detection, the focal loss, weight
//! archives with transfer initialization, and the optimizer.

pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;
pub mod unet;
pub mod weights;

pub use loss::{focal_loss, FocalParams};
pub use optim::Adam;
pub use tensor::Tensor4;
pub use unet::{build_model, VoxelClassifier, VoxelClassifierSpec};
pub use weights::{transfer_init, ModelWeights, TransferReport};

use crate::error::Result;

/// Anything that maps an input patch to per-voxel class probabilities.
///
/// Sliding-window inference is written against this trait so tests can
/// substitute mock models.
pub trait VoxelModel: Sync {
    fn num_classes(&self) -> usize;

    /// Per-voxel class probabilities at the input's spatial size
    /// (channels = `num_classes`, each voxel's probabilities sum to 1).
    fn predict_probs(&self, input: &Tensor4) -> Result<Tensor4>;
}

impl VoxelModel for VoxelClassifier {
    fn num_classes(&self) -> usize {
        self.spec().num_classes
    }

    fn predict_probs(&self, input: &Tensor4) -> Result<Tensor4> {
        let mut logits = self.forward(input)?;
        logits.softmax_channels();
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec_d2b4() -> VoxelClassifierSpec {
        VoxelClassifierSpec {
            in_channels: 1,
            num_classes: 3,
            depth: 2,
            base_channels: 4,
        }
    }

    #[test]
    fn output_shape_matches_input_spatial_size() {
        let model = build_model(&spec_d2b4(), 0).unwrap();
        let x = Tensor4::zeros(1, [16, 16, 16]);
        let logits = model.forward(&x).unwrap();
        assert_eq!(logits.channels, 3);
        assert_eq!(logits.dims, [16, 16, 16]);

        // Odd sizes are padded internally and cropped back.
        let x = Tensor4::zeros(1, [7, 10, 5]);
        let logits = model.forward(&x).unwrap();
        assert_eq!(logits.dims, [7, 10, 5]);
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let a = build_model(&spec_d2b4(), 1234).unwrap();
        let b = build_model(&spec_d2b4(), 1234).unwrap();
        let wa = ModelWeights::from_model(&a, "x", [1.0; 3]);
        let wb = ModelWeights::from_model(&b, "x", [1.0; 3]);
        assert_eq!(wa.tensors, wb.tensors);

        let c = build_model(&spec_d2b4(), 1235).unwrap();
        let wc = ModelWeights::from_model(&c, "x", [1.0; 3]);
        assert_ne!(wa.tensors, wc.tensors);
    }

    #[test]
    fn parameter_count_matches_analytic_oracle() {
        // Layer-by-layer tally for depth 2, base 4, 3 classes, 1 input
        // channel (3x3x3 conv = 27 taps, norm = gamma + beta):
        //   enc0: conv(1->4) 4*1*27+4 = 112, norm 8, conv(4->4) 436, norm 8
        //   enc1: conv(4->8) 872, norm 16, conv(8->8) 1736, norm 16
        //   dec0: conv(12->4) 1300, norm 8, conv(4->4) 436, norm 8
        //   head: 1x1 conv(4->3) 15
        let oracle = 112 + 8 + 436 + 8 + 872 + 16 + 1736 + 16 + 1300 + 8 + 436 + 8 + 15;
        assert_eq!(oracle, 4971);
        let spec = spec_d2b4();
        assert_eq!(spec.param_count(), oracle);
        let model = build_model(&spec, 0).unwrap();
        assert_eq!(model.param_count(), oracle);
    }

    #[test]
    fn invalid_specs_are_rejected_and_extent_check_names_axis() {
        let mut bad = spec_d2b4();
        bad.num_classes = 1;
        assert!(build_model(&bad, 0).is_err());

        let spec = VoxelClassifierSpec {
            depth: 3,
            ..spec_d2b4()
        };
        let err = spec.check_extents([16, 18, 16]).unwrap_err();
        match err {
            crate::Error::Shape { axis, .. } => assert_eq!(axis, 1),
            other => panic!("expected shape error, got {other}"),
        }
        assert!(spec.check_extents([16, 16, 16]).is_ok());
    }

    #[test]
    fn softmax_probabilities_sum_to_one_per_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = build_model(&spec_d2b4(), 5).unwrap();
        let x = Tensor4::from_data(
            1,
            [8, 8, 8],
            (0..512).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let probs = model.predict_probs(&x).unwrap();
        let n = probs.spatial_len();
        for v in 0..n {
            let s: f64 = (0..3).map(|c| probs.data[c * n + v]).sum();
            assert!((s - 1.0).abs() < 1e-5, "voxel {v}: sum {s}");
        }
    }

    #[test]
    fn constant_input_yields_constant_interior_logits() {
        let model = build_model(&spec_d2b4(), 3).unwrap();
        let x = Tensor4::from_data(1, [24, 24, 24], vec![0.37; 24 * 24 * 24]).unwrap();
        let logits = model.forward(&x).unwrap();
        // Receptive-field margin for depth 2 is well under 10 voxels.
        let m = 10usize;
        let n = logits.spatial_len();
        let center = (12 * 24 + 12) * 24 + 12;
        for c in 0..3 {
            let reference = logits.data[c * n + center];
            for z in m..24 - m {
                for y in m..24 - m {
                    for xx in m..24 - m {
                        let v = logits.data[c * n + (z * 24 + y) * 24 + xx];
                        assert!(
                            (v - reference).abs() < 1e-9,
                            "class {c} at ({xx},{y},{z}): {v} vs {reference}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        // End-to-end gradient check through conv, norm, relu, pool,
        // upsample, concat and the focal loss on a tiny model.
        let spec = VoxelClassifierSpec {
            in_channels: 1,
            num_classes: 2,
            depth: 2,
            base_channels: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model = build_model(&spec, 11).unwrap();
        let x = Tensor4::from_data(
            1,
            [4, 4, 4],
            (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let target: Vec<u8> = (0..64).map(|_| rng.gen_range(0..2u8)).collect();
        let params = FocalParams::weighted(2, 2.0, 0.75, 0.25);

        model.zero_grads();
        let (logits, ctx) = model.forward_train(&x).unwrap();
        let (_, grad_logits) = focal_loss(&logits, &target, &params).unwrap();
        model.backward(&ctx, &grad_logits).unwrap();

        // Collect analytic gradients.
        let mut analytic: Vec<(String, usize, f64)> = Vec::new();
        model.for_each_param(|name, _, param, grad| {
            // Probe a few entries from every tensor.
            for i in [0, param.len() / 2, param.len() - 1] {
                analytic.push((name.to_string(), i, grad[i]));
            }
        });

        let h = 1e-5;
        for (name, i, g) in analytic {
            let eval = |model: &VoxelClassifier| {
                let logits = model.forward(&x).unwrap();
                focal_loss(&logits, &target, &params).unwrap().0
            };
            let mut up = model.clone();
            up.for_each_param_mut(|n, p, _| {
                if n == name {
                    p[i] += h;
                }
            });
            let mut dn = model.clone();
            dn.for_each_param_mut(|n, p, _| {
                if n == name {
                    p[i] -= h;
                }
            });
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            let denom = g.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((g - fd) / denom).abs() < 1e-3,
                "{name}[{i}]: analytic {g} vs fd {fd}"
            );
        }
    }
}
