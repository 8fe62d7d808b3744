//! Focal loss over per-voxel class logits.
//!
//! FL(p_t) = -alpha_t * (1 - p_t)^gamma * log(p_t), averaged over voxels,
//! where p_t is the softmax probability of the true class. gamma = 0 with
//! uniform alpha reduces to mean cross-entropy.

use rayon::prelude::*;

use super::tensor::Tensor4;
use crate::error::{Error, Result};

const P_CLAMP: f64 = 1e-12;

/// Per-class weights; `alpha[c]` weighs voxels whose true class is `c`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: Vec<f64>,
}

impl FocalParams {
    pub fn uniform(num_classes: usize, gamma: f64) -> Self {
        FocalParams {
            gamma,
            alpha: vec![1.0; num_classes],
        }
    }

    /// The conventional imbalance weighting: background alpha_bg, all
    /// foreground classes alpha_fg.
    pub fn weighted(num_classes: usize, gamma: f64, alpha_bg: f64, alpha_fg: f64) -> Self {
        let mut alpha = vec![alpha_fg; num_classes];
        alpha[0] = alpha_bg;
        FocalParams { gamma, alpha }
    }
}

/// Compute the focal loss and its gradient with respect to the logits.
///
/// `target` holds one class label per voxel (x-fastest order, matching the
/// logit tensor's spatial layout).
pub fn focal_loss(
    logits: &Tensor4,
    target: &[u8],
    params: &FocalParams,
) -> Result<(f64, Tensor4)> {
    let n = logits.spatial_len();
    let c = logits.channels;
    if target.len() != n {
        return Err(Error::GridMismatch(format!(
            "target has {} voxels, logits have {n}",
            target.len()
        )));
    }
    if params.alpha.len() != c {
        return Err(Error::Configuration(format!(
            "alpha has {} entries for {c} classes",
            params.alpha.len()
        )));
    }
    if params.gamma < 0.0 {
        return Err(Error::InvalidArgument("gamma must be >= 0".into()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
        return Err(Error::InvalidTarget(format!(
            "label {bad} is out of range for {c} classes"
        )));
    }
    let gamma = params.gamma;
    let mut grad = Tensor4::zeros(c, logits.dims);
    let inv_n = 1.0 / n as f64;

    // Chunked over voxels; per-chunk partial losses are summed in fixed
    // chunk order so the result is deterministic under any thread count.
    const CHUNK: usize = 1 << 14;
    let n_chunks = n.div_ceil(CHUNK);
    let logits_data = &logits.data;
    let alpha = &params.alpha;
    // Collect (chunk_index, partial_loss, grad_fragment) then stitch.
    let partials: Vec<(f64, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk_i| {
            let v0 = chunk_i * CHUNK;
            let v1 = (v0 + CHUNK).min(n);
            let mut probs = vec![0.0f64; c];
            let mut frag = vec![0.0f64; c * (v1 - v0)];
            let mut loss = 0.0;
            for v in v0..v1 {
                let t = target[v] as usize;
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(logits_data[ch * n + v]);
                }
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (logits_data[ch * n + v] - m).exp();
                    probs[ch] = e;
                    sum += e;
                }
                for p in probs.iter_mut() {
                    *p /= sum;
                }
                let a = alpha[t];
                let pt = probs[t].clamp(P_CLAMP, 1.0 - P_CLAMP);
                let one_m = 1.0 - pt;
                loss += -a * one_m.powf(gamma) * pt.ln();
                let mut dl_dpt = -a * one_m.powf(gamma) / pt;
                if gamma > 0.0 {
                    dl_dpt += a * gamma * one_m.powf(gamma - 1.0) * pt.ln();
                }
                for ch in 0..c {
                    let delta = if ch == t { 1.0 } else { 0.0 };
                    frag[ch * (v1 - v0) + (v - v0)] =
                        dl_dpt * pt * (delta - probs[ch]) * inv_n;
                }
            }
            (loss, frag)
        })
        .collect();

    let mut loss = 0.0;
    for (chunk_i, (partial, frag)) in partials.into_iter().enumerate() {
        loss += partial;
        let v0 = chunk_i * CHUNK;
        let len = frag.len() / c;
        for ch in 0..c {
            grad.data[ch * n + v0..ch * n + v0 + len]
                .copy_from_slice(&frag[ch * len..(ch + 1) * len]);
        }
    }
    Ok((loss * inv_n, grad))
}

/// Mean cross-entropy (the gamma = 0, uniform-alpha special case), kept as
/// an independent reference implementation.
pub fn mean_cross_entropy(logits: &Tensor4, target: &[u8]) -> Result<f64> {
    let n = logits.spatial_len();
    let c = logits.channels;
    if target.len() != n {
        return Err(Error::GridMismatch("target/logits size mismatch".into()));
    }
    let mut loss = 0.0;
    for v in 0..n {
        let t = target[v] as usize;
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(logits.data[ch * n + v]);
        }
        let mut lse = 0.0;
        for ch in 0..c {
            lse += (logits.data[ch * n + v] - m).exp();
        }
        let log_pt = logits.data[t * n + v] - m - lse.ln();
        loss -= log_pt;
    }
    Ok(loss / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_case(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> (Tensor4, Vec<u8>) {
        let n = dims[0] * dims[1] * dims[2];
        let logits = Tensor4::from_data(
            c,
            dims,
            (0..c * n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let target = (0..n).map(|_| rng.gen_range(0..c as u8)).collect();
        (logits, target)
    }

    #[test]
    fn perfect_prediction_drives_loss_to_zero() {
        // Very confident, correct logits: p_t -> 1, loss -> 0.
        let dims = [2, 2, 1];
        let n = 4;
        let mut logits = Tensor4::zeros(2, dims);
        let target = vec![1u8; n];
        for v in 0..n {
            logits.data[v] = -30.0;
            logits.data[n + v] = 30.0;
        }
        let (loss, _) = focal_loss(&logits, &target, &FocalParams::uniform(2, 2.0)).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn gamma_zero_uniform_alpha_equals_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let (logits, target) = rand_case(&mut rng, 4, [3, 3, 2]);
            let (fl, _) = focal_loss(&logits, &target, &FocalParams::uniform(4, 0.0)).unwrap();
            let ce = mean_cross_entropy(&logits, &target).unwrap();
            assert!((fl - ce).abs() < 1e-6, "{fl} vs {ce}");
        }
    }

    #[test]
    fn single_voxel_scalar_oracle() {
        // Two classes, p_t = 0.3, gamma = 2, alpha = 1:
        // loss = -(0.7)^2 * ln(0.3) = 0.58994667411970864 (scalar oracle).
        let p = 0.3f64;
        let logits = Tensor4::from_data(2, [1, 1, 1], vec![0.0, (p / (1.0 - p)).ln()]).unwrap();
        let target = vec![1u8];
        let (loss, _) = focal_loss(&logits, &target, &FocalParams::uniform(2, 2.0)).unwrap();
        assert!((loss - 0.589_946_674_119_708_6).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let params = FocalParams::weighted(3, 2.0, 0.75, 0.25);
        for trial in 0..20 {
            let (logits, target) = rand_case(&mut rng, 3, [2, 2, 2]);
            let (_, grad) = focal_loss(&logits, &target, &params).unwrap();
            let h = 1e-5;
            for i in 0..logits.data.len() {
                let mut up = logits.clone();
                up.data[i] += h;
                let (lu, _) = focal_loss(&up, &target, &params).unwrap();
                let mut dn = logits.clone();
                dn.data[i] -= h;
                let (ld, _) = focal_loss(&dn, &target, &params).unwrap();
                let fd = (lu - ld) / (2.0 * h);
                let denom = grad.data[i].abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((grad.data[i] - fd) / denom).abs() < 1e-3,
                    "trial {trial} component {i}: analytic {} vs fd {fd}",
                    grad.data[i]
                );
            }
        }
    }

    #[test]
    fn class_permutation_equivariance() {
        // Swapping two classes in logits, targets, and alpha leaves the
        // loss unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let (logits, target) = rand_case(&mut rng, 3, [2, 2, 2]);
        let params = FocalParams {
            gamma: 2.0,
            alpha: vec![0.7, 0.2, 0.1],
        };
        let (loss, _) = focal_loss(&logits, &target, &params).unwrap();

        // Permutation: swap classes 0 and 2.
        let n = logits.spatial_len();
        let mut perm = logits.clone();
        perm.channel_mut(0).copy_from_slice(&logits.data[2 * n..3 * n]);
        perm.channel_mut(2).copy_from_slice(&logits.data[0..n]);
        let target_p: Vec<u8> = target
            .iter()
            .map(|&t| match t {
                0 => 2,
                2 => 0,
                t => t,
            })
            .collect();
        let params_p = FocalParams {
            gamma: 2.0,
            alpha: vec![0.1, 0.2, 0.7],
        };
        let (loss_p, _) = focal_loss(&perm, &target_p, &params_p).unwrap();
        assert!((loss - loss_p).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_invalid_target() {
        let logits = Tensor4::zeros(2, [1, 1, 1]);
        let err = focal_loss(&logits, &[5u8], &FocalParams::uniform(2, 2.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidTarget(_)));
    }
}
