//! The shared 3D U-Net-style voxel classifier.
//!
//! One architecture serves every stage: segmentation and landmark detection
//! differ only in `num_classes`. Encoder levels double the channel count and
//! halve resolution (2x max pool); the decoder mirrors them with trilinear
//! upsampling and skip concatenation; a 1x1x1 head maps to class logits.
//!
//! Inputs are zero-padded at the high side to a multiple of 2^(depth-1) and
//! logits are cropped back, so the output spatial size always equals the
//! input's.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    max_pool, max_pool_backward, relu, relu_backward, upsample2, upsample2_backward, Conv3d,
    InstanceNorm, NormCtx,
};
use super::tensor::Tensor4;
use crate::error::{Error, Result};

/// Architecture hyper-parameters of the voxel classifier.
///
/// The channel growth factor is fixed at 2 per level.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VoxelClassifierSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for VoxelClassifierSpec {
    fn default() -> Self {
        VoxelClassifierSpec {
            in_channels: 1,
            num_classes: 3,
            depth: 4,
            base_channels: 16,
        }
    }
}

impl VoxelClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Configuration(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.depth < 2 {
            return Err(Error::Configuration(format!(
                "depth must be >= 2, got {}",
                self.depth
            )));
        }
        if self.in_channels < 1 || self.base_channels < 1 {
            return Err(Error::Configuration(
                "in_channels and base_channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Channels produced by encoder level `l`.
    fn level_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Spatial divisibility required by the pooling ladder.
    pub fn grid_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Check that extents are compatible with the depth without padding,
    /// naming the offending axis otherwise.
    pub fn check_extents(&self, dims: [usize; 3]) -> Result<()> {
        let m = self.grid_multiple();
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 || d % m != 0 {
                return Err(Error::Shape {
                    axis,
                    message: format!(
                        "extent {d} is not a positive multiple of {m} (depth {})",
                        self.depth
                    ),
                });
            }
        }
        Ok(())
    }

    /// Total trainable parameter count: a pure function of the spec.
    pub fn param_count(&self) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k * k + co;
        let norm = |c: usize| 2 * c;
        let mut total = 0;
        for l in 0..self.depth {
            let cin = if l == 0 {
                self.in_channels
            } else {
                self.level_channels(l - 1)
            };
            let cout = self.level_channels(l);
            total += conv(cin, cout, 3) + norm(cout) + conv(cout, cout, 3) + norm(cout);
        }
        for l in 0..self.depth - 1 {
            let cin = self.level_channels(l) + self.level_channels(l + 1);
            let cout = self.level_channels(l);
            total += conv(cin, cout, 3) + norm(cout) + conv(cout, cout, 3) + norm(cout);
        }
        total + conv(self.level_channels(0), self.num_classes, 1)
    }
}

/// conv3 -> norm -> relu -> conv3 -> norm -> relu.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv3d,
    pub norm1: InstanceNorm,
    pub conv2: Conv3d,
    pub norm2: InstanceNorm,
}

pub struct BlockCtx {
    x_in: Tensor4,
    n1: NormCtx,
    r1: Tensor4,
    n2: NormCtx,
    r2: Tensor4,
}

impl ConvBlock {
    fn init(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv1: Conv3d::init(cin, cout, 3, rng),
            norm1: InstanceNorm::init(cout),
            conv2: Conv3d::init(cout, cout, 3, rng),
            norm2: InstanceNorm::init(cout),
        }
    }

    fn forward(&self, x: &Tensor4) -> (Tensor4, BlockCtx) {
        let c1 = self.conv1.forward(x);
        let (y1, n1) = self.norm1.forward(&c1);
        let r1 = relu(y1);
        let c2 = self.conv2.forward(&r1);
        let (y2, n2) = self.norm2.forward(&c2);
        let r2 = relu(y2);
        let ctx = BlockCtx {
            x_in: x.clone(),
            n1,
            r1: r1.clone(),
            n2,
            r2: r2.clone(),
        };
        (r2, ctx)
    }

    fn backward(&mut self, ctx: &BlockCtx, gout: Tensor4) -> Tensor4 {
        let g = relu_backward(gout, &ctx.r2);
        let g = self.norm2.backward(&g, &ctx.n2);
        let g = self.conv2.backward(&ctx.r1, &g);
        let g = relu_backward(g, &ctx.r1);
        let g = self.norm1.backward(&g, &ctx.n1);
        self.conv1.backward(&ctx.x_in, &g)
    }

    fn zero_grads(&mut self) {
        self.conv1.zero_grads();
        self.norm1.zero_grads();
        self.conv2.zero_grads();
        self.norm2.zero_grads();
    }
}

/// The full encoder-decoder voxel classifier.
#[derive(Debug, Clone)]
pub struct VoxelClassifier {
    spec: VoxelClassifierSpec,
    pub(crate) enc: Vec<ConvBlock>,
    pub(crate) dec: Vec<ConvBlock>,
    pub(crate) head: Conv3d,
}

/// Cached activations from a training forward pass.
pub struct ForwardCtx {
    orig_dims: [usize; 3],
    padded_dims: [usize; 3],
    enc_ctx: Vec<BlockCtx>,
    enc_out_dims: Vec<[usize; 3]>,
    pool_idx: Vec<Vec<u8>>,
    dec_ctx: Vec<Option<BlockCtx>>,
    head_in: Tensor4,
}

/// Deterministically build a classifier from its spec and seed.
pub fn build_model(spec: &VoxelClassifierSpec, seed: u64) -> Result<VoxelClassifier> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = Vec::with_capacity(spec.depth);
    for l in 0..spec.depth {
        let cin = if l == 0 {
            spec.in_channels
        } else {
            spec.level_channels(l - 1)
        };
        enc.push(ConvBlock::init(cin, spec.level_channels(l), &mut rng));
    }
    let mut dec = Vec::with_capacity(spec.depth - 1);
    for l in 0..spec.depth - 1 {
        let cin = spec.level_channels(l) + spec.level_channels(l + 1);
        dec.push(ConvBlock::init(cin, spec.level_channels(l), &mut rng));
    }
    let head = Conv3d::init(spec.level_channels(0), spec.num_classes, 1, &mut rng);
    Ok(VoxelClassifier {
        spec: spec.clone(),
        enc,
        dec,
        head,
    })
}

impl VoxelClassifier {
    pub fn spec(&self) -> &VoxelClassifierSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.head.param_count();
        for b in self.enc.iter().chain(&self.dec) {
            n += b.conv1.param_count()
                + b.norm1.param_count()
                + b.conv2.param_count()
                + b.norm2.param_count();
        }
        n
    }

    fn padded_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let m = self.spec.grid_multiple();
        let up = |d: usize| d.div_ceil(m) * m;
        [up(dims[0]), up(dims[1]), up(dims[2])]
    }

    /// Forward pass producing per-voxel logits at the input's spatial size.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        Ok(self.forward_impl(input, false)?.0)
    }

    /// Forward pass that also returns the activation cache for backward.
    pub fn forward_train(&self, input: &Tensor4) -> Result<(Tensor4, ForwardCtx)> {
        let (logits, ctx) = self.forward_impl(input, true)?;
        Ok((logits, ctx.expect("training forward keeps its context")))
    }

    fn forward_impl(&self, input: &Tensor4, keep: bool) -> Result<(Tensor4, Option<ForwardCtx>)> {
        if input.channels != self.spec.in_channels {
            return Err(Error::Configuration(format!(
                "input has {} channels, model expects {}",
                input.channels, self.spec.in_channels
            )));
        }
        for (axis, &d) in input.dims.iter().enumerate() {
            if d == 0 {
                return Err(Error::Shape {
                    axis,
                    message: "input extent must be >= 1".into(),
                });
            }
        }
        let orig_dims = input.dims;
        let padded = self.padded_dims(orig_dims);
        let x = input.pad_to(padded);

        let mut enc_ctx = Vec::with_capacity(self.spec.depth);
        let mut enc_out: Vec<Tensor4> = Vec::with_capacity(self.spec.depth);
        let mut enc_out_dims = Vec::with_capacity(self.spec.depth);
        let mut pool_idx = Vec::with_capacity(self.spec.depth - 1);
        let mut cur = x;
        for l in 0..self.spec.depth {
            let (out, ctx) = self.enc[l].forward(&cur);
            enc_out_dims.push(out.dims);
            if l < self.spec.depth - 1 {
                let (pooled, idx) = max_pool(&out);
                pool_idx.push(idx);
                cur = pooled;
            } else {
                cur = out.clone();
            }
            enc_out.push(out);
            enc_ctx.push(ctx);
        }

        let mut dec_ctx: Vec<Option<BlockCtx>> = (0..self.spec.depth - 1).map(|_| None).collect();
        for l in (0..self.spec.depth - 1).rev() {
            let up = upsample2(&cur);
            let cat = Tensor4::concat_channels(&enc_out[l], &up)?;
            let (out, ctx) = self.dec[l].forward(&cat);
            dec_ctx[l] = Some(ctx);
            cur = out;
        }

        let logits_padded = self.head.forward(&cur);
        let logits = logits_padded.crop_to(orig_dims);

        let ctx = if keep {
            Some(ForwardCtx {
                orig_dims,
                padded_dims: padded,
                enc_ctx,
                enc_out_dims,
                pool_idx,
                dec_ctx,
                head_in: cur,
            })
        } else {
            None
        };
        Ok((logits, ctx))
    }

    /// Backward pass; accumulates parameter gradients.
    ///
    /// Encoder level `l` receives gradient from two paths (its skip into
    /// decoder level `l`, and the pooled path through level `l+1`), so the
    /// decoder is unwound first, collecting skip gradients, and the encoder
    /// is then swept bottom-up with both contributions summed.
    pub fn backward(&mut self, ctx: &ForwardCtx, grad_logits: &Tensor4) -> Result<()> {
        if grad_logits.dims != ctx.orig_dims {
            return Err(Error::GridMismatch(
                "logit gradient dims differ from the forward input".into(),
            ));
        }
        let depth = self.spec.depth;
        let g = grad_logits.pad_to(ctx.padded_dims);
        let mut g_dec = self.head.backward(&ctx.head_in, &g);

        // Fine-to-coarse through the decoder.
        let mut g_skip: Vec<Option<Tensor4>> = (0..depth - 1).map(|_| None).collect();
        for l in 0..depth - 1 {
            let block_ctx = ctx.dec_ctx[l].as_ref().expect("decoder context");
            let g_cat = self.dec[l].backward(block_ctx, g_dec);
            let (skip, g_up) = g_cat.split_channels(self.spec.level_channels(l));
            g_skip[l] = Some(skip);
            g_dec = upsample2_backward(&g_up, ctx.enc_out_dims[l + 1]);
        }

        // Bottom-up through the encoder; g_dec now targets the bottom block.
        let mut g_out = g_dec;
        for l in (0..depth).rev() {
            if l < depth - 1 {
                let skip = g_skip[l].take().expect("skip gradient");
                for (a, b) in g_out.data.iter_mut().zip(&skip.data) {
                    *a += b;
                }
            }
            let g_in = self.enc[l].backward(&ctx.enc_ctx[l], g_out);
            if l == 0 {
                break;
            }
            g_out = max_pool_backward(&g_in, &ctx.pool_idx[l - 1], ctx.enc_out_dims[l - 1]);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for b in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            b.zero_grads();
        }
        self.head.zero_grads();
    }

    /// Visit every parameter/gradient pair in a stable order, with shapes.
    pub fn for_each_param<F: FnMut(&str, Vec<usize>, &[f64], &[f64])>(&self, mut f: F) {
        let conv_shape = |c: &Conv3d| vec![c.out_c, c.in_c, c.ksize, c.ksize, c.ksize];
        let visit_block = |name: &str, b: &ConvBlock, f: &mut F| {
            f(&format!("{name}.conv1.weight"), conv_shape(&b.conv1), &b.conv1.weight, &b.conv1.grad_weight);
            f(&format!("{name}.conv1.bias"), vec![b.conv1.out_c], &b.conv1.bias, &b.conv1.grad_bias);
            f(&format!("{name}.norm1.gamma"), vec![b.norm1.channels], &b.norm1.gamma, &b.norm1.grad_gamma);
            f(&format!("{name}.norm1.beta"), vec![b.norm1.channels], &b.norm1.beta, &b.norm1.grad_beta);
            f(&format!("{name}.conv2.weight"), conv_shape(&b.conv2), &b.conv2.weight, &b.conv2.grad_weight);
            f(&format!("{name}.conv2.bias"), vec![b.conv2.out_c], &b.conv2.bias, &b.conv2.grad_bias);
            f(&format!("{name}.norm2.gamma"), vec![b.norm2.channels], &b.norm2.gamma, &b.norm2.grad_gamma);
            f(&format!("{name}.norm2.beta"), vec![b.norm2.channels], &b.norm2.beta, &b.norm2.grad_beta);
        };
        for (l, b) in self.enc.iter().enumerate() {
            visit_block(&format!("enc{l}"), b, &mut f);
        }
        for (l, b) in self.dec.iter().enumerate() {
            visit_block(&format!("dec{l}"), b, &mut f);
        }
        f("head.weight", conv_shape(&self.head), &self.head.weight, &self.head.grad_weight);
        f("head.bias", vec![self.head.out_c], &self.head.bias, &self.head.grad_bias);
    }

    /// Visit every (parameter, gradient) pair mutably in the same order as
    /// [`VoxelClassifier::for_each_param`].
    pub fn for_each_param_mut<F: FnMut(&str, &mut Vec<f64>, &Vec<f64>)>(&mut self, mut f: F) {
        let mut visit_block = |name: &str, b: &mut ConvBlock| {
            f(&format!("{name}.conv1.weight"), &mut b.conv1.weight, &b.conv1.grad_weight);
            f(&format!("{name}.conv1.bias"), &mut b.conv1.bias, &b.conv1.grad_bias);
            f(&format!("{name}.norm1.gamma"), &mut b.norm1.gamma, &b.norm1.grad_gamma);
            f(&format!("{name}.norm1.beta"), &mut b.norm1.beta, &b.norm1.grad_beta);
            f(&format!("{name}.conv2.weight"), &mut b.conv2.weight, &b.conv2.grad_weight);
            f(&format!("{name}.conv2.bias"), &mut b.conv2.bias, &b.conv2.grad_bias);
            f(&format!("{name}.norm2.gamma"), &mut b.norm2.gamma, &b.norm2.grad_gamma);
            f(&format!("{name}.norm2.beta"), &mut b.norm2.beta, &b.norm2.grad_beta);
        };
        for l in 0..self.enc.len() {
            let name = format!("enc{l}");
            visit_block(&name, &mut self.enc[l]);
        }
        for l in 0..self.dec.len() {
            let name = format!("dec{l}");
            visit_block(&name, &mut self.dec[l]);
        }
        f("head.weight", &mut self.head.weight, &self.head.grad_weight);
        f("head.bias", &mut self.head.bias, &self.head.grad_bias);
    }
}
