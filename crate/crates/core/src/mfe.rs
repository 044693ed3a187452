//! Multi-level feature extraction: a global branch (patch embedding plus
//! windowed self-attention) and a local branch (strided 3-D convolutions),
//! both aligned to a common B x (F·C/2) x (H·W/1024) grid.
//!
//! The attention windows are temporal: tokens at one spatial grid position
//! attend to each other across time but never across positions, so each
//! output position stays attributable to one 32x32 patch of the input.
//! Flattening is frame-major, then channel, then grid position (row-major
//! over the patch grid).
//!
//! Depths are deliberately small (two attention blocks, five conv stages);
//! the output shapes, not the capacity, are the contract.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MfeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad clip shape {shape:?}: {reason}")]
    BadClip { shape: Vec<usize>, reason: String },
    #[error("global {global:?} and local {local:?} features are misaligned")]
    Misaligned { global: Vec<usize>, local: Vec<usize> },
    #[error("clip has {got} frames but the model was built for {expected}")]
    WrongFrames { got: usize, expected: usize },
}

/// The six per-segment features CAM consumes, one (global, local) pair for
/// the init segment (first two frames), the end segment (last frame,
/// duplicated to keep the temporal patch size) and the whole clip. All six
/// share the shape B x (F·C/2) x (H·W/1024).
pub struct FeatureBundle {
    pub init_global: Tensor,
    pub init_local: Tensor,
    pub end_global: Tensor,
    pub end_local: Tensor,
    pub whole_global: Tensor,
    pub whole_local: Tensor,
}

struct AttnBlock {
    wq: Parameter,
    wk: Parameter,
    wv: Parameter,
    wo: Parameter,
}

impl AttnBlock {
    fn new(tag: &str, d: usize, rng: &mut impl Rng) -> Result<AttnBlock, TensorError> {
        Ok(AttnBlock {
            wq: Parameter::init(format!("mfe.{tag}.wq"), &[d, d], d, rng)?,
            wk: Parameter::init(format!("mfe.{tag}.wk"), &[d, d], d, rng)?,
            wv: Parameter::init(format!("mfe.{tag}.wv"), &[d, d], d, rng)?,
            wo: Parameter::init(format!("mfe.{tag}.wo"), &[d, d], d, rng)?,
        })
    }

    /// Pre-softmax scaled dot-product attention with a residual connection;
    /// `x` is [windows, tokens, d].
    fn forward(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let d = *x.shape().last().unwrap() as f64;
        let q = x.matmul(&self.wq.tensor)?;
        let k = x.matmul(&self.wk.tensor)?;
        let v = x.matmul(&self.wv.tensor)?;
        let scores = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(1.0 / d.sqrt())?;
        let mixed = scores.softmax(2)?.matmul(&v)?.matmul(&self.wo.tensor)?;
        x.add(&mixed)
    }
}

pub struct Mfe {
    /// Model channel constant C (paper 64, desk default 4).
    pub channels: usize,
    /// Whole-clip frame count F the fusion/alignment layers are sized for.
    pub frames: usize,
    patch_embed: Parameter,
    blocks: [AttnBlock; 2],
    proj_w: Parameter,
    proj_b: Parameter,
    local_stages: [Parameter; 4],
    adjust: Parameter,
    extra: Parameter,
    fuse_w: Parameter,
    fuse_b: Parameter,
    align_global_w: Parameter,
    align_global_b: Parameter,
    align_local_w: Parameter,
    align_local_b: Parameter,
}

impl Mfe {
    pub fn new(channels: usize, frames: usize, rng: &mut impl Rng) -> Result<Mfe, MfeError> {
        assert!(channels >= 1 && frames >= 2 && frames % 2 == 0);
        let c8 = 8 * channels;
        let k = frames * channels / 2;
        let stage_dims = [(3, 2 * channels), (2 * channels, 4 * channels),
            (4 * channels, 8 * channels), (8 * channels, 16 * channels)];
        let mut local_stages = Vec::new();
        for (i, (cin, cout)) in stage_dims.into_iter().enumerate() {
            local_stages.push(Parameter::init(
                format!("mfe.local.stage{}", i + 1),
                &[3, 3, 3, cin, cout],
                27 * cin,
                rng,
            )?);
        }
        Ok(Mfe {
            channels,
            frames,
            patch_embed: Parameter::init("mfe.patch_embed", &[2, 32, 32, 3, c8], 2 * 32 * 32 * 3, rng)?,
            blocks: [AttnBlock::new("attn1", c8, rng)?, AttnBlock::new("attn2", c8, rng)?],
            proj_w: Parameter::init("mfe.proj.w", &[c8, channels], c8, rng)?,
            proj_b: Parameter::zeros("mfe.proj.b", &[channels])?,
            local_stages: local_stages.try_into().ok().unwrap(),
            adjust: Parameter::init("mfe.local.adjust", &[1, 1, 1, 16 * channels, channels], 16 * channels, rng)?,
            extra: Parameter::init("mfe.local.extra", &[3, 3, 3, channels, channels], 27 * channels, rng)?,
            fuse_w: Parameter::init("mfe.fuse.w", &[2 * k, k], 2 * k, rng)?,
            fuse_b: Parameter::zeros("mfe.fuse.b", &[k])?,
            align_global_w: Parameter::init("mfe.align_global.w", &[channels, k], channels, rng)?,
            align_global_b: Parameter::zeros("mfe.align_global.b", &[k])?,
            align_local_w: Parameter::init("mfe.align_local.w", &[channels, k], channels, rng)?,
            align_local_b: Parameter::zeros("mfe.align_local.b", &[k])?,
        })
    }

    /// Channel count K = F·C/2 of every emitted feature.
    pub fn feature_channels(&self) -> usize {
        self.frames * self.channels / 2
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut out = vec![self.patch_embed.clone()];
        for b in &self.blocks {
            out.extend([b.wq.clone(), b.wk.clone(), b.wv.clone(), b.wo.clone()]);
        }
        out.extend([self.proj_w.clone(), self.proj_b.clone()]);
        out.extend(self.local_stages.iter().cloned());
        out.extend([
            self.adjust.clone(),
            self.extra.clone(),
            self.fuse_w.clone(),
            self.fuse_b.clone(),
            self.align_global_w.clone(),
            self.align_global_b.clone(),
            self.align_local_w.clone(),
            self.align_local_b.clone(),
        ]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.len()).sum()
    }

    fn check_clip(&self, clip: &Tensor) -> Result<(usize, usize, usize, usize), MfeError> {
        let s = clip.shape().to_vec();
        let bad = |reason: String| MfeError::BadClip { shape: s.clone(), reason };
        if s.len() != 5 || s[4] != 3 {
            return Err(bad("expected B x F x H x W x 3".into()));
        }
        if s[1] < 2 || s[1] % 2 != 0 {
            return Err(bad(format!("frame count {} must be even and >= 2", s[1])));
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(bad(format!("spatial size {}x{} must be a positive multiple of 32", s[2], s[3])));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// Global branch: 2x32x32 patch embedding to 8C channels, two temporal-
    /// window attention blocks, projection to C, flatten to B x (F·C/2) x S
    /// with S = H·W/1024.
    pub fn extract_global(&self, clip: &Tensor) -> Result<Tensor, MfeError> {
        let (b, f, h, w) = self.check_clip(clip)?;
        let (t, s) = (f / 2, (h / 32) * (w / 32));
        let c8 = 8 * self.channels;
        let x = clip.conv3d_pad(&self.patch_embed.tensor, (2, 32, 32), (0, 0, 0))?;
        let mut x = x
            .reshape(&[b, t, s, c8])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * s, t, c8])?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = x.matmul(&self.proj_w.tensor)?.bias_add(&self.proj_b.tensor)?;
        Ok(x
            .reshape(&[b, s, t, self.channels])?
            .permute(&[0, 2, 3, 1])?
            .reshape(&[b, t * self.channels, s])?)
    }

    /// Local branch before channel adjustment: four stride-2 spatial conv
    /// stages, B x F x H/16 x W/16 x 16C.
    pub fn extract_local(&self, clip: &Tensor) -> Result<Tensor, MfeError> {
        self.check_clip(clip)?;
        let mut x = clip.clone();
        for stage in &self.local_stages {
            x = x.conv3d(&stage.tensor, (1, 2, 2))?;
        }
        Ok(x)
    }

    /// Local branch aligned to the global grid: pointwise adjust to C, one
    /// more stride-2 spatial stage, average temporal frame pairs, flatten.
    pub fn local_aligned(&self, clip: &Tensor) -> Result<Tensor, MfeError> {
        let (b, f, h, w) = self.check_clip(clip)?;
        let (t, s) = (f / 2, (h / 32) * (w / 32));
        let c = self.channels;
        let x = self.extract_local(clip)?;
        let x = x.conv3d(&self.adjust.tensor, (1, 1, 1))?;
        let x = x.conv3d(&self.extra.tensor, (1, 2, 2))?;
        let x = x.reshape(&[b, t, 2, s * c])?.mean_axis(2)?;
        Ok(x
            .reshape(&[b, t, s, c])?
            .permute(&[0, 1, 3, 2])?
            .reshape(&[b, t * c, s])?)
    }

    /// Per-position linear fusion of an aligned (global, local) pair on the
    /// concatenated channel axis.
    pub fn fuse_multilevel(&self, global: &Tensor, local: &Tensor) -> Result<Tensor, MfeError> {
        let k = self.feature_channels();
        let (gs, ls) = (global.shape().to_vec(), local.shape().to_vec());
        if gs != ls || gs.len() != 3 || gs[1] != k {
            return Err(MfeError::Misaligned { global: gs, local: ls });
        }
        let x = Tensor::concat(1, &[global.clone(), local.clone()])?;
        Ok(x
            .permute(&[0, 2, 1])?
            .matmul(&self.fuse_w.tensor)?
            .bias_add(&self.fuse_b.tensor)?
            .permute(&[0, 2, 1])?)
    }

    /// Lift a 2-frame segment feature (channel dim C) to the whole-clip
    /// channel budget K via a per-position linear map.
    fn align_segment(&self, x: &Tensor, w: &Parameter, bias: &Parameter) -> Result<Tensor, MfeError> {
        Ok(x
            .permute(&[0, 2, 1])?
            .matmul(&w.tensor)?
            .bias_add(&bias.tensor)?
            .permute(&[0, 2, 1])?)
    }

    /// Standardize a feature map per batch element: zero mean, unit variance
    /// over its channel/position grid. The branch stacks contract magnitudes
    /// by a couple of orders on the way down, which starves the downstream
    /// attention gate of logit range; a per-sample standardization restores
    /// O(1) features while leaving the relative channel and position
    /// structure untouched. Centering matters as much as scaling: a scale-only
    /// rescale lets training drown the clip-dependent signal under a large
    /// shared offset, collapsing the features of distinct clips together.
    fn standardize(x: &Tensor) -> Result<Tensor, MfeError> {
        let mean = x.mean_axis(2)?.mean_axis(1)?;
        let centered = x.sub(&mean)?;
        let inv = centered.square()?.mean_axis(2)?.mean_axis(1)?.add_scalar(1e-12)?.powf(-0.5)?;
        Ok(centered.mul(&inv)?)
    }

    /// Run both branches on the whole clip and on the init/end segments.
    /// Every bundle member is rescaled to unit RMS per sample.
    pub fn forward(&self, clip: &Tensor) -> Result<FeatureBundle, MfeError> {
        let (_, f, _, _) = self.check_clip(clip)?;
        if f != self.frames {
            return Err(MfeError::WrongFrames { got: f, expected: self.frames });
        }
        let whole_global = Self::standardize(&self.extract_global(clip)?)?;
        let whole_local = Self::standardize(&self.local_aligned(clip)?)?;
        let init_clip = clip.slice(1, 0, 2)?;
        let last = clip.slice(1, f - 1, 1)?;
        let end_clip = Tensor::concat(1, &[last.clone(), last])?;
        let bundle = FeatureBundle {
            init_global: Self::standardize(&self.align_segment(
                &self.extract_global(&init_clip)?,
                &self.align_global_w,
                &self.align_global_b,
            )?)?,
            init_local: Self::standardize(&self.align_segment(
                &self.local_aligned(&init_clip)?,
                &self.align_local_w,
                &self.align_local_b,
            )?)?,
            end_global: Self::standardize(&self.align_segment(
                &self.extract_global(&end_clip)?,
                &self.align_global_w,
                &self.align_global_b,
            )?)?,
            end_local: Self::standardize(&self.align_segment(
                &self.local_aligned(&end_clip)?,
                &self.align_local_w,
                &self.align_local_b,
            )?)?,
            whole_global,
            whole_local,
        };
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn random_clip(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(shape, values).unwrap()
    }

    #[test]
    fn shape_contract_sweep() {
        let mut r = rng();
        for (b, f, h, w, c) in [
            (1usize, 8usize, 64usize, 64usize, 4usize),
            (2, 2, 32, 32, 2),
            (1, 4, 32, 64, 3),
            (1, 4, 96, 32, 2),
        ] {
            let mfe = Mfe::new(c, f, &mut r).unwrap();
            let clip = random_clip(&mut r, &[b, f, h, w, 3]);
            let k = f * c / 2;
            let s = h * w / 1024;
            let global = mfe.extract_global(&clip).unwrap();
            assert_eq!(global.shape(), [b, k, s], "global {b} {f} {h} {w} {c}");
            let local = mfe.extract_local(&clip).unwrap();
            assert_eq!(local.shape(), [b, f, h / 16, w / 16, 16 * c]);
            let bundle = mfe.forward(&clip).unwrap();
            for t in [
                &bundle.init_global,
                &bundle.init_local,
                &bundle.end_global,
                &bundle.end_local,
                &bundle.whole_global,
                &bundle.whole_local,
            ] {
                assert_eq!(t.shape(), [b, k, s]);
            }
            let fused = mfe.fuse_multilevel(&bundle.whole_global, &bundle.whole_local).unwrap();
            assert_eq!(fused.shape(), [b, k, s]);
        }
    }

    #[test]
    fn doubling_height_doubles_positions() {
        let mut r = rng();
        let mfe = Mfe::new(2, 2, &mut r).unwrap();
        let g1 = mfe.extract_global(&random_clip(&mut r, &[1, 2, 32, 32, 3])).unwrap();
        let g2 = mfe.extract_global(&random_clip(&mut r, &[1, 2, 64, 32, 3])).unwrap();
        assert_eq!(g1.shape()[2] * 2, g2.shape()[2]);
    }

    #[test]
    fn zeroed_output_projection_is_residual_identity() {
        let mut r = rng();
        let mfe = Mfe::new(2, 2, &mut r).unwrap();
        let clip = random_clip(&mut r, &[1, 2, 32, 64, 3]);
        for block in &mfe.blocks {
            block.wo.tensor.set_values(&vec![0.0; block.wo.tensor.len()]).unwrap();
        }
        let with_attn = mfe.extract_global(&clip).unwrap().to_vec();
        // with the output projections zeroed, q/k/v must not matter
        for block in &mfe.blocks {
            for p in [&block.wq, &block.wk, &block.wv] {
                p.tensor.set_values(&vec![0.0; p.tensor.len()]).unwrap();
            }
        }
        let passthrough = mfe.extract_global(&clip).unwrap().to_vec();
        assert_eq!(with_attn, passthrough);
    }

    #[test]
    fn pointwise_conv_on_constant_input_is_constant() {
        let cin = 6;
        let x = Tensor::full(&[1, 2, 4, 4, cin], 0.5).unwrap();
        let kernel = Tensor::full(&[1, 1, 1, cin, 2], 1.0).unwrap();
        let y = x.conv3d(&kernel, (1, 1, 1)).unwrap();
        for v in y.values().iter() {
            assert!((v - 0.5 * cin as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_fusion_returns_the_global_branch() {
        let mut r = rng();
        let mfe = Mfe::new(2, 2, &mut r).unwrap();
        let k = mfe.feature_channels();
        let mut w = vec![0.0; 2 * k * k];
        for i in 0..k {
            w[i * k + i] = 1.0; // identity on the global half, zero on local
        }
        mfe.fuse_w.tensor.set_values(&w).unwrap();
        let clip = random_clip(&mut r, &[1, 2, 32, 32, 3]);
        let bundle = mfe.forward(&clip).unwrap();
        let fused = mfe.fuse_multilevel(&bundle.whole_global, &bundle.whole_local).unwrap();
        let (a, b) = (fused.to_vec(), bundle.whole_global.to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn misaligned_fusion_rejected() {
        let mut r = rng();
        let mfe = Mfe::new(2, 2, &mut r).unwrap();
        let g = Tensor::zeros(&[1, 2, 1]).unwrap();
        let l = Tensor::zeros(&[1, 2, 2]).unwrap();
        assert!(matches!(mfe.fuse_multilevel(&g, &l), Err(MfeError::Misaligned { .. })));
    }

    #[test]
    fn gradient_reaches_both_branches() {
        let mut r = rng();
        let mfe = Mfe::new(2, 2, &mut r).unwrap();
        let clip = random_clip(&mut r, &[1, 2, 32, 32, 3]);
        let bundle = mfe.forward(&clip).unwrap();
        let fused = mfe.fuse_multilevel(&bundle.whole_global, &bundle.whole_local).unwrap();
        let loss = fused
            .sum_all()
            .unwrap()
            .add(&bundle.init_global.sum_all().unwrap())
            .unwrap()
            .add(&bundle.end_local.sum_all().unwrap())
            .unwrap();
        loss.backward().unwrap();
        for name in ["mfe.patch_embed", "mfe.local.stage1", "mfe.fuse.w", "mfe.align_global.w", "mfe.attn1.wv"] {
            let p = mfe.parameters().into_iter().find(|p| p.name == name).unwrap();
            let grad = p.tensor.grad().expect(name);
            assert!(grad.iter().any(|g| g.abs() > 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn deterministic_given_parameters() {
        let mut r = rng();
        let mfe = Mfe::new(2, 4, &mut r).unwrap();
        let clip = random_clip(&mut r, &[1, 4, 32, 32, 3]);
        let a = mfe.forward(&clip).unwrap().whole_global.to_vec();
        let b = mfe.forward(&clip).unwrap().whole_global.to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_is_stable() {
        let a = Mfe::new(4, 8, &mut rng()).unwrap();
        let b = Mfe::new(4, 8, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert!(a.parameter_count() > 0);
    }

    #[test]
    fn indivisible_clip_rejected() {
        let mut r = rng();
        let mfe = Mfe::new(2, 2, &mut r).unwrap();
        for shape in [[1, 2, 48, 32, 3], [1, 3, 32, 32, 3], [1, 2, 32, 32, 4]] {
            let clip = Tensor::zeros(&shape).unwrap();
            assert!(matches!(mfe.extract_global(&clip), Err(MfeError::BadClip { .. })), "{shape:?}");
        }
    }
}
