//! Causal analysis module: global-local fusion of the segment features,
//! causal concatenation, attention weighting, and residual gating.
//!
//! With K = F·C/2 the whole-clip channel budget, the init/end pairs are
//! summed then linearly mapped (W_Xs, W_Xe), the whole-clip pair is
//! channel-concatenated then mapped by W_w / W_Y / W_o into the potential-
//! danger, action and residual carriers, and the gate is
//!
//! ```text
//! H = concat(F_init, F_end, F_pot, F_act)        B x 4K x S
//! α = softmax(W_H · H + b_H)                      B x 8K x S
//! F = α ⊙ F_ori                                   B x 8K x S   (8K = 4FC)
//! ```
//!
//! The softmax axis is configurable: per-channel weighting is the default,
//! per-position weighting turns α into a spatial attribution map over the
//! feature grid.

use rand::Rng;
use thiserror::Error;

use crate::mfe::FeatureBundle;
use crate::numerics::{Parameter, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CamError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bundle tensors disagree in shape: {shapes:?}")]
    RaggedBundle { shapes: Vec<Vec<usize>> },
    #[error("bundle channel dim {got} does not match the module's {expected}")]
    WrongChannels { got: usize, expected: usize },
    #[error("expected a rank-3 feature, got {shape:?}")]
    BadRank { shape: Vec<usize> },
}

/// Axis the gate's softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateAxis {
    /// Normalize over the 8K channel axis (the default reading).
    Channel,
    /// Normalize over grid positions: α becomes a spatial attribution map.
    Position,
}

pub struct Cam {
    /// K = F·C/2, the per-feature channel count of the incoming bundle.
    pub feature_channels: usize,
    pub gate_axis: GateAxis,
    w_xs: Parameter,
    w_xe: Parameter,
    w_w: Parameter,
    w_y: Parameter,
    w_o: Parameter,
    w_h: Parameter,
    b_h: Parameter,
}

impl Cam {
    pub fn new(feature_channels: usize, gate_axis: GateAxis, rng: &mut impl Rng) -> Result<Cam, CamError> {
        let k = feature_channels;
        Ok(Cam {
            feature_channels: k,
            gate_axis,
            w_xs: Parameter::init("cam.w_xs", &[k, k], k, rng)?,
            w_xe: Parameter::init("cam.w_xe", &[k, k], k, rng)?,
            w_w: Parameter::init("cam.w_w", &[2 * k, k], 2 * k, rng)?,
            w_y: Parameter::init("cam.w_y", &[2 * k, k], 2 * k, rng)?,
            w_o: Parameter::init("cam.w_o", &[2 * k, 8 * k], 2 * k, rng)?,
            // The gate projection starts an order of magnitude below a
            // fan-in init, so the initial attention map is near uniform: the
            // decoder sees the whole grid from the first step and any later
            // concentration of the gate is learned rather than drawn at
            // initialization. It must not start exactly at zero — that would
            // cut the gradient path to every other gate projection.
            w_h: Parameter::init("cam.w_h", &[4 * k, 8 * k], 400 * k, rng)?,
            b_h: Parameter::zeros("cam.b_h", &[8 * k])?,
        })
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![
            self.w_xs.clone(),
            self.w_xe.clone(),
            self.w_w.clone(),
            self.w_y.clone(),
            self.w_o.clone(),
            self.w_h.clone(),
            self.b_h.clone(),
        ]
    }

    /// Per-position linear map on the channel axis: [B, Cin, S] -> [B, Cout, S].
    fn linear(&self, x: &Tensor, w: &Parameter) -> Result<Tensor, CamError> {
        Ok(x.permute(&[0, 2, 1])?.matmul(&w.tensor)?.permute(&[0, 2, 1])?)
    }

    fn check_bundle(&self, bundle: &FeatureBundle) -> Result<(), CamError> {
        let shapes: Vec<Vec<usize>> = [
            &bundle.init_global,
            &bundle.init_local,
            &bundle.end_global,
            &bundle.end_local,
            &bundle.whole_global,
            &bundle.whole_local,
        ]
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
        if shapes[0].len() != 3 {
            return Err(CamError::BadRank { shape: shapes[0].clone() });
        }
        if shapes.iter().any(|s| s != &shapes[0]) {
            return Err(CamError::RaggedBundle { shapes });
        }
        if shapes[0][1] != self.feature_channels {
            return Err(CamError::WrongChannels { got: shapes[0][1], expected: self.feature_channels });
        }
        Ok(())
    }

    /// F_init = W_Xs(F_init_global + F_init_local), likewise F_end with W_Xe:
    /// sum then linear, exactly as written.
    pub fn fuse_init_end(&self, bundle: &FeatureBundle) -> Result<(Tensor, Tensor), CamError> {
        self.check_bundle(bundle)?;
        let init = self.linear(&bundle.init_global.add(&bundle.init_local)?, &self.w_xs)?;
        let end = self.linear(&bundle.end_global.add(&bundle.end_local)?, &self.w_xe)?;
        Ok((init, end))
    }

    /// Channel-concatenate the whole-clip pair, then map by W_w, W_Y and
    /// W_o: the potential-danger feature, the action feature, and the wide
    /// residual carrier (8K channels).
    pub fn fuse_whole(&self, bundle: &FeatureBundle) -> Result<(Tensor, Tensor, Tensor), CamError> {
        self.check_bundle(bundle)?;
        let whole = Tensor::concat(1, &[bundle.whole_global.clone(), bundle.whole_local.clone()])?;
        let pot = self.linear(&whole, &self.w_w)?;
        let act = self.linear(&whole, &self.w_y)?;
        let ori = self.linear(&whole, &self.w_o)?;
        Ok((pot, act, ori))
    }

    /// H = concat(init, end, pot, act); α = softmax(W_H H + b_H) along the
    /// configured axis; F = α ⊙ F_ori. Returns (F, α).
    pub fn attend_and_gate(
        &self,
        init: &Tensor,
        end: &Tensor,
        pot: &Tensor,
        act: &Tensor,
        ori: &Tensor,
    ) -> Result<(Tensor, Tensor), CamError> {
        for t in [init, end, pot, act] {
            if t.shape() != init.shape() {
                return Err(CamError::RaggedBundle {
                    shapes: vec![init.shape().to_vec(), t.shape().to_vec()],
                });
            }
        }
        let h = Tensor::concat(1, &[init.clone(), end.clone(), pot.clone(), act.clone()])?;
        let logits = h
            .permute(&[0, 2, 1])?
            .matmul(&self.w_h.tensor)?
            .bias_add(&self.b_h.tensor)?
            .permute(&[0, 2, 1])?;
        if logits.shape() != ori.shape() {
            return Err(CamError::RaggedBundle {
                shapes: vec![logits.shape().to_vec(), ori.shape().to_vec()],
            });
        }
        let axis = match self.gate_axis {
            GateAxis::Channel => 1,
            GateAxis::Position => 2,
        };
        let alpha = logits.softmax(axis)?;
        Ok((alpha.mul(ori)?, alpha))
    }

    /// Full module: bundle in, (causal feature B x 4FC x S, α) out.
    pub fn forward(&self, bundle: &FeatureBundle) -> Result<(Tensor, Tensor), CamError> {
        let (init, end) = self.fuse_init_end(bundle)?;
        let (pot, act, ori) = self.fuse_whole(bundle)?;
        self.attend_and_gate(&init, &end, &pot, &act, &ori)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(23)
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::leaf(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_bundle(rng: &mut ChaCha8Rng, b: usize, k: usize, s: usize) -> FeatureBundle {
        FeatureBundle {
            init_global: random(rng, &[b, k, s]),
            init_local: random(rng, &[b, k, s]),
            end_global: random(rng, &[b, k, s]),
            end_local: random(rng, &[b, k, s]),
            whole_global: random(rng, &[b, k, s]),
            whole_local: random(rng, &[b, k, s]),
        }
    }

    #[test]
    fn identity_weights_pass_the_global_init_through() {
        let mut r = rng();
        let k = 3;
        let cam = Cam::new(k, GateAxis::Channel, &mut r).unwrap();
        let mut eye = vec![0.0; k * k];
        for i in 0..k {
            eye[i * k + i] = 1.0;
        }
        cam.w_xs.tensor.set_values(&eye).unwrap();
        let mut bundle = random_bundle(&mut r, 1, k, 2);
        bundle.init_local = Tensor::zeros(&[1, k, 2]).unwrap();
        let (init, _) = cam.fuse_init_end(&bundle).unwrap();
        for (a, b) in init.to_vec().iter().zip(bundle.init_global.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero_fusion() {
        let mut r = rng();
        let cam = Cam::new(2, GateAxis::Channel, &mut r).unwrap();
        cam.w_xs.tensor.set_values(&vec![0.0; 4]).unwrap();
        cam.w_xe.tensor.set_values(&vec![0.0; 4]).unwrap();
        let bundle = random_bundle(&mut r, 1, 2, 3);
        let (init, end) = cam.fuse_init_end(&bundle).unwrap();
        assert!(init.to_vec().iter().chain(end.to_vec().iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn fuse_init_end_matches_hand_loops() {
        let mut r = rng();
        let k = 2;
        let s = 3;
        let cam = Cam::new(k, GateAxis::Channel, &mut r).unwrap();
        let bundle = random_bundle(&mut r, 1, k, s);
        let (init, _) = cam.fuse_init_end(&bundle).unwrap();
        let g = bundle.init_global.to_vec();
        let l = bundle.init_local.to_vec();
        let w = cam.w_xs.tensor.to_vec(); // [k][k], row = in, col = out
        for pos in 0..s {
            for out in 0..k {
                let mut expected = 0.0;
                for inp in 0..k {
                    expected += (g[inp * s + pos] + l[inp * s + pos]) * w[inp * k + out];
                }
                let got = init.to_vec()[out * s + pos];
                assert!((got - expected).abs() < 1e-12, "pos {pos} out {out}");
            }
        }
    }

    #[test]
    fn fuse_whole_matches_hand_loops() {
        let mut r = rng();
        let (k, s) = (2, 2);
        let cam = Cam::new(k, GateAxis::Channel, &mut r).unwrap();
        let bundle = random_bundle(&mut r, 1, k, s);
        let (pot, _, _) = cam.fuse_whole(&bundle).unwrap();
        let g = bundle.whole_global.to_vec();
        let l = bundle.whole_local.to_vec();
        let w = cam.w_w.tensor.to_vec(); // [2k][k]
        for pos in 0..s {
            for out in 0..k {
                let mut expected = 0.0;
                for inp in 0..k {
                    expected += g[inp * s + pos] * w[inp * k + out];
                    expected += l[inp * s + pos] * w[(k + inp) * k + out];
                }
                let got = pot.to_vec()[out * s + pos];
                assert!((got - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_projection_recovers_the_global_whole() {
        let mut r = rng();
        let k = 2;
        let cam = Cam::new(k, GateAxis::Channel, &mut r).unwrap();
        // W_o: global half -> first k output channels, everything else zero
        let mut w = vec![0.0; 2 * k * 8 * k];
        for i in 0..k {
            w[i * 8 * k + i] = 1.0;
        }
        cam.w_o.tensor.set_values(&w).unwrap();
        let bundle = random_bundle(&mut r, 1, k, 3);
        let (_, _, ori) = cam.fuse_whole(&bundle).unwrap();
        let ov = ori.to_vec();
        let gv = bundle.whole_global.to_vec();
        for c in 0..k {
            for pos in 0..3 {
                assert!((ov[c * 3 + pos] - gv[c * 3 + pos]).abs() < 1e-12);
            }
        }
        assert!(ov[k * 3..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn alpha_sums_to_one_on_both_axes() {
        let mut r = rng();
        for axis in [GateAxis::Channel, GateAxis::Position] {
            let cam = Cam::new(2, axis, &mut r).unwrap();
            let bundle = random_bundle(&mut r, 2, 2, 3);
            let (_, alpha) = cam.forward(&bundle).unwrap();
            let sum_axis = if axis == GateAxis::Channel { 1 } else { 2 };
            let sums = alpha.sum_axis(sum_axis).unwrap();
            for v in sums.to_vec() {
                assert!((v - 1.0).abs() < 1e-6, "{axis:?}: {v}");
            }
        }
    }

    #[test]
    fn zero_residual_absorbs_everything() {
        let mut r = rng();
        let cam = Cam::new(2, GateAxis::Channel, &mut r).unwrap();
        let mut bundle = random_bundle(&mut r, 1, 2, 3);
        bundle.whole_global = Tensor::zeros(&[1, 2, 3]).unwrap();
        bundle.whole_local = Tensor::zeros(&[1, 2, 3]).unwrap();
        let (f, _) = cam.forward(&bundle).unwrap();
        assert!(f.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zeroed_attention_is_a_uniform_gate() {
        let mut r = rng();
        let k = 2;
        let cam = Cam::new(k, GateAxis::Channel, &mut r).unwrap();
        cam.w_h.tensor.set_values(&vec![0.0; 4 * k * 8 * k]).unwrap();
        let bundle = random_bundle(&mut r, 1, k, 3);
        let (f, _) = cam.forward(&bundle).unwrap();
        let (_, _, ori) = cam.fuse_whole(&bundle).unwrap();
        for (a, b) in f.to_vec().iter().zip(ori.to_vec()) {
            assert!((a - b / (8 * k) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_oracle_on_a_scalar_grid() {
        let mut r = rng();
        let cam = Cam::new(1, GateAxis::Channel, &mut r).unwrap();
        let init = Tensor::new(&[1, 1, 1], vec![0.3]).unwrap();
        let end = Tensor::new(&[1, 1, 1], vec![-0.7]).unwrap();
        let pot = Tensor::new(&[1, 1, 1], vec![0.1]).unwrap();
        let act = Tensor::new(&[1, 1, 1], vec![0.9]).unwrap();
        let ori = Tensor::new(&[1, 8, 1], (0..8).map(|i| 0.1 * i as f64).collect()).unwrap();
        let (f, alpha) = cam.attend_and_gate(&init, &end, &pot, &act, &ori).unwrap();
        // hand computation with the module's own weights
        let h = [0.3, -0.7, 0.1, 0.9];
        let w = cam.w_h.tensor.to_vec(); // [4][8]
        let b = cam.b_h.tensor.to_vec();
        let logits: Vec<f64> = (0..8)
            .map(|j| b[j] + (0..4).map(|i| h[i] * w[i * 8 + j]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..8 {
            let a_hand = exps[j] / z;
            assert!((alpha.to_vec()[j] - a_hand).abs() < 1e-12);
            assert!((f.to_vec()[j] - a_hand * 0.1 * j as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_init_and_end_changes_the_output() {
        let mut r = rng();
        let cam = Cam::new(2, GateAxis::Channel, &mut r).unwrap();
        let bundle = random_bundle(&mut r, 1, 2, 3);
        let swapped = FeatureBundle {
            init_global: bundle.end_global.clone(),
            init_local: bundle.end_local.clone(),
            end_global: bundle.init_global.clone(),
            end_local: bundle.init_local.clone(),
            whole_global: bundle.whole_global.clone(),
            whole_local: bundle.whole_local.clone(),
        };
        let (f, _) = cam.forward(&bundle).unwrap();
        let (g, _) = cam.forward(&swapped).unwrap();
        let diff: f64 = f.to_vec().iter().zip(g.to_vec()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "swap left the output unchanged");
    }

    #[test]
    fn gradient_reaches_all_six_inputs() {
        let mut r = rng();
        let cam = Cam::new(2, GateAxis::Channel, &mut r).unwrap();
        let bundle = random_bundle(&mut r, 1, 2, 3);
        let (f, _) = cam.forward(&bundle).unwrap();
        f.sum_all().unwrap().backward().unwrap();
        for (name, t) in [
            ("init_global", &bundle.init_global),
            ("init_local", &bundle.init_local),
            ("end_global", &bundle.end_global),
            ("end_local", &bundle.end_local),
            ("whole_global", &bundle.whole_global),
            ("whole_local", &bundle.whole_local),
        ] {
            let grad = t.grad().expect(name);
            assert!(grad.iter().any(|g| g.abs() > 0.0), "{name} got zero gradient");
        }
    }

    #[test]
    fn ragged_bundle_rejected() {
        let mut r = rng();
        let cam = Cam::new(2, GateAxis::Channel, &mut r).unwrap();
        let mut bundle = random_bundle(&mut r, 1, 2, 3);
        bundle.end_local = Tensor::zeros(&[1, 2, 4]).unwrap();
        assert!(matches!(cam.forward(&bundle), Err(CamError::RaggedBundle { .. })));
        let wrong_k = random_bundle(&mut r, 1, 3, 3);
        assert!(matches!(cam.forward(&wrong_k), Err(CamError::WrongChannels { got: 3, expected: 2 })));
    }
}
