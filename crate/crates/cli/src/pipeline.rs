//! End-to-end model assembly: feature extraction, optional causal analysis,
//! and the caption decoder, glued to simulator episodes.

use mcam_core::cam::Cam;
use mcam_core::mfe::Mfe;
use mcam_core::numerics::{Parameter, Tensor};
use mcam_core::simulator::Episode;
use mcam_core::vlt::{detokenize, tokenize, DecodeMode, LossReport, LossWeights, TokenSeq, Vlt, VltConfig, Vocab};
use rand::Rng;

use crate::config::Config;
use crate::HarnessError;

/// Normalizers that map raw control signals into roughly unit range for the
/// regression head.
const SPEED_SCALE: f64 = 40.0;
const COURSE_SCALE: f64 = 90.0;

/// The caption fed to the decoder is the narration and the reasoning joined
/// into one sentence; evaluation splits them back apart at "because".
pub fn caption_of(episode: &Episode) -> String {
    format!("{} {}", episode.narration, episode.reasoning)
}

/// Split a decoded caption into (narration, reasoning) at the first
/// "because"; a caption without one counts entirely as narration.
pub fn split_caption(text: &str) -> (String, String) {
    match text.find("because") {
        Some(i) => (text[..i].trim().to_string(), text[i..].trim().to_string()),
        None => (text.trim().to_string(), String::new()),
    }
}

pub struct Pipeline {
    pub config: Config,
    pub vocab: Vocab,
    pub mfe: Mfe,
    pub cam: Option<Cam>,
    pub vlt: Vlt,
}

impl Pipeline {
    pub fn new(config: &Config, vocab: Vocab, rng: &mut impl Rng) -> Result<Pipeline, HarnessError> {
        config.validate()?;
        let [frames, h, w] = config.scenario.frame_dims;
        let k = frames * config.model.channels / 2;
        let positions = (h / 32) * (w / 32);
        let mfe = Mfe::new(config.model.channels, frames, rng)?;
        let cam = if config.model.ablate_cam {
            None
        } else {
            Some(Cam::new(k, config.gate_axis()?, rng)?)
        };
        // CAM widens the feature to 8K channels; the ablated path feeds the
        // fused multi-level feature (K channels) straight to the decoder.
        let feature_channels = if cam.is_some() { 8 * k } else { k };
        let vlt = Vlt::new(
            VltConfig {
                vocab_size: vocab.len(),
                width: config.model.width,
                layers: config.model.layers,
                heads: config.model.heads,
                prefix_len: positions,
                max_text: config.model.max_text,
                feature_channels,
                signal_dim: 2,
            },
            rng,
        )?;
        Ok(Pipeline { config: config.clone(), vocab, mfe, cam, vlt })
    }

    /// Every trainable parameter that actually participates in this
    /// pipeline's forward pass. With CAM present the extractor's own fusion
    /// layer is bypassed; without it the init/end segment aligners are.
    pub fn parameters(&self) -> Vec<Parameter> {
        let skip: &[&str] = if self.cam.is_some() {
            &["mfe.fuse."]
        } else {
            &["mfe.align_global.", "mfe.align_local."]
        };
        let mut ps: Vec<Parameter> = self
            .mfe
            .parameters()
            .into_iter()
            .filter(|p| !skip.iter().any(|s| p.name.starts_with(s)))
            .collect();
        if let Some(cam) = &self.cam {
            ps.extend(cam.parameters());
        }
        ps.extend(self.vlt.parameters());
        ps
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.config.train.beta,
            lambda: self.config.train.lambda,
            label_smoothing: self.config.train.label_smoothing,
        }
    }

    /// Stack rendered clips into a [B, F, H, W, 3] tensor.
    pub fn clip_tensor(&self, episodes: &[&Episode]) -> Result<Tensor, HarnessError> {
        let [f, h, w] = self.config.scenario.frame_dims;
        let per = f * h * w * 3;
        let mut values = Vec::with_capacity(episodes.len() * per);
        for e in episodes {
            if e.clip.len() != per {
                return Err(HarnessError::NoClip { id: e.id.clone() });
            }
            values.extend(e.clip.iter().map(|&v| v as f64));
        }
        Ok(Tensor::new(&[episodes.len(), f, h, w, 3], values)?)
    }

    /// Clip to decoder-ready features: `(features, gate)`. The gate is the
    /// causal attention map when CAM is present, `None` when ablated.
    pub fn features(&self, clip: &Tensor) -> Result<(Tensor, Option<Tensor>), HarnessError> {
        let bundle = self.mfe.forward(clip)?;
        match &self.cam {
            Some(cam) => {
                let (feat, alpha) = cam.forward(&bundle)?;
                Ok((feat, Some(alpha)))
            }
            None => {
                let fused = self.mfe.fuse_multilevel(&bundle.whole_global, &bundle.whole_local)?;
                Ok((fused, None))
            }
        }
    }

    pub fn targets(&self, episodes: &[&Episode]) -> Result<Vec<TokenSeq>, HarnessError> {
        episodes
            .iter()
            .map(|e| Ok(tokenize(&caption_of(e), &self.vocab, self.config.model.max_text)?))
            .collect()
    }

    /// Ground-truth regression targets: the final frame's (speed, course),
    /// scaled into roughly unit range.
    pub fn signal_truth(&self, episodes: &[&Episode]) -> Result<Tensor, HarnessError> {
        let mut values = Vec::with_capacity(2 * episodes.len());
        for e in episodes {
            let last = e.signals.last().copied().unwrap_or(mcam_core::simulator::Signal {
                speed_mps: 0.0,
                course_deg: 0.0,
            });
            values.push(last.speed_mps / SPEED_SCALE);
            values.push(last.course_deg / COURSE_SCALE);
        }
        Ok(Tensor::new(&[episodes.len(), 2], values)?)
    }

    /// Full teacher-forced training pass over one batch.
    pub fn batch_losses(&self, episodes: &[&Episode]) -> Result<(Tensor, LossReport), HarnessError> {
        let clip = self.clip_tensor(episodes)?;
        let (features, gate) = self.features(&clip)?;
        let prefix = self.vlt.align_prefix(&features, gate.as_ref())?;
        let targets = self.targets(episodes)?;
        let logits = self.vlt.forward_teacher(&prefix, &targets)?;
        let pred = self.vlt.predict_signals(&prefix)?;
        let truth = self.signal_truth(episodes)?;
        Ok(self.vlt.training_losses(&logits, &targets, Some((&pred, &truth)), &self.loss_weights())?)
    }

    /// Greedy caption for one episode.
    pub fn generate_caption(&self, episode: &Episode) -> Result<String, HarnessError> {
        let clip = self.clip_tensor(&[episode])?;
        let (features, gate) = self.features(&clip)?;
        let prefix = self.vlt.align_prefix(&features, gate.as_ref())?;
        let seq = self.vlt.generate(&prefix, DecodeMode::Greedy)?;
        Ok(detokenize(&seq, &self.vocab))
    }

    /// Per-grid-position attribution mass, normalized to sum 1. With CAM the
    /// mass is the gate's attention aggregated over channels; the ablated
    /// baseline falls back to squared feature energy per position.
    pub fn attribution(&self, episode: &Episode) -> Result<Vec<f64>, HarnessError> {
        let clip = self.clip_tensor(&[episode])?;
        let (features, alpha) = self.features(&clip)?;
        let map = alpha.unwrap_or(features);
        let shape = map.shape().to_vec();
        let (channels, positions) = (shape[1], shape[2]);
        let v = map.values();
        let mut mass = vec![0.0; positions];
        for c in 0..channels {
            for s in 0..positions {
                let x = v[c * positions + s];
                mass[s] += if self.cam.is_some() { x } else { x * x };
            }
        }
        let total: f64 = mass.iter().sum();
        if total > 0.0 {
            for m in &mut mass {
                *m /= total;
            }
        }
        Ok(mass)
    }

    /// Deterministic probe: teacher-forced logits on one episode, used for
    /// bit-exact checkpoint round-trip verification.
    pub fn probe(&self, episode: &Episode) -> Result<Vec<f64>, HarnessError> {
        let clip = self.clip_tensor(&[episode])?;
        let (features, gate) = self.features(&clip)?;
        let prefix = self.vlt.align_prefix(&features, gate.as_ref())?;
        let targets = self.targets(&[episode])?;
        let logits = self.vlt.forward_teacher(&prefix, &targets)?;
        Ok(logits.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_splits_back_apart() {
        let (n, r) = split_caption("the car stops because the traffic light turns red");
        assert_eq!(n, "the car stops");
        assert_eq!(r, "because the traffic light turns red");
        let (n, r) = split_caption("the car drives forward");
        assert_eq!(n, "the car drives forward");
        assert_eq!(r, "");
    }
}
