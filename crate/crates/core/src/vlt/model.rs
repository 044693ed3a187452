//! Prefix-conditioned autoregressive caption decoder with a learned
//! relationship-matrix attention bias and the combined training objective.
//!
//! The decoder consumes a sequence `[prefix tokens .. text tokens]`. Prefix
//! tokens are fused visual features projected into the embedding width by a
//! two-layer MLP; text tokens are embedded vocabulary ids. Self-attention is
//! causally masked, and the attention scores from text queries to prefix keys
//! receive an additive bias `(x_t T) V` where `V` is an `M x M` relationship
//! matrix over the prefix positions. `V` is shared across layers and is the
//! sole argument of the sparsity penalty, so a trained model exposes which
//! prefix positions the text relies on.

use rand::Rng;

use crate::numerics::{grad_check, kl_divergence, layer_norm, GradCheckReport, Parameter, Tensor};

use super::vocab::{TokenSeq, BOS, EOS, PAD};
use super::VltError;

type VR<T> = Result<T, VltError>;

const NEG_INF: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Decoder hyperparameters. `prefix_len` is the number of prefix tokens M
/// (one per fused feature position) and `feature_channels` is the channel
/// count of each incoming feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VltConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub prefix_len: usize,
    pub max_text: usize,
    pub feature_channels: usize,
    pub signal_dim: usize,
}

impl VltConfig {
    /// Reference configuration: width 64, 2 layers, 4 heads.
    pub fn reference(
        vocab_size: usize,
        prefix_len: usize,
        feature_channels: usize,
        signal_dim: usize,
    ) -> VltConfig {
        VltConfig {
            vocab_size,
            width: 64,
            layers: 2,
            heads: 4,
            prefix_len,
            max_text: 16,
            feature_channels,
            signal_dim,
        }
    }
}

/// Loss mixing weights: `beta` scales the KL term inside the caption loss,
/// `lambda` scales the relationship-matrix sparsity penalty (`0.0` disables
/// it), and `label_smoothing` is the epsilon of the smoothed target
/// distribution fed to the KL term.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { beta: 0.5, lambda: 0.01, label_smoothing: 0.1 }
    }
}

/// Scalar values of every loss component for logging. `l_caption` is
/// `l_ce + beta * l_kl` and `l_total = l_signal + l_caption`; the sparsity
/// term is reported separately because it is an optional auxiliary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_signal: f64,
    pub l_ce: f64,
    pub l_kl: f64,
    pub l_caption: f64,
    pub l_sparse: f64,
    pub l_total: f64,
}

/// Decoding strategy for `generate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

struct Layer {
    ln1_g: Parameter,
    ln1_b: Parameter,
    wq: Parameter,
    wk: Parameter,
    wv: Parameter,
    wo: Parameter,
    ln2_g: Parameter,
    ln2_b: Parameter,
    ff1_w: Parameter,
    ff1_b: Parameter,
    ff2_w: Parameter,
    ff2_b: Parameter,
}

/// The decoder itself: prefix alignment MLP, token/position embeddings,
/// pre-norm attention blocks, output head, relationship matrix, and a linear
/// signal head over the mean-pooled prefix.
pub struct Vlt {
    pub cfg: VltConfig,
    align1_w: Parameter,
    align1_b: Parameter,
    align2_w: Parameter,
    align2_b: Parameter,
    align_ln_g: Parameter,
    align_ln_b: Parameter,
    embed: Parameter,
    pos: Parameter,
    layers: Vec<Layer>,
    lnf_g: Parameter,
    lnf_b: Parameter,
    out_w: Parameter,
    out_b: Parameter,
    t_proj: Parameter,
    v_rel: Parameter,
    sig_w: Parameter,
    sig_b: Parameter,
}

impl Vlt {
    pub fn new(cfg: VltConfig, rng: &mut impl Rng) -> VR<Vlt> {
        if cfg.vocab_size < 4
            || cfg.width == 0
            || cfg.layers == 0
            || cfg.heads == 0
            || cfg.width % cfg.heads != 0
            || cfg.prefix_len == 0
            || cfg.max_text < 2
            || cfg.feature_channels == 0
        {
            return Err(VltError::BadConfig(format!("{cfg:?}")));
        }
        let d = cfg.width;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |n: &str| format!("vlt.layer{l}.{n}");
            layers.push(Layer {
                ln1_g: Parameter::new(p("ln1.g"), Tensor::leaf(&[d], vec![1.0; d])?),
                ln1_b: Parameter::zeros(p("ln1.b"), &[d])?,
                wq: Parameter::init(p("wq"), &[d, d], d, rng)?,
                wk: Parameter::init(p("wk"), &[d, d], d, rng)?,
                wv: Parameter::init(p("wv"), &[d, d], d, rng)?,
                wo: Parameter::init(p("wo"), &[d, d], d, rng)?,
                ln2_g: Parameter::new(p("ln2.g"), Tensor::leaf(&[d], vec![1.0; d])?),
                ln2_b: Parameter::zeros(p("ln2.b"), &[d])?,
                ff1_w: Parameter::init(p("ff1.w"), &[d, 2 * d], d, rng)?,
                ff1_b: Parameter::zeros(p("ff1.b"), &[2 * d])?,
                ff2_w: Parameter::init(p("ff2.w"), &[2 * d, d], 2 * d, rng)?,
                ff2_b: Parameter::zeros(p("ff2.b"), &[d])?,
            });
        }
        let ctx = cfg.prefix_len + cfg.max_text;
        Ok(Vlt {
            align1_w: Parameter::init("vlt.align1.w", &[cfg.feature_channels, d], cfg.feature_channels, rng)?,
            align1_b: Parameter::zeros("vlt.align1.b", &[d])?,
            align2_w: Parameter::init("vlt.align2.w", &[d, d], d, rng)?,
            align2_b: Parameter::zeros("vlt.align2.b", &[d])?,
            align_ln_g: Parameter::new("vlt.align_ln.g", Tensor::leaf(&[d], vec![1.0; d])?),
            align_ln_b: Parameter::zeros("vlt.align_ln.b", &[d])?,
            embed: Parameter::init("vlt.embed", &[cfg.vocab_size, d], d, rng)?,
            pos: Parameter::init("vlt.pos", &[ctx, d], d, rng)?,
            layers,
            lnf_g: Parameter::new("vlt.lnf.g", Tensor::leaf(&[d], vec![1.0; d])?),
            lnf_b: Parameter::zeros("vlt.lnf.b", &[d])?,
            out_w: Parameter::init("vlt.out.w", &[d, cfg.vocab_size], d, rng)?,
            out_b: Parameter::zeros("vlt.out.b", &[cfg.vocab_size])?,
            t_proj: Parameter::init("vlt.t_proj", &[d, cfg.prefix_len], d, rng)?,
            v_rel: Parameter::zeros("vlt.v_rel", &[cfg.prefix_len, cfg.prefix_len])?,
            sig_w: Parameter::init("vlt.sig.w", &[d, cfg.signal_dim.max(1)], d, rng)?,
            sig_b: Parameter::zeros("vlt.sig.b", &[cfg.signal_dim.max(1)])?,
            cfg,
        })
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        let mut ps = vec![
            self.align1_w.clone(),
            self.align1_b.clone(),
            self.align2_w.clone(),
            self.align2_b.clone(),
            self.align_ln_g.clone(),
            self.align_ln_b.clone(),
            self.embed.clone(),
            self.pos.clone(),
        ];
        for l in &self.layers {
            ps.extend([
                l.ln1_g.clone(),
                l.ln1_b.clone(),
                l.wq.clone(),
                l.wk.clone(),
                l.wv.clone(),
                l.wo.clone(),
                l.ln2_g.clone(),
                l.ln2_b.clone(),
                l.ff1_w.clone(),
                l.ff1_b.clone(),
                l.ff2_w.clone(),
                l.ff2_b.clone(),
            ]);
        }
        ps.extend([
            self.lnf_g.clone(),
            self.lnf_b.clone(),
            self.out_w.clone(),
            self.out_b.clone(),
            self.t_proj.clone(),
            self.v_rel.clone(),
            self.sig_w.clone(),
            self.sig_b.clone(),
        ]);
        ps
    }

    /// Learned relationship matrix `V`, exposed for attribution.
    pub fn relationship_matrix(&self) -> &Tensor {
        &self.v_rel.tensor
    }

    /// Project fused features `[B, C, M]` into `M` prefix token embeddings
    /// `[B, M, d]`: a per-position two-layer MLP (softplus hidden — a
    /// saturating activation lets growing weights flatten distinct clips onto
    /// the same embedding), a per-position layer norm, and an optional
    /// per-position rescale by the attention gate's mass.
    ///
    /// The layer norm and the gate rescale work as a pair. The norm keeps
    /// every embedding direction at unit scale, so training cannot bury the
    /// clip-dependent signal under one large shared offset — but on its own
    /// it would also erase the gate's per-position magnitude, leaving the
    /// gate with no influence on the decoder. Multiplying each normalized
    /// embedding by its gate mass (total attention on that position, scaled
    /// so a uniform gate gives exactly 1) restores that influence in a form
    /// the norm cannot cancel: positions the gate plays down become faint to
    /// the decoder, so the caption loss pushes attention toward the positions
    /// the captions actually depend on.
    pub fn align_prefix(&self, features: &Tensor, gate: Option<&Tensor>) -> VR<Tensor> {
        let s = features.shape();
        if s.len() != 3 || s[1] != self.cfg.feature_channels || s[2] != self.cfg.prefix_len {
            return Err(VltError::BadPrefix {
                got: s.to_vec(),
                channels: self.cfg.feature_channels,
                positions: self.cfg.prefix_len,
            });
        }
        let x = features.permute(&[0, 2, 1])?;
        let h = x.matmul(&self.align1_w.tensor)?.bias_add(&self.align1_b.tensor)?.softplus()?;
        let z = h.matmul(&self.align2_w.tensor)?.bias_add(&self.align2_b.tensor)?;
        let out = layer_norm(&z, &self.align_ln_g.tensor, &self.align_ln_b.tensor, LN_EPS)?;
        match gate {
            None => Ok(out),
            Some(gate) => {
                let gs = gate.shape();
                if gs.len() != 3 || gs[0] != s[0] || gs[2] != self.cfg.prefix_len {
                    return Err(VltError::BadPrefix {
                        got: gs.to_vec(),
                        channels: gs.get(1).copied().unwrap_or(0),
                        positions: self.cfg.prefix_len,
                    });
                }
                // Mass per position, normalized by its own mean so any
                // uniform gate (and any gate normalized over channels) maps
                // to a multiplier of exactly 1.
                let mass = gate.sum_axis(1)?;
                let scale = mass.mul(&mass.mean_axis(2)?.powf(-1.0)?)?;
                Ok(out.mul(&scale.permute(&[0, 2, 1])?)?)
            }
        }
    }

    /// Linear readout of the control signals from the mean-pooled prefix.
    pub fn predict_signals(&self, prefix: &Tensor) -> VR<Tensor> {
        let b = prefix.shape()[0];
        let d = self.cfg.width;
        let pooled = prefix.mean_axis(1)?.reshape(&[b, d])?;
        Ok(pooled.matmul(&self.sig_w.tensor)?.bias_add(&self.sig_b.tensor)?)
    }

    /// Run the decoder over `[prefix .. inputs]` and return next-token logits
    /// `[B, n, vocab]` for the text positions. Every input row must have the
    /// same length `n` with `1 <= n <= max_text`.
    pub fn decode(&self, prefix: &Tensor, inputs: &[Vec<usize>]) -> VR<Tensor> {
        let b = inputs.len();
        if b == 0 {
            return Err(VltError::EmptyBatch);
        }
        let ps = prefix.shape();
        if ps.len() != 3 || ps[0] != b || ps[1] != self.cfg.prefix_len || ps[2] != self.cfg.width {
            return Err(VltError::BadPrefix {
                got: ps.to_vec(),
                channels: self.cfg.width,
                positions: self.cfg.prefix_len,
            });
        }
        let n = inputs[0].len();
        if n == 0 || inputs.iter().any(|i| i.len() != n) {
            return Err(VltError::RaggedBatch);
        }
        if n > self.cfg.max_text {
            return Err(VltError::TextTooLong { words: n, max: self.cfg.max_text });
        }
        let (m, d, heads) = (self.cfg.prefix_len, self.cfg.width, self.cfg.heads);
        let (dh, l_ctx) = (d / heads, m + n);

        let flat: Vec<usize> = inputs.iter().flatten().copied().collect();
        let emb = self.embed.tensor.embedding(&flat)?.reshape(&[b, n, d])?;
        let pos = self.pos.tensor.slice(0, 0, l_ctx)?.reshape(&[1, l_ctx, d])?;
        let mut x = Tensor::concat(1, &[prefix.clone(), emb])?.add(&pos)?;

        // Causal mask over the joint sequence; prefix positions are mutually
        // visible because they all precede every text position.
        let mut mask_v = vec![0.0; l_ctx * l_ctx];
        for q in 0..l_ctx {
            for k in (q.max(m - 1) + 1)..l_ctx {
                mask_v[q * l_ctx + k] = NEG_INF;
            }
        }
        let mask = Tensor::new(&[1, 1, l_ctx, l_ctx], mask_v)?;

        for layer in &self.layers {
            let xn = layer_norm(&x, &layer.ln1_g.tensor, &layer.ln1_b.tensor, LN_EPS)?;

            // Relationship bias: text queries against prefix keys get
            // (x_t T) V; all other score entries are untouched.
            let text = xn.slice(1, m, n)?;
            let bias_text =
                text.matmul(&self.t_proj.tensor)?.matmul(&self.v_rel.tensor)?;
            let text_rows = Tensor::concat(2, &[bias_text, Tensor::zeros(&[b, n, n])?])?;
            let bias = Tensor::concat(1, &[Tensor::zeros(&[b, m, l_ctx])?, text_rows])?
                .reshape(&[b, 1, l_ctx, l_ctx])?;

            let split = |w: &Parameter| -> VR<Tensor> {
                Ok(xn
                    .matmul(&w.tensor)?
                    .reshape(&[b, l_ctx, heads, dh])?
                    .permute(&[0, 2, 1, 3])?
                    .reshape(&[b * heads, l_ctx, dh])?)
            };
            let (q, k, v) = (split(&layer.wq)?, split(&layer.wk)?, split(&layer.wv)?);
            let scores = q
                .matmul(&k.permute(&[0, 2, 1])?)?
                .scale(1.0 / (dh as f64).sqrt())?
                .reshape(&[b, heads, l_ctx, l_ctx])?
                .add(&bias)?
                .add(&mask)?;
            let attn = scores
                .softmax(3)?
                .reshape(&[b * heads, l_ctx, l_ctx])?
                .matmul(&v)?
                .reshape(&[b, heads, l_ctx, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b, l_ctx, d])?
                .matmul(&layer.wo.tensor)?;
            x = x.add(&attn)?;

            let yn = layer_norm(&x, &layer.ln2_g.tensor, &layer.ln2_b.tensor, LN_EPS)?;
            let ff = yn
                .matmul(&layer.ff1_w.tensor)?
                .bias_add(&layer.ff1_b.tensor)?
                .tanh()?
                .matmul(&layer.ff2_w.tensor)?
                .bias_add(&layer.ff2_b.tensor)?;
            x = x.add(&ff)?;
        }

        let xf = layer_norm(&x, &self.lnf_g.tensor, &self.lnf_b.tensor, LN_EPS)?;
        Ok(xf
            .slice(1, m, n)?
            .matmul(&self.out_w.tensor)?
            .bias_add(&self.out_b.tensor)?)
    }

    /// Teacher-forced logits for a batch of equal-length target sequences:
    /// position `i` of the output predicts `ids[i + 1]`.
    pub fn forward_teacher(&self, prefix: &Tensor, targets: &[TokenSeq]) -> VR<Tensor> {
        let n = targets.first().map(|t| t.len()).ok_or(VltError::EmptyBatch)?;
        if n < 2 || targets.iter().any(|t| t.len() != n) {
            return Err(VltError::RaggedBatch);
        }
        let inputs: Vec<Vec<usize>> = targets.iter().map(|t| t.ids[..n - 1].to_vec()).collect();
        self.decode(prefix, &inputs)
    }

    /// Sparsity penalty `lambda * sum |V|` on the relationship matrix.
    pub fn sparse_mask_loss(&self, lambda: f64) -> VR<Tensor> {
        Ok(self.v_rel.tensor.abs()?.sum_all()?.scale(lambda)?)
    }

    /// Combined objective. `signals` is an optional `(prediction, truth)`
    /// pair; without it the signal term is zero. Returns the scalar graph
    /// tensor to backpropagate plus the per-component report.
    pub fn training_losses(
        &self,
        logits: &Tensor,
        targets: &[TokenSeq],
        signals: Option<(&Tensor, &Tensor)>,
        weights: &LossWeights,
    ) -> VR<(Tensor, LossReport)> {
        let s = logits.shape().to_vec();
        let n = targets.first().map(|t| t.len()).ok_or(VltError::EmptyBatch)?;
        if targets.iter().any(|t| t.len() != n) {
            return Err(VltError::RaggedBatch);
        }
        if s.len() != 3 || s[0] != targets.len() || s[1] != n - 1 || s[2] != self.cfg.vocab_size {
            return Err(VltError::LogitShape { got: s, batch: targets.len(), steps: n - 1 });
        }
        let (rows, vocab) = (s[0] * s[1], s[2]);
        let mut tgt = Vec::with_capacity(rows);
        let mut mask = Vec::with_capacity(rows);
        for t in targets {
            for i in 1..n {
                tgt.push(t.ids[i]);
                mask.push(t.ids[i] != PAD);
            }
        }
        let n_valid = mask.iter().filter(|&&m| m).count();

        let flat = logits.reshape(&[rows, vocab])?;
        let l_ce = flat.cross_entropy(&tgt, &mask)?;

        let q = flat.softmax(1)?;
        {
            let qv = q.values();
            for r in 0..rows {
                let sum: f64 = qv[r * vocab..(r + 1) * vocab].iter().sum();
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(VltError::NotNormalized { row: r, sum });
                }
            }
        }
        // Smoothed one-hot targets; PAD rows stay all-zero so they contribute
        // exactly nothing to the divergence.
        let eps = weights.label_smoothing;
        let mut pv = vec![0.0; rows * vocab];
        for r in 0..rows {
            if mask[r] {
                for j in 0..vocab {
                    pv[r * vocab + j] = eps / vocab as f64;
                }
                pv[r * vocab + tgt[r]] += 1.0 - eps;
            }
        }
        let p = Tensor::new(&[rows, vocab], pv)?;
        let l_kl = kl_divergence(&p, &q)?.scale(1.0 / n_valid as f64)?;

        let l_caption = l_ce.add(&l_kl.scale(weights.beta)?)?;

        let l_signal = match signals {
            Some((pred, truth)) => {
                if pred.shape() != truth.shape() {
                    return Err(VltError::SignalShape {
                        pred: pred.shape().to_vec(),
                        truth: truth.shape().to_vec(),
                    });
                }
                let diff = pred.sub(truth)?;
                let count = pred.len() as f64;
                diff.abs()?.add(&diff.square()?)?.sum_all()?.scale(0.5 / count)?
            }
            None => Tensor::zeros(&[1])?,
        };

        let l_total = l_signal.add(&l_caption)?;
        let l_sparse = self.sparse_mask_loss(weights.lambda)?;
        let objective =
            if weights.lambda > 0.0 { l_total.add(&l_sparse)? } else { l_total.clone() };
        let report = LossReport {
            l_signal: l_signal.item(),
            l_ce: l_ce.item(),
            l_kl: l_kl.item(),
            l_caption: l_caption.item(),
            l_sparse: l_sparse.item(),
            l_total: l_total.item(),
        };
        Ok((objective, report))
    }

    /// Decode a caption for a single prefix `[1, M, d]`. Generation starts
    /// from BOS and stops at EOS or the text-length limit; the result is
    /// padded back out to `max_text`.
    pub fn generate(&self, prefix: &Tensor, mode: DecodeMode) -> VR<TokenSeq> {
        let ids = match mode {
            DecodeMode::Greedy => self.generate_greedy(prefix)?,
            DecodeMode::Beam(0) => return Err(VltError::BadBeamWidth),
            DecodeMode::Beam(k) => self.generate_beam(prefix, k)?,
        };
        let used = ids.len();
        let mut padded = ids;
        padded.resize(self.cfg.max_text, PAD);
        let mask = (0..self.cfg.max_text).map(|i| i < used).collect();
        Ok(TokenSeq { ids: padded, mask })
    }

    fn generate_greedy(&self, prefix: &Tensor) -> VR<Vec<usize>> {
        let mut ids = vec![BOS];
        while ids.len() < self.cfg.max_text {
            let lp = self.next_log_probs(prefix, &ids)?;
            let next = lp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(ids)
    }

    fn generate_beam(&self, prefix: &Tensor, k: usize) -> VR<Vec<usize>> {
        // Hypotheses ordered by summed log-probability; ties broken by token
        // ids so the search is deterministic.
        let mut hyps: Vec<(Vec<usize>, f64, bool)> = vec![(vec![BOS], 0.0, false)];
        for _ in 1..self.cfg.max_text {
            if hyps.iter().all(|h| h.2) {
                break;
            }
            let mut cand = Vec::new();
            for (ids, score, done) in &hyps {
                if *done {
                    cand.push((ids.clone(), *score, true));
                    continue;
                }
                let lp = self.next_log_probs(prefix, ids)?;
                for (tok, &l) in lp.iter().enumerate() {
                    let mut next = ids.clone();
                    next.push(tok);
                    cand.push((next, score + l, tok == EOS));
                }
            }
            cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            cand.truncate(k);
            hyps = cand;
        }
        Ok(hyps.into_iter().next().unwrap().0)
    }

    /// Log-probabilities of the next token after `ids`, computed outside the
    /// autodiff graph.
    fn next_log_probs(&self, prefix: &Tensor, ids: &[usize]) -> VR<Vec<f64>> {
        let n = ids.len();
        let logits = self.decode(&prefix.detach(), &[ids.to_vec()])?;
        let v = self.cfg.vocab_size;
        let row = &logits.values()[(n - 1) * v..n * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        let lz = m + z.ln();
        Ok(row.iter().map(|&x| x - lz).collect())
    }

    /// Finite-difference check of the full objective with respect to every
    /// parameter.
    pub fn grad_check(
        &self,
        features: &Tensor,
        targets: &[TokenSeq],
        truth_signals: &Tensor,
        weights: &LossWeights,
        h: f64,
        tolerance: f64,
    ) -> VR<GradCheckReport> {
        let params = self.parameters();
        let objective = |_: &[Parameter]| {
            let prefix = self.align_prefix(features, None)?;
            let logits = self.forward_teacher(&prefix, targets)?;
            let pred = self.predict_signals(&prefix)?;
            let (objective, _) =
                self.training_losses(&logits, targets, Some((&pred, truth_signals)), weights)?;
            Ok::<Tensor, VltError>(objective)
        };
        let report = grad_check(
            |ps| {
                objective(ps).map_err(|e| match e {
                    VltError::Tensor(t) => t,
                    other => panic!("non-tensor loss failure in grad check: {other}"),
                })
            },
            &params,
            h,
            tolerance,
        )?;
        Ok(report)
    }
}
