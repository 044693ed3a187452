//! The five harness entry points: dataset simulation with splits, training,
//! metric evaluation, causal explanation, and a composed gradient check.

use std::io::Write;
use std::path::{Path, PathBuf};

use mcam_core::dsdag::{key_factors, scenario::traffic_scenario, Scm};
use mcam_core::metrics::{full_report, tokenize as metric_tokens, Corpus, MetricReport};
use mcam_core::numerics::{grad_check, GradCheckReport, Parameter, Sgd, Tensor, TensorError};
use mcam_core::simulator::{generate_dataset, read_dataset, write_dataset, Episode};
use mcam_core::vlt::Vocab;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use crate::config::Config;
use crate::pipeline::{caption_of, split_caption, Pipeline};
use crate::HarnessError;

type HR<T> = Result<T, HarnessError>;

/// Episode-id membership of each split.
#[derive(Debug, Clone, Serialize)]
pub struct SplitSummary {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Simulate a dataset and write 0.8/0.1/0.1 train/val/test splits under
/// `out/{train,val,test}`. The shuffle is seeded, so identical configs give
/// identical splits.
pub fn run_simulate(cfg: &Config, out: &Path) -> HR<SplitSummary> {
    cfg.validate()?;
    let scm = traffic_scenario()?;
    let episodes = generate_dataset(&scm, &cfg.scenario)?;
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.scenario.seed ^ 0x53504c49));
    let n = episodes.len();
    let (n_val, n_test) = (n / 10, n / 10);
    let n_train = n - n_val - n_test;

    let split = |name: &str, idx: &[usize]| -> HR<Vec<String>> {
        let subset: Vec<Episode> = idx.iter().map(|&i| episodes[i].clone()).collect();
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        write_dataset(&subset, &dir)?;
        Ok(subset.into_iter().map(|e| e.id).collect())
    };
    let summary = SplitSummary {
        train: split("train", &order[..n_train])?,
        val: split("val", &order[n_train..n_train + n_val])?,
        test: split("test", &order[n_train + n_val..])?,
    };
    Ok(summary)
}

/// One row of the loss curve CSV.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub train_ce: f64,
    pub train_kl: f64,
    pub train_signal: f64,
    pub train_sparse: f64,
    pub val_total: f64,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub losses_csv: PathBuf,
    pub history: Vec<EpochRow>,
    pub best_val: f64,
}

fn load_split(data: &Path, split: &'static str) -> HR<Vec<Episode>> {
    let dir = data.join(split);
    let episodes = read_dataset(&dir)?;
    if episodes.is_empty() {
        return Err(HarnessError::EmptySplit { split, dir: dir.display().to_string() });
    }
    Ok(episodes)
}

/// Average total loss over a split without updating parameters.
fn split_loss(pipeline: &Pipeline, episodes: &[Episode], batch: usize) -> HR<f64> {
    let mut total = 0.0;
    for chunk in episodes.chunks(batch) {
        let refs: Vec<&Episode> = chunk.iter().collect();
        let (_, report) = pipeline.batch_losses(&refs)?;
        total += report.l_total * chunk.len() as f64;
    }
    Ok(total / episodes.len() as f64)
}

/// Train end to end on `data/train`, tracking `data/val`; the best-val
/// checkpoint and per-epoch loss curve land in `out`.
pub fn run_train(cfg: &Config, data: &Path, out: &Path) -> HR<TrainSummary> {
    cfg.validate()?;
    let train = load_split(data, "train")?;
    let val = load_split(data, "val")?;
    std::fs::create_dir_all(out)?;

    let texts: Vec<String> = train.iter().map(caption_of).collect();
    let vocab = Vocab::build(texts.iter().map(|s| s.as_str()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pipeline = Pipeline::new(cfg, vocab, &mut rng)?;
    let params = pipeline.parameters();
    let mut opt = Sgd::new(cfg.train.initial_lr);

    let ckpt_path = out.join("checkpoint.bin");
    let csv_path = out.join("losses.csv");
    let mut history: Vec<EpochRow> = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut step = 0usize;

    for epoch in 0..cfg.train.epochs {
        opt.learning_rate = if epoch >= cfg.train.lr_decay_epoch {
            cfg.train.initial_lr * 0.1
        } else {
            cfg.train.initial_lr
        };
        let mut sums = [0.0f64; 5];
        for chunk in train.chunks(cfg.train.batch_size) {
            let refs: Vec<&Episode> = chunk.iter().collect();
            // The tensor layer rejects non-finite intermediates outright;
            // fold that into the same abort-with-location diagnostic as an
            // explicit NaN total.
            let (objective, report) = pipeline.batch_losses(&refs).map_err(|e| match e {
                HarnessError::Vlt(mcam_core::vlt::VltError::Tensor(
                    TensorError::NonFinite { .. },
                ))
                | HarnessError::Mfe(mcam_core::mfe::MfeError::Tensor(
                    TensorError::NonFinite { .. },
                ))
                | HarnessError::Cam(mcam_core::cam::CamError::Tensor(
                    TensorError::NonFinite { .. },
                ))
                | HarnessError::Tensor(TensorError::NonFinite { .. }) => {
                    HarnessError::NanLoss { epoch, step, value: f64::NAN }
                }
                other => other,
            })?;
            if !report.l_total.is_finite() {
                return Err(HarnessError::NanLoss { epoch, step, value: report.l_total });
            }
            objective.backward()?;
            opt.step(&params)?;
            step += 1;
            let w = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([
                report.l_total,
                report.l_ce,
                report.l_kl,
                report.l_signal,
                report.l_sparse,
            ]) {
                *s += v * w;
            }
        }
        let n = train.len() as f64;
        let val_total = split_loss(&pipeline, &val, cfg.train.batch_size)?;
        history.push(EpochRow {
            epoch,
            lr: opt.learning_rate,
            train_total: sums[0] / n,
            train_ce: sums[1] / n,
            train_kl: sums[2] / n,
            train_signal: sums[3] / n,
            train_sparse: sums[4] / n,
            val_total,
        });
        if val_total < best_val {
            best_val = val_total;
            save_checkpoint(
                &pipeline,
                TrainState {
                    epoch: epoch as u32,
                    learning_rate: opt.learning_rate,
                    step_count: opt.step_count,
                },
                &ckpt_path,
            )?;
        }
    }

    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "epoch,lr,train_total,train_ce,train_kl,train_signal,train_sparse,val_total")?;
    for r in &history {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.lr, r.train_total, r.train_ce, r.train_kl, r.train_signal,
            r.train_sparse, r.val_total
        )?;
    }
    Ok(TrainSummary { checkpoint: ckpt_path, losses_csv: csv_path, history, best_val })
}

/// Metric tables for one split, narration and reasoning scored separately.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub config: Config,
    pub episodes: usize,
    pub narration: MetricReport,
    pub reasoning: MetricReport,
    pub overall: MetricReport,
}

fn push_pair(corpus: &mut Corpus, hyp: &str, reference: &str) {
    // Empty halves (a caption without a reasoning clause) still need a
    // token for the n-gram machinery.
    let fallback = |s: &str| {
        if s.trim().is_empty() {
            vec!["none".to_string()]
        } else {
            metric_tokens(s)
        }
    };
    corpus.push(fallback(hyp), vec![fallback(reference)]);
}

/// Decode captions for every episode of a split and score them.
pub fn run_eval(checkpoint: &Path, data: &Path, split: &'static str) -> HR<EvalReport> {
    let (pipeline, _) = load_checkpoint(checkpoint)?;
    let episodes = load_split(data, split)?;
    let mut narr = Corpus::default();
    let mut reason = Corpus::default();
    let mut overall = Corpus::default();
    for e in &episodes {
        let hyp = pipeline.generate_caption(e)?;
        let reference = caption_of(e);
        let (hn, hr) = split_caption(&hyp);
        let (rn, rr) = split_caption(&reference);
        push_pair(&mut narr, &hn, &rn);
        push_pair(&mut reason, &hr, &rr);
        push_pair(&mut overall, &hyp, &reference);
    }
    Ok(EvalReport {
        config: pipeline.config.clone(),
        episodes: episodes.len(),
        narration: full_report(&narr)?,
        reasoning: full_report(&reason)?,
        overall: full_report(&overall)?,
    })
}

/// Side-by-side causal explanation: exact SCM key factors next to the
/// neural attribution (gate mass per painted factor cell).
#[derive(Debug, Clone, Serialize)]
pub struct ExplainReport {
    pub episode_id: String,
    pub action: String,
    pub causal_label: Vec<String>,
    pub spurious_labels: Vec<String>,
    /// (factor, score) by descending key-factor score.
    pub scm_ranking: Vec<(String, f64)>,
    /// (factor, attribution mass) by descending mass; absent without a
    /// checkpoint.
    pub neural_ranking: Option<Vec<(String, f64)>>,
}

/// Attribution mass per factor, using the factor-to-grid-cell layout of the
/// renderer (cell index = factor index).
pub fn factor_attribution(pipeline: &Pipeline, scm: &Scm, episode: &Episode) -> HR<Vec<(String, f64)>> {
    if episode.clip.is_empty() {
        return Err(HarnessError::NoClip { id: episode.id.clone() });
    }
    let mass = pipeline.attribution(episode)?;
    let mut ranked: Vec<(String, f64)> = scm
        .factors()
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.clone(), mass[i]))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(ranked)
}

pub fn run_explain(
    scm: &Scm,
    episode: &Episode,
    pipeline: Option<&Pipeline>,
) -> HR<ExplainReport> {
    let (start, action, _) = episode
        .state_trace
        .first()
        .ok_or(mcam_core::simulator::SimError::EmptyTrace)?;
    let explanation = key_factors(scm, start.vehicle, *action)?;
    let neural_ranking = match pipeline {
        Some(p) => Some(factor_attribution(p, scm, episode)?),
        None => None,
    };
    Ok(ExplainReport {
        episode_id: episode.id.clone(),
        action: format!("{action:?}"),
        causal_label: episode.causal_label.clone(),
        spurious_labels: episode.spurious_labels.clone(),
        scm_ranking: explanation.ranked,
        neural_ranking,
    })
}

fn tensorize(e: HarnessError) -> TensorError {
    match e {
        HarnessError::Tensor(t) => t,
        HarnessError::Mfe(mcam_core::mfe::MfeError::Tensor(t)) => t,
        HarnessError::Cam(mcam_core::cam::CamError::Tensor(t)) => t,
        HarnessError::Vlt(mcam_core::vlt::VltError::Tensor(t)) => t,
        other => panic!("non-tensor failure inside grad check: {other}"),
    }
}

/// Finite-difference check of the composed pipeline objective. Nudging
/// every parameter is infeasible (the patch embedding alone has tens of
/// thousands of entries), so the check walks all parameters with at most
/// `max_entries` elements — biases, gains and the relationship matrix —
/// which together touch every stage of the chain.
pub fn gradcheck_composed(seed: u64, max_entries: usize) -> HR<GradCheckReport> {
    let mut cfg = Config::default();
    cfg.reseed(seed);
    cfg.model.channels = 1;
    cfg.model.width = 8;
    cfg.model.layers = 1;
    cfg.model.heads = 2;
    cfg.model.max_text = 6;
    cfg.scenario.frame_dims = [2, 32, 32];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::build(["the car stops because the light turns red"])?;
    let pipeline = Pipeline::new(&cfg, vocab.clone(), &mut rng)?;

    let [f, h, w] = cfg.scenario.frame_dims;
    let n = f * h * w * 3;
    let clip = Tensor::new(&[1, f, h, w, 3], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let targets =
        vec![mcam_core::vlt::tokenize("the car stops", &vocab, cfg.model.max_text)?];
    let truth = Tensor::new(&[1, 2], vec![0.25, 0.0])?;
    let weights = pipeline.loss_weights();

    let objective = |_: &[Parameter]| -> HR<Tensor> {
        let (features, gate) = pipeline.features(&clip)?;
        let prefix = pipeline.vlt.align_prefix(&features, gate.as_ref())?;
        let logits = pipeline.vlt.forward_teacher(&prefix, &targets)?;
        let pred = pipeline.vlt.predict_signals(&prefix)?;
        let (obj, _) =
            pipeline.vlt.training_losses(&logits, &targets, Some((&pred, &truth)), &weights)?;
        Ok(obj)
    };
    let small: Vec<Parameter> = pipeline
        .parameters()
        .into_iter()
        .filter(|p| p.tensor.len() <= max_entries)
        .collect();
    assert!(!small.is_empty());
    Ok(grad_check(|ps| objective(ps).map_err(tensorize), &small, 1e-5, 1e-4)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.reseed(11);
        cfg.scenario.episodes = 20;
        cfg.scenario.frame_dims = [4, 64, 96];
        cfg.scenario.noise_sigma = 0.02;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 4;
        cfg.model.channels = 2;
        cfg.model.width = 16;
        cfg.model.layers = 1;
        cfg.model.heads = 2;
        cfg
    }

    #[test]
    fn simulate_splits_are_disjoint_and_deterministic() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let a = run_simulate(&cfg, &dir.path().join("a")).unwrap();
        let b = run_simulate(&cfg, &dir.path().join("b")).unwrap();
        assert_eq!(a.train.len(), 16);
        assert_eq!(a.val.len(), 2);
        assert_eq!(a.test.len(), 2);
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        for id in &a.val {
            assert!(!a.train.contains(id) && !a.test.contains(id));
        }
    }

    #[test]
    fn hundred_episode_ratio() {
        let mut cfg = small_config();
        cfg.scenario.episodes = 100;
        cfg.scenario.render = false;
        let scm = traffic_scenario().unwrap();
        let episodes = generate_dataset(&scm, &cfg.scenario).unwrap();
        let n = episodes.len();
        assert_eq!((n - 2 * (n / 10), n / 10), (80, 10));
    }

    #[test]
    fn train_eval_round_trip_on_tiny_run() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        run_simulate(&cfg, &data).unwrap();
        let out = dir.path().join("run");
        let summary = run_train(&cfg, &data, &out).unwrap();
        assert!(summary.checkpoint.exists());
        assert!(summary.losses_csv.exists());
        assert_eq!(summary.history.len(), 1);
        assert!(summary.best_val.is_finite());

        let report = run_eval(&summary.checkpoint, &data, "test").unwrap();
        assert_eq!(report.episodes, 2);
        assert!(report.overall.bleu4 >= 0.0 && report.overall.bleu4 <= 1.0);
        serde_json::to_string(&report).unwrap();
    }

    #[test]
    fn explain_reports_scm_and_neural_rankings() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        run_simulate(&cfg, &data).unwrap();
        let episodes = load_split(&data, "train").unwrap();
        let scm = traffic_scenario().unwrap();
        let eventful = episodes.iter().find(|e| !e.causal_label.is_empty()).unwrap();

        let report = run_explain(&scm, eventful, None).unwrap();
        assert_eq!(report.scm_ranking.len(), 4);
        assert!(report.neural_ranking.is_none());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let texts: Vec<String> = episodes.iter().map(caption_of).collect();
        let vocab = Vocab::build(texts.iter().map(|s| s.as_str())).unwrap();
        let pipeline = Pipeline::new(&cfg, vocab, &mut rng).unwrap();
        let report = run_explain(&scm, eventful, Some(&pipeline)).unwrap();
        let neural = report.neural_ranking.unwrap();
        assert_eq!(neural.len(), 4);
        let total: f64 = neural.iter().map(|(_, m)| m).sum();
        assert!(total <= 1.0 + 1e-9);
    }

    #[test]
    fn composed_gradients_check_out() {
        let report = gradcheck_composed(5, 16).unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let cfg = {
            let mut c = small_config();
            c.train.initial_lr = 1e12; // guaranteed blow-up
            c.train.epochs = 3;
            c
        };
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        run_simulate(&cfg, &data).unwrap();
        match run_train(&cfg, &data, &dir.path().join("run")) {
            Err(HarnessError::NanLoss { .. }) => {}
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }
}
