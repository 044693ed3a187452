//! Scratch probe: are the clips/features of the collapsing episodes
//! actually distinguishable? (temporary, not part of the deliverable)

use mcam_cli::config::Config;
use mcam_cli::pipeline::{caption_of, Pipeline};
use mcam_core::dsdag::scenario::traffic_scenario;
use mcam_core::simulator::generate_dataset;
use mcam_core::vlt::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.15);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(120);
    let mut cfg = Config::default();
    cfg.reseed(42);
    cfg.scenario.episodes = 32;
    cfg.scenario.noise_sigma = 0.0;
    cfg.model.channels = 2;
    cfg.model.width = 32;
    cfg.model.layers = 1;
    cfg.model.heads = 2;

    let scm = traffic_scenario().unwrap();
    let episodes = generate_dataset(&scm, &cfg.scenario).unwrap();
    let texts: Vec<String> = episodes.iter().map(caption_of).collect();
    let vocab = Vocab::build(texts.iter().map(|s| s.as_str())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pipeline = Pipeline::new(&cfg, vocab, &mut rng).unwrap();

    for e in &episodes {
        println!(
            "{} start {:?} end {:?} action {:?} caption {:?}",
            e.id,
            e.render_start,
            e.render_end,
            e.state_trace[0].1,
            caption_of(e)
        );
    }

    // pairwise identical clips?
    for i in 0..episodes.len() {
        for j in i + 1..episodes.len() {
            if episodes[i].clip == episodes[j].clip {
                println!("IDENTICAL CLIPS: {} and {}", episodes[i].id, episodes[j].id);
            }
        }
    }

    // pairwise close features?
    let mut feats = Vec::new();
    for e in &episodes {
        let clip = pipeline.clip_tensor(&[e]).unwrap();
        let (f, _) = pipeline.features(&clip).unwrap();
        feats.push(f.to_vec());
    }
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            let d: f64 = feats[i]
                .iter()
                .zip(&feats[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if d < 1e-6 && caption_of(&episodes[i]) != caption_of(&episodes[j]) {
                println!(
                    "FEATURES COLLIDE ({d:.2e}): {} {:?} vs {} {:?}",
                    episodes[i].id,
                    caption_of(&episodes[i]),
                    episodes[j].id,
                    caption_of(&episodes[j])
                );
            }
        }
    }
    // feature statistics: scale and inter-episode separation
    let scale = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    println!("feature max-abs {:.4} rms {:.6}", scale(&feats[0]), rms(&feats[0]));
    let mut min_sep = f64::INFINITY;
    let mut max_sep = 0.0f64;
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            if caption_of(&episodes[i]) == caption_of(&episodes[j]) {
                continue;
            }
            let d: f64 = feats[i]
                .iter()
                .zip(&feats[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            min_sep = min_sep.min(d);
            max_sep = max_sep.max(d);
        }
    }
    println!("cross-caption feature separation: min {min_sep:.6} max {max_sep:.6}");

    // and the prefix the decoder actually sees
    let clip0 = pipeline.clip_tensor(&[&episodes[3]]).unwrap(); // ep-29, uneventful
    let clip1 = pipeline.clip_tensor(&[&episodes[4]]).unwrap(); // ep-2e, stop at red
    let (f0, g0) = pipeline.features(&clip0).unwrap();
    let (f1, g1) = pipeline.features(&clip1).unwrap();
    let p0 = pipeline.vlt.align_prefix(&f0, g0.as_ref()).unwrap();
    let p1 = pipeline.vlt.align_prefix(&f1, g1.as_ref()).unwrap();
    let d: f64 = p0
        .to_vec()
        .iter()
        .zip(&p1.to_vec())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("prefix max-abs {:.6}, prefix separation {:.6}", scale(&p0.to_vec()), d);

    // quick training, then per-episode teacher-forced loss vs greedy decode
    let params = pipeline.parameters();
    let mut opt = mcam_core::numerics::Sgd::new(lr);
    for epoch in 0..epochs {
        let mut sum = 0.0;
        for chunk in episodes.chunks(4) {
            let refs: Vec<&_> = chunk.iter().collect();
            let (obj, rep) = pipeline.batch_losses(&refs).unwrap();
            obj.backward().unwrap();
            opt.step(&params).unwrap();
            sum += rep.l_total * chunk.len() as f64;
        }
        if epoch % 20 == 0 {
            println!("epoch {epoch} loss {}", sum / 32.0);
        }
    }
    for e in &episodes {
        let (_, rep) = pipeline.batch_losses(&[e]).unwrap();
        let hyp = pipeline.generate_caption(e).unwrap();
        let reference = caption_of(e);
        let mark = if hyp == reference { " " } else { "X" };
        println!("{mark} {} ce {:.4} hyp {:?}", e.id, rep.l_ce, hyp);
        if mark == "X" {
            let mass = pipeline.attribution(e).unwrap();
            println!("   attribution {:?}", mass.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        }
    }
    // post-training prefix separation between an uneventful episode and a
    // stop-at-red episode
    let clip0 = pipeline.clip_tensor(&[&episodes[3]]).unwrap();
    let clip1 = pipeline.clip_tensor(&[&episodes[4]]).unwrap();
    let (f0, g0) = pipeline.features(&clip0).unwrap();
    let (f1, g1) = pipeline.features(&clip1).unwrap();
    let q0 = pipeline.vlt.align_prefix(&f0, g0.as_ref()).unwrap();
    let q1 = pipeline.vlt.align_prefix(&f1, g1.as_ref()).unwrap();
    let d: f64 = q0
        .to_vec()
        .iter()
        .zip(&q1.to_vec())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("post-training prefix separation {d:.6}");
    let df: f64 = f0
        .to_vec()
        .iter()
        .zip(&f1.to_vec())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let fmax = f0.to_vec().iter().map(|x| x.abs()).fold(0.0f64, f64::max);
    println!("post-training feature separation {df:.6} (max-abs {fmax:.4})");
    println!("done");
}
