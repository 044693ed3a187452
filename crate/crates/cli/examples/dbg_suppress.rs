//! Scratch probe for the suppression experiment: per-epoch attribution
//! rates on a failing seed. (temporary, not part of the deliverable)

use mcam_cli::config::Config;
use mcam_cli::pipeline::{caption_of, Pipeline};
use mcam_cli::run::run_simulate;
use mcam_core::dsdag::scenario::traffic_scenario;
use mcam_core::numerics::Sgd;
use mcam_core::simulator::{read_dataset, Episode, SpuriousPlan};
use mcam_core::vlt::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rate(pipeline: &Pipeline, test: &[Episode]) -> (f64, f64, f64) {
    // (success rate, mean causal-cell mass, mean spurious mass)
    let (mut hits, mut total) = (0usize, 0usize);
    let (mut cmass, mut smass) = (0.0, 0.0);
    for e in test {
        let Some(cause) = e.causal_label.first() else { continue };
        let ci = match cause.as_str() {
            "traffic_light" => 0,
            "lead_distance" => 1,
            "weather" => 2,
            _ => 3,
        };
        let mass = pipeline.attribution(e).unwrap();
        total += 1;
        cmass += mass[ci];
        smass += mass[3];
        if mass[ci] > mass[3] {
            hits += 1;
        }
    }
    (hits as f64 / total as f64, cmass / total as f64, smass / total as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(101);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(16);

    let mut cfg = Config::default();
    cfg.reseed(seed);
    cfg.scenario.episodes = 500;
    cfg.scenario.spurious_rho = 0.9;
    cfg.scenario.spurious = Some(SpuriousPlan {
        factor: "brake_light_ahead".into(),
        confounder_factor: "traffic_light".into(),
        confounder_value: "red".into(),
    });
    cfg.model.channels = 2;
    cfg.model.width = 32;
    cfg.model.layers = 1;
    cfg.model.heads = 2;
    cfg.train.initial_lr = lr;
    cfg.train.batch_size = 16;

    let _ = traffic_scenario().unwrap();
    let dir = std::env::temp_dir().join(format!("dbg-suppress-{seed}"));
    if !dir.join("train").exists() {
        run_simulate(&cfg, &dir).unwrap();
    }
    let train = read_dataset(&dir.join("train")).unwrap();
    let test = read_dataset(&dir.join("test")).unwrap();

    let texts: Vec<String> = train.iter().map(caption_of).collect();
    let vocab = Vocab::build(texts.iter().map(|s| s.as_str())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pipeline = Pipeline::new(&cfg, vocab, &mut rng).unwrap();
    let gate_boost: f64 = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let all = pipeline.parameters();
    let (gate_params, params): (Vec<_>, Vec<_>) =
        all.into_iter().partition(|p| p.name.starts_with("cam."));
    let mut opt = Sgd::new(lr);
    let mut gate_opt = Sgd::new(lr * gate_boost);

    let (r0, c0, s0) = rate(&pipeline, &test);
    println!("seed {seed} lr {lr}: epoch -1 rate {r0:.3} causal {c0:.4} spurious {s0:.4}");

    // one-batch gradient magnitude on the gate projection
    {
        let refs: Vec<&Episode> = train.iter().take(16).collect();
        let (obj, _) = pipeline.batch_losses(&refs).unwrap();
        obj.backward().unwrap();
        for p in gate_params.iter().chain(params.iter()) {
            if p.name.starts_with("cam.") || p.name.starts_with("vlt.align") {
                let g = p.tensor.grad().unwrap();
                let norm = (g.iter().map(|x| x * x).sum::<f64>() / g.len() as f64).sqrt();
                let mx = g.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
                println!("  grad {}: rms {norm:.3e} max {mx:.3e}", p.name);
            }
            p.tensor.zero_grad();
        }
    }
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.train.batch_size) {
            let refs: Vec<&Episode> = chunk.iter().map(|&i| &train[i]).collect();
            let (obj, rep) = pipeline.batch_losses(&refs).unwrap();
            obj.backward().unwrap();
            opt.step(&params).unwrap();
            gate_opt.step(&gate_params).unwrap();
            sum += rep.l_total * chunk.len() as f64;
        }
        let (r, c, s) = rate(&pipeline, &test);
        println!(
            "seed {seed} lr {lr}: epoch {epoch} loss {:.4} rate {r:.3} causal {c:.4} spurious {s:.4}",
            sum / train.len() as f64
        );
    }
}
