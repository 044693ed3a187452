//! Episode synthesis: sampling compatible start states, planting the causal
//! factor, planting spurious correlates, and replay validation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsdag::{
    assignment_index, decode_index, Action, Danger, EnvState, EvolveOutcome, Heading,
    Intervention, SafeState, Scm, VehicleState,
};

use super::caption::template_caption;
use super::episode::{Episode, ScenarioConfig, Signal, SimError};
use super::render::render_clip;

const PAIR_ATTEMPTS: usize = 10_000;

fn heading_deg(h: Heading) -> f64 {
    match h {
        Heading::Straight => 0.0,
        Heading::Left => -45.0,
        Heading::Right => 45.0,
    }
}

fn synth_signals(frames: usize, start: VehicleState, end: VehicleState) -> Vec<Signal> {
    (0..frames)
        .map(|t| {
            let w = if frames == 1 { 1.0 } else { t as f64 / (frames - 1) as f64 };
            Signal {
                speed_mps: start.speed.mps() + w * (end.speed.mps() - start.speed.mps()),
                course_deg: heading_deg(start.heading)
                    + w * (heading_deg(end.heading) - heading_deg(start.heading)),
            }
        })
        .collect()
}

/// Generate one episode. Pure function of (scm, cfg, seed).
///
/// A compatible (vehicle, environment) pair is drawn uniformly, then one
/// factor value is perturbed so that the default action is no longer
/// admissible; that factor becomes the causal label and the driver's
/// corrective action (tie-broken by the recorded ξ draw) closes the loop.
/// When no perturbation can create a hazard for the sampled vehicle the
/// episode is uneventful (empty causal label).
pub fn generate_episode(scm: &Scm, cfg: &ScenarioConfig, seed: u64) -> Result<Episode, SimError> {
    cfg.validate()?;
    if scm.factors().len() != cfg.num_factors {
        return Err(SimError::FactorCountMismatch { scm: scm.factors().len(), config: cfg.num_factors });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains = scm.domains();
    let envs = scm.env_space();

    let mut pair = None;
    for _ in 0..PAIR_ATTEMPTS {
        let u = VehicleState::from_index(rng.gen_range(0..VehicleState::COUNT));
        let e_idx = rng.gen_range(0..envs);
        let z = EnvState::new(decode_index(&domains, e_idx), 0.0);
        if scm.hidden_danger(u, &z)? == Danger::Safe {
            pair = Some((u, z.assignments));
            break;
        }
    }
    let (u, z0) = pair.ok_or(SimError::NoCompatiblePair { attempts: PAIR_ATTEMPTS })?;

    // Candidate perturbations: a single factor-value change that makes the
    // default action inadmissible.
    let mut candidates = Vec::new();
    for (fi, &k) in domains.iter().enumerate() {
        for v in 0..k {
            if v == z0[fi] {
                continue;
            }
            let mut a = z0.clone();
            a[fi] = v;
            let e1 = assignment_index(&domains, &a);
            if !scm.admissible(u, e1).contains(&Action::Maintain) {
                candidates.push((fi, v));
            }
        }
    }
    let (z1, causal_label) = if candidates.is_empty() {
        (z0.clone(), Vec::new())
    } else {
        let (fi, v) = candidates[rng.gen_range(0..candidates.len())];
        let mut a = z0.clone();
        a[fi] = v;
        (a, vec![scm.factors()[fi].name.clone()])
    };

    let xi: f64 = rng.gen();
    let env0 = EnvState::new(z0.clone(), xi);
    let env1 = EnvState::new(z1.clone(), xi);
    let action = scm.select_action_xi(u, &env1, xi)?;
    let next = match scm.evolve(u, &env1, Intervention::Force(action))? {
        EvolveOutcome::Next(s) => s,
        EvolveOutcome::Danger(_) => unreachable!("forced intervention always yields a next state"),
    };

    let state_trace = vec![(SafeState { vehicle: u, env: env0 }, action, next.clone())];
    let signals = synth_signals(cfg.frame_dims[0], u, next.vehicle);
    let (narration, reasoning) = template_caption(scm, &state_trace, &causal_label)?;
    let mut episode = Episode {
        id: format!("ep-{seed:016x}"),
        state_trace,
        signals,
        narration,
        reasoning,
        causal_label,
        spurious_labels: Vec::new(),
        frame_dims: cfg.frame_dims,
        render_start: z0,
        render_end: z1,
        clip: Vec::new(),
        seed,
    };
    if cfg.render {
        episode.clip = render_clip(scm, &episode, cfg)?;
    }
    Ok(episode)
}

/// Plant a spurious correlate: with probability rho the factor's rendered
/// value is forced to the last (active) value of its domain at both
/// endpoints, otherwise to a uniformly drawn inactive value. Only the
/// rendered pattern changes — the state trace and every Scm mechanism stay
/// untouched, so the planted factor has zero causal effect by construction.
pub fn inject_spurious(
    scm: &Scm,
    cfg: &ScenarioConfig,
    episode: &Episode,
    factor: &str,
    rho: f64,
    rng: &mut impl Rng,
) -> Result<Episode, SimError> {
    if episode.causal_label.iter().any(|c| c == factor) {
        return Err(SimError::SpuriousIsCause { factor: factor.to_string() });
    }
    let fi = scm.factor_index(factor)?;
    let k = scm.factors()[fi].domain.len();
    let value = if rng.gen::<f64>() < rho { k - 1 } else { rng.gen_range(0..k - 1) };
    let mut out = episode.clone();
    out.render_start[fi] = value;
    out.render_end[fi] = value;
    if !out.spurious_labels.iter().any(|s| s == factor) {
        out.spurious_labels.push(factor.to_string());
    }
    if cfg.render {
        out.clip = render_clip(scm, &out, cfg)?;
    }
    Ok(out)
}

/// Generate a full dataset with per-episode RNG streams derived as
/// seed ⊕ index. When the config carries a spurious plan, the planted
/// factor is activated with probability rho on episodes where the
/// confounder takes its trigger value and with probability 1 − rho
/// elsewhere; episodes whose own cause is the planted factor are left
/// alone.
pub fn generate_dataset(scm: &Scm, cfg: &ScenarioConfig) -> Result<Vec<Episode>, SimError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.episodes);
    for i in 0..cfg.episodes {
        let seed = cfg.seed ^ i as u64;
        let mut episode = generate_episode(scm, cfg, seed)?;
        if let Some(plan) = &cfg.spurious {
            if !episode.causal_label.iter().any(|c| c == &plan.factor) {
                let end_env = &episode.state_trace[0].2.env;
                let triggered = scm.env_value(end_env, &plan.confounder_factor)? == plan.confounder_value;
                let rho = if triggered { cfg.spurious_rho } else { 1.0 - cfg.spurious_rho };
                let mut inject_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51b5_ee75);
                episode = inject_spurious(scm, cfg, &episode, &plan.factor, rho, &mut inject_rng)?;
            }
        }
        out.push(episode);
    }
    Ok(out)
}

/// Label soundness: replaying the Scm on the recorded trace (same
/// environments, same ξ draws) must reproduce every action and end state.
pub fn replay_matches(scm: &Scm, episode: &Episode) -> Result<bool, SimError> {
    if episode.state_trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    for (start, action, end) in &episode.state_trace {
        if scm.select_action_xi(start.vehicle, &end.env, end.env.noise)? != *action {
            return Ok(false);
        }
        match scm.evolve(start.vehicle, &end.env, Intervention::Force(*action))? {
            EvolveOutcome::Next(next) if next.vehicle == end.vehicle => {}
            _ => return Ok(false),
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use crate::dsdag::scenario::{
        traffic_scenario, FACTOR_BRAKE_LIGHT, FACTOR_TRAFFIC_LIGHT,
    };

    use super::super::episode::SpuriousPlan;
    use super::*;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig {
            num_factors: 4,
            spurious_rho: 0.9,
            frame_dims: [4, 64, 96],
            noise_sigma: 0.05,
            episodes: 1,
            seed: 0,
            spurious: None,
            render: true,
        }
    }

    fn fast_cfg(episodes: usize) -> ScenarioConfig {
        ScenarioConfig { render: false, noise_sigma: 0.0, episodes, ..cfg() }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let scm = traffic_scenario().unwrap();
        let a = generate_episode(&scm, &cfg(), 42).unwrap();
        let b = generate_episode(&scm, &cfg(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn red_light_episode_gets_the_canonical_captions() {
        let scm = traffic_scenario().unwrap();
        let cfg = fast_cfg(1);
        let mut seen = false;
        for seed in 0..200 {
            let ep = generate_episode(&scm, &cfg, seed).unwrap();
            if ep.causal_label == [FACTOR_TRAFFIC_LIGHT.to_string()] && ep.action().unwrap() == Action::Stop {
                assert_eq!(ep.narration, "the car stops");
                assert_eq!(ep.reasoning, "because the traffic light turns red");
                seen = true;
                break;
            }
        }
        assert!(seen, "no stop-at-red episode in 200 seeds");
    }

    #[test]
    fn factor_count_mismatch_rejected() {
        let scm = traffic_scenario().unwrap();
        let bad = ScenarioConfig { num_factors: 3, ..cfg() };
        assert!(matches!(
            generate_episode(&scm, &bad, 0),
            Err(SimError::FactorCountMismatch { scm: 4, config: 3 })
        ));
    }

    #[test]
    fn replay_reproduces_every_generated_episode() {
        let scm = traffic_scenario().unwrap();
        let cfg = fast_cfg(1);
        for seed in 0..100 {
            let ep = generate_episode(&scm, &cfg, seed).unwrap();
            assert!(replay_matches(&scm, &ep).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn injection_on_the_true_cause_is_rejected() {
        let scm = traffic_scenario().unwrap();
        let cfg = fast_cfg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..200 {
            let ep = generate_episode(&scm, &cfg, seed).unwrap();
            if ep.causal_label == [FACTOR_TRAFFIC_LIGHT.to_string()] {
                let err = inject_spurious(&scm, &cfg, &ep, FACTOR_TRAFFIC_LIGHT, 0.9, &mut rng);
                assert!(matches!(err, Err(SimError::SpuriousIsCause { .. })));
                return;
            }
        }
        panic!("no traffic-light episode found");
    }

    #[test]
    fn co_occurrence_tracks_rho() {
        let scm = traffic_scenario().unwrap();
        let cfg = fast_cfg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut active = 0usize;
        let total = 1000usize;
        for seed in 0..total as u64 {
            let ep = generate_episode(&scm, &cfg, seed).unwrap();
            if ep.causal_label == [FACTOR_BRAKE_LIGHT.to_string()] {
                continue; // cannot happen: the factor is causally inert
            }
            let planted = inject_spurious(&scm, &cfg, &ep, FACTOR_BRAKE_LIGHT, 0.9, &mut rng).unwrap();
            assert!(planted.spurious_labels.contains(&FACTOR_BRAKE_LIGHT.to_string()));
            if planted.render_end[3] == 1 {
                active += 1;
            }
        }
        let frac = active as f64 / total as f64;
        assert!((frac - 0.9).abs() < 0.05, "co-occurrence {frac}");
    }

    #[test]
    fn rho_zero_never_activates() {
        let scm = traffic_scenario().unwrap();
        let cfg = fast_cfg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..200 {
            let ep = generate_episode(&scm, &cfg, seed).unwrap();
            let planted = inject_spurious(&scm, &cfg, &ep, FACTOR_BRAKE_LIGHT, 0.0, &mut rng).unwrap();
            assert_eq!(planted.render_end[3], 0);
        }
    }

    /// 2x2 chi-square statistic; 0 when any marginal is empty.
    fn chi2(table: [[f64; 2]; 2]) -> f64 {
        let row: Vec<f64> = (0..2).map(|r| table[r][0] + table[r][1]).collect();
        let col: Vec<f64> = (0..2).map(|c| table[0][c] + table[1][c]).collect();
        let n: f64 = row.iter().sum();
        if row.iter().chain(&col).any(|&m| m == 0.0) {
            return 0.0;
        }
        let mut stat = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                let expected = row[r] * col[c] / n;
                stat += (table[r][c] - expected).powi(2) / expected;
            }
        }
        stat
    }

    #[test]
    fn spurious_independent_of_action_given_the_cause() {
        let scm = traffic_scenario().unwrap();
        let cfg = ScenarioConfig {
            spurious: Some(SpuriousPlan {
                factor: FACTOR_BRAKE_LIGHT.into(),
                confounder_factor: FACTOR_TRAFFIC_LIGHT.into(),
                confounder_value: "red".into(),
            }),
            seed: 11,
            ..fast_cfg(10_000)
        };
        let episodes = generate_dataset(&scm, &cfg).unwrap();
        // condition on the confounder value; within each group tabulate
        // (spurious active) x (action == stop)
        let mut tables = vec![[[0.0f64; 2]; 2]; 3];
        for ep in &episodes {
            let light = ep.state_trace[0].2.env.assignments[0];
            let active = (ep.render_end[3] == 1) as usize;
            let stopped = (ep.action().unwrap() == Action::Stop) as usize;
            tables[light][active][stopped] += 1.0;
        }
        // critical value of chi-square(1 dof) at p = 0.01
        for (light, table) in tables.iter().enumerate() {
            let stat = chi2(*table);
            assert!(stat < 6.635, "light value {light}: chi2 {stat}, table {table:?}");
        }
        // and the marginal correlation the plant is meant to create exists
        let (mut stop_active, mut stops) = (0.0, 0.0);
        for ep in &episodes {
            if ep.action().unwrap() == Action::Stop {
                stops += 1.0;
                if ep.render_end[3] == 1 {
                    stop_active += 1.0;
                }
            }
        }
        assert!(stop_active / stops > 0.85, "P(active|stop) = {}", stop_active / stops);
    }
}
