//! The canonical traffic-light scenario: a four-factor urban SCM whose
//! ground truth is known by construction. The brake-light factor has no
//! causal effect on any mechanism, which makes it the designated spurious
//! correlate for the simulator.

use super::scm::{build_dsdag, Scm, ScmDescription};
use super::types::*;
use super::ScmError;

pub const FACTOR_TRAFFIC_LIGHT: &str = "traffic_light";
pub const FACTOR_LEAD_DISTANCE: &str = "lead_distance";
pub const FACTOR_WEATHER: &str = "weather";
pub const FACTOR_BRAKE_LIGHT: &str = "brake_light_ahead";

/// Hazard rules; factor order is [traffic_light, lead_distance, weather,
/// brake_light_ahead] with domains [green|yellow|red, far|near, clear|rain,
/// off|on]. The brake-light column is deliberately ignored everywhere.
fn hazard(v: VehicleState, env: &[usize]) -> Danger {
    let (light, lead, weather) = (env[0], env[1], env[2]);
    if light == 2 && v.speed != Speed::Stopped {
        Danger::Violation
    } else if light == 1 && v.speed == Speed::Fast {
        Danger::Violation
    } else if lead == 1 && v.speed == Speed::Fast {
        Danger::Collision
    } else if weather == 1 && v.speed == Speed::Fast {
        Danger::LossOfControl
    } else {
        Danger::Safe
    }
}

fn corrective_actions(v: VehicleState, env: &[usize]) -> Vec<Action> {
    match hazard(v, env) {
        Danger::Safe => vec![Action::Maintain],
        Danger::Violation if env[0] == 2 => vec![Action::Stop],
        _ => vec![Action::Decelerate],
    }
}

/// Nominal kinematics for an action, then clamp the speed down until the
/// result is safe under the same environment (a stopped vehicle is always
/// safe under these rules).
fn transition(v: VehicleState, env: &[usize], action: Action) -> VehicleState {
    let mut next = v;
    match action {
        Action::Maintain | Action::LaneChange => {}
        Action::Accelerate => next.speed = v.speed.faster(),
        Action::Decelerate => next.speed = v.speed.slower(),
        Action::Stop | Action::Reverse => next.speed = Speed::Stopped,
        Action::TurnLeft => {
            next.heading = Heading::Left;
            next.speed = v.speed.slower();
        }
        Action::TurnRight => {
            next.heading = Heading::Right;
            next.speed = v.speed.slower();
        }
    }
    while hazard(next, env) != Danger::Safe {
        next.speed = next.speed.slower();
    }
    next
}

pub fn traffic_factors() -> Vec<EnvFactor> {
    vec![
        EnvFactor::new(FACTOR_TRAFFIC_LIGHT, &["green", "yellow", "red"]).unwrap(),
        EnvFactor::new(FACTOR_LEAD_DISTANCE, &["far", "near"]).unwrap(),
        EnvFactor::new(FACTOR_WEATHER, &["clear", "rain"]).unwrap(),
        EnvFactor::new(FACTOR_BRAKE_LIGHT, &["off", "on"]).unwrap(),
    ]
}

pub fn traffic_scenario() -> Result<Scm, ScmError> {
    build_dsdag(ScmDescription::from_mechanisms(
        traffic_factors(),
        hazard,
        corrective_actions,
        transition,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn medium() -> VehicleState {
        VehicleState { speed: Speed::Medium, heading: Heading::Straight, loading: Loading::Light }
    }

    #[test]
    fn fast_near_red_is_hazardous() {
        let scm = traffic_scenario().unwrap();
        let u = VehicleState { speed: Speed::Fast, ..medium() };
        let z = scm
            .env(
                &[("traffic_light", "red"), ("lead_distance", "near"), ("weather", "clear"), ("brake_light_ahead", "off")],
                0.0,
            )
            .unwrap();
        let d = scm.hidden_danger(u, &z).unwrap();
        assert!(matches!(d, Danger::Violation | Danger::Collision), "{d:?}");
    }

    #[test]
    fn stopped_vehicle_is_always_safe() {
        let scm = traffic_scenario().unwrap();
        let u = VehicleState { speed: Speed::Stopped, ..medium() };
        let domains = scm.domains();
        for e_idx in 0..scm.env_space() {
            let mut i = e_idx;
            let mut a = vec![0usize; domains.len()];
            for d in (0..domains.len()).rev() {
                a[d] = i % domains[d];
                i /= domains[d];
            }
            let z = EnvState::new(a, 0.0);
            assert_eq!(scm.hidden_danger(u, &z).unwrap(), Danger::Safe);
        }
    }

    #[test]
    fn clear_road_green_light_is_safe() {
        let scm = traffic_scenario().unwrap();
        let z = scm
            .env(
                &[("traffic_light", "green"), ("lead_distance", "far"), ("weather", "clear"), ("brake_light_ahead", "off")],
                0.0,
            )
            .unwrap();
        assert_eq!(scm.hidden_danger(medium(), &z).unwrap(), Danger::Safe);
    }

    #[test]
    fn red_light_mandates_stop() {
        let scm = traffic_scenario().unwrap();
        let z = scm
            .env(
                &[("traffic_light", "red"), ("lead_distance", "far"), ("weather", "clear"), ("brake_light_ahead", "off")],
                0.0,
            )
            .unwrap();
        for xi in [0.0, 0.5, 0.99] {
            assert_eq!(scm.select_action_xi(medium(), &z, xi).unwrap(), Action::Stop);
        }
    }

    #[test]
    fn stopping_at_red_restores_safety() {
        let scm = traffic_scenario().unwrap();
        let z = scm
            .env(
                &[("traffic_light", "red"), ("lead_distance", "far"), ("weather", "clear"), ("brake_light_ahead", "off")],
                0.0,
            )
            .unwrap();
        match scm.evolve(medium(), &z, Intervention::Force(Action::Stop)).unwrap() {
            EvolveOutcome::Next(state) => {
                assert_eq!(state.vehicle.speed, Speed::Stopped);
                assert_eq!(scm.hidden_danger(state.vehicle, &state.env).unwrap(), Danger::Safe);
            }
            other => panic!("expected next state, got {other:?}"),
        }
    }
}
