//! Template captions over a closed vocabulary.

use crate::dsdag::{Action, SafeState, Scm};

use super::episode::SimError;

fn narration_for(action: Action) -> &'static str {
    match action {
        Action::Maintain => "the car drives forward",
        Action::Accelerate => "the car speeds up",
        Action::Decelerate => "the car slows down",
        Action::Stop => "the car stops",
        Action::TurnLeft => "the car turns left",
        Action::TurnRight => "the car turns right",
        Action::LaneChange => "the car changes lanes",
        Action::Reverse => "the car backs up",
    }
}

/// Produce (narration, reasoning) for a state trace. The reasoning phrase
/// names the causal factor and the value it took at the end of the episode;
/// uneventful episodes get the default clear-road justification. Both
/// strings are deterministic functions of their inputs.
pub fn template_caption(
    scm: &Scm,
    state_trace: &[(SafeState, Action, SafeState)],
    causal_label: &[String],
) -> Result<(String, String), SimError> {
    let (_, action, end) = state_trace.first().ok_or(SimError::EmptyTrace)?;
    let narration = narration_for(*action).to_string();
    let reasoning = match causal_label.first() {
        None => "because the road is clear".to_string(),
        Some(name) => {
            let value = scm.env_value(&end.env, name)?;
            let words = name.replace('_', " ");
            // lights change state; everything else just is
            if name.contains("light") {
                format!("because the {words} turns {value}")
            } else {
                format!("because the {words} is {value}")
            }
        }
    };
    Ok((narration, reasoning))
}

#[cfg(test)]
mod tests {
    use crate::dsdag::scenario::{traffic_scenario, FACTOR_TRAFFIC_LIGHT};
    use crate::dsdag::{EvolveOutcome, Heading, Intervention, Loading, Speed, VehicleState};

    use super::*;

    fn trace_for(
        scm: &Scm,
        light: &str,
        action: Action,
    ) -> Vec<(SafeState, Action, SafeState)> {
        let u = VehicleState { speed: Speed::Medium, heading: Heading::Straight, loading: Loading::Light };
        let z = scm
            .env(
                &[
                    ("traffic_light", light),
                    ("lead_distance", "far"),
                    ("weather", "clear"),
                    ("brake_light_ahead", "off"),
                ],
                0.0,
            )
            .unwrap();
        let next = match scm.evolve(u, &z, Intervention::Force(action)).unwrap() {
            EvolveOutcome::Next(s) => s,
            other => panic!("{other:?}"),
        };
        vec![(SafeState { vehicle: u, env: z }, action, next)]
    }

    #[test]
    fn stop_at_red_light() {
        let scm = traffic_scenario().unwrap();
        let trace = trace_for(&scm, "red", Action::Stop);
        let label = vec![FACTOR_TRAFFIC_LIGHT.to_string()];
        let (narration, reasoning) = template_caption(&scm, &trace, &label).unwrap();
        assert_eq!(narration, "the car stops");
        assert_eq!(reasoning, "because the traffic light turns red");
    }

    #[test]
    fn uneventful_default() {
        let scm = traffic_scenario().unwrap();
        let trace = trace_for(&scm, "green", Action::Maintain);
        let (narration, reasoning) = template_caption(&scm, &trace, &[]).unwrap();
        assert_eq!(narration, "the car drives forward");
        assert_eq!(reasoning, "because the road is clear");
    }

    #[test]
    fn same_inputs_same_strings() {
        let scm = traffic_scenario().unwrap();
        let trace = trace_for(&scm, "red", Action::Stop);
        let label = vec![FACTOR_TRAFFIC_LIGHT.to_string()];
        let a = template_caption(&scm, &trace, &label).unwrap();
        let b = template_caption(&scm, &trace, &label).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_trace_rejected() {
        let scm = traffic_scenario().unwrap();
        assert!(matches!(template_caption(&scm, &[], &[]), Err(SimError::EmptyTrace)));
    }
}
