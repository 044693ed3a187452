use std::fmt;

use serde::{Deserialize, Serialize};

use super::ScmError;

/// Discrete speed bin of the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speed {
    Stopped,
    Slow,
    Medium,
    Fast,
}

impl Speed {
    pub const ALL: [Speed; 4] = [Speed::Stopped, Speed::Slow, Speed::Medium, Speed::Fast];

    pub fn index(self) -> usize {
        Speed::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn slower(self) -> Speed {
        Speed::ALL[self.index().saturating_sub(1)]
    }

    pub fn faster(self) -> Speed {
        Speed::ALL[(self.index() + 1).min(3)]
    }

    /// Representative speed in m/s for signal synthesis.
    pub fn mps(self) -> f64 {
        match self {
            Speed::Stopped => 0.0,
            Speed::Slow => 4.0,
            Speed::Medium => 10.0,
            Speed::Fast => 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    Straight,
    Left,
    Right,
}

impl Heading {
    pub const ALL: [Heading; 3] = [Heading::Straight, Heading::Left, Heading::Right];

    pub fn index(self) -> usize {
        Heading::ALL.iter().position(|&h| h == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Loading {
    Light,
    Heavy,
}

impl Loading {
    pub const ALL: [Loading; 2] = [Loading::Light, Loading::Heavy];

    pub fn index(self) -> usize {
        Loading::ALL.iter().position(|&l| l == self).unwrap()
    }
}

/// Ego-vehicle state, discretized into the declared bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VehicleState {
    pub speed: Speed,
    pub heading: Heading,
    pub loading: Loading,
}

impl VehicleState {
    pub const COUNT: usize = 4 * 3 * 2;

    pub fn index(self) -> usize {
        (self.speed.index() * 3 + self.heading.index()) * 2 + self.loading.index()
    }

    pub fn from_index(i: usize) -> VehicleState {
        VehicleState {
            speed: Speed::ALL[i / 6],
            heading: Heading::ALL[(i / 2) % 3],
            loading: Loading::ALL[i % 2],
        }
    }

    pub fn all() -> impl Iterator<Item = VehicleState> {
        (0..VehicleState::COUNT).map(VehicleState::from_index)
    }
}

/// The closed action set Y_c. The empty action (no intervention) is
/// expressed through [`Intervention::NoAction`], not here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Maintain,
    Accelerate,
    Decelerate,
    Stop,
    TurnLeft,
    TurnRight,
    LaneChange,
    Reverse,
}

impl Action {
    pub const ALL: [Action; 8] = [
        Action::Maintain,
        Action::Accelerate,
        Action::Decelerate,
        Action::Stop,
        Action::TurnLeft,
        Action::TurnRight,
        Action::LaneChange,
        Action::Reverse,
    ];

    pub fn index(self) -> usize {
        Action::ALL.iter().position(|&a| a == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Maintain => "maintain",
            Action::Accelerate => "accelerate",
            Action::Decelerate => "decelerate",
            Action::Stop => "stop",
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::LaneChange => "lane_change",
            Action::Reverse => "reverse",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        Action::ALL.iter().copied().find(|a| a.name() == s)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Danger set W. `Safe` is a distinguished element so the hidden-danger
/// mechanism is total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Danger {
    Safe,
    Collision,
    Fall,
    LossOfControl,
    Violation,
}

impl Danger {
    pub const ALL: [Danger; 5] = [
        Danger::Safe,
        Danger::Collision,
        Danger::Fall,
        Danger::LossOfControl,
        Danger::Violation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Danger::Safe => "safe",
            Danger::Collision => "collision",
            Danger::Fall => "fall",
            Danger::LossOfControl => "loss_of_control",
            Danger::Violation => "violation",
        }
    }

    pub fn parse(s: &str) -> Option<Danger> {
        Danger::ALL.iter().copied().find(|d| d.name() == s)
    }
}

/// A named environment factor with a finite ordered value domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvFactor {
    pub name: String,
    pub domain: Vec<String>,
}

impl EnvFactor {
    pub fn new(name: &str, domain: &[&str]) -> Result<EnvFactor, ScmError> {
        if domain.len() < 2 {
            return Err(ScmError::InvalidFactor {
                name: name.to_string(),
                reason: format!("domain size {} < 2", domain.len()),
            });
        }
        Ok(EnvFactor {
            name: name.to_string(),
            domain: domain.iter().map(|s| s.to_string()).collect(),
        })
    }
}

/// One joint assignment of every environment factor, plus the noise draw ξ.
/// Assignment order follows the Scm factor declaration order; ξ is drawn
/// from its own RNG stream, independent of vehicle state and factor values,
/// and only ever breaks action ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub assignments: Vec<usize>,
    pub noise: f64,
}

impl EnvState {
    pub fn new(assignments: Vec<usize>, noise: f64) -> EnvState {
        EnvState { assignments, noise }
    }
}

/// A by-construction danger-free snapshot: vehicle state plus the
/// environment in force at that instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeState {
    pub vehicle: VehicleState,
    pub env: EnvState,
}

/// Nodes of the driving-state causal graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Node {
    Xs,
    Z,
    Y,
    W,
    Xe,
}

impl Node {
    pub const ALL: [Node; 5] = [Node::Xs, Node::Z, Node::Y, Node::W, Node::Xe];

    pub fn name(self) -> &'static str {
        match self {
            Node::Xs => "Xs",
            Node::Z => "Z",
            Node::Y => "Y",
            Node::W => "W",
            Node::Xe => "Xe",
        }
    }

    pub fn parse(s: &str) -> Option<Node> {
        Node::ALL.iter().copied().find(|n| n.name() == s)
    }
}

/// The canonical edge set of the driving-state graph: Y is caused by the
/// start state and the environment, the danger by the start state and the
/// environment, and the end state by the action and the environment.
pub const CANONICAL_EDGES: [(Node, Node); 6] = [
    (Node::Xs, Node::Y),
    (Node::Z, Node::Y),
    (Node::Z, Node::W),
    (Node::Xs, Node::W),
    (Node::Y, Node::Xe),
    (Node::Z, Node::Xe),
];

/// Intervention on the action variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Intervention {
    /// do(Y = ∅): withhold all action and observe what materializes.
    NoAction,
    /// do(Y = c): force action c.
    Force(Action),
}

/// Outcome of evolving the system under an intervention.
#[derive(Debug, Clone, PartialEq)]
pub enum EvolveOutcome {
    /// Under do(Y = ∅): the hidden danger (possibly `Safe`).
    Danger(Danger),
    /// Under do(Y = c): the resulting safe end state, which becomes the
    /// next start state.
    Next(SafeState),
}

/// Ranked environment factors with their key-factor scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalExplanation {
    /// (factor name, score), sorted by descending score; ties keep factor
    /// declaration order.
    pub ranked: Vec<(String, f64)>,
}

impl CausalExplanation {
    pub fn top(&self) -> &str {
        &self.ranked[0].0
    }

    pub fn score(&self, factor: &str) -> Option<f64> {
        self.ranked.iter().find(|(n, _)| n == factor).map(|(_, s)| *s)
    }
}
