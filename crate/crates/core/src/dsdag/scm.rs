use std::collections::HashSet;

use rand::Rng;
use thiserror::Error;

use super::types::*;

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("invalid factor {name:?}: {reason}")]
    InvalidFactor { name: String, reason: String },
    #[error("duplicate factor name {name:?}")]
    DuplicateFactor { name: String },
    #[error("graph has a cycle; offending edges: {edges:?}")]
    Cycle { edges: Vec<(String, String)> },
    #[error("edge set differs from the driving-state graph; unexpected: {unexpected:?}, missing: {missing:?}")]
    WrongEdges {
        unexpected: Vec<(String, String)>,
        missing: Vec<(String, String)>,
    },
    #[error("{table} table is missing a cell: {cell}")]
    IncompleteTable { table: &'static str, cell: String },
    #[error("fy table lists no admissible action for cell: {cell}")]
    EmptyActionSet { cell: String },
    #[error("closed-loop violation: fxe({cell}) yields {state:?} which is not safe under the same environment")]
    UnsafeTransition { cell: String, state: VehicleState },
    #[error("unknown factor {name:?}")]
    UnknownFactor { name: String },
    #[error("value {value:?} out of domain for factor {factor:?}")]
    OutOfDomain { factor: String, value: String },
    #[error("environment assignment has {got} entries, expected {expected}")]
    AssignmentArity { got: usize, expected: usize },
    #[error("inconsistent observation: action {action} is never selectable for this vehicle state")]
    InconsistentObservation { action: Action },
    #[error("joint space of {size} assignments exceeds the oracle bound {bound}")]
    SpaceTooLarge { size: usize, bound: usize },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Executable structural causal model over the driving-state graph.
///
/// Mechanism tables are stored dense over the discrete product space
/// (vehicle state x joint environment assignment), so totality holds by
/// construction once validated.
#[derive(Debug, Clone)]
pub struct Scm {
    pub(crate) factors: Vec<EnvFactor>,
    pub(crate) edges: Vec<(Node, Node)>,
    /// Danger per (vehicle, env) cell.
    pub(crate) fw: Vec<Danger>,
    /// Admissible actions per (vehicle, env) cell; ξ breaks ties uniformly.
    pub(crate) fy: Vec<Vec<Action>>,
    /// Next vehicle state per (vehicle, env, action) cell.
    pub(crate) fxe: Vec<VehicleState>,
}

/// Raw description of an Scm prior to validation.
pub struct ScmDescription {
    pub factors: Vec<EnvFactor>,
    pub edges: Vec<(Node, Node)>,
    pub fw: Vec<Option<Danger>>,
    pub fy: Vec<Option<Vec<Action>>>,
    pub fxe: Vec<Option<VehicleState>>,
}

impl ScmDescription {
    pub fn empty(factors: Vec<EnvFactor>, edges: Vec<(Node, Node)>) -> ScmDescription {
        let envs: usize = factors.iter().map(|f| f.domain.len()).product();
        let cells = VehicleState::COUNT * envs;
        ScmDescription {
            factors,
            edges,
            fw: vec![None; cells],
            fy: vec![None; cells],
            fxe: vec![None; cells * Action::ALL.len()],
        }
    }

    /// Fill all three tables from mechanism closures.
    pub fn from_mechanisms(
        factors: Vec<EnvFactor>,
        fw_fn: impl Fn(VehicleState, &[usize]) -> Danger,
        fy_fn: impl Fn(VehicleState, &[usize]) -> Vec<Action>,
        fxe_fn: impl Fn(VehicleState, &[usize], Action) -> VehicleState,
    ) -> ScmDescription {
        let mut desc = ScmDescription::empty(factors, CANONICAL_EDGES.to_vec());
        let domains: Vec<usize> = desc.factors.iter().map(|f| f.domain.len()).collect();
        for v in VehicleState::all() {
            for (e_idx, env) in enumerate_assignments(&domains).enumerate() {
                let cell = v.index() * env_count(&domains) + e_idx;
                desc.fw[cell] = Some(fw_fn(v, &env));
                desc.fy[cell] = Some(fy_fn(v, &env));
                for a in Action::ALL {
                    desc.fxe[cell * Action::ALL.len() + a.index()] = Some(fxe_fn(v, &env, a));
                }
            }
        }
        desc
    }
}

pub(crate) fn env_count(domains: &[usize]) -> usize {
    domains.iter().product()
}

/// Mixed-radix enumeration of joint factor assignments, last factor fastest.
pub(crate) fn enumerate_assignments(domains: &[usize]) -> impl Iterator<Item = Vec<usize>> + '_ {
    (0..env_count(domains)).map(move |i| decode_index(domains, i))
}

pub(crate) fn decode_index(domains: &[usize], mut i: usize) -> Vec<usize> {
    let mut out = vec![0usize; domains.len()];
    for d in (0..domains.len()).rev() {
        out[d] = i % domains[d];
        i /= domains[d];
    }
    out
}

pub(crate) fn assignment_index(domains: &[usize], assignment: &[usize]) -> usize {
    let mut idx = 0;
    for (d, &a) in assignment.iter().enumerate() {
        idx = idx * domains[d] + a;
    }
    idx
}

fn edge_names(edges: &[(Node, Node)]) -> Vec<(String, String)> {
    edges.iter().map(|(a, b)| (a.name().to_string(), b.name().to_string())).collect()
}

/// Kahn topological sort over the 5-node graph; returns the edges left in a
/// cycle, empty when acyclic.
fn cycle_edges(edges: &[(Node, Node)]) -> Vec<(Node, Node)> {
    let mut remaining: Vec<(Node, Node)> = edges.to_vec();
    loop {
        let mut has_incoming: HashSet<Node> = HashSet::new();
        for &(_, b) in &remaining {
            has_incoming.insert(b);
        }
        let before = remaining.len();
        remaining.retain(|&(a, _)| has_incoming.contains(&a));
        if remaining.len() == before {
            return remaining;
        }
    }
}

/// Validate a description into an executable Scm: factor sanity, acyclicity,
/// the canonical edge set, table completeness, and the closed-loop property
/// that every forced transition lands in a state that is safe under the same
/// environment.
pub fn build_dsdag(desc: ScmDescription) -> Result<Scm, ScmError> {
    let mut names = HashSet::new();
    for f in &desc.factors {
        if f.domain.len() < 2 {
            return Err(ScmError::InvalidFactor {
                name: f.name.clone(),
                reason: "domain size < 2".into(),
            });
        }
        if !names.insert(f.name.clone()) {
            return Err(ScmError::DuplicateFactor { name: f.name.clone() });
        }
    }
    let cyc = cycle_edges(&desc.edges);
    if !cyc.is_empty() {
        return Err(ScmError::Cycle { edges: edge_names(&cyc) });
    }
    let canonical: HashSet<(Node, Node)> = CANONICAL_EDGES.into_iter().collect();
    let given: HashSet<(Node, Node)> = desc.edges.iter().copied().collect();
    if given != canonical {
        let unexpected: Vec<_> = given.difference(&canonical).copied().collect();
        let missing: Vec<_> = canonical.difference(&given).copied().collect();
        return Err(ScmError::WrongEdges {
            unexpected: edge_names(&unexpected),
            missing: edge_names(&missing),
        });
    }
    let domains: Vec<usize> = desc.factors.iter().map(|f| f.domain.len()).collect();
    let envs = env_count(&domains);
    let cell_name = |scm_factors: &[EnvFactor], v: VehicleState, e_idx: usize| {
        let assignment = decode_index(&domains, e_idx);
        let env_str: Vec<String> = scm_factors
            .iter()
            .zip(&assignment)
            .map(|(f, &a)| format!("{}={}", f.name, f.domain[a]))
            .collect();
        format!("vehicle={:?}, {}", v, env_str.join(", "))
    };
    let mut fw = Vec::with_capacity(VehicleState::COUNT * envs);
    let mut fy = Vec::with_capacity(VehicleState::COUNT * envs);
    let mut fxe = Vec::with_capacity(VehicleState::COUNT * envs * Action::ALL.len());
    for v in VehicleState::all() {
        for e_idx in 0..envs {
            let cell = v.index() * envs + e_idx;
            fw.push(desc.fw[cell].ok_or_else(|| ScmError::IncompleteTable {
                table: "fw",
                cell: cell_name(&desc.factors, v, e_idx),
            })?);
            let actions = desc.fy[cell].clone().ok_or_else(|| ScmError::IncompleteTable {
                table: "fy",
                cell: cell_name(&desc.factors, v, e_idx),
            })?;
            if actions.is_empty() {
                return Err(ScmError::EmptyActionSet {
                    cell: cell_name(&desc.factors, v, e_idx),
                });
            }
            fy.push(actions);
            for a in Action::ALL {
                let next = desc.fxe[cell * Action::ALL.len() + a.index()].ok_or_else(|| {
                    ScmError::IncompleteTable {
                        table: "fxe",
                        cell: format!("{}, action={}", cell_name(&desc.factors, v, e_idx), a),
                    }
                })?;
                fxe.push(next);
            }
        }
    }
    // Closed loop: acting must restore safety under the unchanged endpoint
    // environment, so X_e can serve as the next X_s.
    for v in VehicleState::all() {
        for e_idx in 0..envs {
            let cell = v.index() * envs + e_idx;
            for a in Action::ALL {
                let next = fxe[cell * Action::ALL.len() + a.index()];
                if fw[next.index() * envs + e_idx] != Danger::Safe {
                    return Err(ScmError::UnsafeTransition {
                        cell: format!("{}, action={}", cell_name(&desc.factors, v, e_idx), a),
                        state: next,
                    });
                }
            }
        }
    }
    Ok(Scm { factors: desc.factors, edges: desc.edges, fw, fy, fxe })
}

impl Scm {
    pub fn factors(&self) -> &[EnvFactor] {
        &self.factors
    }

    pub fn edges(&self) -> &[(Node, Node)] {
        &self.edges
    }

    pub fn factor_index(&self, name: &str) -> Result<usize, ScmError> {
        self.factors
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| ScmError::UnknownFactor { name: name.to_string() })
    }

    pub fn domains(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.domain.len()).collect()
    }

    pub fn env_space(&self) -> usize {
        env_count(&self.domains())
    }

    /// Build an EnvState from (factor, value) name pairs.
    pub fn env(&self, pairs: &[(&str, &str)], noise: f64) -> Result<EnvState, ScmError> {
        let mut assignments = vec![usize::MAX; self.factors.len()];
        for (fname, vname) in pairs {
            let fi = self.factor_index(fname)?;
            let vi = self.factors[fi]
                .domain
                .iter()
                .position(|v| v == vname)
                .ok_or_else(|| ScmError::OutOfDomain {
                    factor: fname.to_string(),
                    value: vname.to_string(),
                })?;
            assignments[fi] = vi;
        }
        if let Some(miss) = assignments.iter().position(|&a| a == usize::MAX) {
            return Err(ScmError::IncompleteTable {
                table: "env",
                cell: format!("factor {} unassigned", self.factors[miss].name),
            });
        }
        Ok(EnvState::new(assignments, noise))
    }

    pub fn env_value<'a>(&'a self, env: &EnvState, factor: &str) -> Result<&'a str, ScmError> {
        let fi = self.factor_index(factor)?;
        Ok(&self.factors[fi].domain[env.assignments[fi]])
    }

    fn check_env(&self, env: &EnvState) -> Result<usize, ScmError> {
        let domains = self.domains();
        if env.assignments.len() != domains.len() {
            return Err(ScmError::AssignmentArity {
                got: env.assignments.len(),
                expected: domains.len(),
            });
        }
        for (d, (&a, f)) in env.assignments.iter().zip(&self.factors).enumerate() {
            if a >= domains[d] {
                return Err(ScmError::OutOfDomain {
                    factor: f.name.clone(),
                    value: format!("index {a}"),
                });
            }
        }
        Ok(assignment_index(&domains, &env.assignments))
    }

    /// The hidden danger W_hidden that materializes if no action is taken:
    /// a pure table lookup, unaffected by ξ.
    pub fn hidden_danger(&self, u: VehicleState, z: &EnvState) -> Result<Danger, ScmError> {
        let e_idx = self.check_env(z)?;
        Ok(self.fw[u.index() * self.env_space() + e_idx])
    }

    pub(crate) fn admissible(&self, u: VehicleState, e_idx: usize) -> &[Action] {
        &self.fy[u.index() * self.env_space() + e_idx]
    }

    /// Select the driver's action. When the table lists several admissible
    /// actions the noise draw ξ breaks the tie uniformly.
    pub fn select_action(
        &self,
        u: VehicleState,
        z: &EnvState,
        rng: &mut impl Rng,
    ) -> Result<Action, ScmError> {
        let xi: f64 = rng.gen();
        self.select_action_xi(u, z, xi)
    }

    /// Deterministic variant with an explicit ξ in [0, 1).
    pub fn select_action_xi(&self, u: VehicleState, z: &EnvState, xi: f64) -> Result<Action, ScmError> {
        let e_idx = self.check_env(z)?;
        let actions = self.admissible(u, e_idx);
        let pick = ((xi * actions.len() as f64) as usize).min(actions.len() - 1);
        Ok(actions[pick])
    }

    pub(crate) fn next_state(&self, u: VehicleState, e_idx: usize, action: Action) -> VehicleState {
        let cell = u.index() * self.env_space() + e_idx;
        self.fxe[cell * Action::ALL.len() + action.index()]
    }

    /// Apply an intervention on Y. do(Y = ∅) exposes the hidden danger;
    /// do(Y = c) produces the end state, which becomes the next start state.
    pub fn evolve(
        &self,
        u: VehicleState,
        z: &EnvState,
        intervention: Intervention,
    ) -> Result<EvolveOutcome, ScmError> {
        let e_idx = self.check_env(z)?;
        match intervention {
            Intervention::NoAction => Ok(EvolveOutcome::Danger(
                self.fw[u.index() * self.env_space() + e_idx],
            )),
            Intervention::Force(c) => Ok(EvolveOutcome::Next(SafeState {
                vehicle: self.next_state(u, e_idx, c),
                env: z.clone(),
            })),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::scenario::traffic_scenario;
    use super::*;

    #[test]
    fn canonical_graph_accepted() {
        let scm = traffic_scenario().unwrap();
        assert_eq!(scm.factors().len(), 4);
        assert_eq!(scm.edges().len(), 6);
    }

    #[test]
    fn added_back_edge_is_a_cycle() {
        let mut edges = CANONICAL_EDGES.to_vec();
        edges.push((Node::Xe, Node::Xs));
        let factors = vec![EnvFactor::new("f", &["a", "b"]).unwrap()];
        let desc = ScmDescription::empty(factors, edges);
        match build_dsdag(desc) {
            Err(ScmError::Cycle { edges }) => {
                assert!(edges.contains(&("Xe".to_string(), "Xs".to_string())));
            }
            other => panic!("expected cycle error, got {other:?}"),
        }
    }

    #[test]
    fn missing_cell_reported_by_name() {
        let factors = vec![EnvFactor::new("light", &["green", "red"]).unwrap()];
        let mut desc = ScmDescription::from_mechanisms(
            factors,
            |_, _| Danger::Safe,
            |_, _| vec![Action::Maintain],
            |v, _, _| v,
        );
        desc.fw[3] = None;
        match build_dsdag(desc) {
            Err(ScmError::IncompleteTable { table: "fw", cell }) => {
                assert!(cell.contains("light="), "{cell}");
            }
            other => panic!("expected completeness error, got {other:?}"),
        }
    }

    #[test]
    fn tiny_domain_rejected() {
        assert!(EnvFactor::new("x", &["only"]).is_err());
    }

    #[test]
    fn unsafe_transition_rejected() {
        let factors = vec![EnvFactor::new("f", &["a", "b"]).unwrap()];
        // Every state dangerous, so no fxe output can be safe.
        let desc = ScmDescription::from_mechanisms(
            factors,
            |_, _| Danger::Collision,
            |_, _| vec![Action::Maintain],
            |v, _, _| v,
        );
        assert!(matches!(build_dsdag(desc), Err(ScmError::UnsafeTransition { .. })));
    }

    #[test]
    fn tie_break_is_uniform() {
        use rand::SeedableRng;
        let factors = vec![EnvFactor::new("f", &["a", "b"]).unwrap()];
        let desc = ScmDescription::from_mechanisms(
            factors,
            |_, _| Danger::Safe,
            |_, env| {
                if env[0] == 0 {
                    vec![Action::Maintain, Action::Accelerate]
                } else {
                    vec![Action::Maintain]
                }
            },
            |v, _, _| v,
        );
        let scm = build_dsdag(desc).unwrap();
        let u = VehicleState::from_index(0);
        let z = EnvState::new(vec![0], 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut hits = 0u32;
        for _ in 0..10_000 {
            if scm.select_action(u, &z, &mut rng).unwrap() == Action::Maintain {
                hits += 1;
            }
        }
        let frac = hits as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "split {frac}");

        // single admissible action: ξ irrelevant
        let z1 = EnvState::new(vec![1], 0.0);
        for xi in [0.0, 0.3, 0.9999] {
            assert_eq!(scm.select_action_xi(u, &z1, xi).unwrap(), Action::Maintain);
        }
    }
}
