//! Key-factor identification: scoring each environment factor by how well
//! conditioning on its value explains the observed action, then ranking.
//!
//! `key_factors` factorizes the enumeration per (factor, value) pair;
//! `oracle_key_factors` recomputes the identical quantity with a single
//! exhaustive loop over the full joint space and no factorization, serving
//! as the independent reference. Both divide integer counts, so agreement
//! is bit-exact.

use super::scm::{assignment_index, enumerate_assignments, env_count, Scm, ScmError};
use super::types::*;

/// Number of ξ grid points used when enumerating the noise stream.
pub const XI_GRID: usize = 16;

fn xi_points() -> impl Iterator<Item = f64> {
    (0..XI_GRID).map(|i| (i as f64 + 0.5) / XI_GRID as f64)
}

/// Does (env, ξ) select the observed action, and does forcing that action
/// reach an end state that is safe under the same environment?
fn explains(scm: &Scm, u: VehicleState, e_idx: usize, xi: f64, action: Action) -> bool {
    let actions = scm.admissible(u, e_idx);
    let pick = ((xi * actions.len() as f64) as usize).min(actions.len() - 1);
    if actions[pick] != action {
        return false;
    }
    let next = scm.next_state(u, e_idx, action);
    scm.fw[next.index() * scm.env_space() + e_idx] == Danger::Safe
}

/// Score every factor by summing, over its values, the empirical probability
/// (uniform over the remaining factors and the ξ grid) that the observed
/// action is selected and leads back to safety.
pub fn key_factors(scm: &Scm, u: VehicleState, action: Action) -> Result<CausalExplanation, ScmError> {
    let domains = scm.domains();
    let mut ranked = Vec::with_capacity(scm.factors().len());
    let mut any = false;
    for (fi, factor) in scm.factors().iter().enumerate() {
        let mut others: Vec<usize> = domains.clone();
        others.remove(fi);
        let mut score = 0.0;
        for value in 0..domains[fi] {
            let mut hits: u64 = 0;
            let mut total: u64 = 0;
            for rest in enumerate_assignments(&others) {
                let mut assignment = rest.clone();
                assignment.insert(fi, value);
                let e_idx = assignment_index(&domains, &assignment);
                for xi in xi_points() {
                    total += 1;
                    if explains(scm, u, e_idx, xi, action) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                any = true;
            }
            score += hits as f64 / total as f64;
        }
        ranked.push((factor.name.clone(), score));
    }
    if !any {
        return Err(ScmError::InconsistentObservation { action });
    }
    // Stable sort keeps declaration order on ties.
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(CausalExplanation { ranked })
}

/// Exhaustive single-loop reference for [`key_factors`]; refuses joint
/// spaces above one million assignments.
pub fn oracle_key_factors(
    scm: &Scm,
    u: VehicleState,
    action: Action,
) -> Result<CausalExplanation, ScmError> {
    let domains = scm.domains();
    let size = env_count(&domains);
    const BOUND: usize = 1_000_000;
    if size > BOUND {
        return Err(ScmError::SpaceTooLarge { size, bound: BOUND });
    }
    let n_factors = scm.factors().len();
    let mut hits: Vec<Vec<u64>> = domains.iter().map(|&d| vec![0; d]).collect();
    let mut totals: Vec<Vec<u64>> = domains.iter().map(|&d| vec![0; d]).collect();
    for assignment in enumerate_assignments(&domains) {
        let e_idx = assignment_index(&domains, &assignment);
        for xi in xi_points() {
            let ok = explains(scm, u, e_idx, xi, action);
            for fi in 0..n_factors {
                totals[fi][assignment[fi]] += 1;
                if ok {
                    hits[fi][assignment[fi]] += 1;
                }
            }
        }
    }
    if hits.iter().flatten().all(|&h| h == 0) {
        return Err(ScmError::InconsistentObservation { action });
    }
    let mut ranked = Vec::with_capacity(n_factors);
    for (fi, factor) in scm.factors().iter().enumerate() {
        let mut score = 0.0;
        for v in 0..domains[fi] {
            score += hits[fi][v] as f64 / totals[fi][v] as f64;
        }
        ranked.push((factor.name.clone(), score));
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(CausalExplanation { ranked })
}
