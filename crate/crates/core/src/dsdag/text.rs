//! DSDAG/1 description file format.
//!
//! Line-oriented key/value plus table rows:
//!
//! ```text
//! DSDAG/1
//! factor traffic_light green yellow red
//! edge Xs Y
//! fw * * * red * * * -> violation
//! fy stopped * * * * * * -> maintain|accelerate
//! fxe medium * * red * * * stop -> stopped straight light
//! ```
//!
//! Vehicle columns are `speed heading loading`, env columns follow factor
//! declaration order, `*` matches anything, and the last matching row wins.
//! Cells left uncovered fail validation with the missing cell named.

use std::fmt::Write as _;

use super::scm::{build_dsdag, enumerate_assignments, env_count, Scm, ScmDescription, ScmError};
use super::types::*;

pub const HEADER: &str = "DSDAG/1";

#[derive(Clone, Copy)]
enum Pat<T> {
    Any,
    Exact(T),
}

impl<T: PartialEq + Copy> Pat<T> {
    fn matches(&self, v: T) -> bool {
        match self {
            Pat::Any => true,
            Pat::Exact(x) => *x == v,
        }
    }
}

struct VehiclePat {
    speed: Pat<Speed>,
    heading: Pat<Heading>,
    loading: Pat<Loading>,
}

impl VehiclePat {
    fn matches(&self, v: VehicleState) -> bool {
        self.speed.matches(v.speed) && self.heading.matches(v.heading) && self.loading.matches(v.loading)
    }
}

struct Row<T> {
    vehicle: VehiclePat,
    env: Vec<Pat<usize>>,
    action: Option<Pat<Action>>,
    value: T,
}

fn err(line: usize, reason: impl Into<String>) -> ScmError {
    ScmError::Parse { line, reason: reason.into() }
}

fn parse_speed(line: usize, s: &str) -> Result<Pat<Speed>, ScmError> {
    match s {
        "*" => Ok(Pat::Any),
        "stopped" => Ok(Pat::Exact(Speed::Stopped)),
        "slow" => Ok(Pat::Exact(Speed::Slow)),
        "medium" => Ok(Pat::Exact(Speed::Medium)),
        "fast" => Ok(Pat::Exact(Speed::Fast)),
        _ => Err(err(line, format!("unknown speed {s:?}"))),
    }
}

fn parse_heading(line: usize, s: &str) -> Result<Pat<Heading>, ScmError> {
    match s {
        "*" => Ok(Pat::Any),
        "straight" => Ok(Pat::Exact(Heading::Straight)),
        "left" => Ok(Pat::Exact(Heading::Left)),
        "right" => Ok(Pat::Exact(Heading::Right)),
        _ => Err(err(line, format!("unknown heading {s:?}"))),
    }
}

fn parse_loading(line: usize, s: &str) -> Result<Pat<Loading>, ScmError> {
    match s {
        "*" => Ok(Pat::Any),
        "light" => Ok(Pat::Exact(Loading::Light)),
        "heavy" => Ok(Pat::Exact(Loading::Heavy)),
        _ => Err(err(line, format!("unknown loading {s:?}"))),
    }
}

fn speed_name(s: Speed) -> &'static str {
    match s {
        Speed::Stopped => "stopped",
        Speed::Slow => "slow",
        Speed::Medium => "medium",
        Speed::Fast => "fast",
    }
}

fn heading_name(h: Heading) -> &'static str {
    match h {
        Heading::Straight => "straight",
        Heading::Left => "left",
        Heading::Right => "right",
    }
}

fn loading_name(l: Loading) -> &'static str {
    match l {
        Loading::Light => "light",
        Loading::Heavy => "heavy",
    }
}

/// Parse a DSDAG/1 description and validate it into an executable Scm.
pub fn parse_scm(text: &str) -> Result<Scm, ScmError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| err(0, "empty description"))?;
    if first.trim() != HEADER {
        return Err(err(1, format!("expected header {HEADER:?}, got {:?}", first.trim())));
    }
    let mut factors: Vec<EnvFactor> = Vec::new();
    let mut edges: Vec<(Node, Node)> = Vec::new();
    let mut fw_rows: Vec<Row<Danger>> = Vec::new();
    let mut fy_rows: Vec<Row<Vec<Action>>> = Vec::new();
    let mut fxe_rows: Vec<Row<VehicleState>> = Vec::new();

    let parse_vehicle = |line: usize, cols: &[&str]| -> Result<VehiclePat, ScmError> {
        Ok(VehiclePat {
            speed: parse_speed(line, cols[0])?,
            heading: parse_heading(line, cols[1])?,
            loading: parse_loading(line, cols[2])?,
        })
    };

    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let keyword = toks.next().unwrap();
        let rest: Vec<&str> = toks.collect();
        match keyword {
            "factor" => {
                if rest.len() < 3 {
                    return Err(err(line_no, "factor needs a name and at least two values"));
                }
                factors.push(EnvFactor::new(rest[0], &rest[1..])?);
            }
            "edge" => {
                if rest.len() != 2 {
                    return Err(err(line_no, "edge needs exactly two nodes"));
                }
                let a = Node::parse(rest[0]).ok_or_else(|| err(line_no, format!("unknown node {:?}", rest[0])))?;
                let b = Node::parse(rest[1]).ok_or_else(|| err(line_no, format!("unknown node {:?}", rest[1])))?;
                edges.push((a, b));
            }
            "fw" | "fy" | "fxe" => {
                let arrow = rest
                    .iter()
                    .position(|&t| t == "->")
                    .ok_or_else(|| err(line_no, "missing ->"))?;
                let (lhs, rhs) = (&rest[..arrow], &rest[arrow + 1..]);
                let env_cols = factors.len();
                let lhs_expected = 3 + env_cols + usize::from(keyword == "fxe");
                if lhs.len() != lhs_expected {
                    return Err(err(
                        line_no,
                        format!("{keyword} row needs {lhs_expected} pattern columns, got {}", lhs.len()),
                    ));
                }
                let vehicle = parse_vehicle(line_no, &lhs[..3])?;
                let mut env = Vec::with_capacity(env_cols);
                for (fi, &tok) in lhs[3..3 + env_cols].iter().enumerate() {
                    if tok == "*" {
                        env.push(Pat::Any);
                    } else {
                        let vi = factors[fi]
                            .domain
                            .iter()
                            .position(|v| v == tok)
                            .ok_or_else(|| {
                                err(line_no, format!("value {tok:?} not in domain of {}", factors[fi].name))
                            })?;
                        env.push(Pat::Exact(vi));
                    }
                }
                match keyword {
                    "fw" => {
                        if rhs.len() != 1 {
                            return Err(err(line_no, "fw row needs one danger"));
                        }
                        let d = Danger::parse(rhs[0])
                            .ok_or_else(|| err(line_no, format!("unknown danger {:?}", rhs[0])))?;
                        fw_rows.push(Row { vehicle, env, action: None, value: d });
                    }
                    "fy" => {
                        if rhs.len() != 1 {
                            return Err(err(line_no, "fy row needs one action set"));
                        }
                        let mut actions = Vec::new();
                        for part in rhs[0].split('|') {
                            actions.push(
                                Action::parse(part)
                                    .ok_or_else(|| err(line_no, format!("unknown action {part:?}")))?,
                            );
                        }
                        fy_rows.push(Row { vehicle, env, action: None, value: actions });
                    }
                    _ => {
                        let atok = lhs[3 + env_cols];
                        let action = if atok == "*" {
                            Pat::Any
                        } else {
                            Pat::Exact(
                                Action::parse(atok)
                                    .ok_or_else(|| err(line_no, format!("unknown action {atok:?}")))?,
                            )
                        };
                        if rhs.len() != 3 {
                            return Err(err(line_no, "fxe row needs speed heading loading"));
                        }
                        let speed = match parse_speed(line_no, rhs[0])? {
                            Pat::Exact(s) => s,
                            Pat::Any => return Err(err(line_no, "fxe output must be concrete")),
                        };
                        let heading = match parse_heading(line_no, rhs[1])? {
                            Pat::Exact(h) => h,
                            Pat::Any => return Err(err(line_no, "fxe output must be concrete")),
                        };
                        let loading = match parse_loading(line_no, rhs[2])? {
                            Pat::Exact(l) => l,
                            Pat::Any => return Err(err(line_no, "fxe output must be concrete")),
                        };
                        fxe_rows.push(Row {
                            vehicle,
                            env,
                            action: Some(action),
                            value: VehicleState { speed, heading, loading },
                        });
                    }
                }
            }
            other => return Err(err(line_no, format!("unknown keyword {other:?}"))),
        }
    }

    let domains: Vec<usize> = factors.iter().map(|f| f.domain.len()).collect();
    let envs = env_count(&domains);
    let mut desc = ScmDescription::empty(factors, edges);
    for v in VehicleState::all() {
        for (e_idx, assignment) in enumerate_assignments(&domains).enumerate() {
            let cell = v.index() * envs + e_idx;
            let env_match = |env: &Vec<Pat<usize>>| {
                env.iter().zip(&assignment).all(|(p, &a)| p.matches(a))
            };
            for row in &fw_rows {
                if row.vehicle.matches(v) && env_match(&row.env) {
                    desc.fw[cell] = Some(row.value);
                }
            }
            for row in &fy_rows {
                if row.vehicle.matches(v) && env_match(&row.env) {
                    desc.fy[cell] = Some(row.value.clone());
                }
            }
            for a in Action::ALL {
                for row in &fxe_rows {
                    if row.vehicle.matches(v)
                        && env_match(&row.env)
                        && row.action.as_ref().is_some_and(|p| p.matches(a))
                    {
                        desc.fxe[cell * Action::ALL.len() + a.index()] = Some(row.value);
                    }
                }
            }
        }
    }
    build_dsdag(desc)
}

/// Serialize an Scm with fully explicit rows (no wildcards); round-trips
/// through [`parse_scm`].
pub fn write_scm(scm: &Scm) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for f in scm.factors() {
        let _ = writeln!(out, "factor {} {}", f.name, f.domain.join(" "));
    }
    for (a, b) in scm.edges() {
        let _ = writeln!(out, "edge {} {}", a.name(), b.name());
    }
    let domains = scm.domains();
    let envs = env_count(&domains);
    let env_cols = |assignment: &[usize]| {
        scm.factors()
            .iter()
            .zip(assignment)
            .map(|(f, &a)| f.domain[a].clone())
            .collect::<Vec<_>>()
            .join(" ")
    };
    for v in VehicleState::all() {
        let vcols = format!("{} {} {}", speed_name(v.speed), heading_name(v.heading), loading_name(v.loading));
        for (e_idx, assignment) in enumerate_assignments(&domains).enumerate() {
            let cell = v.index() * envs + e_idx;
            let ecols = env_cols(&assignment);
            let _ = writeln!(out, "fw {vcols} {ecols} -> {}", scm.fw[cell].name());
            let actions: Vec<&str> = scm.fy[cell].iter().map(|a| a.name()).collect();
            let _ = writeln!(out, "fy {vcols} {ecols} -> {}", actions.join("|"));
            for a in Action::ALL {
                let next = scm.fxe[cell * Action::ALL.len() + a.index()];
                let _ = writeln!(
                    out,
                    "fxe {vcols} {ecols} {} -> {} {} {}",
                    a.name(),
                    speed_name(next.speed),
                    heading_name(next.heading),
                    loading_name(next.loading)
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::scenario::traffic_scenario;
    use super::*;

    #[test]
    fn canonical_scenario_round_trips() {
        let scm = traffic_scenario().unwrap();
        let text = write_scm(&scm);
        let back = parse_scm(&text).unwrap();
        assert_eq!(back.factors(), scm.factors());
        assert_eq!(back.fw, scm.fw);
        assert_eq!(back.fy, scm.fy);
        assert_eq!(back.fxe, scm.fxe);
    }

    #[test]
    fn wildcard_rows_with_overrides() {
        let text = "\
DSDAG/1
factor light green red
edge Xs Y
edge Z Y
edge Z W
edge Xs W
edge Y Xe
edge Z Xe
fw * * * * -> safe
fw * * * red -> violation
fw stopped * * red -> safe
fy * * * * -> maintain
fy * * * red -> stop
fy stopped * * red -> maintain
fxe * * * * * -> stopped straight light
";
        let scm = parse_scm(text).unwrap();
        let z_red = scm.env(&[("light", "red")], 0.0).unwrap();
        let moving = VehicleState { speed: Speed::Fast, heading: Heading::Straight, loading: Loading::Light };
        assert_eq!(scm.hidden_danger(moving, &z_red).unwrap(), Danger::Violation);
        let stopped = VehicleState { speed: Speed::Stopped, ..moving };
        assert_eq!(scm.hidden_danger(stopped, &z_red).unwrap(), Danger::Safe);
    }

    #[test]
    fn missing_header_rejected() {
        assert!(matches!(parse_scm("factor x a b\n"), Err(ScmError::Parse { .. })));
    }

    #[test]
    fn partial_table_names_missing_cell() {
        let text = "\
DSDAG/1
factor light green red
edge Xs Y
edge Z Y
edge Z W
edge Xs W
edge Y Xe
edge Z Xe
fw * * * green -> safe
fy * * * * -> maintain
fxe * * * * * -> stopped straight light
";
        match parse_scm(text) {
            Err(ScmError::IncompleteTable { table: "fw", cell }) => {
                assert!(cell.contains("light=red"), "{cell}");
            }
            other => panic!("expected completeness error, got {other:?}"),
        }
    }
}
