//! Routing problem instances, feasibility rules and costs.
//!
//! Node indexing: a TSP instance with `n` nodes uses indices `0..n`. A CVRP
//! instance with `n` customers stores the depot at index 0 and customers at
//! `1..=n`, so it has `n + 1` nodes in total. A CVRP solution lists the
//! visited nodes after leaving the depot, with `0` marking each return, and
//! always ends with the final return to the depot.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Absolute tolerance used when comparing costs and loads.
pub const COST_TOL: f64 = 1e-9;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Tsp,
    Cvrp,
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(ProblemKind::Tsp),
            "cvrp" => Ok(ProblemKind::Cvrp),
            other => Err(Error::Argument(format!("unknown problem kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProblemKind::Tsp => "tsp",
            ProblemKind::Cvrp => "cvrp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub kind: ProblemKind,
    /// Node count for TSP, customer count for CVRP.
    pub n: usize,
    pub coords: Vec<[f64; 2]>,
    /// Empty for TSP. For CVRP, `demands[0] == 0` is the depot.
    #[serde(default)]
    pub demands: Vec<f64>,
    #[serde(default)]
    pub capacity: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_format_version")]
    pub format_version: u32,
}

fn default_format_version() -> u32 {
    FORMAT_VERSION
}

/// Vehicle capacity for `n` customers: 50, 55 and 60 at 100, 125 and 150
/// customers, and `round(30 + n / 5)` everywhere else (the same line).
pub fn capacity_for(n: usize) -> f64 {
    match n {
        100 => 50.0,
        125 => 55.0,
        150 => 60.0,
        _ => (30.0 + n as f64 / 5.0).round(),
    }
}

/// Samples an instance with coordinates uniform on the unit square and, for
/// CVRP, continuous demands uniform on `[1, 10]`.
pub fn generate_instance(kind: ProblemKind, n: usize, seed: u64) -> Result<ProblemInstance> {
    let min = match kind {
        ProblemKind::Tsp => 2,
        ProblemKind::Cvrp => 1,
    };
    if n < min {
        return Err(Error::Argument(format!(
            "{kind} needs n >= {min}, got {n}"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Instance, n as u64, kind as u64);
    let nodes = match kind {
        ProblemKind::Tsp => n,
        ProblemKind::Cvrp => n + 1,
    };
    let coords = (0..nodes)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>()])
        .collect();
    let (demands, capacity) = match kind {
        ProblemKind::Tsp => (Vec::new(), None),
        ProblemKind::Cvrp => {
            let mut d = Vec::with_capacity(n + 1);
            d.push(0.0);
            d.extend((0..n).map(|_| rng.gen_range(1.0..=10.0)));
            (d, Some(capacity_for(n)))
        }
    };
    Ok(ProblemInstance {
        kind,
        n,
        coords,
        demands,
        capacity,
        seed,
        format_version: FORMAT_VERSION,
    })
}

/// The first violated constraint of a visit sequence.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Infeasibility {
    #[error("node {node} out of range (instance has {nodes} nodes)")]
    OutOfRange { node: usize, nodes: usize },
    #[error("node {node} visited twice (step {step})")]
    Revisit { node: usize, step: usize },
    #[error("node {node} not allowed at step {step}")]
    Masked { node: usize, step: usize },
    #[error("route ending at step {step} carries {load:.6} > capacity {capacity}")]
    Overload {
        step: usize,
        load: f64,
        capacity: f64,
    },
    #[error("consecutive depot visit at step {step}")]
    DepotLoop { step: usize },
    #[error("{missing} node(s) never visited")]
    Incomplete { missing: usize },
    #[error("route does not return to the depot")]
    NoFinalReturn,
    #[error("step {step} after the episode ended")]
    AfterEnd { step: usize },
}

impl ProblemInstance {
    /// Number of nodes the decoder chooses among.
    pub fn node_count(&self) -> usize {
        match self.kind {
            ProblemKind::Tsp => self.n,
            ProblemKind::Cvrp => self.n + 1,
        }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity.unwrap_or(f64::INFINITY)
    }

    pub fn dist(&self, a: usize, b: usize) -> f64 {
        let [ax, ay] = self.coords[a];
        let [bx, by] = self.coords[b];
        (ax - bx).hypot(ay - by)
    }

    /// Checks the structural invariants of the instance itself.
    pub fn check(&self) -> Result<()> {
        if self.coords.len() != self.node_count() {
            return Err(Error::Format(format!(
                "expected {} coordinates, found {}",
                self.node_count(),
                self.coords.len()
            )));
        }
        if self
            .coords
            .iter()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(Error::Format("coordinate outside the unit square".into()));
        }
        match self.kind {
            ProblemKind::Tsp => {
                if !self.demands.is_empty() || self.capacity.is_some() {
                    return Err(Error::Format("TSP instance carries demands".into()));
                }
            }
            ProblemKind::Cvrp => {
                let cap = self
                    .capacity
                    .ok_or_else(|| Error::Format("CVRP instance without capacity".into()))?;
                if self.demands.len() != self.n + 1 || self.demands[0] != 0.0 {
                    return Err(Error::Format("CVRP demands must be [0, d_1..d_n]".into()));
                }
                if self.demands[1..].iter().any(|&d| !(d > 0.0 && d <= cap)) {
                    return Err(Error::Format("demand outside (0, capacity]".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let inst: ProblemInstance = serde_json::from_str(s)?;
        if inst.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported instance format_version {}",
                inst.format_version
            )));
        }
        inst.check()?;
        Ok(inst)
    }
}

/// Incremental decoding state: which nodes remain, where the vehicle is and
/// how much capacity is left.
#[derive(Debug, Clone)]
pub struct RouteState {
    kind: ProblemKind,
    visited: Vec<bool>,
    served: usize,
    customers: usize,
    first: Option<usize>,
    current: Option<usize>,
    remaining: f64,
    load: f64,
    steps: usize,
}

impl RouteState {
    pub fn new(instance: &ProblemInstance) -> Self {
        let nodes = instance.node_count();
        match instance.kind {
            ProblemKind::Tsp => RouteState {
                kind: ProblemKind::Tsp,
                visited: vec![false; nodes],
                served: 0,
                customers: nodes,
                first: None,
                current: None,
                remaining: f64::INFINITY,
                load: 0.0,
                steps: 0,
            },
            ProblemKind::Cvrp => RouteState {
                kind: ProblemKind::Cvrp,
                visited: vec![false; nodes],
                served: 0,
                customers: instance.n,
                first: Some(0),
                current: Some(0),
                remaining: instance.capacity(),
                load: 0.0,
                steps: 0,
            },
        }
    }

    pub fn first(&self) -> Option<usize> {
        self.first
    }

    /// Previously selected node; the depot before the first CVRP step, `None`
    /// before the first TSP step.
    pub fn current(&self) -> Option<usize> {
        self.current
    }

    pub fn remaining_capacity(&self) -> f64 {
        self.remaining
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_complete(&self) -> bool {
        match self.kind {
            ProblemKind::Tsp => self.served == self.customers,
            ProblemKind::Cvrp => {
                self.served == self.customers && self.current == Some(0) && self.steps > 0
            }
        }
    }

    /// Writes the admissible-node mask into `out` (length = node count).
    pub fn mask_into(&self, instance: &ProblemInstance, out: &mut [bool]) {
        debug_assert_eq!(out.len(), self.visited.len());
        if self.is_complete() {
            out.fill(false);
            return;
        }
        match self.kind {
            ProblemKind::Tsp => {
                for (o, v) in out.iter_mut().zip(&self.visited) {
                    *o = !v;
                }
            }
            ProblemKind::Cvrp => {
                out[0] = self.current != Some(0);
                for i in 1..out.len() {
                    out[i] =
                        !self.visited[i] && instance.demands[i] <= self.remaining + COST_TOL;
                }
            }
        }
    }

    pub fn mask(&self, instance: &ProblemInstance) -> Vec<bool> {
        let mut m = vec![false; self.visited.len()];
        self.mask_into(instance, &mut m);
        m
    }

    /// Applies one decoding step, rejecting any node the mask forbids.
    pub fn step(&mut self, instance: &ProblemInstance, node: usize) -> Result<(), Infeasibility> {
        let nodes = self.visited.len();
        let step = self.steps;
        if node >= nodes {
            return Err(Infeasibility::OutOfRange { node, nodes });
        }
        if self.is_complete() {
            return Err(Infeasibility::AfterEnd { step });
        }
        match self.kind {
            ProblemKind::Tsp => {
                if self.visited[node] {
                    return Err(Infeasibility::Revisit { node, step });
                }
                self.visited[node] = true;
                self.served += 1;
                if self.first.is_none() {
                    self.first = Some(node);
                }
            }
            ProblemKind::Cvrp => {
                if node == 0 {
                    if self.current == Some(0) {
                        return Err(Infeasibility::DepotLoop { step });
                    }
                    self.remaining = instance.capacity();
                    self.load = 0.0;
                } else {
                    if self.visited[node] {
                        return Err(Infeasibility::Revisit { node, step });
                    }
                    let d = instance.demands[node];
                    if d > self.remaining + COST_TOL {
                        return Err(Infeasibility::Overload {
                            step,
                            load: self.load + d,
                            capacity: instance.capacity(),
                        });
                    }
                    self.visited[node] = true;
                    self.served += 1;
                    self.load += d;
                    self.remaining = (self.remaining - d).max(0.0);
                }
            }
        }
        self.current = Some(node);
        self.steps += 1;
        Ok(())
    }

    fn finish(&self) -> Result<(), Infeasibility> {
        if self.served < self.customers {
            return Err(Infeasibility::Incomplete {
                missing: self.customers - self.served,
            });
        }
        if self.kind == ProblemKind::Cvrp && self.current != Some(0) {
            return Err(Infeasibility::NoFinalReturn);
        }
        Ok(())
    }
}

/// Replays `partial` and returns the state after it.
pub fn replay(instance: &ProblemInstance, partial: &[usize]) -> Result<RouteState, Infeasibility> {
    let mut state = RouteState::new(instance);
    for &v in partial {
        state.step(instance, v)?;
    }
    Ok(state)
}

/// Admissible next nodes after the feasible prefix `partial`. When
/// `remaining_capacity` is given it replaces the capacity derived from the
/// prefix.
pub fn feasible_mask(
    instance: &ProblemInstance,
    partial: &[usize],
    remaining_capacity: Option<f64>,
) -> Result<Vec<bool>> {
    let mut state = replay(instance, partial)?;
    if let Some(r) = remaining_capacity {
        state.remaining = r;
    }
    Ok(state.mask(instance))
}

/// Full feasibility validation of a complete visit sequence.
pub fn validate(instance: &ProblemInstance, visits: &[usize]) -> Result<(), Infeasibility> {
    replay(instance, visits)?.finish()
}

/// Length of `visits` without validation. TSP tours are closed; CVRP routes
/// start at the depot.
pub fn route_length(instance: &ProblemInstance, visits: &[usize]) -> f64 {
    match instance.kind {
        ProblemKind::Tsp => {
            let Some((&last, _)) = visits.split_last() else {
                return 0.0;
            };
            let mut total = 0.0;
            let mut prev = last;
            for &v in visits {
                total += instance.dist(prev, v);
                prev = v;
            }
            total
        }
        ProblemKind::Cvrp => {
            let mut total = 0.0;
            let mut prev = 0;
            for &v in visits {
                total += instance.dist(prev, v);
                prev = v;
            }
            total
        }
    }
}

/// Cost of a feasible visit sequence.
pub fn cost(instance: &ProblemInstance, visits: &[usize]) -> Result<f64> {
    validate(instance, visits)?;
    Ok(route_length(instance, visits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub visits: Vec<usize>,
    pub cost: f64,
}

impl Solution {
    /// Validates `visits` and caches its cost.
    pub fn new(instance: &ProblemInstance, visits: Vec<usize>) -> Result<Self> {
        let cost = cost(instance, &visits)?;
        Ok(Solution { visits, cost })
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    /// Re-validates and checks that the cached cost is coherent.
    pub fn verify(&self, instance: &ProblemInstance) -> Result<()> {
        let c = cost(instance, &self.visits)?;
        if (c - self.cost).abs() > COST_TOL {
            return Err(Error::Contract(format!(
                "cached cost {} differs from {}",
                self.cost, c
            )));
        }
        Ok(())
    }
}

/// The eight symmetries of the unit square, identity first.
pub const DIHEDRAL: [fn([f64; 2]) -> [f64; 2]; 8] = [
    |[x, y]| [x, y],
    |[x, y]| [y, x],
    |[x, y]| [x, 1.0 - y],
    |[x, y]| [y, 1.0 - x],
    |[x, y]| [1.0 - x, y],
    |[x, y]| [1.0 - y, x],
    |[x, y]| [1.0 - x, 1.0 - y],
    |[x, y]| [1.0 - y, 1.0 - x],
];

/// The eight dihedral variants of `instance`; demands and capacity are kept.
pub fn augment(instance: &ProblemInstance) -> Vec<ProblemInstance> {
    DIHEDRAL
        .iter()
        .map(|t| ProblemInstance {
            coords: instance.coords.iter().map(|&c| t(c)).collect(),
            ..instance.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tsp(coords: &[[f64; 2]]) -> ProblemInstance {
        ProblemInstance {
            kind: ProblemKind::Tsp,
            n: coords.len(),
            coords: coords.to_vec(),
            demands: vec![],
            capacity: None,
            seed: 0,
            format_version: 1,
        }
    }

    fn cvrp(coords: &[[f64; 2]], demands: &[f64], capacity: f64) -> ProblemInstance {
        let mut d = vec![0.0];
        d.extend_from_slice(demands);
        ProblemInstance {
            kind: ProblemKind::Cvrp,
            n: demands.len(),
            coords: coords.to_vec(),
            demands: d,
            capacity: Some(capacity),
            seed: 0,
            format_version: 1,
        }
    }

    #[test]
    fn square_perimeter() {
        let inst = tsp(&[[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]);
        assert!((cost(&inst, &[0, 1, 2, 3]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_node_tour_is_a_round_trip() {
        // Coordinates outside the unit square are fine for cost evaluation.
        let inst = tsp(&[[0.0, 0.0], [3.0, 4.0]]);
        assert!((cost(&inst, &[0, 1]).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn generator_is_deterministic_and_in_range() {
        let a = generate_instance(ProblemKind::Tsp, 5, 42).unwrap();
        let b = generate_instance(ProblemKind::Tsp, 5, 42).unwrap();
        assert_eq!(a, b);
        let big = generate_instance(ProblemKind::Tsp, 100, 3).unwrap();
        assert_eq!(big.coords.len(), 100);
        assert!(big.coords.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        big.check().unwrap();
    }

    #[test]
    fn cvrp_capacity_table() {
        let c = generate_instance(ProblemKind::Cvrp, 100, 1).unwrap();
        assert_eq!(c.capacity, Some(50.0));
        assert_eq!(capacity_for(125), 55.0);
        assert_eq!(capacity_for(150), 60.0);
        assert_eq!(capacity_for(10), 32.0);
        assert_eq!(capacity_for(6), 31.0);
        assert!(c.demands[1..].iter().all(|d| (1.0..=10.0).contains(d)));
        assert_eq!(c.demands[0], 0.0);
        c.check().unwrap();
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        assert!(matches!(
            generate_instance(ProblemKind::Tsp, 1, 0),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            generate_instance(ProblemKind::Cvrp, 0, 0),
            Err(Error::Argument(_))
        ));
        assert!(generate_instance(ProblemKind::Cvrp, 1, 0).is_ok());
    }

    #[test]
    fn tsp_mask_is_visited_complement() {
        let inst = generate_instance(ProblemKind::Tsp, 4, 0).unwrap();
        let mask = feasible_mask(&inst, &[1, 2], None).unwrap();
        assert_eq!(mask, vec![true, false, false, true]);
    }

    #[test]
    fn cvrp_mask_respects_capacity() {
        let inst = cvrp(
            &[[0.5, 0.5], [0.1, 0.1], [0.9, 0.9], [0.2, 0.8]],
            &[7.0, 5.0, 2.0],
            10.0,
        );
        // After serving customer 1 the vehicle has 3 units left.
        let mask = feasible_mask(&inst, &[1], None).unwrap();
        assert_eq!(mask, vec![true, false, false, true]);
        let mask = feasible_mask(&inst, &[], Some(3.0)).unwrap();
        assert_eq!(mask, vec![false, false, false, true]);
        // No depot loops.
        let mask = feasible_mask(&inst, &[1, 0], None).unwrap();
        assert!(!mask[0]);
    }

    #[test]
    fn infeasible_prefixes_are_reported() {
        let inst = cvrp(&[[0.5, 0.5], [0.1, 0.1], [0.9, 0.9]], &[7.0, 5.0], 10.0);
        assert_eq!(
            validate(&inst, &[1, 2, 0]),
            Err(Infeasibility::Overload {
                step: 1,
                load: 12.0,
                capacity: 10.0
            })
        );
        assert_eq!(validate(&inst, &[0]), Err(Infeasibility::DepotLoop { step: 0 }));
        assert_eq!(validate(&inst, &[1, 0, 2]), Err(Infeasibility::NoFinalReturn));
        assert_eq!(
            validate(&inst, &[1, 0]),
            Err(Infeasibility::Incomplete { missing: 1 })
        );
        assert!(validate(&inst, &[1, 0, 2, 0]).is_ok());
        assert!(matches!(
            feasible_mask(&inst, &[1, 1], None),
            Err(Error::Feasibility(Infeasibility::Revisit { node: 1, step: 1 }))
        ));
        let t = generate_instance(ProblemKind::Tsp, 3, 0).unwrap();
        assert_eq!(
            validate(&t, &[0, 3, 1]),
            Err(Infeasibility::OutOfRange { node: 3, nodes: 3 })
        );
    }

    #[test]
    fn cvrp_cost_includes_final_return() {
        let inst = cvrp(&[[0.0, 0.0], [0.0, 0.5], [0.5, 0.0]], &[6.0, 6.0], 10.0);
        let c = cost(&inst, &[1, 0, 2, 0]).unwrap();
        assert!((c - 2.0).abs() < 1e-12);
    }

    #[test]
    fn augmentation_keeps_identity_first() {
        let inst = generate_instance(ProblemKind::Cvrp, 7, 5).unwrap();
        let aug = augment(&inst);
        assert_eq!(aug.len(), 8);
        assert_eq!(aug[0], inst);
        for a in &aug {
            assert_eq!(a.demands, inst.demands);
            assert_eq!(a.capacity, inst.capacity);
            a.check().unwrap();
        }
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let inst = generate_instance(ProblemKind::Cvrp, 4, 9).unwrap();
        let s = inst.to_json().unwrap();
        assert_eq!(ProblemInstance::from_json(&s).unwrap(), inst);
        let bumped = s.replace("\"format_version\":1", "\"format_version\":2");
        assert!(ProblemInstance::from_json(&bumped).is_err());
    }

    fn random_rollout(inst: &ProblemInstance, seed: u64) -> Vec<usize> {
        let mut r = rng::stream(seed, Purpose::Rollout, 0, 0);
        let mut state = RouteState::new(inst);
        let mut visits = vec![];
        while !state.is_complete() {
            let mask = state.mask(inst);
            let allowed: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            assert!(!allowed.is_empty());
            let v = allowed[r.gen_range(0..allowed.len())];
            state.step(inst, v).unwrap();
            visits.push(v);
            assert!(visits.len() <= 2 * inst.n + 2);
        }
        visits
    }

    proptest! {
        #[test]
        fn masked_rollouts_are_feasible(seed in 0u64..10_000, n in 1usize..12) {
            let inst = generate_instance(ProblemKind::Cvrp, n, seed).unwrap();
            let visits = random_rollout(&inst, seed);
            prop_assert!(validate(&inst, &visits).is_ok());
            let tsp = generate_instance(ProblemKind::Tsp, n + 1, seed).unwrap();
            let visits = random_rollout(&tsp, seed);
            prop_assert!(validate(&tsp, &visits).is_ok());
        }

        #[test]
        fn tsp_cost_is_rotation_and_reversal_invariant(seed in 0u64..10_000, n in 2usize..10, rot in 0usize..10) {
            let inst = generate_instance(ProblemKind::Tsp, n, seed).unwrap();
            let tour = random_rollout(&inst, seed ^ 1);
            let c = cost(&inst, &tour).unwrap();
            let mut rotated = tour.clone();
            rotated.rotate_left(rot % n);
            let reversed: Vec<usize> = tour.iter().rev().copied().collect();
            prop_assert!((cost(&inst, &rotated).unwrap() - c).abs() < 1e-12);
            prop_assert!((cost(&inst, &reversed).unwrap() - c).abs() < 1e-12);
        }

        #[test]
        fn augmentation_preserves_costs(seed in 0u64..10_000, n in 1usize..9) {
            let inst = generate_instance(ProblemKind::Cvrp, n, seed).unwrap();
            let visits = random_rollout(&inst, seed);
            let c = cost(&inst, &visits).unwrap();
            for a in augment(&inst) {
                prop_assert!((cost(&a, &visits).unwrap() - c).abs() < 1e-12);
            }
        }
    }
}
