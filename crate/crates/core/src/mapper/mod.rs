//! Mapping requirement graphs onto test systems.
//!
//! A mapping sends roles to distinct DUTs and every required link to its own
//! system link between the two chosen DUTs. A tagged required link needs a
//! system link with exactly that tag; an untagged one accepts any link. No
//! system link hosts two required links.
//!
//! The search is plain backtracking over candidate sets with a node
//! expansion cap, so "no mapping exists" and "gave up" stay distinguishable.

mod oracle;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    cycle_basis, nodes_on_cycles, requirement_cycle_basis, validate_requirement, validate_system,
    Link, RequiredLink, RequirementGraph, TestSystemGraph, Violation,
};
use crate::trdb::{Snapshot, UsageRecord};

pub use oracle::{enumerate_mappings, validate_mapping};

pub const DEFAULT_EXPANSION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeAssignment {
    pub requirement: RequiredLink,
    pub system: Link,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mapping {
    pub test_id: String,
    pub system_id: String,
    pub node_map: BTreeMap<String, String>,
    /// One entry per required link, in requirement order.
    pub edge_map: Vec<EdgeAssignment>,
}

impl Mapping {
    pub fn duts(&self) -> BTreeSet<&str> {
        self.node_map.values().map(String::as_str).collect()
    }

    pub fn usage_records(&self, session_id: &str) -> Vec<UsageRecord> {
        self.duts()
            .into_iter()
            .map(|dut| UsageRecord {
                test_id: self.test_id.clone(),
                system_id: self.system_id.clone(),
                dut_id: dut.to_string(),
                session_id: session_id.to_string(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Unsatisfiable {
    EmptyCandidateSet { role_id: String },
    SearchExhausted,
}

impl std::fmt::Display for Unsatisfiable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Unsatisfiable::EmptyCandidateSet { role_id } => {
                write!(f, "no DUT can host role `{role_id}`")
            }
            Unsatisfiable::SearchExhausted => write!(f, "search exhausted without a mapping"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum MapOutcome {
    Mapped(Mapping),
    Unsatisfiable(Unsatisfiable),
}

impl MapOutcome {
    pub fn mapping(&self) -> Option<&Mapping> {
        match self {
            MapOutcome::Mapped(m) => Some(m),
            MapOutcome::Unsatisfiable(_) => None,
        }
    }

    pub fn into_mapping(self) -> Option<Mapping> {
        match self {
            MapOutcome::Mapped(m) => Some(m),
            MapOutcome::Unsatisfiable(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("search budget of {cap} node expansions exceeded")]
    SearchBudgetExceeded { cap: u64 },
    #[error("invalid requirement graph: {}", join(.0))]
    InvalidRequirement(Vec<Violation>),
    #[error("invalid test system: {}", join(.0))]
    InvalidSystem(Vec<Violation>),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy)]
pub struct SearchOptions {
    pub expansion_cap: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            expansion_cap: DEFAULT_EXPANSION_CAP,
        }
    }
}

/// Usage counts from previous mappings, keyed by `(test_id, dut_id)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoverageState {
    pub usage: BTreeMap<(String, String), u64>,
}

impl CoverageState {
    pub fn from_snapshot(snapshot: &Snapshot, system_id: &str) -> Self {
        CoverageState {
            usage: snapshot.dut_usage_counts(system_id),
        }
    }

    pub fn count(&self, test_id: &str, dut_id: &str) -> u64 {
        self.usage
            .get(&(test_id.to_string(), dut_id.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn record(&mut self, mapping: &Mapping) {
        for dut in mapping.duts() {
            *self
                .usage
                .entry((mapping.test_id.clone(), dut.to_string()))
                .or_insert(0) += 1;
        }
    }
}

/// DUTs that satisfy each role's predicate and have at least the role's degree.
pub fn candidate_sets(req: &RequirementGraph, sys: &TestSystemGraph) -> BTreeMap<String, BTreeSet<String>> {
    let req_deg = req.degrees();
    let sys_deg = sys.degrees();
    req.roles
        .iter()
        .map(|role| {
            let need = req_deg.get(role.role_id.as_str()).copied().unwrap_or(0);
            let set = sys
                .nodes
                .iter()
                .filter(|n| {
                    role.predicate.accepts(n)
                        && sys_deg.get(n.dut_id.as_str()).copied().unwrap_or(0) >= need
                })
                .map(|n| n.dut_id.clone())
                .collect();
            (role.role_id.clone(), set)
        })
        .collect()
}

/// Fraction of eligible DUTs this test has used at least once.
pub fn dut_coverage(req: &RequirementGraph, sys: &TestSystemGraph, coverage: &CoverageState) -> f64 {
    let eligible: BTreeSet<String> = candidate_sets(req, sys).into_values().flatten().collect();
    if eligible.is_empty() {
        return 1.0;
    }
    let used = eligible
        .iter()
        .filter(|d| coverage.count(&req.test_id, d) > 0)
        .count();
    used as f64 / eligible.len() as f64
}

pub fn map_once(req: &RequirementGraph, sys: &TestSystemGraph, seed: u64) -> Result<MapOutcome, MapError> {
    map_once_with(req, sys, seed, SearchOptions::default())
}

pub fn map_once_with(
    req: &RequirementGraph,
    sys: &TestSystemGraph,
    seed: u64,
    options: SearchOptions,
) -> Result<MapOutcome, MapError> {
    search(req, sys, None, seed, options)
}

/// A valid mapping minimizing the summed usage of its DUTs.
pub fn map_with_coverage(
    req: &RequirementGraph,
    sys: &TestSystemGraph,
    coverage: &CoverageState,
    seed: u64,
) -> Result<MapOutcome, MapError> {
    map_with_coverage_with(req, sys, coverage, seed, SearchOptions::default())
}

pub fn map_with_coverage_with(
    req: &RequirementGraph,
    sys: &TestSystemGraph,
    coverage: &CoverageState,
    seed: u64,
    options: SearchOptions,
) -> Result<MapOutcome, MapError> {
    search(req, sys, Some(coverage), seed, options)
}

/// Index structures shared by the search and the edge-map builder.
pub(crate) struct Indexed<'a> {
    pub req: &'a RequirementGraph,
    pub sys: &'a TestSystemGraph,
    pub dut_index: HashMap<&'a str, usize>,
    /// Required link indices per unordered role pair.
    pub req_pairs: BTreeMap<(usize, usize), Vec<usize>>,
    /// System link indices per unordered DUT pair.
    pub sys_pairs: HashMap<(usize, usize), Vec<usize>>,
    pub req_degree: Vec<usize>,
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl<'a> Indexed<'a> {
    pub fn new(req: &'a RequirementGraph, sys: &'a TestSystemGraph) -> Self {
        let role_index: HashMap<&str, usize> = req
            .roles
            .iter()
            .enumerate()
            .map(|(i, r)| (r.role_id.as_str(), i))
            .collect();
        let dut_index: HashMap<&str, usize> = sys
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.dut_id.as_str(), i))
            .collect();
        let mut req_pairs: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let mut req_degree = vec![0; req.roles.len()];
        for (i, l) in req.links.iter().enumerate() {
            let (Some(&a), Some(&b)) = (role_index.get(l.a.as_str()), role_index.get(l.b.as_str())) else {
                continue;
            };
            req_pairs.entry(ordered(a, b)).or_default().push(i);
            req_degree[a] += 1;
            req_degree[b] += 1;
        }
        let mut sys_pairs: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (i, e) in sys.edges.iter().enumerate() {
            if let (Some(&a), Some(&b)) = (dut_index.get(e.a.as_str()), dut_index.get(e.b.as_str())) {
                sys_pairs.entry(ordered(a, b)).or_default().push(i);
            }
        }
        Indexed {
            req,
            sys,
            dut_index,
            req_pairs,
            sys_pairs,
            req_degree,
        }
    }

    /// Whether the system links in `hosts` can carry `needs` one-to-one.
    ///
    /// Tagged needs compete only for links with their tag; untagged needs
    /// take whatever is left, so per-tag and total counts decide it.
    pub fn links_fit(&self, needs: &[usize], hosts: &[usize]) -> bool {
        if needs.len() > hosts.len() {
            return false;
        }
        let mut demand: HashMap<&str, usize> = HashMap::new();
        for &i in needs {
            if let Some(p) = &self.req.links[i].predicate {
                *demand.entry(p.tag.as_str()).or_insert(0) += 1;
            }
        }
        demand.into_iter().all(|(tag, n)| {
            hosts
                .iter()
                .filter(|&&h| self.sys.edges[h].tag.as_deref() == Some(tag))
                .count()
                >= n
        })
    }

    pub fn pair_fits(&self, role_a: usize, dut_a: usize, role_b: usize, dut_b: usize) -> bool {
        let Some(needs) = self.req_pairs.get(&ordered(role_a, role_b)) else {
            return true;
        };
        let hosts = self
            .sys_pairs
            .get(&ordered(dut_a, dut_b))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        self.links_fit(needs, hosts)
    }

    /// Builds the full mapping from a complete role → DUT assignment.
    pub fn build(&self, assignment: &[usize]) -> Mapping {
        let mut edge_slots: Vec<Option<usize>> = vec![None; self.req.links.len()];
        for (&(ra, rb), needs) in &self.req_pairs {
            let hosts = self
                .sys_pairs
                .get(&ordered(assignment[ra], assignment[rb]))
                .cloned()
                .unwrap_or_default();
            let mut taken = vec![false; hosts.len()];
            let tagged = needs.iter().filter(|&&i| self.req.links[i].predicate.is_some());
            let untagged = needs.iter().filter(|&&i| self.req.links[i].predicate.is_none());
            for &need in tagged.chain(untagged) {
                let link = &self.req.links[need];
                let slot = (0..hosts.len())
                    .find(|&k| !taken[k] && link.accepts(&self.sys.edges[hosts[k]]))
                    .expect("assignment was checked with links_fit");
                taken[slot] = true;
                edge_slots[need] = Some(hosts[slot]);
            }
        }
        Mapping {
            test_id: self.req.test_id.clone(),
            system_id: self.sys.system_id.clone(),
            node_map: self
                .req
                .roles
                .iter()
                .zip(assignment)
                .map(|(r, &d)| (r.role_id.clone(), self.sys.nodes[d].dut_id.clone()))
                .collect(),
            edge_map: self
                .req
                .links
                .iter()
                .zip(edge_slots)
                .map(|(l, slot)| EdgeAssignment {
                    requirement: l.clone(),
                    system: self.sys.edges[slot.expect("every required link is placed")].clone(),
                })
                .collect(),
        }
    }
}

struct Search<'a, 'p> {
    ix: &'p Indexed<'a>,
    /// Roles in search order.
    order: Vec<usize>,
    /// Value order per role (indexed by role).
    values: Vec<Vec<usize>>,
    /// Usage cost per role and DUT.
    cost: Vec<HashMap<usize, u64>>,
    /// Lower bound on the cost of roles `order[k..]`.
    suffix_bound: Vec<u64>,
    assignment: Vec<Option<usize>>,
    used: Vec<bool>,
    expansions: u64,
    cap: u64,
    best: Option<(u64, Vec<usize>)>,
    root_bound: u64,
}

impl Search<'_, '_> {
    fn run(&mut self, depth: usize, cost: u64) -> Result<bool, MapError> {
        if let Some((best, _)) = &self.best {
            if cost + self.suffix_bound[depth] >= *best {
                return Ok(false);
            }
        }
        if depth == self.order.len() {
            let full = self.assignment.iter().map(|d| d.expect("all roles assigned")).collect();
            self.best = Some((cost, full));
            return Ok(cost == self.root_bound);
        }
        let role = self.order[depth];
        for k in 0..self.values[role].len() {
            let dut = self.values[role][k];
            self.expansions += 1;
            if self.expansions > self.cap {
                return Err(MapError::SearchBudgetExceeded { cap: self.cap });
            }
            if self.used[dut] || !self.consistent(role, dut) {
                continue;
            }
            self.assignment[role] = Some(dut);
            self.used[dut] = true;
            let step = self.cost[role].get(&dut).copied().unwrap_or(0);
            let done = self.run(depth + 1, cost + step)?;
            self.used[dut] = false;
            self.assignment[role] = None;
            if done {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn consistent(&self, role: usize, dut: usize) -> bool {
        if self.ix.req_degree[role] > self.ix.sys.nodes[dut].port_count as usize {
            return false;
        }
        self.assignment.iter().enumerate().all(|(other, placed)| match placed {
            Some(d) => self.ix.pair_fits(role, dut, other, *d),
            None => true,
        })
    }
}

fn search(
    req: &RequirementGraph,
    sys: &TestSystemGraph,
    coverage: Option<&CoverageState>,
    seed: u64,
    options: SearchOptions,
) -> Result<MapOutcome, MapError> {
    validate_requirement(req).map_err(MapError::InvalidRequirement)?;
    validate_system(sys).map_err(MapError::InvalidSystem)?;
    let ix = Indexed::new(req, sys);
    let sets = candidate_sets(req, sys);
    if let Some(role) = req.roles.iter().find(|r| sets[&r.role_id].is_empty()) {
        return Ok(MapOutcome::Unsatisfiable(Unsatisfiable::EmptyCandidateSet {
            role_id: role.role_id.clone(),
        }));
    }

    let req_cyclic: BTreeSet<String> = nodes_on_cycles(&requirement_cycle_basis(req))
        .into_iter()
        .map(str::to_string)
        .collect();
    let sys_basis = cycle_basis(sys);
    let sys_cyclic = nodes_on_cycles(&sys_basis);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(req.roles.len());
    let mut cost = Vec::with_capacity(req.roles.len());
    for role in &req.roles {
        let mut vals: Vec<usize> = sets[&role.role_id]
            .iter()
            .filter(|d| !req_cyclic.contains(&role.role_id) || sys_cyclic.contains(d.as_str()))
            .map(|d| ix.dut_index[d.as_str()])
            .collect();
        vals.shuffle(&mut rng);
        let costs: HashMap<usize, u64> = match coverage {
            Some(c) => vals
                .iter()
                .map(|&d| (d, c.count(&req.test_id, &sys.nodes[d].dut_id)))
                .collect(),
            None => HashMap::new(),
        };
        // stable sort keeps the seeded order among equal usage
        vals.sort_by_key(|d| costs.get(d).copied().unwrap_or(0));
        values.push(vals);
        cost.push(costs);
    }

    let mut order: Vec<usize> = (0..req.roles.len()).collect();
    order.sort_by(|&a, &b| {
        (values[a].len(), &req.roles[a].role_id).cmp(&(values[b].len(), &req.roles[b].role_id))
    });
    let min_cost = |r: usize| {
        values[r]
            .iter()
            .map(|d| cost[r].get(d).copied().unwrap_or(0))
            .min()
            .unwrap_or(0)
    };
    let mut suffix_bound = vec![0u64; order.len() + 1];
    for k in (0..order.len()).rev() {
        suffix_bound[k] = suffix_bound[k + 1] + min_cost(order[k]);
    }

    let mut s = Search {
        ix: &ix,
        root_bound: suffix_bound[0],
        order,
        values,
        cost,
        suffix_bound,
        assignment: vec![None; req.roles.len()],
        used: vec![false; sys.nodes.len()],
        expansions: 0,
        cap: options.expansion_cap,
        best: None,
    };
    s.run(0, 0)?;
    Ok(match s.best {
        Some((_, assignment)) => MapOutcome::Mapped(ix.build(&assignment)),
        None => MapOutcome::Unsatisfiable(Unsatisfiable::SearchExhausted),
    })
}
