//! Brute-force enumeration and an independent mapping validator.
//!
//! Neither shares code with the search: roles are tried in list order
//! against every DUT, with no candidate filtering or cycle pruning, and
//! link placement uses explicit matching instead of counting.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{EdgeAssignment, Mapping};
use crate::model::{Link, RequiredLink, RequirementGraph, TestSystemGraph};

/// Places `needs` onto distinct `hosts` by exhaustive matching.
fn match_links(needs: &[&RequiredLink], hosts: &[&Link], taken: &mut Vec<bool>, out: &mut Vec<usize>) -> bool {
    let Some((first, rest)) = needs.split_first() else {
        return true;
    };
    for (k, host) in hosts.iter().enumerate() {
        if taken[k] || !first.accepts(host) {
            continue;
        }
        taken[k] = true;
        out.push(k);
        if match_links(rest, hosts, taken, out) {
            return true;
        }
        out.pop();
        taken[k] = false;
    }
    false
}

fn same_pair(link: &Link, x: &str, y: &str) -> bool {
    (link.a == x && link.b == y) || (link.a == y && link.b == x)
}

/// Required links between roles `r` and `s` in requirement order.
fn links_between<'a>(req: &'a RequirementGraph, r: &str, s: &str) -> Vec<&'a RequiredLink> {
    req.links
        .iter()
        .filter(|l| (l.a == r && l.b == s) || (l.a == s && l.b == r))
        .collect()
}

fn hosts_between<'a>(sys: &'a TestSystemGraph, x: &str, y: &str) -> Vec<&'a Link> {
    sys.edges.iter().filter(|e| same_pair(e, x, y)).collect()
}

struct Enumerator<'a> {
    req: &'a RequirementGraph,
    sys: &'a TestSystemGraph,
    limit: usize,
    chosen: Vec<usize>,
    found: Vec<Mapping>,
}

impl Enumerator<'_> {
    fn degree(&self, role: &str) -> usize {
        self.req
            .links
            .iter()
            .map(|l| (l.a == role) as usize + (l.b == role) as usize)
            .sum()
    }

    fn fits(&self, depth: usize, dut: usize) -> bool {
        let role = &self.req.roles[depth];
        let node = &self.sys.nodes[dut];
        if self.chosen.contains(&dut)
            || !role.predicate.accepts(node)
            || self.degree(&role.role_id) > node.port_count as usize
        {
            return false;
        }
        self.chosen.iter().enumerate().all(|(i, &other)| {
            let needs = links_between(self.req, &role.role_id, &self.req.roles[i].role_id);
            let hosts = hosts_between(self.sys, &node.dut_id, &self.sys.nodes[other].dut_id);
            match_links(&needs, &hosts, &mut vec![false; hosts.len()], &mut Vec::new())
        })
    }

    fn walk(&mut self, depth: usize) {
        if self.found.len() >= self.limit {
            return;
        }
        if depth == self.req.roles.len() {
            if let Some(m) = self.materialize() {
                self.found.push(m);
            }
            return;
        }
        for dut in 0..self.sys.nodes.len() {
            if self.fits(depth, dut) {
                self.chosen.push(dut);
                self.walk(depth + 1);
                self.chosen.pop();
            }
        }
    }

    fn materialize(&self) -> Option<Mapping> {
        let node_map: BTreeMap<String, String> = self
            .req
            .roles
            .iter()
            .zip(&self.chosen)
            .map(|(r, &d)| (r.role_id.clone(), self.sys.nodes[d].dut_id.clone()))
            .collect();
        let mut placed: HashMap<*const RequiredLink, Link> = HashMap::new();
        let mut pairs = BTreeSet::new();
        for l in &self.req.links {
            let (x, y) = (node_map.get(&l.a)?, node_map.get(&l.b)?);
            if !pairs.insert(if l.a <= l.b { (&l.a, &l.b) } else { (&l.b, &l.a) }) {
                continue;
            }
            let needs = links_between(self.req, &l.a, &l.b);
            let hosts = hosts_between(self.sys, x, y);
            let mut taken = vec![false; hosts.len()];
            let mut out = Vec::new();
            if !match_links(&needs, &hosts, &mut taken, &mut out) {
                return None;
            }
            for (need, k) in needs.into_iter().zip(out) {
                placed.insert(need as *const _, hosts[k].clone());
            }
        }
        Some(Mapping {
            test_id: self.req.test_id.clone(),
            system_id: self.sys.system_id.clone(),
            edge_map: self
                .req
                .links
                .iter()
                .map(|l| EdgeAssignment {
                    requirement: l.clone(),
                    system: placed[&(l as *const _)].clone(),
                })
                .collect(),
            node_map,
        })
    }
}

/// Every valid mapping in `(role order, DUT order)` lexicographic order, up to `limit`.
pub fn enumerate_mappings(req: &RequirementGraph, sys: &TestSystemGraph, limit: usize) -> Vec<Mapping> {
    let mut e = Enumerator {
        req,
        sys,
        limit: limit.max(1),
        chosen: Vec::new(),
        found: Vec::new(),
    };
    e.walk(0);
    e.found
}

/// Checks a mapping against both graphs, reporting every broken rule.
pub fn validate_mapping(req: &RequirementGraph, sys: &TestSystemGraph, m: &Mapping) -> Result<(), Vec<String>> {
    let mut errors = Vec::new();
    if m.test_id != req.test_id || m.system_id != sys.system_id {
        errors.push("mapping names a different test or system".to_string());
    }
    let roles: BTreeSet<&str> = req.roles.iter().map(|r| r.role_id.as_str()).collect();
    let mapped: BTreeSet<&str> = m.node_map.keys().map(String::as_str).collect();
    if roles != mapped {
        errors.push(format!("mapped roles {mapped:?} differ from required roles {roles:?}"));
    }
    let mut images = BTreeSet::new();
    for (role, dut) in &m.node_map {
        if !images.insert(dut) {
            errors.push(format!("DUT `{dut}` hosts more than one role"));
        }
        let Some(node) = sys.nodes.iter().find(|n| &n.dut_id == dut) else {
            errors.push(format!("role `{role}` mapped to unknown DUT `{dut}`"));
            continue;
        };
        if let Some(r) = req.roles.iter().find(|r| &r.role_id == role) {
            if !r.predicate.accepts(node) {
                errors.push(format!("DUT `{dut}` does not satisfy role `{role}`"));
            }
        }
        let degree = req.links.iter().filter(|l| &l.a == role || &l.b == role).count()
            + req.links.iter().filter(|l| &l.a == role && &l.b == role).count();
        if degree > node.port_count as usize {
            errors.push(format!("role `{role}` needs {degree} ports, `{dut}` has {}", node.port_count));
        }
    }
    if m.edge_map.len() != req.links.len() {
        errors.push(format!(
            "{} required links but {} edge assignments",
            req.links.len(),
            m.edge_map.len()
        ));
    }
    let mut used_links: Vec<&Link> = Vec::new();
    for (need, assignment) in req.links.iter().zip(&m.edge_map) {
        if &assignment.requirement != need {
            errors.push(format!("edge assignment out of order at {}–{}", need.a, need.b));
            continue;
        }
        let host = &assignment.system;
        if !sys.edges.contains(host) {
            errors.push(format!("{}–{} is not a system link", host.a, host.b));
        }
        match (m.node_map.get(&need.a), m.node_map.get(&need.b)) {
            (Some(x), Some(y)) if same_pair(host, x, y) => {}
            _ => errors.push(format!("required link {}–{} not placed between its DUTs", need.a, need.b)),
        }
        if !need.accepts(host) {
            errors.push(format!("system link {}–{} rejects required link tag", host.a, host.b));
        }
        if used_links.contains(&host) {
            errors.push(format!("system link {}–{} hosts two required links", host.a, host.b));
        }
        used_links.push(host);
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}
