//! Fundamental cycle bases from BFS spanning forests.
//!
//! Parallel links collapse to one edge and self-loops are ignored, so every
//! reported cycle is simple with at least three nodes and the basis size is
//! `E - V + C` over the underlying simple graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{RequirementGraph, TestSystemGraph};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleBasis {
    /// Each cycle as a node sequence; the closing edge back to the first node is implicit.
    pub cycles: Vec<Vec<String>>,
}

impl CycleBasis {
    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }
}

pub fn cycle_basis(graph: &TestSystemGraph) -> CycleBasis {
    basis_of(
        graph.nodes.iter().map(|n| n.dut_id.as_str()),
        graph.edges.iter().map(|e| (e.a.as_str(), e.b.as_str())),
    )
}

pub fn requirement_cycle_basis(req: &RequirementGraph) -> CycleBasis {
    basis_of(
        req.roles.iter().map(|r| r.role_id.as_str()),
        req.links.iter().map(|l| (l.a.as_str(), l.b.as_str())),
    )
}

/// Every node that lies on at least one cycle.
///
/// Every edge of any cycle appears in some fundamental cycle, so the union
/// over the basis is exact.
pub fn nodes_on_cycles(basis: &CycleBasis) -> BTreeSet<&str> {
    basis
        .cycles
        .iter()
        .flat_map(|c| c.iter().map(String::as_str))
        .collect()
}

fn basis_of<'a>(
    nodes: impl Iterator<Item = &'a str>,
    edges: impl Iterator<Item = (&'a str, &'a str)>,
) -> CycleBasis {
    let mut adjacency: BTreeMap<&str, BTreeSet<&str>> = nodes.map(|n| (n, BTreeSet::new())).collect();
    for (a, b) in edges {
        if a == b || !adjacency.contains_key(a) || !adjacency.contains_key(b) {
            continue;
        }
        adjacency.get_mut(a).unwrap().insert(b);
        adjacency.get_mut(b).unwrap().insert(a);
    }

    let mut parent: BTreeMap<&str, Option<&str>> = BTreeMap::new();
    let mut depth: BTreeMap<&str, usize> = BTreeMap::new();
    let mut closed: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut cycles = Vec::new();

    for &root in adjacency.keys() {
        if parent.contains_key(root) {
            continue;
        }
        parent.insert(root, None);
        depth.insert(root, 0);
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if !parent.contains_key(v) {
                    parent.insert(v, Some(u));
                    depth.insert(v, depth[u] + 1);
                    queue.push_back(v);
                    continue;
                }
                if parent[u] == Some(v) || parent[v] == Some(u) {
                    continue;
                }
                let key = if u < v { (u, v) } else { (v, u) };
                if closed.insert(key) {
                    cycles.push(tree_cycle(u, v, &parent, &depth));
                }
            }
        }
    }
    CycleBasis { cycles }
}

/// Closes non-tree edge `u–v` through the tree: u … lca … v.
fn tree_cycle<'a>(
    u: &'a str,
    v: &'a str,
    parent: &BTreeMap<&'a str, Option<&'a str>>,
    depth: &BTreeMap<&'a str, usize>,
) -> Vec<String> {
    let mut up = vec![u];
    let mut down = vec![v];
    let (mut x, mut y) = (u, v);
    while depth[x] > depth[y] {
        x = parent[x].unwrap();
        up.push(x);
    }
    while depth[y] > depth[x] {
        y = parent[y].unwrap();
        down.push(y);
    }
    while x != y {
        x = parent[x].unwrap();
        y = parent[y].unwrap();
        up.push(x);
        down.push(y);
    }
    down.pop();
    up.extend(down.into_iter().rev());
    up.into_iter().map(str::to_string).collect()
}
