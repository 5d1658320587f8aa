//! Shared domain types: lab topologies, test requirements, verdicts.
//!
//! All graphs are undirected. Parallel links between the same pair of nodes
//! are permitted only when their tags differ.

mod cycles;
mod io;
mod time;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cycles::{cycle_basis, nodes_on_cycles, requirement_cycle_basis, CycleBasis};
pub use io::{
    parse_records, parse_requirements, parse_systems, read_requirements, read_systems,
    to_ndjson, ModelIoError, SCHEMA_VERSION,
};
pub use time::{Timestamp, TimestampError};

/// One device under test inside a test system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DutNode {
    pub dut_id: String,
    pub model: String,
    pub capabilities: BTreeSet<String>,
    pub port_count: u32,
}

/// An undirected link; `tag` distinguishes media between the same pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub a: String,
    pub b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl Link {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        Link {
            a: a.into(),
            b: b.into(),
            tag: None,
        }
    }

    pub fn tagged(a: impl Into<String>, b: impl Into<String>, tag: impl Into<String>) -> Self {
        Link {
            a: a.into(),
            b: b.into(),
            tag: Some(tag.into()),
        }
    }

    /// Endpoints in lexicographic order.
    pub fn endpoints(&self) -> (&str, &str) {
        if self.a <= self.b {
            (&self.a, &self.b)
        } else {
            (&self.b, &self.a)
        }
    }
}

/// The physical topology of one test system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSystemGraph {
    pub system_id: String,
    pub nodes: Vec<DutNode>,
    pub edges: Vec<Link>,
}

impl TestSystemGraph {
    pub fn node(&self, dut_id: &str) -> Option<&DutNode> {
        self.nodes.iter().find(|n| n.dut_id == dut_id)
    }

    /// Number of link ends at each node; parallel links count separately.
    pub fn degrees(&self) -> HashMap<&str, usize> {
        degree_map(self.edges.iter().map(|e| (e.a.as_str(), e.b.as_str())))
    }
}

/// Constraint a DUT must satisfy to host a role. Empty sets mean "no constraint".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodePredicate {
    #[serde(default)]
    pub required_capabilities: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_models: Option<BTreeSet<String>>,
    #[serde(default)]
    pub min_ports: u32,
}

impl NodePredicate {
    pub fn requiring<I, S>(caps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        NodePredicate {
            required_capabilities: caps.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }

    pub fn accepts(&self, node: &DutNode) -> bool {
        node.port_count >= self.min_ports
            && self.required_capabilities.is_subset(&node.capabilities)
            && match &self.allowed_models {
                Some(models) if !models.is_empty() => models.contains(&node.model),
                _ => true,
            }
    }
}

/// Constraint on the system link hosting a required link.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkPredicate {
    pub tag: String,
}

impl LinkPredicate {
    pub fn accepts(&self, link: &Link) -> bool {
        link.tag.as_deref() == Some(self.tag.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Role {
    pub role_id: String,
    #[serde(default)]
    pub predicate: NodePredicate,
}

impl Role {
    pub fn new(role_id: impl Into<String>, predicate: NodePredicate) -> Self {
        Role {
            role_id: role_id.into(),
            predicate,
        }
    }

    pub fn any(role_id: impl Into<String>) -> Self {
        Role::new(role_id, NodePredicate::default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequiredLink {
    pub a: String,
    pub b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<LinkPredicate>,
}

impl RequiredLink {
    pub fn new(a: impl Into<String>, b: impl Into<String>) -> Self {
        RequiredLink {
            a: a.into(),
            b: b.into(),
            predicate: None,
        }
    }

    pub fn tagged(a: impl Into<String>, b: impl Into<String>, tag: impl Into<String>) -> Self {
        RequiredLink {
            a: a.into(),
            b: b.into(),
            predicate: Some(LinkPredicate { tag: tag.into() }),
        }
    }

    pub fn accepts(&self, link: &Link) -> bool {
        self.predicate.as_ref().is_none_or(|p| p.accepts(link))
    }
}

/// The logical topology a test case needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequirementGraph {
    pub test_id: String,
    pub roles: Vec<Role>,
    pub links: Vec<RequiredLink>,
    pub est_duration_s: f64,
}

impl RequirementGraph {
    pub fn role(&self, role_id: &str) -> Option<&Role> {
        self.roles.iter().find(|r| r.role_id == role_id)
    }

    pub fn degrees(&self) -> HashMap<&str, usize> {
        degree_map(self.links.iter().map(|l| (l.a.as_str(), l.b.as_str())))
    }
}

fn degree_map<'a>(pairs: impl Iterator<Item = (&'a str, &'a str)>) -> HashMap<&'a str, usize> {
    let mut degrees = HashMap::new();
    for (a, b) in pairs {
        *degrees.entry(a).or_insert(0) += 1;
        *degrees.entry(b).or_insert(0) += 1;
    }
    degrees
}

/// Outcome of one test execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Error,
    Skipped,
}

impl Verdict {
    pub const ALL: [Verdict; 4] = [Verdict::Pass, Verdict::Fail, Verdict::Error, Verdict::Skipped];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Error => "error",
            Verdict::Skipped => "skipped",
        }
    }

    /// `fail` and `error` both raise a regression alarm.
    pub fn is_failure(self) -> bool {
        matches!(self, Verdict::Fail | Verdict::Error)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown verdict `{0}` (expected pass, fail, error or skipped)")]
pub struct UnknownVerdict(pub String);

impl FromStr for Verdict {
    type Err = UnknownVerdict;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verdict::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| UnknownVerdict(s.to_string()))
    }
}

/// A violated graph invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    EmptyGraph,
    DuplicateNode { id: String },
    DanglingEdge { a: String, b: String, missing: String },
    SelfLoop { id: String },
    DuplicateLink { a: String, b: String, tag: Option<String> },
    PortDeficit { dut_id: String, degree: usize, port_count: u32 },
    NonPositiveDuration { value: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyGraph => write!(f, "empty graph: no nodes"),
            Violation::DuplicateNode { id } => write!(f, "duplicate node id `{id}`"),
            Violation::DanglingEdge { a, b, missing } => {
                write!(f, "dangling edge {a}–{b}: unknown node `{missing}`")
            }
            Violation::SelfLoop { id } => write!(f, "self-loop on `{id}`"),
            Violation::DuplicateLink { a, b, tag } => match tag {
                Some(t) => write!(f, "duplicate link {a}–{b} with tag `{t}`"),
                None => write!(f, "duplicate untagged link {a}–{b}"),
            },
            Violation::PortDeficit {
                dut_id,
                degree,
                port_count,
            } => write!(f, "port deficit on `{dut_id}`: degree {degree} > {port_count} ports"),
            Violation::NonPositiveDuration { value } => {
                write!(f, "est_duration_s must be positive, got {value}")
            }
        }
    }
}

pub type ValidationResult = Result<(), Vec<Violation>>;

fn check_structure<'a>(
    ids: impl Iterator<Item = &'a str>,
    links: impl Iterator<Item = (&'a str, &'a str, Option<&'a str>)>,
    violations: &mut Vec<Violation>,
) -> HashSet<&'a str> {
    let mut known = HashSet::new();
    for id in ids {
        if !known.insert(id) {
            violations.push(Violation::DuplicateNode { id: id.to_string() });
        }
    }
    if known.is_empty() {
        violations.push(Violation::EmptyGraph);
    }
    let mut seen = HashSet::new();
    for (a, b, tag) in links {
        if a == b {
            violations.push(Violation::SelfLoop { id: a.to_string() });
            continue;
        }
        for end in [a, b] {
            if !known.contains(end) {
                violations.push(Violation::DanglingEdge {
                    a: a.to_string(),
                    b: b.to_string(),
                    missing: end.to_string(),
                });
            }
        }
        let key = if a <= b { (a, b, tag) } else { (b, a, tag) };
        if !seen.insert(key) {
            violations.push(Violation::DuplicateLink {
                a: key.0.to_string(),
                b: key.1.to_string(),
                tag: tag.map(str::to_string),
            });
        }
    }
    known
}

/// Checks every structural invariant of a test system and reports all violations.
pub fn validate_system(graph: &TestSystemGraph) -> ValidationResult {
    let mut violations = Vec::new();
    check_structure(
        graph.nodes.iter().map(|n| n.dut_id.as_str()),
        graph
            .edges
            .iter()
            .map(|e| (e.a.as_str(), e.b.as_str(), e.tag.as_deref())),
        &mut violations,
    );
    let degrees = graph.degrees();
    for node in &graph.nodes {
        let degree = degrees.get(node.dut_id.as_str()).copied().unwrap_or(0);
        if degree > node.port_count as usize {
            violations.push(Violation::PortDeficit {
                dut_id: node.dut_id.clone(),
                degree,
                port_count: node.port_count,
            });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

pub fn validate_requirement(req: &RequirementGraph) -> ValidationResult {
    let mut violations = Vec::new();
    check_structure(
        req.roles.iter().map(|r| r.role_id.as_str()),
        req.links.iter().map(|l| {
            (
                l.a.as_str(),
                l.b.as_str(),
                l.predicate.as_ref().map(|p| p.tag.as_str()),
            )
        }),
        &mut violations,
    );
    if !(req.est_duration_s.is_finite() && req.est_duration_s > 0.0) {
        violations.push(Violation::NonPositiveDuration {
            value: req.est_duration_s.to_string(),
        });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Canonical identity of a DUT's hardware profile, for usage accounting.
///
/// Equal iff `(model, capabilities, port_count)` are equal; capability order
/// never matters because the set is sorted.
pub fn node_signature(node: &DutNode) -> String {
    let caps: Vec<&str> = node.capabilities.iter().map(String::as_str).collect();
    // JSON string escaping keeps the encoding injective.
    serde_json::to_string(&(&node.model, caps, node.port_count)).expect("plain data serializes")
}

/// Groups DUTs of a system by [`node_signature`].
pub fn signature_classes(graph: &TestSystemGraph) -> BTreeMap<String, Vec<&str>> {
    let mut classes: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for node in &graph.nodes {
        classes
            .entry(node_signature(node))
            .or_default()
            .push(node.dut_id.as_str());
    }
    classes
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dut(id: &str, caps: &[&str], ports: u32) -> DutNode {
        DutNode {
            dut_id: id.into(),
            model: "m1".into(),
            capabilities: caps.iter().map(|c| c.to_string()).collect(),
            port_count: ports,
        }
    }

    fn triangle(ports: u32) -> TestSystemGraph {
        TestSystemGraph {
            system_id: "s".into(),
            nodes: vec![dut("a", &[], ports), dut("b", &[], ports), dut("c", &[], ports)],
            edges: vec![Link::new("a", "b"), Link::new("b", "c"), Link::new("c", "a")],
        }
    }

    #[test]
    fn triangle_with_exact_ports_is_valid() {
        assert_eq!(validate_system(&triangle(2)), Ok(()));
    }

    #[test]
    fn dangling_edge_reported() {
        let mut g = triangle(3);
        g.edges.push(Link::new("a", "x9"));
        let v = validate_system(&g).unwrap_err();
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().contains("dangling edge"));
        assert!(matches!(&v[0], Violation::DanglingEdge { missing, .. } if missing == "x9"));
    }

    #[test]
    fn port_deficit_reported() {
        let mut g = triangle(2);
        g.nodes[0].port_count = 1;
        let v = validate_system(&g).unwrap_err();
        assert_eq!(
            v,
            vec![Violation::PortDeficit {
                dut_id: "a".into(),
                degree: 2,
                port_count: 1
            }]
        );
        assert!(v[0].to_string().contains("port deficit"));
    }

    #[test]
    fn all_violations_collected() {
        let mut g = triangle(2);
        g.edges.push(Link::new("b", "b"));
        g.edges.push(Link::new("a", "b"));
        g.nodes.push(dut("a", &[], 5));
        let v = validate_system(&g).unwrap_err();
        assert!(v.iter().any(|v| matches!(v, Violation::SelfLoop { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::DuplicateLink { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::DuplicateNode { .. })));
    }

    #[test]
    fn tagged_parallel_links_allowed() {
        let mut g = triangle(3);
        g.edges.push(Link::tagged("a", "b", "vlan10"));
        g.nodes[2].port_count = 2;
        assert_eq!(validate_system(&g), Ok(()));
        g.edges.push(Link::tagged("b", "a", "vlan10"));
        assert!(validate_system(&g).is_err());
    }

    #[test]
    fn empty_system_is_invalid() {
        let g = TestSystemGraph {
            system_id: "e".into(),
            nodes: vec![],
            edges: vec![],
        };
        assert_eq!(validate_system(&g), Err(vec![Violation::EmptyGraph]));
    }

    #[test]
    fn requirement_validation() {
        let mut req = RequirementGraph {
            test_id: "t".into(),
            roles: vec![Role::any("x"), Role::any("y")],
            links: vec![RequiredLink::new("x", "y")],
            est_duration_s: 10.0,
        };
        assert_eq!(validate_requirement(&req), Ok(()));
        req.est_duration_s = 0.0;
        req.links.push(RequiredLink::new("x", "x"));
        assert_eq!(validate_requirement(&req).unwrap_err().len(), 2);
    }

    #[test]
    fn signatures() {
        let a = dut("a", &["serial", "firewall"], 4);
        let b = dut("b", &["firewall", "serial"], 4);
        assert_eq!(node_signature(&a), node_signature(&b));
        let c = dut("c", &["firewall", "serial"], 5);
        assert_ne!(node_signature(&a), node_signature(&c));
        // separators inside names cannot collide
        let d = DutNode {
            model: "m1\",[\"x".into(),
            ..dut("d", &[], 4)
        };
        let e = DutNode {
            model: "m1".into(),
            ..dut("e", &["x"], 4)
        };
        assert_ne!(node_signature(&d), node_signature(&e));
    }

    #[test]
    fn signature_classes_group_identical_hardware() {
        let mut g = triangle(2);
        g.nodes[2].capabilities.insert("poe".into());
        let classes = signature_classes(&g);
        assert_eq!(classes.len(), 2);
        assert!(classes.values().any(|v| v == &vec!["a", "b"]));
    }

    #[test]
    fn predicates() {
        let node = dut("a", &["firewall", "poe"], 3);
        assert!(NodePredicate::requiring(["firewall"]).accepts(&node));
        assert!(!NodePredicate::requiring(["serial"]).accepts(&node));
        let p = NodePredicate {
            min_ports: 4,
            ..Default::default()
        };
        assert!(!p.accepts(&node));
        let p = NodePredicate {
            allowed_models: Some(BTreeSet::new()),
            ..Default::default()
        };
        assert!(p.accepts(&node));
        let p = NodePredicate {
            allowed_models: Some(["m2".to_string()].into()),
            ..Default::default()
        };
        assert!(!p.accepts(&node));
    }

    #[test]
    fn verdict_names_round_trip() {
        for v in Verdict::ALL {
            assert_eq!(v.as_str().parse::<Verdict>(), Ok(v));
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
        assert!("passed".parse::<Verdict>().is_err());
    }
}
