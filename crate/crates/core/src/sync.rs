//! Edge-to-cloud continuum: a bounded store-and-forward buffer of attribute
//! changes with at-least-once, idempotent replay, a divergence report, and
//! an exact placement planner for pipeline components.
//!
//! Records dedupe on `(entityId, attribute, observedAt)`, the merge tie
//! key, so duplicate deliveries never change cloud state and the wire
//! protocol stays plain broker upserts.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::broker::{Notification, Registration};
use crate::json::Json;
use crate::model::{canonical_serialize, match_selector, Attribute, Entity, EntityId, Patch};
use crate::time::Timestamp;

/// One applied attribute change queued for forwarding.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeRecord {
    pub entity_id: EntityId,
    pub entity_type: String,
    pub attribute_name: String,
    pub attribute: Attribute,
    pub enqueue_seq: u64,
}

impl ChangeRecord {
    /// Dedupe identity.
    pub fn key(&self) -> (&EntityId, &str, Option<Timestamp>) {
        (&self.entity_id, &self.attribute_name, self.attribute.observed_at)
    }

    pub fn to_patch(&self) -> Patch {
        Patch::new(self.entity_id.clone(), self.entity_type.clone())
            .with_change(self.attribute_name.clone(), self.attribute.clone())
    }
}

/// FIFO buffer with DropOldest overflow; losses are counted, never silent.
#[derive(Debug)]
pub struct ForwardBuffer {
    queue: VecDeque<ChangeRecord>,
    capacity: usize,
    next_seq: u64,
    loss_count: u64,
}

impl ForwardBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        ForwardBuffer {
            queue: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            next_seq: 0,
            loss_count: 0,
        }
    }

    pub fn push(
        &mut self,
        entity_id: EntityId,
        entity_type: String,
        attribute_name: String,
        attribute: Attribute,
    ) {
        if self.queue.len() == self.capacity {
            self.queue.pop_front();
            self.loss_count += 1;
        }
        self.next_seq += 1;
        self.queue.push_back(ChangeRecord {
            entity_id,
            entity_type,
            attribute_name,
            attribute,
            enqueue_seq: self.next_seq,
        });
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn loss_count(&self) -> u64 {
        self.loss_count
    }

    pub fn front(&self) -> Option<&ChangeRecord> {
        self.queue.front()
    }

    fn pop_front(&mut self) -> Option<ChangeRecord> {
        self.queue.pop_front()
    }

    pub fn records(&self) -> impl Iterator<Item = &ChangeRecord> {
        self.queue.iter()
    }
}

/// Enqueue one record per applied change that matches any registration
/// selector. A change matched by several registrations is captured once.
pub fn capture(buffer: &mut ForwardBuffer, registrations: &[Registration], n: &Notification) -> usize {
    let mut captured = 0;
    for name in &n.changed {
        let mut single = BTreeSet::new();
        single.insert(name.clone());
        let matched = registrations
            .iter()
            .any(|r| match_selector(&r.selector, &n.entity, &single));
        if !matched {
            continue;
        }
        let Some(attr) = n.entity.attrs.get(name) else {
            continue;
        };
        buffer.push(
            n.entity.id.clone(),
            n.entity.entity_type.clone(),
            name.clone(),
            attr.clone(),
        );
        captured += 1;
    }
    captured
}

/// Transport to the cloud broker; `Ok` means the upsert was acknowledged.
pub trait CloudLink {
    fn send(&mut self, patch: &Patch) -> Result<(), LinkError>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkError(pub String);

impl fmt::Display for LinkError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "link error: {}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrainOutcome {
    pub sent: usize,
    pub remaining: usize,
}

/// Send records in FIFO order; a record leaves the buffer only after the
/// cloud acknowledged it, so a mid-batch failure loses nothing (duplicates
/// on retry are possible and harmless).
pub fn drain(buffer: &mut ForwardBuffer, link: &mut dyn CloudLink) -> DrainOutcome {
    let mut sent = 0;
    while let Some(record) = buffer.front() {
        let patch = record.to_patch();
        match link.send(&patch) {
            Ok(()) => {
                buffer.pop_front();
                sent += 1;
            }
            Err(_) => break,
        }
    }
    DrainOutcome {
        sent,
        remaining: buffer.len(),
    }
}

/// Per-entity comparison of two stores under one selector, by canonical
/// serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DivergenceReport {
    pub equal: Vec<EntityId>,
    pub differs: Vec<EntityId>,
    /// Present on the edge, absent in the cloud.
    pub missing: Vec<EntityId>,
    /// Present in the cloud only.
    pub only_cloud: Vec<EntityId>,
}

impl DivergenceReport {
    pub fn all_equal(&self) -> bool {
        self.differs.is_empty() && self.missing.is_empty() && self.only_cloud.is_empty()
    }

    pub fn to_json(&self) -> Json {
        let ids = |v: &Vec<EntityId>| Json::Arr(v.iter().map(|i| Json::str(i.as_str())).collect());
        Json::Obj(alloc::vec![
            ("equal".to_string(), ids(&self.equal)),
            ("differs".to_string(), ids(&self.differs)),
            ("missing".to_string(), ids(&self.missing)),
            ("onlyCloud".to_string(), ids(&self.only_cloud)),
        ])
    }
}

pub fn reconcile(edge: &[&Entity], cloud: &[&Entity]) -> DivergenceReport {
    let cloud_by_id: BTreeMap<&EntityId, &Entity> = cloud.iter().map(|e| (&e.id, *e)).collect();
    let edge_ids: BTreeSet<&EntityId> = edge.iter().map(|e| &e.id).collect();
    let mut report = DivergenceReport::default();
    for e in edge {
        match cloud_by_id.get(&e.id) {
            None => report.missing.push(e.id.clone()),
            Some(c) => {
                let same = match (canonical_serialize(e), canonical_serialize(c)) {
                    (Ok(a), Ok(b)) => a == b,
                    _ => false,
                };
                if same {
                    report.equal.push(e.id.clone());
                } else {
                    report.differs.push(e.id.clone());
                }
            }
        }
    }
    for c in cloud {
        if !edge_ids.contains(&c.id) {
            report.only_cloud.push(c.id.clone());
        }
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LatencyClass {
    Critical,
    Normal,
    Batch,
}

impl LatencyClass {
    pub fn parse(s: &str) -> Option<LatencyClass> {
        match s {
            "Critical" => Some(LatencyClass::Critical),
            "Normal" => Some(LatencyClass::Normal),
            "Batch" => Some(LatencyClass::Batch),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LatencyClass::Critical => "Critical",
            LatencyClass::Normal => "Normal",
            LatencyClass::Batch => "Batch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub name: String,
    pub cpu: u64,
    pub mem: u64,
    pub latency_class: LatencyClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeCapacity {
    pub cpu: u64,
    pub mem: u64,
}

/// Placement penalties; misplacing latency-critical work in the cloud is
/// an order of magnitude worse than keeping batch work at the edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PenaltyTable {
    pub critical_at_cloud: u64,
    pub normal_at_cloud: u64,
    pub batch_at_edge: u64,
}

impl Default for PenaltyTable {
    fn default() -> Self {
        PenaltyTable {
            critical_at_cloud: 100,
            normal_at_cloud: 10,
            batch_at_edge: 10,
        }
    }
}

impl PenaltyTable {
    pub fn cost(&self, class: LatencyClass, site: Site) -> u64 {
        match (class, site) {
            (LatencyClass::Critical, Site::Cloud) => self.critical_at_cloud,
            (LatencyClass::Normal, Site::Cloud) => self.normal_at_cloud,
            (LatencyClass::Batch, Site::Edge) => self.batch_at_edge,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Site {
    Edge,
    Cloud,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::Edge => "Edge",
            Site::Cloud => "Cloud",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacementProblem {
    pub components: Vec<Component>,
    pub edge: NodeCapacity,
    pub cloud: NodeCapacity,
    pub penalties: PenaltyTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacementPlan {
    /// Component order as given in the problem.
    pub assignment: Vec<(String, Site)>,
    pub total_cost: u64,
    pub feasible: bool,
}

impl PlacementPlan {
    pub fn to_json(&self) -> Json {
        let assignment: Vec<(String, Json)> = self
            .assignment
            .iter()
            .map(|(name, site)| (name.clone(), Json::str(site.as_str())))
            .collect();
        Json::Obj(alloc::vec![
            ("feasible".to_string(), Json::Bool(self.feasible)),
            ("totalCost".to_string(), Json::Num(self.total_cost as f64)),
            ("assignment".to_string(), Json::Obj(assignment)),
        ])
    }
}

pub const MAX_PLACEMENT_COMPONENTS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlacementError {
    TooManyComponents,
}

impl fmt::Display for PlacementError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("too-many-components")
    }
}

/// Exact search: depth-first branch and bound, Edge tried before Cloud at
/// every level, so the first optimum found is the lexicographically
/// smallest one (Edge < Cloud, component order as given).
pub fn plan_placement(p: &PlacementProblem) -> Result<PlacementPlan, PlacementError> {
    if p.components.len() > MAX_PLACEMENT_COMPONENTS {
        return Err(PlacementError::TooManyComponents);
    }

    struct Search<'a> {
        problem: &'a PlacementProblem,
        current: Vec<Site>,
        best: Option<(u64, Vec<Site>)>,
        /// min cost over both sites for components[i..]
        future_floor: Vec<u64>,
    }

    impl Search<'_> {
        fn go(&mut self, idx: usize, cost: u64, edge_used: (u64, u64), cloud_used: (u64, u64)) {
            if let Some((best_cost, _)) = &self.best {
                // equal-cost prune is safe: later solutions are lex-larger
                if cost + self.future_floor[idx] >= *best_cost {
                    return;
                }
            }
            if idx == self.problem.components.len() {
                self.best = Some((cost, self.current.clone()));
                return;
            }
            let comp = &self.problem.components[idx];
            for site in [Site::Edge, Site::Cloud] {
                let (cap, used) = match site {
                    Site::Edge => (self.problem.edge, edge_used),
                    Site::Cloud => (self.problem.cloud, cloud_used),
                };
                if used.0 + comp.cpu > cap.cpu || used.1 + comp.mem > cap.mem {
                    continue;
                }
                let next_cost = cost + self.problem.penalties.cost(comp.latency_class, site);
                self.current.push(site);
                match site {
                    Site::Edge => self.go(
                        idx + 1,
                        next_cost,
                        (used.0 + comp.cpu, used.1 + comp.mem),
                        cloud_used,
                    ),
                    Site::Cloud => self.go(
                        idx + 1,
                        next_cost,
                        edge_used,
                        (used.0 + comp.cpu, used.1 + comp.mem),
                    ),
                }
                self.current.pop();
            }
        }
    }

    let n = p.components.len();
    let mut future_floor = alloc::vec![0u64; n + 1];
    for i in (0..n).rev() {
        let c = &p.components[i];
        let floor = p
            .penalties
            .cost(c.latency_class, Site::Edge)
            .min(p.penalties.cost(c.latency_class, Site::Cloud));
        future_floor[i] = future_floor[i + 1] + floor;
    }

    let mut search = Search {
        problem: p,
        current: Vec::with_capacity(n),
        best: None,
        future_floor,
    };
    search.go(0, 0, (0, 0), (0, 0));

    Ok(match search.best {
        Some((total_cost, sites)) => PlacementPlan {
            assignment: p
                .components
                .iter()
                .map(|c| c.name.clone())
                .zip(sites)
                .collect(),
            total_cost,
            feasible: true,
        },
        None => PlacementPlan {
            assignment: Vec::new(),
            total_cost: 0,
            feasible: false,
        },
    })
}

/// Placement problem wire format:
/// `{"components":[{"name","cpu","mem","latencyClass"}],"edge":{"cpu","mem"},"cloud":{"cpu","mem"},"penalties"?:{...}}`
pub fn problem_from_json(v: &Json) -> Result<PlacementProblem, String> {
    let capacity = |k: &str| -> Result<NodeCapacity, String> {
        let node = v.get(k).ok_or(alloc::format!("{k} missing"))?;
        Ok(NodeCapacity {
            cpu: node
                .get("cpu")
                .and_then(Json::as_f64)
                .ok_or(alloc::format!("{k}.cpu missing"))? as u64,
            mem: node
                .get("mem")
                .and_then(Json::as_f64)
                .ok_or(alloc::format!("{k}.mem missing"))? as u64,
        })
    };
    let comps = v
        .get("components")
        .and_then(Json::as_arr)
        .ok_or("components missing")?;
    let mut components = Vec::new();
    for c in comps {
        components.push(Component {
            name: c
                .get("name")
                .and_then(Json::as_str)
                .ok_or("component name missing")?
                .to_string(),
            cpu: c.get("cpu").and_then(Json::as_f64).unwrap_or(0.0) as u64,
            mem: c.get("mem").and_then(Json::as_f64).unwrap_or(0.0) as u64,
            latency_class: c
                .get("latencyClass")
                .and_then(Json::as_str)
                .and_then(LatencyClass::parse)
                .ok_or("bad latencyClass")?,
        });
    }
    let mut penalties = PenaltyTable::default();
    if let Some(p) = v.get("penalties") {
        if let Some(x) = p.get("criticalAtCloud").and_then(Json::as_f64) {
            penalties.critical_at_cloud = x as u64;
        }
        if let Some(x) = p.get("normalAtCloud").and_then(Json::as_f64) {
            penalties.normal_at_cloud = x as u64;
        }
        if let Some(x) = p.get("batchAtEdge").and_then(Json::as_f64) {
            penalties.batch_at_edge = x as u64;
        }
    }
    Ok(PlacementProblem {
        components,
        edge: capacity("edge")?,
        cloud: capacity("cloud")?,
        penalties,
    })
}
