use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::library::{ComponentLibrary, LlmOpDecl, PortType};
use super::plan::{validate_plan, Plan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowNode {
    pub id: String,
    /// Canonical component name (aliases resolved).
    pub component: String,
    /// Full parameter assignment, defaults filled in.
    pub params: BTreeMap<String, Value>,
    /// Present for operators registered during plan repair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm_op: Option<LlmOpDecl>,
}

impl WorkflowNode {
    pub fn param(&self, name: &str) -> Option<&Value> {
        self.params.get(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    /// Input port on `to`.
    pub port: String,
}

/// A compiled workflow: component instances with parameters, wired as a DAG.
/// Serializes as the workflow manifest `{"nodes", "edges", "sink"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowGraph {
    pub nodes: Vec<WorkflowNode>,
    pub edges: Vec<Edge>,
    pub sink: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("step {step}: cannot infer input {port:?} of type {ty:?}: no earlier producer")]
    Uninferable { step: usize, port: String, ty: PortType },
    #[error("plan is not valid: {0}")]
    InvalidPlan(String),
    #[error("cycle through node {0}")]
    Cycle(String),
    #[error("malformed graph: {0}")]
    Malformed(String),
}

pub fn node_id(step: usize) -> String {
    format!("n{step:03}")
}

/// Lower a linear plan to a DAG.
///
/// Every non-note input is wired to the most recent earlier step producing
/// its type, or to the first matching step named in `from`. A fan-in step
/// (Merge) takes every step named in `from`, or when none are named, every
/// earlier code-set producer whose output nothing has consumed yet.
pub fn compile_plan(plan: &Plan, lib: &ComponentLibrary) -> Result<WorkflowGraph, GraphError> {
    let mut nodes = Vec::with_capacity(plan.steps.len());
    let mut edges: Vec<Edge> = Vec::new();
    let mut outputs: Vec<PortType> = Vec::with_capacity(plan.steps.len());
    let mut consumed: BTreeSet<usize> = BTreeSet::new();
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();

    for (i, step) in plan.steps.iter().enumerate() {
        let sig = lib
            .get(&step.op)
            .ok_or_else(|| GraphError::InvalidPlan(format!("step {i}: unknown operation {:?}", step.op)))?;
        let named: Vec<usize> = step
            .from
            .iter()
            .map(|r| {
                ids.get(r.as_str())
                    .copied()
                    .ok_or_else(|| GraphError::InvalidPlan(format!("step {i}: unknown reference {r:?}")))
            })
            .collect::<Result<_, _>>()?;

        for port in &sig.inputs {
            if port.ty == PortType::Note {
                continue;
            }
            let sources: Vec<usize> = if sig.fan_in {
                if named.is_empty() {
                    (0..i).filter(|j| outputs[*j] == port.ty && !consumed.contains(j)).collect()
                } else {
                    named.iter().copied().filter(|j| outputs[*j] == port.ty).collect()
                }
            } else {
                let pool: Vec<usize> = if named.is_empty() { (0..i).collect() } else { named.clone() };
                if named.is_empty() {
                    pool.into_iter().rev().find(|j| outputs[*j] == port.ty).into_iter().collect()
                } else {
                    pool.into_iter().find(|j| outputs[*j] == port.ty).into_iter().collect()
                }
            };
            if sources.is_empty() {
                return Err(GraphError::Uninferable { step: i, port: port.name.clone(), ty: port.ty });
            }
            for j in sources {
                consumed.insert(j);
                edges.push(Edge { from: node_id(j), to: node_id(i), port: port.name.clone() });
            }
        }

        let mut params = BTreeMap::new();
        for spec in &sig.params {
            if let Some(v) = step.params.get(&spec.name).or(spec.default.as_ref()) {
                params.insert(spec.name.clone(), v.clone());
            }
        }
        nodes.push(WorkflowNode {
            id: node_id(i),
            component: sig.name.clone(),
            params,
            llm_op: lib.custom_op(&sig.name).cloned(),
        });
        outputs.push(sig.output);
        if let Some(id) = &step.id {
            ids.insert(id.as_str(), i);
        }
    }

    let sink = match outputs.last() {
        Some(PortType::Ranked) => node_id(outputs.len() - 1),
        Some(_) => return Err(GraphError::InvalidPlan("last step does not produce the ranked list".into())),
        None => return Err(GraphError::InvalidPlan("plan has no steps".into())),
    };
    Ok(WorkflowGraph { nodes, edges, sink })
}

/// Validate, then compile.
pub fn build_workflow(plan: &Plan, lib: &ComponentLibrary) -> Result<WorkflowGraph, GraphError> {
    let report = validate_plan(plan, lib);
    if !report.ok {
        return Err(GraphError::InvalidPlan(report.render()));
    }
    compile_plan(plan, lib)
}

impl WorkflowGraph {
    pub fn node(&self, id: &str) -> Option<&WorkflowNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Incoming edges of `id`, in insertion order.
    pub fn inputs_of<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.to == id)
    }

    /// Kahn's algorithm; ready nodes are taken in id order.
    pub fn topo_order(&self) -> Result<Vec<String>, GraphError> {
        let mut indegree: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.id.as_str(), 0)).collect();
        let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in &self.edges {
            let d = indegree
                .get_mut(e.to.as_str())
                .ok_or_else(|| GraphError::Malformed(format!("edge to unknown node {}", e.to)))?;
            *d += 1;
            if !indegree.contains_key(e.from.as_str()) {
                return Err(GraphError::Malformed(format!("edge from unknown node {}", e.from)));
            }
            succ.entry(e.from.as_str()).or_default().push(e.to.as_str());
        }
        let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = ready.pop_first() {
            order.push(n.to_string());
            for &m in succ.get(n).map(Vec::as_slice).unwrap_or(&[]) {
                let d = indegree.get_mut(m).expect("known node");
                *d -= 1;
                if *d == 0 {
                    ready.insert(m);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = indegree
                .iter()
                .find(|(_, d)| **d > 0)
                .map(|(k, _)| k.to_string())
                .unwrap_or_default();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Structural check for manifests that did not come from
    /// [`compile_plan`]: known components, typed and fully wired inputs,
    /// acyclic, ranked sink.
    pub fn check(&self, lib: &ComponentLibrary) -> Result<(), GraphError> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(GraphError::Malformed(format!("duplicate node id {}", n.id)));
            }
        }
        let out_ty = |id: &str| -> Result<PortType, GraphError> {
            let n = self.node(id).ok_or_else(|| GraphError::Malformed(format!("unknown node {id}")))?;
            if let Some(decl) = &n.llm_op {
                return Ok(decl.output);
            }
            lib.get(&n.component)
                .map(|s| s.output)
                .ok_or_else(|| GraphError::Malformed(format!("unknown component {}", n.component)))
        };
        for n in &self.nodes {
            let inputs = match &n.llm_op {
                Some(_) => vec![("codes".to_string(), PortType::CodeSet)],
                None => lib
                    .get(&n.component)
                    .ok_or_else(|| GraphError::Malformed(format!("unknown component {}", n.component)))?
                    .inputs
                    .iter()
                    .filter(|p| p.ty != PortType::Note)
                    .map(|p| (p.name.clone(), p.ty))
                    .collect(),
            };
            let fan_in = lib.get(&n.component).is_some_and(|s| s.fan_in);
            for (port, ty) in inputs {
                let incoming: Vec<&Edge> = self.inputs_of(&n.id).filter(|e| e.port == port).collect();
                if incoming.is_empty() || (!fan_in && incoming.len() != 1) {
                    return Err(GraphError::Malformed(format!(
                        "node {} port {port} has {} incoming edges",
                        n.id,
                        incoming.len()
                    )));
                }
                for e in incoming {
                    if out_ty(&e.from)? != ty {
                        return Err(GraphError::Malformed(format!("edge {}->{} carries the wrong type", e.from, e.to)));
                    }
                }
            }
        }
        if out_ty(&self.sink)? != PortType::Ranked {
            return Err(GraphError::Malformed("sink does not produce the ranked list".into()));
        }
        self.topo_order().map(|_| ())
    }

    pub fn to_manifest_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }
}
