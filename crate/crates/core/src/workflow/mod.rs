//! Plans, the component library, and compiled workflow graphs.
//!
//! A [`Plan`] is the designer's ordered step list. [`validate_plan`] checks
//! it against a [`ComponentLibrary`]; [`compile_plan`] lowers it to a
//! [`WorkflowGraph`] by type-directed wiring.

mod graph;
mod library;
mod plan;

pub use graph::{build_workflow, compile_plan, node_id, Edge, GraphError, WorkflowGraph, WorkflowNode};
pub use library::{
    ComponentCategory, ComponentLibrary, ComponentSignature, LibraryError, LlmOpDecl, ParamKind,
    ParamProblem, ParamSpec, PortSpec, PortType, HIER_RULES, SECTIONS,
};
pub use plan::{validate_plan, Plan, PlanStep, ValidationReport, Violation, ViolationKind};
