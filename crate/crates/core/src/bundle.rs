//! JSON interchange format for tree + measures + processes bundles.
//!
//! Schema:
//!
//! ```text
//! {
//!   "depth": T,
//!   "children": [[...], ...],          // per level, child count per node
//!   "measures": [{"label": ..., "probs": [...]}, ...],
//!   "processes": [{"name": ..., "values": [[...], ...]}, ...]
//! }
//! ```
//!
//! `probs` is flat with one entry per non-root node in id order: the weight
//! of the edge into that node. `values` is nested per level, in node order
//! within each level; an infinite value serializes as `null` (JSON has no
//! infinity literal).

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tree::{MeasureFamily, OutcomeTree, TreeError, TreeProcess};

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("measure '{label}' has {got} probs, tree has {expected} non-root nodes")]
    ProbLength {
        label: String,
        got: usize,
        expected: usize,
    },
    #[error("process '{name}' level {level} has {got} values, expected {expected}")]
    ValueShape {
        name: String,
        level: usize,
        got: usize,
        expected: usize,
    },
    #[error("bundle has no measures")]
    NoMeasures,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeasureSpec {
    pub label: String,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProcessSpec {
    pub name: String,
    pub values: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Bundle {
    pub depth: usize,
    pub children: Vec<Vec<usize>>,
    pub measures: Vec<MeasureSpec>,
    pub processes: Vec<ProcessSpec>,
}

fn encode(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn decode(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::INFINITY)
}

impl Bundle {
    /// Captures a family and a set of named processes sharing its tree.
    pub fn from_parts(
        family: &MeasureFamily<f64>,
        processes: &[(String, &TreeProcess<f64>)],
    ) -> Self {
        let tree = family.tree();
        let children: Vec<Vec<usize>> = (0..tree.depth())
            .map(|l| tree.level(l).map(|v| tree.children(v).len()).collect())
            .collect();
        let measures = (0..family.len())
            .map(|k| MeasureSpec {
                label: family.label(k).to_string(),
                probs: (1..tree.node_count())
                    .map(|v| family.edge_prob(k, v))
                    .collect(),
            })
            .collect();
        let processes = processes
            .iter()
            .map(|(name, p)| ProcessSpec {
                name: name.clone(),
                values: (0..=tree.depth())
                    .map(|l| p.level_values(l).iter().copied().map(encode).collect())
                    .collect(),
            })
            .collect();
        Bundle {
            depth: tree.depth(),
            children,
            measures,
            processes,
        }
    }

    pub fn tree(&self) -> Result<Arc<OutcomeTree>, BundleError> {
        Ok(OutcomeTree::build(&self.children)?)
    }

    /// Rebuilds the measure family on a freshly built tree.
    pub fn family(&self) -> Result<MeasureFamily<f64>, BundleError> {
        let tree = self.tree()?;
        if self.measures.is_empty() {
            return Err(BundleError::NoMeasures);
        }
        let mut labels = Vec::new();
        let mut probs = Vec::new();
        for m in &self.measures {
            if m.probs.len() != tree.node_count() - 1 {
                return Err(BundleError::ProbLength {
                    label: m.label.clone(),
                    got: m.probs.len(),
                    expected: tree.node_count() - 1,
                });
            }
            let mut edge = vec![1.0f64];
            edge.extend_from_slice(&m.probs);
            labels.push(m.label.clone());
            probs.push(edge);
        }
        Ok(MeasureFamily::new(tree, labels, probs)?)
    }

    /// Rebuilds the named processes on the family's tree.
    pub fn processes_on(
        &self,
        tree: &Arc<OutcomeTree>,
    ) -> Result<Vec<(String, TreeProcess<f64>)>, BundleError> {
        let mut out = Vec::with_capacity(self.processes.len());
        for p in &self.processes {
            let mut values = Vec::with_capacity(tree.node_count());
            for (l, level) in p.values.iter().enumerate() {
                if l > tree.depth() || level.len() != tree.level_len(l) {
                    return Err(BundleError::ValueShape {
                        name: p.name.clone(),
                        level: l,
                        got: level.len(),
                        expected: if l > tree.depth() { 0 } else { tree.level_len(l) },
                    });
                }
                values.extend(level.iter().copied().map(decode));
            }
            let nonnegative = values.iter().all(|&v| v >= 0.0);
            out.push((
                p.name.clone(),
                TreeProcess::new(tree.clone(), values, nonnegative)?,
            ));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, BundleError> {
        Ok(serde_json::from_str(s)?)
    }
}
