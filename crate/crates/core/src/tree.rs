//! External recursion state: one node per decomposed subtask.
//!
//! Nodes are closed rather than deleted, so the finished tree is available for
//! statistics. Only open nodes are live, and by construction they always form
//! a single chain from the root to the current node.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A thought plus the ordered subtask list produced by one model call.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub think: String,
    pub subtasks: Vec<String>,
}

impl Plan {
    pub fn new<S: Into<String>>(think: impl Into<String>, subtasks: impl IntoIterator<Item = S>) -> Self {
        Self {
            think: think.into(),
            subtasks: subtasks.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.subtasks.is_empty()
    }

    pub fn head(&self) -> Option<&str> {
        self.subtasks.first().map(String::as_str)
    }

    pub fn remaining(&self) -> &[String] {
        self.subtasks.get(1..).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Open,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub id: NodeId,
    pub task_name: String,
    pub plan: Plan,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub status: NodeStatus,
    pub depth: usize,
}

impl TaskNode {
    pub fn is_open(&self) -> bool {
        self.status == NodeStatus::Open
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("task name must not be empty")]
    EmptyTaskName,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is closed")]
    Closed(NodeId),
    #[error("node {node} can only expand its head subtask {head:?}, not {requested:?}")]
    NotHead {
        node: NodeId,
        head: Option<String>,
        requested: String,
    },
}

/// Shape summary of a task tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeStats {
    pub max_depth: usize,
    pub node_count: usize,
    /// Nodes with at least one child.
    pub internal_nodes: usize,
    pub total_children: usize,
    /// `total_children / internal_nodes`, or 0 for a single node.
    pub avg_branching: f64,
}

impl TreeStats {
    fn from_parts(max_depth: usize, node_count: usize, internal: usize, children: usize) -> Self {
        let avg_branching = if internal == 0 {
            0.0
        } else {
            children as f64 / internal as f64
        };
        Self {
            max_depth,
            node_count,
            internal_nodes: internal,
            total_children: children,
            avg_branching,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTree {
    nodes: Vec<TaskNode>,
}

impl TaskTree {
    pub fn create_root(task_name: &str) -> Result<Self, TreeError> {
        if task_name.trim().is_empty() {
            return Err(TreeError::EmptyTaskName);
        }
        Ok(Self {
            nodes: vec![TaskNode {
                id: NodeId(0),
                task_name: task_name.to_string(),
                plan: Plan::default(),
                parent: None,
                children: Vec::new(),
                status: NodeStatus::Open,
                depth: 1,
            }],
        })
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn node(&self, id: NodeId) -> Result<&TaskNode, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn nodes(&self) -> &[TaskNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn open_node_mut(&mut self, id: NodeId) -> Result<&mut TaskNode, TreeError> {
        let node = self.nodes.get_mut(id.0).ok_or(TreeError::UnknownNode(id))?;
        if !node.is_open() {
            return Err(TreeError::Closed(id));
        }
        Ok(node)
    }

    /// Adds a child for the parent's head subtask.
    pub fn expand(&mut self, parent: NodeId, subtask_name: &str) -> Result<NodeId, TreeError> {
        let id = NodeId(self.nodes.len());
        let p = self.open_node_mut(parent)?;
        if p.plan.head() != Some(subtask_name) {
            return Err(TreeError::NotHead {
                node: parent,
                head: p.plan.head().map(str::to_string),
                requested: subtask_name.to_string(),
            });
        }
        p.children.push(id);
        let depth = p.depth + 1;
        self.nodes.push(TaskNode {
            id,
            task_name: subtask_name.to_string(),
            plan: Plan::default(),
            parent: Some(parent),
            children: Vec::new(),
            status: NodeStatus::Open,
            depth,
        });
        Ok(id)
    }

    /// Replaces the node's plan in place. An empty subtask list closes the
    /// node as done. Returns the plan that was replaced.
    pub fn refine(&mut self, id: NodeId, new_plan: Plan) -> Result<Plan, TreeError> {
        let node = self.open_node_mut(id)?;
        if new_plan.is_complete() {
            node.status = NodeStatus::Done;
        }
        Ok(std::mem::replace(&mut node.plan, new_plan))
    }

    pub fn close(&mut self, id: NodeId, status: NodeStatus) -> Result<(), TreeError> {
        let node = self.open_node_mut(id)?;
        node.status = status;
        Ok(())
    }

    /// Open nodes from the root down to the deepest one. Empty once the root
    /// has closed.
    pub fn active_path(&self) -> Vec<NodeId> {
        let mut path = Vec::new();
        let mut cur = &self.nodes[0];
        if !cur.is_open() {
            return path;
        }
        loop {
            path.push(cur.id);
            match cur.children.iter().rev().map(|c| &self.nodes[c.0]).find(|c| c.is_open()) {
                Some(child) => cur = child,
                None => return path,
            }
        }
    }

    /// Deepest open node, if the run is still going.
    pub fn current(&self) -> Option<NodeId> {
        self.active_path().last().copied()
    }

    pub fn open_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_open()).count()
    }

    /// Counts every node ever created, closed ones included.
    pub fn stats(&self) -> TreeStats {
        let max_depth = self.nodes.iter().map(|n| n.depth).max().unwrap_or(0);
        let internal = self.nodes.iter().filter(|n| !n.children.is_empty()).count();
        let children = self.nodes.iter().map(|n| n.children.len()).sum();
        TreeStats::from_parts(max_depth, self.nodes.len(), internal, children)
    }

    /// Ancestors of `id` from the root down, excluding `id` itself.
    pub fn ancestors(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.nodes.get(id.0).and_then(|n| n.parent);
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p.0].parent;
        }
        out.reverse();
        out
    }
}
