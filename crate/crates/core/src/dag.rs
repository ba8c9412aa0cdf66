//! Cycle detection and topological ordering over positive-probability edges.
//!
//! Terminal self-loops are not edges. Any other self-loop is a cycle.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::mdp::TabularMdp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagDecomposition {
    pub is_dag: bool,
    /// Non-terminal states first, terminals last. Empty when not a DAG.
    pub topological_order: Vec<usize>,
    /// Longest path length in edges. Zero when not a DAG.
    pub depth: usize,
}

fn adjacency(mdp: &TabularMdp) -> Vec<Vec<usize>> {
    (0..mdp.state_count())
        .map(|s| {
            if mdp.is_terminal(s) {
                return Vec::new();
            }
            let mut next: Vec<usize> =
                (0..mdp.action_count()).flat_map(|a| mdp.successors(s, a).iter().map(|&(n, _)| n)).collect();
            next.sort_unstable();
            next.dedup();
            next
        })
        .collect()
}

pub fn dag_decompose(mdp: &TabularMdp) -> DagDecomposition {
    let n = mdp.state_count();
    let adj = adjacency(mdp);
    let mut indegree = vec![0usize; n];
    for edges in &adj {
        for &t in edges {
            indegree[t] += 1;
        }
    }
    // Kahn's algorithm; ties go to non-terminals, then lower indices, which
    // keeps terminals at the end of the order.
    let key = |s: usize| Reverse((mdp.is_terminal(s), s));
    let mut ready: BinaryHeap<_> = (0..n).filter(|&s| indegree[s] == 0).map(key).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, s))) = ready.pop() {
        order.push(s);
        for &t in &adj[s] {
            indegree[t] -= 1;
            if indegree[t] == 0 {
                ready.push(key(t));
            }
        }
    }
    if order.len() != n {
        return DagDecomposition { is_dag: false, topological_order: Vec::new(), depth: 0 };
    }
    let mut longest = vec![0usize; n];
    for &s in order.iter().rev() {
        longest[s] = adj[s].iter().map(|&t| longest[t] + 1).max().unwrap_or(0);
    }
    DagDecomposition { is_dag: true, topological_order: order, depth: longest.into_iter().max().unwrap_or(0) }
}

/// True if a cycle is reachable from the support of the start distribution.
pub(crate) fn has_reachable_cycle(mdp: &TabularMdp) -> bool {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let adj = adjacency(mdp);
    let mut mark = vec![Mark::New; mdp.state_count()];
    let roots = mdp.start_distribution().iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(s, _)| s);
    for root in roots {
        if mark[root] != Mark::New {
            continue;
        }
        // Iterative DFS with an explicit edge cursor per frame.
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Active;
        while let Some(frame) = stack.last_mut() {
            let (s, cursor) = *frame;
            if cursor < adj[s].len() {
                frame.1 += 1;
                let t = adj[s][cursor];
                match mark[t] {
                    Mark::Active => return true,
                    Mark::New => {
                        mark[t] = Mark::Active;
                        stack.push((t, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[s] = Mark::Done;
                stack.pop();
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::MdpBuilder;

    #[test]
    fn order_respects_edges_and_puts_terminals_last() {
        // 0 -> {2, 1}, 1 -> 3, 2 -> 3, with terminal 3 and an extra terminal 4 reached from 2.
        let mut b = MdpBuilder::new(5, 1, 1.0);
        b.transition(0, 0, &[(2, 0.5), (1, 0.5)]);
        b.transition(1, 0, &[(3, 1.0)]);
        b.transition(2, 0, &[(3, 0.5), (4, 0.5)]);
        b.terminal(3).terminal(4);
        let mdp = b.build().unwrap();
        let dag = dag_decompose(&mdp);
        assert!(dag.is_dag);
        assert_eq!(dag.topological_order, vec![0, 1, 2, 3, 4]);
        assert_eq!(dag.depth, 2);
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let mut b = MdpBuilder::new(2, 1, 0.5);
        b.transition(0, 0, &[(0, 0.5), (1, 0.5)]);
        b.terminal(1);
        let mdp = b.build().unwrap();
        assert!(!dag_decompose(&mdp).is_dag);
        assert!(has_reachable_cycle(&mdp));
    }

    #[test]
    fn unreachable_cycle_does_not_block_gamma_one() {
        // State 1 and 2 cycle, but the start state 0 goes straight to terminal 3.
        let mut b = MdpBuilder::new(4, 1, 1.0);
        b.transition(0, 0, &[(3, 1.0)]);
        b.transition(1, 0, &[(2, 1.0)]);
        b.transition(2, 0, &[(1, 1.0)]);
        b.terminal(3);
        let mdp = b.build().unwrap();
        assert!(!dag_decompose(&mdp).is_dag);
    }
}
