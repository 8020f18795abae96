//! Token sequences stored as a prefix tree.
//!
//! Sequences that share a prefix share its nodes, so a group of completions
//! for one prompt costs one pass over the prompt plus one node per distinct
//! continuation. Node indices are topologically ordered: parents come first.

use std::collections::HashMap;

use crate::attention::AttendList;

#[derive(Debug, Clone, Default)]
pub struct TokenForest {
    tokens: Vec<usize>,
    parents: Vec<Option<usize>>,
    depths: Vec<usize>,
    children: HashMap<(Option<usize>, usize), usize>,
}

impl TokenForest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, i: usize) -> usize {
        self.tokens[i]
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents[i]
    }

    pub fn depth(&self, i: usize) -> usize {
        self.depths[i]
    }

    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    /// The node for `token` under `parent`, created if absent.
    pub fn child(&mut self, parent: Option<usize>, token: usize) -> usize {
        if let Some(&i) = self.children.get(&(parent, token)) {
            return i;
        }
        let depth = parent.map_or(0, |p| self.depths[p] + 1);
        self.tokens.push(token);
        self.parents.push(parent);
        self.depths.push(depth);
        let i = self.tokens.len() - 1;
        self.children.insert((parent, token), i);
        i
    }

    /// Appends `tokens` below `parent`; returns the node of each token.
    pub fn extend(&mut self, mut parent: Option<usize>, tokens: &[usize]) -> Vec<usize> {
        tokens
            .iter()
            .map(|&t| {
                let i = self.child(parent, t);
                parent = Some(i);
                i
            })
            .collect()
    }

    /// Each node attends to its ancestors, root first, and itself.
    pub fn attend_list(&self) -> AttendList {
        let mut offsets = Vec::with_capacity(self.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        let mut chain = Vec::new();
        for i in 0..self.len() {
            chain.clear();
            let mut cur = Some(i);
            while let Some(c) = cur {
                chain.push(c);
                cur = self.parents[c];
            }
            indices.extend(chain.iter().rev());
            offsets.push(indices.len());
        }
        AttendList { offsets, indices }
    }
}
