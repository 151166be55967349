//! Single-parent hypernym forest with per-node depth.
//!
//! Edge files are UTF-8 lines `child<TAB>parent`; the literal parent `ROOT`
//! attaches a node to the implicit root (depth 0). A parent that never appears
//! as a child is treated as hanging directly off the root. Vocabulary words
//! with no edge at all are orphans: they have no depth and are never removed
//! by depth-based filtering.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{McaError, Result};

pub const ROOT: &str = "ROOT";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaxonomyTree {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    /// `None` for orphans.
    depth: Vec<Option<u32>>,
}

impl TaxonomyTree {
    /// Builds the forest from `(child, parent)` pairs. Every word in `words`
    /// gets a node; words not mentioned by any edge become orphans.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)], words: &[String]) -> Result<Self> {
        let mut tree = TaxonomyTree::default();
        let mut has_edge = Vec::new();
        let mut parent_name: Vec<Option<String>> = Vec::new();

        for w in words {
            tree.intern(w, &mut has_edge, &mut parent_name);
        }
        for (child, parent) in edges {
            let (child, parent) = (child.as_ref().trim(), parent.as_ref().trim());
            if child.is_empty() || parent.is_empty() {
                return Err(McaError::Taxonomy("empty name in edge".into()));
            }
            if child == ROOT {
                return Err(McaError::Taxonomy("ROOT cannot have a parent".into()));
            }
            let ci = tree.intern(child, &mut has_edge, &mut parent_name);
            if let Some(prev) = &parent_name[ci] {
                if prev != parent {
                    return Err(McaError::Taxonomy(format!(
                        "duplicate parent for {child:?}: {prev:?} and {parent:?}"
                    )));
                }
            }
            parent_name[ci] = Some(parent.to_string());
            has_edge[ci] = true;
            if parent != ROOT {
                let pi = tree.intern(parent, &mut has_edge, &mut parent_name);
                has_edge[pi] = true;
            }
        }

        tree.parent = parent_name
            .iter()
            .map(|p| match p.as_deref() {
                None | Some(ROOT) => None,
                Some(name) => tree.index.get(name).copied(),
            })
            .collect();
        tree.depth = tree.compute_depths(&has_edge)?;
        Ok(tree)
    }

    fn intern(&mut self, name: &str, has_edge: &mut Vec<bool>, parent_name: &mut Vec<Option<String>>) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        has_edge.push(false);
        parent_name.push(None);
        i
    }

    fn compute_depths(&self, has_edge: &[bool]) -> Result<Vec<Option<u32>>> {
        const UNVISITED: u8 = 0;
        const ACTIVE: u8 = 1;
        const DONE: u8 = 2;
        let n = self.names.len();
        let mut state = vec![UNVISITED; n];
        let mut depth: Vec<Option<u32>> = vec![None; n];
        for start in 0..n {
            if !has_edge[start] || state[start] == DONE {
                continue;
            }
            let mut path = Vec::new();
            let mut cur = start;
            let base = loop {
                match state[cur] {
                    DONE => break depth[cur].expect("finished node has depth"),
                    ACTIVE => {
                        return Err(McaError::Taxonomy(format!("cycle through {:?}", self.names[cur])));
                    }
                    _ => {}
                }
                state[cur] = ACTIVE;
                path.push(cur);
                match self.parent[cur] {
                    Some(p) => cur = p,
                    None => break 0,
                }
            };
            for (offset, &node) in path.iter().rev().enumerate() {
                depth[node] = Some(base + offset as u32 + 1);
                state[node] = DONE;
            }
        }
        Ok(depth)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Depth below the root (root children are 1). `None` for orphans and
    /// unknown words.
    pub fn depth(&self, word: &str) -> Option<u32> {
        self.index.get(word).and_then(|&i| self.depth[i])
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn is_orphan(&self, word: &str) -> bool {
        self.depth(word).is_none()
    }

    pub fn parent(&self, word: &str) -> Option<&str> {
        let i = *self.index.get(word)?;
        self.parent[i].map(|p| self.names[p].as_str())
    }

    pub fn max_depth(&self) -> u32 {
        self.depth.iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Parses `child<TAB>parent` lines. Blank lines and `#` comments are skipped.
pub fn parse_taxonomy(text: &str, words: &[String]) -> Result<TaxonomyTree> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (child, parent) = line
            .split_once('\t')
            .ok_or_else(|| McaError::Taxonomy(format!("line {}: expected child<TAB>parent", lineno + 1)))?;
        edges.push((child.to_string(), parent.to_string()));
    }
    TaxonomyTree::from_edges(&edges, words)
}

pub fn load_taxonomy(path: impl AsRef<Path>, words: &[String]) -> Result<TaxonomyTree> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| McaError::io(path, e))?;
    parse_taxonomy(&text, words)
}

/// Serializes edges in node order, one `child<TAB>parent` per line.
pub fn format_taxonomy(tree: &TaxonomyTree) -> String {
    let mut out = String::new();
    for (i, name) in tree.names.iter().enumerate() {
        if tree.depth[i].is_none() {
            continue;
        }
        let parent = tree.parent[i].map_or(ROOT, |p| tree.names[p].as_str());
        out.push_str(name);
        out.push('\t');
        out.push_str(parent);
        out.push('\n');
    }
    out
}
