use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrieError {
    #[error("no items")]
    Empty,
    #[error("item '{0}' has an empty token sequence")]
    EmptySequence(String),
    #[error("item '{0}' appears twice")]
    DuplicateItem(String),
    #[error("token sequences of '{0}' and '{1}' are identical or one is a prefix of the other")]
    PrefixConflict(String, String),
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<u32, usize>,
    item: Option<String>,
}

/// Token-id trie whose leaves name items. Node 0 is the root.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<Node>,
    n_items: usize,
    depth: usize,
}

impl PrefixTrie {
    pub fn build(entries: impl IntoIterator<Item = (String, Vec<u32>)>) -> Result<Self, TrieError> {
        let mut nodes = vec![Node::default()];
        let mut seen = std::collections::HashSet::new();
        let mut depth = 0;
        for (item, seq) in entries {
            if seq.is_empty() {
                return Err(TrieError::EmptySequence(item));
            }
            if !seen.insert(item.clone()) {
                return Err(TrieError::DuplicateItem(item));
            }
            depth = depth.max(seq.len());
            let mut at = 0;
            for &tok in &seq {
                if let Some(other) = &nodes[at].item {
                    return Err(TrieError::PrefixConflict(other.clone(), item));
                }
                at = match nodes[at].children.get(&tok) {
                    Some(&c) => c,
                    None => {
                        nodes.push(Node::default());
                        let c = nodes.len() - 1;
                        nodes[at].children.insert(tok, c);
                        c
                    }
                };
            }
            if let Some(other) = &nodes[at].item {
                return Err(TrieError::PrefixConflict(other.clone(), item));
            }
            if !nodes[at].children.is_empty() {
                let other = Self::any_item_below(&nodes, at);
                return Err(TrieError::PrefixConflict(item, other));
            }
            nodes[at].item = Some(item);
        }
        if seen.is_empty() {
            return Err(TrieError::Empty);
        }
        Ok(Self {
            nodes,
            n_items: seen.len(),
            depth,
        })
    }

    fn any_item_below(nodes: &[Node], mut at: usize) -> String {
        loop {
            if let Some(i) = &nodes[at].item {
                return i.clone();
            }
            at = *nodes[at].children.values().next().expect("inner nodes have children");
        }
    }

    pub fn len(&self) -> usize {
        self.n_items
    }

    pub fn is_empty(&self) -> bool {
        self.n_items == 0
    }

    /// Longest item sequence.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Allowed next tokens from `node`, in ascending id order.
    pub fn children(&self, node: usize) -> impl Iterator<Item = (u32, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &c)| (t, c))
    }

    /// The item spelled exactly by `tokens`.
    pub fn lookup(&self, tokens: &[u32]) -> Option<&str> {
        let mut at = 0;
        for t in tokens {
            at = *self.nodes[at].children.get(t)?;
        }
        self.nodes[at].item.as_deref()
    }

    /// Whether `tokens` is a prefix of some item sequence (or a whole one).
    pub fn accepts_prefix(&self, tokens: &[u32]) -> bool {
        let mut at = 0;
        for t in tokens {
            match self.nodes[at].children.get(t) {
                Some(&c) => at = c,
                None => return false,
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(name: &str, seq: &[u32]) -> (String, Vec<u32>) {
        (name.to_string(), seq.to_vec())
    }

    #[test]
    fn lookup_and_children() {
        let t = PrefixTrie::build(vec![e("a", &[5, 6, 1]), e("b", &[5, 7, 1]), e("c", &[8, 1])]).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.depth(), 3);
        assert_eq!(t.lookup(&[5, 7, 1]), Some("b"));
        assert_eq!(t.lookup(&[5, 7]), None);
        assert_eq!(t.children(0).map(|(tok, _)| tok).collect::<Vec<_>>(), vec![5, 8]);
        assert!(t.accepts_prefix(&[5]));
        assert!(!t.accepts_prefix(&[6]));
    }

    #[test]
    fn prefix_conflicts_are_rejected() {
        assert!(matches!(
            PrefixTrie::build(vec![e("a", &[5, 6]), e("b", &[5, 6, 7])]),
            Err(TrieError::PrefixConflict(..))
        ));
        assert!(matches!(
            PrefixTrie::build(vec![e("a", &[5, 6, 7]), e("b", &[5, 6])]),
            Err(TrieError::PrefixConflict(..))
        ));
        assert_eq!(
            PrefixTrie::build(vec![e("a", &[5]), e("a", &[6])]).unwrap_err(),
            TrieError::DuplicateItem("a".into())
        );
        assert_eq!(PrefixTrie::build(Vec::new()).unwrap_err(), TrieError::Empty);
    }
}
