use crate::data::ItemId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
struct Node {
    /// Sorted by code.
    children: Vec<(u32, u32)>,
    item: Option<ItemId>,
}

/// Immutable prefix trie over the catalog's code tuples.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<Node>,
    depth: usize,
    items: usize,
}

pub type NodeId = u32;

impl PrefixTrie {
    pub const ROOT: NodeId = 0;

    /// Builds from `(item, codes)` pairs. All tuples must be distinct and of
    /// equal length.
    pub fn build<'a, I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (ItemId, &'a [u32])>,
    {
        let mut nodes = vec![Node::default()];
        let mut depth = None;
        let mut items = 0;
        for (item, codes) in entries {
            if codes.is_empty() {
                return Err(Error::Data(format!("item {item} has an empty code tuple")));
            }
            match depth {
                None => depth = Some(codes.len()),
                Some(d) if d != codes.len() => {
                    return Err(Error::Data(format!(
                        "item {item} has {} codes, expected {d}",
                        codes.len()
                    )))
                }
                _ => {}
            }
            let mut node = 0usize;
            for &c in codes {
                let next = match nodes[node].children.binary_search_by_key(&c, |&(k, _)| k) {
                    Ok(pos) => nodes[node].children[pos].1 as usize,
                    Err(pos) => {
                        let id = nodes.len();
                        nodes.push(Node::default());
                        nodes[node].children.insert(pos, (c, id as u32));
                        id
                    }
                };
                node = next;
            }
            if let Some(prev) = nodes[node].item {
                return Err(Error::Data(format!("items {prev} and {item} share code tuple {codes:?}")));
            }
            nodes[node].item = Some(item);
            items += 1;
        }
        let depth = depth.ok_or_else(|| Error::Data("cannot build a trie over an empty catalog".into()))?;
        Ok(Self { nodes, depth, items })
    }

    /// Code tuple length.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items == 0
    }

    /// `(code, child)` pairs in ascending code order.
    pub fn children(&self, node: NodeId) -> &[(u32, NodeId)] {
        &self.nodes[node as usize].children
    }

    pub fn child(&self, node: NodeId, code: u32) -> Option<NodeId> {
        let ch = &self.nodes[node as usize].children;
        ch.binary_search_by_key(&code, |&(k, _)| k).ok().map(|p| ch[p].1)
    }

    pub fn item(&self, node: NodeId) -> Option<ItemId> {
        self.nodes[node as usize].item
    }

    pub fn lookup(&self, codes: &[u32]) -> Option<ItemId> {
        if codes.len() != self.depth {
            return None;
        }
        let mut node = Self::ROOT;
        for &c in codes {
            node = self.child(node, c)?;
        }
        self.item(node)
    }

    /// Every root-to-leaf path with its item, in lexicographic code order.
    pub fn paths(&self) -> Vec<(Vec<u32>, ItemId)> {
        let mut out = Vec::with_capacity(self.items);
        let mut stack = vec![(Self::ROOT, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            if let Some(item) = self.item(node) {
                out.push((prefix.clone(), item));
            }
            for &(c, ch) in self.children(node).iter().rev() {
                let mut p = prefix.clone();
                p.push(c);
                stack.push((ch, p));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_children() {
        let codes = [vec![0, 1], vec![1, 1], vec![2, 0]];
        let trie = PrefixTrie::build(codes.iter().enumerate().map(|(i, c)| (i as ItemId, c.as_slice()))).unwrap();
        assert_eq!(trie.children(PrefixTrie::ROOT).len(), 3);
        assert_eq!(trie.len(), 3);
    }

    #[test]
    fn membership_exhaustive() {
        let c = 5u32;
        let codes: Vec<Vec<u32>> = (0..40u32).map(|i| vec![i % c, (i / c) % c, i / (c * c)]).collect();
        let trie = PrefixTrie::build(codes.iter().enumerate().map(|(i, c)| (i as ItemId, c.as_slice()))).unwrap();
        for (i, t) in codes.iter().enumerate() {
            assert_eq!(trie.lookup(t), Some(i as ItemId));
        }
        let mut accepted = 0;
        for a in 0..c {
            for b in 0..c {
                for d in 0..c {
                    let t = [a, b, d];
                    let expect = codes.iter().position(|x| x.as_slice() == t).map(|p| p as ItemId);
                    assert_eq!(trie.lookup(&t), expect);
                    accepted += expect.is_some() as usize;
                }
            }
        }
        assert_eq!(accepted, codes.len());
        let mut paths: Vec<_> = trie.paths().into_iter().map(|(p, _)| p).collect();
        let mut sorted = codes.clone();
        sorted.sort();
        paths.sort();
        assert_eq!(paths, sorted);
    }

    #[test]
    fn errors() {
        assert!(PrefixTrie::build(std::iter::empty()).is_err());
        let dup = [vec![1, 2], vec![1, 2]];
        assert!(PrefixTrie::build(dup.iter().enumerate().map(|(i, c)| (i as ItemId, c.as_slice()))).is_err());
        let ragged = [vec![1, 2], vec![1]];
        assert!(PrefixTrie::build(ragged.iter().enumerate().map(|(i, c)| (i as ItemId, c.as_slice()))).is_err());
    }
}
