//! Two-level prefix trie over rule sets: destination prefix first, then source
//! prefix. Each node holds the indices of the rules whose prefixes end there,
//! so a lookup walks at most 33 destination nodes and, at each of them, at most
//! 33 source nodes. The linear scan in [`RuleSet::first_match`] stays the
//! reference semantics.

use std::net::Ipv4Addr;

use crate::flow::{FlowKey, Prefix, RuleSet};

#[derive(Debug, Clone)]
struct Node<V> {
    children: [Option<u32>; 2],
    value: Option<V>,
}

impl<V> Node<V> {
    fn empty() -> Self {
        Self { children: [None, None], value: None }
    }
}

/// Binary trie keyed by IPv4 prefixes.
#[derive(Debug, Clone)]
pub struct PrefixTrie<V> {
    nodes: Vec<Node<V>>,
}

impl<V> Default for PrefixTrie<V> {
    fn default() -> Self {
        Self { nodes: vec![Node::empty()] }
    }
}

fn bit(addr: u32, depth: u8) -> usize {
    ((addr >> (31 - u32::from(depth))) & 1) as usize
}

impl<V: Default> PrefixTrie<V> {
    /// The value slot for `prefix`, created on demand.
    pub fn entry(&mut self, prefix: Prefix) -> &mut V {
        let mut at = 0usize;
        for depth in 0..prefix.len() {
            let b = bit(prefix.bits(), depth);
            at = match self.nodes[at].children[b] {
                Some(next) => next as usize,
                None => {
                    self.nodes.push(Node::empty());
                    let next = self.nodes.len() - 1;
                    self.nodes[at].children[b] = Some(next as u32);
                    next
                }
            };
        }
        self.nodes[at].value.get_or_insert_with(V::default)
    }
}

impl<V> PrefixTrie<V> {
    /// Visits the values of every stored prefix containing `addr`, shortest
    /// first.
    pub fn for_each_containing(&self, addr: Ipv4Addr, mut f: impl FnMut(&V)) {
        let addr = u32::from(addr);
        let mut at = 0usize;
        let mut depth = 0u8;
        loop {
            if let Some(v) = &self.nodes[at].value {
                f(v);
            }
            if depth == 32 {
                break;
            }
            match self.nodes[at].children[bit(addr, depth)] {
                Some(next) => at = next as usize,
                None => break,
            }
            depth += 1;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RuleTrie {
    by_dst: PrefixTrie<PrefixTrie<Vec<usize>>>,
}

impl RuleTrie {
    pub fn build(rules: &RuleSet) -> Self {
        let mut by_dst: PrefixTrie<PrefixTrie<Vec<usize>>> = PrefixTrie::default();
        for (i, rule) in rules.rules().iter().enumerate() {
            by_dst.entry(rule.spec.dst).entry(rule.spec.src).push(i);
        }
        Self { by_dst }
    }

    /// Index of the earliest rule in `rules` matching `key`.
    pub fn first_match(&self, rules: &RuleSet, key: &FlowKey) -> Option<usize> {
        let mut best: Option<usize> = None;
        self.by_dst.for_each_containing(key.dst_ip, |src_trie| {
            src_trie.for_each_containing(key.src_ip, |candidates| {
                // candidates are ascending, so the first full match is the
                // earliest at this node
                if let Some(&i) = candidates
                    .iter()
                    .take_while(|&&i| best.is_none_or(|b| i < b))
                    .find(|&&i| rules.rules()[i].spec.matches(key))
                {
                    best = Some(i);
                }
            });
        });
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Action, FilterRule, FlowSpec, RuleIndex, Verdict};
    use proptest::prelude::*;

    fn spec_strategy() -> impl Strategy<Value = FlowSpec> {
        // Small address space so random specs and keys overlap often.
        (0u32..16, 0u8..=32, 0u32..16, 0u8..=32, prop::option::of(0u16..3), prop::option::of(0u8..3)).prop_map(
            |(s, sl, d, dl, port, proto)| FlowSpec {
                src: Prefix::new(Ipv4Addr::from(s << 28 | s), sl.min(32)).unwrap(),
                dst: Prefix::new(Ipv4Addr::from(d << 28 | d), dl.min(32)).unwrap(),
                src_port: None,
                dst_port: port,
                protocol: proto,
            },
        )
    }

    fn key_strategy() -> impl Strategy<Value = FlowKey> {
        (0u32..16, 0u32..16, 0u16..3, 0u8..3).prop_map(|(s, d, port, proto)| {
            FlowKey::new(Ipv4Addr::from(s << 28 | s), Ipv4Addr::from(d << 28 | d), 9, port, proto)
        })
    }

    proptest! {
        #[test]
        fn trie_agrees_with_linear_scan(specs in prop::collection::vec(spec_strategy(), 0..20), keys in prop::collection::vec(key_strategy(), 1..20)) {
            let mut seen = std::collections::HashSet::new();
            let rules: Vec<FilterRule> = specs
                .into_iter()
                .filter(|s| seen.insert(s.to_bytes()))
                .map(|s| FilterRule::new(s, Action::Deterministic(Verdict::Drop)))
                .collect();
            let rs = RuleSet::new(rules).unwrap();
            let trie = RuleTrie::build(&rs);
            for k in keys {
                let expected = match rs.first_match(&k).index {
                    RuleIndex::Rule(i) => Some(i),
                    RuleIndex::Default => None,
                };
                prop_assert_eq!(trie.first_match(&rs, &k), expected);
            }
        }
    }

    #[test]
    fn host_and_default_routes() {
        let rs = RuleSet::parse("0.0.0.0/0 0.0.0.0/0 * * * DROP\n1.2.3.4/32 5.6.7.8/32 * * * ALLOW\n").unwrap();
        let trie = RuleTrie::build(&rs);
        let k = FlowKey::new("1.2.3.4".parse().unwrap(), "5.6.7.8".parse().unwrap(), 1, 2, 3);
        assert_eq!(trie.first_match(&rs, &k), Some(0));
        let empty = RuleSet::empty();
        assert_eq!(RuleTrie::build(&empty).first_match(&empty, &k), None);
    }
}
