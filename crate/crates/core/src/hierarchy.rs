//! Class hierarchies: reachable-class counts, subtree splits and manual
//! assignment of the classes no subtree covers.
//!
//! DAG files hold one node per line, tab separated:
//!
//! ```text
//! node<TAB>parent[,parent...]<TAB>[class_id][<TAB>display name]
//! ```
//!
//! Roots leave the parent field empty; `#` starts a comment line.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use fixedbitset::FixedBitSet;
use thiserror::Error;

use crate::datasplit::{ClassId, ClassSplit, Side, SplitMethod};

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("cycle through {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("roots must differ (both `{0}`)")]
    SameRoot(String),
    #[error("subtrees overlap on {} classes, e.g. {:?}", .count, .witnesses)]
    Overlap { count: usize, witnesses: Vec<ClassId> },
    #[error("manual map {0}")]
    Manual(String),
}

#[derive(Clone, Debug)]
pub struct ClassDag {
    ids: Vec<String>,
    names: Vec<String>,
    index: HashMap<String, usize>,
    children: Vec<Vec<usize>>,
    class_of: Vec<Option<ClassId>>,
    /// Sorted class ids; bit `i` of a reach set stands for `classes[i]`.
    classes: Vec<ClassId>,
}

impl ClassDag {
    pub fn parse(text: &str) -> Result<Self, HierarchyError> {
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |reason: String| HierarchyError::Parse { line: i + 1, reason };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() > 4 {
                return Err(err(format!("expected at most 4 tab-separated fields, got {}", fields.len())));
            }
            let id = fields[0].trim();
            if id.is_empty() {
                return Err(err("empty node id".into()));
            }
            let parents: Vec<&str> = fields
                .get(1)
                .map(|p| p.split(',').map(str::trim).filter(|p| !p.is_empty()).collect())
                .unwrap_or_default();
            let class = match fields.get(2).map(|c| c.trim()).filter(|c| !c.is_empty()) {
                Some(c) => Some(c.parse::<ClassId>().map_err(|_| err(format!("bad class id `{c}`")))?),
                None => None,
            };
            let name = fields.get(3).map(|n| n.trim()).filter(|n| !n.is_empty()).unwrap_or(id);
            rows.push((i + 1, id, parents, class, name));
        }
        let edges: Vec<(&str, &str)> = rows
            .iter()
            .flat_map(|(_, id, parents, _, _)| parents.iter().map(move |p| (*p, *id)))
            .collect();
        let mut dag = ClassDag::default_empty();
        for &(line, id, _, class, name) in &rows {
            if dag.index.contains_key(id) {
                return Err(HierarchyError::Parse {
                    line,
                    reason: format!("node `{id}` defined twice"),
                });
            }
            dag.push_node(id, name, class);
        }
        for (parent, child) in edges {
            dag.add_edge(parent, child)?;
        }
        dag.finish()?;
        Ok(dag)
    }

    /// Builds a DAG from node ids, `(parent, child)` edges and `(node, class)`
    /// pairs.
    pub fn from_edges(nodes: &[&str], edges: &[(&str, &str)], classes: &[(&str, ClassId)]) -> Result<Self, HierarchyError> {
        let mut dag = ClassDag::default_empty();
        for &id in nodes {
            if !dag.index.contains_key(id) {
                dag.push_node(id, id, None);
            }
        }
        for &(node, class) in classes {
            let i = dag.node(node)?;
            dag.class_of[i] = Some(class);
        }
        for &(p, c) in edges {
            dag.add_edge(p, c)?;
        }
        dag.finish()?;
        Ok(dag)
    }

    fn default_empty() -> Self {
        ClassDag {
            ids: Vec::new(),
            names: Vec::new(),
            index: HashMap::new(),
            children: Vec::new(),
            class_of: Vec::new(),
            classes: Vec::new(),
        }
    }

    fn push_node(&mut self, id: &str, name: &str, class: Option<ClassId>) {
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.names.push(name.to_string());
        self.children.push(Vec::new());
        self.class_of.push(class);
    }

    fn add_edge(&mut self, parent: &str, child: &str) -> Result<(), HierarchyError> {
        let p = self.node(parent)?;
        let c = self.node(child)?;
        if !self.children[p].contains(&c) {
            self.children[p].push(c);
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), HierarchyError> {
        let mut seen = BTreeMap::new();
        for (i, class) in self.class_of.iter().enumerate() {
            if let Some(c) = class {
                if let Some(prev) = seen.insert(*c, i) {
                    return Err(HierarchyError::Parse {
                        line: 0,
                        reason: format!("class {c} mapped by both `{}` and `{}`", self.ids[prev], self.ids[i]),
                    });
                }
            }
        }
        self.classes = seen.into_keys().collect();
        Ok(())
    }

    fn node(&self, id: &str) -> Result<usize, HierarchyError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| HierarchyError::UnknownNode(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn display_name(&self, id: &str) -> Option<&str> {
        self.index.get(id).map(|&i| self.names[i].as_str())
    }

    pub fn class_of(&self, id: &str) -> Option<ClassId> {
        self.index.get(id).and_then(|&i| self.class_of[i])
    }

    pub fn children(&self, id: &str) -> Result<Vec<&str>, HierarchyError> {
        Ok(self.children[self.node(id)?].iter().map(|&c| self.ids[c].as_str()).collect())
    }

    /// All class ids in the leaf map, ascending.
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    /// Nodes in an order where every parent precedes its children.
    fn topological_order(&self) -> Result<Vec<usize>, HierarchyError> {
        let n = self.ids.len();
        let mut indegree = vec![0usize; n];
        for kids in &self.children {
            for &c in kids {
                indegree[c] += 1;
            }
        }
        let mut stack: Vec<usize> = (0..n).rev().filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = stack.pop() {
            order.push(v);
            for &c in self.children[v].iter().rev() {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    stack.push(c);
                }
            }
        }
        if order.len() < n {
            return Err(HierarchyError::Cycle(self.cycle_witness(&indegree)));
        }
        Ok(order)
    }

    /// Every node Kahn's algorithm could not remove still has an unremoved
    /// parent, so walking parents from any of them must revisit a node.
    fn cycle_witness(&self, indegree: &[usize]) -> Vec<String> {
        let start = indegree.iter().position(|&d| d > 0).expect("cycle exists");
        let mut path = vec![start];
        let mut pos = HashMap::from([(start, 0usize)]);
        let mut v = start;
        loop {
            v = (0..self.ids.len())
                .find(|&p| indegree[p] > 0 && self.children[p].contains(&v))
                .expect("unremoved node has an unremoved parent");
            if let Some(&at) = pos.get(&v) {
                let mut cycle: Vec<String> = path[at..].iter().rev().map(|&i| self.ids[i].clone()).collect();
                cycle.insert(0, self.ids[v].clone());
                return cycle;
            }
            pos.insert(v, path.len());
            path.push(v);
        }
    }

    /// Reach set of every node, memoized bottom-up.
    fn reach_sets(&self) -> Result<Vec<FixedBitSet>, HierarchyError> {
        let order = self.topological_order()?;
        let bit: HashMap<ClassId, usize> = self.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut sets = vec![FixedBitSet::with_capacity(self.classes.len()); self.ids.len()];
        for &v in order.iter().rev() {
            let mut set = FixedBitSet::with_capacity(self.classes.len());
            if let Some(c) = self.class_of[v] {
                set.insert(bit[&c]);
            }
            for &c in &self.children[v] {
                set.union_with(&sets[c]);
            }
            sets[v] = set;
        }
        Ok(sets)
    }

    fn reachable_classes(&self, sets: &[FixedBitSet], node: usize) -> Vec<ClassId> {
        sets[node].ones().map(|i| self.classes[i]).collect()
    }
}

/// Number of distinct classes reachable from each node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountAnnotation {
    pub counts: BTreeMap<String, usize>,
}

impl CountAnnotation {
    pub fn get(&self, node: &str) -> Option<usize> {
        self.counts.get(node).copied()
    }
}

pub fn annotate_counts(dag: &ClassDag) -> Result<CountAnnotation, HierarchyError> {
    let sets = dag.reach_sets()?;
    Ok(CountAnnotation {
        counts: dag
            .ids
            .iter()
            .zip(&sets)
            .map(|(id, s)| (id.clone(), s.count_ones(..)))
            .collect(),
    })
}

/// The `k` largest counts, descending; equal counts ordered by node id.
pub fn top_nodes(annotation: &CountAnnotation, k: usize) -> Vec<(String, usize)> {
    let mut all: Vec<(String, usize)> = annotation.counts.iter().map(|(n, &c)| (n.clone(), c)).collect();
    all.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticSplit {
    pub a: Vec<ClassId>,
    pub b: Vec<ClassId>,
    pub leftovers: Vec<ClassId>,
}

/// Classes under each root, and those under neither. Overlapping subtrees are
/// an error.
pub fn semantic_split(dag: &ClassDag, root_a: &str, root_b: &str) -> Result<SemanticSplit, HierarchyError> {
    if root_a == root_b {
        return Err(HierarchyError::SameRoot(root_a.to_string()));
    }
    let (ia, ib) = (dag.node(root_a)?, dag.node(root_b)?);
    let sets = dag.reach_sets()?;
    let mut overlap = sets[ia].clone();
    overlap.intersect_with(&sets[ib]);
    if overlap.count_ones(..) > 0 {
        return Err(HierarchyError::Overlap {
            count: overlap.count_ones(..),
            witnesses: overlap.ones().take(5).map(|i| dag.classes[i]).collect(),
        });
    }
    let mut either = sets[ia].clone();
    either.union_with(&sets[ib]);
    let leftovers = (0..dag.classes.len())
        .filter(|&i| !either.contains(i))
        .map(|i| dag.classes[i])
        .collect();
    Ok(SemanticSplit {
        a: dag.reachable_classes(&sets, ia),
        b: dag.reachable_classes(&sets, ib),
        leftovers,
    })
}

/// Final partition: subtree classes plus the manual decisions, which must
/// cover exactly the leftovers.
pub fn assign_leftovers(
    split: &SemanticSplit,
    manual: &BTreeMap<ClassId, Side>,
) -> Result<ClassSplit, HierarchyError> {
    let leftovers: BTreeSet<ClassId> = split.leftovers.iter().copied().collect();
    let given: BTreeSet<ClassId> = manual.keys().copied().collect();
    let uncovered: Vec<ClassId> = leftovers.difference(&given).copied().collect();
    let extra: Vec<ClassId> = given.difference(&leftovers).copied().collect();
    if !uncovered.is_empty() || !extra.is_empty() {
        return Err(HierarchyError::Manual(format!(
            "does not match the leftovers: {} uncovered {:?}, {} extraneous {:?}",
            uncovered.len(),
            &uncovered[..uncovered.len().min(5)],
            extra.len(),
            &extra[..extra.len().min(5)]
        )));
    }
    let mut assignment: BTreeMap<ClassId, Side> = manual.clone();
    assignment.extend(split.a.iter().map(|&c| (c, Side::A)));
    assignment.extend(split.b.iter().map(|&c| (c, Side::B)));
    Ok(ClassSplit {
        assignment,
        method: SplitMethod::Semantic,
        seed: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diamond() -> ClassDag {
        ClassDag::parse(
            "# a diamond over three classes\n\
             root\t\t\n\
             left\troot\n\
             right\troot\n\
             x\tleft,right\t0\n\
             y\tleft\t1\tWhy\n\
             z\tright\t2\n",
        )
        .unwrap()
    }

    #[test]
    fn counts_use_set_union() {
        let ann = annotate_counts(&diamond()).unwrap();
        assert_eq!(ann.get("root"), Some(3));
        assert_eq!(ann.get("left"), Some(2));
        assert_eq!(ann.get("x"), Some(1));
        assert_eq!(diamond().display_name("y"), Some("Why"));
    }

    #[test]
    fn cycle_is_reported_with_witness() {
        let err = ClassDag::parse("e\tc\t2\na\tc\nb\ta\nc\tb\t0\nd\t\t1\n")
            .and_then(|d| annotate_counts(&d))
            .unwrap_err();
        match err {
            HierarchyError::Cycle(path) => {
                assert_eq!(path.first(), path.last());
                assert_eq!(path.len(), 4);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn parse_errors() {
        assert!(ClassDag::parse("a\t\t0\na\t\t1\n").is_err());
        assert!(ClassDag::parse("a\tmissing\t0\n").is_err());
        assert!(ClassDag::parse("a\t\t0\nb\t\t0\n").is_err());
        assert!(ClassDag::parse("a\t\tx\n").is_err());
    }

    #[test]
    fn split_and_assign() {
        let dag = diamond();
        assert!(matches!(
            semantic_split(&dag, "left", "right"),
            Err(HierarchyError::Overlap { count: 1, .. })
        ));
        assert!(matches!(semantic_split(&dag, "x", "x"), Err(HierarchyError::SameRoot(_))));
        let s = semantic_split(&dag, "y", "z").unwrap();
        assert_eq!((s.a.clone(), s.b.clone(), s.leftovers.clone()), (vec![1], vec![2], vec![0]));
        assert!(assign_leftovers(&s, &BTreeMap::new()).is_err());
        assert!(assign_leftovers(&s, &BTreeMap::from([(0, Side::A), (1, Side::B)])).is_err());
        let final_split = assign_leftovers(&s, &BTreeMap::from([(0, Side::B)])).unwrap();
        assert_eq!(final_split.sizes(), (1, 2));
        assert_eq!(final_split.method, SplitMethod::Semantic);
    }

    #[test]
    fn top_nodes_orders_ties_by_id() {
        let ann = annotate_counts(&diamond()).unwrap();
        let top = top_nodes(&ann, 3);
        assert_eq!(top[0], ("root".to_string(), 3));
        assert_eq!(top[1], ("left".to_string(), 2));
        assert_eq!(top[2], ("right".to_string(), 2));
        assert_eq!(top_nodes(&ann, 100).len(), 6);
    }
}
