//! Class hierarchy handling: parsing the edge-list taxonomy format, hyponym /
//! hypernym closures, and the one-hot semantic correlation encoding.
//!
//! The taxonomy is a DAG of `parent>child` (hypernym>hyponym) edges. A
//! [`ClassPartition`] splits classes into an ordered coarse list (full box
//! supervision) and an ordered fine list (image labels only); the orderings
//! define matrix row/column indices everywhere downstream.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use crate::correlation::{CorrelationKind, CorrelationMatrix};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub type ClassId = String;

/// Directed acyclic hypernym→hyponym graph.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TaxonomyGraph {
    nodes: BTreeSet<ClassId>,
    children: BTreeMap<ClassId, BTreeSet<ClassId>>,
    parents: BTreeMap<ClassId, BTreeSet<ClassId>>,
    edge_count: usize,
}

impl TaxonomyGraph {
    pub fn from_edges<I, S>(edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<ClassId>,
    {
        let mut g = TaxonomyGraph::default();
        for (line, (p, c)) in edges.into_iter().enumerate() {
            g.insert_edge(p.into(), c.into(), line + 1)?;
        }
        g.check_acyclic()?;
        Ok(g)
    }

    fn insert_edge(&mut self, parent: ClassId, child: ClassId, line: usize) -> Result<()> {
        if parent == child {
            return Err(Error::parse(line, format!("self-loop on `{parent}`")));
        }
        if !self
            .children
            .entry(parent.clone())
            .or_default()
            .insert(child.clone())
        {
            return Err(Error::parse(
                line,
                format!("duplicate edge `{parent}>{child}`"),
            ));
        }
        self.parents
            .entry(child.clone())
            .or_default()
            .insert(parent.clone());
        self.nodes.insert(parent);
        self.nodes.insert(child);
        self.edge_count += 1;
        Ok(())
    }

    /// Kahn topological check; reports one node on a cycle if any.
    fn check_acyclic(&self) -> Result<()> {
        let mut indegree: BTreeMap<&ClassId, usize> = self
            .nodes
            .iter()
            .map(|n| (n, self.parents.get(n).map_or(0, BTreeSet::len)))
            .collect();
        let mut queue: VecDeque<&ClassId> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&n, _)| n)
            .collect();
        let mut visited = 0usize;
        while let Some(n) = queue.pop_front() {
            visited += 1;
            if let Some(kids) = self.children.get(n) {
                for k in kids {
                    let d = indegree.get_mut(k).expect("edge endpoint is a node");
                    *d -= 1;
                    if *d == 0 {
                        queue.push_back(k);
                    }
                }
            }
        }
        if visited != self.nodes.len() {
            let on_cycle = indegree
                .iter()
                .filter(|(_, &d)| d > 0)
                .map(|(&n, _)| n.clone())
                .next()
                .unwrap_or_default();
            return Err(Error::Cycle(on_cycle));
        }
        Ok(())
    }

    pub fn contains(&self, node: &str) -> bool {
        self.nodes.contains(node)
    }

    /// Nodes in lexicographic order.
    pub fn nodes(&self) -> impl Iterator<Item = &ClassId> {
        self.nodes.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn children_of(&self, node: &str) -> impl Iterator<Item = &ClassId> {
        self.children.get(node).into_iter().flatten()
    }

    pub fn parents_of(&self, node: &str) -> impl Iterator<Item = &ClassId> {
        self.parents.get(node).into_iter().flatten()
    }

    /// Transitive descendants of `node`, excluding `node` itself.
    pub fn hyponym_closure(&self, node: &str) -> Result<BTreeSet<ClassId>> {
        self.closure(node, &self.children)
    }

    /// Transitive ancestors of `node`, excluding `node` itself.
    pub fn hypernym_closure(&self, node: &str) -> Result<BTreeSet<ClassId>> {
        self.closure(node, &self.parents)
    }

    fn closure(
        &self,
        node: &str,
        adjacency: &BTreeMap<ClassId, BTreeSet<ClassId>>,
    ) -> Result<BTreeSet<ClassId>> {
        if !self.contains(node) {
            return Err(Error::UnknownClass(node.to_string()));
        }
        let mut out = BTreeSet::new();
        let mut stack: Vec<&ClassId> = adjacency.get(node).into_iter().flatten().collect();
        while let Some(n) = stack.pop() {
            if out.insert(n.clone()) {
                stack.extend(adjacency.get(n).into_iter().flatten());
            }
        }
        Ok(out)
    }

    /// Serializes to the edge-list format; edges sorted by (parent, child).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (p, kids) in &self.children {
            for c in kids {
                let _ = writeln!(out, "{p}>{c}");
            }
        }
        out
    }
}

fn check_id(id: &str, line: usize) -> Result<()> {
    if id.is_empty() {
        return Err(Error::parse(line, "empty class id"));
    }
    if id.chars().any(char::is_whitespace) {
        return Err(Error::parse(line, format!("class id `{id}` contains whitespace")));
    }
    Ok(())
}

/// Parses the taxonomy edge-list format: one `parent>child` per line, `#`
/// comment lines and blank lines ignored.
pub fn parse_taxonomy(text: &str) -> Result<TaxonomyGraph> {
    let mut g = TaxonomyGraph::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split('>');
        let (parent, child) = match (parts.next(), parts.next(), parts.next()) {
            (Some(p), Some(c), None) => (p.trim(), c.trim()),
            _ => {
                return Err(Error::parse(
                    line,
                    format!("expected `parent>child`, got `{trimmed}`"),
                ))
            }
        };
        check_id(parent, line)?;
        check_id(child, line)?;
        g.insert_edge(parent.to_string(), child.to_string(), line)?;
    }
    g.check_acyclic()?;
    Ok(g)
}

/// Ordered coarse/fine class split. Orderings are fixed and define matrix
/// row/column indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPartition {
    coarse: Vec<ClassId>,
    fine: Vec<ClassId>,
    coarse_index: HashMap<ClassId, usize>,
    fine_index: HashMap<ClassId, usize>,
}

impl ClassPartition {
    pub fn new(coarse: Vec<ClassId>, fine: Vec<ClassId>) -> Result<Self> {
        let mut coarse_index = HashMap::new();
        for (i, id) in coarse.iter().enumerate() {
            if coarse_index.insert(id.clone(), i).is_some() {
                return Err(Error::invalid("partition", format!("duplicate coarse class `{id}`")));
            }
        }
        let mut fine_index = HashMap::new();
        for (j, id) in fine.iter().enumerate() {
            if coarse_index.contains_key(id) {
                return Err(Error::invalid(
                    "partition",
                    format!("class `{id}` appears in both coarse and fine sets"),
                ));
            }
            if fine_index.insert(id.clone(), j).is_some() {
                return Err(Error::invalid("partition", format!("duplicate fine class `{id}`")));
            }
        }
        Ok(ClassPartition {
            coarse,
            fine,
            coarse_index,
            fine_index,
        })
    }

    pub fn coarse(&self) -> &[ClassId] {
        &self.coarse
    }

    pub fn fine(&self) -> &[ClassId] {
        &self.fine
    }

    pub fn coarse_index(&self, id: &str) -> Option<usize> {
        self.coarse_index.get(id).copied()
    }

    pub fn fine_index(&self, id: &str) -> Option<usize> {
        self.fine_index.get(id).copied()
    }

    /// Every listed class must be a node of `graph`.
    pub fn validate_against(&self, graph: &TaxonomyGraph) -> Result<()> {
        for id in self.coarse.iter().chain(&self.fine) {
            if !graph.contains(id) {
                return Err(Error::UnknownClass(id.clone()));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("[coarse]\n");
        for id in &self.coarse {
            let _ = writeln!(out, "{id}");
        }
        out.push_str("[fine]\n");
        for id in &self.fine {
            let _ = writeln!(out, "{id}");
        }
        out
    }
}

/// Parses the partition format: `[coarse]` and `[fine]` sections with one
/// class id per line.
pub fn parse_partition(text: &str) -> Result<ClassPartition> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Coarse,
        Fine,
    }
    let mut section = Section::None;
    let mut coarse = Vec::new();
    let mut fine = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match trimmed {
            "[coarse]" => section = Section::Coarse,
            "[fine]" => section = Section::Fine,
            _ if trimmed.starts_with('[') => {
                return Err(Error::parse(line, format!("unknown section `{trimmed}`")))
            }
            id => {
                check_id(id, line)?;
                match section {
                    Section::Coarse => coarse.push(id.to_string()),
                    Section::Fine => fine.push(id.to_string()),
                    Section::None => {
                        return Err(Error::parse(line, "class id before any section header"))
                    }
                }
            }
        }
    }
    ClassPartition::new(coarse, fine)
}

/// One-hot hyponym row for a coarse class: entry `j` is 1 iff fine class `j`
/// is a (transitive) hyponym of `coarse_class`.
pub fn semantic_encode(
    graph: &TaxonomyGraph,
    partition: &ClassPartition,
    coarse_class: &str,
) -> Result<Vec<f64>> {
    if partition.coarse_index(coarse_class).is_none() {
        return Err(Error::UnknownClass(coarse_class.to_string()));
    }
    let hyponyms = graph.hyponym_closure(coarse_class)?;
    Ok(partition
        .fine()
        .iter()
        .map(|f| if hyponyms.contains(f) { 1.0 } else { 0.0 })
        .collect())
}

/// Mirror of [`semantic_encode`] using the hypernym closure of a fine class.
pub fn reverse_semantic_encode(
    graph: &TaxonomyGraph,
    partition: &ClassPartition,
    fine_class: &str,
) -> Result<Vec<f64>> {
    if partition.fine_index(fine_class).is_none() {
        return Err(Error::UnknownClass(fine_class.to_string()));
    }
    let hypernyms = graph.hypernym_closure(fine_class)?;
    Ok(partition
        .coarse()
        .iter()
        .map(|c| if hypernyms.contains(c) { 1.0 } else { 0.0 })
        .collect())
}

/// Stacks [`semantic_encode`] rows for every coarse class.
pub fn build_semantic_correlation(
    graph: &TaxonomyGraph,
    partition: &ClassPartition,
) -> Result<CorrelationMatrix> {
    partition.validate_against(graph)?;
    let rows: Vec<Vec<f64>> = partition
        .coarse()
        .iter()
        .map(|c| semantic_encode(graph, partition, c))
        .collect::<Result<_>>()?;
    CorrelationMatrix::new(
        CorrelationKind::SemanticOnehot,
        partition.coarse().to_vec(),
        partition.fine().to_vec(),
        Grid::from_rows(rows)?,
    )
}
