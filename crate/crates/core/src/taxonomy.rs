//! Class hierarchies and semantic similarity between classes.
//!
//! A [`ClassTaxonomy`] is a rooted tree whose leaves are the fine classes of a
//! dataset. Path similarity between two classes is `1 / (d + 1)` where `d` is
//! the number of edges on the tree path joining them. The similarity matrix
//! feeds [`build_target_sets`], which picks for every class the `k` most
//! similar other classes; these are the targets of semantically targeted
//! attacks.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numfmt::sig9;

const CIFAR100_HIERARCHY: &str = include_str!("../data/cifar100_hierarchy.json");

/// On-disk hierarchy description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyFile {
    pub nodes: Vec<NodeEntry>,
    pub edges: Vec<EdgeEntry>,
    pub classes: Vec<ClassEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEntry {
    pub child: String,
    pub parent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub fine_index: usize,
    pub node_name: String,
    #[serde(default)]
    pub coarse_index: Option<usize>,
    #[serde(default)]
    pub coarse_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct FineClass {
    node: usize,
    coarse: usize,
}

/// Validated rooted tree of label classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    root: usize,
    fine: Vec<FineClass>,
    coarse_names: Vec<String>,
}

impl ClassTaxonomy {
    /// Build and validate a taxonomy from its file representation.
    pub fn from_file(file: &HierarchyFile) -> Result<Self> {
        let mut names = Vec::with_capacity(file.nodes.len());
        let mut index = HashMap::with_capacity(file.nodes.len());
        for node in &file.nodes {
            if node.name.is_empty() {
                return Err(Error::MalformedHierarchy("empty node name".into()));
            }
            if index.insert(node.name.clone(), names.len()).is_some() {
                return Err(Error::DuplicateName(node.name.clone()));
            }
            names.push(node.name.clone());
        }
        if names.is_empty() {
            return Err(Error::MalformedHierarchy("no nodes".into()));
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::UnknownNode(name.to_string()))
        };

        let mut parent = vec![None; names.len()];
        for edge in &file.edges {
            let child = lookup(&edge.child)?;
            let par = lookup(&edge.parent)?;
            if child == par {
                return Err(Error::Cycle(edge.child.clone()));
            }
            if let Some(existing) = parent[child] {
                if existing != par {
                    return Err(Error::MalformedHierarchy(format!(
                        "node `{}` has more than one parent",
                        edge.child
                    )));
                }
            }
            parent[child] = Some(par);
        }

        // Walk parent chains; a chain revisiting a node on the current walk is a cycle.
        let mut state = vec![0u8; names.len()]; // 0 unseen, 1 on current walk, 2 done
        for start in 0..names.len() {
            let mut walk = Vec::new();
            let mut cur = Some(start);
            while let Some(n) = cur {
                match state[n] {
                    2 => break,
                    1 => return Err(Error::Cycle(names[n].clone())),
                    _ => {
                        state[n] = 1;
                        walk.push(n);
                        cur = parent[n];
                    }
                }
            }
            for n in walk {
                state[n] = 2;
            }
        }

        let roots: Vec<usize> = (0..names.len()).filter(|&n| parent[n].is_none()).collect();
        let root = match roots.as_slice() {
            [] => return Err(Error::NoRoot),
            [r] => *r,
            many => {
                return Err(Error::MultipleRoots(
                    many.iter().map(|&n| names[n].clone()).collect(),
                ))
            }
        };

        let mut depth = vec![usize::MAX; names.len()];
        depth[root] = 0;
        for n in 0..names.len() {
            fill_depth(n, &parent, &mut depth);
        }

        let mut has_child = vec![false; names.len()];
        for p in parent.iter().flatten() {
            has_child[*p] = true;
        }

        let fine = Self::validate_classes(file, &names, &index, &has_child)?;
        let coarse_names = {
            let mut by_index: BTreeMap<usize, String> = BTreeMap::new();
            for entry in &file.classes {
                let (ci, cn) = (entry.coarse_index.unwrap(), entry.coarse_name.clone().unwrap());
                match by_index.get(&ci) {
                    Some(existing) if *existing != cn => {
                        return Err(Error::MalformedHierarchy(format!(
                            "coarse index {ci} named both `{existing}` and `{cn}`"
                        )))
                    }
                    _ => {
                        by_index.insert(ci, cn);
                    }
                }
            }
            for (expect, (&ci, name)) in by_index.iter().enumerate() {
                if ci != expect {
                    return Err(Error::MalformedHierarchy(format!(
                        "coarse indices are not contiguous: `{name}` has index {ci}, expected {expect}"
                    )));
                }
            }
            let coarse: Vec<String> = by_index.into_values().collect();
            let mut seen = HashMap::new();
            for name in &coarse {
                if seen.insert(name.clone(), ()).is_some() {
                    return Err(Error::DuplicateName(name.clone()));
                }
            }
            coarse
        };

        Ok(Self {
            names,
            index,
            parent,
            depth,
            root,
            fine,
            coarse_names,
        })
    }

    fn validate_classes(
        file: &HierarchyFile,
        names: &[String],
        index: &HashMap<String, usize>,
        has_child: &[bool],
    ) -> Result<Vec<FineClass>> {
        let count = file.classes.len();
        let mut slots: Vec<Option<FineClass>> = vec![None; count];
        let mut class_of_node = vec![false; names.len()];
        for entry in &file.classes {
            let node = *index
                .get(&entry.node_name)
                .ok_or_else(|| Error::UnknownNode(entry.node_name.clone()))?;
            let coarse = match (entry.coarse_index, &entry.coarse_name) {
                (Some(ci), Some(_)) => ci,
                _ => return Err(Error::MissingCoarse(entry.node_name.clone())),
            };
            if has_child[node] {
                return Err(Error::MalformedHierarchy(format!(
                    "class `{}` is not a leaf",
                    entry.node_name
                )));
            }
            if entry.fine_index >= count {
                return Err(Error::MalformedHierarchy(format!(
                    "class `{}` has fine index {} outside 0..{count}",
                    entry.node_name, entry.fine_index
                )));
            }
            if slots[entry.fine_index].is_some() {
                return Err(Error::MalformedHierarchy(format!(
                    "fine index {} assigned twice (at `{}`)",
                    entry.fine_index, entry.node_name
                )));
            }
            if class_of_node[node] {
                return Err(Error::DuplicateName(entry.node_name.clone()));
            }
            class_of_node[node] = true;
            slots[entry.fine_index] = Some(FineClass { node, coarse });
        }
        for (n, name) in names.iter().enumerate() {
            if !has_child[n] && !class_of_node[n] && names.len() > 1 {
                return Err(Error::MissingCoarse(name.clone()));
            }
        }
        if count == 0 {
            return Err(Error::MalformedHierarchy("no classes".into()));
        }
        Ok(slots.into_iter().map(Option::unwrap).collect())
    }

    /// Parse a JSON hierarchy file.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: HierarchyFile = serde_json::from_str(text)
            .map_err(|e| Error::MalformedHierarchy(e.to_string()))?;
        Self::from_file(&file)
    }

    /// Load a JSON hierarchy file from disk.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    /// The bundled CIFAR-100 hierarchy: 100 fine classes under 20 coarse classes,
    /// placed in a pruned WordNet-style tree.
    pub fn cifar100() -> Self {
        Self::from_json(CIFAR100_HIERARCHY).expect("bundled CIFAR-100 hierarchy is valid")
    }

    pub fn to_file(&self) -> HierarchyFile {
        HierarchyFile {
            nodes: self
                .names
                .iter()
                .map(|n| NodeEntry { name: n.clone() })
                .collect(),
            edges: (0..self.names.len())
                .filter_map(|n| {
                    self.parent[n].map(|p| EdgeEntry {
                        child: self.names[n].clone(),
                        parent: self.names[p].clone(),
                    })
                })
                .collect(),
            classes: self
                .fine
                .iter()
                .enumerate()
                .map(|(i, f)| ClassEntry {
                    fine_index: i,
                    node_name: self.names[f.node].clone(),
                    coarse_index: Some(f.coarse),
                    coarse_name: Some(self.coarse_names[f.coarse].clone()),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("hierarchy serializes")
    }

    pub fn num_nodes(&self) -> usize {
        self.names.len()
    }

    pub fn num_fine(&self) -> usize {
        self.fine.len()
    }

    pub fn num_coarse(&self) -> usize {
        self.coarse_names.len()
    }

    pub fn root(&self) -> &str {
        &self.names[self.root]
    }

    /// Maximum node depth (edges from the root).
    pub fn depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn node_names(&self) -> &[String] {
        &self.names
    }

    pub fn parent_of(&self, node: &str) -> Result<Option<&str>> {
        let n = self.node_id(node)?;
        Ok(self.parent[n].map(|p| self.names[p].as_str()))
    }

    pub fn fine_name(&self, fine: usize) -> Result<&str> {
        self.fine
            .get(fine)
            .map(|f| self.names[f.node].as_str())
            .ok_or(Error::UnknownClass(fine))
    }

    pub fn fine_names(&self) -> Vec<&str> {
        self.fine.iter().map(|f| self.names[f.node].as_str()).collect()
    }

    pub fn coarse_name(&self, coarse: usize) -> Result<&str> {
        self.coarse_names
            .get(coarse)
            .map(String::as_str)
            .ok_or(Error::UnknownClass(coarse))
    }

    pub fn fine_index(&self, name: &str) -> Result<usize> {
        let node = self.node_id(name)?;
        self.fine
            .iter()
            .position(|f| f.node == node)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    /// Coarse class of a fine class.
    pub fn coarse_of(&self, fine: usize) -> Result<usize> {
        self.fine
            .get(fine)
            .map(|f| f.coarse)
            .ok_or(Error::UnknownClass(fine))
    }

    fn node_id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    fn node_distance(&self, mut a: usize, mut b: usize) -> usize {
        let mut dist = 0;
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].unwrap();
            dist += 1;
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].unwrap();
            dist += 1;
        }
        while a != b {
            a = self.parent[a].unwrap();
            b = self.parent[b].unwrap();
            dist += 2;
        }
        dist
    }

    /// Edge count of the tree path between two named nodes.
    pub fn path_distance(&self, a: &str, b: &str) -> Result<usize> {
        Ok(self.node_distance(self.node_id(a)?, self.node_id(b)?))
    }

    /// Edge count of the tree path between two fine classes.
    pub fn class_distance(&self, a: usize, b: usize) -> Result<usize> {
        let na = self.fine.get(a).ok_or(Error::UnknownClass(a))?.node;
        let nb = self.fine.get(b).ok_or(Error::UnknownClass(b))?.node;
        Ok(self.node_distance(na, nb))
    }

    /// `1 / (distance + 1)` between two fine classes.
    pub fn path_similarity(&self, a: usize, b: usize) -> Result<f64> {
        Ok(similarity_from_distance(self.class_distance(a, b)?))
    }

    /// Restrict the taxonomy to a subset of fine classes.
    ///
    /// Keeps the named leaves and all of their ancestors, so distances between
    /// retained classes are unchanged. Fine classes keep their original relative
    /// order; coarse classes are renumbered in order of first appearance. Also
    /// returns the original fine index of every retained class.
    pub fn restrict(&self, fine_names: &[&str]) -> Result<(ClassTaxonomy, Vec<usize>)> {
        let mut original: Vec<usize> = fine_names
            .iter()
            .map(|n| self.fine_index(n))
            .collect::<Result<_>>()?;
        original.sort_unstable();
        original.dedup();
        if original.len() != fine_names.len() {
            return Err(Error::invalid("subset names repeat a class"));
        }
        let mut keep = vec![false; self.names.len()];
        for &f in &original {
            let mut cur = Some(self.fine[f].node);
            while let Some(n) = cur {
                keep[n] = true;
                cur = self.parent[n];
            }
        }
        let mut coarse_map: Vec<Option<usize>> = vec![None; self.coarse_names.len()];
        let mut next_coarse = 0;
        let classes = original
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let old = self.fine[f].coarse;
                let ci = *coarse_map[old].get_or_insert_with(|| {
                    next_coarse += 1;
                    next_coarse - 1
                });
                ClassEntry {
                    fine_index: i,
                    node_name: self.names[self.fine[f].node].clone(),
                    coarse_index: Some(ci),
                    coarse_name: Some(self.coarse_names[old].clone()),
                }
            })
            .collect();
        let file = HierarchyFile {
            nodes: (0..self.names.len())
                .filter(|&n| keep[n])
                .map(|n| NodeEntry {
                    name: self.names[n].clone(),
                })
                .collect(),
            edges: (0..self.names.len())
                .filter(|&n| keep[n])
                .filter_map(|n| {
                    self.parent[n].map(|p| EdgeEntry {
                        child: self.names[n].clone(),
                        parent: self.names[p].clone(),
                    })
                })
                .collect(),
            classes,
        };
        Ok((ClassTaxonomy::from_file(&file)?, original))
    }
}

fn fill_depth(n: usize, parent: &[Option<usize>], depth: &mut [usize]) -> usize {
    if depth[n] != usize::MAX {
        return depth[n];
    }
    let d = fill_depth(parent[n].expect("non-root has a parent"), parent, depth) + 1;
    depth[n] = d;
    d
}

pub fn similarity_from_distance(distance: usize) -> f64 {
    1.0 / (distance as f64 + 1.0)
}

/// Dense F×F matrix of path similarities between fine classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    names: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Wrap raw values; they must be square and symmetric.
    pub fn from_values(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = names.len();
        if values.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {n} classes",
                values.len()
            )));
        }
        for a in 0..n {
            for b in 0..a {
                if values[a * n + b] != values[b * n + a] {
                    return Err(Error::invalid(format!("matrix not symmetric at ({a}, {b})")));
                }
            }
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.len() + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        let n = self.len();
        &self.values[a * n..(a + 1) * n]
    }

    /// Apply a function to every entry (used to check argsort invariance).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// CSV with a header row of class names and one row of values per class.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.names)?;
        for a in 0..self.len() {
            w.write_record(self.row(a).iter().map(|&v| sig9(v)))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Path similarity for every pair of fine classes.
pub fn build_similarity_matrix(tax: &ClassTaxonomy) -> SimilarityMatrix {
    let n = tax.num_fine();
    let mut values = vec![0.0; n * n];
    for a in 0..n {
        values[a * n + a] = 1.0;
        for b in 0..a {
            let s = tax.path_similarity(a, b).expect("indices in range");
            values[a * n + b] = s;
            values[b * n + a] = s;
        }
    }
    SimilarityMatrix {
        names: tax.fine_names().into_iter().map(String::from).collect(),
        values,
    }
}

/// For each class `y`, the `k` classes most similar to it (excluding `y`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticTargetSet {
    pub k: usize,
    pub targets: Vec<Vec<usize>>,
}

impl SemanticTargetSet {
    pub fn num_classes(&self) -> usize {
        self.targets.len()
    }

    pub fn get(&self, y: usize) -> Result<&[usize]> {
        self.targets
            .get(y)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClass(y))
    }
}

/// Top-`k` most similar classes per row; ties go to the lower class index.
pub fn build_target_sets(sim: &SimilarityMatrix, k: usize) -> Result<SemanticTargetSet> {
    let n = sim.len();
    if k >= n {
        return Err(Error::invalid(format!(
            "target set size {k} must be smaller than the class count {n}"
        )));
    }
    let targets = (0..n)
        .map(|y| {
            let row = sim.row(y);
            let mut candidates: Vec<usize> = (0..n).filter(|&u| u != y).collect();
            candidates.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            candidates.truncate(k);
            candidates
        })
        .collect();
    Ok(SemanticTargetSet { k, targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(edges: &[(&str, &str)], leaves: &[(&str, usize)]) -> Result<ClassTaxonomy> {
        let mut names: Vec<&str> = Vec::new();
        for (c, p) in edges {
            for n in [p, c] {
                if !names.contains(n) {
                    names.push(n);
                }
            }
        }
        ClassTaxonomy::from_file(&HierarchyFile {
            nodes: names.iter().map(|n| NodeEntry { name: n.to_string() }).collect(),
            edges: edges
                .iter()
                .map(|(c, p)| EdgeEntry {
                    child: c.to_string(),
                    parent: p.to_string(),
                })
                .collect(),
            classes: leaves
                .iter()
                .enumerate()
                .map(|(i, (n, c))| ClassEntry {
                    fine_index: i,
                    node_name: n.to_string(),
                    coarse_index: Some(*c),
                    coarse_name: Some(format!("coarse{c}")),
                })
                .collect(),
        })
    }

    fn balanced7() -> ClassTaxonomy {
        tree(
            &[
                ("l", "root"),
                ("r", "root"),
                ("a", "l"),
                ("b", "l"),
                ("c", "r"),
                ("d", "r"),
            ],
            &[("a", 0), ("b", 0), ("c", 1), ("d", 1)],
        )
        .unwrap()
    }

    #[test]
    fn smallest_tree() {
        let t = tree(&[("a", "root"), ("b", "root")], &[("a", 0), ("b", 0)]).unwrap();
        assert_eq!(t.num_fine(), 2);
        assert_eq!(t.depth(), 1);
        assert_eq!(t.root(), "root");
    }

    #[test]
    fn rejects_cycles() {
        let err = tree(&[("a", "b"), ("b", "a")], &[]).unwrap_err();
        assert!(matches!(err, Error::Cycle(_)), "{err}");

        let err = tree(&[("a", "root"), ("b", "a"), ("a", "b")], &[]).unwrap_err();
        assert!(matches!(err, Error::MalformedHierarchy(_)), "{err}");

        let err = tree(&[("a", "b"), ("b", "a"), ("c", "root")], &[("c", 0)]).unwrap_err();
        assert!(matches!(err, Error::Cycle(_)), "{err}");
    }

    #[test]
    fn rejects_structural_errors() {
        let err = tree(&[("a", "r1"), ("b", "r2")], &[("a", 0), ("b", 0)]).unwrap_err();
        assert!(matches!(err, Error::MultipleRoots(ref r) if r.len() == 2));

        let mut file = balanced7().to_file();
        file.nodes.push(NodeEntry { name: "a".into() });
        assert!(matches!(
            ClassTaxonomy::from_file(&file),
            Err(Error::DuplicateName(n)) if n == "a"
        ));

        let mut file = balanced7().to_file();
        file.classes[2].coarse_index = None;
        assert!(matches!(
            ClassTaxonomy::from_file(&file),
            Err(Error::MissingCoarse(n)) if n == "c"
        ));

        let mut file = balanced7().to_file();
        file.classes.pop();
        assert!(matches!(
            ClassTaxonomy::from_file(&file),
            Err(Error::MissingCoarse(n)) if n == "d"
        ));
    }

    #[test]
    fn distances_and_similarities() {
        let t = balanced7();
        assert_eq!(t.path_distance("a", "a").unwrap(), 0);
        assert_eq!(t.path_distance("a", "b").unwrap(), 2);
        assert_eq!(t.path_distance("a", "d").unwrap(), 4);
        assert_eq!(t.path_distance("a", "root").unwrap(), 2);
        assert!(matches!(t.path_distance("a", "zz"), Err(Error::UnknownNode(_))));
        assert_eq!(t.path_similarity(0, 0).unwrap(), 1.0);
        assert_eq!(t.path_similarity(0, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(t.path_similarity(0, 3).unwrap(), 0.2);
        assert!(matches!(t.path_similarity(0, 9), Err(Error::UnknownClass(9))));
    }

    #[test]
    fn two_leaf_matrix() {
        let t = tree(&[("a", "root"), ("b", "root")], &[("a", 0), ("b", 0)]).unwrap();
        let m = build_similarity_matrix(&t);
        assert_eq!(m.row(0), &[1.0, 1.0 / 3.0]);
        assert_eq!(m.row(1), &[1.0 / 3.0, 1.0]);
    }

    #[test]
    fn target_sets_basic() {
        let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let m = SimilarityMatrix::from_values(
            names,
            vec![1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0],
        )
        .unwrap();
        let t = build_target_sets(&m, 2).unwrap();
        assert_eq!(t.targets[0], vec![1, 2]);
        assert_eq!(t.targets[2], vec![0, 1]);
        assert!(build_target_sets(&m, 3).is_err());
    }

    #[test]
    fn coarse_lookup() {
        let t = balanced7();
        assert_eq!(t.coarse_of(0).unwrap(), 0);
        assert_eq!(t.coarse_of(0).unwrap(), t.coarse_of(1).unwrap());
        assert_ne!(t.coarse_of(1).unwrap(), t.coarse_of(2).unwrap());
        assert!(t.coarse_of(4).is_err());
    }

    #[test]
    fn cifar100_shape() {
        let t = ClassTaxonomy::cifar100();
        assert_eq!(t.num_fine(), 100);
        assert_eq!(t.num_coarse(), 20);
        let mut counts = [0usize; 20];
        for f in 0..100 {
            counts[t.coarse_of(f).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c == 5), "{counts:?}");
        assert_eq!(t.fine_name(0).unwrap(), "apple");
        assert_eq!(t.fine_name(99).unwrap(), "worm");
        assert_eq!(t.coarse_name(t.coarse_of(0).unwrap()).unwrap(), "fruit_and_vegetables");
    }

    #[test]
    fn restriction_preserves_distances() {
        let full = ClassTaxonomy::cifar100();
        let subset = ["whale", "apple", "tulip", "bus", "dolphin"];
        let (sub, original) = full.restrict(&subset).unwrap();
        assert_eq!(sub.num_fine(), 5);
        assert_eq!(sub.fine_name(0).unwrap(), "apple");
        for a in 0..5 {
            for b in 0..5 {
                assert_eq!(
                    sub.class_distance(a, b).unwrap(),
                    full.class_distance(original[a], original[b]).unwrap()
                );
            }
        }
        let d = sub.fine_index("dolphin").unwrap();
        let w = sub.fine_index("whale").unwrap();
        assert_eq!(sub.coarse_of(d).unwrap(), sub.coarse_of(w).unwrap());
    }

    #[test]
    fn json_round_trip() {
        let t = ClassTaxonomy::cifar100();
        assert_eq!(ClassTaxonomy::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn similarity_csv_layout() {
        let m = build_similarity_matrix(&balanced7());
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "a,b,c,d");
        assert_eq!(lines[1], "1.00000000,0.333333333,0.200000000,0.200000000");
    }
}
