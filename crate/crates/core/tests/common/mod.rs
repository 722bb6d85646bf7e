//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use sevtrain::data::{synthetic_for_taxonomy, Dataset, Split};
use sevtrain::rng;
use sevtrain::taxonomy::{ClassEntry, ClassTaxonomy, EdgeEntry, HierarchyFile, NodeEntry};

pub const CIFAR_SUBSET_COARSE: [&str; 4] = ["fish", "large_carnivores", "vehicles_1", "flowers"];

/// The 20 fine classes under four CIFAR-100 superclasses, with their indices
/// in the full label space.
pub fn cifar_subset() -> (ClassTaxonomy, Vec<usize>) {
    let full = ClassTaxonomy::cifar100();
    let mut names = Vec::new();
    for coarse in CIFAR_SUBSET_COARSE {
        let ci = (0..full.num_coarse()).find(|&c| full.coarse_name(c).unwrap() == coarse).unwrap();
        for f in 0..full.num_fine() {
            if full.coarse_of(f).unwrap() == ci {
                names.push(full.fine_name(f).unwrap().to_string());
            }
        }
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    full.restrict(&refs).unwrap()
}

/// Random rooted tree as parent indices (`parents[0]` is the root and
/// unused), each node attached to an earlier one.
pub fn random_parents(nodes: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed);
    (0..nodes).map(|i| if i == 0 { 0 } else { r.random_range(0..i) }).collect()
}

/// Hierarchy whose classes are the leaves of `parents`, coarse groups being
/// the children of the root.
pub fn hierarchy_from_parents(parents: &[usize]) -> HierarchyFile {
    let n = parents.len();
    let name = |i: usize| format!("n{i:03}");
    let mut is_leaf = vec![true; n];
    for &p in &parents[1..] {
        is_leaf[p] = false;
    }
    let top = |mut i: usize| {
        while parents[i] != 0 {
            i = parents[i];
        }
        i
    };
    let mut coarse: BTreeMap<usize, usize> = BTreeMap::new();
    let mut classes = Vec::new();
    for i in (1..n).filter(|&i| is_leaf[i]) {
        let t = top(i);
        let next = coarse.len();
        let ci = *coarse.entry(t).or_insert(next);
        classes.push(ClassEntry {
            fine_index: classes.len(),
            node_name: name(i),
            coarse_index: Some(ci),
            coarse_name: Some(name(t)),
        });
    }
    HierarchyFile {
        nodes: (0..n).map(|i| NodeEntry { name: name(i) }).collect(),
        edges: (1..n)
            .map(|i| EdgeEntry {
                child: name(i),
                parent: name(parents[i]),
            })
            .collect(),
        classes,
    }
}

/// Undirected adjacency lists of the tree in `file`, keyed by node position.
pub fn adjacency(file: &HierarchyFile) -> (Vec<String>, Vec<Vec<usize>>) {
    let names: Vec<String> = file.nodes.iter().map(|n| n.name.clone()).collect();
    let pos = |s: &str| names.iter().position(|n| n == s).unwrap();
    let mut adj = vec![Vec::new(); names.len()];
    for e in &file.edges {
        let (a, b) = (pos(&e.child), pos(&e.parent));
        adj[a].push(b);
        adj[b].push(a);
    }
    (names, adj)
}

/// Synthetic train and test splits for the CIFAR subset.
pub fn subset_data(train_per_class: usize, test_per_class: usize, seed: u64) -> (ClassTaxonomy, Dataset, Dataset) {
    let (tax, _) = cifar_subset();
    let train = synthetic_for_taxonomy(&tax, train_per_class, 32, seed, Split::Train).unwrap();
    let test = synthetic_for_taxonomy(&tax, test_per_class, 32, seed, Split::Test).unwrap();
    (tax, train, test)
}

/// DeskNet trained with plain SGD on `ds` until its training loss is below
/// `target_loss` (at most `max_steps` full-batch steps).
pub fn overfit_desknet(ds: &Dataset, seed: u64, target_loss: f64, max_steps: usize) -> sevtrain::model::Network<f32> {
    use sevtrain::objectives::{desk_architecture, initial_state, train_step, Hyperparameters, Objective, TrainingStage};
    let hyper = Hyperparameters {
        lr: 0.01,
        batch_size: ds.len(),
        augmentation: None,
        ..Hyperparameters::default()
    };
    let mut state = initial_state(desk_architecture(ds).unwrap(), &hyper, seed).unwrap();
    let stage = TrainingStage::new(Objective::Standard, 1);
    let batch: Vec<_> = ds.samples.iter().collect();
    for _ in 0..max_steps {
        let stats = train_step(&mut state, &batch, &stage, &hyper, None).unwrap();
        if stats.loss < target_loss {
            break;
        }
    }
    state.model
}
