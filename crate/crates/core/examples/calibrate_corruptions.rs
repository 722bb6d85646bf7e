//! Calibrates the bundled corruption parameter table.
//!
//! Trains the desk Standard preset on the synthetic 20-class CIFAR-100
//! subset, then for each kind finds by bisection the parameter at which test
//! accuracy falls to half of clean accuracy. That value becomes severity 5;
//! severities 1..4 are spaced evenly towards the identity parameter
//! (geometrically for pixelation). The table is printed as JSON on stdout and
//! the measurements on stderr.
//!
//! ```text
//! cargo run --release --example calibrate_corruptions > crates/core/data/corruption_params.json
//! ```

use std::collections::BTreeMap;

use sevtrain::corruption::{apply_with_parameter, CorruptionKind, ParameterTable};
use sevtrain::data::{synthetic_for_taxonomy, Dataset, Split};
use sevtrain::metrics::evaluate;
use sevtrain::model::Network;
use sevtrain::objectives::{preset, run_recipe, RecipeOptions, Scale};
use sevtrain::rng;
use sevtrain::taxonomy::ClassTaxonomy;

const SEED: u64 = 0;
const DATA_SEED: u64 = 1000;
const BISECTION_STEPS: usize = 14;

fn subset() -> ClassTaxonomy {
    let full = ClassTaxonomy::cifar100();
    let mut names = Vec::new();
    for coarse in ["fish", "large_carnivores", "vehicles_1", "flowers"] {
        let ci = (0..full.num_coarse()).find(|&c| full.coarse_name(c).unwrap() == coarse).unwrap();
        for f in (0..full.num_fine()).filter(|&f| full.coarse_of(f).unwrap() == ci) {
            names.push(full.fine_name(f).unwrap().to_string());
        }
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    full.restrict(&refs).unwrap().0
}

fn accuracy(net: &Network<f32>, ds: &Dataset, tax: &ClassTaxonomy) -> f64 {
    let records = evaluate(net, ds, tax).unwrap();
    records.iter().filter(|r| !r.is_mistake()).count() as f64 / records.len() as f64
}

fn corrupted(ds: &Dataset, kind: CorruptionKind, p: f64) -> Dataset {
    let mut out = ds.clone();
    for (i, s) in out.samples.iter_mut().enumerate() {
        s.image = apply_with_parameter(&s.image, kind, p, rng::derive(SEED, i as u64)).unwrap();
    }
    out
}

/// Identity parameter and the most severe parameter searched for `kind`.
fn search_range(kind: CorruptionKind) -> (f64, f64) {
    match kind {
        CorruptionKind::GaussianNoise => (0.0, 1.0),
        CorruptionKind::ImpulseNoise => (0.0, 1.0),
        CorruptionKind::GaussianBlur => (0.0, 4.0),
        CorruptionKind::Brightness => (0.0, 1.0),
        CorruptionKind::Contrast => (1.0, 0.0),
        CorruptionKind::Saturation => (1.0, 0.0),
        CorruptionKind::Pixelate => (1.0, 32.0),
    }
}

fn severities(kind: CorruptionKind, identity: f64, p5: f64) -> [f64; 5] {
    let mut out = [0.0; 5];
    for (i, v) in out.iter_mut().enumerate() {
        let frac = (i + 1) as f64 / 5.0;
        *v = if kind == CorruptionKind::Pixelate {
            p5.powf(frac).round().max(i as f64 + 2.0)
        } else {
            let x = identity + (p5 - identity) * frac;
            (x * 1e4).round() / 1e4
        };
    }
    if kind == CorruptionKind::Pixelate {
        for i in 1..5 {
            out[i] = out[i].max(out[i - 1] + 1.0);
        }
    }
    out
}

fn main() {
    let tax = subset();
    let train = synthetic_for_taxonomy(&tax, 20, 32, DATA_SEED, Split::Train).unwrap();
    let test = synthetic_for_taxonomy(&tax, 10, 32, DATA_SEED, Split::Test).unwrap();
    let mut recipe = preset("Standard", Scale::desk()).unwrap();
    recipe.hyperparameters.batch_size = 10;
    recipe.hyperparameters.lr = 0.01;
    let net = run_recipe(&recipe, &train, &tax, None, SEED, RecipeOptions::default()).unwrap().state.model;
    let clean = accuracy(&net, &test, &tax);
    let goal = clean / 2.0;
    eprintln!("clean accuracy {clean:.3}; target {goal:.3}");

    let mut table: BTreeMap<&str, [f64; 5]> = BTreeMap::new();
    for kind in CorruptionKind::ALL {
        let (identity, extreme) = search_range(kind);
        let at_extreme = accuracy(&net, &corrupted(&test, kind, extreme), &tax);
        let p5 = if at_extreme > goal {
            eprintln!("{kind}: accuracy {at_extreme:.3} even at {extreme}; using the extreme");
            extreme
        } else {
            let (mut lo, mut hi) = (identity, extreme);
            for _ in 0..BISECTION_STEPS {
                let mid = if kind == CorruptionKind::Pixelate { ((lo + hi) / 2.0).round() } else { (lo + hi) / 2.0 };
                if mid == lo || mid == hi {
                    break;
                }
                if accuracy(&net, &corrupted(&test, kind, mid), &tax) > goal {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hi
        };
        let values = severities(kind, identity, p5);
        let accs: Vec<String> = values
            .iter()
            .map(|&p| format!("{:.3}", accuracy(&net, &corrupted(&test, kind, p), &tax)))
            .collect();
        eprintln!("{kind}: parameters {values:?} accuracy {}", accs.join(" "));
        table.insert(kind.name(), values);
    }
    let json = serde_json::to_string_pretty(&table).unwrap();
    ParameterTable::from_json(&json).expect("calibrated table is valid");
    println!("{json}");
}
