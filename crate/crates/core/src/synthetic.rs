//! Seeded synthetic corpora whose classes draw from disjoint word pools.
//!
//! The bundled files under `data/` are exact outputs of [`four_class`] and
//! [`two_class`]; regenerate them with `cargo run --example gen_synthetic`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::corpus::{parse_jsonl, Dataset};

pub const SPORTS: [&str; 25] = [
    "goal", "striker", "referee", "stadium", "tournament", "keeper", "penalty", "league", "coach",
    "dribble", "marathon", "sprinter", "tennis", "racket", "wicket", "batsman", "pitcher", "inning",
    "touchdown", "quarterback", "rebound", "dunk", "medal", "podium", "relay",
];
pub const BUSINESS: [&str; 25] = [
    "shares", "merger", "dividend", "investor", "revenue", "profit", "quarterly", "earnings",
    "stock", "bond", "startup", "acquisition", "ceo", "retail", "inflation", "tariff", "export",
    "banking", "lender", "mortgage", "equity", "venture", "brokerage", "audit", "payroll",
];
pub const SCIENCE: [&str; 25] = [
    "telescope", "galaxy", "molecule", "protein", "genome", "neutron", "laboratory", "physicist",
    "chemist", "fossil", "asteroid", "orbit", "quantum", "enzyme", "microscope", "vaccine",
    "satellite", "particle", "isotope", "neuron", "bacteria", "comet", "reactor", "spectrum",
    "climate",
];
pub const WORLD: [&str; 25] = [
    "minister", "parliament", "embassy", "election", "treaty", "diplomat", "summit", "border",
    "refugee", "ceasefire", "sanctions", "president", "coalition", "protest", "referendum",
    "governor", "envoy", "militia", "senate", "cabinet", "province", "monarchy", "insurgent",
    "alliance", "capital",
];

pub const FOUR_CLASS_NAME: &str = "synthetic-4class";
pub const TWO_CLASS_NAME: &str = "synthetic-2class";

const FOUR_CLASS_JSONL: &str = include_str!("../data/synthetic-4class.jsonl");
const TWO_CLASS_JSONL: &str = include_str!("../data/synthetic-2class.jsonl");

/// JSONL lines `{"id", "text", "label"}`. Samples cycle through the classes;
/// each text is `words_per_text` distinct words of its class pool.
pub fn generate_jsonl(classes: &[(&str, &[&str])], per_class: usize, words_per_text: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for i in 0..per_class * classes.len() {
        let (label, pool) = classes[i % classes.len()];
        let words: Vec<&str> = index::sample(&mut rng, pool.len(), words_per_text.min(pool.len()))
            .into_iter()
            .map(|w| pool[w])
            .collect();
        let line = json!({ "id": i.to_string(), "text": words.join(" "), "label": label });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

/// 4 classes × 80 samples, 8 words per text.
pub fn four_class_jsonl() -> String {
    generate_jsonl(
        &[("sports", &SPORTS), ("business", &BUSINESS), ("science", &SCIENCE), ("world", &WORLD)],
        80,
        8,
        2024,
    )
}

/// 2 classes × 40 samples, 8 words per text.
pub fn two_class_jsonl() -> String {
    generate_jsonl(&[("sports", &SPORTS), ("science", &SCIENCE)], 40, 8, 7)
}

pub fn four_class() -> Dataset {
    parse_jsonl(FOUR_CLASS_NAME, FOUR_CLASS_JSONL).expect("bundled corpus parses")
}

pub fn two_class() -> Dataset {
    parse_jsonl(TWO_CLASS_NAME, TWO_CLASS_JSONL).expect("bundled corpus parses")
}
