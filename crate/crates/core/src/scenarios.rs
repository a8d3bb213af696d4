//! Scenario files shipped with the crate: fitted values for each setting
//! (lab, on-line) and manipulation (semantic, phonological), 45 participants
//! by 90 items.

use crate::io::{parse_scenario, ScenarioMode};
use crate::types::Scenario;

const LAB_SEMANTIC: &str = include_str!("../scenarios/lab_semantic.json");
const LAB_PHONOLOGICAL: &str = include_str!("../scenarios/lab_phonological.json");
const ONLINE_SEMANTIC: &str = include_str!("../scenarios/online_semantic.json");
const ONLINE_PHONOLOGICAL: &str = include_str!("../scenarios/online_phonological.json");

pub const NAMES: [&str; 4] = [
    "lab_semantic",
    "lab_phonological",
    "online_semantic",
    "online_phonological",
];

/// Raw JSON of a bundled scenario.
pub fn source(name: &str) -> Option<&'static str> {
    match name {
        "lab_semantic" => Some(LAB_SEMANTIC),
        "lab_phonological" => Some(LAB_PHONOLOGICAL),
        "online_semantic" => Some(ONLINE_SEMANTIC),
        "online_phonological" => Some(ONLINE_PHONOLOGICAL),
        _ => None,
    }
}

pub fn bundled(name: &str) -> Option<Scenario> {
    source(name).map(|text| {
        parse_scenario(text, ScenarioMode::Strict)
            .expect("bundled scenario is valid")
            .0
    })
}

pub fn lab_semantic() -> Scenario {
    bundled("lab_semantic").unwrap()
}

pub fn lab_phonological() -> Scenario {
    bundled("lab_phonological").unwrap()
}

pub fn online_semantic() -> Scenario {
    bundled("online_semantic").unwrap()
}

pub fn online_phonological() -> Scenario {
    bundled("online_phonological").unwrap()
}
