//! Scenario files shipped with the crate.

use crate::error::{Error, Result};
use crate::scenario::Scenario;

const FIXTURES: &[(&str, &str)] = &[
    ("toy3", include_str!("../fixtures/toy3.json")),
    ("banshee7", include_str!("../fixtures/banshee7.json")),
    ("banshee7-eigen", include_str!("../fixtures/banshee7-eigen.json")),
    ("scenario1", include_str!("../fixtures/scenario1.json")),
    ("scenario1-limiter", include_str!("../fixtures/scenario1-limiter.json")),
    ("scenario2-1", include_str!("../fixtures/scenario2-1.json")),
    ("scenario2-2", include_str!("../fixtures/scenario2-2.json")),
    (
        "scenario2-limiter-simultaneous",
        include_str!("../fixtures/scenario2-limiter-simultaneous.json"),
    ),
    (
        "scenario2-limiter-staggered",
        include_str!("../fixtures/scenario2-limiter-staggered.json"),
    ),
];

pub fn fixture_names() -> Vec<&'static str> {
    FIXTURES.iter().map(|(n, _)| *n).collect()
}

pub fn fixture_source(name: &str) -> Option<&'static str> {
    FIXTURES.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn fixture(name: &str) -> Result<Scenario> {
    let src = fixture_source(name).ok_or_else(|| {
        Error::Config(format!(
            "no fixture named `{name}` (available: {})",
            fixture_names().join(", ")
        ))
    })?;
    Scenario::from_json_str(src)
}
