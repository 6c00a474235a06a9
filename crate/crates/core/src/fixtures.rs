//! Tabular games shipped with the crate, in the text format of [`TabularGame`].

use crate::error::{Error, Result};
use crate::tabular::TabularGame;

pub const SOURCES: [(&str, &str); 6] = [
    ("coordination", include_str!("../fixtures/coordination.game")),
    ("matching_pennies", include_str!("../fixtures/matching_pennies.game")),
    ("prisoners", include_str!("../fixtures/prisoners.game")),
    ("pursuit", include_str!("../fixtures/pursuit.game")),
    ("three_agents", include_str!("../fixtures/three_agents.game")),
    ("correlation", include_str!("../fixtures/correlation.game")),
];

pub fn all() -> Result<Vec<TabularGame>> {
    SOURCES.iter().map(|(_, text)| TabularGame::parse(text)).collect()
}

pub fn by_name(name: &str) -> Result<TabularGame> {
    let (_, text) = SOURCES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("unknown fixture {name:?}; known: {}", names().join(", "))))?;
    TabularGame::parse(text)
}

pub fn names() -> Vec<&'static str> {
    SOURCES.iter().map(|(n, _)| *n).collect()
}
