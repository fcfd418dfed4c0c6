//! Placement strategies: which layers get an adapter block after them.
//!
//! Layers are 1-indexed. The contiguous late strategies cover
//! `{n − ⌈n/k⌉, …, n}`; for `n = 28` this yields the 15/11/8/5-block layouts
//! (layers 14, 18, 21, 24 onward).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PlacementName {
    All,
    Every2,
    LateHalf,
    LateHalf2,
    LateThird,
    LateQuarter,
    Late8th,
    Last,
}

impl PlacementName {
    pub const ALL_NAMES: [PlacementName; 8] = [
        PlacementName::All,
        PlacementName::Every2,
        PlacementName::LateHalf,
        PlacementName::LateHalf2,
        PlacementName::LateThird,
        PlacementName::LateQuarter,
        PlacementName::Late8th,
        PlacementName::Last,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlacementName::All => "ALL",
            PlacementName::Every2 => "EVERY2",
            PlacementName::LateHalf => "LATEHALF",
            PlacementName::LateHalf2 => "LATEHALF2",
            PlacementName::LateThird => "LATETHIRD",
            PlacementName::LateQuarter => "LATEQUARTER",
            PlacementName::Late8th => "LATE8TH",
            PlacementName::Last => "LAST",
        }
    }
}

impl fmt::Display for PlacementName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlacementName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_uppercase();
        PlacementName::ALL_NAMES
            .into_iter()
            .find(|n| n.as_str() == key)
            .ok_or_else(|| Error::UnknownPlacement(s.to_string()))
    }
}

impl TryFrom<String> for PlacementName {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PlacementName> for String {
    fn from(p: PlacementName) -> String {
        p.as_str().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub name: PlacementName,
    /// Ascending, 1-indexed; an adapter runs after each of these layers.
    pub layers: Vec<usize>,
}

impl PlacementConfig {
    pub fn count(&self) -> usize {
        self.layers.len()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    /// `config,layer` rows, no header.
    pub fn csv_rows(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|l| format!("{},{l}", self.name))
            .collect()
    }
}

fn late_start(n: usize, k: usize) -> usize {
    n - n.div_ceil(k)
}

pub fn resolve_placement(name: PlacementName, n_layers: usize) -> Result<PlacementConfig> {
    if n_layers < 2 {
        return Err(Error::Config(format!(
            "placement needs at least 2 layers, got {n_layers}"
        )));
    }
    let n = n_layers;
    let layers: Vec<usize> = match name {
        PlacementName::All => (1..=n).collect(),
        PlacementName::Every2 => (2..=n).step_by(2).collect(),
        PlacementName::LateHalf => (late_start(n, 2)..=n).collect(),
        PlacementName::LateHalf2 => (late_start(n, 2)..=n).step_by(2).collect(),
        PlacementName::LateThird => (late_start(n, 3)..=n).collect(),
        PlacementName::LateQuarter => (late_start(n, 4)..=n).collect(),
        PlacementName::Late8th => (late_start(n, 8)..=n).collect(),
        PlacementName::Last => vec![n],
    };
    Ok(PlacementConfig { name, layers })
}

/// Parses the name, then resolves it.
pub fn resolve_placement_str(name: &str, n_layers: usize) -> Result<PlacementConfig> {
    resolve_placement(name.parse()?, n_layers)
}
