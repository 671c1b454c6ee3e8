//! Shipped scenario matrices, one per experiment.

use crate::error::Result;
use crate::orchestrator::MatrixConfig;

pub struct Preset {
    pub name: &'static str,
    /// Path relative to the repository root.
    pub path: &'static str,
    pub source: &'static str,
}

impl Preset {
    pub fn config(&self) -> Result<MatrixConfig> {
        MatrixConfig::from_toml(self.source)
    }
}

macro_rules! preset {
    ($name:literal) => {
        Preset {
            name: $name,
            path: concat!("presets/", $name, ".toml"),
            source: include_str!(concat!("../../../presets/", $name, ".toml")),
        }
    };
}

pub const PRESETS: &[Preset] = &[
    preset!("fig3"),
    preset!("fig4"),
    preset!("fig7"),
    preset!("fig8"),
    preset!("table1"),
    preset!("table2"),
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}
