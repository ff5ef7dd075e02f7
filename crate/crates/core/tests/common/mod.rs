use std::path::{Path, PathBuf};

use attnreg_core::metrics::FixtureBackend;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeFixture {
    pub objects: Vec<String>,
    pub backend: FixtureBackend,
    pub expected: f64,
}

/// Composite-score fixtures in file-name order.
pub fn composite_fixtures() -> Vec<(PathBuf, CompositeFixture)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/composite");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let fx = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
            (p, fx)
        })
        .collect()
}
