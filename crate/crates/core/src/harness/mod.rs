// Copyright 2026 The tcpext Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


//! Scenario runner: loads a scenario, builds the world, runs it and
//! returns the measurement log.

pub mod apps;
pub mod metrics;
pub mod scenario;
pub mod world;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use apps::{Manifest, ManifestError, ObjectSpec};
pub use metrics::{Filter, MetricsError, MetricsLog, Record, Statistics, Stats};
pub use scenario::{ConfigError, Scenario};
pub use world::{ProgramFactory, RunOutput, World};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "TCPEXT_OUT_DIR";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("writing results: {0}")]
    Output(#[from] MetricsError),
}

/// Runs one scenario.
pub fn run(sc: &Scenario) -> RunOutput {
    World::new(sc, None).run()
}

/// Runs one scenario with additional programs loaded on every host.
pub fn run_with(sc: &Scenario, extra: ProgramFactory<'_>) -> RunOutput {
    World::new(sc, Some(extra)).run()
}

/// Loads and runs the scenario at `path` (its base configuration, sweeps
/// not expanded).
pub fn run_scenario(path: &Path) -> Result<MetricsLog, ConfigError> {
    let sc = Scenario::load(path)?;
    Ok(run(&sc).log)
}

/// Every variant of the scenario at `path` (see [`Scenario::variants`]),
/// optionally with the seed replaced.
pub fn load_variants(
    path: &Path,
    seed: Option<u64>,
    extra: &[(String, Vec<toml::Value>)],
) -> Result<Vec<Scenario>, ConfigError> {
    let (mut table, text) = scenario::load_table(path)?;
    // errors in the file itself report its own line numbers
    Scenario::parse(&text)?;
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    Scenario::variants(&table, extra)
}

/// Runs each scenario and writes `<name>.jsonl` (and `<name>.trace` when
/// traced) into `out`. Returns the written log paths.
pub fn run_to_dir(scenarios: &[Scenario], out: &Path) -> Result<Vec<PathBuf>, RunError> {
    std::fs::create_dir_all(out).map_err(MetricsError::from)?;
    let mut paths = Vec::new();
    for sc in scenarios {
        let r = run(sc);
        let p = out.join(format!("{}.jsonl", sc.name));
        r.log.write(&p)?;
        if sc.trace {
            let mut t = r.trace.join("\n");
            t.push('\n');
            std::fs::write(out.join(format!("{}.trace", sc.name)), t).map_err(MetricsError::from)?;
        }
        paths.push(p);
    }
    Ok(paths)
}
