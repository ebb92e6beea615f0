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


//! Object manifests for the multi-object workload.

use petgraph::algo::toposort;
use petgraph::graph::DiGraph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManifestError {
    #[error("object dependencies contain a cycle through object {0}")]
    CyclicDependency(usize),
    #[error("object {object} depends on missing object {dep}")]
    MissingObject { object: usize, dep: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    /// Response size in bytes.
    pub size: u64,
    /// Objects that must complete before this one is requested.
    #[serde(default)]
    pub deps: Vec<usize>,
}

/// Seeded synthetic page: object 0 is the root and every other object
/// depends on it.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub count: usize,
    pub median_bytes: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub objects: Vec<ObjectSpec>,
}

impl Manifest {
    pub fn new(objects: Vec<ObjectSpec>) -> Self {
        Manifest { objects }
    }

    pub fn generate(g: &GenerateSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = LogNormal::new(g.median_bytes.max(1.0).ln(), g.sigma.max(0.0)).expect("finite parameters");
        let objects = (0..g.count)
            .map(|i| ObjectSpec {
                size: (dist.sample(&mut rng).round() as u64).max(1),
                deps: if i == 0 { Vec::new() } else { vec![0] },
            })
            .collect();
        Manifest { objects }
    }

    /// Objects in an order compatible with their dependencies.
    pub fn order(&self) -> Result<Vec<usize>, ManifestError> {
        let mut g = DiGraph::<usize, ()>::new();
        let nodes: Vec<_> = (0..self.objects.len()).map(|i| g.add_node(i)).collect();
        for (i, o) in self.objects.iter().enumerate() {
            for &d in &o.deps {
                let dep = *nodes.get(d).ok_or(ManifestError::MissingObject { object: i, dep: d })?;
                g.add_edge(dep, nodes[i], ());
            }
        }
        toposort(&g, None).map(|v| v.into_iter().map(|n| g[n]).collect()).map_err(|c| ManifestError::CyclicDependency(g[c.node_id()]))
    }

    pub fn total_bytes(&self) -> u64 {
        self.objects.iter().map(|o| o.size).sum()
    }
}
