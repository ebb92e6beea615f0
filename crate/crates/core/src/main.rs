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


use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tcpext::harness::{self, scenario, ConfigError, MetricsLog, RunError, Statistics};
use tcpext::SimTime;

/// Run simulator scenarios and summarize their measurement logs.
#[derive(Parser)]
#[command(name = "tcpext", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario (every variant when it declares sweeps).
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to $TCPEXT_OUT_DIR, then `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print statistics of one metric of a log.
    Summarize {
        log: PathBuf,
        #[arg(long)]
        metric: String,
        /// Aggregate into per-window rates of this many seconds first.
        #[arg(long)]
        window: Option<f64>,
    },
    /// Run a scenario once per value of each `--param path=v1,v2,…`.
    Sweep {
        scenario: PathBuf,
        #[arg(long = "param", required = true)]
        params: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os(harness::OUT_DIR_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_param(p: &str) -> Result<(String, Vec<toml::Value>), ConfigError> {
    let (k, v) = p.split_once('=').ok_or_else(|| ConfigError::Invalid {
        field: p.to_string(),
        message: "expected name=v1,v2,...".into(),
    })?;
    Ok((k.to_string(), v.split(',').map(scenario::parse_value).collect()))
}

fn run(scenario: PathBuf, seed: Option<u64>, out: Option<PathBuf>, params: &[String]) -> Result<(), RunError> {
    let extra = params.iter().map(|p| parse_param(p)).collect::<Result<Vec<_>, _>>()?;
    let variants = harness::load_variants(&scenario, seed, &extra)?;
    for p in harness::run_to_dir(&variants, &out_dir(out))? {
        println!("{}", p.display());
    }
    Ok(())
}

fn summarize(log: PathBuf, metric: &str, window: Option<f64>) -> Result<(), String> {
    let log = MetricsLog::read(&log).map_err(|e| e.to_string())?;
    let st = log.summarize(metric, window.map(SimTime::from_secs_f64)).map_err(|e| e.to_string())?;
    match st {
        Statistics::Empty => println!("{metric}: empty"),
        Statistics::Values(s) => println!(
            "{metric}: count={} mean={} p50={} p95={} min={} max={}",
            s.count, s.mean, s.p50, s.p95, s.min, s.max
        ),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { scenario, seed, out } => run(scenario, seed, out, &[]),
        Cmd::Sweep { scenario, params, seed, out } => run(scenario, seed, out, &params),
        Cmd::Summarize { log, metric, window } => {
            return match summarize(log, &metric, window) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
