//! Command-line front end: flag resolution, PNG I/O, and run reports.

pub mod args;
pub mod config;
pub mod error;
pub mod imageio;
pub mod report;
pub mod run;

use std::thread;

pub use args::Cli;
pub use error::{CliError, Result};

use config::{load_net, resolve};
use run::{write_outcome, Outcome, Session};

/// Builds the session for a parsed command line.
pub fn session(cli: &Cli) -> Result<Session> {
    let args = cli.command.args();
    let (network, weights) = load_net(&args.net, args.weights.as_deref())?;
    let config = resolve(cli.command.kind(), args, &network, weights)?;
    Session::new(network, config)
}

/// Runs every requested seed and writes images and reports. Seeds are spread
/// over worker threads; each has its own random source, so results do not
/// depend on scheduling.
pub fn execute(cli: &Cli) -> Result<Vec<Outcome>> {
    let session = session(cli)?;
    let args = cli.command.args();
    let seeds: Vec<u64> = (0..args.count as u64).map(|i| args.seed + i).collect();
    let many = seeds.len() > 1;
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    let run_one = |seed: u64| -> Result<Outcome> {
        let config = if many {
            session.config.for_seed(seed)
        } else {
            session.config.clone()
        };
        let outcome = session.run_with(config)?;
        write_outcome(&outcome)?;
        Ok(outcome)
    };
    let mut results: Vec<(u64, Result<Outcome>)> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let seeds = seeds.iter().copied().skip(w).step_by(workers).collect::<Vec<_>>();
                let run_one = &run_one;
                s.spawn(move || seeds.into_iter().map(|seed| (seed, run_one(seed))).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    results.sort_by_key(|(seed, _)| *seed);
    results.into_iter().map(|(_, r)| r).collect()
}

/// One line per output for the terminal.
pub fn summary(outcome: &Outcome) -> String {
    let m = &outcome.report.metrics;
    let mut line = format!("wrote {}", outcome.report.output.display());
    line.push_str(&format!(" and {}", outcome.report.config.report.display()));
    if let Some(e) = m.reconstruction_error {
        line.push_str(&format!("; reconstruction error {e:.2}%"));
    }
    if let Some(s) = m.score {
        line.push_str(&format!("; score {s:.6}"));
    }
    if let Some(t) = m.texture_energy {
        line.push_str(&format!("; texture energy {t:.6}"));
    }
    line
}
