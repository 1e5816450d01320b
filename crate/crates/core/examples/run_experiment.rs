// SPDX-License-Identifier: Apache-2.0

//! Runs an experiment config and prints the Markdown report.
//!
//! `cargo run --release -p dnncov --example run_experiment -- fixtures/experiment.toml`

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = std::env::args().nth(1).ok_or("usage: run_experiment CONFIG")?;
    let (report, written) = dnncov::pipeline::experiment_to_dir(config.as_ref(), None)?;
    print!("{}", report.to_markdown());
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}
