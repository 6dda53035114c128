//! Writes a scripted three-vehicle demo (frames, detector scripts and a
//! config) to the directory given as the first argument.
//!
//!     cargo run --example make_demo -- /tmp/demo
//!     cargo run -- run --config /tmp/demo/config.toml --input /tmp/demo/frames

use std::path::PathBuf;

use phonewatch::pipeline::PipelineMode;
use phonewatch::scenario::{write_demo, Scenario};

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    std::fs::create_dir_all(&dir)?;
    let config = write_demo(&Scenario::three_vehicles(), &dir, PipelineMode::TwoStep, 0)?;
    println!("wrote {}", config.display());
    Ok(())
}
