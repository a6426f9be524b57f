//! Instrumented frame-count sweep; prints the CSV.
//!
//! cargo run --example sweep_csv -- [m_frames|m_framesize|n|cross_layers|corpus_size]

use anyhow::Result;
use perceiver_vl::cost::{sweep_csv, SweepSpec, SweepVariable};
use perceiver_vl::model::ModelConfig;
use perceiver_vl::sweep::run_sweep;

fn main() -> Result<()> {
    let variable: SweepVariable = std::env::args().nth(1).unwrap_or_else(|| "m_frames".into()).parse()?;
    let grid = match variable {
        SweepVariable::MFrames => vec![1, 2, 4, 8],
        SweepVariable::MFramesize => vec![16, 32, 64],
        SweepVariable::N => vec![32, 64, 128, 256],
        SweepVariable::CrossLayers => vec![1, 2, 3],
        SweepVariable::CorpusSize => vec![8, 16, 32],
    };
    let mut model = ModelConfig::default();
    model.encoder.n_latents = 32;
    let rows = run_sweep(&SweepSpec::new(variable, grid, model), 0)?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}
