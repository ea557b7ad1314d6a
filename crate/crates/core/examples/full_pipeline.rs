//! Every stage of the command-line pipeline on the smoke preset, driven from
//! code: generate, split, extract, train both models, predict, evaluate,
//! classify, report.
//!
//! ```text
//! cargo run --release --example full_pipeline -- [out_dir]
//! ```

use std::path::PathBuf;

use dermaseg::cli::{RunConfig, Runner};

fn main() -> dermaseg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dermaseg-runs"));
    let cfg = RunConfig {
        out_dir: out,
        ..RunConfig::smoke()
    };
    let runner = Runner::new(cfg, false);
    runner.pipeline()?;
    println!("artifacts under {}", runner.run_dir().display());
    Ok(())
}
