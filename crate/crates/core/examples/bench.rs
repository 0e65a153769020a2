//! Sweep beta on the toy radiance field and show that rendered rays scale
//! linearly with it.
//!
//! cargo run --release --example bench

use expansive::cli::{cmd_bench, Backbone, RunConfig};
use expansive::selection::Strategy;

fn main() -> anyhow::Result<()> {
    let out = tempfile_dir()?;
    let mut c = RunConfig::nerf_defaults();
    c.backbone = Backbone::Nerf;
    c.strategies = vec![Strategy::Standard, Strategy::Expansive];
    c.betas = vec![0.1, 0.25, 0.5, 0.75, 1.0];
    c.total_iters = 50;
    c.eval_interval = 50;
    c.eval_samples = 32;
    c.deterministic = true;
    c.out_dir = out.clone();
    let report = cmd_bench(&c)?;
    print!("{}", report.savings_table());
    println!("full tables in {}", out.display());
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join("expansive_bench");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
