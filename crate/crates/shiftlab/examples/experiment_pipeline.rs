//! The config-driven experiment harness, end to end in a temp directory.
//!
//! Writes a small experiment config, then runs the pretrain, refiner
//! training, and adaptation stages the way the `shiftlab` binary does.
//! Every stage is seeded through the config, so rerunning this example
//! reproduces the same artifacts byte for byte.

use shiftlab::datagen::ShiftSpec;
use shiftlab::harness::{
    cmd_adapt, cmd_intermediate, cmd_pretrain, config_hash, AdaptSection, BenchmarkConfig,
    ExperimentConfig, ModelSection, PretrainSection, RefinerSection, StreamSection,
};

fn main() -> shiftlab::Result<()> {
    let cfg = ExperimentConfig {
        seed: 5,
        benchmark: BenchmarkConfig::Toy4 { d: 1.0, beta: 2.0, sigma: 0.4, p: 0.25 },
        model: ModelSection { hidden: vec![16, 16] },
        pretrain: PretrainSection { epochs: 12, per_class: 150, ..Default::default() },
        refiner: RefinerSection { epochs: 6, hidden: 16, per_class: 150, ..Default::default() },
        adapt: AdaptSection { refine: true, ..Default::default() },
        stream: StreamSection {
            shift: ShiftSpec::LongTail { rho: 50.0, inverted: false },
            batch_size: 32,
            per_class: 100,
        },
        ..Default::default()
    };
    println!("config hash: {}", config_hash(&cfg)?);

    let dir = tempfile::tempdir().expect("temp directory");
    let out = dir.path();
    let config_path = out.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&cfg).expect("config serializes"))
        .expect("config file written");

    cmd_pretrain(Some(&config_path), out, None)?;
    cmd_intermediate(Some(&config_path), out, None, None)?;
    cmd_adapt(Some(&config_path), out, None)?;

    println!();
    println!("artifacts in {}:", out.display());
    let mut names: Vec<String> = std::fs::read_dir(out)
        .expect("output directory readable")
        .map(|e| e.expect("directory entry").file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in names {
        println!("  {name}");
    }
    Ok(())
}
