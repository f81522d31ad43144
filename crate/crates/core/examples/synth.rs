//! Writes synthetic fixtures to disk.
//!
//! ```text
//! cargo run -p cpmi-core --example synth -- benchmark OUT_DIR [SEED]
//! cargo run -p cpmi-core --example synth -- toy OUT_FILE
//! ```
//!
//! `benchmark` writes `world.json` (a table model) and `corpus.jsonl`
//! (labeled references); `toy` writes the small world behind the bridge
//! golden transcript.

use std::path::PathBuf;
use std::process::ExitCode;

use cpmi_core::synth::{hallucination_benchmark, random_table_world, BenchmarkConfig};

fn run(args: &[String]) -> cpmi_core::Result<()> {
    match args {
        [cmd, dir, rest @ ..] if cmd == "benchmark" => {
            let mut cfg = BenchmarkConfig::default();
            if let Some(seed) = rest.first() {
                cfg.seed = seed.parse().expect("seed must be an integer");
            }
            let b = hallucination_benchmark(&cfg)?;
            let dir = PathBuf::from(dir);
            std::fs::create_dir_all(&dir)?;
            b.world.save(&dir.join("world.json"))?;
            b.corpus
                .write_jsonl(std::io::BufWriter::new(std::fs::File::create(dir.join("corpus.jsonl"))?))?;
            println!("wrote {} documents to {}", b.corpus.len(), dir.display());
            Ok(())
        }
        [cmd, file] if cmd == "toy" => {
            random_table_world(3, 5, 3, 2).save(&PathBuf::from(file))?;
            Ok(())
        }
        _ => {
            eprintln!("usage: synth benchmark OUT_DIR [SEED] | synth toy OUT_FILE");
            std::process::exit(2);
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
