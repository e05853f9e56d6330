//! Regenerates the scenario files under `scenarios/`.
//!
//! cargo run -p hybrid-planner --example write_corpus -- <repo-root>

use std::path::PathBuf;

use hybrid_planner::sim::corpus::{shipped, training};

fn main() -> std::io::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into())).join("scenarios");
    std::fs::create_dir_all(root.join("train"))?;
    for (dir, files) in [(root.clone(), shipped()), (root.join("train"), training())] {
        for f in files {
            let path = dir.join(format!("{}.json", f.name));
            std::fs::write(&path, serde_json::to_string_pretty(&f).expect("serializes") + "\n")?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
