//! Writes a clustered demo corpus, labeled queries and an experiment file.
//!
//! cargo run -p dpicl-core --example synth_corpus -- OUT_DIR [RECORDS] [QUERIES]

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use dpicl_core::pipeline::RunConfig;
use dpicl_core::retrieval::write_corpus;
use dpicl_core::synthetic::{ClusterSampler, ClusterSpec};

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "demo".into()));
    let records: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let queries: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(50);
    fs::create_dir_all(&out)?;

    let dimension = 16;
    let sampler = ClusterSampler::new(ClusterSpec::balanced(&["world", "sports", "business", "science"], dimension, 0.15), 1);
    write_corpus(BufWriter::new(File::create(out.join("corpus.jsonl"))?), dimension, &sampler.raw_records(records, 0, 2))?;
    let mut qs = sampler.raw_records(queries, 1_000_000, 3);
    for q in &mut qs {
        q.content = format!("query {}", q.id);
    }
    write_corpus(BufWriter::new(File::create(out.join("queries.jsonl"))?), dimension, &qs)?;

    let run = RunConfig::classification_preset(sampler.classes().to_vec(), 1.0);
    let experiment = serde_json::json!({
        "corpus": "corpus.jsonl",
        "queries": "queries.jsonl",
        "output": "report.json",
        "run": run,
    });
    fs::write(out.join("experiment.json"), serde_json::to_string_pretty(&experiment)? + "\n")?;
    println!("wrote {} records and {} queries to {}", records, queries, out.display());
    Ok(())
}
