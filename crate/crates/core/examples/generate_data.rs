//! Generates the planted retrieval dataset, writes it in the binary record
//! format, reads it back, and prints a few statistics.

use nis::config::RunConfig;
use nis::tasks::{generate, DatasetSplit};

fn main() -> nis::error::Result<()> {
    let config = RunConfig::preset("me_retrieval")?;
    let data = generate(&config.task, config.seed)?;
    println!(
        "{} features (vocabs {:?}), {} / {} / {} examples",
        data.num_features(),
        data.vocabs,
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    for e in data.train.iter().take(3) {
        println!("  features {:?} -> label {}", e.features, e.label);
    }

    let head = data.train.iter().filter(|e| e.features[0][0] < 100).count();
    println!("share of query ids in the top 100: {:.3}", head as f64 / data.train.len() as f64);

    let path = std::env::temp_dir().join("nis_example_dataset.bin");
    data.write(&path)?;
    let back = DatasetSplit::read(&path)?;
    println!("round trip through {}: {}", path.display(), back == data);
    Ok(())
}
