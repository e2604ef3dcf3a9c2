//! Writes two run directories the way the CLI does (a search and an oracle
//! sweep on a shortened toy config) and prints the comparison report.

use nis::config::RunConfig;
use nis::oracle::{enumerate_candidates, sweep, write_sweep_table};
use nis::run::{self, Architecture, RunDir};
use nis::trainer::{run_search, JsonlSink, NullSink};

fn main() -> nis::error::Result<()> {
    let mut config = RunConfig::preset("toy_retrieval")?;
    config.search.steps = 2000;
    let root = std::env::temp_dir().join("nis_example_report");
    let _ = std::fs::remove_dir_all(&root);

    let search_dir = root.join("search");
    {
        let dir = RunDir::open(&search_dir)?;
        dir.write_config(&config)?;
        let data = dir.dataset(&config)?;
        let mut sink = JsonlSink::create(&dir.file(run::METRICS_FILE))?;
        let result = run_search(&config, &data, &mut sink)?;
        dir.write_json(run::SEARCH_RESULT_FILE, &result)?;
        dir.write_json(run::ARCHITECTURE_FILE, &Architecture::from_search(config.task.kind, &result))?;
    }

    let sweep_dir = root.join("sweep");
    {
        let dir = RunDir::open(&sweep_dir)?;
        dir.write_config(&config)?;
        let data = dir.dataset(&config)?;
        let (_, reports) = sweep(&config, &data, &enumerate_candidates(&config)?, &mut NullSink)?;
        write_sweep_table(&dir.file(run::SWEEP_TABLE_FILE), &reports)?;
    }

    let report = run::report(&[search_dir, sweep_dir])?;
    report.write(&root)?;
    print!("{}", report.to_markdown());
    println!("\nwritten to {}", root.display());
    Ok(())
}
