//! Single-size search on the ranking task, rewarded by ROC-AUC over groups
//! of validation examples.

use nis::config::RunConfig;
use nis::trainer::{run_search, VecSink};

fn main() -> nis::error::Result<()> {
    let config = RunConfig::preset("toy_ranking")?;
    let data = nis::tasks::generate(&config.task, config.seed)?;
    let mut sink = VecSink::default();
    let result = run_search(&config, &data, &mut sink)?;
    let positives = data.test.iter().filter(|e| e.label == 1).count();
    println!("test positives: {positives} of {}", data.test.len());
    println!(
        "{} main steps, {} controller steps, {} skipped",
        result.main_steps, result.controller_steps, result.skipped_controller_steps
    );
    for f in &result.features {
        println!("{}: {:?}", f.name, f.choice);
    }
    println!("total cost {} / budget {}", result.total_cost, result.budget);
    println!("test AUC {:.4}", result.test_metrics().auc.unwrap());
    Ok(())
}
