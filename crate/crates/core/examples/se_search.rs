//! Single-size search on the toy retrieval task: one query feature on a
//! 5x4 grid with a budget that admits about half of the 21 actions.
//!
//! Prints the controller trace, the exported architecture, and test metrics
//! of the shared-weight model and of the retrained architecture.

use nis::config::RunConfig;
use nis::trainer::{run_search, NullSink};

fn main() -> nis::error::Result<()> {
    let config = RunConfig::preset("toy_retrieval")?;
    let data = nis::tasks::generate(&config.task, config.seed)?;
    let result = run_search(&config, &data, &mut NullSink)?;

    let every = (result.objective_trace.len() / 8).max(1);
    for p in result.objective_trace.iter().step_by(every) {
        println!("step {:>5}: objective {:.3}, reward {:.3}, cost {:.0}", p.step, p.objective, p.reward, p.cost);
    }
    for f in &result.features {
        println!("{}: {:?}, cost {}", f.name, f.choice, f.cost);
    }
    println!("total cost {} / budget {}", result.total_cost, result.budget);
    println!("shared weights: {:?}", result.shared_test);
    println!("retrained:      {:?}", result.retrained_test);
    Ok(())
}
