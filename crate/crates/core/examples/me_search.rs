//! Multi-size search with three features: a query id, a coarse derived id,
//! and a noise bag. The budget rules out full width for the whole vocabulary.

use nis::config::RunConfig;
use nis::trainer::{run_search, NullSink};

fn main() -> nis::error::Result<()> {
    let config = RunConfig::preset("me_retrieval")?;
    let data = nis::tasks::generate(&config.task, config.seed)?;
    let result = run_search(&config, &data, &mut NullSink)?;
    for f in &result.features {
        println!("{:<13} {:?}", f.name, f.choice);
        println!("{:<13} buckets (count, dim) {:?}, cost {}", "", f.mes, f.cost);
    }
    println!("total cost {} / budget {}", result.total_cost, result.budget);
    let m = result.test_metrics();
    println!("test Recall@1 {:.4}, Recall@5 {:.4}", m.recall_at_1.unwrap(), m.recall_at_5.unwrap());
    Ok(())
}
