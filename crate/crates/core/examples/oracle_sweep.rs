//! Trains every feasible single-size candidate of the toy retrieval task from
//! scratch and ranks them by validation objective.

use nis::config::RunConfig;
use nis::oracle::{brute_force_best, rank};

fn main() -> nis::error::Result<()> {
    let config = RunConfig::preset("toy_retrieval")?;
    let data = nis::tasks::generate(&config.task, config.seed)?;
    let (best, reports) = brute_force_best(&config, &data)?;
    println!("{:<40} {:>6} {:>10} {:>10}", "choice", "cost", "val", "test");
    for r in rank(&reports) {
        println!(
            "{:<40} {:>6} {:>10.4} {:>10.4}",
            format!("{:?}", r.choices[0]),
            r.cost,
            r.val_objective,
            r.test.sampled_recall_at_1.unwrap()
        );
    }
    println!("best: {:?}", best.choices);
    Ok(())
}
