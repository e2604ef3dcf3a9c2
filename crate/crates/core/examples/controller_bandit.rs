//! The controller alone against a fixed reward table over the 21 single-size
//! actions of a 5x4 grid.

use nis::controller::{controller_update, sample_record, BaselineNet, ControllerConfig, ControllerPolicy, SearchMode};
use nis::search_space::GridLayout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nis::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let table: Vec<f64> = (0..21).map(|_| rng.random_range(0.0..1.0)).collect();
    let best = (0..21).max_by(|&a, &b| table[a].total_cmp(&table[b])).unwrap();

    let layout = GridLayout::default_for_vocab(1000, None, None)?;
    let mut policy = ControllerPolicy::new(SearchMode::Se, vec![layout])?;
    let mut baseline = BaselineNet::new(&policy)?;
    let config = ControllerConfig {
        lr: 0.05,
        ..ControllerConfig::default()
    };
    for step in 0..=2000 {
        let records: Vec<_> = (0..32)
            .map(|_| {
                let mut r = sample_record(&policy, &baseline, &mut rng);
                r.reward = table[r.actions[0]];
                r
            })
            .collect();
        let stats = controller_update(&mut policy, &mut baseline, &records, &config)?;
        if step % 400 == 0 {
            println!(
                "step {step:>4}: mean reward {:.3}, entropy {:.3}, argmax {}",
                stats.mean_reward,
                policy.mean_entropy(),
                policy.argmax_actions()[0]
            );
        }
    }
    println!("best action {best} (reward {:.3}), learned {}", table[best], policy.argmax_actions()[0]);
    Ok(())
}
