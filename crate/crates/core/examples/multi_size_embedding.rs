//! Materializes a multi-size choice from a block grid as a standalone
//! bucketed embedding and checks that both give the same vectors.

use nis::multi_size::{MeLayer, Reduction};
use nis::search_space::{BlockGrid, GridLayout, MeChoice};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nis::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layout = GridLayout::default_for_vocab(1000, None, None)?;
    let grid = BlockGrid::init(layout.clone(), &mut rng);
    let choice = MeChoice(vec![5, 3, 1, 1]);
    let layer = MeLayer::from_grid(&grid, &choice)?.expect("choice covers some ids");
    println!("buckets (count, dim): {:?}", layer.mes().pairs());
    println!("bucket scalars: {}", layer.bucket_param_count());

    let mut worst: f64 = 0.0;
    for k in 0..layout.vocab() {
        let a = grid.me_lookup(&choice, k)?;
        let b = layer.embed(k)?;
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    println!("max difference between grid lookup and layer: {worst:.1e}");

    let bag = layer.mbow(&[3, 3, 250, 900], Reduction::Mean)?;
    println!("mean of a 4-id bag, first entries: {:?}", &bag.data()[..4]);
    Ok(())
}
