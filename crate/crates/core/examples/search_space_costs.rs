//! The default block grid for a few vocabulary sizes and the cost of some
//! single-size and multi-size choices on it.

use nis::search_space::{choice_to_mes, me_cost, se_cost, GridLayout, MeChoice, SeChoice};

fn main() -> nis::error::Result<()> {
    for v in [1_000, 100_000, 10_000_000] {
        let l = GridLayout::default_for_vocab(v, None, None)?;
        println!("v={v}: rows {:?}, cols {:?}, d={}", l.row_splits(), l.col_splits(), l.dim());
    }

    let l = GridLayout::default_for_vocab(1000, None, None)?;
    println!("\nv=1000 single-size actions:");
    for a in 0..l.se_action_count() {
        let c = SeChoice::from_action_index(a, &l)?;
        println!("  {a:>2} {c:?}: {}", se_cost(&l, &c));
    }

    for depths in [vec![5, 2, 0, 1], vec![5, 5, 5, 5], vec![4, 3, 2, 1]] {
        let c = MeChoice(depths);
        let mes = choice_to_mes(&l, &c)?;
        println!("{:?}: cost {}, buckets {:?}", c.0, me_cost(&l, &c), mes.ranges);
    }
    Ok(())
}
