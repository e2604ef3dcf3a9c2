//! Builds a small two-tower-style graph on the tape and compares its
//! analytic gradients against central finite differences.

use nis::autodiff::check_gradients;
use nis::params::ParamStore;
use nis::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nis::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let table = store.add("table", Tensor::uniform(&[10, 4], 0.5, &mut rng))?;
    let w = store.add("w", Tensor::uniform(&[4, 6], 0.5, &mut rng))?;
    let b = store.add("b", Tensor::uniform(&[6], 0.5, &mut rng))?;
    let labels = store.add("labels", Tensor::uniform(&[5, 6], 0.5, &mut rng))?;
    let bags = vec![vec![0, 3], vec![7], vec![2, 2, 9]];

    let err = check_gradients(
        &store,
        |t| {
            let tn = t.param(table);
            let e = t.gather_sum(tn, bags.clone());
            let wn = t.param(w);
            let h = t.matmul(e, wn);
            let bn = t.param(b);
            let h = t.add_row(h, bn);
            let h = t.relu(h);
            let ln = t.param(labels);
            let logits = t.matmul_bt(h, ln);
            Ok(t.softmax_xent(logits, vec![1, 4, 0]))
        },
        1e-6,
    )?;
    println!("{} parameters, max relative gradient error {err:.2e}", store.scalar_count());
    Ok(())
}
