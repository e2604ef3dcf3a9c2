//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run alone with `cargo test --release --test acceptance`. Pass criterion
//! numbers as arguments to run a subset, e.g. `-- 1 4 5`.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::Instant;

use nis::autodiff::{check_gradients, NodeId, Tape};
use nis::config::RunConfig;
use nis::controller::{
    controller_update, sample_record, BaselineNet, ChoiceRecord, ControllerConfig, ControllerPolicy, SearchMode,
};
use nis::error::Result;
use nis::model::StoredGrid;
use nis::multi_size::{MeLayer, Reduction};
use nis::oracle::{brute_force_best, uniform_baseline_sweep};
use nis::params::ParamStore;
use nis::reward::roc_auc;
use nis::search_space::{me_cost, se_cost, BlockGrid, GridLayout, MeChoice, Mes, SeChoice};
use nis::tensor::Tensor;
use nis::trainer::{run_search, NullSink, SearchResult, SearchState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_splits(rng: &mut ChaCha8Rng, parts: usize, max: usize) -> Vec<usize> {
    (0..parts).map(|_| rng.random_range(1..=max)).collect()
}

fn random_layout(rng: &mut ChaCha8Rng, max_chunks: usize, max_rows: usize, max_cols: usize) -> GridLayout {
    let s = rng.random_range(2..=max_chunks);
    let t = rng.random_range(2..=max_chunks);
    GridLayout::new(random_splits(rng, s, max_rows), random_splits(rng, t, max_cols)).unwrap()
}

fn random_me_choice(rng: &mut ChaCha8Rng, layout: &GridLayout) -> MeChoice {
    let s = layout.num_row_chunks();
    MeChoice((0..layout.num_col_chunks()).map(|_| rng.random_range(0..=s)).collect())
}

fn random_se_choice(rng: &mut ChaCha8Rng, layout: &GridLayout) -> SeChoice {
    SeChoice::from_action_index(rng.random_range(0..layout.se_action_count()), layout).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn random_bags(rng: &mut ChaCha8Rng, n: usize, vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| (0..rng.random_range(1..=max_len)).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

/// Builds one of six randomized graph families; together they use every tape op.
fn gradient_graph(index: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut store = ParamStore::new();
    let n = rng.random_range(2..=4);
    let hidden = rng.random_range(2..=4);
    let classes = rng.random_range(3..=6);
    let build: Box<dyn Fn(&mut Tape<'_>) -> Result<NodeId>> = match index % 6 {
        0 => {
            let layout = random_layout(rng, 3, 4, 3);
            let grid = StoredGrid::new(BlockGrid::init(layout.clone(), rng), &mut store, "g").unwrap();
            let w = store.add("w", random_tensor(rng, &[layout.dim(), hidden])).unwrap();
            let b = store.add("b", random_tensor(rng, &[hidden])).unwrap();
            let labels = store.add("labels", random_tensor(rng, &[classes, hidden])).unwrap();
            let bags: Vec<Vec<u32>> = random_bags(rng, n, layout.vocab(), 3)
                .into_iter()
                .map(|b| b.into_iter().map(|k| k as u32).collect())
                .collect();
            let depths: Vec<Vec<usize>> = (0..n).map(|_| random_me_choice(rng, &layout).0).collect();
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            Box::new(move |t| {
                let bag_refs: Vec<&[u32]> = bags.iter().map(|b| b.as_slice()).collect();
                let depth_refs: Vec<&[usize]> = depths.iter().map(|d| d.as_slice()).collect();
                let e = grid.forward(t, &bag_refs, &depth_refs);
                let wn = t.param(w);
                let h = t.matmul(e, wn);
                let bn = t.param(b);
                let h = t.add_row(h, bn);
                let h = t.relu(h);
                let ln = t.param(labels);
                let logits = t.matmul_bt(h, ln);
                Ok(t.softmax_xent(logits, targets.clone()))
            })
        }
        1 => {
            let d0 = rng.random_range(2..=4);
            let mes = Mes::new(vec![(rng.random_range(1..=4), d0), (rng.random_range(1..=5), rng.random_range(1..=d0))]).unwrap();
            let vocab = mes.vocab();
            let layer = MeLayer::build(mes, rng).into_store(&mut store, "me").unwrap();
            let w = store.add("w", random_tensor(rng, &[d0, hidden])).unwrap();
            let table = store.add("table", random_tensor(rng, &[classes, hidden])).unwrap();
            let bias = store.add("bias", random_tensor(rng, &[classes])).unwrap();
            let bags = random_bags(rng, n, vocab, 3);
            let candidates: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    let mut c: Vec<usize> = (0..classes).collect();
                    c.shuffle(rng);
                    c.truncate(rng.random_range(2..=classes));
                    c
                })
                .collect();
            Box::new(move |t| {
                let e = layer.forward(t, &bags, Reduction::Mean);
                let wn = t.param(w);
                let q = t.matmul(e, wn);
                let tn = t.param(table);
                let bn = t.param(bias);
                Ok(t.sampled_softmax_xent(q, tn, bn, candidates.clone()))
            })
        }
        2 => {
            let (va, vb) = (rng.random_range(2..=6), rng.random_range(2..=6));
            let (da, db) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let ta = store.add("ta", random_tensor(rng, &[va, da])).unwrap();
            let tb = store.add("tb", random_tensor(rng, &[vb, db])).unwrap();
            let w = store.add("w", random_tensor(rng, &[da + db, 1])).unwrap();
            let b = store.add("b", random_tensor(rng, &[1])).unwrap();
            let bags_a = random_bags(rng, n, va, 2);
            let bags_b = random_bags(rng, n, vb, 2);
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
            let factor = rng.random_range(0.5..2.0);
            Box::new(move |t| {
                let an = t.param(ta);
                let a = t.gather_sum(an, bags_a.clone());
                let bn = t.param(tb);
                let bb = t.gather_sum(bn, bags_b.clone());
                let x = t.concat_cols(vec![a, bb]);
                let x = t.scale(x, factor);
                let wn = t.param(w);
                let o = t.matmul(x, wn);
                let bias = t.param(b);
                let o = t.add_row(o, bias);
                Ok(t.sigmoid_xent(o, labels.clone()))
            })
        }
        3 => {
            let cols = rng.random_range(2..=4);
            let x = random_tensor(rng, &[n, cols]);
            let w = store.add("w", random_tensor(rng, &[cols, hidden])).unwrap();
            let c = store.add("c", random_tensor(rng, &[n, hidden])).unwrap();
            Box::new(move |t| {
                let xn = t.input(x.clone());
                let wn = t.param(w);
                let h = t.matmul(xn, wn);
                let cn = t.param(c);
                let h = t.add(h, cn);
                let h = t.relu(h);
                Ok(t.mean(h))
            })
        }
        4 => {
            let layout = random_layout(rng, 3, 3, 3);
            let grid = StoredGrid::new(BlockGrid::init(layout.clone(), rng), &mut store, "g").unwrap();
            let d = layout.dim();
            let mes = Mes::new(vec![(rng.random_range(1..=4), d), (rng.random_range(1..=4), rng.random_range(1..=d))]).unwrap();
            let vocab = mes.vocab().min(layout.vocab());
            let layer = MeLayer::build(mes, rng).into_store(&mut store, "me").unwrap();
            let bags = random_bags(rng, n, vocab, 2);
            let bags32: Vec<Vec<u32>> = bags.iter().map(|b| b.iter().map(|&k| k as u32).collect()).collect();
            let depths: Vec<Vec<usize>> = (0..n).map(|_| random_me_choice(rng, &layout).0).collect();
            let factors: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
            Box::new(move |t| {
                let bag_refs: Vec<&[u32]> = bags32.iter().map(|b| b.as_slice()).collect();
                let depth_refs: Vec<&[usize]> = depths.iter().map(|d| d.as_slice()).collect();
                let a = grid.forward(t, &bag_refs, &depth_refs);
                let b = layer.forward(t, &bags, Reduction::Sum);
                let s = t.add(a, b);
                let s = t.scale_rows(s, factors.clone());
                let s = t.relu(s);
                Ok(t.sum(s))
            })
        }
        _ => {
            let vocab = rng.random_range(3..=8);
            let dim = rng.random_range(2..=4);
            let table = store.add("table", random_tensor(rng, &[vocab, dim])).unwrap();
            let labels = store.add("labels", random_tensor(rng, &[classes, dim])).unwrap();
            let bags = random_bags(rng, n, vocab, 3);
            let factors: Vec<f64> = bags.iter().map(|b| 1.0 / b.len() as f64).collect();
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            Box::new(move |t| {
                let tn = t.param(table);
                let e = t.gather_sum(tn, bags.clone());
                let e = t.scale_rows(e, factors.clone());
                let ln = t.param(labels);
                let logits = t.matmul_bt(e, ln);
                Ok(t.softmax_xent(logits, targets.clone()))
            })
        }
    };
    check_gradients(&store, |t| build(t), 1e-6).unwrap()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let errors: Vec<f64> = (0..50).map(|i| gradient_graph(i, &mut rng)).collect();
    let worst = errors.iter().cloned().fold(0.0, f64::max);
    outcome(worst < 1e-4, format!("50 graphs, max relative error {worst:.2e}"))
}

/// Scalars read across every id of the vocabulary, counted from lookup traces.
fn instrumented_count(grid: &BlockGrid, lookup: &dyn Fn(usize, &mut dyn FnMut(nis::search_space::BlockRead))) -> u64 {
    let layout = grid.layout();
    let mut seen: HashSet<(usize, usize, usize)> = HashSet::new();
    let mut count = 0u64;
    for k in 0..layout.vocab() {
        lookup(k, &mut |r| {
            if seen.insert((r.row_chunk, r.col_chunk, r.row)) {
                count += layout.col_splits()[r.col_chunk] as u64;
            }
        });
    }
    count
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    for i in 0..1000 {
        let layout = random_layout(&mut rng, 5, 12, 6);
        let grid = BlockGrid::init(layout.clone(), &mut rng);
        let (expected, counted) = if i % 2 == 0 {
            let c = random_se_choice(&mut rng, &layout);
            let n = instrumented_count(&grid, &|k, tr| {
                grid.se_lookup_traced(&c, k, tr).unwrap();
            });
            (se_cost(&layout, &c), n)
        } else {
            let c = random_me_choice(&mut rng, &layout);
            let n = instrumented_count(&grid, &|k, tr| {
                grid.me_lookup_traced(&c, k, tr).unwrap();
            });
            (me_cost(&layout, &c), n)
        };
        if expected != counted {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 (grid, choice) pairs, {mismatches} mismatches"))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_rect, mut worst_layer) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let layout = random_layout(&mut rng, 5, 20, 6);
        let grid = BlockGrid::init(layout.clone(), &mut rng);
        let se = random_se_choice(&mut rng, &layout);
        let rect = se.to_me_choice(&layout);
        let me = random_me_choice(&mut rng, &layout);
        let layer = MeLayer::from_grid(&grid, &me).unwrap();
        for k in 0..layout.vocab() {
            let a = grid.se_lookup(&se, k).unwrap();
            let b = grid.me_lookup(&rect, k).unwrap();
            worst_rect = worst_rect.max(max_abs_diff(&a, &b));
            let reference = grid.me_lookup(&me, k).unwrap();
            let from_layer = match &layer {
                Some(l) if k < l.vocab() => l.embed(k).unwrap(),
                _ => Tensor::zeros(&[layout.dim()]),
            };
            worst_layer = worst_layer.max(max_abs_diff(&reference, &from_layer));
        }
    }
    outcome(
        worst_rect <= 1e-10 && worst_layer <= 1e-10,
        format!("100 grids, SE vs rectangular ME {worst_rect:.1e}, materialized layer {worst_layer:.1e}"),
    )
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut doubled = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                doubled += 2;
            } else if scores[i] == scores[j] {
                doubled += 1;
            }
        }
    }
    doubled as f64 / (2 * p * n) as f64
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 7.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        if roc_auc(&scores, &labels) != Some(brute_force_auc(&scores, &labels)) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("500 instances with ties, {mismatches} mismatches"))
}

fn criterion_5() -> Outcome {
    let layout = GridLayout::default_for_vocab(1000, None, None).unwrap();
    let config = ControllerConfig {
        lr: 0.05,
        ..ControllerConfig::default()
    };
    let mut successes = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<f64> = (0..21).map(|_| rng.random_range(0.0..1.0)).collect();
        let best = (0..21).max_by(|&a, &b| table[a].total_cmp(&table[b])).unwrap();
        let mut policy = ControllerPolicy::new(SearchMode::Se, vec![layout.clone()]).unwrap();
        let mut baseline = BaselineNet::new(&policy).unwrap();
        for _ in 0..2000 {
            let records: Vec<ChoiceRecord> = (0..32)
                .map(|_| {
                    let mut r = sample_record(&policy, &baseline, &mut rng);
                    r.reward = table[r.actions[0]];
                    r
                })
                .collect();
            controller_update(&mut policy, &mut baseline, &records, &config).unwrap();
        }
        if policy.argmax_actions()[0] == best {
            successes += 1;
        }
    }
    outcome(successes >= 19, format!("{successes}/20 seeds recover the best action"))
}

struct SearchRuns {
    toy: Vec<SearchResult>,
    me: Vec<SearchResult>,
}

fn criterion_6(runs: &mut SearchRuns) -> Outcome {
    let mut matches = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut config = RunConfig::preset("toy_retrieval").unwrap();
        config.seed = seed;
        let data = nis::tasks::generate(&config.task, seed).unwrap();
        let result = run_search(&config, &data, &mut NullSink).unwrap();
        let (best, _) = brute_force_best(&config, &data).unwrap();
        let searched = result.retrained_test.as_ref().unwrap().sampled_recall_at_1.unwrap();
        let oracle = best.test.sampled_recall_at_1.unwrap();
        let ok = (searched - oracle).abs() <= 0.02;
        matches += usize::from(ok);
        lines.push(format!("seed {seed}: {searched:.4} vs {oracle:.4}"));
        runs.toy.push(result);
    }
    outcome(matches >= 4, format!("{matches}/5 within 2pp of the oracle ({})", lines.join("; ")))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn criterion_8(runs: &mut SearchRuns) -> Outcome {
    let (mut me, mut se, mut uniform) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let mut config = RunConfig::preset("me_retrieval").unwrap();
        config.seed = seed;
        let data = nis::tasks::generate(&config.task, seed).unwrap();
        config.search.mode = SearchMode::Me;
        let r = run_search(&config, &data, &mut NullSink).unwrap();
        me.push(r.test_metrics().recall_at_1.unwrap());
        runs.me.push(r);
        config.search.mode = SearchMode::Se;
        let r = run_search(&config, &data, &mut NullSink).unwrap();
        se.push(r.test_metrics().recall_at_1.unwrap());
        let (best, _) = uniform_baseline_sweep(&config, &data).unwrap();
        uniform.push(best.test.recall_at_1.unwrap());
    }
    let (m, s, u) = (median(me), median(se), median(uniform));
    outcome(
        m >= s && s >= u && m >= u,
        format!("median test Recall@1: ME {m:.4}, SE {s:.4}, uniform {u:.4}"),
    )
}

fn criterion_7(runs: &SearchRuns) -> Outcome {
    let all: Vec<&SearchResult> = runs.toy.iter().chain(&runs.me).collect();
    let over: Vec<String> = all
        .iter()
        .filter(|r| r.total_cost as f64 > 1.05 * r.budget as f64)
        .map(|r| format!("{:?} seed {} cost {} budget {}", r.mode, r.seed, r.total_cost, r.budget))
        .collect();
    let worst = all.iter().map(|r| r.total_cost as f64 / r.budget as f64).fold(0.0, f64::max);
    outcome(
        !all.is_empty() && over.is_empty(),
        format!("{} runs, max cost/budget {worst:.3} {}", all.len(), over.join("; ")),
    )
}

fn criterion_9() -> Outcome {
    let mut config = RunConfig::preset("toy_retrieval").unwrap();
    config.search.steps = 2000;
    config.search.warmup_steps = Some(400);
    config.search.audit = true;
    config.search.retrain = false;
    let data = nis::tasks::generate(&config.task, config.seed).unwrap();
    let mut state = SearchState::new(&config, &data).unwrap();
    let before = (state.policy.checksum(), state.baseline.checksum());
    state.warmup_phase(400, &mut NullSink).unwrap();
    let after = (state.policy.checksum(), state.baseline.checksum());
    state.run(&mut NullSink).unwrap();
    let a = &state.audit;
    let steps_ok = a.separation_checks >= 2000;
    outcome(
        before == after && a.separation_violations == 0 && a.reward_mismatches == 0 && steps_ok,
        format!(
            "warm-up checksum {}, {} separation checks with {} violations, {} reward audits with {} mismatches",
            if before == after { "constant" } else { "changed" },
            a.separation_checks,
            a.separation_violations,
            a.reward_checks,
            a.reward_mismatches
        ),
    )
}

fn criterion_10(runs: &SearchRuns) -> Outcome {
    let Some(first) = runs.toy.first() else {
        return outcome(false, "criterion 6 produced no run to compare".into());
    };
    let config = RunConfig::preset("toy_retrieval").unwrap();
    let data = nis::tasks::generate(&config.task, config.seed).unwrap();
    let again = run_search(&config, &data, &mut NullSink).unwrap();
    let (a, b) = (
        serde_json::to_string(first).unwrap(),
        serde_json::to_string(&again).unwrap(),
    );
    outcome(a == b, format!("SearchResult documents of {} bytes {}", a.len(), if a == b { "identical" } else { "differ" }))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted: HashSet<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let run = |i: usize| wanted.is_empty() || wanted.contains(&i);
    let mut runs = SearchRuns {
        toy: Vec::new(),
        me: Vec::new(),
    };
    let mut failures = 0;
    let mut report = |i: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {i:>2} {} {name}: {} ({secs:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failures += 1;
        }
    };
    if run(1) {
        report(1, "gradient correctness", &mut criterion_1);
    }
    if run(2) {
        report(2, "cost exactness", &mut criterion_2);
    }
    if run(3) {
        report(3, "SE/ME equivalence", &mut criterion_3);
    }
    if run(4) {
        report(4, "ROC-AUC oracle", &mut criterion_4);
    }
    if run(5) {
        report(5, "bandit convergence", &mut criterion_5);
    }
    if run(6) || run(7) || run(10) {
        report(6, "oracle match", &mut || criterion_6(&mut runs));
    }
    if run(8) || run(7) {
        report(8, "ME over SE over uniform", &mut || criterion_8(&mut runs));
    }
    if run(7) {
        report(7, "budget satisfaction", &mut || criterion_7(&runs));
    }
    if run(9) {
        report(9, "warm-up and separation", &mut criterion_9);
    }
    if run(10) {
        report(10, "determinism", &mut || criterion_10(&runs));
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
