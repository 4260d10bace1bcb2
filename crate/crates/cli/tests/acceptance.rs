//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any of them fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use focusicl::attention::{
    filtering_attention, hierarchical_attention, lambda_decompose, linear_attention, standard_attention,
    AttentionConfig, AttentionInput, CombineMode, RowRole,
};
use focusicl::bench::{
    cost_model, dispersion_sweep, gen_counta, measure_cost, padding_experiment, CountATask, EvalOptions, Harness,
};
use focusicl::hypersearch::{select_hyperparameters, PplTable};
use focusicl::layout::{partition, Demo};
use focusicl::model::{forward, loss_and_grad, sequence_loss, ModelConfig, ModelWeights, TraceSpec};
use focusicl::numkernel::{Matrix, SeededRng};
use twofloat::TwoFloat;

struct Trained {
    dir: tempfile::TempDir,
    weights: ModelWeights,
    smoothed: Vec<f64>,
    elapsed: Duration,
}

fn cli(args: &[&str], dir: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_focusicl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// The default toy model trained for 200 steps on CountA through the CLI.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        cli(&["--seed", "0", "train", "--out", "w.bin", "--steps", "200", "--loss-out", "loss.csv"], dir.path());
        let elapsed = start.elapsed();
        let text = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "smoothed").unwrap();
        let smoothed = lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
        let weights = ModelWeights::load(&dir.path().join("w.bin"), None).unwrap();
        Trained {
            dir,
            weights,
            smoothed,
            elapsed,
        }
    })
}

fn weights_path() -> PathBuf {
    trained().dir.path().join("w.bin")
}

struct Ctx {
    query: Vec<f64>,
    keys: Matrix<f64>,
    values: Matrix<f64>,
    roles: Vec<RowRole>,
}

impl Ctx {
    fn random(rng: &mut SeededRng, demos: usize, queries: usize, d: usize, scale: f64) -> Self {
        let n = demos + queries;
        Self {
            query: (0..d).map(|_| rng.uniform(-scale, scale)).collect(),
            keys: Matrix::from_fn(n, d, |_, _| rng.uniform(-1.0, 1.0)),
            values: Matrix::from_fn(n, d, |_, _| rng.uniform(-1.0, 1.0)),
            roles: (0..n)
                .map(|i| if i < demos { RowRole::Demo } else { RowRole::QueryOrSelf })
                .collect(),
        }
    }

    fn input(&self) -> AttentionInput<'_, f64> {
        AttentionInput::new(&self.query, &self.keys, &self.values, &self.roles)
    }

    fn demo_rows(&self) -> usize {
        self.roles.iter().filter(|&&r| r == RowRole::Demo).count()
    }

    /// Visibility masks for contiguous demonstration batches, each together with every
    /// query-side row.
    fn batch_masks(&self, batch: usize) -> Vec<Vec<bool>> {
        let m = self.demo_rows();
        (0..m.div_ceil(batch))
            .map(|b| {
                (0..self.roles.len())
                    .map(|r| self.roles[r] == RowRole::QueryOrSelf || (b * batch..(b + 1) * batch).contains(&r))
                    .collect()
            })
            .collect()
    }
}

fn random_model(seed: u64) -> ModelWeights {
    ModelWeights::init(&ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        max_positions: 1024,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn demos(rng: &mut SeededRng, n: usize) -> Vec<Demo> {
    gen_counta(rng, n, 3..=6).unwrap().iter().map(CountATask::demo).collect()
}

fn equivalence_chain() {
    let w = random_model(3);
    let h = Harness::new(&w);
    let mut rng = SeededRng::new(100);
    let start = Instant::now();
    for _ in 0..100 {
        let n = rng.range_inclusive(1, 6);
        let query = gen_counta(&mut rng, 1, 3..=6).unwrap()[0].query();
        let layout = h.layout(&demos(&mut rng, n), &query).unwrap();
        let std = forward(&w, &layout, None, AttentionConfig::standard(), TraceSpec::logits()).unwrap();
        let filt = forward(&w, &layout, None, AttentionConfig::filtering(0.0), TraceSpec::logits()).unwrap();
        let part = partition(&layout, n).unwrap();
        let cfg = AttentionConfig::hierarchical(0.0, n);
        let hier = forward(&w, &layout, Some(&part), cfg, TraceSpec::logits()).unwrap();
        assert!(!std.logits.is_empty());
        assert_eq!(std.logits, filt.logits);
        assert_eq!(std.logits, hier.logits);
    }
    assert!(start.elapsed() < Duration::from_secs(60));
}

fn lambda_identity() {
    let mut rng = SeededRng::new(200);
    let start = Instant::now();
    for _ in 0..1000 {
        let demos = rng.range_inclusive(0, 12);
        let queries = rng.range_inclusive(1, 6);
        let d = rng.range_inclusive(1, 8);
        let ctx = Ctx::random(&mut rng, demos, queries, d, 4.0);
        let dec = lambda_decompose(&ctx.input()).unwrap();
        let full = standard_attention(&ctx.input()).unwrap();
        for (a, b) in dec.recombine().iter().zip(&full.output) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
        assert!((dec.lambda - full.lambda).abs() <= 1e-12);
    }
    assert!(start.elapsed() < Duration::from_secs(60));
}

fn linear_additivity() {
    let mut rng = SeededRng::new(300);
    // Multiples of 1/8 in [-2, 2]: every product and partial sum is exact in f64.
    let dyadic = |rng: &mut SeededRng| rng.range_inclusive(0, 32) as f64 / 8.0 - 2.0;
    for _ in 0..1000 {
        let n = rng.range_inclusive(1, 20);
        let d = rng.range_inclusive(1, 6);
        let query: Vec<f64> = (0..d).map(|_| dyadic(&mut rng)).collect();
        let keys = Matrix::from_fn(n, d, |_, _| dyadic(&mut rng));
        let values = Matrix::from_fn(n, d, |_, _| dyadic(&mut rng));
        let roles = vec![RowRole::Demo; n];
        let input = AttentionInput::new(&query, &keys, &values, &roles);
        let whole = linear_attention(&input).unwrap();
        let mut cuts: Vec<usize> = (0..rng.range_inclusive(0, 4)).map(|_| rng.range_inclusive(0, n)).collect();
        cuts.extend([0, n]);
        cuts.sort_unstable();
        let mut sum = vec![0.0; d];
        for w in cuts.windows(2) {
            let vis: Vec<bool> = (0..n).map(|r| (w[0]..w[1]).contains(&r)).collect();
            let part = linear_attention(&input.with_visibility(&vis)).unwrap();
            for (s, x) in sum.iter_mut().zip(part) {
                *s += x;
            }
        }
        assert_eq!(sum, whole);
    }
}

fn lambda_monotonicity() {
    let mut rng = SeededRng::new(400);
    for _ in 0..1000 {
        let demos = rng.range_inclusive(0, 10);
        let queries = rng.range_inclusive(1, 4);
        let d = rng.range_inclusive(1, 8);
        let mut ctx = Ctx::random(&mut rng, demos, queries, d, 2.0);
        let before = standard_attention(&ctx.input()).unwrap().lambda;
        let key: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let value: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        // The new demonstration row goes in front of the query side.
        let mut keys = Matrix::zeros(0, d);
        let mut values = Matrix::zeros(0, d);
        for r in 0..demos {
            keys.push_row(ctx.keys.row(r)).unwrap();
            values.push_row(ctx.values.row(r)).unwrap();
        }
        keys.push_row(&key).unwrap();
        values.push_row(&value).unwrap();
        for r in demos..demos + queries {
            keys.push_row(ctx.keys.row(r)).unwrap();
            values.push_row(ctx.values.row(r)).unwrap();
        }
        ctx.keys = keys;
        ctx.values = values;
        ctx.roles.insert(demos, RowRole::Demo);
        let after = standard_attention(&ctx.input()).unwrap().lambda;
        assert!(after > before, "{before} -> {after}");
    }

    let h = Harness::new(&trained().weights);
    let mut rng = SeededRng::derive(0, "acceptance/dispersion");
    let tasks = gen_counta(&mut rng, 101, focusicl::bench::DEFAULT_LENGTHS).unwrap();
    let n_values: Vec<usize> = (0..=100).step_by(10).collect();
    let reports = dispersion_sweep(&h, &tasks[0], &tasks[1..], &n_values, AttentionConfig::standard()).unwrap();
    for pair in reports.windows(2) {
        for (l, (a, b)) in pair[0].step.lambda.iter().zip(&pair[1].step.lambda).enumerate() {
            for (head, (x, y)) in a.iter().zip(b).enumerate() {
                assert!(y >= x, "layer {l} head {head}: N={} {x} > N={} {y}", pair[0].n, pair[1].n);
            }
        }
    }
}

fn filtering_correctness() {
    let mut rng = SeededRng::new(500);
    let ps = [0.0, 0.1, 0.2, 0.3, 0.4];
    for _ in 0..1000 {
        let demos = rng.range_inclusive(0, 25);
        let queries = rng.range_inclusive(1, 4);
        let ctx = Ctx::random(&mut rng, demos, queries, 4, 3.0);
        let mut previous: Option<Vec<bool>> = None;
        for &p in &ps {
            let out = filtering_attention(&ctx.input(), p).unwrap();
            assert_eq!(out.masked_count(), (p * demos as f64).floor() as usize);
            for ((&m, &w), &role) in out.masked.iter().zip(&out.weights).zip(&out.roles) {
                if m {
                    assert_eq!(w, 0.0);
                    assert_eq!(role, RowRole::Demo);
                }
            }
            if let Some(prev) = &previous {
                assert!(prev.iter().zip(&out.masked).all(|(&a, &b)| !a || b));
            }
            previous = Some(out.masked);
        }
    }

    // Every head at every step of a model forward pass.
    let w = random_model(5);
    let h = Harness::new(&w);
    let mut rng = SeededRng::new(501);
    let layout = h.layout(&demos(&mut rng, 5), "Candidates: ABC DEF GHA IJK LMN").unwrap();
    let positions: Vec<usize> = (layout.query_start()..layout.len()).collect();
    let spec = TraceSpec {
        attention_at: positions.clone(),
        ..TraceSpec::logits()
    };
    let trace = forward(&w, &layout, None, AttentionConfig::filtering(0.3), spec).unwrap();
    assert_eq!(trace.attention.len(), positions.len() * 2 * 2);
    for rec in &trace.attention {
        let o = &rec.outcome;
        assert_eq!(o.masked_count(), (0.3 * o.demo_count() as f64).floor() as usize);
        assert!(o.masked.iter().zip(&o.roles).all(|(&m, &r)| !m || r == RowRole::Demo));
    }
}

fn dd(x: f64) -> TwoFloat {
    TwoFloat::from(x)
}

/// Double-double `exp` by Taylor series on `x / 2^10` followed by repeated squaring.
fn exp_dd(x: TwoFloat) -> TwoFloat {
    let r = x / dd(1024.0);
    let (mut term, mut sum) = (dd(1.0), dd(1.0));
    for k in 1..40 {
        term = term * r / dd(k as f64);
        sum += term;
    }
    for _ in 0..10 {
        sum = sum * sum;
    }
    sum
}

fn hierarchical_combine() {
    let mut rng = SeededRng::new(600);
    for _ in 0..300 {
        let demos = rng.range_inclusive(2, 16);
        let batch = rng.range_inclusive(1, demos);
        let queries = rng.range_inclusive(1, 3);
        let ctx = Ctx::random(&mut rng, demos, queries, 4, 3.0);
        let masks = ctx.batch_masks(batch);
        let inputs: Vec<_> = masks.iter().map(|m| ctx.input().with_visibility(m)).collect();
        let p = [0.0, 0.2, 0.4][rng.range_inclusive(0, 2)];
        let out = hierarchical_attention(&inputs, p, CombineMode::AllScores).unwrap();
        assert!((out.batch_weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.reverse();
        order.rotate_left(rng.range_inclusive(0, inputs.len() - 1));
        let permuted: Vec<_> = order.iter().map(|&i| inputs[i]).collect();
        let again = hierarchical_attention(&permuted, p, CombineMode::AllScores).unwrap();
        for (a, b) in out.combined.output.iter().zip(&again.combined.output) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    // Two batches of two demonstrations plus one query row.
    let query = vec![0.7, -1.3];
    let keys = Matrix::from_rows(&[
        vec![1.5, 0.25],
        vec![-0.5, 2.0],
        vec![3.0, -1.0],
        vec![0.1, 0.1],
        vec![-2.0, -0.75],
    ])
    .unwrap();
    let values = Matrix::from_rows(&[
        vec![1.0, -2.0],
        vec![0.5, 0.5],
        vec![-1.5, 3.0],
        vec![2.0, 0.0],
        vec![0.25, -0.125],
    ])
    .unwrap();
    let roles = [RowRole::Demo, RowRole::Demo, RowRole::Demo, RowRole::Demo, RowRole::QueryOrSelf];
    let batches = [[0usize, 1, 4], [2, 3, 4]];
    let masks: Vec<Vec<bool>> = batches.iter().map(|b| (0..5).map(|r| b.contains(&r)).collect()).collect();
    let base = AttentionInput::new(&query, &keys, &values, &roles);
    let inputs: Vec<_> = masks.iter().map(|m| base.with_visibility(m)).collect();
    let out = hierarchical_attention(&inputs, 0.0, CombineMode::AllScores).unwrap();

    let mut sums = Vec::new();
    let mut outputs = Vec::new();
    for b in &batches {
        let exps: Vec<TwoFloat> = b
            .iter()
            .map(|&r| exp_dd(query.iter().zip(keys.row(r)).fold(dd(0.0), |a, (&x, &y)| a + dd(x) * dd(y))))
            .collect();
        let total = exps.iter().fold(dd(0.0), |a, &e| a + e);
        let o: Vec<TwoFloat> = (0..2)
            .map(|c| b.iter().zip(&exps).fold(dd(0.0), |a, (&r, &e)| a + e * dd(values[(r, c)])) / total)
            .collect();
        sums.push(total);
        outputs.push(o);
    }
    let grand = sums[0] + sums[1];
    for c in 0..2 {
        let expected: f64 = (sums[0] / grand * outputs[0][c] + sums[1] / grand * outputs[1][c]).into();
        assert!((out.combined.output[c] - expected).abs() <= 1e-9, "{} vs {expected}", out.combined.output[c]);
    }
    for (b, &w) in out.batch_weights.iter().enumerate() {
        let expected: f64 = (sums[b] / grand).into();
        assert!((w - expected).abs() <= 1e-9);
    }
}

fn cost() {
    let c = cost_model(4, 2, 3.0).unwrap();
    assert_eq!((c.icl, c.focusicl), (144.0, 72.0));
    let start = Instant::now();
    let h = Harness::new(&trained().weights);
    let mut rng = SeededRng::derive(0, "acceptance/cost");
    let demos: Vec<Demo> = gen_counta(&mut rng, 200, 5..=5)
        .unwrap()
        .into_iter()
        .filter(|t| t.answer < 10)
        .take(32)
        .map(|t| t.demo())
        .collect();
    assert_eq!(demos.len(), 32);
    let m = measure_cost(&h, &demos, 8).unwrap();
    let target = 8.0 / 32.0;
    assert!(m.ratio >= 0.8 * target && m.ratio <= 1.2 * target, "ratio {}", m.ratio);
    assert!(start.elapsed() < Duration::from_secs(120));
}

fn algorithm_one() {
    let u = |c: f64| (0..16).map(|i| (i as f64 - 8.0).powi(2) + c).collect::<Vec<_>>();
    let table = PplTable::new(vec![0.0, 0.1, 0.2], vec![u(11.0), u(10.0), u(12.0)], 5).unwrap();
    let r = select_hyperparameters(&table).unwrap();
    assert_eq!((r.chosen_p, r.chosen_b, r.fallback), (0.1, 9, false));

    let flat = PplTable::new(vec![0.0, 0.1], vec![vec![3.0; 12]; 2], 5).unwrap();
    let r = select_hyperparameters(&flat).unwrap();
    assert_eq!((r.chosen_p, r.chosen_b, r.fallback), (0.0, 12, true));

    let mut rng = SeededRng::new(800);
    let candidates = vec![0.0, 0.1, 0.2, 0.3, 0.4];
    let values: Vec<Vec<f64>> = (0..5).map(|_| (0..20).map(|_| rng.uniform(1.0, 30.0)).collect()).collect();
    let base = select_hyperparameters(&PplTable::new(candidates.clone(), values.clone(), 5).unwrap()).unwrap();
    for _ in 0..10 {
        let c = rng.uniform(0.0, 1000.0);
        let shifted: Vec<Vec<f64>> = values.iter().map(|row| row.iter().map(|v| v + c).collect()).collect();
        let r = select_hyperparameters(&PplTable::new(candidates.clone(), shifted, 5).unwrap()).unwrap();
        assert_eq!((r.chosen_p, r.chosen_b), (base.chosen_p, base.chosen_b), "shift {c}");
    }
}

fn padding() {
    let h = Harness::new(&trained().weights);
    let mut rng = SeededRng::derive(0, "acceptance/padding");
    let all = gen_counta(&mut rng, 50, focusicl::bench::DEFAULT_LENGTHS).unwrap();
    let (tasks, pool) = all.split_at(5);
    let opts = EvalOptions {
        n: 40,
        runs: 1,
        ..EvalOptions::default()
    };
    let report = padding_experiment(&h, AttentionConfig::standard(), tasks, pool, &[0, 4, 16, 64], opts).unwrap();
    let mass: Vec<f64> = report.rows.iter().map(|r| r.query_mass).collect();
    assert!(mass.windows(2).all(|w| w[1] < w[0]), "{mass:?}");
    assert!(report.monotone);
}

fn gradients_and_training() {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        max_positions: 128,
        seed: 4,
        ..ModelConfig::default()
    };
    let mut w = ModelWeights::init(&cfg).unwrap();
    let mut rng = SeededRng::new(1000);
    w.visit_mut(|_, v| v.iter_mut().for_each(|x| *x += rng.normal(0.3)));
    let h = Harness::new(&w);
    let layout = h
        .layout(&[Demo::new("AB", "1"), Demo::new("CAD", "1")], "AXA")
        .unwrap()
        .with_response(&h.vocab.tokenize(" 2\n").unwrap());
    let (_, grad) = loss_and_grad(&w, &layout).unwrap();
    let flat = w.flatten();
    let g = grad.flatten();
    // Sample among parameters with a non-negligible gradient so the check is informative.
    let live: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-6).collect();
    let step = 1e-5;
    for _ in 0..10 {
        let i = live[rng.range_inclusive(0, live.len() - 1)];
        let mut probe = w.clone();
        let mut p = flat.clone();
        p[i] += step;
        probe.unflatten(&p).unwrap();
        let up = sequence_loss(&probe, &layout).unwrap();
        p[i] -= 2.0 * step;
        probe.unflatten(&p).unwrap();
        let down = sequence_loss(&probe, &layout).unwrap();
        let fd = (up - down) / (2.0 * step);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs());
        assert!(rel < 1e-4, "param {i}: fd {fd} analytic {} rel {rel}", g[i]);
    }

    let t = trained();
    assert_eq!(t.smoothed.len(), 200);
    let (first, last) = (t.smoothed[0], t.smoothed[199]);
    assert!(last < first, "smoothed loss {first} -> {last}");
    // Quarter-by-quarter means of the smoothed curve decrease too.
    let quarters: Vec<f64> = t.smoothed.chunks(50).map(|c| c.iter().sum::<f64>() / 50.0).collect();
    assert!(quarters.windows(2).all(|w| w[1] < w[0]), "{quarters:?}");
    assert!(t.elapsed < Duration::from_secs(180), "training took {:?}", t.elapsed);
}

fn determinism() {
    let weights = weights_path();
    let w = weights.to_str().unwrap();
    let dir = trained().dir.path();
    let commands: Vec<Vec<&str>> = vec![
        vec!["eval", "--weights", w, "--n", "4", "--runs", "2", "--tasks", "4"],
        vec!["eval", "--weights", w, "--variant", "focusicl", "--p", "0.2", "--batch-size", "2", "--n", "4", "--runs", "2", "--tasks", "4"],
        vec!["search", "--weights", w, "--n", "6", "--runs", "2", "--pool", "30"],
        vec!["probe", "dispersion", "--weights", w, "--n", "0,5,10"],
        vec!["probe", "pad", "--weights", w, "--spaces", "0,4", "--n", "4", "--tasks", "3"],
        vec!["probe", "pca", "--weights", w, "--n", "0,3,6"],
        vec!["probe", "cost", "--n", "8", "--b", "2", "--l", "5", "--weights", w],
    ];
    for cmd in commands {
        let first = cli(&[&["--seed", "11"][..], &cmd[..]].concat(), dir);
        let second = cli(&[&["--seed", "11"][..], &cmd[..]].concat(), dir);
        let parallel = cli(&[&["--seed", "11", "--jobs", "4"][..], &cmd[..]].concat(), dir);
        let data = |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap()["data"].to_string();
        assert_eq!(first, second, "{cmd:?}");
        assert_eq!(data(&first), data(&parallel), "{cmd:?}");
    }
}

fn main() {
    let criteria: [(&str, fn()); 11] = [
        ("equivalence chain", equivalence_chain),
        ("lambda decomposition identity", lambda_identity),
        ("linear attention additivity", linear_additivity),
        ("lambda monotonicity", lambda_monotonicity),
        ("filtering correctness", filtering_correctness),
        ("hierarchical combine", hierarchical_combine),
        ("cost model", cost),
        ("hyperparameter search", algorithm_one),
        ("padding experiment", padding),
        ("gradient check and training", gradients_and_training),
        ("end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let ok = catch_unwind(AssertUnwindSafe(check)).is_ok();
        if !ok {
            failed += 1;
        }
        println!(
            "[{:>2}] {:<32} {} ({:.1}s)",
            i + 1,
            name,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
