mod common;

use c3_core::metrics::{
    initial_accuracy, memory_decay, report_from_predictions, task_accuracy, AccuracyMatrix,
    PredictionRecord,
};
use c3_core::numerics::{
    softmax_rows, Optimizer, OptimizerConfig, OptimizerKind, ParamGroup, Tape, Tensor,
};
use c3_core::seq2seq::{ModelParams, PromptMatrix};
use c3_core::taskstream::{generate_stream, merge_initial_tasks, permute_tail, StreamConfig};
use common::{random_batch, tiny_model};
use proptest::prelude::*;

fn rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max_rows, 1..=max_cols)
        .prop_flat_map(|(r, c)| (Just(c), prop::collection::vec(-30.0f64..30.0, r * c)))
}

fn kl(tape: &mut Tape<f64>, teacher: &Tensor<f64>, student: &Tensor<f64>) -> f64 {
    let s = tape.leaf(student);
    let v = tape.kl_divergence(teacher, s, 1.0).unwrap();
    tape.value(v)[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions((cols, data) in rows(5, 9)) {
        let p = softmax_rows(&data, cols);
        for row in p.chunks(cols) {
            prop_assert!(row.iter().all(|&x| x >= 0.0 && x.is_finite()));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![data.len() / cols, cols], data.clone()).unwrap());
        let y = tape.softmax(x).unwrap();
        prop_assert_eq!(tape.value(y), &p[..]);
    }

    #[test]
    fn kl_is_nonnegative_and_vanishes_on_row_shifts(
        (cols, a) in rows(4, 7),
        seed in any::<u64>(),
    ) {
        use rand::{RngExt, SeedableRng};
        let r = a.len() / cols;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = (0..a.len()).map(|_| rng.random_range(-30.0..30.0)).collect();
        let shifts: Vec<f64> = (0..r).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shifted: Vec<f64> = a.iter().enumerate().map(|(i, &x)| x + shifts[i / cols]).collect();
        let t = |d: Vec<f64>| Tensor::new(vec![r, cols], d).unwrap();
        let mut tape = Tape::new();
        prop_assert!(kl(&mut tape, &t(a.clone()), &t(b.clone())) >= 0.0);
        prop_assert!(kl(&mut tape, &t(a.clone()), &t(shifted)).abs() < 1e-9);
        // Rows that differ by more than a constant give a strictly positive value.
        let mut c = a.clone();
        if cols > 1 {
            let top = (0..cols).max_by(|&i, &j| a[i].total_cmp(&a[j])).unwrap();
            let low = a[..cols].iter().copied().fold(f64::INFINITY, f64::min);
            c[top] = low - 1.0;
            prop_assert!(kl(&mut tape, &t(a), &t(c)) > 0.0);
        }
    }

    #[test]
    fn frozen_group_bytes_never_move(
        grads in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 1..6),
        adafactor in any::<bool>(),
    ) {
        let kind = if adafactor { OptimizerKind::adafactor() } else { OptimizerKind::adam() };
        let mut opt = Optimizer::new(OptimizerConfig { kind, lr_prompt: 0.1, lr_backbone: 0.1 }, &[ParamGroup::Prompt]);
        let mut p = Tensor::<f64>::new(vec![2, 3], vec![0.1; 6]).unwrap().with_grad();
        let mut b = Tensor::<f64>::new(vec![2, 3], vec![0.3, -0.2, 0.0, 1.0, 2.0, -1.0]).unwrap().with_grad();
        let before: Vec<u64> = b.data().iter().map(|x: &f64| x.to_bits()).collect();
        for (n, g) in grads.iter().enumerate() {
            p.zero_grad();
            b.zero_grad();
            p.accumulate_grad(g).unwrap();
            b.accumulate_grad(g).unwrap();
            opt.step(&mut [(ParamGroup::Prompt, &mut p), (ParamGroup::Backbone, &mut b)]).unwrap();
            prop_assert_eq!(opt.states()[0].step, n as u64 + 1);
        }
        let after: Vec<u64> = b.data().iter().map(|x: &f64| x.to_bits()).collect();
        prop_assert_eq!(before, after);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn init_and_forward_backward_are_deterministic(seed in 0u64..1000) {
        let a = tiny_model(seed);
        let b = tiny_model(seed);
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
        let (sources, targets) = random_batch(seed, 2);
        let prompt = PromptMatrix::random(0, 2, 8, seed);
        let run = |m: &ModelParams<f64>| {
            let mut tape = Tape::new();
            let w = c3_core::seq2seq::bind(&mut tape, m);
            let p = tape.leaf(&prompt.values.clone().with_grad());
            let logits =
                c3_core::seq2seq::teacher_forced_logits(&mut tape, &w, &m.config, Some(p), &sources, &targets).unwrap();
            let loss = tape.cross_entropy(logits, &targets.concat(), 0.5).unwrap();
            let g = tape.backward(loss).unwrap();
            let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            (bits(tape.value(loss)), bits(g.get(p).unwrap()))
        };
        prop_assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn step_distributions_are_proper(seed in 0u64..1000, m in 0usize..4) {
        let model = tiny_model(seed);
        let (sources, targets) = random_batch(seed + 7, 3);
        let prompt = PromptMatrix::random(0, m, 8, seed);
        let dists = model.forward_teacher_forced(Some(&prompt), &sources, &targets).unwrap();
        for (d, t) in dists.iter().zip(&targets) {
            prop_assert_eq!(d.steps(), t.len());
            for j in 0..d.steps() {
                prop_assert!((d.probs(j).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let greedy = model.greedy_decode(Some(&prompt), &sources, 6).unwrap();
        for d in &greedy {
            prop_assert!(d.steps() <= 6);
            for j in 0..d.steps() {
                prop_assert!((d.probs(j).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_prompt_matches_no_prompt_bit_for_bit(seed in 0u64..1000) {
        let model = tiny_model(seed);
        let (sources, targets) = random_batch(seed + 3, 2);
        let empty = PromptMatrix::zeros(0, 0, 8);
        let a = model.forward_teacher_forced(None, &sources, &targets).unwrap();
        let b = model.forward_teacher_forced(Some(&empty), &sources, &targets).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.logits.data(), y.logits.data());
        }
        // A zero prompt with rows still changes the encoder's attention.
        let zero = PromptMatrix::zeros(0, 2, 8);
        let c = model.forward_teacher_forced(Some(&zero), &sources, &targets).unwrap();
        prop_assert!(a.iter().zip(&c).any(|(x, y)| x.logits.data() != y.logits.data()));
    }
}

fn stream_config() -> impl Strategy<Value = StreamConfig> {
    (
        3usize..7,
        1usize..8,
        1usize..6,
        1usize..6,
        any::<bool>(),
        0u64..10_000,
    )
        .prop_flat_map(|(k, train, valid, test, alternate, seed)| {
            (1..k).prop_map(move |n| StreamConfig {
                k,
                n,
                train_size: train,
                valid_size: valid,
                test_size: test,
                alternate,
                seed,
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_streams_are_valid_and_reproducible(cfg in stream_config(), order in any::<u64>()) {
        let s = generate_stream(&cfg).unwrap();
        s.validate().unwrap();
        prop_assert_eq!(s.len(), cfg.k);
        for t in &s.tasks {
            prop_assert_eq!(t.train.len(), cfg.train_size);
            prop_assert_eq!(t.valid.len(), cfg.valid_size);
            prop_assert_eq!(t.test.len(), cfg.test_size);
        }
        prop_assert_eq!(&s, &generate_stream(&cfg).unwrap());
        let merged = merge_initial_tasks(&s, cfg.n).unwrap();
        merged.validate().unwrap();
        prop_assert_eq!(merged.len(), cfg.k - cfg.n + 1);
        let a = permute_tail(&merged, order, cfg.alternate, 1);
        let b = permute_tail(&merged, order, cfg.alternate, 1);
        prop_assert_eq!(&a, &b);
        // Alternation can be unsatisfiable for some mixes of task kinds.
        let Ok(a) = a else {
            prop_assert!(cfg.alternate);
            return Ok(());
        };
        prop_assert_eq!(&a.tasks[0], &merged.tasks[0]);
    }
}

fn matrix_and_flags() -> impl Strategy<Value = (usize, Vec<Vec<Vec<bool>>>)> {
    // flags[i][j] = per-example matches of task i after training task j.
    (1usize..6, 1usize..5).prop_flat_map(|(k, n)| {
        (
            Just(k),
            prop::collection::vec(
                prop::collection::vec(prop::collection::vec(any::<bool>(), n), k),
                k,
            ),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_are_bounded_and_recomputable((k, flags) in matrix_and_flags()) {
        let mut records = Vec::new();
        let mut m = AccuracyMatrix::new(k);
        for i in 0..k {
            for j in i..k {
                let hits = flags[i][j].iter().filter(|&&b| b).count();
                m.set(i, j, 100.0 * hits as f64 / flags[i][j].len() as f64).unwrap();
                for (e, &ok) in flags[i][j].iter().enumerate() {
                    records.push(PredictionRecord {
                        task: i,
                        checkpoint: j,
                        example: e,
                        prediction: if ok { "SELECT a".into() } else { "SELECT b".into() },
                        gold: "SELECT a".into(),
                        matched: ok,
                    });
                }
            }
        }
        let (m2, rep) = report_from_predictions(&records, k, "x", 0).unwrap();
        prop_assert_eq!(&m2, &m);
        for v in [rep.ta, rep.ea, rep.ia] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert!((rep.ta - task_accuracy(&m).unwrap()).abs() <= 1e-9);
        prop_assert!((rep.ia - initial_accuracy(&m).unwrap()).abs() <= 1e-9);
        if k >= 2 {
            prop_assert!((rep.md - memory_decay(&m).unwrap()).abs() <= 1e-9);
        }
        // Order of the dump lines does not matter.
        records.reverse();
        let (_, again) = report_from_predictions(&records, k, "x", 0).unwrap();
        prop_assert_eq!(again, rep);
    }
}
