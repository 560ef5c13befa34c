use super::*;
use crate::numerics::{OptimizerConfig, OptimizerKind, Tape};
use crate::seq2seq::{bind, ModelConfig, SizeTag};
use crate::taskstream::{generate_stream, grammar_vocabulary, StreamConfig, TaskStream};

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn: 32,
        max_len: 160,
        vocab_size: vocab,
        size: SizeTag::Small,
    }
}

fn stream() -> TaskStream {
    generate_stream(&StreamConfig {
        k: 3,
        n: 1,
        train_size: 4,
        valid_size: 2,
        test_size: 2,
        alternate: true,
        seed: 3,
    })
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_epochs: epochs,
        eval_interval: 1,
        patience: 100,
        optimizer: OptimizerConfig {
            kind: OptimizerKind::adam(),
            lr_prompt: 1e-2,
            lr_backbone: 1e-2,
        },
        seed: 1,
        max_decode_len: 24,
    }
}

fn bank_for(s: &TaskStream, vocab: &Vocabulary, epochs: usize) -> PromptBank {
    let backbone = ModelParams::init(&tiny_config(vocab.len()), 5).unwrap();
    initial_task_adaptation(backbone, &s.tasks[0], vocab, 3, 9, &quick(epochs))
        .unwrap()
        .0
}

#[test]
fn early_stopper_examples() {
    let h: Vec<f64> = (0..20).map(|i| i as f64).collect();
    for n in 1..=h.len() {
        assert_eq!(
            early_stopper(&h[..n], 1).unwrap(),
            StopDecision::Continue { best: n - 1 }
        );
    }
    assert_eq!(
        early_stopper(&[0.5, 0.5, 0.5], 2).unwrap(),
        StopDecision::Stop { best: 0 }
    );
    assert_eq!(
        early_stopper(&[0.5, 0.5], 2).unwrap(),
        StopDecision::Continue { best: 0 }
    );
    assert_eq!(
        early_stopper(&[0.1, 0.9, 0.8], 2).unwrap(),
        StopDecision::Continue { best: 1 }
    );
    assert_eq!(
        early_stopper(&[0.1, 0.9, 0.8, 0.8], 2).unwrap(),
        StopDecision::Stop { best: 1 }
    );
    assert!(early_stopper(&[], 2).is_err());
    assert!(early_stopper(&[1.0], 0).is_err());
}

#[test]
fn train_config_rejects_zero_patience() {
    let mut c = TrainConfig::toy();
    c.validate().unwrap();
    TrainConfig::paper().validate().unwrap();
    c.patience = 0;
    assert!(c.validate().is_err());
    c.patience = 1;
    c.eval_interval = 0;
    assert!(c.validate().is_err());
}

#[test]
fn best_checkpoint_follows_validation_trace() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let mut backbone = ModelParams::<f64>::init(&tiny_config(vocab.len()), 5).unwrap();
    let mut prompt = PromptMatrix::random(0, 2, 16, 1);
    let data = encode_pairs(
        &vocab,
        &plain_pairs(&s.tasks[0], &s.tasks[0].train).unwrap(),
    );
    let trace = [20.0, 80.0, 60.0];
    let mut seen = Vec::new();
    let outcome = train(
        Trainee {
            backbone: &mut backbone,
            prompt: Some(&mut prompt),
            train_backbone: true,
        },
        &data,
        None,
        &quick(3),
        |b, p| {
            seen.push((b.fingerprint(), p.unwrap().clone()));
            Ok(trace[seen.len() - 1])
        },
    )
    .unwrap();
    assert_eq!(outcome.best, Some(1));
    assert_eq!(outcome.best_accuracy(), Some(80.0));
    assert_eq!(backbone.fingerprint(), seen[1].0);
    assert_eq!(prompt.values.data(), seen[1].1.values.data());
    assert_ne!(seen[1].0, seen[2].0);
}

#[test]
fn memorizes_a_single_example() {
    let mut s = stream();
    let vocab = grammar_vocabulary();
    s.tasks[0].train.truncate(1);
    s.tasks[0].valid = s.tasks[0].train.clone();
    let task = &s.tasks[0];
    let backbone = ModelParams::init(&tiny_config(vocab.len()), 2).unwrap();
    let mut cfg = quick(1000);
    cfg.eval_interval = 1000;
    cfg.optimizer.lr_backbone = 3e-2;
    cfg.optimizer.lr_prompt = 3e-2;
    let (bank, outcome) = initial_task_adaptation(backbone, task, &vocab, 2, 4, &cfg).unwrap();
    assert!(
        *outcome.losses.last().unwrap() < 1e-3,
        "loss {:?}",
        outcome.losses.last()
    );
    let src = vec![vocab.tokenize(&task.flatten(&task.train[0]).unwrap()).ids];
    let out = bank.predict(0, &vocab, &src, 40).unwrap();
    assert!(
        exact_match(&out[0], &task.train[0].sql),
        "{} vs {}",
        out[0],
        task.train[0].sql
    );
}

#[test]
fn adaptation_records_prompt_shape_and_fingerprint() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let bank = bank_for(&s, &vocab, 2);
    assert_eq!(bank.init.values.shape(), &[3, 16]);
    assert_eq!(bank.fingerprint, bank.backbone.fingerprint());
    assert_eq!(bank.get(0).unwrap().values.data(), bank.init.values.data());
    assert!(!bank.backbone.weights.embedding.requires_grad());
}

#[test]
fn adaptation_needs_validation_examples() {
    let mut s = stream();
    let vocab = grammar_vocabulary();
    s.tasks[0].valid.clear();
    let backbone = ModelParams::init(&tiny_config(vocab.len()), 5).unwrap();
    let err = initial_task_adaptation(backbone, &s.tasks[0], &vocab, 3, 9, &quick(1)).unwrap_err();
    assert!(matches!(err, ContinualError::Contract(_)), "{err}");
}

#[test]
fn zero_epochs_keeps_the_shared_prompt() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let mut bank = bank_for(&s, &vocab, 1);
    continual_prompt_tune(
        &mut bank,
        &s.tasks[1],
        &vocab,
        PromptInit::Shared,
        &quick(0),
    )
    .unwrap();
    assert_eq!(bank.get(1).unwrap().values.data(), bank.init.values.data());
    assert_eq!(bank.get(1).unwrap().task, 1);
}

#[test]
fn prompt_tuning_leaves_backbone_and_earlier_prompts_alone() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let mut bank = bank_for(&s, &vocab, 2);
    let fp = bank.backbone.fingerprint();
    continual_prompt_tune(
        &mut bank,
        &s.tasks[1],
        &vocab,
        PromptInit::Shared,
        &quick(3),
    )
    .unwrap();
    assert_ne!(bank.get(1).unwrap().values.data(), bank.init.values.data());
    let t1 = &s.tasks[1];
    let src = EvalSet::new(&vocab, &plain_pairs(t1, &t1.test).unwrap()).sources;
    let before = bank.predict(1, &vocab, &src, 24).unwrap();
    let p0 = bank.get(0).cloned();
    let p1 = bank.get(1).cloned();
    continual_prompt_tune(
        &mut bank,
        &s.tasks[2],
        &vocab,
        PromptInit::Shared,
        &quick(3),
    )
    .unwrap();
    assert_eq!(bank.backbone.fingerprint(), fp);
    assert_eq!(bank.get(0).cloned(), p0);
    assert_eq!(bank.get(1).cloned(), p1);
    assert_eq!(bank.predict(1, &vocab, &src, 24).unwrap(), before);
}

#[test]
fn previous_initialization_starts_from_the_last_prompt() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let mut bank = bank_for(&s, &vocab, 1);
    continual_prompt_tune(
        &mut bank,
        &s.tasks[1],
        &vocab,
        PromptInit::Shared,
        &quick(2),
    )
    .unwrap();
    continual_prompt_tune(
        &mut bank,
        &s.tasks[2],
        &vocab,
        PromptInit::Previous,
        &quick(0),
    )
    .unwrap();
    assert_eq!(
        bank.get(2).unwrap().values.data(),
        bank.get(1).unwrap().values.data()
    );
    let err = continual_prompt_tune(
        &mut bank,
        &s.tasks[0],
        &vocab,
        PromptInit::Shared,
        &quick(1),
    )
    .unwrap_err();
    assert!(matches!(err, ContinualError::Contract(_)));
}

#[test]
fn backbone_drift_is_a_hard_failure() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let mut bank = bank_for(&s, &vocab, 1);
    bank.backbone.weights.out_b.data_mut()[0] += 1e-12;
    let err = continual_prompt_tune(
        &mut bank,
        &s.tasks[1],
        &vocab,
        PromptInit::Shared,
        &quick(1),
    )
    .unwrap_err();
    assert!(
        matches!(err, ContinualError::FrozenBackbone { .. }),
        "{err}"
    );
}

#[test]
fn teacher_advances_in_order() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let mut t = TeacherState::fresh(ModelParams::init(&tiny_config(vocab.len()), 8).unwrap());
    let r = RetrieverConfig::toy();
    assert!(teacher_ict_train(&mut t, &s.tasks[1], &vocab, &r, true, &quick(1)).is_err());
    let fp = t.params.fingerprint();
    teacher_ict_train(&mut t, &s.tasks[0], &vocab, &r, true, &quick(1)).unwrap();
    assert_eq!(t.last_task, Some(0));
    assert_ne!(t.params.fingerprint(), fp);
    assert!(teacher_ict_train(&mut t, &s.tasks[0], &vocab, &r, true, &quick(1)).is_err());
    teacher_ict_train(&mut t, &s.tasks[1], &vocab, &r, false, &quick(1)).unwrap();
    assert_eq!(t.last_task, Some(1));
}

#[test]
fn teacher_inputs_without_context_are_plain() {
    let s = stream();
    let t = &s.tasks[1];
    let plain = plain_pairs(t, &t.train).unwrap();
    let r = RetrieverConfig::toy();
    assert_eq!(TeacherState::inputs(t, &t.train, &r, false).unwrap(), plain);
    let ctx = TeacherState::inputs(t, &t.train, &r, true).unwrap();
    for ((c, y), (p, y2)) in ctx.iter().zip(&plain) {
        assert_eq!(y, y2);
        assert!(c == p || c.ends_with(&format!("|| {p}")));
    }
}

#[test]
fn wrong_teacher_reduces_to_prompt_tuning() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let base = bank_for(&s, &vocab, 1);
    let mut teacher =
        TeacherState::fresh(ModelParams::init(&tiny_config(vocab.len()), 77).unwrap());
    teacher.last_task = Some(1);
    let r = RetrieverConfig::toy();

    let mut a = base.clone();
    let (_, records) = distill_student(
        &mut a,
        &teacher,
        &s.tasks[1],
        &vocab,
        &r,
        true,
        PromptInit::Shared,
        &quick(3),
    )
    .unwrap();
    assert_eq!(records.len(), s.tasks[1].train.len());
    assert!(records
        .iter()
        .all(|r| r.kind == SupervisionKind::GoldFallback && !r.exact_match));

    let mut b = base.clone();
    continual_prompt_tune(&mut b, &s.tasks[1], &vocab, PromptInit::Shared, &quick(3)).unwrap();
    assert_eq!(
        a.get(1).unwrap().values.data(),
        b.get(1).unwrap().values.data()
    );
    assert_eq!(a.backbone.fingerprint(), base.fingerprint);
}

#[test]
fn record_kind_tracks_exact_match() {
    let mut s = stream();
    let vocab = grammar_vocabulary();
    s.tasks[0].train.truncate(2);
    s.tasks[0].valid = s.tasks[0].train.clone();
    let mut teacher = TeacherState::fresh(ModelParams::init(&tiny_config(vocab.len()), 4).unwrap());
    let r = RetrieverConfig::toy();
    let mut cfg = quick(60);
    cfg.eval_interval = 60;
    teacher_ict_train(&mut teacher, &s.tasks[0], &vocab, &r, false, &cfg).unwrap();
    let (sup, records) = teacher_supervision(&teacher, &s.tasks[0], &vocab, &r, false, 40).unwrap();
    assert!(records.iter().any(|r| r.exact_match), "{records:?}");
    for (rec, sup) in records.iter().zip(&sup) {
        assert_eq!(rec.kind == SupervisionKind::GoldFallback, !rec.exact_match);
        assert_eq!(matches!(sup, Supervision::Teacher(_)), rec.exact_match);
    }
}

#[test]
fn identical_distributions_give_zero_loss_and_gradient() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let bank = bank_for(&s, &vocab, 1);
    let t = &s.tasks[1];
    let data = encode_pairs(&vocab, &plain_pairs(t, &t.train).unwrap());
    let prompt = bank.init.clone();
    let src: Vec<Vec<usize>> = data.iter().map(|p| p.source.clone()).collect();
    let tgt: Vec<Vec<usize>> = data.iter().map(|p| p.target.clone()).collect();
    let sup: Vec<Supervision<f64>> = bank
        .backbone
        .forward_teacher_forced(Some(&prompt), &src, &tgt)
        .unwrap()
        .into_iter()
        .map(|d| Supervision::Teacher(d.logits))
        .collect();
    assert!(
        mean_step_kl(&bank.backbone, Some(&prompt), &data, &sup)
            .unwrap()
            .abs()
            < 1e-12
    );

    let mut tape = Tape::new();
    let w = bind(&mut tape, &bank.backbone);
    let mut values = prompt.values.clone();
    values.set_requires_grad(true);
    let pv = tape.leaf(&values);
    let batch: Vec<(&Pair, &Supervision<f64>)> = data.iter().zip(&sup).collect();
    let loss = batch_loss(&mut tape, &bank.backbone, &w, Some(pv), &batch).unwrap();
    assert!(tape.value(loss)[0].abs() < 1e-12);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(pv).unwrap().iter().all(|v| v.abs() < 1e-12));

    let mut after = bank.clone();
    let mut teacher = TeacherState::fresh(bank.backbone.clone());
    teacher.last_task = Some(1);
    // One Adam step on an all-zero gradient moves nothing.
    let mut cfg = quick(1);
    cfg.batch_size = data.len();
    let mut p = bank.init.with_task(1);
    train(
        Trainee {
            backbone: &mut after.backbone,
            prompt: Some(&mut p),
            train_backbone: false,
        },
        &data,
        Some(&sup),
        &cfg,
        |_, _| Ok(0.0),
    )
    .unwrap();
    assert_eq!(p.values.data(), bank.init.values.data());
}

#[test]
fn distillation_checks_teacher_progress_and_vocabulary() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let mut bank = bank_for(&s, &vocab, 1);
    let r = RetrieverConfig::toy();
    let mut teacher = TeacherState::fresh(ModelParams::init(&tiny_config(vocab.len()), 7).unwrap());
    teacher.last_task = Some(0);
    let err = distill_student(
        &mut bank,
        &teacher,
        &s.tasks[1],
        &vocab,
        &r,
        true,
        PromptInit::Shared,
        &quick(1),
    );
    assert!(matches!(err, Err(ContinualError::Contract(_))));
    let mut other =
        TeacherState::fresh(ModelParams::init(&tiny_config(vocab.len() + 1), 7).unwrap());
    other.last_task = Some(1);
    let err = distill_student(
        &mut bank,
        &other,
        &s.tasks[1],
        &vocab,
        &r,
        true,
        PromptInit::Shared,
        &quick(1),
    );
    assert!(matches!(err, Err(ContinualError::Contract(_))));
}

#[test]
fn bank_round_trip_reproduces_predictions() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let mut bank = bank_for(&s, &vocab, 2);
    continual_prompt_tune(
        &mut bank,
        &s.tasks[1],
        &vocab,
        PromptInit::Shared,
        &quick(2),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_bank(&bank, Some(&vocab), dir.path()).unwrap();
    let loaded = load_bank(dir.path(), Some(&vocab)).unwrap();
    assert_eq!(loaded, bank);
    let t = &s.tasks[1];
    let src = EvalSet::new(&vocab, &plain_pairs(t, &t.test).unwrap()).sources;
    assert_eq!(
        loaded.predict(1, &vocab, &src, 24).unwrap(),
        bank.predict(1, &vocab, &src, 24).unwrap()
    );

    let prompt_file = std::fs::metadata(dir.path().join("prompt_1.bin"))
        .unwrap()
        .len() as usize;
    assert_eq!(prompt_file, 3 * 16 * 8);
    assert_eq!(bank.prompt_bytes(), 2 * 3 * 16 * 8);
}

#[test]
fn tampered_bank_is_rejected() {
    let s = stream();
    let vocab = grammar_vocabulary();
    let bank = bank_for(&s, &vocab, 1);
    let dir = tempfile::tempdir().unwrap();
    save_bank(&bank, None, dir.path()).unwrap();

    let mpath = dir.path().join("manifest.json");
    let original = std::fs::read_to_string(&mpath).unwrap();
    std::fs::write(&mpath, original.replace(&bank.fingerprint, &"0".repeat(64))).unwrap();
    assert!(matches!(
        load_bank(dir.path(), None),
        Err(ContinualError::Corruption(_))
    ));
    std::fs::write(&mpath, &original).unwrap();

    let ppath = dir.path().join("prompt_0.bin");
    let mut bytes = std::fs::read(&ppath).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&ppath, &bytes).unwrap();
    assert!(matches!(
        load_bank(dir.path(), None),
        Err(ContinualError::Corruption(_))
    ));
    bytes.truncate(8);
    std::fs::write(&ppath, &bytes).unwrap();
    assert!(matches!(
        load_bank(dir.path(), None),
        Err(ContinualError::Corruption(_))
    ));
}

#[test]
fn prompt_storage_is_small_next_to_the_backbone() {
    // M = 20 at the small preset's width, per task.
    let cfg = ModelConfig::small(grammar_vocabulary().len());
    let ratio = (20 * cfg.prompt_dim()) as f64 / cfg.parameter_count() as f64;
    assert!(ratio < 0.02, "ratio {ratio}");
}
