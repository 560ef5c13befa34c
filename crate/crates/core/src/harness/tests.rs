use super::*;
use crate::metrics::task_accuracy;

fn tiny(method: MethodKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy().with_method(method);
    cfg.stream = StreamConfig {
        k: 3,
        n: 1,
        train_size: 4,
        valid_size: 2,
        test_size: 2,
        alternate: true,
        seed: 5,
    };
    cfg.prompt_len = 2;
    cfg.train.max_epochs = 2;
    cfg.train.eval_interval = 1;
    cfg.train.max_decode_len = 12;
    cfg.teacher_train = cfg.train.clone();
    cfg.teacher = SizeTag::Small;
    cfg.order_seeds = vec![0, 1];
    cfg
}

#[test]
fn method_names_round_trip() {
    for m in MethodKind::ALL {
        assert_eq!(m.name().parse::<MethodKind>().unwrap(), m);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, format!("\"{}\"", m.name()));
    }
    assert!("lora".parse::<MethodKind>().is_err());
}

#[test]
fn config_validation() {
    ExperimentConfig::toy().validate().unwrap();
    ExperimentConfig::paper().validate().unwrap();
    let mut c = ExperimentConfig::toy();
    c.order_seeds.clear();
    assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    let mut c = ExperimentConfig::toy();
    c.stream_path = Some("/nonexistent/stream.json".into());
    assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    assert!(ExperimentConfig::preset("huge").is_err());
    let partial: ExperimentConfig =
        serde_json::from_str(r#"{"method": "peft", "prompt_len": 5}"#).unwrap();
    assert_eq!(partial.method, MethodKind::Peft);
    assert_eq!(partial.train, TrainConfig::toy());
}

#[test]
fn every_pipeline_fills_its_columns() {
    let mut runner = Runner::new();
    for m in MethodKind::ALL {
        let exp = runner.run_experiment(&tiny(m)).unwrap();
        assert_eq!(exp.records.len(), 2);
        for r in &exp.records {
            assert!(r.error.is_none(), "{m}: {:?}", r.error);
            let matrix = r.matrix.as_ref().unwrap();
            assert!(matrix.columns_complete(2), "{m}");
            assert_eq!(r.predictions.len(), 3 * 2 * 2, "{m}");
            assert_eq!(r.task_seconds.len(), 3);
            let (m2, rep) = r.recompute().unwrap();
            assert_eq!(&m2, matrix);
            assert_eq!(Some(&rep), r.report.as_ref());
            if m.uses_bank() {
                assert!(
                    r.backbone_fingerprints[1..]
                        .iter()
                        .all(|f| f == &r.backbone_fingerprints[0]),
                    "{m}"
                );
                assert_eq!(r.report.as_ref().unwrap().md, 0.0);
            }
            if matches!(m, MethodKind::C3 | MethodKind::C3NoIct) {
                assert_eq!(r.distill.len(), 2);
                assert!(r.distill.iter().all(|d| d.len() == 4));
            }
            assert_eq!(
                r.teacher_accuracy.len(),
                if m.uses_teacher() { 3 } else { 0 }
            );
        }
        let s = exp.summary.unwrap();
        assert_eq!((s.runs, s.failed), (2, 0));
    }
}

#[test]
fn identical_configs_give_identical_reports() {
    let cfg = tiny(MethodKind::FineTune);
    let mut a = Runner::new();
    a.reuse_stages = false;
    let mut b = Runner::new();
    b.reuse_stages = false;
    let ra = a.run_experiment(&cfg).unwrap();
    let rb = b.run_experiment(&cfg).unwrap();
    for (x, y) in ra.records.iter().zip(&rb.records) {
        assert_eq!(
            serde_json::to_string(&x.report).unwrap(),
            serde_json::to_string(&y.report).unwrap()
        );
        assert_eq!(x.predictions, y.predictions);
    }
    // Reusing the first stage does not change anything.
    let rc = Runner::new().run_experiment(&cfg).unwrap();
    assert_eq!(ra.records[1].predictions, rc.records[1].predictions);
}

#[test]
fn out_dir_receives_dumps_and_banks() {
    let dir = tempfile::tempdir().unwrap();
    let mut runner = Runner::new();
    let mut records = Vec::new();
    for m in [MethodKind::Peft, MethodKind::FineTune, MethodKind::C3] {
        let mut cfg = tiny(m);
        cfg.order_seeds = vec![0];
        cfg.out_dir = Some(dir.path().to_path_buf());
        records.extend(runner.run_experiment(&cfg).unwrap().records);
    }
    let peft = &records[0];
    assert!(peft
        .bank_path
        .as_ref()
        .unwrap()
        .join("manifest.json")
        .exists());
    assert!(records[1].bank_path.is_none());
    assert!(dir.path().join("c3_order0/distill.jsonl").exists());
    let loaded = crate::metrics::read_predictions(peft.predictions_path.as_ref().unwrap()).unwrap();
    assert_eq!(loaded, peft.predictions);

    emit_results(&records, dir.path()).unwrap();
    let mut rd = csv::Reader::from_path(dir.path().join("matrix.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3 * 6);
    // TA read back from the CSV alone.
    let mut last_col = Vec::new();
    for row in &rows {
        if &row[0] == "peft" && &row[3] == "2" {
            last_col.push(row[4].parse::<f64>().unwrap());
        }
    }
    let ta = last_col.iter().sum::<f64>() / last_col.len() as f64;
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
            .unwrap();
    let emitted = metrics["runs"][0]["report"]["ta"].as_f64().unwrap();
    assert!((ta - emitted).abs() < 1e-9);
    assert!((task_accuracy(peft.matrix.as_ref().unwrap()).unwrap() - emitted).abs() < 1e-9);
    assert!(dir.path().join("summary.csv").exists());
    let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 * 3);
}

#[test]
fn emit_needs_records() {
    let dir = tempfile::tempdir().unwrap();
    assert!(emit_results(&[], dir.path()).is_err());
}

#[test]
fn sweep_checks_values_first() {
    let mut runner = Runner::new();
    let base = tiny(MethodKind::Peft);
    let err = sweep(
        &mut runner,
        &base,
        SweepAxis::PromptLength,
        &["1".into(), "zero".into()],
    )
    .unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    assert!(sweep(&mut runner, &base, SweepAxis::Eta, &["7.5".into()]).is_err());
    assert!(sweep(&mut runner, &base, SweepAxis::ModelSize, &["medium".into()]).is_err());
    assert_eq!(
        "prompt-length".parse::<SweepAxis>().unwrap(),
        SweepAxis::PromptLength
    );
}

#[test]
fn sweep_writes_one_row_per_value() {
    let mut runner = Runner::new();
    let mut base = tiny(MethodKind::C3);
    base.order_seeds = vec![0];
    let values: Vec<String> = ["1", "2"].iter().map(|s| s.to_string()).collect();
    let cells = sweep(&mut runner, &base, SweepAxis::R, &values).unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells
        .iter()
        .all(|c| c.error.is_none() && c.teacher_ia.is_some()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    write_sweep_csv(&cells, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("r,1,c3,"));
}

#[test]
fn ordered_streams_keep_the_merged_task_first() {
    let cfg = ExperimentConfig::toy();
    let (stream, _) = cfg.load_stream().unwrap();
    let a = ordered_stream(&stream, &cfg.stream, 0).unwrap();
    let b = ordered_stream(&stream, &cfg.stream, 1).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a.tasks[0], b.tasks[0]);
    assert_eq!(a.tasks[0].schemas.len(), 3);
    let orders: Vec<Vec<u64>> = (0..3)
        .map(|s| {
            ordered_stream(&stream, &cfg.stream, s)
                .unwrap()
                .tasks
                .iter()
                .map(Task::content_seed)
                .collect()
        })
        .collect();
    assert!(orders[0] != orders[1] || orders[1] != orders[2]);
}
