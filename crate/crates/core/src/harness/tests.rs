use super::*;
use crate::autodiff::Tensor;
use crate::baselines::BaselineConfig;
use crate::data::{gen_synthetic, DatasetSplit, SyntheticKind, SyntheticTask};
use crate::dsp::MelConfig;
use crate::source::{build_attention_model, AttentionConfig};

fn fixture(n_per_class: usize) -> (DatasetSplit, SourceModel) {
    let data = gen_synthetic(
        &SyntheticTask {
            kind: SyntheticKind::Target4Texture,
            clip_seconds: 1.5,
            seed: 5,
        },
        n_per_class,
    )
    .unwrap();
    let mut src = build_attention_model(&AttentionConfig::default(), &MelConfig::default(), 0).unwrap();
    src.freeze();
    (data, src)
}

fn small_adapter() -> AdapterConfig {
    AdapterConfig {
        id_channels: 4,
        ids_hidden: 16,
        ..AdapterConfig::default()
    }
}

fn small_baselines() -> BaselineConfig {
    let mut b = BaselineConfig::default();
    b.cnn.channels = 4;
    b.cnn.blocks = 1;
    b.probe.hidden = 16;
    b
}

fn cfg(method: Method, epochs: usize, lr: f32) -> RunConfig {
    RunConfig {
        method,
        epochs,
        lr,
        seeds: vec![0],
        batch_size: 4,
    }
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!(matches!("lora".parse::<Method>(), Err(Error::Usage(_))));
}

#[test]
fn invalid_run_configs_are_rejected() {
    for bad in [
        RunConfig { epochs: 0, ..RunConfig::default() },
        RunConfig { seeds: vec![], ..RunConfig::default() },
        RunConfig { batch_size: 0, ..RunConfig::default() },
        RunConfig { lr: f32::NAN, ..RunConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }
}

#[test]
fn single_epoch_selects_epoch_one() {
    let (data, src) = fixture(5);
    let prep = Prepared::new(&data, &src);
    let (ad, bl) = (small_adapter(), small_baselines());
    let ctx = Context { prepared: &prep, adapter: &ad, baselines: &bl };
    let out = train(&cfg(Method::Ids, 1, 1e-2), &ctx, 3).unwrap();
    assert_eq!(out.row.best_epoch, 1);
    assert_eq!(out.val_history.len(), 1);
    let val = prep.get(Input::Features, Split::Val).unwrap();
    assert_eq!(out.trainee.accuracy(val).unwrap(), out.row.val_acc);
}

#[test]
fn training_is_deterministic() {
    let (data, src) = fixture(5);
    let prep = Prepared::new(&data, &src);
    let (ad, bl) = (small_adapter(), small_baselines());
    let ctx = Context { prepared: &prep, adapter: &ad, baselines: &bl };
    for method in [Method::Id, Method::BlRep] {
        let a = train(&cfg(method, 2, 1e-2), &ctx, 7).unwrap();
        let b = train(&cfg(method, 2, 1e-2), &ctx, 7).unwrap();
        assert_eq!(a.row, b.row);
        assert_eq!(a.trainee.params().to_bytes(), b.trainee.params().to_bytes());
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }
}

#[test]
fn best_snapshot_has_max_validation_accuracy_earliest_on_ties() {
    let (data, src) = fixture(6);
    let prep = Prepared::new(&data, &src);
    let (ad, bl) = (small_adapter(), small_baselines());
    let ctx = Context { prepared: &prep, adapter: &ad, baselines: &bl };
    let out = train(&cfg(Method::Ids, 6, 3e-2), &ctx, 1).unwrap();
    let max = out.val_history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.row.val_acc, max);
    let first = out.val_history.iter().position(|&v| v == max).unwrap();
    assert_eq!(out.row.best_epoch, first + 1);
    let val = prep.get(Input::Features, Split::Val).unwrap();
    assert_eq!(out.trainee.accuracy(val).unwrap(), max);
}

#[test]
fn ii_training_reduces_loss() {
    let (data, src) = fixture(5);
    let prep = Prepared::new(&data, &src);
    let (ad, bl) = (small_adapter(), small_baselines());
    let ctx = Context { prepared: &prep, adapter: &ad, baselines: &bl };
    let out = train(&cfg(Method::Ii, 20, 1e-2), &ctx, 0).unwrap();
    assert!(
        out.epoch_losses[19] < out.epoch_losses[0],
        "{:?}",
        out.epoch_losses
    );
}

#[test]
fn frozen_source_is_untouched_by_every_method() {
    let (data, src) = fixture(4);
    let before = src.checksum();
    let prep = Prepared::new(&data, &src);
    let (ad, bl) = (small_adapter(), small_baselines());
    let ctx = Context { prepared: &prep, adapter: &ad, baselines: &bl };
    for method in Method::ALL {
        let report = multi_seed(&cfg(method, 1, 1e-2), &ctx, "attention").unwrap();
        if method.uses_source() {
            assert_eq!(report.source_checksum_before.as_deref(), Some(before.as_str()));
            assert_eq!(report.source_checksum_after.as_deref(), Some(before.as_str()));
        }
    }
    assert_eq!(src.checksum(), before);
}

#[test]
fn optimizer_set_rejects_frozen_parameters() {
    let mut p = ParamStore::new();
    p.add_zeros("adapter.theta", &[4]).unwrap();
    assert!(check_optimizer_set(Method::Ii, &p).is_ok());
    p.freeze();
    assert!(matches!(check_optimizer_set(Method::Ii, &p), Err(Error::Contract(_))));
}

#[test]
fn poisoned_parameters_abort_with_numeric_error() {
    let (data, src) = fixture(4);
    let prep = Prepared::new(&data, &src);
    let (ad, bl) = (small_adapter(), small_baselines());
    let ctx = Context { prepared: &prep, adapter: &ad, baselines: &bl };
    let mut trainee = Trainee::new(Method::BlRep, &ctx, 0).unwrap();
    trainee.params_mut().get_mut("probe.fc2.bias").unwrap().value.data_mut()[0] = f32::NAN;
    let train = prep.get(Input::Representation, Split::Train).unwrap();
    let order: Vec<usize> = (0..train.len()).collect();
    let err = run_epoch(&mut trainee, &mut AdamState::new(1e-3), train, &order, 4, 1).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0, .. } | Error::Numeric(_)), "{err}");
}

#[test]
fn zero_lr_fine_tune_matches_random_head_oracle() {
    let (data, src) = fixture(5);
    let prep = Prepared::new(&data, &src);
    let (ad, bl) = (small_adapter(), small_baselines());
    let ctx = Context { prepared: &prep, adapter: &ad, baselines: &bl };
    let seed = 4;
    let out = train(&cfg(Method::BlFt, 1, 0.0), &ctx, seed).unwrap();

    let ft = fine_tune(&src, 4, seed).unwrap();
    let w = ft.params.get("source.head.weight").unwrap().value.clone();
    let b = ft.params.get("source.head.bias").unwrap().value.clone();
    let test = prep.get(Input::Features, Split::Test).unwrap();
    let mut correct = 0;
    for clip in test {
        let mut avg = [0.0f64; 4];
        for c in &clip.chunks {
            let mut t = Tape::<f32>::new();
            let x = t.constant(c.clone());
            let v = src.backbone(&mut t, x).unwrap();
            let v = t.value(v).data();
            let logits: Vec<f64> = (0..4)
                .map(|j| f64::from(b.data()[j]) + (0..v.len()).map(|i| f64::from(v[i] * w.data()[i * 4 + j])).sum::<f64>())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..4 {
                avg[j] += (logits[j] - mx).exp() / z;
            }
        }
        correct += usize::from(argmax(&avg) == clip.label);
    }
    assert_eq!(out.row.test_acc, correct as f64 / test.len() as f64);
}

#[test]
fn aggregate_formulas() {
    assert_eq!(aggregate(&[0.8]), (0.8, None));
    let (m, s) = aggregate(&[0.6; 5]);
    assert!((m - 0.6).abs() < 1e-12 && s.unwrap().abs() < 1e-12);
    let (m, s) = aggregate(&[0.5, 0.7]);
    assert!((m - 0.6).abs() < 1e-12);
    assert!((s.unwrap() - 0.1414).abs() < 1e-4);
}

fn report(method: Method, model: &str, accs: &[f64]) -> RunReport {
    let rows = accs
        .iter()
        .enumerate()
        .map(|(i, &a)| SeedRow {
            seed: i as u64,
            best_epoch: 1,
            val_acc: a,
            test_acc: a,
        })
        .collect();
    RunReport::new(&cfg(method, 1, 1e-3), model, rows, (10, 100), "a".into(), "a".into())
}

#[test]
fn reports_round_trip_as_json_lines() {
    let rs = vec![report(Method::Ii, "attention", &[0.5, 0.7]), report(Method::BlCnn, "attention", &[0.4])];
    let text: String = rs.iter().map(|r| r.to_json_line() + "\n").collect();
    assert_eq!(RunReport::parse_lines(&text).unwrap(), rs);
    assert_eq!(rs[1].model, "none");
    assert_eq!(rs[1].std_test_acc, None);
    let bad = text.replace(REPORT_SCHEMA, "nmr-report/0");
    assert!(matches!(RunReport::parse_lines(&bad), Err(Error::Format { .. })));
    assert!(RunReport::parse_lines("{\"schema\": 3}").is_err());
}

#[test]
fn tables_order_methods_and_show_single_rows() {
    let one = render_tables(&[report(Method::Ids, "attention", &[1.0])]);
    let acc_rows: Vec<&str> = one.lines().skip(3).take_while(|l| !l.is_empty()).collect();
    assert_eq!(acc_rows.len(), 1);
    assert!(acc_rows[0].starts_with("IDS-NMR"));

    let mixed = render_tables(&[
        report(Method::BlRep, "attention", &[0.3]),
        report(Method::Ids, "attention", &[0.9]),
        report(Method::Ii, "attention", &[0.5, 0.7]),
        report(Method::Id, "attention", &[0.8]),
    ]);
    let order: Vec<usize> = ["II-NMR", "ID-NMR", "IDS-NMR", "BL-Rep"]
        .iter()
        .map(|l| mixed.find(&format!("\n{l} ")).unwrap())
        .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{mixed}");
    assert!(mixed.contains("60.0 ± 14.1"));
}

#[test]
fn bench_reports_median_of_three() {
    let (data, src) = fixture(4);
    let prep = Prepared::new(&data, &src);
    let (ad, bl) = (small_adapter(), small_baselines());
    let ctx = Context { prepared: &prep, adapter: &ad, baselines: &bl };
    let (median, samples) = bench_epoch(&cfg(Method::Ids, 1, 1e-3), &ctx, 0).unwrap();
    assert_eq!(samples.len(), 3);
    let mut s = samples.clone();
    s.sort_by(f64::total_cmp);
    assert_eq!(median, s[1]);
    assert!(median > 0.0);
}

#[test]
fn representation_inputs_are_single_rows() {
    let (data, src) = fixture(4);
    let prep = Prepared::new(&data, &src);
    let reps = prep.get(Input::Representation, Split::Train).unwrap();
    assert!(reps.iter().all(|c| c.chunks.len() == 1 && c.chunks[0].shape() == [1, 32]));
    let waves = prep.get(Input::Waveform, Split::Train).unwrap();
    assert!(waves.iter().all(|c| c.chunks.len() == 2 && c.chunks[0].shape() == [16_000]));
    let _: &Tensor<f32> = &waves[0].chunks[0];
}

#[test]
fn bench_lines_attach_to_matching_reports() {
    let r = report(Method::Ids, "attention", &[0.9, 0.8]);
    let b = BenchRecord {
        schema: BENCH_SCHEMA.into(),
        method: Method::Ids,
        model: "attention".into(),
        seconds_per_epoch: 1.25,
        samples: vec![1.0, 1.25, 1.5],
        trainable_params: 10,
        total_params: 100,
    };
    let orphan = BenchRecord {
        method: Method::Id,
        ..b.clone()
    };
    let text = format!(
        "{}\n{}\n{}\n",
        r.to_json_line(),
        serde_json::to_string(&b).unwrap(),
        serde_json::to_string(&orphan).unwrap()
    );
    let merged = read_records(&text).unwrap();
    assert_eq!(merged.len(), 2);
    assert_eq!(merged[0].seconds_per_epoch, Some(1.25));
    assert!(merged[1].seeds.is_empty());
    let tables = render_tables(&merged);
    assert!(tables.contains("1.250"), "{tables}");
    assert!(matches!(read_records("{\"schema\":\"x\"}"), Err(Error::Format { .. })));
}
