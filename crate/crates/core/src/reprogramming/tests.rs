use super::*;
use crate::autodiff::{argmax, gradcheck, AdamState, Tensor};
use crate::dsp::MelConfig;
use crate::source::{build_attention_model, build_patch_transformer, AttentionConfig, PatchConfig};
use rand::Rng;

fn frozen_attention(seed: u64) -> SourceModel {
    let mut m = build_attention_model(&AttentionConfig::default(), &MelConfig::default(), seed).unwrap();
    m.freeze();
    m
}

fn small_id() -> AdapterConfig {
    AdapterConfig {
        id_channels: 4,
        ..AdapterConfig::default()
    }
}

fn random(shape: &[usize], seed: u64, scale: f32) -> Tensor<f32> {
    let mut rng = stream_rng(seed, "test/reprogramming");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn features(seed: u64) -> Tensor<f32> {
    let mut x = random(&[64, 98], seed, 4.0);
    x.data_mut().iter_mut().for_each(|v| *v -= 6.0);
    x
}

fn base_scores(model: &SourceModel, lm: &LabelMap, feats: &[Tensor<f32>]) -> Vec<f32> {
    let mapped: Vec<Vec<f32>> = feats
        .iter()
        .map(|f| {
            let mut t = Tape::<f32>::new();
            let x = t.constant(f.clone());
            let p = model.forward(&mut t, x).unwrap();
            map_labels(lm, t.value(p).data()).unwrap()
        })
        .collect();
    chunk_average(&mapped).unwrap()
}

#[test]
fn zero_theta_is_additive_identity() {
    let m = frozen_attention(0);
    let a = Adapter::new(NmrMethod::Ii, &AdapterConfig::default(), &m, 4, 0).unwrap();
    let x = random(&[16_000], 1, 0.5);
    let mut t = Tape::<f32>::new();
    let xv = t.constant(x.clone());
    let y = a.apply_ii(&mut t, xv).unwrap();
    assert_eq!(t.value(y).data(), x.data());
}

#[test]
fn zero_input_returns_theta() {
    let m = frozen_attention(0);
    let mut a = Adapter::new(NmrMethod::Ii, &AdapterConfig::default(), &m, 4, 0).unwrap();
    let theta = random(&[16_000], 2, 0.1);
    a.params.get_mut("adapter.theta").unwrap().value = theta.clone();
    let mut t = Tape::<f32>::new();
    let xv = t.constant(Tensor::zeros(&[16_000]));
    let y = a.apply_ii(&mut t, xv).unwrap();
    assert_eq!(t.value(y).data(), theta.data());
}

#[test]
fn ii_length_mismatch_is_dimension_error() {
    let m = frozen_attention(0);
    let a = Adapter::new(NmrMethod::Ii, &AdapterConfig::default(), &m, 4, 0).unwrap();
    let mut t = Tape::<f32>::new();
    let xv = t.constant(Tensor::zeros(&[15_999]));
    assert!(matches!(a.apply_ii(&mut t, xv), Err(Error::Dimension { .. })));
}

#[test]
fn theta_gradient_is_sum_of_chunk_gradients() {
    // Tiny front end so the whole waveform-to-loss path can be differenced.
    let mel = MelConfig {
        window: 64,
        hop: 32,
        fft: 64,
        mel_bins: 16,
        floor: 1e-6,
    };
    let cfg = AttentionConfig {
        chunk_seconds: 0.01,
        conv1_channels: 2,
        conv2_channels: 3,
        hidden: 5,
        num_classes: 4,
    };
    let model = build_attention_model(&cfg, &mel, 3).unwrap();
    let n = model.chunk_samples();
    let chunks: Vec<Tensor<f64>> = (0..2).map(|i| random(&[n], 10 + i, 0.8).cast()).collect();
    let theta: Tensor<f64> = random(&[n], 20, 0.2).cast();
    let loss_of = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
        let f = log_mel_var(t, x, &mel)?;
        let p = model.forward(t, f)?;
        t.nll(p, &[1])
    };
    let res = gradcheck::check(&[theta.clone()], 1e-4, |t, v| {
        let mut total = None;
        for c in &chunks {
            let x = t.constant(c.clone());
            let xp = t.add(x, v[0])?;
            let l = loss_of(t, xp)?;
            total = Some(match total {
                None => l,
                Some(acc) => t.add(acc, l)?,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap();
    assert!(res.max_rel_error < 1e-4, "rel {}", res.max_rel_error);

    // Same gradient assembled from per-chunk gradients with respect to x'.
    let mut tape = Tape::<f64>::new();
    let th = tape.leaf(theta.clone(), true);
    let mut xps = Vec::new();
    let mut total = None;
    for c in &chunks {
        let x = tape.constant(c.clone());
        let xp = tape.add(x, th).unwrap();
        xps.push(xp);
        let l = loss_of(&mut tape, xp).unwrap();
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l).unwrap(),
        });
    }
    let g = tape.backward(total.unwrap()).unwrap();
    let summed: Vec<f64> = (0..n).map(|i| xps.iter().map(|&v| g.get(v).unwrap()[i]).sum()).collect();
    for (a, b) in g.get(th).unwrap().iter().zip(&summed) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn fresh_feature_transform_is_identity() {
    let m = frozen_attention(0);
    let a = Adapter::new(NmrMethod::Id, &AdapterConfig::default(), &m, 4, 0).unwrap();
    let x = features(3);
    let mut t = Tape::<f32>::new();
    let xv = t.constant(x.clone());
    let y = a.apply_id(&mut t, xv).unwrap();
    assert_eq!(t.shape(y), &[64, 98]);
    assert_eq!(t.value(y).data(), x.data());
}

#[test]
fn trained_feature_transform_depends_on_input() {
    let m = frozen_attention(0);
    let mut a = Adapter::new(NmrMethod::Id, &small_id(), &m, 4, 0).unwrap();
    let x1 = features(4);
    let x2 = features(5);
    let mut t = Tape::<f32>::new();
    let s = a.clip_scores(&m, &mut t, &[x1.clone(), x2.clone()]).unwrap();
    let p = t.normalize(s).unwrap();
    let loss = t.nll(p, &[2]).unwrap();
    t.backward(loss).unwrap().accumulate_into(&mut a.params);
    AdamState::new(1e-2).step(&mut a.params).unwrap();

    let delta = |x: &Tensor<f32>| {
        let mut t = Tape::<f32>::new();
        let xv = t.constant(x.clone());
        let y = a.apply_id(&mut t, xv).unwrap();
        t.value(y).data().iter().zip(x.data()).map(|(a, b)| a - b).collect::<Vec<_>>()
    };
    let (d1, d2) = (delta(&x1), delta(&x2));
    assert!(d1.iter().any(|v| *v != 0.0));
    assert!(d1.iter().zip(&d2).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn zero_init_skip_adapter_reproduces_base_probs() {
    let m = frozen_attention(1);
    let a = Adapter::new(NmrMethod::Ids, &AdapterConfig::default(), &m, 4, 0).unwrap();
    let x = features(6);
    let mut t = Tape::<f32>::new();
    let xv = t.constant(x.clone());
    let p = a.source_probs(&m, &mut t, xv).unwrap();
    let mut t2 = Tape::<f32>::new();
    let xv2 = t2.constant(x);
    let base = m.forward(&mut t2, xv2).unwrap();
    assert_eq!(t.value(p).data(), t2.value(base).data());
    let s: f64 = t.value(p).data().iter().map(|&v| f64::from(v)).sum();
    assert!((s - 1.0).abs() < 1e-6);
}

#[test]
fn every_method_starts_neutral() {
    let m = frozen_attention(2);
    let wave: Vec<Tensor<f32>> = (0..3).map(|i| random(&[16_000], 30 + i, 0.3)).collect();
    let feats: Vec<Tensor<f32>> = wave
        .iter()
        .map(|w| {
            let w = crate::dsp::Waveform::new(w.data().to_vec(), 16_000).unwrap();
            crate::dsp::log_mel(&w, &m.mel).unwrap().values
        })
        .collect();
    for method in NmrMethod::ALL {
        let a = Adapter::new(method, &AdapterConfig::default(), &m, 4, 0).unwrap();
        let input = if method == NmrMethod::Ii { &wave } else { &feats };
        let got = a.predict_clip(&m, input).unwrap();
        let want = base_scores(&m, &a.label_map, &feats);
        assert_eq!(got, want, "{method:?}");
    }
}

#[test]
fn skip_backward_visits_fewer_nodes_than_feature_transform() {
    let m = frozen_attention(0);
    let x = features(7);
    let visited = |method| {
        let a = Adapter::new(method, &small_id(), &m, 4, 0).unwrap();
        let mut t = Tape::<f32>::new();
        let s = a.clip_scores(&m, &mut t, &[x.clone()]).unwrap();
        let p = t.normalize(s).unwrap();
        let loss = t.nll(p, &[0]).unwrap();
        t.backward(loss).unwrap().visited_nodes()
    };
    let (id, ids) = (visited(NmrMethod::Id), visited(NmrMethod::Ids));
    assert!(ids < id, "ids {ids} id {id}");
}

#[test]
fn trainable_counts_follow_shapes() {
    let mut patch = build_patch_transformer(&PatchConfig::default(), &MelConfig::default(), 0).unwrap();
    patch.freeze();
    let ii = Adapter::new(NmrMethod::Ii, &AdapterConfig::default(), &patch, 10, 0).unwrap();
    assert_eq!(ii.count_trainable(), 160_000);
    let att = frozen_attention(0);
    let ii = Adapter::new(NmrMethod::Ii, &AdapterConfig::default(), &att, 10, 0).unwrap();
    assert_eq!(ii.count_trainable(), 16_000);
    let id = Adapter::new(NmrMethod::Id, &AdapterConfig::default(), &att, 10, 0).unwrap();
    let c = 136;
    assert_eq!(id.count_trainable(), (9 * c + c) + (9 * c * c + c) + (9 * c + 1));
    assert_eq!(id.count_trainable(), 169_185);
    let ids = Adapter::new(NmrMethod::Ids, &AdapterConfig::default(), &att, 10, 0).unwrap();
    assert_eq!(ids.count_trainable(), 32 * 128 + 128 + 128 * 32 + 32);
    assert_eq!(ParamStore::new().count_trainable(), 0);
}

#[test]
fn default_fan_in_depends_on_arch() {
    let att = frozen_attention(0);
    let a = Adapter::new(NmrMethod::Ids, &AdapterConfig::default(), &att, 10, 0).unwrap();
    assert_eq!(a.label_map.n, 2);
    let mut patch = build_patch_transformer(&PatchConfig::default(), &MelConfig::default(), 0).unwrap();
    patch.freeze();
    let a = Adapter::new(NmrMethod::Ids, &AdapterConfig::default(), &patch, 10, 0).unwrap();
    assert_eq!(a.label_map.n, 5);
}

#[test]
fn adapters_require_frozen_source() {
    let m = build_attention_model(&AttentionConfig::default(), &MelConfig::default(), 0).unwrap();
    assert!(matches!(
        Adapter::new(NmrMethod::Ids, &AdapterConfig::default(), &m, 4, 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn source_averaging_gives_same_prediction() {
    let m = frozen_attention(3);
    let feats: Vec<Tensor<f32>> = (0..4).map(|i| features(40 + i)).collect();
    let t = Adapter::new(NmrMethod::Ids, &AdapterConfig::default(), &m, 4, 0).unwrap();
    let cfg = AdapterConfig {
        chunk_averaging: ChunkAveraging::Source,
        ..AdapterConfig::default()
    };
    let s = Adapter::new(NmrMethod::Ids, &cfg, &m, 4, 0).unwrap();
    let (a, b) = (t.predict_clip(&m, &feats).unwrap(), s.predict_clip(&m, &feats).unwrap());
    assert_eq!(argmax(&a), argmax(&b));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn adapter_checkpoint_round_trip() {
    let m = frozen_attention(0);
    let a = Adapter::new(NmrMethod::Id, &small_id(), &m, 4, 9).unwrap();
    let bytes = a.to_checkpoint(&m.checksum()).to_bytes();
    let (b, sum) = Adapter::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(sum, m.checksum());
    assert_eq!(b.method, NmrMethod::Id);
    assert_eq!(b.label_map, a.label_map);
    assert_eq!(b.params.to_bytes(), a.params.to_bytes());
    assert!(Adapter::from_checkpoint(m.to_checkpoint()).is_err());
}
