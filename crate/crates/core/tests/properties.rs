use proptest::prelude::*;

use nmr_core::autodiff::{argmax, AdamState, ParamStore, Tape, Tensor};
use nmr_core::dsp::{log_mel, MelConfig, MelFilterbank, Waveform};
use nmr_core::harness::aggregate;
use nmr_core::reprogramming::{chunk_average, map_labels, LabelMap};

fn probs(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, len).prop_map(|v| {
        let z: f64 = v.iter().sum();
        v.into_iter().map(|x| x / z).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, logits in prop::collection::vec(-1e3f32..1e3, 40)) {
        let cols = logits.len() / rows;
        let t = Tensor::new(vec![rows, cols], logits[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t);
        let p = tape.softmax(x).unwrap();
        for r in tape.value(p).data().chunks(cols) {
            let s: f32 = r.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sums to {}", s);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn frozen_parameters_survive_adam(steps in 1usize..6, vals in prop::collection::vec(-2.0f32..2.0, 6)) {
        let mut store = ParamStore::new();
        store.add("frozen.w", Tensor::new(vec![3], vals[..3].to_vec()).unwrap()).unwrap();
        store.freeze();
        store.add("live.w", Tensor::new(vec![3], vals[3..].to_vec()).unwrap()).unwrap();
        let before = store.get("frozen.w").unwrap().value.clone();
        let mut adam = AdamState::new(0.1);
        for _ in 0..steps {
            let mut tape = Tape::<f32>::new();
            let a = tape.param(store.get("frozen.w").unwrap());
            let b = tape.param(store.get("live.w").unwrap());
            let ab = tape.mul(a, b).unwrap();
            let loss = tape.sum(ab);
            tape.backward(loss).unwrap().accumulate_into(&mut store);
            adam.step(&mut store).unwrap();
        }
        prop_assert_eq!(adam.step_count(), steps as u64);
        prop_assert_eq!(&store.get("frozen.w").unwrap().value, &before);
    }

    #[test]
    fn tensor_rejects_mismatched_shape(a in 1usize..6, b in 1usize..6, extra in 1usize..4) {
        prop_assert!(Tensor::<f32>::new(vec![a, b], vec![0.0; a * b + extra]).is_err());
        prop_assert!(Tensor::<f32>::new(vec![a, b], vec![0.0; a * b]).is_ok());
    }

    #[test]
    fn mapped_argmax_ignores_positive_scale(p in probs(35), scale in 1e-3f64..1e3, n in 1usize..4) {
        let lm = LabelMap::blocks(n, 35 / n / 2 + 2, 35).unwrap();
        let scaled: Vec<f64> = p.iter().map(|v| v * scale).collect();
        prop_assert_eq!(
            argmax(&map_labels(&lm, &p).unwrap()),
            argmax(&map_labels(&lm, &scaled).unwrap())
        );
    }

    #[test]
    fn chunk_average_is_permutation_invariant(
        rows in prop::collection::vec(prop::collection::vec(0.0f32..1.0, 4), 1..20),
        seed in any::<u64>(),
    ) {
        let mut shuffled = rows.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(chunk_average(&rows).unwrap(), chunk_average(&shuffled).unwrap());
    }

    #[test]
    fn label_map_rejects_shared_sources(kt in 2usize..6, n in 1usize..4, a in 0usize..6, b in 0usize..6) {
        let ks = kt * n + 3;
        let mut assignment: Vec<Vec<usize>> = (0..kt).map(|t| (t * n..t * n + n).collect()).collect();
        let (a, b) = (a % kt, b % kt);
        prop_assume!(a != b);
        assignment[b][0] = assignment[a][0];
        prop_assert!(LabelMap::new(assignment, ks).is_err());
    }

    #[test]
    fn std_needs_two_seeds(accs in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let (mean, std) = aggregate(&accs);
        prop_assert!((0.0..=1.0).contains(&mean));
        prop_assert_eq!(std.is_some(), accs.len() >= 2);
    }

    #[test]
    fn log_mel_is_deterministic(samples in prop::collection::vec(-1.0f32..1.0, 400..1200)) {
        let cfg = MelConfig::default();
        let w = Waveform::new(samples, 16_000).unwrap();
        let a = log_mel(&w, &cfg).unwrap();
        let b = log_mel(&w, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn filterbank_weights_are_a_partition_at_most() {
    for mel_bins in [16, 40, 64, 128] {
        let cfg = MelConfig { mel_bins, ..MelConfig::default() };
        let fb = MelFilterbank::new(&cfg);
        assert!(fb.weights.iter().all(|&w| w >= 0.0));
        for k in 0..fb.spectrum_bins {
            let total: f64 = (0..fb.mel_bins).map(|m| fb.weights[m * fb.spectrum_bins + k]).sum();
            assert!(total <= 1.0 + 1e-6, "bin {k}: {total}");
        }
    }
}
