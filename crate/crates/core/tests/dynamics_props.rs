use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttfs_core::bridge::relu_forward;
use ttfs_core::dynamics::{
    decode_ttfs, encode_ttfs, integrate_potential_oracle, layer_forward, network_forward, AlphaPolicy, NetworkConfig,
    SnnLayer, SnnNetwork, SpikeVector, Window,
};
use ttfs_core::linalg::DenseMatrix;
use ttfs_core::sample::{random_mapped_network, uniform_inputs, PolicyKind};
use ttfs_core::scheduler::SchedulerConfig;

/// Random single layer whose input spikes fill the previous window.
fn random_layer(seed: u64, linear: bool) -> (SnnLayer, SpikeVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, outputs) = (rng.random_range(1..6), rng.random_range(1..6));
    let prev = Window::new(0.0, 1.0);
    let window = Window::new(1.0, 1.0 + rng.random_range(0.5..3.0));
    let weights = DenseMatrix::from_fn(outputs, inputs, |_, _| rng.random_range(-0.6..0.8));
    let policy = if linear {
        AlphaPolicy::LinearlyMappable
    } else {
        // Keep B = α + ΣW comfortably positive.
        let sums = weights.row_sums();
        AlphaPolicy::ConstantAlpha(
            sums.iter()
                .map(|s| (0.3 - s).max(0.0) + rng.random_range(0.2..1.5))
                .collect(),
        )
    };
    let mut layer = SnnLayer::new(weights, policy, window, 1.0).unwrap();
    layer.shift = (0..outputs).map(|_| rng.random_range(-0.3..0.6)).collect();
    let times = (0..inputs).map(|_| rng.random_range(prev.t_min..prev.t_max)).collect();
    (layer, SpikeVector::from_times(times, prev))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spikes_stay_in_window_and_match_closed_form(seed in any::<u64>(), linear in any::<bool>()) {
        let (layer, input) = random_layer(seed, linear);
        let rec = layer_forward(&input, &layer, 1.0).unwrap();
        let w = layer.window;
        prop_assert_eq!(rec.output.len(), layer.outputs());
        for i in 0..layer.outputs() {
            let t = rec.output.times[i];
            prop_assert!(w.t_min <= t && t <= w.t_max);
            if !rec.output.mask[i] {
                prop_assert_eq!(t, w.t_max);
            } else if !rec.output.saturated_low[i] {
                prop_assert!((t - rec.numerator[i] / rec.slope[i]).abs() <= 1e-12 * t.abs().max(1.0));
            }
            if linear {
                prop_assert!((rec.slope[i] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_agrees_with_time_stepping(seed in any::<u64>(), linear in any::<bool>()) {
        let (layer, input) = random_layer(seed, linear);
        let dt = 1e-4 * layer.window.width();
        let exact = layer_forward(&input, &layer, 1.0).unwrap();
        let stepped = integrate_potential_oracle(&input, &layer, 1.0, dt);
        for i in 0..layer.outputs() {
            prop_assert!((exact.output.times[i] - stepped.times[i]).abs() <= 2.0 * dt,
                "neuron {}: {} vs {}", i, exact.output.times[i], stepped.times[i]);
        }
    }

    #[test]
    fn encoding_round_trips_and_is_monotone(xs in prop::collection::vec(0.0f64..=1.0, 1..20), tau_c in 0.1f64..10.0) {
        let cfg = NetworkConfig::new(tau_c, vec![xs.len(), 1]).unwrap();
        let s = encode_ttfs(&xs, &cfg).unwrap();
        let back = decode_ttfs(&s, tau_c, tau_c);
        for (a, b) in xs.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                if xs[i] < xs[j] {
                    prop_assert!(s.times[i] >= s.times[j]);
                }
            }
        }
    }

    #[test]
    fn hidden_spikes_decode_to_relu_activations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [6, rng.random_range(2..8), rng.random_range(2..8), rng.random_range(2..8), 3];
        let xs = uniform_inputs(12, 6, &mut rng);
        let calib: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let (snn, ann) = random_mapped_network(&sizes, PolicyKind::LinearlyMappable, 0.3, 1.0, &calib, &SchedulerConfig::default(), &mut rng).unwrap();
        for x in &xs {
            let trace = network_forward(x, &snn).unwrap();
            let reference = relu_forward(&ann, x);
            for (n, rec) in trace.layers.iter().enumerate() {
                prop_assert_eq!(rec.output.saturated_count(), 0);
                let decoded = decode_ttfs(&rec.output, snn.hidden[n].window.t_max, 1.0);
                for (a, b) in decoded.iter().zip(&reference.activations[n]) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
            for (v, z) in trace.potentials.iter().zip(&reference.logits) {
                prop_assert!((v - z).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zero_depth_network_is_a_linear_readout() {
    let w = DenseMatrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]).unwrap();
    let net = SnnNetwork::from_weights(2.0, Vec::new(), w.clone()).unwrap();
    let x = [0.2, 0.7, 1.0];
    let trace = network_forward(&x, &net).unwrap();
    let expected = w.mat_vec(&x);
    for (v, e) in trace.potentials.iter().zip(&expected) {
        assert!((v - e).abs() < 1e-12);
    }
}

#[test]
fn zero_input_spikes_at_tau_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = uniform_inputs(4, 4, &mut rng);
    let calib: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let (snn, _) = random_mapped_network(
        &[4, 3, 2],
        PolicyKind::LinearlyMappable,
        0.0,
        1.5,
        &calib,
        &SchedulerConfig::default(),
        &mut rng,
    )
    .unwrap();
    let trace = network_forward(&[0.0; 4], &snn).unwrap();
    assert!(trace.input.times.iter().all(|&t| t == 1.5));
}

#[test]
fn oracle_halving_dt_is_self_consistent() {
    let layer = SnnLayer {
        weights: DenseMatrix::from_vec(1, 1, vec![0.5]).unwrap(),
        shift: vec![0.0],
        base_threshold: vec![1.0],
        alpha_policy: AlphaPolicy::LinearlyMappable,
        window: Window::new(1.0, 2.0),
    };
    let input = SpikeVector::from_times(vec![0.5], Window::new(0.0, 1.0));
    let a = integrate_potential_oracle(&input, &layer, 1.0, 1e-5).times[0];
    let b = integrate_potential_oracle(&input, &layer, 1.0, 5e-6).times[0];
    assert!((a - 1.75).abs() <= 2e-5);
    assert!((a - b).abs() <= 2e-5);
}
