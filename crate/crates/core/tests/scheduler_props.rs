use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttfs_core::dynamics::{network_forward, SnnNetwork};
use ttfs_core::sample::{random_mapped_network, uniform_inputs, PolicyKind};
use ttfs_core::scheduler::{
    adapt_on_batch, forward_batch, threshold_inconsistency, tighten_for_inference, SchedulerConfig,
};

fn build(seed: u64, linear: bool) -> (SnnNetwork, Vec<Vec<f64>>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..5);
    let mut sizes = vec![8];
    for _ in 0..depth {
        sizes.push(rng.random_range(4..12));
    }
    sizes.push(3);
    let xs = uniform_inputs(24, 8, &mut rng);
    let calib: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let kind = if linear {
        PolicyKind::LinearlyMappable
    } else {
        PolicyKind::RandomConstant(0.5, 2.0)
    };
    let (snn, _) =
        random_mapped_network(&sizes, kind, 0.3, 1.0, &calib, &SchedulerConfig::default(), &mut rng).unwrap();
    (snn, xs, rng)
}

fn as_refs(xs: &[Vec<f64>]) -> Vec<&[f64]> {
    xs.iter().map(|x| x.as_slice()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn init_leaves_no_clamped_spikes(seed in any::<u64>(), linear in any::<bool>()) {
        let (snn, xs, _) = build(seed, linear);
        snn.validate().unwrap();
        prop_assert!(threshold_inconsistency(&snn) < 1e-12);
        let traces = forward_batch(&snn, &as_refs(&xs)).unwrap();
        for n in 0..snn.hidden.len() {
            let fired = traces.iter().map(|t| t.layers[n].output.fired_count()).sum::<usize>();
            let clamped = traces.iter().map(|t| t.layers[n].output.saturated_count()).sum::<usize>();
            prop_assert_eq!(clamped, 0);
            prop_assert!(fired > 0, "layer {} never fires early", n);
        }
    }

    #[test]
    fn adaptation_expands_once_then_rests(seed in any::<u64>(), linear in any::<bool>(), kick in 0.5f64..4.0) {
        let (mut snn, xs, mut rng) = build(seed, linear);
        // Push some neurons towards early spikes, as a training step might.
        for layer in &mut snn.hidden {
            for d in &mut layer.shift {
                *d -= kick * rng.random::<f64>();
            }
        }
        let cfg = SchedulerConfig::default();
        let batch = as_refs(&xs);
        let first = adapt_on_batch(&mut snn, &batch, &cfg).unwrap();
        prop_assert!(first.deltas.iter().all(|&d| d >= 0.0));
        prop_assert!(first.traces.iter().all(|t| t.saturated_low_count() == 0));
        snn.validate().unwrap();
        prop_assert!(threshold_inconsistency(&snn) < 1e-12);
        let traces = forward_batch(&snn, &batch).unwrap();
        prop_assert!(traces.iter().all(|t| t.saturated_low_count() == 0));
        let second = adapt_on_batch(&mut snn, &batch, &cfg).unwrap();
        prop_assert!(!second.changed(), "{:?}", second.deltas);
        prop_assert_eq!(second.passes, 1);
    }

    #[test]
    fn tightening_keeps_logits_and_cuts_latency(seed in any::<u64>(), linear in any::<bool>()) {
        let (mut snn, xs, _) = build(seed, linear);
        let batch = as_refs(&xs);
        let before: Vec<Vec<f64>> = xs.iter().map(|x| network_forward(x, &snn).unwrap().potentials).collect();
        let latency = snn.latency();
        let cfg = SchedulerConfig::default();
        tighten_for_inference(&mut snn, &batch, &cfg).unwrap();
        snn.validate().unwrap();
        prop_assert!(snn.latency() < latency);
        for (x, b) in xs.iter().zip(&before) {
            let trace = network_forward(x, &snn).unwrap();
            prop_assert_eq!(trace.saturated_low_count(), 0);
            for (u, v) in trace.potentials.iter().zip(b) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
        let widths: Vec<f64> = snn.hidden.iter().map(|l| l.window.width()).collect();
        tighten_for_inference(&mut snn, &batch, &cfg).unwrap();
        for (l, w) in snn.hidden.iter().zip(&widths) {
            prop_assert!((l.window.width() - w).abs() < 1e-12);
        }
    }
}
