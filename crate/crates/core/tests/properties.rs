use proptest::prelude::*;

use laaf::autodiff::Tape;
use laaf::network::{Activation, ActivationMode, NetworkParams, SlopeKind};
use laaf::objective::{slope_recovery, Objective, ObjectiveSpec, RecoveryKind};
use laaf::optimize::{train, OptimizerKind, TrainOptions};
use laaf::problems::discontinuous_preset;

fn recovery(kind: SlopeKind, widths: &[usize], slopes: &[f64]) -> (f64, Vec<f64>) {
    let mode = ActivationMode::new(kind, Activation::Tanh, 1.0).unwrap();
    let mut net = NetworkParams::init(widths, mode, 0).unwrap();
    for (a, &v) in net.slopes.iter_mut().zip(slopes.iter().cycle()) {
        *a = v;
    }
    let mut tape = Tape::new();
    let tp = net.lift(&mut tape).unwrap();
    let s = slope_recovery(&mut tape, &tp, RecoveryKind::for_mode(kind)).unwrap();
    let vars = tp.flat_vars();
    let g = tape.backward(s).unwrap().wrt_all(&vars[net.layout().slope_offset()..]);
    (tape.value(s), g)
}

fn kind_strategy() -> impl Strategy<Value = SlopeKind> {
    prop_oneof![Just(SlopeKind::Gaaf), Just(SlopeKind::Llaaf), Just(SlopeKind::Nlaaf)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recovery_is_positive_and_decreasing(
        kind in kind_strategy(),
        widths in proptest::collection::vec(1usize..6, 3..6),
        slopes in proptest::collection::vec(-5.0f64..5.0, 1..20),
    ) {
        let (s, g) = recovery(kind, &widths, &slopes);
        prop_assert!(s > 0.0 && s.is_finite());
        prop_assert!(g.iter().all(|&d| d < 0.0), "{g:?}");
        // Raising every slope by the same amount scales S by exp(-delta).
        let shifted: Vec<f64> = slopes.iter().map(|a| a + 0.5).collect();
        let (s2, _) = recovery(kind, &widths, &shifted);
        prop_assert!((s2 - s * (-0.5f64).exp()).abs() <= 1e-12 * s);
    }

    #[test]
    fn adaptive_output_matches_folded_standard_net(
        kind in kind_strategy(),
        seed in 0u64..1000,
        scale in 1.0f64..10.0,
        x in -2.0f64..2.0,
        bump in -0.3f64..0.3,
    ) {
        let mode = ActivationMode::new(kind, Activation::Tanh, scale).unwrap();
        let mut net = NetworkParams::init(&[1, 4, 3, 1], mode, seed).unwrap();
        net.slopes.iter_mut().enumerate().for_each(|(i, a)| *a += bump * (i as f64 + 1.0) / 10.0);
        let u = net.predict(&[x]).unwrap()[0];
        let v = net.to_standard().predict(&[x]).unwrap()[0];
        prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()), "{u} vs {v}");
    }
}

/// With slopes frozen at `n a = 1` and no recovery term an L-LAAF network
/// trains exactly like the fixed-activation one.
#[test]
fn frozen_llaaf_trains_like_fixed() {
    let mut preset = discontinuous_preset(4).unwrap();
    preset.widths = vec![1, 8, 8, 1];
    let run = |kind: SlopeKind| {
        let net = preset.network(kind, 4).unwrap();
        let spec = ObjectiveSpec {
            recovery: RecoveryKind::None,
            w_a: 0.0,
            ..preset.objective_spec(kind)
        };
        let objective = Objective::new(spec, &net).unwrap();
        let options = TrainOptions {
            iterations: 200,
            freeze_slopes: true,
            stop: None,
        };
        train(
            &objective,
            objective.initial_theta(&net),
            OptimizerKind::adam(1e-3),
            &options,
            &mut |_| {},
        )
        .unwrap()
    };
    let fixed = run(SlopeKind::Fixed);
    let frozen = run(SlopeKind::Llaaf);
    assert_eq!(fixed.rows.len(), 201);
    for (a, b) in fixed.rows.iter().zip(&frozen.rows) {
        assert_eq!(a.mse_u, b.mse_u, "iteration {}", a.iteration);
    }
    assert!(frozen.rows.iter().all(|r| r.slope_min == 0.1 && r.slope_max == 0.1));
}
