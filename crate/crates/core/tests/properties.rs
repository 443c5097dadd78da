use std::sync::Arc;

use ilempc_core::analysis::{telescoping_error, QuadraticStorage};
use ilempc_core::average::{closed_form_offset, init_offset, ControlComponent, OffsetSet};
use ilempc_core::dynamics::Extension;
use ilempc_core::{plants, rollout, BoxSet, QuadraticCost};
use proptest::prelude::*;

fn controls(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn periodic_lookup_repeats_the_last_period(
        u in prop::collection::vec(-1.0..1.0f64, 8..40),
        period_frac in 0.05..1.0f64,
        k in 0usize..200,
    ) {
        let model = plants::linear_tracker().unwrap();
        let steps = u.len() / 2;
        let traj = rollout(&model, &[0.0, 0.0], &u[..steps * 2]).unwrap();
        let period = ((steps as f64 * period_frac).ceil() as usize).clamp(1, steps);
        let traj = traj.with_extension(Extension::Periodic { period }).unwrap();
        let k = steps + period + 1 + k;
        prop_assert_eq!(traj.lookup_state(k).unwrap(), traj.lookup_state(k - period).unwrap());
        prop_assert_eq!(traj.lookup_control(k).unwrap(), traj.lookup_control(k - period).unwrap());
    }

    #[test]
    fn hold_lookup_returns_the_steady_state(u in controls(12), k in 13usize..500) {
        let model = plants::linear_regulator().unwrap();
        let traj = rollout(&model, &[0.5, -0.5], &u).unwrap()
            .with_extension(Extension::Hold { state: vec![0.0, 0.0], control: vec![0.0] })
            .unwrap();
        prop_assert_eq!(traj.lookup_state(k).unwrap(), &[0.0, 0.0][..]);
        prop_assert_eq!(traj.lookup_control(k).unwrap(), &[0.0][..]);
        prop_assert!(traj.lookup_state(12).is_ok());
    }

    #[test]
    fn rollout_is_reproducible(u in prop::collection::vec(0.0..5.0f64, 2..30)) {
        let model = plants::reactor().unwrap();
        let len = u.len() / 2 * 2;
        let x0 = model.steady_state().unwrap().state.clone();
        let a = rollout(&model, &x0, &u[..len]).unwrap();
        let b = rollout(&model, &x0, &u[..len]).unwrap();
        prop_assert_eq!(a.states_flat(), b.states_flat());
        // stepping one at a time gives the same states
        let mut x = x0.clone();
        for k in 0..a.len() {
            x = model.step(&x, a.control(k)).unwrap();
            prop_assert_eq!(&x[..], a.state(k + 1));
        }
    }

    #[test]
    fn offset_recursion_matches_closed_form(
        prev_u in controls(60),
        cur_u in controls(60),
        horizon in 1usize..8,
    ) {
        let model = plants::linear_regulator().unwrap();
        let hold = Extension::Hold { state: vec![0.0, 0.0], control: vec![0.0] };
        let prev = rollout(&model, &[0.0, 0.0], &prev_u).unwrap().with_extension(hold.clone()).unwrap();
        let cur = rollout(&model, &[0.0, 0.0], &cur_u).unwrap();
        let map = ControlComponent { index: 0 };
        let mut set = OffsetSet::new(BoxSet::symmetric(1, 10.0), &init_offset(&prev, &map, horizon).unwrap()).unwrap();
        for k in 0..cur.len() {
            let direct = closed_form_offset(&prev, &cur, &map, horizon, k).unwrap();
            prop_assert!((set.offset()[0] - direct[0]).abs() <= 1e-12);
            let incoming = prev.lookup_control(k + horizon).unwrap().to_vec();
            set.update(cur.control(k), &incoming);
        }
    }

    #[test]
    fn rotation_telescopes(
        u in controls(10),
        q in prop::collection::vec(-2.0..2.0f64, 2),
        p in prop::collection::vec(-1.0..1.0f64, 4),
        x0 in prop::collection::vec(-1.0..1.0f64, 2),
    ) {
        let model = plants::linear_regulator().unwrap();
        let storage = Arc::new(QuadraticStorage::new(vec![0.0, 0.0], q, p).unwrap());
        let cost = QuadraticCost::regulator(2, 1);
        let err = telescoping_error(&cost, &storage, &model, &x0, &u, 0).unwrap();
        prop_assert!(err <= 1e-9, "telescoping error {err:e}");
    }
}
