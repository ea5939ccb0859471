use proptest::prelude::*;

use qnum_core::metrics::{convergence_time, MetricSeries};
use qnum_core::protocol::{decohere, DeliveryRecord};
use qnum_core::qnum::{bilevel_step, update_rate, W_FLOOR};
use qnum_core::sim::{sim_rng, EventQueue};
use qnum_core::topology::{build_dumbbell, build_nsfnet, dumbbell_sessions};
use qnum_core::utility::{domain_min_werner, e2e_werner};
use qnum_core::{PrimalDualState, ProblemInstance, RoutingMatrix, StepSizes, Utility, UtilityKind};

fn kind() -> impl Strategy<Value = UtilityKind> {
    prop_oneof![Just(UtilityKind::Skr), Just(UtilityKind::Neg)]
}

proptest! {
    #[test]
    fn utility_increasing_in_rate_and_werner(k in kind(), r in 0.01f64..1e4, f in 0.02f64..0.98, dr in 1e-3f64..10.0) {
        let lo = domain_min_werner(k);
        let w = lo + (1.0 - lo) * f;
        let u = Utility::<f64>::from_kind(k, 1, None).unwrap();
        let base = u.value(r, &[w]).unwrap();
        prop_assert!(u.value(r + dr, &[w]).unwrap() > base);
        let w2 = w + (1.0 - w) * 0.01;
        prop_assert!(u.value(r, &[w2]).unwrap() > base);
    }

    #[test]
    fn path_werner_bounded_by_min(ws in prop::collection::vec(0.0f64..=1.0, 1..6)) {
        let w = e2e_werner(&ws).unwrap();
        let min = ws.iter().copied().fold(1.0, f64::min);
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert!(w <= min);
    }

    #[test]
    fn bilevel_updates_keep_box(seed in 0u64..1000, steps in 1usize..200) {
        let topo = build_dumbbell(80.0).unwrap();
        let inst = ProblemInstance::<f64>::new(topo.clone(), dumbbell_sessions(&topo, UtilityKind::Neg, 0.5).unwrap()).unwrap();
        let mut st = PrimalDualState::initial(&inst, &mut sim_rng(seed));
        let sz = StepSizes::defaults(&inst);
        for _ in 0..steps {
            bilevel_step(&mut st, &inst, &sz).unwrap();
            prop_assert!(st.lambda.iter().all(|&l| l >= 0.0));
            prop_assert!(st.mu.iter().all(|&m| m >= 0.0));
            prop_assert!(st.w.iter().all(|&w| (W_FLOOR..=1.0).contains(&w)));
            prop_assert!(st.r.iter().all(|&r| r > 0.0));
        }
    }

    #[test]
    fn more_price_lowers_rate(seed in 0u64..1000, bump in 1e-4f64..1.0, link in 0usize..7) {
        let topo = build_dumbbell(80.0).unwrap();
        let inst = ProblemInstance::<f64>::new(topo.clone(), dumbbell_sessions(&topo, UtilityKind::Skr, 0.5).unwrap()).unwrap();
        let st = PrimalDualState::initial(&inst, &mut sim_rng(seed));
        let mut hi = st.clone();
        hi.lambda[link] += bump;
        for r in 0..inst.session_count() {
            let before = update_rate(&st, &inst, r).unwrap();
            let after = update_rate(&hi, &inst, r).unwrap();
            if inst.paths[r].contains(&link) {
                prop_assert!(after < before);
            } else {
                prop_assert_eq!(after, before);
            }
        }
    }

    #[test]
    fn nsfnet_routing_columns(seed in 0u64..200) {
        let topo = build_nsfnet(25.0).unwrap();
        let sc = qnum_core::scenario::Scenario::from_toml_str(
            "[topology]\nkind = \"nsfnet\"\n[sessions]\npreset = \"random\"\ncount = 6\n",
        ).unwrap();
        let sessions = sc.build_sessions(&topo, seed).unwrap();
        let m = RoutingMatrix::new(topo.link_count(), &sessions);
        for (r, s) in sessions.iter().enumerate() {
            prop_assert_eq!(m.column_sum(r), s.path.len());
            for l in 0..topo.link_count() {
                prop_assert_eq!(m.get(l, r) == 1, s.path.iter().any(|p| p.0 == l));
            }
            prop_assert!(topo.walk(s.src, &s.path).is_ok());
        }
    }

    #[test]
    fn decoherence_never_helps(w in 0.0f64..=1.0, a in 0.0f64..10.0, b in 0.0f64..10.0, tc in 0.1f64..100.0) {
        let (short, long) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(decohere(w, long, tc) <= decohere(w, short, tc));
        prop_assert!(decohere(w, short, tc) <= w);
    }

    #[test]
    fn delivered_werner_bounded(gaps in prop::collection::vec(0.0f64..0.5, 1..5), w in 0.3f64..1.0, tc in prop::option::of(0.1f64..10.0)) {
        let mut t = 0.0;
        let lle: Vec<f64> = gaps.iter().map(|g| { t += g; t }).collect();
        let done = t + 0.01;
        let rec = DeliveryRecord::from_timeline(0, 0.0, &lle, done, w, tc);
        prop_assert!(rec.w_delivered <= w + 1e-15);
        if tc.is_none() {
            prop_assert_eq!(rec.w_delivered, w);
        }
    }

    #[test]
    fn wider_band_converges_no_later(vals in prop::collection::vec(0.0f64..100.0, 2..200)) {
        let s = MetricSeries::from_samples("x", vals.iter().enumerate().map(|(i, &v)| (i as f64, v)));
        let narrow = convergence_time(&s, 0.05).time().unwrap_or(f64::INFINITY);
        let wide = convergence_time(&s, 0.10).time().unwrap_or(f64::INFINITY);
        prop_assert!(wide <= narrow);
    }

    #[test]
    fn event_queue_pops_in_order(times in prop::collection::vec(0u32..1000, 1..300)) {
        let mut q = EventQueue::new();
        for (i, &t) in times.iter().enumerate() {
            q.schedule(t as f64, i).unwrap();
        }
        let mut last = (f64::NEG_INFINITY, 0usize);
        while let Some((t, i)) = q.pop() {
            prop_assert!(t > last.0 || (t == last.0 && i > last.1));
            last = (t, i);
        }
    }
}
