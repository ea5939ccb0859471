use qnum_core::protocol::{simulate, Engine, ProtocolConfig, StepScaling, Variant};
use qnum_core::sim::{Intervention, TimedIntervention};
use qnum_core::topology::{build_dumbbell, build_nsfnet, dumbbell_sessions};
use qnum_core::{SessionSpec, Topology, UtilityKind};

fn dumbbell() -> (Topology, Vec<SessionSpec>) {
    let topo = build_dumbbell(80.0).unwrap();
    let sessions = dumbbell_sessions(&topo, UtilityKind::Skr, 0.5).unwrap();
    (topo, sessions)
}

fn config(variant: Variant) -> ProtocolConfig {
    ProtocolConfig { variant, ..ProtocolConfig::default() }
}

fn at(time_s: f64, action: Intervention) -> TimedIntervention {
    TimedIntervention { time_s, action }
}

#[test]
fn approx_weight_conserved_under_loss() {
    let (topo, sessions) = dumbbell();
    let cfg = ProtocolConfig { n_mem: 3, ..config(Variant::QpdApprox) };
    let mut e = Engine::new(topo, sessions, cfg, vec![], 2).unwrap();
    for k in 1..=300 {
        e.run_until(k as f64 * 0.1).unwrap();
        e.weight_balance().unwrap();
    }
    assert!(e.counters().drops > 100);
}

#[test]
fn exact_corrections_restore_sums() {
    let (topo, sessions) = dumbbell();
    let cfg = ProtocolConfig { n_mem: 3, ..config(Variant::Qpd) };
    let mut e = Engine::new(topo, sessions, cfg, vec![], 4).unwrap();
    e.run_until(30.0).unwrap();
    e.quiesce().unwrap();
    let c = e.counters();
    assert!(c.drops > 0 && c.corrections == c.drops);
    assert!(c.audit_checks > 0);
    assert_eq!(c.audit_violations, 0);
    assert_eq!(e.ledger_mismatches(), Vec::<String>::new());
}

#[test]
fn loss_free_run_keeps_ledgers_exact() {
    let (topo, sessions) = dumbbell();
    let mut e = Engine::new(topo, sessions, config(Variant::Qpd), vec![], 1).unwrap();
    e.run_until(20.0).unwrap();
    e.quiesce().unwrap();
    assert_eq!(e.counters().drops, 0);
    assert!(e.ledger_mismatches().is_empty());
}

#[test]
fn same_seed_same_output() {
    let (topo, sessions) = dumbbell();
    let run = |seed| simulate(topo.clone(), sessions.clone(), config(Variant::QpdApprox), vec![], 15.0, seed).unwrap();
    let (a, b, c) = (run(9), run(9), run(10));
    assert_eq!(a.output.links.to_csv(), b.output.links.to_csv());
    assert_eq!(a.output.summary.to_csv(), b.output.summary.to_csv());
    assert_eq!(a.counters, b.counters);
    assert_ne!(a.output.links.to_csv(), c.output.links.to_csv());
}

#[test]
fn failure_stops_crossing_sessions_and_restore_resumes() {
    let (topo, sessions) = dumbbell();
    let crossing: Vec<usize> = sessions.iter().filter(|s| s.path.iter().any(|l| l.0 == 1)).map(|s| s.id).collect();
    assert_eq!(crossing.len(), 2);
    let ivs = vec![
        at(20.0, Intervention::LinkFailure { link: 1 }),
        at(40.0, Intervention::LinkRestore { link: 1 }),
    ];
    let mut e = Engine::new(topo, sessions, config(Variant::Qpd), ivs, 3).unwrap();
    e.run_until(25.0).unwrap();
    let during = e.counters().delivered;
    e.run_until(38.0).unwrap();
    let rates = e.session_rates();
    let late = e.counters().delivered - during;
    assert!(late > 0, "surviving sessions keep delivering");
    e.run_until(70.0).unwrap();
    let r = e.finish(3);
    assert_eq!(r.output.events.count("l1:failure"), 1);
    assert_eq!(r.output.events.count("l1:restore"), 1);
    let rate = |s: usize, t0: f64, t1: f64| r.output.sessions.get(&format!("s{s}:rate")).unwrap().mean_between(t0, t1);
    for &s in &crossing {
        assert!(rate(s, 60.0, 70.0).unwrap() > 0.0);
    }
    assert!(rates.iter().all(|r| r.is_finite()));
}

#[test]
fn utility_switch_lowers_bottleneck_w() {
    let (topo, sessions) = dumbbell();
    let ivs = vec![at(
        80.0,
        Intervention::UtilitySwitch { sessions: (0..6).collect(), utility: UtilityKind::Neg },
    )];
    let r = simulate(topo, sessions, config(Variant::Qpd), ivs, 160.0, 1).unwrap();
    let before = r.link_mean("l3:w", 60.0, 80.0).unwrap();
    let after = r.link_mean("l3:w", 140.0, 160.0).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn qtcp_keeps_w_fixed() {
    let (topo, sessions) = dumbbell();
    let r = simulate(topo, sessions, config(Variant::Qtcp), vec![], 30.0, 1).unwrap();
    assert!(r.final_w.iter().all(|&w| w == 0.967));
    assert!(r.counters.delivered > 0);
}

#[test]
fn pi_engages_with_short_coherence() {
    let (topo, sessions) = dumbbell();
    let cfg = ProtocolConfig { t_c: Some(1.0), ..config(Variant::QpdPi) };
    let r = simulate(topo, sessions, cfg, vec![], 90.0, 1).unwrap();
    let t = r.pi_switch_time.expect("controller engages");
    assert!(t <= 60.0 + 1e-9);
    assert_eq!(r.output.events.count("pi:engage"), 1);
}

#[test]
fn rate_scaled_steps_on_nsfnet() {
    let topo = build_nsfnet(25.0).unwrap();
    let sc = qnum_core::scenario::Scenario::from_toml_str(
        "[topology]\nkind = \"nsfnet\"\n[sessions]\npreset = \"random\"\ncount = 4\n",
    )
    .unwrap();
    let sessions = sc.build_sessions(&topo, 1).unwrap();
    let cfg = ProtocolConfig { step_scaling: StepScaling::Rate, ..config(Variant::Qpd) };
    let r = simulate(topo, sessions, cfg, vec![], 60.0, 1).unwrap();
    assert!(r.blowup.is_none());
    assert!(r.final_lambda.iter().all(|&l| l >= 0.0 && l.is_finite()));
    assert!(r.steady(UtilityKind::Skr) > 0.0);
}
