//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use qnum_core::metrics::{mean_ci, moving_average, CONVERGENCE_BAND, MA_WINDOW_S};
use qnum_core::protocol::{Engine, RunResult, Variant};
use qnum_core::qnum::{
    brute_force_oracle, slater_point, solve_centralized, strict_margin, ProblemInstance, StepSizes, DEFAULT_KKT_TOL,
};
use qnum_core::scenario::{run_scenario, stability_check, upper_bound, Scenario, SweepAxis};
use qnum_core::topology::{build_dumbbell, build_nsfnet, dumbbell_sessions, LinkId, NodeId, SessionSpec, Topology};
use qnum_core::utility::{domain_min_werner, rate_derivative, werner_derivative, werner_second_derivative, Utility};
use qnum_core::UtilityKind;

const SKR: UtilityKind = UtilityKind::Skr;

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn variant(sc: &Scenario, v: Variant) -> Scenario {
    sc.with_axis(SweepAxis::Variant, v.name()).unwrap()
}

fn runs(sc: &Scenario) -> Vec<RunResult> {
    sc.run.seeds.iter().map(|&s| run_scenario(sc, s, None).unwrap()).collect()
}

fn steady(rs: &[RunResult]) -> Vec<f64> {
    rs.iter().map(|r| r.steady(SKR)).collect()
}

fn mean(v: &[f64]) -> f64 {
    mean_ci(v).0
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ")
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Runs shared by criteria 1, 2 and 7.
struct Baseline {
    bound: f64,
    qpd: Vec<f64>,
    approx: Vec<f64>,
    qtcp: Vec<f64>,
}

fn baseline() -> Baseline {
    let sc = scenario("dumbbell_skr.toml");
    let (_, bound) = upper_bound(&sc, 1).unwrap();
    Baseline {
        bound,
        qpd: steady(&runs(&variant(&sc, Variant::Qpd))),
        approx: steady(&runs(&variant(&sc, Variant::QpdApprox))),
        qtcp: steady(&runs(&variant(&sc, Variant::Qtcp))),
    }
}

fn near_optimality(b: &Baseline) -> Outcome {
    let ratio = mean(&b.qpd) / b.bound;
    outcome(ratio >= 0.93, format!("mean {:.2} / bound {:.2} = {:.3} (need >= 0.93)", mean(&b.qpd), b.bound, ratio))
}

fn baseline_gap(b: &Baseline) -> Outcome {
    let ok = b.qtcp.iter().zip(&b.qpd).all(|(t, q)| t < q);
    outcome(ok, format!("qtcp [{}] vs qpd [{}]", fmt(&b.qtcp), fmt(&b.qpd)))
}

fn bilevel_robustness() -> Outcome {
    let sc = scenario("dumbbell_skr.toml");
    let mut ok = true;
    let mut parts = Vec::new();
    for t_outer in ["1", "10", "50", "250"] {
        let rs = runs(&sc.with_axis(SweepAxis::TOuter, t_outer).unwrap());
        let conv = rs.iter().filter(|r| r.convergence(SKR).is_converged()).count();
        if t_outer != "250" {
            ok &= conv == rs.len();
            parts.push(format!("T_outer={t_outer}: {conv}/{}", rs.len()));
        } else {
            parts.push(format!("T_outer=250 (reported): {conv}/{}", rs.len()));
        }
    }
    outcome(ok, parts.join(", "))
}

fn failure_recovery() -> Outcome {
    let sc = scenario("dumbbell_failure.toml");
    let reduced = Scenario::from_toml_str(
        r#"
[topology]
kind = "dumbbell"
link_length_km = 80.0

[sessions]
preset = "explicit"
utility = "skr"
f_min = 0.5
list = [{ src = 0, dst = 5 }, { src = 2, dst = 7 }, { src = 5, dst = 0 }, { src = 7, dst = 2 }]
"#,
    )
    .unwrap();
    let (_, bound) = upper_bound(&reduced, 1).unwrap();
    let t_fail = sc.interventions[0].time_s;
    let end = sc.run.duration_s;
    let mut ok = true;
    let (mut post, mut conv) = (Vec::new(), Vec::new());
    for r in runs(&sc) {
        let s = r.steady(SKR);
        let after = r.aggregate(SKR).map(|a| moving_average(&a.slice(t_fail, end), MA_WINDOW_S));
        let c = after.map(|m| qnum_core::metrics::convergence_time(&m, CONVERGENCE_BAND)).and_then(|c| c.time());
        ok &= (s - bound).abs() <= 0.10 * bound && c.is_some();
        post.push(s);
        conv.push(c.unwrap_or(f64::NAN));
    }
    outcome(ok, format!("reduced bound {bound:.2}; post-failure [{}]; converged at [{}]", fmt(&post), fmt(&conv)))
}

fn decoherence_mitigation() -> Outcome {
    let sc = scenario("dumbbell_skr.toml").with_axis(SweepAxis::Tc, "1").unwrap();
    let plain = steady(&runs(&variant(&sc, Variant::Qpd)));
    let da = steady(&runs(&variant(&sc, Variant::QpdDa)));
    let da_approx = steady(&runs(&variant(&sc, Variant::QpdDaApprox)));
    let pi = steady(&runs(&variant(&sc, Variant::QpdPi)));
    let beats = |v: &[f64]| v.iter().zip(&plain).all(|(a, p)| a > p);
    let gap = (mean(&da_approx) - mean(&da)).abs() / mean(&da);
    let ok = beats(&da) && beats(&pi) && gap <= 0.10;
    outcome(
        ok,
        format!("qpd [{}], da [{}], pi [{}], da-approx gap {:.3}", fmt(&plain), fmt(&da), fmt(&pi), gap),
    )
}

fn workload_direction() -> Outcome {
    let sc = scenario("dumbbell_workload.toml");
    let t_switch = sc.interventions[0].time_s;
    let end = sc.run.duration_s;
    let mut ok = true;
    let mut bottleneck_min = 0;
    let rs = runs(&sc);
    for r in &rs {
        let n = r.final_w.len();
        let w = |l: usize, a: f64, b: f64| r.link_mean(&format!("l{l}:w"), a, b).unwrap();
        let skr: Vec<f64> = (0..n).map(|l| w(l, 0.8 * t_switch, t_switch)).collect();
        let neg: Vec<f64> = (0..n).map(|l| w(l, end - 0.2 * (end - t_switch), end)).collect();
        ok &= neg.iter().zip(&skr).all(|(a, b)| a < b);
        let argmin = (0..n).min_by(|&i, &j| skr[i].total_cmp(&skr[j])).unwrap();
        if argmin == 3 {
            bottleneck_min += 1;
        }
    }
    ok &= bottleneck_min == rs.len();
    outcome(ok, format!("all links lower after switch: {ok}; bottleneck minimal in {bottleneck_min}/{} seeds", rs.len()))
}

fn approx_fidelity(b: &Baseline) -> Outcome {
    let gap = (mean(&b.approx) - mean(&b.qpd)).abs() / mean(&b.qpd);
    outcome(gap <= 0.10, format!("approx {:.2} vs exact {:.2}, gap {:.3}", mean(&b.approx), mean(&b.qpd), gap))
}

fn scaling_direction() -> Outcome {
    let base = scenario("nsfnet_scaling.toml");
    let mut ok = true;
    let mut parts = Vec::new();
    for n in ["4", "8", "12"] {
        let sc = base.with_axis(SweepAxis::NSessions, n).unwrap();
        let q = mean(&steady(&runs(&variant(&sc, Variant::Qpd))));
        let a = mean(&steady(&runs(&variant(&sc, Variant::QpdApprox))));
        let t = mean(&steady(&runs(&variant(&sc, Variant::Qtcp))));
        ok &= q > t && a > t;
        parts.push(format!("n={n}: qpd {q:.1}, approx {a:.1}, qtcp {t:.1}"));
    }
    outcome(ok, parts.join("; "))
}

fn stability_suite() -> Outcome {
    let sc = scenario("dumbbell_logprod.toml");
    let rep = stability_check(&sc, false, 1).unwrap();
    let t2 = rep.local_condition.iter().all(|&b| b);
    let pert = rep.perturbation_distance.unwrap_or(f64::INFINITY);
    let a = rep.converged == rep.starts && rep.vdot_violations == 0;
    let b = t2 && pert < sc.stability.tolerance;
    outcome(
        a && b,
        format!(
            "(a) {}/{} starts within tolerance, max V' {:.2e}; (b) local condition {t2}, perturbed distance {pert:.2e}",
            rep.converged, rep.starts, rep.max_vdot
        ),
    )
}

fn single_link(kind: UtilityKind, f_min: f64, links: usize, sessions: &[(usize, usize)]) -> ProblemInstance<f64> {
    let edges: Vec<_> = (0..links).map(|i| (i, i + 1, 80.0, 1e5)).collect();
    let topo = Topology::new(links + 1, edges).unwrap();
    let specs = sessions
        .iter()
        .enumerate()
        .map(|(id, &(a, b))| SessionSpec {
            id,
            src: NodeId(a),
            dst: NodeId(b),
            path: (a.min(b)..a.max(b)).map(LinkId).collect(),
            utility: kind,
            f_min,
            logprod_weights: None,
        })
        .collect();
    ProblemInstance::new(topo, specs).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let inst = single_link(UtilityKind::Neg, 0.5, 1, &[(0, 1)]);
    let d = inst.d[0];
    let sol = solve_centralized(&inst, &StepSizes::for_solver(&inst), DEFAULT_KKT_TOL, 20_000_000).unwrap();
    let rel_w = (sol.state.w[0] - 2.0 / 3.0).abs() / (2.0 / 3.0);
    let rel_r = (sol.state.r[0] - d / 3.0).abs() / (d / 3.0);
    let mut ok = rel_w < 1e-3 && rel_r < 1e-3;
    let fixtures = [
        single_link(UtilityKind::Neg, 0.5, 1, &[(0, 1)]),
        single_link(UtilityKind::Skr, 0.5, 1, &[(0, 1)]),
        single_link(UtilityKind::Neg, 0.5, 2, &[(0, 2)]),
        single_link(UtilityKind::Skr, 0.6, 2, &[(0, 2), (1, 2)]),
        single_link(UtilityKind::Neg, 0.6, 2, &[(0, 1), (0, 2)]),
    ];
    let mut worst = 0.0f64;
    for inst in &fixtures {
        let o = brute_force_oracle(inst).unwrap();
        let s = solve_centralized(inst, &StepSizes::for_solver(inst), DEFAULT_KKT_TOL, 20_000_000).unwrap();
        let gap = o.utility - s.utility;
        worst = worst.max(gap);
        ok &= gap < 2.0 * qnum_core::qnum::ORACLE_GRID;
    }
    outcome(ok, format!("w* rel err {rel_w:.1e}, R* rel err {rel_r:.1e}; worst oracle-solver gap {worst:.2e}"))
}

fn numerical_correctness() -> Outcome {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    let mut worst = 0.0f64;
    for r in [0.1, 1.0, 17.0, 400.0, 1e4] {
        let u = Utility::<f64>::from_kind(UtilityKind::Neg, 1, None).unwrap();
        let h = 1e-5 * r;
        let fd = (u.value(r + h, &[0.9]).unwrap() - u.value(r - h, &[0.9]).unwrap()) / (2.0 * h);
        worst = worst.max(rel(rate_derivative(r).unwrap(), fd));
    }
    for kind in [UtilityKind::Skr, UtilityKind::Neg, UtilityKind::LogProd] {
        let lo = domain_min_werner(kind);
        let u = Utility::<f64>::from_kind(kind, 1, None).unwrap();
        for i in 1..50 {
            let w = lo + (0.999 - lo) * i as f64 / 50.0;
            if w - lo < 0.02 {
                continue;
            }
            let h = 1e-6;
            let fd1 = (u.value(1.0, &[w + h]).unwrap() - u.value(1.0, &[w - h]).unwrap()) / (2.0 * h);
            let fd2 = (werner_derivative(kind, w + h).unwrap() - werner_derivative(kind, w - h).unwrap()) / (2.0 * h);
            worst = worst.max(rel(werner_derivative(kind, w).unwrap(), fd1));
            worst = worst.max(rel(werner_second_derivative(kind, w).unwrap(), fd2));
        }
    }
    let mut slater_ok = true;
    let dumbbell = build_dumbbell(80.0).unwrap();
    let nsfnet = build_nsfnet(25.0).unwrap();
    for topo in [dumbbell.clone(), nsfnet.clone()] {
        let sessions = if topo.link_count() == dumbbell.link_count() {
            dumbbell_sessions(&topo, SKR, 0.5).unwrap()
        } else {
            let sc = scenario("nsfnet_scaling.toml");
            sc.build_sessions(&topo, 1).unwrap()
        };
        let inst = ProblemInstance::<f64>::new(topo, sessions).unwrap();
        let p = slater_point(&inst).unwrap();
        slater_ok &= strict_margin(&inst, &p.r, &p.w) > 0.0;
    }
    outcome(worst < 1e-6 && slater_ok, format!("worst relative derivative error {worst:.1e}; Slater strict {slater_ok}"))
}

fn conservation_suite() -> Outcome {
    let topo = build_dumbbell(80.0).unwrap();
    let sessions = dumbbell_sessions(&topo, SKR, 0.5).unwrap();
    let lossy = |v: Variant| {
        let mut cfg = scenario("dumbbell_skr.toml").protocol_config().unwrap();
        cfg.variant = v;
        cfg.n_mem = 4;
        Engine::new(topo.clone(), sessions.clone(), cfg, vec![], 5).unwrap()
    };

    let mut e = lossy(Variant::QpdApprox);
    let mut samples = 0;
    let mut weight = Ok(());
    for k in 1..=600 {
        e.run_until(k as f64 * 0.1).unwrap();
        samples += 1;
        if let Err(m) = e.weight_balance() {
            weight = Err(m);
            break;
        }
    }
    let approx_drops = e.counters().drops;

    let mut e = lossy(Variant::Qpd);
    e.run_until(60.0).unwrap();
    e.quiesce().unwrap();
    let c = e.counters().clone();
    let mismatches = e.ledger_mismatches();

    let sc = scenario("dumbbell_skr.toml");
    let a = run_scenario(&sc, 3, Some(30.0)).unwrap().output;
    let b = run_scenario(&sc, 3, Some(30.0)).unwrap().output;
    let same = [
        (a.sessions.to_csv(), b.sessions.to_csv()),
        (a.links.to_csv(), b.links.to_csv()),
        (a.aggregate.to_csv(), b.aggregate.to_csv()),
        (a.events.to_csv(), b.events.to_csv()),
        (a.summary.to_csv(), b.summary.to_csv()),
    ]
    .iter()
    .all(|(x, y)| x == y);

    let ok = weight.is_ok()
        && approx_drops > 0
        && c.drops > 0
        && c.audit_checks > 0
        && c.audit_violations == 0
        && mismatches.is_empty()
        && same;
    outcome(
        ok,
        format!(
            "weight balance over {samples} samples ({approx_drops} drops): {}; exact audits {}/{} clean, {} ledger mismatches; replay identical {same}",
            weight.err().unwrap_or_else(|| "ok".into()),
            c.audit_checks - c.audit_violations,
            c.audit_checks,
            mismatches.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} [{tag}] {name}: {} ({:.1}s)", o.detail, t0.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    };
    let b = baseline();
    report(1, "near-optimality", &mut || near_optimality(&b));
    report(2, "baseline gap", &mut || baseline_gap(&b));
    report(3, "bi-level robustness", &mut bilevel_robustness);
    report(4, "failure recovery", &mut failure_recovery);
    report(5, "decoherence mitigation", &mut decoherence_mitigation);
    report(6, "workload direction", &mut workload_direction);
    report(7, "approximate estimation", &mut || approx_fidelity(&b));
    report(8, "scaling direction", &mut scaling_direction);
    report(9, "stability", &mut stability_suite);
    report(10, "oracle equivalence", &mut oracle_equivalence);
    report(11, "numerical correctness", &mut numerical_correctness);
    report(12, "conservation", &mut conservation_suite);
    if failed == 0 {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria fail");
        ExitCode::FAILURE
    }
}
