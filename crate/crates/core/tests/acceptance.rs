//! Acceptance suite: every release criterion as one test with a printed
//! pass/fail line. Criteria 7-9 share one 20-seed sweep of the reference
//! study plan; criterion 9 repeats it to check byte-level determinism.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use connect_core::experiment::{run_experiment, ClusterReport, ExperimentPlan, PruneMethod};
use connect_core::verify;

fn criterion(n: usize, name: &str, passed: bool, detail: &str) {
    println!(
        "criterion {n} ({name}): {} — {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {n} ({name}) failed: {detail}");
}

struct Sweep {
    plan: ExperimentPlan,
    report: ClusterReport,
    elapsed: Duration,
}

fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let plan = ExperimentPlan::default_plan(20);
        let start = Instant::now();
        let report = run_experiment(&plan, None).expect("sweep runs");
        Sweep {
            plan,
            report,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn acceptance_c1_oracle_equivalence() {
    let start = Instant::now();
    let report = verify::suite_oracle();
    let elapsed = start.elapsed();
    let detail = format!(
        "{}; {:.1?}",
        report.cases.last().expect("summary case").detail,
        elapsed
    );
    criterion(
        1,
        "oracle equivalence",
        report.passed && elapsed < Duration::from_secs(60),
        &detail,
    );
}

#[test]
fn acceptance_c2_gradient_correctness() {
    let start = Instant::now();
    let report = verify::suite_gradients();
    let elapsed = start.elapsed();
    let worst = report
        .cases
        .iter()
        .map(|c| c.detail.clone())
        .max()
        .unwrap_or_default();
    criterion(
        2,
        "gradient correctness",
        report.passed && elapsed < Duration::from_secs(60),
        &format!(
            "{} cases, worst: {worst}; {elapsed:.1?}",
            report.cases.len()
        ),
    );
}

#[test]
fn acceptance_c3_saliency_identity() {
    let report = verify::suite_conservation();
    let identity = report
        .cases
        .iter()
        .find(|c| c.name.contains("saliency-identity"))
        .expect("identity case");
    let sums = report
        .cases
        .iter()
        .find(|c| c.name.contains("saliency-layer-sums"))
        .expect("layer-sum case");
    criterion(
        3,
        "saliency identity and layer sums",
        identity.passed && sums.passed,
        &format!("{}; {}", identity.detail, sums.detail),
    );
}

#[test]
fn acceptance_c4_channel_conservation() {
    let report = verify::suite_conservation();
    let case = report
        .cases
        .iter()
        .find(|c| c.name.contains("channel-sums"))
        .expect("channel case");
    criterion(4, "channel conservation", case.passed, &case.detail);
}

#[test]
fn acceptance_c5_support_bound() {
    let report = verify::suite_theorem_convergence();
    let case = report
        .cases
        .iter()
        .find(|c| c.name.contains("support-bound"))
        .expect("support case");
    criterion(5, "maximizer support bound", case.passed, &case.detail);
}

#[test]
fn acceptance_c6_descent_convergence() {
    let start = Instant::now();
    let report = verify::suite_theorem_convergence();
    let elapsed = start.elapsed();
    let case = report
        .cases
        .iter()
        .find(|c| c.name.contains("descent-convergence"))
        .expect("descent case");
    criterion(
        6,
        "descent convergence",
        case.passed && elapsed < Duration::from_secs(120),
        &format!("{}; {elapsed:.1?}", case.detail),
    );
}

#[test]
fn acceptance_c7_study_ordering() {
    let sweep = sweep();
    let report = &sweep.report;
    for group in &report.groups {
        assert_eq!(
            group.counts.total() + group.failures(),
            sweep.plan.seeds.len(),
            "cluster counts must cover every seed"
        );
    }
    let mut details = Vec::new();
    let mut passed = sweep.elapsed < Duration::from_secs(900);
    for method in [PruneMethod::Magnitude, PruneMethod::Synflow] {
        let connect = report.group("connect", method).expect("connect group");
        let none = report.group("none", method).expect("none group");
        let ordering = connect.counts.full > none.counts.full;
        let no_collapse = connect.counts.collapse == 0;
        passed &= ordering && no_collapse;
        details.push(format!(
            "{}: connect full {} vs none full {} (connect collapse {})",
            method.name(),
            connect.counts.full,
            none.counts.full,
            connect.counts.collapse
        ));
    }
    let none_bad: usize = [PruneMethod::Magnitude, PruneMethod::Synflow]
        .iter()
        .map(|&m| {
            let g = report.group("none", m).expect("none group");
            g.counts.collapse + g.counts.low
        })
        .sum();
    passed &= none_bad >= 1;
    details.push(format!(
        "none collapse+low {} across methods; sweep {:.0?}",
        none_bad, sweep.elapsed
    ));
    criterion(7, "study ordering", passed, &details.join("; "));
}

#[test]
fn acceptance_c8_log_barrier_health() {
    let sweep = sweep();
    let group = sweep
        .report
        .group("connect", PruneMethod::Magnitude)
        .expect("connect group");
    let mut worst = f64::INFINITY;
    let mut passed = true;
    for run in &group.runs {
        match run.min_train_phi {
            Some(phi) => {
                worst = worst.min(phi);
                passed &= phi > 1e-6;
            }
            None => passed = false,
        }
    }
    criterion(
        8,
        "log-barrier collapse prevention",
        passed,
        &format!(
            "min per-epoch connectivity across {} runs: {worst:.3e}",
            group.runs.len()
        ),
    );
}

#[test]
fn acceptance_c9_sweep_determinism() {
    let sweep = sweep();
    let again = run_experiment(&sweep.plan, None).expect("second sweep runs");
    let a = sweep.report.to_json();
    let b = again.to_json();
    criterion(
        9,
        "sweep determinism",
        a == b,
        &format!("report bytes {} vs {}", a.len(), b.len()),
    );
}
