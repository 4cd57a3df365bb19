use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ctrlsynth::harness::{CandidateSource, SpawnConfig};
use ctrlsynth::mapopt::TaskSpec;
use ctrlsynth::runner::preprocess;
use ctrlsynth::sim2d::RobotConfig;
use ctrlsynth::verify::{run_suite, summarize, Category, Environment, Status, Suite, ALL_PASSED};
use ctrlsynth::Pixel;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(name)
}

fn env() -> &'static Environment {
    static ENV: OnceLock<(tempfile::TempDir, Environment)> = OnceLock::new();
    &ENV.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskSpec::new(Pixel::new(20, 140), Pixel::new(220, 20));
        let pre = preprocess(fixture("assets/sample_map.png"), &task, &RobotConfig::default(), dir.path()).unwrap();
        let env = Environment::load(&pre.params_path, &pre.grid_path, Suite::default_suite(), SpawnConfig::default())
            .unwrap();
        (dir, env)
    })
    .1
}

fn source(name: &str) -> String {
    std::fs::read_to_string(fixture(&format!("fixtures/controllers/{name}"))).unwrap()
}

/// The stub in one fixed mode, as a standalone program text.
fn liar_source() -> String {
    source("stub.py").replace(
        "mode = sys.argv[1] if len(sys.argv) > 1 else \"echo\"",
        "mode = \"liar\"",
    )
}

#[test]
fn lying_controller_fails_every_dynamic_check() {
    let env = env();
    let run = run_suite(&CandidateSource::generated(liar_source(), 1, 1), env);
    let r = &run.report;
    assert!(!r.passed);
    for c in &env.suite.checks {
        let got = r.get(&c.id).unwrap();
        match c.category {
            Category::StaticContract => assert_eq!(got.status, Status::Pass, "{}: {}", c.id, got.message),
            _ if c.id == "e2e.schema" || c.id == "e2e.stability" => assert_eq!(got.status, Status::Pass),
            _ => assert_eq!(got.status, Status::Fail, "{}: {}", c.id, got.message),
        }
    }
    let occ = r.get("unit.occupancy").unwrap();
    assert!(occ.message.contains('('), "names the cell: {}", occ.message);
    assert_eq!(r.failing_count, 5);
}

#[test]
fn hygiene_violation_aborts_downstream() {
    let env = env();
    let text = format!("import scipy\n{}", source("reference.py"));
    let run = run_suite(&CandidateSource::generated(text, 1, 1), env);
    let r = &run.report;
    assert_eq!(r.get("hygiene.scipy").unwrap().status, Status::Fail);
    assert_eq!(
        r.get("hygiene.scipy").unwrap().message,
        "Found forbidden scipy library dependency. Test setup aborted."
    );
    let downstream: Vec<_> = r
        .results
        .iter()
        .filter(|c| c.id.starts_with("unit.") || c.id.starts_with("e2e."))
        .collect();
    assert_eq!(downstream.len(), 7);
    assert!(downstream.iter().all(|c| c.status == Status::Error));
    assert_eq!(r.failing_count, 8);
    assert!(run.logs.is_empty());
}

#[test]
fn empty_source_fails_everywhere() {
    let run = run_suite(&CandidateSource::generated("", 1, 1), env());
    let r = &run.report;
    assert!(!r.passed);
    assert_eq!(r.get("compliance.constants").unwrap().status, Status::Fail);
    assert!(r
        .results
        .iter()
        .filter(|c| !c.id.starts_with("compliance.") && !c.id.starts_with("hygiene."))
        .all(|c| c.status != Status::Pass));
}

#[test]
fn missing_constant_is_named() {
    let text = source("reference.py").replace("SENSOR_RANGE", "SENSE_RANGE");
    let run = run_suite(&CandidateSource::generated(text, 1, 1), env());
    let c = run.report.get("compliance.constants").unwrap();
    assert_eq!(c.status, Status::Fail);
    assert!(c.message.contains("missing required constant SENSOR_RANGE"), "{}", c.message);
}

#[test]
fn reference_run_is_deterministic_and_consistent() {
    let env = env();
    let cand = CandidateSource::generated(source("reference.py"), 1, 1);
    let a = run_suite(&cand, env);
    let b = run_suite(&cand, env);
    assert!(a.report.passed, "{}", summarize(&a.report));
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(summarize(&a.report), ALL_PASSED);
    let log = a.log("e2e.success").unwrap();
    assert!(log.final_distance() < env.task.goal_tol);
    assert_eq!(log.collisions, 0);
    let m = a.report.get("e2e.success").unwrap().measurements.unwrap();
    assert_eq!(m.collisions, log.collisions);
    assert!(m.final_distance < env.task.goal_tol);

    // banning something the reference contains turns the pass into a failure
    let strict = Environment {
        suite: env.suite.with_banned_pattern("hygiene.no_follower", r"\bFollower\b", "Follower class is banned."),
        ..env.clone()
    };
    let c = run_suite(&cand, &strict);
    assert!(!c.report.passed);
    assert!(c.report.failing_count > 0);
}

#[test]
fn extra_bans_never_rescue_a_failing_report() {
    let env = env();
    let cand = CandidateSource::generated(liar_source(), 1, 1);
    let base = run_suite(&cand, env).report;
    for pat in [r"\bjson\b", r"zzz_not_present", r"\bsys\b"] {
        let strict = Environment {
            suite: env.suite.with_banned_pattern("hygiene.extra", pat, "Extra ban."),
            ..env.clone()
        };
        let r = run_suite(&cand, &strict).report;
        assert!(!r.passed);
        assert!(r.failing_count >= base.failing_count.min(1));
    }
}
