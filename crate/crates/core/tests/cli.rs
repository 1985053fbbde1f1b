use std::path::Path;
use std::process::{Command, Output};

use cptlaw::fit::FitResult;
use cptlaw::hpopt::OptimumReport;
use cptlaw::io::{read_json, read_loss_log, write_json, write_loss_log, ScheduleDoc, SynthDoc};
use cptlaw::law::{LawParams, ReplayParams};
use cptlaw::ood::OodCoeffs;
use cptlaw::schedule::{wsd_phases, PhaseKind, PhaseSpec};

fn cptlaw(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cptlaw"));
    cmd.args(args).env_remove("CPTLAW_THREADS");
    if let Some(n) = threads {
        cmd.env("CPTLAW_THREADS", n.to_string());
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = cptlaw(args, None);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn pt_cpt_phases() -> Vec<PhaseSpec> {
    let mut phases = wsd_phases(50, 0.0, 700, 250, 1e-3, 1e-4, PhaseKind::WsdDecay);
    phases.push(PhaseSpec::linear(50, 1e-4, 6e-4));
    phases.push(PhaseSpec::cosine(450, 6e-4, 0.0));
    phases
}

fn synth_doc(truth: LawParams, noise: f64) -> SynthDoc {
    let alt = vec![
        PhaseSpec::linear(50, 0.0, 1e-3),
        PhaseSpec::cosine(950, 1e-3, 1e-4),
        PhaseSpec::constant(500, 4e-4),
    ];
    let flat = vec![PhaseSpec::linear(50, 0.0, 8e-4), PhaseSpec::constant(950, 8e-4), PhaseSpec::cosine(500, 5e-4, 0.0)];
    SynthDoc {
        truth_pt: Some(truth),
        truth_cpt: None,
        schedules: vec![
            ScheduleDoc::from_phases(pt_cpt_phases(), 1000),
            ScheduleDoc::from_phases(alt, 1000),
            ScheduleDoc::from_phases(flat, 1000),
        ],
        noise_sigma: noise,
        seed: 3,
        stride: 10,
        include_pt: true,
        r_cpt: 1.0,
        n: None,
        lambda: 0.999,
    }
}

#[test]
fn simulate_fit_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let truth = LawParams::default();
    write_json(&d.join("spec.json"), &synth_doc(truth, 0.0)).unwrap();
    ok(&["simulate", "--spec", &p(d, "spec.json"), "--out", &p(d, "runs")]);
    for k in 0..3 {
        assert!(d.join(format!("runs/run{k:03}.manifest.json")).exists());
    }

    ok(&[
        "fit",
        "--manifest",
        &p(d, "runs/run000.manifest.json"),
        "--manifest",
        &p(d, "runs/run001.manifest.json"),
        "--manifest",
        &p(d, "runs/run002.manifest.json"),
        "--starts",
        "8",
        "--analytic-gradient",
        "--out",
        &p(d, "fit.json"),
    ]);
    let result: FitResult = read_json(&d.join("fit.json")).unwrap();
    assert!(result.objective < 1e-12, "{}", result.objective);

    write_json(&d.join("sched.json"), &ScheduleDoc::from_phases(pt_cpt_phases(), 1000)).unwrap();
    ok(&[
        "predict",
        "--params",
        &p(d, "fit.json"),
        "--schedule",
        &p(d, "sched.json"),
        "--track-pt",
        "--stride",
        "10",
        "--out",
        &p(d, "pred.csv"),
        "--svg",
        &p(d, "pred.svg"),
    ]);
    let pred = read_loss_log(&d.join("pred.csv")).unwrap();
    let observed = read_loss_log(&d.join("runs/run000.csv")).unwrap();
    assert_eq!(pred.steps, observed.steps);
    let (a, b) = (pred.column("loss_pt").unwrap(), observed.column("loss_pt").unwrap());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
    assert!(std::fs::read_to_string(d.join("pred.svg")).unwrap().contains("<svg"));
}

#[test]
fn areas_of_a_constant_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_json(
        &d.join("s.json"),
        &ScheduleDoc::from_phases(vec![PhaseSpec::constant(200, 3e-4)], 0),
    )
    .unwrap();
    ok(&["areas", "--schedule", &p(d, "s.json"), "--out", &p(d, "areas.csv")]);
    // zeros are legal here, so read it as plain CSV rather than a loss log
    let mut reader = csv::Reader::from_path(d.join("areas.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (s1, s2) = (col("s1"), col("s2"));
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 200);
    assert!(rows.iter().all(|r| r[s2].parse::<f64>().unwrap() == 0.0));
    let last: f64 = rows[199][s1].parse().unwrap();
    assert!((last - 0.06).abs() < 1e-15);
}

#[test]
fn scratch_replay_optimum_follows_lambda1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let k: f64 = 2.2;
    let common = LawParams {
        replay: Some(ReplayParams { a1: 0.0, a2: -k }),
        ..LawParams::default()
    };
    write_json(&d.join("pt.json"), &LawParams { b: -0.1, ..common }).unwrap();
    write_json(
        &d.join("cpt.json"),
        &LawParams {
            b: 0.1 * k.exp(),
            ..common
        },
    )
    .unwrap();
    ok(&[
        "optimize",
        "--knob",
        "replay-ratio",
        "--lambda1",
        "0.4",
        "--params-pt",
        &p(d, "pt.json"),
        "--params-cpt",
        &p(d, "cpt.json"),
        "--from-scratch",
        "--out",
        &p(d, "opt.json"),
        "--curve",
        &p(d, "curve.csv"),
    ]);
    let report: OptimumReport = read_json(&d.join("opt.json")).unwrap();
    assert!((report.knob_value - 0.4).abs() < 0.05, "{}", report.knob_value);
    assert_eq!(report.curve.len(), 256);
    assert!(std::fs::read_to_string(d.join("curve.csv")).unwrap().lines().count() > 256);
}

#[test]
fn ood_and_eval_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let steps: Vec<usize> = (1..=100).collect();
    let pt: Vec<f64> = steps.iter().map(|&t| 3.0 + 0.002 * t as f64).collect();
    let cpt: Vec<f64> = steps.iter().map(|&t| 2.5 + 0.5 * (-(t as f64) / 30.0).exp()).collect();
    let ood: Vec<f64> = pt.iter().zip(&cpt).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
    let file = std::fs::File::create(d.join("log.csv")).unwrap();
    write_loss_log(file, &steps, &[("pt", &pt), ("cpt", &cpt), ("ood", &ood)]).unwrap();
    ok(&[
        "ood", "--log", &p(d, "log.csv"), "--pt-col", "pt", "--cpt-col", "cpt", "--ood-col", "ood",
        "--out", &p(d, "ood.json"),
    ]);
    let c: OodCoeffs = read_json(&d.join("ood.json")).unwrap();
    assert!((c.lambda1p - 0.3).abs() < 1e-9 && (c.lambda2p - 0.7).abs() < 1e-9);

    write_json(&d.join("law.json"), &LawParams::default()).unwrap();
    let out = cptlaw(
        &["eval", "--params", &p(d, "law.json"), "--at", "s1pt=6,s2pt=0.4,s1cpt=0,s2cpt=0"],
        None,
    );
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let want = 3.067 + 0.48 * 6f64.powf(-0.51) - 0.28 * 0.4;
    assert!((v["total"].as_f64().unwrap() - want).abs() < 1e-12);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_json(&d.join("law.json"), &LawParams::default()).unwrap();

    let usage = cptlaw(&["fit", "--no-such-flag"], None);
    assert_eq!(usage.status.code(), Some(1));
    assert_eq!(cptlaw(&[], None).status.code(), Some(1));

    let missing = cptlaw(
        &["predict", "--params", &p(d, "nope.json"), "--schedule", &p(d, "nope.json"), "--out", &p(d, "x.csv")],
        None,
    );
    assert_eq!(missing.status.code(), Some(2));

    std::fs::write(d.join("bad.csv"), "step,loss\n1,3.0\n1,2.9\n").unwrap();
    let bad = cptlaw(
        &["ood", "--log", &p(d, "bad.csv"), "--pt-col", "loss", "--cpt-col", "loss", "--ood-col", "loss", "--out", &p(d, "o.json")],
        None,
    );
    assert_eq!(bad.status.code(), Some(2));

    let singular = cptlaw(
        &["eval", "--params", &p(d, "law.json"), "--at", "s1pt=0,s2pt=0,s1cpt=0,s2cpt=0"],
        None,
    );
    assert_eq!(singular.status.code(), Some(3));

    std::fs::write(d.join("col.csv"), "step,a,b\n1,3.0,6.0\n2,2.9,5.8\n3,2.8,5.6\n").unwrap();
    let collinear = cptlaw(
        &["ood", "--log", &p(d, "col.csv"), "--pt-col", "a", "--cpt-col", "b", "--ood-col", "a", "--out", &p(d, "o.json")],
        None,
    );
    assert_eq!(collinear.status.code(), Some(3));

    let threads = cptlaw(&["eval", "--params", &p(d, "law.json"), "--at", "s1pt=1,s2pt=0,s1cpt=0,s2cpt=0"], Some(0));
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_json(&d.join("spec.json"), &synth_doc(LawParams::default(), 0.01)).unwrap();
    ok(&["simulate", "--spec", &p(d, "spec.json"), "--out", &p(d, "runs")]);
    let mut reports = Vec::new();
    for threads in [1, 3] {
        let out = p(d, &format!("fit{threads}.json"));
        let status = cptlaw(
            &[
                "fit",
                "--manifest",
                &p(d, "runs/run000.manifest.json"),
                "--manifest",
                &p(d, "runs/run001.manifest.json"),
                "--starts",
                "6",
                "--seed",
                "9",
                "--out",
                &out,
            ],
            Some(threads),
        );
        assert!(status.status.success());
        reports.push(std::fs::read(out).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}
