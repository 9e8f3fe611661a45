//! One line per acceptance criterion. Run with
//! `cargo test -p hypercomplete-core --test acceptance`.

use std::time::{Duration, Instant};

use hypercomplete::checkpoint;
use hypercomplete::commands::{cmd_complete, cmd_toy_train, CompleteArgs, REFERENCE_PARAMS};
use hypercomplete::model::{Model, ModelConfig};
use hypercomplete::runconfig::RunConfig;
use hypercomplete::selftest::{self, Check, Options};
use hypercomplete::synthetic::{make_pair, write_fixtures, Shape};

struct Outcome {
    pass: bool,
    detail: String,
}

fn summarize(checks: &[Check]) -> String {
    checks
        .iter()
        .map(|c| format!("{} {:.2e} (tol {:.0e})", c.name, c.observed, c.tolerance))
        .collect::<Vec<_>>()
        .join("; ")
}

fn scan_equivalence() -> Outcome {
    let c = selftest::scan_equivalence(Options::default(), 100, 512, 1);
    let fast = c.elapsed < Duration::from_secs(10);
    Outcome {
        pass: c.pass && fast,
        detail: format!("max error {:.2e} over {}, {:.2}s (< 10s)", c.observed, c.note, c.elapsed.as_secs_f64()),
    }
}

fn discretization() -> Outcome {
    let checks = selftest::discretization_limits();
    Outcome { pass: checks.iter().all(|c| c.pass), detail: summarize(&checks) }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let checks = selftest::gradient_suite(2);
    let t = start.elapsed();
    Outcome {
        pass: checks.iter().all(|c| c.pass) && t < Duration::from_secs(60),
        detail: format!("{}; {:.1}s (< 60s)", summarize(&checks), t.as_secs_f64()),
    }
}

fn mst() -> Outcome {
    let c = selftest::mst_oracle(200, 3);
    Outcome { pass: c.pass, detail: format!("{}: max weight difference {:e}", c.note, c.observed) }
}

fn metrics() -> Outcome {
    let c = selftest::metric_identities(4);
    Outcome { pass: c.pass, detail: format!("{}: worst deviation {:.2e}", c.note, c.observed) }
}

fn configuration_shapes() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let pair = make_pair(Shape::Sphere, 0, 2048, 64, 5).unwrap();
    write_fixtures(dir.path(), std::slice::from_ref(&pair)).unwrap();
    let input = dir.path().join("partial/sphere/0000.xyz");
    let run = |preset: &str, concat: bool| {
        let rc = RunConfig::parse(&format!("preset = {preset}")).unwrap();
        let args = CompleteArgs {
            input: input.clone(),
            output: dir.path().join(format!("{preset}-{concat}.xyz")),
            checkpoint: None,
            emit_hyperpoints: true,
            concat_input: concat,
        };
        cmd_complete(&rc, &args).unwrap()
    };
    let pcn = run("pcn", false);
    let sn = run("shapenet55", false);
    let sn_cat = run("shapenet55", true);
    let d = ModelConfig::default();
    let counts = (pcn.input_points, pcn.output_points, sn.output_points, sn_cat.output_points);
    let ok = counts == (2048, 16384, 6400, 8448)
        && pcn.hyperpoints == 256
        && (d.hyperpoints, d.anchors, d.sampled, d.encoder_depth) == (128, 16, 128, 6);
    Outcome {
        pass: ok,
        detail: format!(
            "2048 -> {} (pcn), {} and {} with input (shapenet55); M={} L={} N={} depth {}",
            counts.1, counts.2, counts.3, d.hyperpoints, d.anchors, d.sampled, d.encoder_depth
        ),
    }
}

fn toy_overfit() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let pair = make_pair(Shape::Sphere, 0, 256, 1024, 7).unwrap();
    write_fixtures(&dir.path().join("shapes"), &[pair]).unwrap();
    let rc = RunConfig {
        shapes_dir: Some(dir.path().join("shapes")),
        steps: 500,
        ..RunConfig::toy()
    };
    let out = cmd_toy_train(&rc, dir.path(), |_| {}).unwrap();
    let r = &out.report;
    let drop = 1.0 - r.final_cd_l2 / r.baseline_cd_l2;
    let jump = r
        .records
        .windows(2)
        .map(|w| w[1].loss / w[0].loss)
        .fold(0.0f64, f64::max);
    let t = out.elapsed;
    let m = &rc.model;
    Outcome {
        pass: drop >= 0.9 && jump <= 2.0 && t < Duration::from_secs(300),
        detail: format!(
            "N=M={} K={} C={}: CD-l2 {:.5} -> {:.5} ({:.1}% drop, >= 90%), worst step ratio {:.2} (<= 2), {:.0}s (< 300s)",
            m.sampled,
            m.grid_points,
            m.width,
            r.baseline_cd_l2,
            r.final_cd_l2,
            drop * 100.0,
            jump,
            t.as_secs_f64()
        ),
    }
}

fn expansion() -> Outcome {
    let c = selftest::expansion_behaviour();
    Outcome { pass: c.pass, detail: c.note }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let pair = make_pair(Shape::Torus, 1, 256, 1024, 11).unwrap();
    write_fixtures(&dir.path().join("shapes"), &[pair]).unwrap();
    let run = |name: &str| {
        let rc = RunConfig {
            shapes_dir: Some(dir.path().join("shapes")),
            steps: 30,
            ..RunConfig::toy()
        };
        let out = cmd_toy_train(&rc, &dir.path().join(name), |_| {}).unwrap();
        (std::fs::read(out.checkpoint).unwrap(), std::fs::read(out.loss_csv).unwrap())
    };
    let (a, la) = run("a");
    let (b, lb) = run("b");
    let reloaded = checkpoint::load(&dir.path().join("a/model.ckpt"), Some(&ModelConfig::toy())).is_ok();
    Outcome {
        pass: a == b && la == lb && reloaded,
        detail: format!(
            "two 30-step runs: checkpoints {} bytes, identical {}, loss curves identical {}",
            a.len(),
            a == b,
            la == lb
        ),
    }
}

fn parameter_count() -> Outcome {
    let n = Model::new(ModelConfig::default()).unwrap().num_params() as f64;
    let rel = n / REFERENCE_PARAMS - 1.0;
    Outcome {
        pass: true,
        detail: format!(
            "{:.2} M at C=384 vs 34.06 M reference ({:+.1}%, {} the +-30% note; informational)",
            n / 1e6,
            rel * 100.0,
            if rel.abs() <= 0.3 { "within" } else { "outside" }
        ),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("scan equivalence", scan_equivalence),
        ("discretization limits", discretization),
        ("gradient suite", gradients),
        ("MST oracle", mst),
        ("metric identities", metrics),
        ("configuration shapes", configuration_shapes),
        ("toy overfit", toy_overfit),
        ("expansion loss", expansion),
        ("determinism", determinism),
        ("parameter count", parameter_count),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
