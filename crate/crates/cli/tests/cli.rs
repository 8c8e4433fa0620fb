use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_mechemu");

fn rain_csv(steps: usize) -> String {
    let burst = |t: f64, peak: f64, c: f64, h: f64| peak * (1.0 - ((t - c) / h).abs()).max(0.0);
    let mut s = String::from("time_s,value\n");
    for i in 0..steps {
        let t = i as f64 * 2.0;
        s.push_str(&format!(
            "{},{}\n",
            i * 120,
            burst(t, 24.0, 50.0, 35.0) + burst(t, 14.0, 120.0, 40.0)
        ));
    }
    s
}

fn base_config() -> Value {
    json!({
        "rain": "rain.csv",
        "observations": { "theta": [0.8, 1.2], "sigma_e": 0.01, "sigma_b": 0.02 },
        "parameters": [
            { "name": "impervious_area", "lower": 0.5, "upper": 1.1 },
            { "name": "width", "lower": 0.5, "upper": 1.5 }
        ],
        "budget": 32,
        "sampler": { "walkers": 16, "steps": 300 },
        "refinement": { "subsample": 60 },
        "seed": 3,
        "simulator": { "kind": "toy" }
    })
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("rain.csv"), rain_csv(80)).unwrap();
        std::fs::write(
            dir.path().join("config.json"),
            serde_json::to_string_pretty(config).unwrap(),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .arg("--config")
            .arg(self.path("config.json"))
            .arg("--out")
            .arg(self.path("run"))
            .output()
            .unwrap()
    }
}

fn run_bare(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        stdout(o),
        stderr(o)
    );
}

fn compare_json(a: &Path, b: &Path) -> Value {
    let o = run_bare(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_ok(&o);
    serde_json::from_str(stdout(&o).trim()).unwrap()
}

#[test]
fn missing_rain_file_is_a_config_error_naming_the_path() {
    let mut config = base_config();
    config["rain"] = json!("nowhere/rain.csv");
    let ws = Workspace::new(&config);
    let o = ws.run(&["design"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/rain.csv"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let mut config = base_config();
    config["budgett"] = json!(64);
    let ws = Workspace::new(&config);
    let o = ws.run(&["design"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("budgett"), "{}", stderr(&o));
}

#[test]
fn budget_not_divisible_by_eight_is_rejected() {
    let mut config = base_config();
    config["budget"] = json!(100);
    let o = Workspace::new(&config).run(&["design"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn design_defaults_to_half_the_budget_and_is_reproducible() {
    let mut config = base_config();
    config["budget"] = json!(128);
    let ws = Workspace::new(&config);
    assert_ok(&ws.run(&["design"]));
    let design = std::fs::read(ws.path("run/design/design.csv")).unwrap();
    // header plus 64 rows
    assert_eq!(design.iter().filter(|&&b| b == b'\n').count(), 65);
    assert!(ws.path("run/design/meta.json").exists());
    assert_ok(&ws.run(&["design"]));
    assert_eq!(std::fs::read(ws.path("run/design/design.csv")).unwrap(), design);
}

#[test]
fn locked_run_directory_is_refused() {
    let ws = Workspace::new(&base_config());
    std::fs::create_dir_all(ws.path("run")).unwrap();
    std::fs::write(ws.path("run/.mechemu.lock"), "1").unwrap();
    let o = ws.run(&["design"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}

#[test]
fn emulator_inference_needs_a_design() {
    let o = Workspace::new(&base_config()).run(&["infer", "--mode", "emulator"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("design"), "{}", stderr(&o));
}

#[test]
fn refine_prints_schedule_and_writes_diagnostics() {
    let mut config = base_config();
    config["budget"] = json!(128);
    let ws = Workspace::new(&config);
    let o = ws.run(&["refine"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("schedule: 64 80 96 112 128"), "{}", stdout(&o));
    let diag = std::fs::read_to_string(ws.path("run/diagnostics.csv")).unwrap();
    let rows: Vec<&str> = diag.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let with_distance = rows.iter().filter(|r| !r.split(',').nth(2).unwrap().is_empty()).count();
    assert_eq!(with_distance, 4);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(ws.path("run/summary.json")).unwrap()).unwrap();
    assert!(summary["converged"].is_boolean());
    assert_eq!(summary["simulator_calls"], json!(128));
    for k in 0..5 {
        assert!(ws.path(&format!("run/posterior_iter{k}.csv")).exists());
    }
}

#[test]
fn emulator_and_direct_posteriors_agree_on_two_parameters() {
    let mut config = base_config();
    config["sampler"] = json!({ "walkers": 32, "steps": 2000 });
    let ws = Workspace::new(&config);
    assert_ok(&ws.run(&["design"]));
    assert_ok(&ws.run(&["infer", "--mode", "emulator"]));
    assert_ok(&ws.run(&["infer", "--mode", "direct"]));
    let (a, b) = (
        ws.path("run/posterior_emulator.csv"),
        ws.path("run/posterior_direct.csv"),
    );
    let head = |p: &Path| std::fs::read_to_string(p).unwrap().lines().next().unwrap().to_string();
    assert_eq!(head(&a), head(&b));
    let d = compare_json(&a, &b)["d_cm"].as_f64().unwrap();
    assert!(d <= 0.3, "d_cm {d}");

    // the well-specified synthetic run covers the observations
    let o = run_bare(&["report", ws.path("run").to_str().unwrap()]);
    assert_ok(&o);
    let report = std::fs::read_to_string(ws.path("run/report.md")).unwrap();
    assert!(report.contains("| impervious_area |"));
    let band = std::fs::read_to_string(ws.path("run/band_emulator.csv")).unwrap();
    let (mut inside, mut total) = (0, 0);
    for line in band.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        total += 1;
        inside += usize::from(v[1] <= v[4] && v[4] <= v[3]);
    }
    assert!(inside as f64 >= 0.9 * total as f64, "{inside}/{total}");
    assert!(ws.path("run/band.svg").exists());
    assert!(ws.path("run/hist_width.svg").exists());
}

fn gaussian_sample(path: &Path, rows: usize, shift: f64, seed: u64) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut s = String::from("a,b,c,log_posterior\n");
    for _ in 0..rows {
        let x: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        s.push_str(&format!("{},{},{},0\n", x[0] + shift, x[1], x[2]));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn compare_file_with_itself_uses_disjoint_halves() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    gaussian_sample(&a, 400, 0.0, 1);
    let d = compare_json(&a, &a)["d_cm"].as_f64().unwrap();
    assert!(d.abs() <= 0.2, "{d}");
}

#[test]
fn compare_separated_samples() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    gaussian_sample(&a, 200, 0.0, 1);
    gaussian_sample(&b, 200, 10.0, 2);
    let d = compare_json(&a, &b)["d_cm"].as_f64().unwrap();
    assert!(d >= 0.95, "{d}");
}

#[test]
fn compare_unequal_sizes_logs_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    gaussian_sample(&a, 150, 0.0, 1);
    gaussian_sample(&b, 90, 0.0, 2);
    let o = run_bare(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--seed", "17"]);
    assert_ok(&o);
    assert!(stderr(&o).contains("seed 17"), "{}", stderr(&o));
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["sample_size"], json!(90));
}

#[test]
fn report_on_empty_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_bare(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no posterior"), "{}", stderr(&o));
}

fn external_config(command: &str) -> Value {
    let mut config = base_config();
    config["simulator"] = json!({ "kind": "external", "command": command, "timeout_s": 30 });
    config["aggregates"] = json!({ "width": 3600.0, "slope": 0.114, "roughness": 0.12, "imperviousness": 0.36 });
    config
}

#[test]
fn failing_simulator_exits_with_code_three() {
    let ws = Workspace::new(&external_config(
        "cat {params} > /dev/null; echo boom >&2; exit 1 # {output}",
    ));
    let o = ws.run(&["design"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("boom"), "{}", stderr(&o));
}

#[test]
fn direct_mode_with_external_simulator_warns_about_evaluations() {
    let dir = tempfile::tempdir().unwrap();
    let flow = dir.path().join("flow.csv");
    let mut s = String::from("time_s,value\n");
    for i in 0..80 {
        s.push_str(&format!("{},{}\n", i * 120, 0.1 + 0.01 * (i % 7) as f64));
    }
    std::fs::write(&flow, &s).unwrap();
    let mut config = external_config(&format!(
        "cat {{params}} > /dev/null && cp '{}' {{output}}",
        flow.display()
    ));
    config["observations"] = json!(flow);
    config["sampler"] = json!({ "walkers": 16, "steps": 3 });
    config["error_model"] = json!({ "tau": 1800.0 });
    let ws = Workspace::new(&config);
    let o = ws.run(&["infer", "--mode", "direct"]);
    assert_ok(&o);
    assert!(
        stderr(&o).contains("will run the external simulator 64 times"),
        "{}",
        stderr(&o)
    );
    assert!(ws.path("run/posterior_direct.csv").exists());
}

#[test]
fn bench_emits_fixed_header_and_scaling_trends() {
    let ws = Workspace::new(&base_config());
    let o = ws.run(&["bench", "--sizes", "64,128", "--queries", "1"]);
    assert_ok(&o);
    let table = std::fs::read_to_string(ws.path("run/bench.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "design_size,conditioning_ms,emulation_ms,fast_emulation_ms,log_likelihood_ms"
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    // joint conditioning cost grows superlinearly; the likelihood does not see the design
    assert!(rows[1][2] > 2.0 * rows[0][2], "{table}");
    let ratio = rows[1][4] / rows[0][4];
    assert!((0.25..4.0).contains(&ratio), "{table}");
}

#[test]
fn halton_design_does_not_depend_on_the_seed() {
    // the Halton design is seed-free; the synthetic observation depends on the seed
    let ws = Workspace::new(&base_config());
    let o1 = Command::new(BIN)
        .args(["design", "--seed", "1", "--config"])
        .arg(ws.path("config.json"))
        .arg("--out")
        .arg(ws.path("s1"))
        .output()
        .unwrap();
    let o2 = Command::new(BIN)
        .args(["design", "--seed", "2", "--config"])
        .arg(ws.path("config.json"))
        .arg("--out")
        .arg(ws.path("s2"))
        .output()
        .unwrap();
    assert_ok(&o1);
    assert_ok(&o2);
    assert_eq!(
        std::fs::read(ws.path("s1/design/design.csv")).unwrap(),
        std::fs::read(ws.path("s2/design/design.csv")).unwrap()
    );
}
