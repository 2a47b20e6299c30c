use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use logconcave::mle::LogConcaveDensity;

fn lcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcd")).args(args).output().unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Deterministic scattered points: a rotated lattice jittered by a
/// quadratic residue sequence.
fn cloud(n: usize, d: usize, offset: f64) -> String {
    let mut s = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..d)
            .map(|c| {
                let t = ((i * (7 + 3 * c) + i * i * (c + 1)) % 101) as f64 / 101.0;
                format!("{}", offset + 2.0 * t - 1.0 + 0.3 * ((i as f64) * (1.3 + c as f64)).sin())
            })
            .collect();
        s += &row.join(",");
        s.push('\n');
    }
    s
}

fn parse_csv(text: &str) -> Vec<Vec<f64>> {
    text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

fn fit_triangle(dir: &Path) -> String {
    let data = write(dir, "tri.csv", "x,y\n0,0\n1,0\n0,1\n");
    let model = path(dir, "tri.json");
    let o = lcd(&["fit", "--input", &data, "--output", &model]);
    assert!(o.status.success(), "{}", stderr(&o));
    model
}

#[test]
fn fit_of_three_points_is_the_uniform_triangle() {
    let dir = tempfile::tempdir().unwrap();
    let model = fit_triangle(dir.path());
    let pts = write(dir.path(), "q.csv", "0.25,0.25\n2,2\n");
    let o = lcd(&["eval", "--model", &model, "--points", &pts]);
    assert!(o.status.success());
    let rows = parse_csv(&stdout(&o));
    assert!((rows[0][2] - 2.0).abs() < 1e-3);
    assert_eq!(rows[1][2], 0.0);
}

#[test]
fn summary_line_reports_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "c.csv", &cloud(60, 2, 0.0));
    let model = path(dir.path(), "c.json");
    let o = lcd(&["fit", "--input", &data, "--output", &model]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o);
    for key in ["n=60", "d=2", "iterations=", "sigma=", "integral=", "seconds="] {
        assert!(line.contains(key), "{line}");
    }
}

#[test]
fn malformed_row_exits_1_with_the_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "bad.csv", "x,y\n0,0\n1,0\n0,zz\n");
    let o = lcd(&["fit", "--input", &data, "--output", &path(dir.path(), "m.json")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn missing_input_exits_1() {
    let o = lcd(&["fit", "--input", "/nonexistent/x.csv", "--output", "/tmp/never.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn degenerate_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "line.csv", "0,0\n1,1\n2,2\n3,3\n");
    let o = lcd(&["fit", "--input", &data, "--output", &path(dir.path(), "m.json")]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn exhausted_budget_exits_3_and_still_writes_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "c.csv", &cloud(60, 2, 0.0));
    let model = path(dir.path(), "m.json");
    let o = lcd(&["fit", "--input", &data, "--output", &model, "--max-iter", "3"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(LogConcaveDensity::load(fs::File::open(&model).unwrap()).is_ok());
}

#[test]
fn trace_file_has_iter_objective_lines() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "c.csv", &cloud(30, 2, 0.0));
    let trace = path(dir.path(), "trace.txt");
    let o = lcd(&["fit", "--input", &data, "--output", &path(dir.path(), "m.json"), "--trace", &trace]);
    assert!(o.status.success());
    let text = fs::read_to_string(trace).unwrap();
    assert!(text.lines().count() > 1);
    for l in text.lines() {
        let (i, v) = l.split_once(',').unwrap();
        i.parse::<usize>().unwrap();
        v.parse::<f64>().unwrap();
    }
}

#[test]
fn grid_of_the_uniform_triangle() {
    let dir = tempfile::tempdir().unwrap();
    let model = fit_triangle(dir.path());
    let out = path(dir.path(), "grid.csv");
    let o = lcd(&["grid", "--model", &model, "--resolution", "21", "--bounds", "-0.5:1.5,-0.5:1.5", "--output", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = parse_csv(&fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len(), 21 * 21);
    let m = LogConcaveDensity::load(fs::File::open(&model).unwrap()).unwrap();
    for r in &rows {
        let (x, y) = (r[0], r[1]);
        assert_eq!(r[2], m.density(&[x, y]));
        if x > 0.01 && y > 0.01 && x + y < 0.99 {
            assert!((r[2] - 2.0).abs() < 1e-3);
        }
        if x < -0.01 || y < -0.01 || x + y > 1.01 {
            assert_eq!(r[2], 0.0);
        }
    }
}

#[test]
fn grid_mass_is_close_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "c.csv", &cloud(80, 2, 0.0));
    let model = path(dir.path(), "m.json");
    assert!(lcd(&["fit", "--input", &data, "--output", &model]).status.success());
    let out = path(dir.path(), "grid.csv");
    let o = lcd(&["grid", "--model", &model, "--resolution", "200", "--output", &out]);
    assert!(o.status.success());
    let rows = parse_csv(&fs::read_to_string(&out).unwrap());
    let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let span = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
    let cell = span(&xs) / 199.0 * span(&ys) / 199.0;
    let mass: f64 = rows.iter().map(|r| r[2]).sum::<f64>() * cell;
    assert!((mass - 1.0).abs() < 0.02, "{mass}");
}

#[test]
fn grid_refuses_four_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "c4.csv", &cloud(12, 4, 0.0));
    let model = path(dir.path(), "m.json");
    let o = lcd(&["fit", "--input", &data, "--output", &model]);
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", stderr(&o));
    let o = lcd(&["grid", "--model", &model]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unsupported dimension 4"));
}

#[test]
fn samples_are_deterministic_and_round_trip_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "c.csv", &cloud(40, 2, 0.0));
    let model = path(dir.path(), "m.json");
    assert!(lcd(&["fit", "--input", &data, "--output", &model]).status.success());
    let a = path(dir.path(), "a.csv");
    let b = path(dir.path(), "b.csv");
    for out in [&a, &b] {
        let o = lcd(&["sample", "--model", &model, "--count", "300", "--seed", "9", "--shards", "3", "--output", out]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let o = lcd(&["eval", "--model", &model, "--points", &a]);
    assert!(o.status.success());
    let rows = parse_csv(&stdout(&o));
    assert_eq!(rows.len(), 300);
    assert!(rows.iter().all(|r| r[2] > 0.0));
    // refitting the drawn sample is accepted too
    let o = lcd(&["fit", "--input", &a, "--output", &path(dir.path(), "re.json")]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn seeds_are_mandatory_for_stochastic_commands() {
    let cases: [&[&str]; 6] = [
        &["sample", "--model", "m.json", "--count", "1"],
        &["entropy", "--model", "m.json"],
        &["hdr", "--model", "m.json"],
        &["boot", "--model", "m.json"],
        &["em", "--input", "x.csv"],
        &["simulate", "--scenario", "mix1", "--n", "10"],
    ];
    for args in cases {
        let o = lcd(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("--seed"), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn functional_records_are_name_value_se() {
    let dir = tempfile::tempdir().unwrap();
    let model = fit_triangle(dir.path());
    let o = lcd(&["entropy", "--model", &model, "--seed", "1", "--draws", "1000"]);
    let line = stdout(&o);
    let fields: Vec<&str> = line.trim().split(',').collect();
    assert_eq!(fields[0], "entropy");
    assert!((fields[1].parse::<f64>().unwrap() - 0.5f64.ln()).abs() < 1e-3);
    assert!(fields[2].parse::<f64>().unwrap() < 1e-3);
    let o = lcd(&["hdr", "--model", &model, "--seed", "1", "--alpha", "0.25,0.5"]);
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("f_alpha[0.25],"));
    assert!(lines[1].starts_with("coverage[0.25],"));
}

#[test]
fn bootstrap_of_a_mean() {
    let dir = tempfile::tempdir().unwrap();
    let model = fit_triangle(dir.path());
    let o = lcd(&["boot", "--model", &model, "--statistic", "mean:0", "--replicates", "60", "--m", "50", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = stdout(&o).lines().next().unwrap().to_string();
    assert!(first.starts_with("mean[0],"));
    let o = lcd(&["boot", "--model", &model, "--statistic", "median", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn em_separates_planted_clusters_and_scores_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("x,y,label\n");
    for (label, offset) in [("a", 0.0), ("b", 12.0)] {
        for line in cloud(40, 2, offset).lines() {
            text += &format!("{line},{label}\n");
        }
    }
    let data = write(dir.path(), "two.csv", &text);
    let out = path(dir.path(), "labels.csv");
    let o = lcd(&["em", "--input", &data, "--seed", "3", "--restarts", "2", "--output", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("misclassified=0"), "{}", stderr(&o));
    let rows = parse_csv(&fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len(), 80);
    assert!(rows.iter().all(|r| r[1] == 1.0 || r[1] == 2.0));
    let o = lcd(&["em", "--input", &data, "--seed", "3", "--gaussian"]);
    assert!(stderr(&o).contains("misclassified=0"), "{}", stderr(&o));
}

#[test]
fn simulate_emits_per_replication_and_aggregate_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "sim.csv");
    let o = lcd(&[
        "simulate", "--scenario", "gamma21_indep", "--n", "60", "--replications", "2", "--seed", "4", "--bandwidth", "0.5",
        "--ise-draws", "500", "--entropy-draws", "500", "--output", &out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 2 + 2);
    assert!(lines[3].contains(",mean,"));
    assert!(lines[4].contains(",se,"));
    let o = lcd(&["simulate", "--scenario", "mix2", "--d", "3", "--n", "20000", "--seed", "1", "--budget-secs", "60"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("budget"));
    let o = lcd(&["simulate", "--scenario", "nope", "--n", "50", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_shows_defaults() {
    let o = lcd(&["simulate", "--help"]);
    let help = stdout(&o);
    for flag in ["--replications", "--alpha", "--budget-secs", "--delta", "--eta"] {
        assert!(help.contains(flag), "{flag}");
    }
    assert!(help.contains("[default: 20]"));
    assert!(help.contains("[default: 0.5]"));
}
