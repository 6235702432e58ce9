use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use hetgroups::io::write_panel_file;
use hetgroups::sim::{generate_dgp, Regime, SimConfig};
use hetgroups::PanelData;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hetgroups"));
    c.env_remove("HETGROUPS_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// Two groups of 10 units with slopes 1 and 3, no noise and no fixed effects
/// beyond a per-unit intercept.
fn two_group_panel() -> (PanelData, Vec<usize>) {
    let (n, t) = (20, 30);
    let labels: Vec<usize> = (0..n).map(|i| i / 10).collect();
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (i, &g) in labels.iter().enumerate() {
        for s in 0..t {
            let xv = ((i * 7 + s * 3) as f64).sin() + 0.1 * s as f64 % 1.3;
            x.push(xv);
            y.push(i as f64 + if g == 0 { 1.0 } else { 3.0 } * xv);
        }
    }
    (PanelData::new(n, t, 1, y, x).unwrap(), labels)
}

fn write_two_group(dir: &Path) -> (PathBuf, Vec<usize>) {
    let (d, labels) = two_group_panel();
    let path = dir.join("panel.csv");
    write_panel_file(&d, &path).unwrap();
    (path, labels)
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn fit_recovers_generating_groups() {
    let dir = tempfile::tempdir().unwrap();
    let (data, truth) = write_two_group(dir.path());
    let out = dir.path().join("fit");
    let o = run(&["fit", "--data", data.to_str().unwrap(), "--method", "F-Km", "--k", "2", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let groups: Vec<usize> = read_rows(&out.join("assignment.csv")).iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(same_partition(&groups, &truth), "{groups:?}");
    for f in ["beta.csv", "centers.csv", "summary.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn auto_k_is_recorded_in_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_two_group(dir.path());
    let out = dir.path().join("fit");
    let o = run(&["fit", "--data", data.to_str().unwrap(), "--method", "F-Km", "--k", "auto", "--b-refs", "20", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.lines().any(|l| l == "k = 2"), "{summary}");
    assert!(summary.contains("k_selection = auto"), "{summary}");
    assert!(out.join("gap.csv").exists());
}

#[test]
fn missing_column_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "unit,time,y,z\n1,1,0.5,1\n1,2,0.1,2\n2,1,0.3,1\n2,2,0.2,3\n").unwrap();
    let o = run(&["fit", "--data", path.to_str().unwrap(), "--k", "1", "--out-dir", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stderr).contains("x1"));
}

#[test]
fn bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_two_group(dir.path());
    let o = run(&["fit", "--data", data.to_str().unwrap(), "--k", "zero"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = run(&["fit", "--data", data.to_str().unwrap(), "--method", "OLS", "--k", "2"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = run(&["simulate"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn cv_fit_writes_cv_table() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_two_group(dir.path());
    let out = dir.path().join("fit");
    let o = run(&["fit", "--data", data.to_str().unwrap(), "--method", "SSP", "--k", "2", "--lambda", "cv", "--folds", "3", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let rows = read_rows(&out.join("cv.csv"));
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().filter(|r| r[2] == "1").count(), 1);
    assert_eq!(rows[0].len(), 3 + 3);
    assert!(out.join("pre_snap_beta.csv").exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_two_group(dir.path());
    let cfg = dir.path().join("run.cfg");
    let cfg_out = dir.path().join("from_cfg");
    std::fs::write(&cfg, format!("data = {:?}\nmethod = \"F-Km\"\nk = 3\nout_dir = {:?}\n", data.to_str().unwrap(), cfg_out.to_str().unwrap())).unwrap();
    let o = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(std::fs::read_to_string(cfg_out.join("summary.txt")).unwrap().contains("k = 3"));

    let flag_out = dir.path().join("from_flag");
    let o = run(&["fit", "--config", cfg.to_str().unwrap(), "--k", "2", "--out-dir", flag_out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(std::fs::read_to_string(flag_out.join("summary.txt")).unwrap().contains("k = 2"));

    std::fs::write(&cfg, "unknown_key = 1\n").unwrap();
    assert_eq!(run(&["fit", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn out_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_two_group(dir.path());
    let env_out = dir.path().join("env_out");
    let o = bin()
        .args(["fit", "--data", data.to_str().unwrap(), "--method", "F-Km", "--k", "2"])
        .env("HETGROUPS_OUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(env_out.join("assignment.csv").exists());
}

fn write_dgp(dir: &Path, n: usize, t: usize, regime: Regime, seed: u64) -> PathBuf {
    let cfg = SimConfig::default();
    let (raw, _) = generate_dgp(&cfg, n, t, regime, seed).unwrap();
    let path = dir.join(format!("dgp_{seed}.csv"));
    write_panel_file(&raw, &path).unwrap();
    path
}

#[test]
fn heterogeneous_data_rejects_and_stars_follow_p_values() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dgp(dir.path(), 100, 100, Regime::Alternative, 1);
    let out = dir.path().join("test");
    let o = run(&["test", "--data", data.to_str().unwrap(), "--k", "2", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let rows = read_rows(&out.join("tests.csv"));
    let cs_s = rows.iter().find(|r| r[0] == "cross-section" && r[1] == "s").expect("cross-sectional s row");
    assert!(cs_s[4].parse::<f64>().unwrap() < 0.05, "{cs_s:?}");
    for r in rows.iter().filter(|r| r[7] == "tested") {
        let p: f64 = r[4].parse().unwrap();
        let expect = if p < 0.01 {
            "***"
        } else if p < 0.05 {
            "**"
        } else if p < 0.1 {
            "*"
        } else {
            ""
        };
        assert_eq!(r[5], expect, "{r:?}");
    }
    assert!(rows.iter().any(|r| r[0] == "group(1)") && rows.iter().any(|r| r[0] == "group(2)"));
    assert!(out.join("assignment.csv").exists());
}

#[test]
fn test_reuses_a_prior_fit_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dgp(dir.path(), 60, 40, Regime::Null, 3);
    let fit_dir = dir.path().join("fit");
    let o = run(&["fit", "--data", data.to_str().unwrap(), "--method", "F-Km", "--k", "2", "--out-dir", fit_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run(&["test", "--data", data.to_str().unwrap(), "--fit-dir", fit_dir.to_str().unwrap(), "--kind", "r", "--out-dir", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let o = run(&["test", "--data", data.to_str().unwrap(), "--method", "F-Km", "--k", "2", "--kind", "r", "--out-dir", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(std::fs::read(a.join("tests.csv")).unwrap(), std::fs::read(b.join("tests.csv")).unwrap());
    assert!(read_rows(&a.join("tests.csv")).iter().all(|r| r[1] == "r"));
}

#[test]
fn degenerate_residuals_exit_3_naming_the_group() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_two_group(dir.path());
    let o = run(&["test", "--data", data.to_str().unwrap(), "--method", "F-Km", "--k", "2", "--out-dir", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stderr).contains("group"), "{}", text(&o));
}

#[test]
fn select_k_on_separated_groups() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dgp(dir.path(), 60, 100, Regime::Null, 5);
    for method in ["gap", "silhouette", "ch", "db"] {
        let out = dir.path().join(method);
        let o = run(&["select-k", "--data", data.to_str().unwrap(), "--method", method, "--k-max", "6", "--b-refs", "20", "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o));
        let sel = std::fs::read_to_string(out.join("selected_k.txt")).unwrap();
        // Calinski-Harabasz keeps rewarding splits of 1-d Gaussian groups.
        if method != "ch" {
            assert!(sel.contains("selected_k = 2"), "{method}: {sel}");
        }
    }
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.into_iter().map(|p| (PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap())).collect()
}

#[test]
fn bundled_table3_config_and_manifest_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = run(&["--jobs", "2", "simulate", "--config", bundled("table3_small.cfg").to_str().unwrap(), "--out-dir", first.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let rows = read_rows(&first.join("table3_rand.csv"));
    // Km under the null regime; the heterogeneous rows are acceptance criterion 4.
    let km_null = rows.iter().find(|r| r[0] == "50" && r[1] == "100" && r[2] == "null" && r[3] == "Km").unwrap();
    assert!(km_null[4].parse::<f64>().unwrap() >= 0.99, "{km_null:?}");
    assert_eq!(rows.len(), 2 * 2 * 3);

    let second = dir.path().join("second");
    let o = run(&["simulate", "--config", first.join("manifest.toml").to_str().unwrap(), "--out-dir", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(dir_bytes(&first), dir_bytes(&second));
}

#[test]
fn single_rep_smoke_config_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = run(&["simulate", "--config", bundled("smoke.cfg").to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", text(&o));
    assert!(elapsed < 10.0, "took {elapsed:.1}s");
}

#[test]
fn failing_replications_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("partial.cfg");
    std::fs::write(&cfg, "n_units = 20\nn_periods = 10\nreps = 2\nestimators = [\"Km\"]\ntests = []\nselection = []\nlog_level = \"off\"\n").unwrap();
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));
    assert!(dir.path().join("o").join("table1_beta_mse.csv").exists());
}
