use std::path::Path;
use std::process::Command;

fn sim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_thz-sim"))
}

fn bundled(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name).display().to_string()
}

#[test]
fn run_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("two_groups.csv");
    let status = sim()
        .args(["run", "--scenario", &bundled("two_groups.toml")])
        .args(["--sweep", "power", "--values", "-10,40", "--precoder", "mrt,zf", "--beam", "los"])
        .args(["--trials", "2", "--seed", "5", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("axis_name,axis_value,precoder"));
    assert_eq!(lines.len(), 1 + 2 * 2 * 3);
    assert!(lines[1].starts_with("power_dbm,-1e1,"));
    assert!(lines[1].ends_with(",2,5"));
}

#[test]
fn misaligned_windows_warn_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("odd.toml");
    std::fs::write(
        &path,
        r#"
trials = 1
[[groups]]
id = 1
subarrays = 2
[[users]]
id = 1
distance_m = 2.0
group = 1
windows_hz = [[6.001e11, 6.2e11]]
los_aod_deg = [10.0, 20.0]
los_aoa_deg = [30.0, 40.0]
"#,
    )
    .unwrap();
    let out = sim()
        .args(["run", "--scenario"])
        .arg(&path)
        .args(["--values", "0"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning:"));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}

#[test]
fn bad_scenario_reports_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[arrays]\ntx_rows = -3\n").unwrap();
    let out = sim().args(["run", "--scenario"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("arrays.tx_rows"));
}

#[test]
fn asymptotic_and_oracle_commands() {
    let out = sim()
        .args(["asymptotic", "--scenario", &bundled("zero_angle.toml"), "--trials", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let total: f64 = text.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((total - 365_112_043_397.292_2).abs() < 1.0, "{text}");

    let out = sim().args(["oracle-cdd", "--trials", "200000"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let err: f64 = text.trim().rsplit('=').next().unwrap().parse().unwrap();
    assert!(err < 0.05, "{text}");
}
