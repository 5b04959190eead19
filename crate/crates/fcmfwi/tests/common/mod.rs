#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// 10 x 5 mm plate with a hole, 20 x 10 spans at p = 2, two sources and a
/// small elliptic defect. Runs in well under a second.
pub const TINY: &str = r#"
[domain]
width_mm = 10.0
height_mm = 5.0
rho0_kg_per_m3 = 1.0
c0_m_per_s = 1000.0
holes = [{ kind = "circle", x_mm = 3.0, y_mm = 2.0, r_mm = 0.6 }]
defects = [{ kind = "ellipse", x_mm = 7.0, y_mm = 2.0, a_mm = 0.8, b_mm = 0.3, angle_deg = 30.0 }]

[sources]
x_mm = [2.5, 7.5]
y_mm = 4.5
sigma_mm = 0.25
f_khz = 500.0

[discretization]
p = 2
h_mm = 0.5
mass = "consistent"
t_max_us = 8.0
n_t = 200

[inversion]
iterations_stage1 = 2
iterations_stage2 = 2

[output]
log = "warn"
"#;

pub fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let out = dir.join("out");
    let text = format!("{TINY}dir = {:?}\n{extra}", out.to_str().unwrap());
    std::fs::write(&path, text).unwrap();
    path
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcmfwi")).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
