#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use menglan::numcore::Rng;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_menglan")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Raw sensor log with `levels` concentration steps of `per_level` records.
/// Sensor responses are linear in both concentrations plus small noise.
pub fn write_raw(path: &Path, levels: usize, per_level: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    let mut text = String::from("Time (seconds), CO conc (ppm), Ethylene conc (ppm), sensor readings (16 channels)\n");
    let mut t = 0.0;
    for l in 0..levels {
        let a = [0.0, 100.0, 200.0, 300.0][l % 4];
        let b = 2.5 * ((l * 7) % 9) as f64;
        for _ in 0..per_level {
            let mut row = format!("{t:.2} {a} {b}");
            for c in 0..16 {
                let v = 1000.0 + 40.0 * b * (1.0 + 0.05 * c as f64) + 0.5 * a + rng.uniform_range(-3.0, 3.0);
                row.push_str(&format!(" {v:.3}"));
            }
            text.push_str(&row);
            text.push('\n');
            t += 0.01;
        }
    }
    fs::write(path, text).unwrap();
}

/// Ingests a synthetic log into `dir/data.mgd` with 20-record windows.
pub fn synthetic_archive(dir: &Path, levels: usize, per_level: usize) -> PathBuf {
    let raw = dir.join("raw.txt");
    write_raw(&raw, levels, per_level, 1);
    let archive = dir.join("data.mgd");
    run_ok(&["ingest", p(&raw), p(&archive), "--width", "20", "--stride", "10"]);
    archive
}

/// Config for the tiny model; lines in `extra` replace defaults with the same key.
pub fn tiny_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overrides: Vec<String> = extra.lines().map(key).collect();
    let mut lines: Vec<&str> = [
        "base_channels = 4",
        "base_hidden = 8",
        "heads = 2",
        "dropout = 0.0",
        "batch_size = 32",
        "max_epochs = 8",
        "patience_epochs = 4",
    ]
    .into_iter()
    .filter(|l| !overrides.contains(&key(l)))
    .collect();
    lines.extend(extra.lines());
    let path = dir.join(name);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

/// Column `name` of every data row of a CSV text.
pub fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name}"));
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

/// CSV text with the named column blanked.
pub fn mask_column(csv: &str, name: &str) -> String {
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    let i = header.split(',').position(|h| h == name).unwrap();
    let mut out = vec![header.to_string()];
    for l in lines {
        let mut f: Vec<&str> = l.split(',').collect();
        f[i] = "";
        out.push(f.join(","));
    }
    out.join("\n")
}
