#![allow(dead_code)]

use std::path::{Path, PathBuf};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// One row of `invalid/expected.tsv`.
pub struct Malformed {
    pub file: String,
    pub slot: String,
    pub exit_code: i32,
    /// `None` when the error has no meaningful line.
    pub line: Option<usize>,
}

pub fn malformed_manifest() -> Vec<Malformed> {
    let text = std::fs::read_to_string(fixtures().join("invalid/expected.tsv")).expect("manifest");
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|row| {
            let cols: Vec<&str> = row.split('\t').collect();
            let [file, slot, code, line] = cols[..] else {
                panic!("bad manifest row `{row}`")
            };
            Malformed {
                file: file.to_string(),
                slot: slot.to_string(),
                exit_code: code.parse().expect("exit code"),
                line: (line != "-").then(|| line.parse().expect("line number")),
            }
        })
        .collect()
}

/// Command-line arguments that feed `file` into the slot it corrupts, with
/// valid data everywhere else.
pub fn args_for(slot: &str, file: &Path, out: &Path) -> Vec<String> {
    let valid = fixtures().join("valid");
    let v = |name: &str| valid.join(name).display().to_string();
    let file = file.display().to_string();
    let mut args: Vec<String> = match slot {
        "features" => vec!["train".into(), "--features".into(), file, "--triplets".into(), v("triplets.txt")],
        "triplets" => vec!["train".into(), "--features".into(), v("features.tsv"), "--triplets".into(), file],
        "outfits" | "fitb" => vec![
            "baseline".into(),
            "--features".into(),
            v("features.tsv"),
            "--triplets".into(),
            v("triplets.txt"),
            format!("--{slot}"),
            file,
        ],
        "config" => vec!["train".into(), "--config".into(), file],
        "checkpoint" => vec!["eval".into(), "--config".into(), v("run.toml"), "--checkpoint".into(), file],
        other => panic!("unknown slot `{other}` in expected.tsv"),
    };
    args.extend(["--out".into(), out.display().to_string()]);
    args
}

/// Runs the binary on one malformed fixture and returns a description of
/// any mismatch with the manifest.
pub fn check_malformed(case: &Malformed, out_root: &Path) -> Result<(), String> {
    let file = fixtures().join("invalid").join(&case.file);
    let args = args_for(&case.slot, &file, &out_root.join(&case.file));
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_scenet"))
        .args(&args)
        .output()
        .map_err(|e| format!("could not run the binary: {e}"))?;
    let err = String::from_utf8_lossy(&out.stderr);
    let name = &case.file;
    if out.status.code() != Some(case.exit_code) {
        return Err(format!("{name}: exit {:?}, expected {} ({})", out.status.code(), case.exit_code, err.trim()));
    }
    if err.trim_end().lines().count() != 1 {
        return Err(format!("{name}: diagnostic is not one line: {err}"));
    }
    if !err.contains(name.as_str()) {
        return Err(format!("{name}: diagnostic does not name the file: {}", err.trim()));
    }
    if let Some(line) = case.line {
        if !err.contains(&format!("{name}:{line}:")) {
            return Err(format!("{name}: expected line {line} in `{}`", err.trim()));
        }
    }
    Ok(())
}
