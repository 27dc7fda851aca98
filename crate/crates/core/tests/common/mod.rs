#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use foldquant::report::sha256_hex;

pub fn foldquant(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foldquant"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn foldquant")
}

pub fn ok(args: &[&str], cwd: &Path) -> String {
    let out = foldquant(args, cwd);
    assert!(
        out.status.success(),
        "foldquant {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

/// Files and stdout produced by the small end-to-end pipeline.
pub struct Pipeline {
    pub model: Vec<u8>,
    pub stats: Vec<u8>,
    pub transformed: Vec<u8>,
    pub eval_csv: String,
    pub eval_json: String,
}

impl Pipeline {
    pub fn digests(&self) -> String {
        format!(
            "model {}\nstats {}\ntransformed {}\n",
            sha256_hex(&self.model),
            sha256_hex(&self.stats),
            sha256_hex(&self.transformed)
        )
    }
}

/// gen-model → calibrate → transform → eval on a 16-wide block.
pub fn run_pipeline(dir: &Path) -> Pipeline {
    ok(
        &[
            "gen-model",
            "--seed",
            "7",
            "--hidden",
            "16",
            "--heads",
            "2",
            "--ffn",
            "32",
            "--seq-len",
            "8",
            "-o",
            "m.bin",
        ],
        dir,
    );
    ok(
        &[
            "calibrate",
            "--model",
            "m.bin",
            "--seed",
            "11",
            "--rows",
            "64",
            "--out",
            "s.json",
        ],
        dir,
    );
    ok(
        &[
            "transform",
            "--model",
            "m.bin",
            "--stats",
            "s.json",
            "--out",
            "t.bin",
            "--bits",
            "8",
            "--variant",
            "folded",
        ],
        dir,
    );
    let eval = |format| {
        ok(
            &[
                "eval",
                "--model",
                "m.bin",
                "--transformed",
                "t.bin",
                "--seed",
                "13",
                "--rows",
                "32",
                "--format",
                format,
            ],
            dir,
        )
    };
    let read = |name: &str| std::fs::read(dir.join(name)).expect("pipeline output");
    Pipeline {
        model: read("m.bin"),
        stats: read("s.json"),
        transformed: read("t.bin"),
        eval_csv: eval("csv"),
        eval_json: eval("json"),
    }
}

pub fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a frozen file. `UPDATE_GOLDEN=1` rewrites it instead.
pub fn matches_golden(name: &str, actual: &str) -> Result<(), String> {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).map_err(|e| e.to_string())?;
        return Ok(());
    }
    let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if expected == actual {
        Ok(())
    } else {
        Err(format!(
            "{name} differs from golden:\n--- expected\n{expected}\n--- actual\n{actual}"
        ))
    }
}
