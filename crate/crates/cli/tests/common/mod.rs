#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ragplan_cli::{write_jsonl, DatasetRecord};
use ragplan_core::synthetic::Scenario;

pub fn ragplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragplan"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// The synthetic scenario laid out as files.
pub struct Files {
    pub corpus: PathBuf,
    pub index: PathBuf,
    pub rules: PathBuf,
    pub config: PathBuf,
    pub off: PathBuf,
    pub on: PathBuf,
    pub held: PathBuf,
    pub backend: String,
}

pub fn write_scenario(dir: &Path) -> (Scenario, Files) {
    let s = Scenario::build().unwrap();
    let f = Files {
        corpus: dir.join("corpus.jsonl"),
        index: dir.join("index.bin"),
        rules: dir.join("rules.jsonl"),
        config: dir.join("config.json"),
        off: dir.join("off.jsonl"),
        on: dir.join("on.jsonl"),
        held: dir.join("held.jsonl"),
        backend: format!("scripted:{}", dir.join("rules.jsonl").display()),
    };
    let corpus: Vec<serde_json::Value> = s
        .corpus
        .docs()
        .iter()
        .map(|d| serde_json::json!({"id": d.id, "text": d.text}))
        .collect();
    write_jsonl(&f.corpus, &corpus).unwrap();
    write_jsonl(&f.rules, &s.rules).unwrap();
    std::fs::write(&f.config, serde_json::to_string_pretty(&s.config).unwrap()).unwrap();
    for (path, states) in [(&f.off, &s.off_train), (&f.on, &s.on_train), (&f.held, &s.held_out)] {
        let recs: Vec<DatasetRecord> = states.iter().map(DatasetRecord::from_state).collect();
        write_jsonl(path, &recs).unwrap();
    }
    ok(ragplan(&["ingest", p(&f.corpus), "--out", p(&f.index)]));
    (s, f)
}
