use std::path::PathBuf;
use std::process::{Command, Output};

fn omni(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omni"))
        .args(args)
        .env_remove("OMNI_THREADS")
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    path.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn temp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("omni-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn run_json_has_sparsity_and_is_deterministic() {
    let strip = |o: &Output| -> serde_json::Value {
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let mut v: serde_json::Value = serde_json::from_str(&stdout(o)).unwrap();
        assert!(v["wall_time_s"].as_f64().unwrap() >= 0.0);
        v.as_object_mut().unwrap().remove("wall_time_s");
        v
    };
    let a = strip(&omni(&["run", "--config", &config("minimal.json")]));
    let b = strip(&omni(&["run", "--config", &config("minimal.json")]));
    assert!(a["aggregate"]["sparsity"].is_number());
    assert_eq!(a, b);
    assert_eq!(a["seed"], 7);
}

#[test]
fn seed_override_changes_the_workload() {
    let a = omni(&["run", "--config", &config("minimal.json"), "--format", "csv"]);
    let b = omni(&[
        "run",
        "--config",
        &config("minimal.json"),
        "--format",
        "csv",
        "--seed",
        "8",
    ]);
    assert_eq!(a.status.code(), Some(0));
    assert_ne!(stdout(&a), stdout(&b));
}

#[test]
fn csv_report_file_is_byte_identical() {
    let (p1, p2) = (temp("a.csv"), temp("b.csv"));
    for p in [&p1, &p2] {
        let o = omni(&[
            "run",
            "--config",
            &config("default.json"),
            "--format",
            "csv",
            "--report",
            p.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    let a = std::fs::read(&p1).unwrap();
    assert_eq!(a, std::fs::read(&p2).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text
        .starts_with("step,phase,attn_pairs_total,attn_pairs_skipped,gemm_q_macs,gemm_o_macs,sparsity,max_rel_err\n"));
    assert_eq!(text.lines().count(), 25);
}

#[test]
fn zero_sparsity_run_matches_dense() {
    let o = omni(&["run", "--config", &config("zero_sparsity.json")]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["max_rel_err"].as_f64().unwrap() <= 1e-5);
    assert_eq!(v["aggregate"]["attn_pairs_skipped"], 0);
}

#[test]
fn verify_passes_on_defaults_and_interval_one() {
    let o = omni(&["verify", "--config", &config("default.json")]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));

    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config("default.json")).unwrap()).unwrap();
    cfg["interval_n"] = 1.into();
    let path = temp("interval1.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let o = omni(&["verify", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn corrupted_symbols_fail_verification() {
    let o = omni(&["verify", "--config", &config("default.json"), "--inject-symbol-fault"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("FAIL  codec roundtrip: decode mismatch"), "{out}");
    assert!(out.contains("(seed 42)"));
}

#[test]
fn speedup_table() {
    let o = omni(&["speedup", "--interval", "6", "--sparsity", "0,0.9"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(
        rows[0].split_whitespace().collect::<Vec<_>>(),
        ["0.000", "1.0000", "1.0000"]
    );
    assert_eq!(rows[1].split_whitespace().nth(1), Some("4.0000"));

    let o = omni(&["speedup", "--interval", "4", "--sparsity", "0.5"]);
    assert_eq!(
        stdout(&o).lines().nth(1).unwrap().split_whitespace().nth(1),
        Some("1.6000")
    );
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(
        omni(&["speedup", "--interval", "6", "--sparsity", "1.5"]).status.code(),
        Some(2)
    );
    assert_eq!(
        omni(&["speedup", "--interval", "0", "--sparsity", "0.5"]).status.code(),
        Some(2)
    );
    assert_eq!(omni(&["run"]).status.code(), Some(2));
    assert_eq!(
        omni(&["run", "--config", "/nonexistent/config.json"]).status.code(),
        Some(2)
    );

    let path = temp("unknown.json");
    std::fs::write(&path, r#"{"n_text": 8, "bogus": 1}"#).unwrap();
    let o = omni(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn thread_override_is_honoured_and_validated() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_omni"))
            .args(["run", "--config", &config("minimal.json"), "--format", "csv"])
            .env("OMNI_THREADS", threads)
            .output()
            .unwrap()
    };
    let one = run("1");
    let auto = run("0");
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(stdout(&one), stdout(&auto));
    assert_eq!(run("many").status.code(), Some(2));
}

#[test]
fn symbol_dump_has_header_and_decodes() {
    let dir = temp("dump");
    let o = omni(&[
        "run",
        "--config",
        &config("minimal.json"),
        "--dump-symbols",
        dir.to_str().unwrap(),
        "--report",
        temp("dump.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    // 6 steps at interval 3: updates at 0 and 3, two heads each
    let mut files: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 4);
    assert!(files[0].ends_with("step0000_layer0_head0.sym"));
    let bytes = std::fs::read(&files[0]).unwrap();
    let field = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    // 32 tokens in blocks of 8: 4 x 4 blocks, pool 1, format version 1
    assert_eq!([field(0), field(1), field(2), field(3)], [4, 4, 1, 1]);
    // one cache byte plus one skip byte per row
    assert_eq!(bytes.len(), 16 + 1 + 4);
    let buf = omni_core::symbols::SymbolBuffer::from_bytes(&bytes).unwrap();
    assert_eq!(buf.rows(), 4);
}
