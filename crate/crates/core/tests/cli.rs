use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const CONFIG: &str = r#"
env = "lander"
seed = 4

[demos]
n = 4
horizon = 10

[train]
epochs = 1

[train.net]
d_model = 8
heads = 2
layers = 1
d_ff = 16
enc_hidden = 8

[planner]
horizon = 3
samples = 8
elites = 2
iterations = 1
rollouts = 1

[evaluate]
episodes = 2
horizon = 5
"#;

fn influence(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_influence"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn pipeline_is_reproducible_and_writes_expected_outputs() {
    let dir = setup();
    let d = dir.path();
    for out in ["a", "b"] {
        for cmd in ["gen-demos", "train", "evaluate"] {
            let o = influence(d, &["--config", "exp.toml", "--out", out, cmd]);
            assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
    for file in ["demos.jsonl", "net.json", "train_log.csv", "metrics.csv"] {
        let a = std::fs::read(d.join("a").join(file)).unwrap();
        let b = std::fs::read(d.join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs between identical runs");
    }

    let mut metrics = csv::Reader::from_path(d.join("a/metrics.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = metrics.records().map(|r| r.unwrap()).collect();
    // Four strategies, two episodes, five steps.
    assert_eq!(rows.len(), 4 * 2 * 5);
    let hash = rows[0][10].to_string();
    assert_eq!(hash.len(), 64);
    let log = std::fs::read_to_string(d.join("a/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);
    assert!(log.lines().skip(1).all(|l| l.ends_with(&hash)));

    // Existing outputs are kept unless forced.
    let o = influence(d, &["--config", "exp.toml", "--out", "a", "gen-demos"]);
    assert_eq!(code(&o), 1);
    let o = influence(d, &["--config", "exp.toml", "--out", "a", "--force", "gen-demos"]);
    assert_eq!(code(&o), 0);

    let o = influence(d, &["--config", "exp.toml", "--out", "c", "--seed", "5", "gen-demos"]);
    assert_eq!(code(&o), 0);
    assert_ne!(std::fs::read(d.join("a/demos.jsonl")).unwrap(), std::fs::read(d.join("c/demos.jsonl")).unwrap());
}

#[test]
fn evaluate_honours_the_strategy_list() {
    let dir = setup();
    let o = influence(dir.path(), &["--config", "exp.toml", "--out", "o", "evaluate", "--strategies", "oracle,passive"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("oracle") && text.contains("passive") && !text.contains("random"));
    let rows = csv::Reader::from_path(dir.path().join("o/metrics.csv")).unwrap().records().count();
    assert_eq!(rows, 2 * 2 * 5);
}

#[test]
fn unknown_env_exits_with_2() {
    let dir = setup();
    let o = influence(dir.path(), &["--config", "exp.toml", "gen-demos", "--env", "mars"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mars"));
}

#[test]
fn malformed_corpus_exits_with_3() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.jsonl"), "{\"kind\": \"corpus\"\n").unwrap();
    let o = influence(dir.path(), &["--config", "exp.toml", "train", "--corpus", "bad.jsonl"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn active_without_checkpoint_exits_with_4() {
    let dir = setup();
    let o = influence(dir.path(), &["--config", "exp.toml", "--out", "empty", "evaluate", "--strategies", "active"]);
    assert_eq!(code(&o), 4);
    let o = influence(dir.path(), &["--config", "exp.toml", "evaluate", "--checkpoint", "missing.json"]);
    assert_eq!(code(&o), 4);
    let o = influence(dir.path(), &["--config", "exp.toml", "serve", "--teach", "on", "--port", "1"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn bad_config_is_rejected() {
    let dir = setup();
    std::fs::write(dir.path().join("odd.toml"), "colour = \"blue\"\n").unwrap();
    let o = influence(dir.path(), &["--config", "odd.toml", "gen-demos"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn serve_answers_health_and_reports_a_busy_port() {
    let dir = setup();
    let busy = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let o = influence(dir.path(), &["--config", "exp.toml", "serve", "--teach", "off", "--port", &port]);
    assert_eq!(code(&o), 5);
    drop(busy);

    let free = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_influence"))
        .current_dir(dir.path())
        .env("RUST_LOG", "warn")
        .args(["--config", "exp.toml", "serve", "--teach", "off", "--port", &free.to_string()])
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let body = loop {
        if let Ok(mut s) = std::net::TcpStream::connect(("127.0.0.1", free)) {
            use std::io::{Read, Write};
            s.write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
            let mut buf = String::new();
            s.read_to_string(&mut buf).unwrap();
            break buf;
        }
        assert!(Instant::now() < deadline, "server did not come up");
        std::thread::sleep(Duration::from_millis(50));
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(body.starts_with("HTTP/1.1 200"));
    assert!(body.contains(env!("CARGO_PKG_VERSION")));
}
