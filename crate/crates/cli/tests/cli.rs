use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use asyndgan_core::metrics::{encode_pgm, Pgm};

const QUICK: &str = "scenario = asyndgan\niterations = 25\nbatch = 16\neval_samples = 2000\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_asyndgan"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_pgm(path: &Path, h: usize, w: usize, pixels: Vec<u16>, maxval: u16) {
    fs::write(
        path,
        encode_pgm(&Pgm {
            height: h,
            width: w,
            maxval,
            pixels,
        }),
    )
    .unwrap();
}

#[test]
fn oracle_check_passes() {
    let o = run(&["oracle-check"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.contains(" PASS ")).count(), 3, "{out}");
}

#[test]
fn comm_cost_defaults() {
    let o = run(&["comm-cost"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "fake_batch,8388608"));
    assert!(out.lines().any(|l| l == "gradient_sharing,160000000"));
}

#[test]
fn empty_report_is_header_only() {
    let o = run(&["report"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(
        run(&["train", "--config", "/definitely/missing.txt"]).status.code(),
        Some(2)
    );

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "iterations = 10\nwobble = 3\n").unwrap();
    assert_eq!(
        run(&["train", "--config", bad.to_str().unwrap()]).status.code(),
        Some(2)
    );

    let good = dir.path().join("good.txt");
    fs::write(&good, QUICK).unwrap();
    let shard = dir.path().join("shard.csv");
    fs::write(&shard, "x,y\n0,-3.1\n").unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    let o = run(&[
        "serve-discriminator",
        "--server",
        &addr,
        "--shard",
        shard.to_str().unwrap(),
        "--config",
        good.to_str().unwrap(),
        "--attempts",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn eval_metrics_binary_and_instance() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    // Ground truth: 4 pixels. Prediction: 6 pixels, 3 of them on the truth.
    let mut g = vec![0u16; 16];
    let mut s = vec![0u16; 16];
    for i in [0, 1, 2, 3] {
        g[i] = 255;
    }
    for i in [1, 2, 3, 4, 5, 6] {
        s[i] = 255;
    }
    write_pgm(&p("g.pgm"), 4, 4, g, 255);
    write_pgm(&p("s.pgm"), 4, 4, s, 255);
    let o = run(&[
        "eval-metrics",
        p("g.pgm").to_str().unwrap(),
        p("s.pgm").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "pair,Dice,Sens,Spec,HD95");
    let cells: Vec<&str> = lines[1].split(',').collect();
    let tp = 3.0;
    let (ng, ns, total) = (4.0, 6.0, 16.0);
    assert_eq!(cells[1], format!("{:.6}", 2.0 * tp / (ng + ns)));
    assert_eq!(cells[2], format!("{:.6}", tp / ng));
    assert_eq!(cells[3], format!("{:.6}", (total - ng - (ns - tp)) / (total - ng)));
    assert_eq!(lines[2].split(',').nth(1), Some(cells[1]));

    // Two objects in the truth, one prediction covering the first exactly.
    let mut gl = vec![0u16; 16];
    let mut sl = vec![0u16; 16];
    for i in [0, 1] {
        gl[i] = 1;
        sl[i] = 300;
    }
    for i in [14, 15] {
        gl[i] = 2;
    }
    write_pgm(&p("gi.pgm"), 4, 4, gl, 65535);
    write_pgm(&p("si.pgm"), 4, 4, sl, 65535);
    let o = run(&[
        "eval-metrics",
        "--mode",
        "instance",
        p("gi.pgm").to_str().unwrap(),
        p("si.pgm").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    // Dice 2·2/(4+2); AJI 2/(2+2) once the unmatched object joins the union.
    assert_eq!(row[1], format!("{:.6}", 4.0 / 6.0));
    assert_eq!(row[2], format!("{:.6}", 0.5));

    let o = run(&[
        "eval-metrics",
        p("g.pgm").to_str().unwrap(),
        p("s.pgm").to_str().unwrap(),
        p("g.pgm").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_uses_run_dir_env_and_report_matches() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("quick.txt");
    fs::write(&cfg, QUICK.replace("asyndgan", "syn_subset:1")).unwrap();
    let o = bin()
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("ADGN_RUN_DIR", root.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = root.path().join("syn_subset_1_seed0");
    assert_eq!(
        fs::read_to_string(run_dir.join("config.txt")).unwrap(),
        fs::read_to_string(&cfg).unwrap()
    );
    let js = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("js_marginal: ").map(str::to_string))
        .unwrap();

    let o = run(&["report", run_dir.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "syn_subset:1");
    assert_eq!(row[2], js);
}

#[test]
fn separate_processes_over_tcp_match_inproc() {
    let root = tempfile::tempdir().unwrap();
    let p = |n: &str| root.path().join(n);
    fs::write(p("c.txt"), QUICK).unwrap();
    let c = p("c.txt");
    let c = c.to_str().unwrap();

    assert!(
        run(&["make-shards", "--config", c, "--out", p("shards").to_str().unwrap()])
            .status
            .success()
    );
    let mut server = bin()
        .args([
            "serve-generator",
            "--bind",
            "127.0.0.1:0",
            "--nodes",
            "3",
            "--config",
            c,
            "--out",
        ])
        .arg(p("tcp"))
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(server.stdout.as_mut().unwrap())
        .read_line(&mut first)
        .unwrap();
    let addr = first.trim().strip_prefix("listening ").unwrap().to_string();
    let nodes: Vec<_> = (0..3)
        .map(|j| {
            bin()
                .args([
                    "serve-discriminator",
                    "--server",
                    &addr,
                    "--config",
                    c,
                    "--node-id",
                    &j.to_string(),
                    "--shard",
                ])
                .arg(p(&format!("shards/shard_{j}.csv")))
                .spawn()
                .unwrap()
        })
        .collect();
    for mut n in nodes {
        assert!(n.wait().unwrap().success());
    }
    assert!(server.wait().unwrap().success());

    assert!(run(&["train", "--config", c, "--out", p("inproc").to_str().unwrap()])
        .status
        .success());
    assert_eq!(
        fs::read(p("tcp/losses.csv")).unwrap(),
        fs::read(p("inproc/losses.csv")).unwrap()
    );
    assert_eq!(
        fs::read(p("tcp/generator.ckpt")).unwrap(),
        fs::read(p("inproc/generator.ckpt")).unwrap()
    );
}
