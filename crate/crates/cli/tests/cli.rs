use std::path::Path;
use std::process::{Command, Output};

use qfi_core::harness::{ci95, read_csv, summarize};

fn qfi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfi"))
        .args(args)
        .output()
        .expect("spawn qfi")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Tiny IDX dataset: bright-row images whose label is the row band.
fn write_mnist(dir: &Path, train: usize, test: usize) {
    let write = |prefix: &str, n: usize| {
        let mut img = Vec::new();
        img.extend_from_slice(&0x803u32.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        img.extend_from_slice(&28u32.to_be_bytes());
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x801u32.to_be_bytes());
        lbl.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            let label = (i * 7) % 10;
            for r in 0..28 {
                for c in 0..28 {
                    let on = r / 3 == label && (c + i) % 5 != 0;
                    img.push(if on { 255 } else { 0 });
                }
            }
            lbl.push(label as u8);
        }
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lbl).unwrap();
    };
    write("train", train);
    write("t10k", test);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = qfi(&["count-bits", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(qfi(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(qfi(&["count-bits", "--protect", "x16"]).status.code(), Some(1));
    assert_eq!(qfi(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.qfim");
    let o = qfi(&["train", "--data-dir", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = qfi(&["count-bits", "--ckpt", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn count_bits_prints_preset_budget() {
    let o = qfi(&["count-bits", "--protect", "b32,o32"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("total: 962256"), "{text}");
    assert!(text.contains("unprotected (b32;o32 protected): 357968"));
    assert!(text.contains("0,o32,12544,32,401408"));
}

#[test]
fn train_eval_sweep_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_mnist(d, 96, 40);
    let data = d.to_str().unwrap();
    let ckpt = d.join("m.qfim");
    let ck = ckpt.to_str().unwrap();
    let o = qfi(&["train", "--data-dir", data, "--out", ck, "--epochs", "1", "--batch", "16", "--log-every", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines[0], "epoch,batch,loss,train_acc");
    assert_eq!(lines.len(), 1 + 6);

    // Fault-free eval reproduces the recorded baseline.
    let recorded = qfi_core::Checkpoint::load(&ckpt).unwrap();
    let baseline = recorded.meta("test_accuracy").unwrap().to_string();
    let o = qfi(&["eval", "--ckpt", ck, "--data-dir", data, "--faults", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains(&format!("accuracy {baseline}")), "{}", stdout(&o));

    // Too many faults for the population.
    let o = qfi(&["eval", "--ckpt", ck, "--data-dir", data, "--faults", "2000", "--site", "b32"]);
    assert_eq!(o.status.code(), Some(1));

    let csv = d.join("s.csv");
    let o = qfi(&[
        "sweep", "--ckpt", ck, "--data-dir", data, "--faults", "0,8,64", "--repeats", "3", "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&csv).unwrap();
    assert_eq!(rows.len(), 9);
    let md = d.join("r.md");
    assert!(qfi(&["report", "--in", csv.to_str().unwrap(), "--out", md.to_str().unwrap()]).status.success());
    let report = std::fs::read_to_string(&md).unwrap();
    for cell in summarize(&rows) {
        let s = ci95(&cell.accuracies).unwrap();
        assert!(report.contains(&format!("| {:.6} | {:.6} |", s.mean, s.half_width)), "{report}");
    }

    let ms = d.join("m.csv");
    let o = qfi(&[
        "module-sweep", "--ckpt", ck, "--data-dir", data, "--site", "o32", "--rates", "0,1e-4", "--repeats", "2",
        "--out", ms.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let rows = read_csv(&ms).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.experiment == "module-sweep"));
    assert_eq!(rows[2].n_faults, 60);
}
