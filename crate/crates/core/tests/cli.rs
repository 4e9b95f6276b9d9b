use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparse_forcing::bench::{appendix_grid, kv_length, scale_geometry};
use sparse_forcing::rollout::MemoryTrace;
use sparse_forcing::tensor::{read_tensor, Tensor};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparse-forcing"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn rollout_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "rollout",
        "--frames",
        "4",
        "--steps",
        "4",
        "--topk",
        "0.25",
        "--capacity-frames",
        "6",
        "--window-frames",
        "6",
        "--seed",
        "7",
        "--out",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    bin(&args)
}

#[test]
fn rollout_writes_chunks_and_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rollout_into(tmp.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..4 {
        match read_tensor(tmp.path().join(format!("frames/chunk_{i:04}.pbt"))).unwrap() {
            Tensor::Latent(x) => assert_eq!(x.dims(), [3, 8, 8, 16]),
            other => panic!("unexpected tensor {other:?}"),
        }
    }
    let trace = MemoryTrace::from_jsonl(&fs::read_to_string(tmp.path().join("trace.jsonl")).unwrap()).unwrap();
    assert_eq!(trace.denoise_calls(), 16);
    assert_eq!(trace.cache_updates(), 4);
}

#[test]
fn rollout_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(rollout_into(a.path(), &[]).status.success());
    assert!(rollout_into(b.path(), &[]).status.success());
    for f in ["trace.jsonl", "frames/chunk_0000.pbt", "frames/chunk_0003.pbt", "config.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_config_exits_two() {
    let o = bin(&["rollout", "--frames", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("num_frames"));

    let o = bin(&["rollout", "--block-shape", "3,5,4", "--frames", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("axis h"), "{}", stderr(&o));

    assert_eq!(bin(&["rollout", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(bin(&["bench", "--n-c", "50"]).status.code(), Some(2));
}

#[test]
fn training_rollout_records_grad_step() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rollout_into(tmp.path(), &["--train", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let s = summary["grad_step"].as_u64().unwrap() as usize;
    let trace = MemoryTrace::from_jsonl(&fs::read_to_string(tmp.path().join("trace.jsonl")).unwrap()).unwrap();
    assert_eq!(trace.denoise_calls(), 4 * (4 - s + 1));
    assert!(trace.records.iter().all(|r| r.grad_enabled == Some(r.step == s)));
}

#[test]
fn bench_full_density_and_warning() {
    let o = bin(&["bench", "--n-c", "96", "--d", "16", "--topk", "1.0", "--reps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("unstable"));
    let out = stdout(&o);
    let mut lines = out.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), row.len());
    assert_eq!(header[..8], ["topk", "n_c", "local_ratio", "persist_ratio", "n_kv", "sparse_ms", "dense_ms", "speedup"]);
    let flop_ratio: f64 = row[header.iter().position(|h| *h == "flop_ratio").unwrap()].parse().unwrap();
    assert!(flop_ratio <= 1.0);
}

#[test]
fn bench_appendix_grid_n_kv_column() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("grid.csv");
    let o = bin(&["bench", "--grid", "appendix", "--scale", "48", "--reps", "1", "--d", "16", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 24);
    for (row, g) in rows.iter().zip(appendix_grid()) {
        let n_kv: usize = row.split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(n_kv, kv_length(&scale_geometry(&g, 48)).unwrap().n_kv);
    }
}

#[test]
fn bench_json_mirrors_csv_rows() {
    let o = bin(&["bench", "--n-c", "96", "--d", "16", "--reps", "3", "--format", "json"]);
    assert!(o.status.success());
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["n_kv"], 240);
    assert!(rows[0]["sparse_attention_pct"].as_f64().is_some());
}

#[test]
fn verify_passes_and_catches_fault() {
    let o = bin(&["verify", "--seeds", "30"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("sparse_vs_reference"));

    let o = bin(&["verify", "--seeds", "30", "--fault", "drop-sink"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("sink retention"));
}

#[test]
fn recall_from_dumped_attention() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(rollout_into(tmp.path(), &["--dump-attention"]).status.success());
    let o = bin(&["recall", "--input", tmp.path().join("attention").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("topk,layer,head,recall"));
    assert_eq!(out.lines().count(), 1 + 4 + 1);
    assert!(out.contains("mean,std,"));
}

#[test]
fn recall_trend_over_topk() {
    let o = bin(&["recall", "--topk", "0.0625,0.25", "--frames", "6", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let low = rows[0]["mean"].as_f64().unwrap();
    let high = rows[1]["mean"].as_f64().unwrap();
    assert!(high >= low);
}

#[test]
fn recall_missing_input_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["recall", "--input", tmp.path().to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(bin(&["recall", "--input", "/definitely/missing"]).status.code(), Some(2));
}
