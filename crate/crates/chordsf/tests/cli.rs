//! End-to-end checks of the command-line surface: JSON reports, exit
//! codes, artifact round-trips, determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chordsf::chord::PatternMode;
use chordsf::data::read_order_csv;
use chordsf::matrix::DenseMatrix;
use chordsf::psf::{PsfAttnModel, PsfConfig, SeqInput, Task};
use chordsf::storage::{load_chain, save_model};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chordsf"))
        .args(args)
        .output()
        .expect("binary should launch")
}

fn run_json(args: &[&str]) -> serde_json::Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout should be JSON")
}

fn write_identity_csv(path: &Path, n: usize) {
    let mut text = String::new();
    for i in 0..n {
        let row: Vec<&str> = (0..n).map(|j| if i == j { "1" } else { "0" }).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

fn write_rank1_csv(path: &Path, n: usize) {
    // outer product of two fixed vectors
    let u: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin() + 1.5).collect();
    let v: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.61).cos() - 0.4).collect();
    let mut text = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{}", u[i] * v[j])).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

#[test]
fn pattern_reports_full_density_at_log2_hops() {
    let v = run_json(&["pattern", "--n", "16", "--mode", "full-coverage"]);
    assert_eq!(v["nnz"], 80);
    assert_eq!(v["structural_density"], 1.0);
    assert_eq!(v["pattern"]["mode"], "full_coverage");
}

#[test]
fn compare_identity_sf_is_tiny_and_budget_invariant_holds() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("id16.csv");
    write_identity_csv(&input, 16);
    let v = run_json(&[
        "compare",
        "--input",
        input.to_str().unwrap(),
        "--format",
        "csv",
        "--max-iters",
        "3000",
    ]);
    let err_sf = v["fro_err_sf"].as_f64().unwrap();
    assert!(err_sf <= 1e-6, "sf error {err_sf}");
    let winner = v["winner"].as_str().unwrap();
    assert!(winner == "sf" || winner == "tie", "winner {winner}");
    assert!(v["nnz_tsvd"].as_u64().unwrap() >= v["nnz_sf"].as_u64().unwrap());
}

#[test]
fn compare_rank1_matrix_tsvd_wins_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rank1.csv");
    write_rank1_csv(&input, 64);
    let v = run_json(&[
        "compare",
        "--input",
        input.to_str().unwrap(),
        "--format",
        "csv",
        "--max-iters",
        "300",
    ]);
    assert_eq!(v["winner"], "tsvd");
    assert!(v["fro_err_tsvd"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn sf_save_roundtrips_through_chain_directory() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("id16.csv");
    write_identity_csv(&input, 16);
    let chain_dir = dir.path().join("chain");
    let v = run_json(&[
        "sf",
        "--input",
        input.to_str().unwrap(),
        "--format",
        "csv",
        "--max-iters",
        "2000",
        "--save",
        chain_dir.to_str().unwrap(),
    ]);
    let chain = load_chain(&chain_dir).unwrap();
    assert_eq!(chain.n(), 16);
    assert_eq!(chain.m() as u64, v["m"].as_u64().unwrap());
    let xhat = chordsf::matrix::chain_materialize(&chain);
    let err = chordsf::matrix::fro_err(&DenseMatrix::identity(16), &xhat).unwrap();
    let reported = v["fro_err_sf"].as_f64().unwrap();
    assert!((err - reported).abs() <= 1e-12 * (1.0 + reported));
}

#[test]
fn tsvd_budget_flag_applies_rank_rule() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("id16.csv");
    write_identity_csv(&input, 16);
    let v = run_json(&[
        "tsvd",
        "--input",
        input.to_str().unwrap(),
        "--format",
        "csv",
        "--budget",
        "256",
    ]);
    // smallest r with r(2*16+1) >= 256 is 8
    assert_eq!(v["rank_r"], 8);
    assert_eq!(v["nnz_tsvd"], 264);
}

#[test]
fn synth_is_byte_deterministic_and_row_count_matches() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        run_json(&[
            "synth", "--task", "adding", "--n", "128", "--count", "1000", "--seed", "7",
            "--out", out.to_str().unwrap(),
        ]);
    }
    let (ba, bb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(ba, bb);
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 1000);
    // every generated row respects the task invariants
    let data = chordsf::data::read_adding_csv(&a).unwrap();
    for inst in &data {
        assert_eq!(inst.pairs.len(), 128);
        assert_eq!(inst.pairs.iter().filter(|(_, b)| *b == 1).count(), 2);
        assert!(inst.target > 0.0 && inst.target < 1.0);
        assert!((chordsf::data::adding_target(&inst.pairs) - inst.target).abs() <= 1e-12);
    }
    assert!(a.with_extension("csv.manifest.json").exists() || {
        // manifest path is "<out>.manifest.json"
        dir.path().join("a.csv.manifest.json").exists()
    });
}

#[test]
fn synth_order_class_histogram_is_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ord.csv");
    run_json(&[
        "synth", "--task", "order", "--n", "128", "--count", "100000", "--seed", "7", "--out",
        out.to_str().unwrap(),
    ]);
    let data = read_order_csv(&out).unwrap();
    let mut hist = [0usize; 4];
    for inst in &data {
        hist[inst.label as usize] += 1;
    }
    for (c, &count) in hist.iter().enumerate() {
        let frac = count as f64 / data.len() as f64;
        assert!((frac - 0.25).abs() <= 0.01, "class {c}: {frac}");
    }
}

#[test]
fn eval_perfect_oracle_checkpoint_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PsfConfig {
        n: 16,
        d: 4,
        d_v: 4,
        hidden: 6,
        m_factors: Some(2),
        mode: PatternMode::FullCoverage,
        residual: false,
        seed: 3,
    };
    let model = PsfAttnModel::new(Task::TemporalOrder, &cfg).unwrap();
    // relabel a dataset with the model's own argmax so it scores perfectly
    let mut data = chordsf::data::gen_temporal_order(16, 40, 9).unwrap();
    for inst in &mut data {
        let trace = model.forward(SeqInput::Tokens(&inst.tokens)).unwrap();
        inst.label = trace
            .output
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0 as u8;
    }
    let csv = dir.path().join("oracle.csv");
    chordsf::data::write_order_csv(&csv, &data).unwrap();
    let ckpt = dir.path().join("ckpt");
    save_model(&ckpt, &model, &cfg).unwrap();
    let v = run_json(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", csv.to_str().unwrap()]);
    assert_eq!(v["accuracy"], 1.0);
}

#[test]
fn attn_row_identity_checkpoint_returns_basis_vector() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PsfConfig {
        n: 16,
        d: 4,
        d_v: 4,
        hidden: 6,
        m_factors: Some(3),
        mode: PatternMode::FullCoverage,
        residual: false,
        seed: 5,
    };
    let mut model = PsfAttnModel::new(Task::TemporalOrder, &cfg).unwrap();
    // constant [1, 0, ...] factor MLPs make every factor the identity
    let deg = model.pattern().row_degree(0);
    for mlp in &mut model.factor_mlps {
        for w in mlp.weights_mut() {
            w.scale(0.0);
        }
        let last = mlp.biases_mut().len() - 1;
        let mut bias = vec![0.0; deg];
        bias[0] = 1.0;
        mlp.biases_mut()[last] = bias;
    }
    let ckpt = dir.path().join("ckpt");
    save_model(&ckpt, &model, &cfg).unwrap();
    let csv = dir.path().join("data.csv");
    chordsf::data::write_order_csv(&csv, &chordsf::data::gen_temporal_order(16, 3, 1).unwrap())
        .unwrap();
    let out = run(&[
        "attn-row",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--row",
        "5",
    ]);
    assert!(out.status.success());
    let line = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = line.trim().split(',').collect();
    assert_eq!(fields.len(), 17);
    assert_eq!(fields[0], "5");
    for (j, f) in fields[1..].iter().enumerate() {
        let want = if j == 5 { 1.0 } else { 0.0 };
        assert_eq!(f.parse::<f64>().unwrap(), want, "column {j}");
    }
}

#[test]
fn exit_code_2_on_bad_input() {
    let out = run(&["compare", "--input", "/nonexistent/x.csv", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(2));
    // non-square matrix is also a loading failure
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("rect.csv");
    fs::write(&bad, "1,2,3\n4,5,6\n").unwrap();
    let out = run(&["sf", "--input", bad.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_code_3_on_numeric_fault() {
    let dir = tempfile::tempdir().unwrap();
    let train_csv = dir.path().join("train.csv");
    let eval_csv = dir.path().join("eval.csv");
    chordsf::data::write_order_csv(&train_csv, &chordsf::data::gen_temporal_order(8, 40, 2).unwrap())
        .unwrap();
    chordsf::data::write_order_csv(&eval_csv, &chordsf::data::gen_temporal_order(8, 10, 3).unwrap())
        .unwrap();
    let out = run(&[
        "train",
        "--task",
        "order",
        "--n",
        "8",
        "--train-data",
        train_csv.to_str().unwrap(),
        "--eval-data",
        eval_csv.to_str().unwrap(),
        "--epochs",
        "2",
        "--d",
        "4",
        "--hidden",
        "6",
        "--learning-rate",
        "1e300",
        "--checkpoint",
        dir.path().join("ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_code_4_on_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PsfConfig {
        n: 16,
        d: 4,
        d_v: 4,
        hidden: 6,
        m_factors: Some(2),
        mode: PatternMode::FullCoverage,
        residual: false,
        seed: 1,
    };
    let model = PsfAttnModel::new(Task::TemporalOrder, &cfg).unwrap();
    let ckpt = dir.path().join("ckpt");
    save_model(&ckpt, &model, &cfg).unwrap();
    // sequences of length 8 against an N=16 model
    let csv = dir.path().join("short.csv");
    chordsf::data::write_order_csv(&csv, &chordsf::data::gen_temporal_order(8, 5, 4).unwrap())
        .unwrap();
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn train_checkpoint_and_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let train_csv = dir.path().join("train.csv");
    let eval_csv = dir.path().join("eval.csv");
    chordsf::data::write_order_csv(&train_csv, &chordsf::data::gen_temporal_order(8, 60, 5).unwrap())
        .unwrap();
    chordsf::data::write_order_csv(&eval_csv, &chordsf::data::gen_temporal_order(8, 20, 6).unwrap())
        .unwrap();
    let ckpt = dir.path().join("ckpt");
    let v = run_json(&[
        "train",
        "--task",
        "order",
        "--n",
        "8",
        "--train-data",
        train_csv.to_str().unwrap(),
        "--eval-data",
        eval_csv.to_str().unwrap(),
        "--epochs",
        "2",
        "--d",
        "4",
        "--hidden",
        "6",
        "--seed",
        "9",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let trained_acc = v["final_accuracy"].as_f64().unwrap();
    let e = run_json(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", eval_csv.to_str().unwrap()]);
    assert_eq!(e["accuracy"].as_f64().unwrap(), trained_acc);
}
