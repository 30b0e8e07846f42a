//! Exit codes and outputs of the command-line front end.

use cmalign::cli::{run, EXIT_CONFIG, EXIT_GRADCHECK, EXIT_IO, EXIT_OK};

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("cmalign").chain(args.iter().copied()))
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(cli(&["frobnicate"]), EXIT_CONFIG);
}

#[test]
fn gen_without_out_is_config_error() {
    assert_eq!(cli(&["gen", "--set", "data.n_identities=2", "--set", "data.images_per_identity=1"]), EXIT_CONFIG);
}

#[test]
fn gen_without_required_keys_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(cli(&["gen", "--out", out.to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn bad_override_is_config_error() {
    assert_eq!(cli(&["gradcheck", "--set", "no.such.key=1"]), EXIT_CONFIG);
}

#[test]
fn gen_then_refuses_nonempty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let args = [
        "gen",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "data.n_identities=2",
        "--set",
        "data.images_per_identity=1",
    ];
    assert_eq!(cli(&args), EXIT_OK);
    assert!(out.read_dir().unwrap().count() > 0);
    assert_ne!(cli(&args), EXIT_OK);
    let mut again = args.to_vec();
    again.push("--overwrite");
    assert_eq!(cli(&again), EXIT_OK);
}

#[test]
fn eval_missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let d = data.to_str().unwrap();
    assert_eq!(
        cli(&["gen", "--out", d, "--set", "data.n_identities=2", "--set", "data.images_per_identity=1"]),
        EXIT_OK
    );
    let root = format!("data.root={d:?}");
    let ckpt = format!("eval.checkpoint={:?}", dir.path().join("nope").to_str().unwrap());
    assert_eq!(cli(&["eval", "--set", &root, "--set", &ckpt]), EXIT_IO);
}

#[test]
fn gradcheck_subset_passes_and_tiny_tolerance_fails() {
    assert_eq!(cli(&["gradcheck", "--set", "gradcheck.ops=\"cosine_similarity,softmax\""]), EXIT_OK);
    assert_eq!(
        cli(&["gradcheck", "--set", "gradcheck.ops=\"align\"", "--set", "gradcheck.tol=1e-30"]),
        EXIT_GRADCHECK
    );
}
