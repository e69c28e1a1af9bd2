use std::path::Path;
use std::process::{Command, Output};

use metaforge::iocli::untagged_numbers;
use serde_json::Value;

const FLAT: &str = "study_id,effect,se,x\na,0.12,0.1,1\nb,0.35,0.2,2\nc,0.22,0.15,3\nd,0.51,0.3,4\ne,0.05,0.12,2\nf,0.3,0.18,5\ng,0.18,0.09,1\n";
const NESTED: &str = "study_id,effect,se,x\na,0.12,0.1,1\na,0.2,0.12,2\nb,0.35,0.2,2\nb,0.3,0.15,1\nc,0.22,0.15,3\nd,0.51,0.3,4\nd,0.45,0.25,3\ne,0.05,0.12,2\nf,0.3,0.18,5\nf,0.25,0.2,4\ng,0.18,0.09,1\n";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaforge")).args(args).env("RUST_LOG", "off").output().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn every_subcommand_is_tagged_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let flat = write(dir.path(), "flat.csv", FLAT);
    let nested = write(dir.path(), "nested.csv", NESTED);
    let scenario = write(dir.path(), "sc.json", r#"{"k": 6, "mu": 0.2, "tau2": 0.02, "se_law": {"kind": "fixed", "values": [0.1, 0.2]}, "reps": 300, "master_seed": 3}"#);
    let commands: Vec<Vec<&str>> = vec![
        vec!["pool", "--input", &flat, "--ci", "hksj", "--prediction"],
        vec!["pool", "--input", &flat, "--model", "fixed"],
        vec!["hetero", "--input", &flat],
        vec!["regress", "--input", &flat, "--mods", "x", "--test", "kh"],
        vec!["bias", "--input", &flat],
        vec!["uwls", "--input", &flat, "--mods", "x"],
        vec!["rve", "--input", &nested, "--cluster-col", "study_id", "--rho-grid", "0,0.5,1"],
        vec!["mlma", "--input", &nested, "--cluster-col", "study_id"],
        vec!["simulate", "--scenario", &scenario],
        vec!["plotdata", "--input", &flat, "--kind", "forest", "--output", "json"],
    ];
    for args in commands {
        let first = run(&args);
        let doc = json(&first);
        assert_eq!(run(&args).stdout, first.stdout, "{args:?} not byte-identical");
        let bare = untagged_numbers(&doc["results"]);
        assert!(bare.is_empty(), "{args:?}: untagged numbers at {bare:?}");
        assert_eq!(doc["command"], args[0]);
        assert_eq!(doc["tool"]["name"], "metaforge");
    }
}

#[test]
fn pool_reports_the_hand_values() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "two.csv", "effect,se\n1,1\n3,0.5\n");
    let doc = json(&run(&["pool", "--input", &input, "--model", "fixed"]));
    let text = doc.to_string();
    assert!(text.contains("2.6"), "{text}");
    let digest = doc["input_sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
}

#[test]
fn tsv_output_has_three_columns() {
    let dir = tempfile::tempdir().unwrap();
    let flat = write(dir.path(), "flat.csv", FLAT);
    let out = run(&["hetero", "--input", &flat, "--output", "tsv"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("path\tvalue\tformula\n"));
    assert!(text.lines().all(|l| l.split('\t').count() == 3));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_se = write(dir.path(), "bad.csv", "effect,se\n0.1,0.1\n0.2,-1\n");
    let out = run(&["pool", "--input", &bad_se]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains('3'), "error names the file line");

    assert_eq!(run(&["pool", "--input", "/nonexistent/file.csv"]).status.code(), Some(1));
    assert_eq!(run(&["pool"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(!help.stdout.is_empty());

    let flat = write(dir.path(), "flat.csv", FLAT);
    assert_eq!(run(&["regress", "--input", &flat, "--mods", "nope"]).status.code(), Some(1));
    assert_eq!(run(&["regress", "--input", &flat, "--mods", "x", "--method", "eb"]).status.code(), Some(1));

    // collinear moderators leave the design rank deficient
    let collinear = write(dir.path(), "col.csv", "effect,se,a,b\n0.1,0.1,1,2\n0.2,0.2,2,4\n0.3,0.1,3,6\n0.25,0.2,4,8\n");
    assert_eq!(run(&["regress", "--input", &collinear, "--mods", "a,b"]).status.code(), Some(2));
}

#[test]
fn documented_flag_spellings() {
    let dir = tempfile::tempdir().unwrap();
    let flat = write(dir.path(), "flat.csv", FLAT);
    let nested = write(dir.path(), "nested.csv", NESTED);
    let long = run(&["regress", "--input", &flat, "--moderators", "x", "--variance", "ml"]);
    let short = run(&["regress", "--input", &flat, "--mods", "x", "--method", "ml"]);
    assert_eq!(json(&long)["results"], json(&short)["results"]);
    assert!(run(&["rve", "--input", &nested, "--cluster-col", "study_id", "--working", "he", "--small-sample"]).status.success());
    assert_eq!(run(&["rve", "--input", &nested, "--small-sample", "--no-small-sample"]).status.code(), Some(1));
    assert!(run(&["mlma", "--input", &nested, "--cluster-col", "study_id", "--method", "ml", "--moderators", "x"]).status.success());
}

#[test]
fn bias_test_subset_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let flat = write(dir.path(), "flat.csv", FLAT);
    let doc = json(&run(&["bias", "--input", &flat, "--tests", "fat,waap"]));
    let keys: Vec<&String> = doc["results"].as_object().unwrap().keys().collect();
    assert_eq!(keys, vec!["alpha", "fat", "waap"]);
    assert_eq!(run(&["bias", "--input", &flat, "--tests", "mst"]).status.code(), Some(1));

    let with_df = write(dir.path(), "df.csv", "effect,se,df\n0.1,0.1,100\n0.3,0.2,25\n0.2,0.15,44\n0.5,0.3,11\n0.05,0.12,69\n");
    let doc = json(&run(&["bias", "--input", &with_df, "--tests", "mst"]));
    assert!(doc["results"]["mst"]["slope"].is_object());

    let out = run(&["bias", "--input", &flat, "--plot", "galbraith"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("precision\tstandardized_effect\n"));
    assert_eq!(text.lines().count(), 8);
}
