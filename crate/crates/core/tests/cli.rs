use std::path::Path;
use std::process::{Command, Output};

fn svp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svp")).current_dir(dir).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn solve_writes_a_policy() {
    let dir = tempfile::tempdir().unwrap();
    let args = "solve --env chain --k 5 --seed 0 --gamma 0.9 --zeta 0.05 --algo near-greedy-vi --out p.json";
    let out = svp(dir.path(), &args.split(' ').collect::<Vec<_>>());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let policy: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(policy["sets"].as_object().unwrap().len(), 5);
}

#[test]
fn grid_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let args = "grid --env cyclic-chain --k 5 --seed 0 --gammas 0.5,0.9 --zetas 0.05,0.2 --out grid.csv --format csv";
    let out = svp(dir.path(), &args.split(' ').collect::<Vec<_>>());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().any(|l| l.starts_with("0.900000,0.200000,false")));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing_seed = svp(dir.path(), &["learn", "--env", "chain", "--k", "5", "--zeta", "0.05"]);
    assert_eq!(code(&missing_seed), 1);
    assert!(String::from_utf8_lossy(&missing_seed.stderr).contains("seed"));
    assert_eq!(code(&svp(dir.path(), &["solve", "--env", "chain", "--bogus"])), 1);
    assert_eq!(code(&svp(dir.path(), &["transmogrify"])), 1);
    assert_eq!(code(&svp(dir.path(), &["--help"])), 0);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let no_fixed_point =
        svp(dir.path(), &["solve", "--env", "appendix-c", "--zeta", "0.2", "--algo", "near-greedy-vi"]);
    assert_eq!(code(&no_fixed_point), 2);
    assert!(!no_fixed_point.stderr.is_empty());
    let missing_policy =
        svp(dir.path(), &["evaluate", "--env", "chain", "--k", "5", "--seed", "0", "--policy", "nope.json"]);
    assert_eq!(code(&missing_policy), 2);
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let setup = svp(d, &["solve", "--env", "chain", "--k", "5", "--seed", "0", "--out", "p.json"]);
    assert_eq!(code(&setup), 0);
    let synth = svp(d, &["synth", "--seed", "4", "--episodes", "400", "--out", "data.jsonl"]);
    assert_eq!(code(&synth), 0, "{}", String::from_utf8_lossy(&synth.stderr));
    let commands: Vec<Vec<&str>> = vec![
        vec!["solve", "--env", "frozen-lake", "--map", "4x4", "--zeta", "0.1", "--algo", "conservative"],
        vec!["learn", "--env", "chain", "--k", "5", "--seed", "2", "--episodes", "3000"],
        vec!["learn", "--env", "chain", "--k", "5", "--seed", "2", "--episodes", "3000", "--algo", "q-based-td"],
        vec!["learn", "--seed", "2", "--algo", "offline", "--data", "data.jsonl", "--episodes", "2000"],
        vec!["oracle", "--env", "chain", "--k", "5", "--seed", "1", "--zetas", "0.05,0.2"],
        vec![
            "grid", "--env", "chain", "--k", "5", "--seed", "1", "--gammas", "0.5,0.9", "--zetas", "0.1", "--format",
            "csv",
        ],
        vec![
            "compare",
            "--env",
            "chain",
            "--k",
            "5",
            "--seed",
            "3",
            "--zetas",
            "0.05",
            "--episodes",
            "3000",
            "--format",
            "csv",
        ],
        vec!["evaluate", "--env", "chain", "--k", "5", "--seed", "0", "--policy", "p.json", "--format", "csv"],
        vec!["ope", "--data", "data.jsonl", "--seed", "5", "--episodes", "2000", "--draws", "50"],
        vec!["synth", "--seed", "9", "--episodes", "100"],
    ];
    for (i, cmd) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let name = format!("out{i}_{run}");
            let mut args = cmd.clone();
            args.extend(["--out", name.as_str()]);
            let out = svp(d, &args);
            assert_eq!(code(&out), 0, "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
            outputs.push(std::fs::read(d.join(&name)).unwrap());
        }
        assert!(!outputs[0].is_empty(), "{cmd:?}");
        assert_eq!(outputs[0], outputs[1], "{cmd:?}");
    }
}
