use std::fs;
use std::path::Path;
use std::process::Command;

use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_llb-lab"));
    c.env_remove(llb_lab::THREADS_ENV);
    c
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(config: &Path, out: &Path, threads: Option<usize>) -> i32 {
    let mut c = bin();
    c.arg("--config").arg(config).arg("--out").arg(out);
    if let Some(t) = threads {
        c.arg("--threads").arg(t.to_string());
    }
    c.output().unwrap().status.code().unwrap()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

const SMALL: &str = r#"
[grid]
n_interior = 31
[time]
horizon = 0.05
steps = 100
[noise]
modes = 4
[validate]
fields = 20
sizes = [15, 31]
[ensemble]
samples = 4
[clt]
samples = 4
[weak]
samples = 3
[rate]
control_modes = 1
control_steps = 2
[compactness]
modes = [2, 4]
"#;

#[test]
fn validate_run_writes_digested_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "v.toml", &format!("kind = \"validate\"\n{SMALL}"));
    let out = tmp.path().join("out");
    assert_eq!(run(&cfg, &out, Some(1)), 0);
    let m = manifest(&out);
    assert_eq!(m["kind"], "validate");
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 1);
    for o in outputs {
        let bytes = fs::read(out.join(o["file"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    let mut names: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["out", "v.toml"]);
}

#[test]
fn config_errors_exit_2_and_list_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "kind = \"clt\"\n[time]\nsteps = 0\n[noise]\nmodse = 3\n");
    let out = tmp.path().join("out");
    assert_eq!(run(&cfg, &out, None), 2);
    let err: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["category"], "config");
    assert_eq!(err["exit_code"], 2);
    let errors: Vec<&str> = err["errors"].as_array().unwrap().iter().map(|e| e.as_str().unwrap()).collect();
    assert!(errors.iter().any(|e| e.starts_with("time.steps")));
    assert!(errors.iter().any(|e| e.starts_with("noise.modse")));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn missing_config_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&tmp.path().join("nope.toml"), &tmp.path().join("out"), None), 4);
}

#[test]
fn blow_up_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "b.toml",
        "kind = \"deterministic\"\n[grid]\nn_interior = 15\n[time]\nsteps = 10\n[initial]\na = 5000.0\n",
    );
    let out = tmp.path().join("out");
    assert_eq!(run(&cfg, &out, None), 3);
    let err: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err["category"], "blow_up");
}

#[test]
fn thread_count_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let plain = write_config(tmp.path(), "p.toml", &format!("kind = \"validate\"\n{SMALL}"));
    let pinned = write_config(tmp.path(), "t.toml", &format!("kind = \"validate\"\nthreads = 3\n{SMALL}"));
    let threads_of = |cfg: &Path, flag: Option<usize>, env: Option<&str>| {
        let out = tmp.path().join("o");
        let mut c = bin();
        c.arg("--config").arg(cfg).arg("--out").arg(&out);
        if let Some(t) = flag {
            c.arg("--threads").arg(t.to_string());
        }
        if let Some(e) = env {
            c.env(llb_lab::THREADS_ENV, e);
        }
        assert!(c.output().unwrap().status.success());
        manifest(&out)["threads"].as_u64().unwrap()
    };
    assert_eq!(threads_of(&plain, None, Some("2")), 2);
    assert_eq!(threads_of(&plain, Some(1), Some("2")), 1);
    assert_eq!(threads_of(&pinned, None, Some("2")), 3);
    assert_eq!(threads_of(&pinned, Some(2), None), 2);

    let mut c = bin();
    c.arg("--config").arg(&plain).arg("--out").arg(tmp.path().join("o"));
    c.env(llb_lab::THREADS_ENV, "many");
    assert_eq!(c.output().unwrap().status.code(), Some(2));
}

#[test]
fn relative_files_resolve_against_config_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let sub = tmp.path().join("cfg");
    fs::create_dir(&sub).unwrap();
    let mut csv = String::from("step,k,j,coefficient\n");
    for n in 0..100 {
        csv.push_str(&format!("{n},2,1,0.3\n"));
    }
    fs::write(sub.join("h.csv"), csv).unwrap();
    let body = format!(
        "kind = \"compactness\"\n{}",
        SMALL.replace("modes = [2, 4]", "modes = [2, 4]\ncontrol_file = \"h.csv\"")
    );
    let cfg = write_config(&sub, "c.toml", &body);
    let out = tmp.path().join("out");
    assert_eq!(run(&cfg, &out, Some(1)), 0);
    assert!(out.join("compactness.csv").exists());
}
