use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exactmesh::mesh::{read_obj, read_ply};
use exactmesh::net::{cube_ensemble, load_network, octahedron, octahedron_residual};
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exactmesh"))
        .args(args)
        .env_remove("EXACTMESH_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fixtures_match_constructors() {
    assert_eq!(load_network(fixture("octahedron.json")).unwrap(), octahedron(0.5));
    assert_eq!(load_network(fixture("cube.json")).unwrap(), cube_ensemble(0.5));
    assert_eq!(load_network(fixture("octahedron_residual.json")).unwrap(), octahedron_residual(0.5));
    assert_eq!(
        load_network(fixture("octahedron_occupancy.json")).unwrap(),
        octahedron(0.5).to_occupancy(10.0).unwrap()
    );
}

#[test]
fn mesh_writes_octahedron_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (obj, report) = (dir.path().join("oct.obj"), dir.path().join("report.json"));
    let net = fixture("octahedron.json");
    let out = run(&["mesh", "--net", arg(&net), "--out", arg(&obj), "--report", arg(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mesh = read_obj(&obj).unwrap();
    assert_eq!((mesh.vertices.len(), mesh.faces.len()), (6, 8));
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["faces_emitted"], 8);
    assert_eq!(rep["open_edges"], 0);
    assert_eq!(rep["capped"], false);
}

#[test]
fn mesh_output_is_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let net = fixture("cube.json");
    let mut bytes = Vec::new();
    for threads in ["1", "1", "4"] {
        let ply = dir.path().join(format!("cube{threads}.ply"));
        let out = run(&["mesh", "--net", arg(&net), "--out", arg(&ply), "--threads", threads, "--rng-seed", "3"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        bytes.push(std::fs::read(&ply).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(bytes[0], bytes[2]);
    let mesh = read_ply(dir.path().join("cube4.ply")).unwrap();
    assert_eq!((mesh.vertices.len(), mesh.triangles.len()), (8, 12));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let obj = dir.path().join("m.obj");
    let oct = fixture("octahedron.json");
    let occ = fixture("octahedron_occupancy.json");
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec!["mesh", "--bogus"], 1),
        (vec!["mesh", "--net", arg(&occ), "--out", arg(&obj), "--trigger", "st"], 1),
        (vec!["mesh", "--net", arg(&occ), "--out", arg(&obj), "--trigger", "sgd"], 1),
        (vec!["mesh", "--net", arg(&oct), "--out", arg(&obj), "--simplify", "1.5"], 1),
        (vec!["mesh", "--net", arg(&oct), "--out", "m.stl"], 1),
        (vec!["mesh", "--net", "/nonexistent.json", "--out", arg(&obj)], 2),
        (vec!["mesh", "--net", arg(&oct), "--out", arg(&obj), "--bbox", "2,2,2,3,3,3"], 3),
        (vec!["mesh", "--net", arg(&oct), "--out", arg(&obj), "--max-cells", "3"], 4),
        (vec!["mesh", "--net", arg(&occ), "--out", arg(&obj)], 0),
    ];
    for (args, want) in cases {
        let out = run(&args);
        assert_eq!(code(&out), want, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        if want != 0 {
            assert!(!out.stderr.is_empty(), "{args:?} failed silently");
        }
    }
}

#[test]
fn help_documents_every_flag() {
    let expected: [(&str, &[&str]); 5] = [
        ("mesh", &["--net", "--out", "--trigger", "--seeds", "--threads", "--bbox", "--simplify", "--mode", "--report", "--max-cells", "--rng-seed"]),
        ("compare", &["--net", "--shape", "--gt-mesh", "--resolutions", "--samples", "--tau", "--iou-res", "--out"]),
        ("fit", &["--shape", "--arch", "--mode", "--optimizer", "--epochs", "--steps-per-epoch", "--batch", "--lr", "--init", "--out", "--log", "--rng-seed"]),
        ("simplify", &["--in", "--out", "--ratio"]),
        ("census", &["--net", "--widths", "--n0"]),
    ];
    for (cmd, flags) in expected {
        let out = run(&[cmd, "--help"]);
        assert_eq!(code(&out), 0);
        let text = String::from_utf8(out.stdout).unwrap();
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn census_reports_region_bound() {
    let out = run(&["census", "--widths", "3", "--n0", "2"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["region_lower_bound"], "7");
    let out = run(&["census", "--net", arg(&fixture("octahedron.json"))]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["region_lower_bound"], "42");
    assert_eq!(v["state_space"], "64");
    assert_eq!(v["faces_emitted"], 8);
    assert_eq!(code(&run(&["census", "--widths", "2", "--n0", "3"])), 1);
}

#[test]
fn fit_is_deterministic_and_meshable() {
    let dir = tempfile::tempdir().unwrap();
    let mut nets = Vec::new();
    for i in 0..2 {
        let (net, log) = (dir.path().join(format!("n{i}.json")), dir.path().join(format!("l{i}.json")));
        let out = run(&[
            "fit", "--shape", "sphere:0.5", "--arch", "8x2", "--epochs", "30", "--out", arg(&net), "--log", arg(&log),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let l: Value = serde_json::from_str(&std::fs::read_to_string(&log).unwrap()).unwrap();
        assert_eq!(l["epochs"].as_array().unwrap().len(), 30);
        nets.push(std::fs::read_to_string(&net).unwrap());
    }
    assert_eq!(nets[0], nets[1]);
    let obj = dir.path().join("s.obj");
    let out = run(&["mesh", "--net", arg(&dir.path().join("n0.json")), "--out", arg(&obj)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_emits_one_row_per_method() {
    let out = run(&[
        "compare", "--net", arg(&fixture("octahedron.json")), "--shape", "l1ball:0.5", "--resolutions", "16,32",
        "--samples", "2000", "--iou-res", "32",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["method"], "am");
    assert_eq!(rows[2]["resolution"], 32);
    assert_eq!(rows[0]["iou"], 1.0);
    assert_eq!(rows[0]["tri_faces"], 8);
    for r in &rows[1..] {
        let iou = r["iou"].as_f64().unwrap();
        assert!(iou > 0.5 && iou <= 1.0);
    }
    assert_eq!(code(&run(&["compare", "--net", arg(&fixture("octahedron.json"))])), 1);
}

#[test]
fn simplify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.obj"));
    let out = run(&["mesh", "--net", arg(&fixture("octahedron_residual.json")), "--out", arg(&a)]);
    assert_eq!(code(&out), 0);
    let out = run(&["simplify", "--in", arg(&a), "--out", arg(&b), "--ratio", "0.5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_obj(&b).unwrap().faces.len(), 8);
    assert_eq!(code(&run(&["simplify", "--in", arg(&a), "--out", arg(&b), "--ratio", "0"])), 1);
    assert_eq!(code(&run(&["simplify", "--in", "/nonexistent.ply", "--out", arg(&b), "--ratio", "0.5"])), 2);
}
