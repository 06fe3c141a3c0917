use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_granaudit"))
}

fn demo_dir(tmp: &Path) {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo");
    fs::copy(src.join("scenario.toml"), tmp.join("scenario.toml")).unwrap();
    let cfg = fs::read_to_string(src.join("audit.toml")).unwrap().replace("iterations = 50", "iterations = 4");
    fs::write(tmp.join("audit.toml"), cfg).unwrap();
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn audit_rerun_and_figure() {
    let tmp = tempfile::tempdir().unwrap();
    demo_dir(tmp.path());
    let cfg = tmp.path().join("audit.toml");
    let run = bin().args(["--jobs", "2", "audit", "--config"]).arg(&cfg).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let first = tree(&tmp.path().join("report"));
    assert!(first.iter().any(|(p, _)| p == "manifest.json"));

    let again = bin().args(["audit", "--config"]).arg(&cfg).output().unwrap();
    assert!(again.status.success());
    let log = String::from_utf8_lossy(&again.stderr);
    assert!(!log.contains(" ran in "), "{log}");
    assert_eq!(tree(&tmp.path().join("report")), first);

    let fig = bin().args(["figure", "outcome_freqs", "--config"]).arg(&cfg).output().unwrap();
    assert!(fig.status.success());
    let text = String::from_utf8(fig.stdout).unwrap();
    // header + 5 groups x 3 outcomes
    assert_eq!(text.lines().count(), 16);

    let bad = bin().args(["figure", "fig9", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("stage figure"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "output_dir = \"o\"\n[evaluation]\niterations = 1\n").unwrap();
    let out = bin().args(["audit", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage config"));

    // a cohort file whose header does not match the schema
    fs::write(tmp.path().join("cohort.csv"), "patient_id,visit_id\np,v\n").unwrap();
    fs::write(
        &cfg,
        "output_dir = \"o\"\n[data]\ncohort = \"cohort.csv\"\n[[models]]\nname = \"news\"\nkind = \"band\"\ntable = \"news\"\n",
    )
    .unwrap();
    let out = bin().args(["audit", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage load"));
}

#[test]
fn synth_preset_and_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("synth");
    let run = bin()
        .args(["synth", "--preset", "standard", "--scale", "0.001", "--min-patients", "5", "--seed", "3", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["cohort.csv", "schema.csv", "taxonomy.csv", "ground_truth.json", "scenario.toml"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let cfg = tmp.path().join("audit.toml");
    fs::write(
        &cfg,
        "output_dir = \"r\"\n[data]\ncohort = \"synth/cohort.csv\"\nschema = \"synth/schema.csv\"\ntaxonomy = \"synth/taxonomy.csv\"\n\
         [[models]]\nname = \"news\"\nkind = \"band\"\ntable = \"news\"\n",
    )
    .unwrap();
    let v = bin().args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stderr));
    let text = String::from_utf8(v.stdout).unwrap();
    assert!(text.contains("correction factor: 312"), "{text}");
}
