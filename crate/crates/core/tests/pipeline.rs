use std::fs;
use std::path::{Path, PathBuf};

use granaudit::audit::{emit_figure, run_audit, AuditConfig, RunOptions, StageStatus, FIGURE_IDS};

fn demo_scenario() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo/scenario.toml")
}

fn write_config(dir: &Path, top: &str, extra: &str) -> AuditConfig {
    fs::copy(demo_scenario(), dir.join("scenario.toml")).unwrap();
    let text = format!(
        "output_dir = \"report\"\nseed = 11\n{top}[data]\nsynth = \"scenario.toml\"\nschema = \"compact\"\n{extra}\n\
         [[models]]\nname = \"logistic\"\nkind = \"logistic\"\ntrain = {{ c_grid = [0.1, 1.0], folds = 3 }}\n\
         [[models]]\nname = \"cart\"\nkind = \"band\"\ntable = \"cart\"\n"
    );
    fs::write(dir.join("audit.toml"), &text).unwrap();
    AuditConfig::load(dir.join("audit.toml")).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
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
fn smoke_star_table_one_cell_per_outcome_and_coarse() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "", "[evaluation]\nmetrics = [\"auroc\"]\niterations = 2\n");
    let summary = run_audit(&cfg, &RunOptions::default()).unwrap();
    assert!(summary.stages.iter().all(|s| s.status == StageStatus::Ran));
    for model in ["logistic", "cart"] {
        let text = fs::read_to_string(summary.output_dir.join(model).join("star_table.csv")).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 3 * 2, "{text}");
        assert!(rows.iter().all(|r| r.contains(",auroc,")));
    }
}

#[test]
fn rerun_skips_and_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "", "[evaluation]\niterations = 6\n");
    run_audit(&cfg, &RunOptions::default()).unwrap();
    let first = snapshot(&cfg.output_path());
    let again = run_audit(&cfg, &RunOptions::default()).unwrap();
    assert!(again.stages.iter().all(|s| s.status == StageStatus::Skipped));
    assert_eq!(snapshot(&cfg.output_path()), first);

    // touching one output reruns only what depends on it
    let star = cfg.output_path().join("cart/star_table.csv");
    fs::write(&star, "tampered").unwrap();
    let third = run_audit(&cfg, &RunOptions::default()).unwrap();
    let ran: Vec<&str> =
        third.stages.iter().filter(|s| s.status == StageStatus::Ran).map(|s| s.name.as_str()).collect();
    assert_eq!(ran, ["cart/compare"]);
    assert_eq!(snapshot(&cfg.output_path()), first);

    let forced = run_audit(&cfg, &RunOptions { force: true }).unwrap();
    assert!(forced.stages.iter().all(|s| s.status == StageStatus::Ran));
    assert_eq!(snapshot(&cfg.output_path()), first);
}

#[test]
fn manifest_lists_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "", "[evaluation]\niterations = 3\n");
    run_audit(&cfg, &RunOptions::default()).unwrap();
    let out = cfg.output_path();
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    let on_disk: Vec<String> = snapshot(&out)
        .into_iter()
        .map(|(p, _)| p)
        .filter(|p| p != "manifest.json" && !p.starts_with(".cache"))
        .collect();
    assert_eq!(files.keys().cloned().collect::<Vec<_>>(), on_disk);
    for (name, hash) in files {
        use sha2::Digest;
        let digest = sha2::Sha256::digest(fs::read(out.join(name)).unwrap());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hash.as_str().unwrap(), hex, "{name}");
    }
    assert_eq!(manifest["correction_factor"], 3.0 * 4.0 * 5.0);
    assert!(manifest.get("timing_seconds").is_none());
}

#[test]
fn figure_rows_have_ordered_intervals() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "", "[evaluation]\niterations = 20\n");
    run_audit(&cfg, &RunOptions::default()).unwrap();
    let out = cfg.output_path();
    for id in FIGURE_IDS {
        let text = emit_figure(&out, id, Some("logistic")).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers().unwrap().clone();
        let pos = |name: &str| header.iter().position(|h| h == name).unwrap();
        let est = if header.iter().any(|h| h == "median") { pos("median") } else if header.iter().any(|h| h == "rate") { pos("rate") } else { pos("estimate") };
        let (lo, hi) = (pos("ci_low"), pos("ci_high"));
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec.unwrap();
            if rec[est].is_empty() {
                continue;
            }
            let (m, l, h): (f64, f64, f64) = (rec[est].parse().unwrap(), rec[lo].parse().unwrap(), rec[hi].parse().unwrap());
            assert!(l <= m && m <= h, "{id}: {rec:?}");
            n += 1;
        }
        assert!(n > 0, "{id}");
    }
    let freqs = emit_figure(&out, "outcome_freqs", None).unwrap();
    assert_eq!(freqs.lines().count(), 1 + 5 * 3);
    let variation = emit_figure(&out, "variation", Some("cart")).unwrap();
    // between and within per (outcome, metric)
    assert_eq!(variation.lines().count(), 1 + 2 * 3 * 4);
    assert!(emit_figure(&out, "fig7", None).is_err());
}

#[test]
fn timing_is_opt_in() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "record_timing = true\n", "[evaluation]\niterations = 2\nmetrics = [\"auprc\"]\n");
    run_audit(&cfg, &RunOptions::default()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.output_path().join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["timing_seconds"].as_object().unwrap().contains_key("logistic/draws"));
}
