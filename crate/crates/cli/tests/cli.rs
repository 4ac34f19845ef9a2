use std::path::Path;
use std::process::{Command, Output};

fn gobl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gobl"))
        .args(args)
        .env("GOBL_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    format!("{}/../core/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_gen_is_reproducible_and_writes_run_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = gobl(&["synth-gen", "--seed", "0", "--count", "10", "--out", s(d.path())]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = std::fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.path().join("manifest.json")).unwrap());
    let entries: serde_json::Value = serde_json::from_slice(&ma).unwrap();
    assert_eq!(entries.as_array().unwrap().len(), 10);
    assert!(a.path().join("effective-config.json").exists());
    assert!(a.path().join("run.log").exists());
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(gobl(&["bogus"]).status.code(), Some(1));
    assert_eq!(
        gobl(&["pretrain", "--out", s(d.path()), "colour=red"]).status.code(),
        Some(1)
    );
    assert_eq!(
        gobl(&["eval", "--out", s(d.path()), "--protocol", "sideways"])
            .status
            .code(),
        Some(1)
    );
    // No checkpoint in the run directory.
    assert_eq!(gobl(&["finetune", "--out", s(d.path())]).status.code(), Some(2));
    assert_eq!(gobl(&["--help"]).status.code(), Some(0));
}

#[test]
fn help_lists_config_keys_for_every_subcommand() {
    let subs = [
        "synth-gen",
        "coco-filter",
        "prompt-emit",
        "parse-mllm",
        "stats",
        "split",
        "pretrain",
        "finetune",
        "eval",
        "gradcheck",
        "report",
    ];
    for sub in subs {
        let o = gobl(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        let text = String::from_utf8(o.stdout).unwrap();
        for key in [
            "phase",
            "batch_size",
            "freeze_tags",
            "checkpoint_out",
            "log_path",
            "--out",
            "--seed",
        ] {
            assert!(text.contains(key), "{sub} --help lacks {key}");
        }
    }
}

#[test]
fn data_subcommands() {
    let d = tempfile::tempdir().unwrap();
    let out = s(d.path());
    let o = gobl(&["coco-filter", "--input", &fixture("coco_small.json"), "--out", out]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("coco_filtered.json")).unwrap()).unwrap();
    let kept: Vec<u64> = v["kept"]
        .as_array()
        .unwrap()
        .iter()
        .map(|k| k["image"]["id"].as_u64().unwrap())
        .collect();
    assert_eq!(kept, [1, 3]);

    assert_eq!(
        gobl(&["parse-mllm", "--input", &fixture("mllm_example.txt"), "--out", out])
            .status
            .code(),
        Some(0)
    );
    assert!(d.path().join("descriptions.json").exists());
    let bad = d.path().join("bad.txt");
    let text = std::fs::read_to_string(fixture("mllm_example.txt"))
        .unwrap()
        .replace("not sitting", "sitting");
    std::fs::write(&bad, text).unwrap();
    assert_eq!(
        gobl(&["parse-mllm", "--input", s(&bad), "--out", out]).status.code(),
        Some(2)
    );

    assert_eq!(
        gobl(&["synth-gen", "--count", "20", "--out", out]).status.code(),
        Some(0)
    );
    assert_eq!(gobl(&["stats", "--out", out]).status.code(), Some(0));
    assert_eq!(gobl(&["prompt-emit", "--out", out]).status.code(), Some(0));
    let prompts = std::fs::read_to_string(d.path().join("prompts.jsonl")).unwrap();
    assert_eq!(prompts.lines().count(), 20);
    assert_eq!(
        gobl(&["split", "--out", out, "--test-fraction", "0.25"]).status.code(),
        Some(0)
    );
    assert!(d.path().join("test_manifest.json").exists());
}

#[test]
fn gradcheck_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = gobl(&["gradcheck", "--instances", "3", "--out", s(d.path())]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for term in ["focal", "l1", "giou", "pnc", "tso", "total"] {
        assert!(text.contains(term));
    }
}

#[test]
fn train_then_eval_is_reproducible() {
    let run = |d: &Path| {
        let out = s(d);
        assert_eq!(
            gobl(&["synth-gen", "--count", "6", "--out", out]).status.code(),
            Some(0)
        );
        assert_eq!(gobl(&["pretrain", "--out", out, "epochs=1"]).status.code(), Some(0));
        let ft = gobl(&["finetune", "--out", out]);
        assert_eq!(ft.status.code(), Some(0), "{}", String::from_utf8_lossy(&ft.stderr));
        assert_eq!(
            gobl(&["eval", "--out", out, "--protocol", "intra"]).status.code(),
            Some(0)
        );
        assert_eq!(
            gobl(&[
                "report",
                "--input",
                s(&d.join("report.json")),
                "--out",
                s(&d.join("again"))
            ])
            .status
            .code(),
            Some(0)
        );
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path());
    run(b.path());
    for f in [
        "checkpoint.goblckpt",
        "report.json",
        "report.md",
        "predictions.jsonl",
        "train.log.jsonl",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("report.json")).unwrap()).unwrap();
    for k in [
        "map_full",
        "map_presence",
        "map_absence",
        "protocol",
        "iou_thresholds",
        "per_description",
    ] {
        assert!(report.get(k).is_some(), "{k}");
    }
    assert_eq!(
        std::fs::read(a.path().join("report.md")).unwrap(),
        std::fs::read(a.path().join("again/report.md")).unwrap()
    );
}
