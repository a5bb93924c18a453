use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_enrichcap"))
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/minicorpus")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn enrichcap")
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn jsonl(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).expect("json line")).collect()
}

fn run_minicorpus(out: &Path) -> Value {
    let c = corpus();
    ok(bin()
        .arg("run")
        .arg("--config")
        .arg(c.join("config.json"))
        .arg("--queries")
        .arg(c.join("queries.jsonl"))
        .arg("--truth")
        .arg(c.join("truth.jsonl"))
        .arg("--out")
        .arg(out));
    serde_json::from_str(&std::fs::read_to_string(out.join("result.json")).unwrap()).unwrap()
}

#[test]
fn fuse_matches_hand_evaluated_golden() {
    let dir = tempfile::tempdir().unwrap();
    let rankings = dir.path().join("rankings.jsonl");
    let hit = |id: &str, score: f64| json!({"id": id, "score": score});
    let line = json!({"query_id": "q", "rankings": [
        {"model_id": "a", "hits": [hit("X", 0.9), hit("P", 0.5)]},
        {"model_id": "b", "hits": [hit("Q", 0.85), hit("X", 0.8)]},
        {"model_id": "c", "hits": [hit("R", 0.7), hit("S", 0.6)]},
    ]});
    std::fs::write(&rankings, format!("{line}\n")).unwrap();
    let out = jsonl(&ok(bin().arg("fuse").arg(&rankings)));
    let fused = out[0]["fused"].as_array().unwrap();
    let got: Vec<(&str, f64)> = fused
        .iter()
        .map(|c| (c["id"].as_str().unwrap(), c["s_final"].as_f64().unwrap()))
        .collect();
    // (0.9/3 + 0.8·0.8/3)/2 + 0.03; every other id appears once.
    let expected = [
        ("X", 0.286_666_666_666_666_7),
        ("Q", 0.85 / 3.0),
        ("R", 0.7 / 3.0),
        ("S", 0.6 * 0.8 / 3.0),
        ("P", 0.5 * 0.8 / 3.0),
    ];
    assert_eq!(got.len(), expected.len());
    for ((id, s), (eid, es)) in got.iter().zip(expected) {
        assert_eq!(*id, eid);
        assert!((s - es).abs() < 1e-12, "{id}: {s} vs {es}");
    }
}

#[test]
fn verify_with_fixed_seed_is_byte_identical() {
    let img = corpus().join("images");
    let go = || {
        ok(bin()
            .args(["verify", "--seed", "7"])
            .arg(img.join("q_9.pgm"))
            .arg(img.join("img_8.pgm"))
            .arg(img.join("img_9.pgm")))
    };
    let first = go();
    assert_eq!(first, go());
    let v: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["swapped"], json!(true));
    assert!(v["ranking"][0].as_str().unwrap().ends_with("img_9.pgm"));
}

#[test]
fn eval_on_perfect_run_gives_unit_ap() {
    let dir = tempfile::tempdir().unwrap();
    let run_file = dir.path().join("run.jsonl");
    let lines: String = (0..4)
        .map(|i| {
            format!(
                "{}\n",
                json!({"query_id": format!("q{i}"), "ranked": [format!("a{i}"), "z"], "truth": [format!("a{i}")]})
            )
        })
        .collect();
    std::fs::write(&run_file, lines).unwrap();
    let report: Value = serde_json::from_str(&ok(bin().arg("eval").arg("--run").arg(&run_file))).unwrap();
    assert_eq!(report["ap"], json!(1.0));
    assert_eq!(report["recall_at_1"], json!(1.0));
    assert!(report.get("overall").is_none());
}

#[test]
fn ingest_converts_between_formats() {
    let dir = tempfile::tempdir().unwrap();
    let packed = dir.path().join("a.emb");
    let manifest: Value = serde_json::from_str(&ok(bin()
        .arg("ingest")
        .arg(corpus().join("store_a.jsonl"))
        .arg("--out")
        .arg(&packed)
        .args(["--out-format", "packed"])))
    .unwrap();
    assert_eq!(manifest["count"], json!(10));
    assert_eq!(manifest["dimension"], json!(16));
    let again: Value =
        serde_json::from_str(&ok(bin().arg("ingest").arg(&packed).args(["--format", "packed"]))).unwrap();
    assert_eq!(again, manifest);
}

#[test]
fn pipeline_run_is_deterministic_and_planted() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_minicorpus(&dir.path().join("a"));
    let b = run_minicorpus(&dir.path().join("b"));
    assert_eq!(
        std::fs::read(dir.path().join("a/result.json")).unwrap(),
        std::fs::read(dir.path().join("b/result.json")).unwrap()
    );
    assert_eq!(a, b);
    assert_eq!(a["metrics"]["recall_at_1"], json!(1.0));
    for q in a["queries"].as_array().unwrap() {
        let o = &q["output"];
        let id = q["query_id"].as_str().unwrap().trim_start_matches("q_");
        assert_eq!(o["chosen"]["article_id"], json!(format!("art_{id}")));
        let ranked: Vec<&Value> = o["fused"].as_array().unwrap().iter().map(|c| &c["id"]).collect();
        assert!(ranked.contains(&&o["chosen"]["candidate_id"]));
    }
    let q9 = &a["queries"][9]["output"];
    assert_eq!(q9["fused"][0]["id"], json!("img_8"));
    assert_eq!(q9["verification"]["swapped"], json!(true));
    assert_eq!(q9["verification"]["decisions"][0]["rerank"], json!(true));
}

#[test]
fn stages_piped_by_hand_reproduce_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus();
    let config = c.join("config.json");
    let result = run_minicorpus(&dir.path().join("run"));

    let retrieved = ok(bin()
        .arg("retrieve")
        .arg("--config")
        .arg(&config)
        .arg("--queries")
        .arg(c.join("queries.jsonl")));
    let rankings_path = dir.path().join("rankings.jsonl");
    std::fs::write(&rankings_path, &retrieved).unwrap();
    let fused = jsonl(&ok(bin().arg("fuse").arg(&rankings_path).arg("--config").arg(&config)));

    let queries = jsonl(&std::fs::read_to_string(c.join("queries.jsonl")).unwrap());
    for (i, (r, f)) in jsonl(&retrieved).iter().zip(&fused).enumerate() {
        let out = &result["queries"][i]["output"];
        for ranking in r["rankings"].as_array().unwrap() {
            assert_eq!(ranking["hits"], out["retrieval"][ranking["model_id"].as_str().unwrap()]);
        }
        assert_eq!(f["fused"], out["fused"]);

        let mut chosen = out["fused"][0]["id"].as_str().unwrap().to_string();
        if let Some(image) = queries[i]["image"].as_str() {
            let cands: Vec<PathBuf> = out["fused"].as_array().unwrap()[..2]
                .iter()
                .map(|x| c.join(format!("images/{}.pgm", x["id"].as_str().unwrap())))
                .collect();
            let v: Value = serde_json::from_str(&ok(bin()
                .args(["verify", "--seed", "7"])
                .arg(c.join(image))
                .args(&cands)))
            .unwrap();
            let stage = &out["verification"];
            assert_eq!(v["swapped"], stage["swapped"]);
            assert_eq!(v["decisions"][0]["confidence"], stage["decisions"][0]["confidence"]);
            for (got, want) in v["checks"].as_array().unwrap().iter().zip(stage["checks"].as_array().unwrap()) {
                assert_eq!(got["report"], want["report"]);
            }
            let top = Path::new(v["ranking"][0].as_str().unwrap());
            chosen = top.file_stem().unwrap().to_str().unwrap().to_string();
        }
        assert_eq!(out["chosen"]["candidate_id"], json!(chosen));

        let article = out["chosen"]["article_id"].as_str().unwrap();
        let caption = queries[i]["base_caption"].as_str().unwrap();
        let bundle = ok(bin()
            .arg("context")
            .arg("--config")
            .arg(&config)
            .args(["--article", article, "--caption", caption]));
        assert_eq!(serde_json::from_str::<Value>(&bundle).unwrap(), out["context"]);
        let bundle_path = dir.path().join(format!("bundle_{i}.json"));
        std::fs::write(&bundle_path, bundle).unwrap();
        let prompt = ok(bin().arg("prompt").arg(&bundle_path).args(["--caption", caption]));
        assert_eq!(json!(prompt), out["prompt"]);
    }
}

#[test]
fn exit_codes_distinguish_usage_config_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(bin().arg("frobnicate")).status.code(), Some(2));
    assert_eq!(run(bin().arg("verify")).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"encoders": [{"model_id": "a", "store": "s.jsonl", "extra": 1}]}"#).unwrap();
    let out = run(bin().arg("run").arg("--config").arg(&bad).arg("--queries").arg(&bad));
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("encoders[0].extra"), "{stderr}");

    let out = run(bin().arg("verify").arg(dir.path().join("missing.pgm")).arg(&bad));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn failing_query_is_recorded_and_run_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus();
    let queries = dir.path().join("queries.jsonl");
    let good = std::fs::read_to_string(c.join("queries.jsonl")).unwrap();
    let first = good.lines().nth(2).unwrap();
    let broken = json!({"query_id": "broken", "vectors": {"model_a": [1.0], "model_b": [1.0]}, "base_caption": "x"});
    std::fs::write(&queries, format!("{first}\n{broken}\n")).unwrap();
    let out = run(bin()
        .arg("run")
        .arg("--config")
        .arg(c.join("config.json"))
        .arg("--queries")
        .arg(&queries)
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(out.status.code(), Some(1));
    let result: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    assert!(result["queries"][0]["output"].is_object());
    assert_eq!(result["queries"][1]["error"]["stage"], json!("retrieve"));
}
