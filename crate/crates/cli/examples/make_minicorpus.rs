//! Regenerates the bundled 10-query mini-corpus.
//!
//! ```text
//! cargo run -p enrichcap-cli --example make_minicorpus -- crates/cli/fixtures/minicorpus
//! ```
//!
//! Every query's gold article is planted: queries 0–8 carry (or embed to)
//! exactly their article image's vectors. Query 9 is a 15° rotation of image 9
//! whose vectors favour image 8, so only geometric verification recovers it.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use enrichcap_core::providers::content_hash;
use enrichcap_core::synth::{brighten, rotate, textured_scene};

const N: usize = 10;
const DIM: usize = 16;
const WIDTH: usize = 192;
const HEIGHT: usize = 144;
/// Model B's basis is model A's shifted by this many axes.
const SHIFT: usize = 3;

const TOPICS: [(&str, &str, &str, &str); N] = [
    ("Harbor Festival", "Portmere", "Mayor Elena Ruiz", "the annual boat parade"),
    ("River Bridge", "Ashford", "Engineer Tomas Weller", "the reopening of the bridge"),
    ("Mountain Rescue", "Kestrel Ridge", "Captain Ana Solberg", "a night rescue operation"),
    ("Science Fair", "Northgate", "Principal David Osei", "the regional science fair"),
    ("Marathon", "Lakeview", "Coach Priya Nair", "the city marathon"),
    ("Museum Opening", "Old Town", "Curator Mei Lin", "the new wing of the museum"),
    ("Flood Relief", "Marsh County", "Director Samuel Brandt", "emergency flood relief"),
    ("Jazz Week", "Southbank", "Pianist Louis Carter", "the closing night of jazz week"),
    ("Solar Farm", "Dry Valley", "Minister Hana Kobayashi", "the solar farm launch"),
    ("Chess Championship", "Riverton", "Grandmaster Olga Petrova", "the national chess final"),
];

fn unit(axis: usize) -> Vec<f32> {
    let mut v = vec![0.0; DIM];
    v[axis] = 1.0;
    v
}

fn model_a(i: usize) -> Vec<f32> {
    unit(i)
}

fn model_b(i: usize) -> Vec<f32> {
    unit((i + SHIFT) % DIM)
}

fn article(i: usize) -> String {
    let (title, place, person, event) = TOPICS[i];
    [
        format!("Thousands gathered in {place} on Saturday for {event}."),
        format!("{person} opened the {title} with a short speech to residents."),
        "Organizers said preparations had taken nearly a year.".to_string(),
        format!("Local businesses in {place} reported their busiest weekend of the season."),
        "Volunteers handed out water and directed visitors throughout the afternoon.".to_string(),
        format!("Police said the {title} passed without serious incidents."),
        format!("{person} thanked the volunteers and promised a larger event next year."),
        "Weather stayed dry until the early evening, when light rain began.".to_string(),
        format!("The {title} is expected to return to {place} next spring."),
    ]
    .join(" ")
}

fn base_caption(i: usize) -> String {
    let (title, place, _, _) = TOPICS[i];
    format!("A crowd gathers in {place} during the {title}.")
}

fn references(i: usize) -> [String; 2] {
    let (title, place, person, event) = TOPICS[i];
    [
        format!("Residents of {place} gather for {event} as {person} opens the {title}."),
        format!("A large crowd in {place} watches {event}."),
    ]
}

fn write_jsonl(path: &Path, rows: &[Value]) {
    let body: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, body).expect("write jsonl");
}

fn write_json(path: &Path, value: &Value) {
    fs::write(path, serde_json::to_string_pretty(value).expect("json") + "\n").expect("write json");
}

fn main() {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "crates/cli/fixtures/minicorpus".into()),
    );
    fs::create_dir_all(out.join("images")).expect("create output dir");

    let scenes: Vec<_> = (0..N).map(|i| textured_scene(WIDTH, HEIGHT, 1000 + i as u64)).collect();
    let mut corpus = Vec::new();
    let (mut store_a, mut store_b) = (Vec::new(), Vec::new());
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("images/img_{i}.pgm");
        fs::write(out.join(&name), scene.to_pgm()).expect("write image");
        let id = format!("img_{i}");
        corpus.push(json!({"id": id, "article_id": format!("art_{i}"), "image": name}));
        store_a.push(json!({"id": id, "vector": model_a(i)}));
        store_b.push(json!({"id": id, "vector": model_b(i)}));
    }
    write_jsonl(&out.join("corpus.jsonl"), &corpus);
    write_jsonl(&out.join("store_a.jsonl"), &store_a);
    write_jsonl(&out.join("store_b.jsonl"), &store_b);

    let documents: Vec<Value> = (0..N)
        .map(|i| json!({"id": format!("art_{i}"), "text": article(i)}))
        .collect();
    write_jsonl(&out.join("documents.jsonl"), &documents);

    // Queries 0 and 1 embed through the mock image providers; the rest carry
    // precomputed vectors.
    let q0 = scenes[0].to_pgm();
    let q1 = brighten(&scenes[1], 10).to_pgm();
    let q9 = rotate(&scenes[9], 15.0, 0).to_pgm();
    fs::write(out.join("images/q_0.pgm"), &q0).expect("write q0");
    fs::write(out.join("images/q_1.pgm"), &q1).expect("write q1");
    fs::write(out.join("images/q_9.pgm"), &q9).expect("write q9");

    let mut images_a = serde_json::Map::new();
    let mut images_b = serde_json::Map::new();
    for (i, bytes) in [(0, &q0), (1, &q1)] {
        images_a.insert(content_hash(bytes), json!(model_a(i)));
        images_b.insert(content_hash(bytes), json!(model_b(i)));
    }
    write_json(&out.join("mock_a.json"), &json!({"dimension": DIM, "images": images_a}));
    write_json(&out.join("mock_b.json"), &json!({"dimension": DIM, "images": images_b}));

    let mut queries = Vec::new();
    for i in 0..N {
        let mut q = json!({"query_id": format!("q_{i}"), "base_caption": base_caption(i)});
        match i {
            0 | 1 => q["image"] = json!(format!("images/q_{i}.pgm")),
            9 => {
                let mix = |a: Vec<f32>, b: Vec<f32>| -> Vec<f32> {
                    a.iter().zip(&b).map(|(x, y)| 0.8 * x + 0.6 * y).collect()
                };
                q["image"] = json!("images/q_9.pgm");
                q["vectors"] = json!({
                    "model_a": mix(model_a(8), model_a(9)),
                    "model_b": mix(model_b(8), model_b(9)),
                });
            }
            _ => q["vectors"] = json!({"model_a": model_a(i), "model_b": model_b(i)}),
        }
        queries.push(q);
    }
    write_jsonl(&out.join("queries.jsonl"), &queries);

    let truth: Vec<Value> = (0..N)
        .map(|i| {
            json!({
                "query_id": format!("q_{i}"),
                "truth": [format!("art_{i}")],
                "references": references(i),
            })
        })
        .collect();
    write_jsonl(&out.join("truth.jsonl"), &truth);

    write_json(
        &out.join("config.json"),
        &json!({
            "encoders": [
                {"model_id": "model_a", "store": "store_a.jsonl", "provider": "mock_a"},
                {"model_id": "model_b", "store": "store_b.jsonl", "provider": "mock_b"},
            ],
            "corpus": "corpus.jsonl",
            "documents": "documents.jsonl",
            "providers": {
                "mock_a": {"kind": "mock", "fixture": "mock_a.json", "dimension": DIM},
                "mock_b": {"kind": "mock", "fixture": "mock_b.json", "dimension": DIM},
                "text": {"kind": "mock", "dimension": 64},
            },
            "text_embedder": "text",
            "caption_generator": "text",
            "seed": 7,
            "output": "out",
        }),
    );
    println!("wrote mini-corpus to {}", out.display());
}
