use std::path::PathBuf;

use serde::Deserialize;

use enrichcap_core::providers::{MockProvider, MockSpec};
use enrichcap_core::text_context::{
    assemble_prompt, build_context, chunk_sliding, select_chunks, Chunk, ContextBundle, Document,
    Sentence, DEFAULT_TEMPLATE,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Deserialize)]
struct SplitCase {
    text: String,
    sentences: Vec<String>,
}

#[test]
fn annotated_sentence_fixture() {
    let cases: Vec<SplitCase> =
        serde_json::from_str(&std::fs::read_to_string(fixture("sentences.json")).unwrap()).unwrap();
    assert_eq!(cases.len(), 20);
    for case in &cases {
        let doc = Document::new("f", case.text.as_str());
        let got: Vec<&str> = (0..doc.len()).map(|i| doc.sentence_text(i).unwrap()).collect();
        assert_eq!(got, case.sentences, "text: {:?}", case.text);

        let mut prev_end = 0;
        for s in &doc.sentences {
            assert!(prev_end <= s.start && s.start < s.end && s.end <= case.text.len());
            assert!(case.text[prev_end..s.start].trim().is_empty());
            prev_end = s.end;
        }
        assert!(case.text[prev_end..].trim().is_empty());
    }
}

fn mock(pairs: &[(&str, Vec<f32>)]) -> MockProvider {
    MockProvider::new(MockSpec {
        dimension: pairs[0].1.len(),
        text_literals: pairs.iter().map(|(t, v)| (t.to_string(), v.clone())).collect(),
        ..Default::default()
    })
    .unwrap()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn selection_matches_brute_force_cosine() {
    let doc = Document::new(
        "d",
        "Alpha one. Bravo two. Charlie three. Delta four. Echo five. Foxtrot six. Golf seven. Hotel eight.",
    );
    let chunks = chunk_sliding(&doc, 3, 1);
    assert_eq!(chunks.len(), 6);
    let vectors: Vec<Vec<f32>> = vec![
        vec![0.2, 0.9, 0.1],
        vec![0.8, 0.1, 0.3],
        vec![0.2, 0.9, 0.1],
        vec![-0.5, 0.5, 0.5],
        vec![0.3, 0.3, 0.9],
        vec![0.1, 1.0, 0.0],
    ];
    let query = vec![0.15, 0.95, 0.05];
    let mut pairs: Vec<(&str, Vec<f32>)> = vec![("base caption", query.clone())];
    pairs.extend(chunks.iter().map(|c| c.text.as_str()).zip(vectors.iter().cloned()));
    let m = mock(&pairs);

    // Oracle: all chunks scored, stable sort by (-similarity, start).
    let mut expected: Vec<(usize, f64)> = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (i, cosine(&query, v)))
        .collect();
    expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    for k in 1..=7 {
        let got = select_chunks(&chunks, "base caption", &m, k).unwrap();
        assert_eq!(got.len(), k.min(6));
        for (g, e) in got.iter().zip(&expected) {
            assert_eq!(g.start_sentence, e.0);
            assert!((g.similarity.unwrap() - e.1).abs() < 1e-12);
        }
    }

    let mut reversed = chunks.clone();
    reversed.reverse();
    let a = select_chunks(&chunks, "base caption", &m, 5).unwrap();
    let b = select_chunks(&reversed, "base caption", &m, 5).unwrap();
    assert_eq!(a, b);
}

fn miniature_bundle() -> ContextBundle {
    let s = |index: usize, text: &str| Sentence {
        index,
        text: text.into(),
    };
    let c = |start: usize, text: &str, sim: f64| Chunk {
        start_sentence: start,
        end_sentence: start + 2,
        text: text.into(),
        similarity: Some(sim),
    };
    ContextBundle {
        document_id: "article-7".into(),
        lead: vec![
            s(0, "Firefighters contained a blaze at the Riverside Market on Tuesday."),
            s(1, "No injuries were reported."),
            s(2, "The fire started in a bakery."),
        ],
        tail: vec![
            s(8, "Mayor Lena Ortiz promised support for traders."),
            s(9, "The market will reopen next week."),
        ],
        top_chunks: vec![
            c(4, "Stalls were evacuated by noon. Smoke drifted over the river. Traffic was diverted.", 0.91),
            c(0, "Firefighters contained a blaze at the Riverside Market on Tuesday. No injuries were reported. The fire started in a bakery.", 0.88),
            c(5, "Smoke drifted over the river. Traffic was diverted. Residents watched from the bridge.", 0.77),
        ],
        entities: vec!["Firefighters".into(), "Riverside Market".into(), "Tuesday".into(), "Lena Ortiz".into()],
    }
}

const BASE_CAPTION: &str = "Firefighters spray water on a smoking market building.";

#[test]
fn golden_prompt() {
    let prompt = assemble_prompt(&miniature_bundle(), BASE_CAPTION, DEFAULT_TEMPLATE).unwrap();
    let path = fixture("golden_prompt.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &prompt).unwrap();
    }
    let golden = std::fs::read_to_string(&path).expect("golden prompt fixture");
    assert_eq!(prompt, golden);
}

#[test]
fn prompt_ignores_order_of_equal_chunks() {
    let mut a = miniature_bundle();
    for c in &mut a.top_chunks {
        c.similarity = Some(0.5);
    }
    let mut b = a.clone();
    b.top_chunks.reverse();
    let pa = assemble_prompt(&a, BASE_CAPTION, DEFAULT_TEMPLATE).unwrap();
    let pb = assemble_prompt(&b, BASE_CAPTION, DEFAULT_TEMPLATE).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(pa, assemble_prompt(&a, BASE_CAPTION, DEFAULT_TEMPLATE).unwrap());
}

#[test]
fn bundle_keeps_lead_duplicates_until_rendering() {
    let text = "Alpha one. Bravo two. Charlie three. Delta four. Echo five.";
    let doc = Document::new("d", text);
    let chunk_texts: Vec<String> = chunk_sliding(&doc, 3, 1).into_iter().map(|c| c.text).collect();
    // The first chunk equals the lead exactly and is the best match.
    let m = mock(&[
        ("query", vec![1.0, 0.0]),
        (chunk_texts[0].as_str(), vec![1.0, 0.0]),
        (chunk_texts[1].as_str(), vec![0.0, 1.0]),
        (chunk_texts[2].as_str(), vec![0.5, 0.5]),
    ]);
    let bundle = build_context(&doc, "query", &m).unwrap();
    assert_eq!(bundle.top_chunks[0].start_sentence, 0);
    assert_eq!(bundle.top_chunks.len(), 3);
    let prompt = assemble_prompt(&bundle, "query", DEFAULT_TEMPLATE).unwrap();
    assert_eq!(prompt.matches("Alpha one.").count(), 1);
}
