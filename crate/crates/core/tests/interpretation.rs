// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use pie_core::attribution::{unique_union, RetainedOccurrence};
use pie_core::interpretation::{
    average_precision, extract_exemplars, gini, run_interpretation, score_clarity, score_purity,
    score_responsiveness, AuditorClient, CorpusCache, ExemplarSet, ExplainerClient, FeatureDescription,
    HttpAuditor, HttpConfig, HttpExplainer, StubAuditor, StubExplainer, AUDITOR_CALLS_PER_FEATURE,
};
use pie_core::model::TokenId;
use pie_core::fixtures::{self, MARKER_TOKEN};
use pie_core::tasks::random_corpus;
use pie_core::{
    Circuit, FeatureId, FeatureOccurrence, InterpretConfig, Method, ReplacementModel, UniqueFeatureSet,
};
use proptest::prelude::*;

const MARKED: TokenId = MARKER_TOKEN;

fn marker_model() -> ReplacementModel {
    fixtures::marker_model().unwrap()
}

fn features(ids: &[(usize, usize)]) -> UniqueFeatureSet {
    let circuit = Circuit {
        prompt_id: "p".into(),
        method: Method::Fap,
        k: ids.len(),
        retained: ids
            .iter()
            .map(|&(l, f)| RetainedOccurrence {
                occurrence: FeatureOccurrence::new(l, f, 0),
                score: 1.0,
            })
            .collect(),
    };
    unique_union([&circuit])
}

fn small_config() -> InterpretConfig {
    InterpretConfig {
        n_eval: 60,
        ..InterpretConfig::default()
    }
}

#[test]
fn exemplars_are_sorted_and_bounded() {
    let model = marker_model();
    let corpus = vec![vec![0, 1, 2], vec![0, 7, 3], vec![0, 4, 6]];
    let cache = CorpusCache::new(&model, &corpus).unwrap();
    let set = extract_exemplars(&cache, FeatureId::new(0, 1), 40, 0.65).unwrap();
    assert_eq!(set.exemplars.len(), 3);
    let maxes: Vec<f64> = set.exemplars.iter().map(|e| e.max_activation).collect();
    assert_eq!(maxes, vec![7.0 / 8.0, 6.0 / 8.0, 2.0 / 8.0]);
    assert_eq!(set.exemplars[0].sequence, 1);
    // 0.65 * 7/8 = 0.569 clears only token 7 in sequence 1
    assert_eq!(set.exemplars[0].highlighted, vec![1]);
    assert_eq!(set.exemplars[1].highlighted, vec![1, 2]);

    let top = extract_exemplars(&cache, FeatureId::new(0, 1), 1, 1.0).unwrap();
    assert_eq!(top.exemplars.len(), 1);
    assert_eq!(top.exemplars[0].highlighted, vec![1]);
    assert!(extract_exemplars(&cache, FeatureId::new(0, 1), 0, 0.65).is_err());
    assert!(extract_exemplars(&cache, FeatureId::new(0, 1), 4, 0.0).is_err());
    assert!(extract_exemplars(&cache, FeatureId::new(2, 0), 4, 0.65).is_err());
    assert!(CorpusCache::new(&model, &[]).is_err());
}

#[test]
fn constructed_feature_highlights_only_its_token() {
    let model = marker_model();
    let corpus = random_corpus(8, 200, 6, 11);
    let cache = CorpusCache::new(&model, &corpus).unwrap();
    let set = extract_exemplars(&cache, FeatureId::new(0, 0), 40, 0.65).unwrap();
    assert_eq!(set.exemplars.len(), 40);
    for ex in &set.exemplars {
        assert!(!ex.highlighted.is_empty());
        for &p in &ex.highlighted {
            assert_eq!(ex.tokens[p], MARKED);
        }
    }
    assert_eq!(set.top_highlighted_tokens(3), vec![MARKED]);
    let silent = extract_exemplars(&cache, FeatureId::new(0, 2), 40, 0.65).unwrap();
    assert!(silent.never_active && silent.exemplars.is_empty());
}

#[test]
fn clarity_and_responsiveness_closed_forms() {
    let model = marker_model();
    let f = FeatureId::new(0, 0);
    let with: Vec<Vec<TokenId>> = vec![vec![0, MARKED], vec![0, 1, MARKED]];
    let without: Vec<Vec<TokenId>> = vec![vec![0, 1], vec![0, 2, 3]];
    assert_eq!(score_clarity(&model, f, &with, &without).unwrap(), 1.0);
    assert_eq!(score_clarity(&model, f, &without, &without).unwrap(), 0.0);
    assert_eq!(score_clarity(&model, f, &without, &with).unwrap(), -1.0);
    assert!(score_clarity(&model, f, &[], &with).is_err());

    let rated: Vec<(Vec<TokenId>, bool)> = vec![(with[0].clone(), true), (without[0].clone(), false)];
    assert_eq!(score_responsiveness(&model, f, &rated).unwrap(), Some(1.0));
    let same: Vec<(Vec<TokenId>, bool)> = vec![(without[0].clone(), true), (without[1].clone(), false)];
    assert_eq!(score_responsiveness(&model, f, &same).unwrap(), Some(0.0));
    assert_eq!(score_responsiveness(&model, f, &rated[..1]).unwrap(), None);
}

#[test]
fn purity_hand_enumeration() {
    // positives at relevance ranks 1 and 3 among 4
    let acts = [9.0, 1.0, 8.0, 0.0];
    let rel = [4.0, 3.0, 2.0, 1.0];
    let ap = score_purity(&acts, &rel, 0.5).unwrap().unwrap();
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    // one positive ranked last of n
    let n = 7;
    let acts: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let rel: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
    assert_eq!(score_purity(&acts, &rel, 1.0 / n as f64).unwrap(), Some(1.0 / n as f64));
}

fn brute_force_ap(labels: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let precisions: Vec<f64> = positives
        .iter()
        .map(|&r| labels[..=r].iter().filter(|&&l| l).count() as f64 / (r + 1) as f64)
        .collect();
    Some(precisions.iter().sum::<f64>() / precisions.len() as f64)
}

#[test]
fn average_precision_matches_brute_force_exhaustively() {
    for n in 1..=8usize {
        for mask in 0u32..(1 << n) {
            let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            match (average_precision(&labels), brute_force_ap(&labels)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{labels:?}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }
}

fn squash(x: f64) -> f64 {
    x.powi(3) + 2.0 * x.exp()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metrics_depend_only_on_activation_ranks(
        acts in proptest::collection::vec(-3.0f64..3.0, 2..24),
        rel in proptest::collection::vec(0.0f64..1.0, 24),
        split in 1usize..23,
        q in 0.05f64..1.0,
    ) {
        let rel = &rel[..acts.len()];
        let mapped: Vec<f64> = acts.iter().map(|&a| squash(a)).collect();
        prop_assert_eq!(score_purity(&acts, rel, q).unwrap(), score_purity(&mapped, rel, q).unwrap());
        let split = split.min(acts.len() - 1);
        prop_assert_eq!(gini(&acts[..split], &acts[split..]), gini(&mapped[..split], &mapped[split..]));
        if let Some(p) = score_purity(&acts, rel, q).unwrap() {
            prop_assert!(p > 0.0 && p <= 1.0);
        }
    }
}

#[test]
fn stub_pipeline_is_deterministic_and_counts_calls() {
    let model = marker_model();
    let corpus = random_corpus(8, 120, 6, 3);
    let set = features(&[(0, 0), (0, 1), (0, 2)]);
    let auditor = StubAuditor::new(8, 6, 9);
    let run = || {
        let report =
            run_interpretation(&model, &set, &corpus, &StubExplainer::default(), &auditor, &small_config()).unwrap();
        let mut buf = Vec::new();
        report.write_jsonl(&mut buf).unwrap();
        (report, buf)
    };
    let (report, bytes) = run();
    assert_eq!(bytes, run().1);
    assert_eq!(report.features(), 3);
    assert_eq!(report.client_calls(), 3 * (1 + AUDITOR_CALLS_PER_FEATURE));

    let marked = &report.records[0];
    assert_eq!(marked.description.as_deref(), Some("feature L0.0 fires on tokens [5]"));
    assert_eq!(marked.clarity, Some(1.0));
    assert_eq!(marked.responsiveness, Some(1.0));
    assert!(marked.purity.unwrap() > 0.9, "{marked:?}");
    assert_eq!(marked.n_eval, 60);
    assert!(marked.failures.is_empty(), "{marked:?}");

    let silent = &report.records[2];
    assert!(silent.failures.iter().any(|f| f.contains("never activates")));
    assert!(silent.purity.is_none());

    let first = String::from_utf8(bytes).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let keys: BTreeSet<&str> = line.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(
        keys,
        BTreeSet::from(["feature", "description", "clarity", "purity", "responsiveness", "n_eval", "failures"])
    );
}

#[test]
fn empty_feature_set_makes_no_calls() {
    let model = marker_model();
    let report = run_interpretation(
        &model,
        &UniqueFeatureSet::default(),
        &random_corpus(8, 4, 4, 0),
        &StubExplainer::default(),
        &StubAuditor::new(8, 6, 0),
        &small_config(),
    )
    .unwrap();
    assert!(report.records.is_empty());
    assert_eq!(report.client_calls(), 0);
}

#[test]
fn client_failures_become_records() {
    let model = marker_model();
    let corpus = random_corpus(8, 120, 6, 3);
    let set = features(&[(0, 0), (0, 1)]);
    let explainer = StubExplainer {
        fail_on: BTreeSet::from([FeatureId::new(0, 0)]),
    };
    let mut auditor = StubAuditor::new(8, 6, 9);
    auditor.fail_on.insert(FeatureId::new(0, 1));
    let report = run_interpretation(&model, &set, &corpus, &explainer, &auditor, &small_config()).unwrap();
    assert_eq!(report.failed(), 1);
    assert!(report.records[0].failures[0].starts_with("explainer:"));
    let second = &report.records[1];
    assert!(second.description.is_some());
    assert!(second.clarity.is_none() && second.purity.is_none());
    assert_eq!(second.failures.len(), 2);
    assert_eq!(report.explainer_calls, 2);
    assert_eq!(report.auditor_calls, AUDITOR_CALLS_PER_FEATURE);
}

/// Serves scripted `(status, body)` replies in order and records each
/// request as `(path, body)`.
fn mock_server(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<(String, String)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut length = 0;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push((path, String::from_utf8(buf).unwrap()));
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}"), seen)
}

fn assert_json(body: &str, frozen: &str) {
    let got: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(got, serde_json::from_str::<serde_json::Value>(frozen).unwrap());
}

fn quick() -> HttpConfig {
    HttpConfig {
        timeout_ms: 5_000,
        attempts: 3,
        backoff_ms: 1,
    }
}

fn tiny_set() -> ExemplarSet {
    ExemplarSet {
        feature: FeatureId::new(1, 4),
        threshold: 0.65,
        exemplars: vec![pie_core::interpretation::Exemplar {
            sequence: 2,
            tokens: vec![0, 5],
            activations: vec![0.0, 1.5],
            max_activation: 1.5,
            highlighted: vec![1],
        }],
        never_active: false,
    }
}

#[test]
fn http_explainer_retries_then_succeeds() {
    let (url, seen) = mock_server(vec![
        (503, "{}".into()),
        (500, "{}".into()),
        (200, r#"{"description":"fires on token 5"}"#.into()),
    ]);
    let d = HttpExplainer::new(format!("{url}/explain"), quick()).unwrap().explain(&tiny_set()).unwrap();
    assert_eq!(d.text, "fires on token 5");
    assert_eq!(d.explainer, "external");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].0, "/explain");
    assert_json(
        &seen[0].1,
        r#"{"feature":{"l":1,"f":4},"threshold":0.65,"exemplars":[{"sequence":2,"tokens":[0,5],"activations":[0.0,1.5],"max_activation":1.5,"highlighted":[1]}],"never_active":false}"#
    );
}

#[test]
fn http_explainer_gives_up_after_three_attempts() {
    let (url, seen) = mock_server(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
    let err = HttpExplainer::new(url, quick()).unwrap().explain(&tiny_set()).unwrap_err();
    assert!(err.to_string().contains("3 attempts"), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn http_client_errors_are_not_retried() {
    let (url, seen) = mock_server(vec![(400, "{}".into())]);
    assert!(HttpExplainer::new(url, quick()).unwrap().explain(&tiny_set()).is_err());
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn http_auditor_schemas() {
    let (url, seen) = mock_server(vec![
        (200, r#"{"positives":[[0,5]],"negatives":[[0,1]]}"#.into()),
        (200, r#"{"ratings":[{"relevance":1.0,"matches":true},{"relevance":0.0,"matches":false}]}"#.into()),
        (200, r#"{"ratings":[]}"#.into()),
    ]);
    let auditor = HttpAuditor::new(format!("{url}/"), quick()).unwrap();
    let d = FeatureDescription {
        feature: FeatureId::new(0, 3),
        text: "fires on token 5".into(),
        explainer: "external".into(),
        provenance: BTreeMap::new(),
    };
    let batch = auditor.synthesize(&d, 15).unwrap();
    assert_eq!(batch.positives, vec![vec![0, 5]]);
    let ratings = auditor.rate(&d, &[vec![0, 5], vec![0, 1]]).unwrap();
    assert!(ratings[0].matches && !ratings[1].matches);
    assert!(auditor.rate(&d, &[vec![0, 5]]).is_err());
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].0, "/synthesize");
    assert_json(&seen[0].1, r#"{"feature":{"l":0,"f":3},"description":"fires on token 5","per_class":15}"#);
    assert_eq!(seen[1].0, "/rate");
    assert_json(
        &seen[1].1,
        r#"{"feature":{"l":0,"f":3},"description":"fires on token 5","samples":[[0,5],[0,1]]}"#
    );
}

#[test]
fn config_is_validated() {
    let model = marker_model();
    let bad = InterpretConfig {
        max_in_flight: 0,
        ..InterpretConfig::default()
    };
    let err = run_interpretation(
        &model,
        &features(&[(0, 0)]),
        &random_corpus(8, 4, 4, 0),
        &StubExplainer::default(),
        &StubAuditor::new(8, 6, 0),
        &bad,
    );
    assert!(err.is_err());
    assert!(HttpExplainer::new("http://x", HttpConfig { attempts: 0, ..quick() }).is_err());
}
