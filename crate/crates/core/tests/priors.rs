use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use gpp_core::imaging::{degrade, synth_scene, Image};
use gpp_core::priors::*;
use gpp_core::CoreError;
use proptest::prelude::*;
use serde_json::{json, Value};

// Independent closed form: the logistic function equals 1/2 + tanh(x/2)/2.
fn oracle_s(d: f64, alpha: f64) -> f64 {
    0.5 + 0.5 * (d / alpha / 2.0).tanh()
}

#[test]
fn quantify_examples() {
    assert_eq!(quantify(0.3, 0.3, 3.0).unwrap(), 0.5);
    let s1 = quantify(1.0, 0.0, 3.0).unwrap();
    assert!((s1 - oracle_s(1.0, 3.0)).abs() < 1e-15);
    assert!((s1 - 0.5825702064623147).abs() < 1e-12);
    for (a, b) in [(0.9, 0.1), (0.2, 0.7), (1.0, 0.0)] {
        let sum = quantify(a, b, 3.0).unwrap() + quantify(b, a, 3.0).unwrap();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    assert!(quantify(0.5, 0.5, 0.0).is_err());
    assert!(quantify(0.5, 0.5, -1.0).is_err());
    assert!(quantify(1.5, 0.5, 3.0).is_err());
}

#[test]
fn quantify_range_for_unit_gap() {
    let lo = quantify(0.0, 1.0, DEFAULT_ALPHA).unwrap();
    let hi = quantify(1.0, 0.0, DEFAULT_ALPHA).unwrap();
    assert!((lo - 0.41742).abs() < 1e-4 && (hi - 0.58258).abs() < 1e-4);
}

proptest! {
    #[test]
    fn quantify_strictly_monotone(d1 in -1.0f64..1.0, d2 in -1.0f64..1.0) {
        prop_assume!(d1 != d2);
        let s = |d: f64| quantify((1.0 + d) / 2.0, (1.0 - d) / 2.0, 3.0).unwrap();
        prop_assert_eq!(d1 < d2, s(d1) < s(d2));
    }
}

const GOLDEN_CONTRAST_GLOBAL: &str = "You are shown a complete photograph. Evaluate the contrast of this image, \
where contrast means the difference in luminance that makes objects distinguishable. Is the contrast good or poor? \
Answer with exactly one word: good or poor.";

#[test]
fn prompts_substitute_and_end_with_instruction() {
    let specs = default_specs();
    let g = build_prompt(&specs[0], Scope::Global).unwrap();
    assert_eq!(g, GOLDEN_CONTRAST_GLOBAL);
    for s in &specs {
        for scope in [Scope::Global, Scope::Patch] {
            let p = build_prompt(s, scope).unwrap();
            assert!(p.ends_with(ANSWER_INSTRUCTION));
            assert!(p.contains(s.attribute.name()) && p.contains(&s.definition));
        }
        let g = build_prompt(s, Scope::Global).unwrap();
        let p = build_prompt(s, Scope::Patch).unwrap();
        let (gs, gr) = g.split_once(". ").unwrap();
        let (ps, pr) = p.split_once(". ").unwrap();
        assert_eq!(gr, pr);
        assert_ne!(gs, ps);
    }
    let mut bad = specs[1].clone();
    bad.prompt_template = "Rate the {attribute}.".into();
    assert!(build_prompt(&bad, Scope::Global).is_err());
    assert_eq!(prompt_version(&specs), PROMPT_VERSION);
    let mut custom = specs.clone();
    custom[2].definition = "crispness".into();
    assert_ne!(prompt_version(&custom), PROMPT_VERSION);
}

#[test]
fn builtin_examples() {
    let black = Image::filled(8, 8, [0.0; 3]);
    assert_eq!(builtin_assess(&black, Attribute::Visibility), -1.0);
    let gray = Image::filled(8, 8, [0.5; 3]);
    assert_eq!(builtin_assess(&gray, Attribute::Contrast), -1.0);
    assert_eq!(builtin_assess(&gray, Attribute::Sharpness), -1.0);
    // mean luminance 0.4 -> 12 * 0.05
    let mid = Image::filled(8, 8, [0.4; 3]);
    assert!((builtin_assess(&mid, Attribute::Visibility) - 0.6).abs() < 1e-5);
    let r = BuiltinProvider.assess(&mid, &AttributeSpec::new(Attribute::Visibility), Scope::Global).unwrap();
    assert!((r.p_pos - 0.8).abs() < 1e-5 && (r.p_neg - 0.2).abs() < 1e-5);
}

#[test]
fn builtin_sharpness_matches_direct_laplacian() {
    // vertical stripes: interior |lap| is 2 on every pixel, replicated borders give 1
    let img = Image::from_fn(8, 8, |_, _, x| (x % 2) as f32);
    let lap_sum: f64 = (0..8).map(|x| if x == 0 || x == 7 { 1.0 } else { 2.0 }).sum::<f64>() * 8.0;
    let expect = (40.0 * (lap_sum / 64.0 - 0.05)).clamp(-1.0, 1.0);
    assert_eq!(builtin_assess(&img, Attribute::Sharpness), expect);
    // low-amplitude checkerboard: |lap| is 8a inside, 6a on edges, 4a at corners
    let a = 0.008f64;
    let board = Image::from_fn(8, 8, |_, y, x| 0.5 + if (x + y) % 2 == 0 { a as f32 } else { -(a as f32) });
    let mean_lap = (36.0 * 8.0 + 24.0 * 6.0 + 4.0 * 4.0) * a / 64.0;
    let got = builtin_assess(&board, Attribute::Sharpness);
    assert!((got - 40.0 * (mean_lap - 0.05)).abs() < 1e-4, "{got}");
}

#[test]
fn darker_variant_never_more_visible() {
    for seed in 0..20 {
        let x = synth_scene(seed, 32).unwrap();
        let d = degrade(&x, 1.5, 0.7, 0.0, 0).unwrap();
        assert!(builtin_assess(&d, Attribute::Visibility) <= builtin_assess(&x, Attribute::Visibility));
    }
}

fn opts() -> ExtractOptions<'static> {
    ExtractOptions::default()
}

#[test]
fn extract_on_uniform_image_is_flat() {
    let gray = Image::filled(48, 48, [0.45; 3]);
    let p = extract_prior(&gray, &BuiltinProvider, 4, &default_specs(), &opts()).unwrap();
    assert_eq!(p.map.len(), 48);
    for a in Attribute::ALL {
        let first = p.map_at(a, 0, 0);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(p.map_at(a, r, c), first);
            }
        }
    }
    assert!((p.s_mean - p.global.iter().sum::<f64>() / 3.0).abs() < 1e-9);
}

#[test]
fn grid_one_map_equals_global() {
    let x = synth_scene(9, 40).unwrap();
    let p = extract_prior(&x, &BuiltinProvider, 1, &default_specs(), &opts()).unwrap();
    for a in Attribute::ALL {
        assert_eq!(p.map_at(a, 0, 0), p.score(a));
    }
}

#[test]
fn degraded_image_has_lower_visibility() {
    let x = synth_scene(12, 48).unwrap();
    let d = degrade(&x, 2.2, 0.25, 0.0, 0).unwrap();
    let px = extract_prior(&x, &BuiltinProvider, 4, &default_specs(), &opts()).unwrap();
    let pd = extract_prior(&d, &BuiltinProvider, 4, &default_specs(), &opts()).unwrap();
    assert!(pd.score(Attribute::Visibility) < px.score(Attribute::Visibility));
}

#[test]
fn extraction_deterministic_and_parallel_invariant() {
    let x = synth_scene(3, 48).unwrap();
    let a = extract_prior(&x, &BuiltinProvider, 4, &default_specs(), &opts()).unwrap();
    let b = extract_prior(&x, &BuiltinProvider, 4, &default_specs(), &opts()).unwrap();
    let par = ExtractOptions { parallelism: 4, ..ExtractOptions::default() };
    let c = extract_prior(&x, &BuiltinProvider, 4, &default_specs(), &par).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    for g in [1, 2, 3, 8] {
        let p = extract_prior(&x, &BuiltinProvider, g, &default_specs(), &opts()).unwrap();
        assert_eq!(p.map.len(), 3 * g * g);
        assert!(p.map.iter().chain(&p.global).all(|v| *v > 0.0 && *v < 1.0));
    }
}

struct Counting {
    calls: AtomicUsize,
    fail_at: Option<(Attribute, usize)>,
    seen: AtomicUsize,
}

impl PriorProvider for Counting {
    fn id(&self) -> &str {
        "counting"
    }
    fn assess(&self, image: &Image, spec: &AttributeSpec, scope: Scope) -> gpp_core::Result<AssessmentLogits> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some((a, k)) = self.fail_at {
            if a == spec.attribute && scope == Scope::Patch {
                if self.seen.fetch_add(1, Ordering::SeqCst) == k {
                    return Err(CoreError::Provider { provider: "counting".into(), retries: 3, detail: "boom".into() });
                }
            }
        }
        BuiltinProvider.assess(image, spec, scope)
    }
}

#[test]
fn provider_errors_name_attribute_and_patch() {
    let x = synth_scene(3, 32).unwrap();
    let p = Counting { calls: AtomicUsize::new(0), fail_at: Some((Attribute::Sharpness, 5)), seen: AtomicUsize::new(0) };
    let err = extract_prior(&x, &p, 4, &default_specs(), &opts()).unwrap_err().to_string();
    assert!(err.contains("sharpness") && err.contains("patch 5") && err.contains("boom"), "{err}");
}

#[test]
fn cache_round_trip_and_hits() {
    let dir = tempfile::tempdir().unwrap();
    let cache = PriorCache::open(dir.path()).unwrap();
    let x = synth_scene(21, 48).unwrap();
    let p = extract_prior(&x, &BuiltinProvider, 4, &default_specs(), &opts()).unwrap();
    let key = cache_key(&x, BUILTIN_ID, PROMPT_VERSION, 4);
    assert!(cache.get(&key).is_none());
    cache.put(&key, &p).unwrap();
    assert_eq!(cache.get(&key).unwrap(), p);
    assert_ne!(cache_key(&x, BUILTIN_ID, PROMPT_VERSION, 2), key);
    assert!(cache.get(&cache_key(&x, BUILTIN_ID, PROMPT_VERSION, 2)).is_none());

    let counting = Counting { calls: AtomicUsize::new(0), fail_at: None, seen: AtomicUsize::new(0) };
    let with_cache = ExtractOptions { cache: Some(&cache), ..ExtractOptions::default() };
    let first = extract_prior(&x, &counting, 4, &default_specs(), &with_cache).unwrap();
    let calls = counting.calls.load(Ordering::SeqCst);
    assert_eq!(calls, 3 * 17);
    let again = extract_prior(&x, &counting, 4, &default_specs(), &with_cache).unwrap();
    assert_eq!(counting.calls.load(Ordering::SeqCst), calls);
    assert_eq!(first, again);
}

#[test]
fn corrupt_cache_entry_is_a_miss() {
    let dir = tempfile::tempdir().unwrap();
    let cache = PriorCache::open(dir.path()).unwrap();
    let p = PerceptualPrior::neutral(2);
    cache.put("k", &p).unwrap();
    std::fs::write(cache.path_for("k"), "{\"version\":1, \"grid\":").unwrap();
    assert!(cache.get("k").is_none());
    let mut bad = serde_json::to_value(PriorFile::from(&p)).unwrap();
    bad["map"] = json!([[0.5], [0.5]]);
    std::fs::write(cache.path_for("k"), bad.to_string()).unwrap();
    assert!(cache.get("k").is_none());
    assert_eq!(cache.misses(), 2);
}

#[test]
fn sidecar_layout() {
    let x = synth_scene(2, 32).unwrap();
    let p = extract_prior(&x, &BuiltinProvider, 2, &default_specs(), &opts()).unwrap();
    let v = serde_json::to_value(PriorFile::from(&p)).unwrap();
    assert_eq!(v["version"], 1);
    assert_eq!(v["provider"], "builtin");
    assert_eq!(v["grid"], 2);
    assert_eq!(v["global"]["visibility"].as_f64().unwrap(), p.score(Attribute::Visibility));
    assert_eq!(v["map"][1][2].as_f64().unwrap(), p.map_at(Attribute::Visibility, 1, 0));
}

// ---- VLM path against an in-process HTTP server ----

fn pairs(v: &[(&str, f64)]) -> Vec<(String, f64)> {
    v.iter().map(|(t, l)| (t.to_string(), *l)).collect()
}

#[test]
fn logprob_parsing_examples() {
    let (p, n, d) = parse_logprobs(&pairs(&[(" good", -0.1), (" poor", -3.0), ("The", -4.0)]));
    assert!((p - 0.904837).abs() < 1e-6 && (n - 0.049787).abs() < 1e-6 && !d);
    let (p, n, _) = parse_logprobs(&pairs(&[("good", -0.2), ("fine", -5.0), ("x", -9.0)]));
    assert!((p - (-0.2f64).exp()).abs() < 1e-12);
    assert!((n - (-11.3f64).exp()).abs() < 1e-15);
    // case-insensitive, at most one leading space, best variant wins
    let (p, n, _) = parse_logprobs(&pairs(&[("Good", -1.0), (" GOOD", -0.5), ("  good", -0.01), ("POOR", -2.0)]));
    assert!((p - (-0.5f64).exp()).abs() < 1e-12 && (n - (-2.0f64).exp()).abs() < 1e-12);
    let (p, n, d) = parse_logprobs(&pairs(&[("The", -0.1), ("It", -2.0)]));
    assert!(d && p == n && (p - (-4.3f64).exp()).abs() < 1e-12);
}

struct MockServer {
    url: String,
    requests: Arc<Mutex<Vec<Value>>>,
}

/// Serves `responses` in order, one per connection; `None` closes the socket without a reply.
fn mock_server(responses: Vec<Option<String>>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = requests.clone();
    std::thread::spawn(move || {
        for resp in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            seen.lock().unwrap().push(serde_json::from_slice(&body).unwrap_or(Value::Null));
            let mut stream = stream;
            if let Some(text) = resp {
                let reply = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    text.len(),
                    text
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        }
    });
    MockServer { url, requests }
}

fn chat_response(top: Value) -> String {
    json!({"choices": [{"logprobs": {"content": [{"token": " good", "logprob": -0.1, "top_logprobs": top}]}}]}).to_string()
}

fn test_config(url: &str) -> VlmClientConfig {
    let mut cfg = VlmClientConfig::new(url);
    cfg.backoff = Duration::from_millis(5);
    cfg.timeout = Duration::from_secs(5);
    cfg.api_key = Some("secret".into());
    cfg
}

#[test]
fn vlm_request_and_response() {
    let top = json!([{"token": " good", "logprob": -0.1}, {"token": " poor", "logprob": -3.0}]);
    let server = mock_server(vec![Some(chat_response(top))]);
    let provider = VlmProvider::new(test_config(&server.url));
    let img = synth_scene(1, 16).unwrap();
    let spec = AttributeSpec::new(Attribute::Visibility);
    let r = provider.assess(&img, &spec, Scope::Patch).unwrap();
    assert!((r.p_pos - 0.904837).abs() < 1e-6 && (r.p_neg - 0.049787).abs() < 1e-6);
    assert!(r.raw.is_some() && !r.degraded);
    let req = server.requests.lock().unwrap()[0].clone();
    assert_eq!(req["max_tokens"], 1);
    assert_eq!(req["top_logprobs"], 20);
    assert_eq!(req["logprobs"], true);
    let content = &req["messages"][0]["content"];
    assert_eq!(content[0]["text"], build_prompt(&spec, Scope::Patch).unwrap());
    assert!(content[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
}

#[test]
fn vlm_retries_malformed_then_succeeds() {
    let top = json!({" Good": -0.7, " poor": -1.2});
    let server = mock_server(vec![Some("{\"nope\": 1}".into()), None, Some(chat_response(top))]);
    let provider = VlmProvider::new(test_config(&server.url));
    let r = provider
        .assess(&Image::filled(8, 8, [0.2; 3]), &AttributeSpec::new(Attribute::Contrast), Scope::Global)
        .unwrap();
    assert!((r.p_pos - (-0.7f64).exp()).abs() < 1e-12);
    assert_eq!(server.requests.lock().unwrap().len(), 3);
}

#[test]
fn vlm_unreachable_fails_after_three_retries() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut cfg = test_config(&format!("http://127.0.0.1:{port}/v1/chat/completions"));
    cfg.backoff = Duration::from_millis(20);
    let provider = VlmProvider::new(cfg);
    let start = Instant::now();
    let err = provider
        .assess(&Image::filled(8, 8, [0.2; 3]), &AttributeSpec::new(Attribute::Contrast), Scope::Global)
        .unwrap_err();
    // backoff 20 + 40 + 80 ms
    assert!(start.elapsed() >= Duration::from_millis(140));
    match err {
        CoreError::Provider { retries, .. } => assert_eq!(retries, 3),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn vlm_prior_through_extract() {
    let top = json!([{"token": "good", "logprob": -0.5}, {"token": "poor", "logprob": -1.5}]);
    let server = mock_server((0..15).map(|_| Some(chat_response(top.clone()))).collect());
    let provider = VlmProvider::new(test_config(&server.url));
    let img = synth_scene(4, 32).unwrap();
    let o = ExtractOptions { parallelism: 1, ..ExtractOptions::default() };
    let p = extract_prior(&img, &provider, 2, &default_specs(), &o).unwrap();
    let s = quantify((-0.5f64).exp(), (-1.5f64).exp(), 3.0).unwrap();
    assert!(p.map.iter().chain(&p.global).all(|v| (*v - s).abs() < 1e-12));
    assert_eq!(p.provider_id, "vlm:gpp-assessor");
}
