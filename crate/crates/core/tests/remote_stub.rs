use base64::Engine as _;
use grounding::backend::stub::{StubReply, StubServer};
use grounding::backend::{Backend, BackendError, GenerationRequest, Prompt, RemoteBackend, RemoteConfig};
use grounding::frames::{FrameLibrary, FrameSource};
use grounding::orchestrator::{Grounder, GroundingConfig, Query};
use grounding::promptseq::{build_coarse_sequence, build_fine_sequence, ContentPart};
use grounding::timeline::make_grid;
use serde_json::Value;

struct Pixels;

impl FrameLibrary for Pixels {
    fn source(&self, frame: usize) -> FrameSource {
        FrameSource::Inline(format!("frame-{frame}").into_bytes())
    }
}

fn backend(url: &str) -> RemoteBackend {
    RemoteBackend::new(RemoteConfig {
        url: url.to_string(),
        api_key: Some("secret".into()),
        backoff_ms: 1,
        ..Default::default()
    })
    .unwrap()
}

/// Flattens a user turn to text with an `<image:...>` marker per frame.
fn transcript_from_wire(body: &str) -> String {
    let v: Value = serde_json::from_str(body).unwrap();
    let user = v["messages"].as_array().unwrap().last().unwrap();
    user["content"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| match p["type"].as_str().unwrap() {
            "text" => p["text"].as_str().unwrap().to_string(),
            "image" => format!("<image:{}>", p["data"].as_str().unwrap()),
            other => panic!("unexpected part {other}"),
        })
        .collect()
}

fn transcript_from_parts(parts: &[ContentPart]) -> String {
    let b64 = base64::engine::general_purpose::STANDARD;
    parts
        .iter()
        .map(|p| match p {
            ContentPart::Text { text } => text.clone(),
            ContentPart::Frame(f) => format!("<image:{}>", b64.encode(format!("frame-{}", f.frame))),
        })
        .collect()
}

#[test]
fn wire_text_matches_rendering() {
    let server = StubServer::start(vec![StubReply::ok_text("From 1.0 seconds to 2.0 seconds")]).unwrap();
    let b = backend(server.url());
    let g = make_grid(40.0, 2.0).unwrap();
    let frames: Vec<usize> = (0..g.len()).collect();

    let fine = build_fine_sequence(&g, &frames, "a man waves", 64).unwrap();
    let (coarse, _) = build_coarse_sequence(&g, &frames, 32, "a man waves", 64).unwrap();
    for seq in [fine, coarse] {
        let parts = seq.content_parts();
        let req = GenerationRequest::new(Prompt::Grounding(seq.clone()), &Pixels);
        let r = b.complete(&req).unwrap();
        assert_eq!(r.text, "From 1.0 seconds to 2.0 seconds");
        let wire = server.requests().last().unwrap().clone();
        assert_eq!(transcript_from_wire(&wire.body), transcript_from_parts(&parts));
        assert_eq!(wire.authorization.as_deref(), Some("Bearer secret"));
        let v: Value = serde_json::from_str(&wire.body).unwrap();
        assert_eq!(v["messages"][0]["content"][0]["text"], seq.system_text.as_str());
        assert_eq!(v["max_tokens"], 128);
    }
}

#[test]
fn retries_on_5xx_only() {
    let server = StubServer::start(vec![
        StubReply::status(503, "busy"),
        StubReply::status(500, "oops"),
        StubReply::ok_text("fine"),
    ])
    .unwrap();
    let g = make_grid(5.0, 2.0).unwrap();
    let seq = build_fine_sequence(&g, &[0, 1, 2], "q", 4).unwrap();
    let req = GenerationRequest::new(Prompt::Grounding(seq), &Pixels);
    assert_eq!(backend(server.url()).complete(&req).unwrap().text, "fine");
    assert_eq!(server.requests().len(), 3);
    let bodies: Vec<String> = server.requests().into_iter().map(|r| r.body).collect();
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));

    let exhausted = StubServer::start(vec![StubReply::status(502, "down")]).unwrap();
    let err = backend(exhausted.url()).complete(&req).unwrap_err();
    assert!(matches!(err, BackendError::Status { code: 502, .. }));
    assert_eq!(exhausted.requests().len(), 3);

    let malformed = StubServer::start(vec![StubReply::status(200, "<html>not json</html>")]).unwrap();
    let err = backend(malformed.url()).complete(&req).unwrap_err();
    assert!(matches!(err, BackendError::MalformedResponse(_)));
    assert_eq!(malformed.requests().len(), 1);

    let client_error = StubServer::start(vec![StubReply::status(400, "bad")]).unwrap();
    assert!(backend(client_error.url()).complete(&req).is_err());
    assert_eq!(client_error.requests().len(), 1);
}

#[test]
fn unparsable_answer_is_not_retried() {
    let server = StubServer::start(vec![StubReply::ok_text("I cannot tell.")]).unwrap();
    let b = backend(server.url());
    let gr = Grounder::new(&b, &Pixels, GroundingConfig::default()).unwrap();
    let r = gr.ground(&make_grid(20.0, 2.0).unwrap(), &Query::new("q")).unwrap();
    assert!(r.fallback_used);
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let b = RemoteBackend::new(RemoteConfig {
        url: format!("http://127.0.0.1:{port}/"),
        backoff_ms: 1,
        max_retries: 1,
        ..Default::default()
    })
    .unwrap();
    let g = make_grid(5.0, 2.0).unwrap();
    let seq = build_fine_sequence(&g, &[0], "q", 4).unwrap();
    let err = b.complete(&GenerationRequest::new(Prompt::Grounding(seq), &Pixels)).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err:?}");
}
