use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use lexadapt::clients::{ClientError, Embedder, GenerationRequest, Generator, HttpEmbedder, HttpGenerator};

/// Serves one request with `body` after `delay`, returning the URL and the
/// request body the server received.
fn serve_once(body: &'static str, delay: Duration) -> (String, thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut req = vec![0; len];
        reader.read_exact(&mut req).unwrap();
        thread::sleep(delay);
        let mut stream = stream;
        let _ = write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        String::from_utf8(req).unwrap()
    });
    (url, handle)
}

#[test]
fn generator_round_trip() {
    let (url, server) = serve_once(r#"{"text":"被告人张某犯盗窃罪"}"#, Duration::ZERO);
    let gen = HttpGenerator::new(url, 2000);
    let mut req = GenerationRequest::new("问题");
    req.max_tokens = 64;
    assert_eq!(gen.generate(&req).unwrap(), "被告人张某犯盗窃罪");
    let sent: serde_json::Value = serde_json::from_str(&server.join().unwrap()).unwrap();
    assert_eq!(sent["prompt"], "问题");
    assert_eq!(sent["max_tokens"], 64);
}

#[test]
fn embedder_normalizes_reply() {
    let (url, server) = serve_once(r#"{"embedding":[3.0,4.0]}"#, Duration::ZERO);
    let v = HttpEmbedder::new(url, 2000).embed("罚金").unwrap();
    assert_eq!(v.values(), &[0.6, 0.8]);
    server.join().unwrap();
}

#[test]
fn malformed_reply() {
    let (url, server) = serve_once(r#"{"answer":1}"#, Duration::ZERO);
    let err = HttpGenerator::new(url, 2000).generate(&GenerationRequest::new("x")).unwrap_err();
    assert!(matches!(err, ClientError::MalformedResponse(_)), "{err:?}");
    server.join().unwrap();
}

#[test]
fn zero_embedding_is_malformed() {
    let (url, server) = serve_once(r#"{"embedding":[0.0,0.0]}"#, Duration::ZERO);
    let err = HttpEmbedder::new(url, 2000).embed("x").unwrap_err();
    assert!(matches!(err, ClientError::MalformedResponse(_)), "{err:?}");
    server.join().unwrap();
}

#[test]
fn slow_endpoint_times_out() {
    let (url, server) = serve_once(r#"{"text":"late"}"#, Duration::from_millis(1500));
    let err = HttpGenerator::new(url, 200).generate(&GenerationRequest::new("x")).unwrap_err();
    assert!(matches!(err, ClientError::Timeout), "{err:?}");
    server.join().unwrap();
}

#[test]
fn invalid_request_never_sent() {
    let mut req = GenerationRequest::new("x");
    req.max_tokens = 0;
    let err = HttpGenerator::new("http://127.0.0.1:9/unused", 100).generate(&req).unwrap_err();
    assert!(matches!(err, ClientError::InvalidRequest(_)));
}
