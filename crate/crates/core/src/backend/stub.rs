//! A scripted local HTTP server standing in for an inference endpoint.
//!
//! Each accepted request is answered with the next scripted reply (the last
//! one repeats) and its JSON body is kept for inspection.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubReply {
    pub status: u16,
    pub body: String,
}

impl StubReply {
    pub fn ok_text(text: &str) -> Self {
        Self {
            status: 200,
            body: serde_json::json!({ "text": text }).to_string(),
        }
    }

    pub fn status(status: u16, body: &str) -> Self {
        Self {
            status,
            body: body.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubRequest {
    pub path: String,
    pub authorization: Option<String>,
    pub body: String,
}

pub struct StubServer {
    url: String,
    requests: Arc<Mutex<Vec<StubRequest>>>,
    _handle: JoinHandle<()>,
}

impl StubServer {
    pub fn start(script: Vec<StubReply>) -> std::io::Result<Self> {
        assert!(!script.is_empty(), "stub script needs at least one reply");
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let url = format!("http://{}/generate", listener.local_addr()?);
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let Some(req) = read_request(&stream) else { continue };
                let reply = {
                    let mut seen = seen.lock().unwrap();
                    seen.push(req);
                    script[(seen.len() - 1).min(script.len() - 1)].clone()
                };
                let _ = write_reply(stream, &reply);
            }
        });
        Ok(Self {
            url,
            requests,
            _handle: handle,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.requests.lock().unwrap().clone()
    }
}

fn read_request(stream: &TcpStream) -> Option<StubRequest> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut length = 0usize;
    let mut authorization = None;
    loop {
        line.clear();
        reader.read_line(&mut line).ok()?;
        let header = line.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => length = value.trim().parse().ok()?,
                "authorization" => authorization = Some(value.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    Some(StubRequest {
        path,
        authorization,
        body: String::from_utf8(body).ok()?,
    })
}

fn write_reply(mut stream: TcpStream, reply: &StubReply) -> std::io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.body.len(),
        reply.body
    )?;
    stream.flush()
}
