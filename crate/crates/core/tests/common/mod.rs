#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

/// The entity list a GPT-4 prompt produced for the NFT query.
pub const NFT_QUERY: &str = "Why are non-fungible tokens (NFTs) so popular?";
pub const NFT_ENTITIES: [&str; 15] = [
    "Non-fungible token",
    "Cryptocurrency",
    "Bitcoin",
    "Ethereum",
    "Digital art",
    "Blockchain",
    "CryptoKitties",
    "Digital asset",
    "Cryptocurrency bubble",
    "Cryptocurrency exchange",
    "Initial coin offering",
    "Cryptocurrency wallet",
    "Smart contract",
    "Decentralized application",
    "Digital currency",
];

#[derive(Debug, Clone)]
pub struct Recorded {
    pub headers: Vec<String>,
    pub body: String,
}

impl Recorded {
    pub fn header(&self, name: &str) -> Option<String> {
        let prefix = format!("{}:", name.to_ascii_lowercase());
        self.headers
            .iter()
            .find(|h| h.to_ascii_lowercase().starts_with(&prefix))
            .map(|h| h[prefix.len()..].trim().to_string())
    }
}

/// A one-connection-per-response HTTP server replaying `(status, body)`
/// pairs in order, recording every request.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(responses: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!(
            "http://{}/v1/chat/completions",
            listener.local_addr().unwrap()
        );
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        let handle = thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = Vec::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap() == 0 {
                        break;
                    }
                    let line = line.trim_end().to_string();
                    if line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    headers.push(line);
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(Recorded {
                    headers,
                    body: String::from_utf8(buf).unwrap(),
                });
                let mut stream = stream;
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
                stream.flush().unwrap();
            }
        });
        Self {
            url,
            requests,
            handle: Some(handle),
        }
    }

    pub fn requests(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }

    pub fn join(mut self) -> Vec<Recorded> {
        self.handle.take().unwrap().join().unwrap();
        self.requests()
    }
}

pub fn chat_body(content: &str) -> String {
    serde_json::json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
    .to_string()
}

pub fn nft_completion() -> String {
    chat_body(&serde_json::to_string(&NFT_ENTITIES).unwrap())
}
