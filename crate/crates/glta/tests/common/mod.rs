#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use glta::config::RunConfig;

/// A quick synthetic run that exercises every stage in a few seconds.
pub fn small_config(work_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("synthetic.users", "12"),
        ("synthetic.items", "16"),
        ("graph.dim", "8"),
        ("graph.epochs", "10"),
        ("lm.d_model", "16"),
        ("lm.depth", "1"),
        ("lm.heads", "2"),
        ("lm.max_len", "96"),
        ("align.k", "3"),
        ("align.context", "5"),
        ("align.item_epochs", "4"),
        ("align.user_epochs", "4"),
        ("align.user_batch", "4"),
        ("eval.cutoffs", "1,3"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.run.work_dir = work_dir.to_path_buf();
    cfg
}

pub struct Request {
    pub headers: String,
    pub body: String,
}

/// Minimal HTTP/1.1 server answering requests in order with canned
/// `(status, body)` pairs; the last pair repeats once the list runs out.
pub struct MockServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
    pub requests: Arc<Mutex<Vec<Request>>>,
}

impl MockServer {
    pub fn start(replies: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let (h, r) = (hits.clone(), requests.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { return };
                let n = h.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    headers.push_str(&line);
                }
                let mut body = vec![0; len];
                let _ = reader.read_exact(&mut body);
                r.lock().unwrap().push(Request {
                    headers,
                    body: String::from_utf8_lossy(&body).into_owned(),
                });
                let (status, text) = &replies[n.min(replies.len() - 1)];
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Self {
            url,
            hits,
            requests,
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

pub fn chat_reply(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
        .to_string()
}
