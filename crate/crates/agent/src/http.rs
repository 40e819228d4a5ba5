//! Minimal HTTP/1.1 transport with byte-counting streams.
//!
//! Hand-rolled on purpose: the benchmark needs exact control over what
//! crosses the wire and when, including per-request byte counts and a
//! plain synchronous request/response cycle whose phases can be
//! timestamped without an executor in between. Servers speak either
//! plaintext TCP or TLS via a pluggable stream.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("malformed HTTP message: {0}")]
    Malformed(String),
    #[error("unsupported uri: {0}")]
    BadUri(String),
    #[error("tls failure: {0}")]
    Tls(String),
}

pub const READ_TIMEOUT: Duration = Duration::from_secs(30);
const MAX_HEADER_BYTES: usize = 16 * 1024;
const MAX_BODY_BYTES: usize = 128 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Request {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Response {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Response {
    pub fn json(status: u16, value: &serde_json::Value) -> Response {
        Response {
            status,
            content_type: "application/json".into(),
            body: serde_json::to_vec(value).expect("JSON value serializes"),
        }
    }

    pub fn error(status: u16, message: &str) -> Response {
        Response::json(status, &serde_json::json!({ "error": message }))
    }

    fn reason(&self) -> &'static str {
        match self.status {
            200 => "OK",
            202 => "Accepted",
            400 => "Bad Request",
            404 => "Not Found",
            409 => "Conflict",
            500 => "Internal Server Error",
            502 => "Bad Gateway",
            _ => "Unknown",
        }
    }
}

/// Shared byte counters observed by a [`CountingStream`].
#[derive(Debug, Default)]
pub struct ByteCounters {
    pub read: AtomicU64,
    pub written: AtomicU64,
}

/// Passthrough stream recording how many bytes flow each way.
pub struct CountingStream<S> {
    inner: S,
    counters: Arc<ByteCounters>,
}

impl<S> CountingStream<S> {
    pub fn new(inner: S, counters: Arc<ByteCounters>) -> CountingStream<S> {
        CountingStream { inner, counters }
    }

    pub fn get_ref(&self) -> &S {
        &self.inner
    }
}

impl<S: Read> Read for CountingStream<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.counters.read.fetch_add(n as u64, Ordering::Relaxed);
        Ok(n)
    }
}

impl<S: Write> Write for CountingStream<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.counters.written.fetch_add(n as u64, Ordering::Relaxed);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Buffered reader keeping leftovers between keep-alive requests.
pub struct StreamBuf<S> {
    pub stream: S,
    buf: Vec<u8>,
}

impl<S: Read + Write> StreamBuf<S> {
    pub fn new(stream: S) -> StreamBuf<S> {
        StreamBuf {
            stream,
            buf: Vec::new(),
        }
    }

    fn fill(&mut self) -> io::Result<usize> {
        let mut chunk = [0u8; 8192];
        let n = self.stream.read(&mut chunk)?;
        self.buf.extend_from_slice(&chunk[..n]);
        Ok(n)
    }

    /// Reads one HTTP message (request or response head + body). Returns
    /// `None` on clean EOF at a message boundary.
    fn read_message(&mut self) -> Result<Option<(String, Vec<(String, String)>, Vec<u8>)>, HttpError> {
        let header_end = loop {
            if let Some(pos) = find_subslice(&self.buf, b"\r\n\r\n") {
                break pos;
            }
            if self.buf.len() > MAX_HEADER_BYTES {
                return Err(HttpError::Malformed("header block too large".into()));
            }
            match self.fill() {
                Ok(0) => {
                    if self.buf.is_empty() {
                        return Ok(None);
                    }
                    return Err(HttpError::Malformed("EOF inside header block".into()));
                }
                Ok(_) => {}
                Err(e) => {
                    if self.buf.is_empty()
                        && matches!(e.kind(), io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset)
                    {
                        return Ok(None);
                    }
                    return Err(HttpError::Io(e));
                }
            }
        };

        let head = String::from_utf8(self.buf[..header_end].to_vec())
            .map_err(|_| HttpError::Malformed("header block is not UTF-8".into()))?;
        self.buf.drain(..header_end + 4);

        let mut lines = head.split("\r\n");
        let start_line = lines
            .next()
            .ok_or_else(|| HttpError::Malformed("empty start line".into()))?
            .to_owned();
        let mut headers = Vec::new();
        for line in lines {
            let (name, value) = line
                .split_once(':')
                .ok_or_else(|| HttpError::Malformed(format!("bad header line: {line}")))?;
            headers.push((name.trim().to_owned(), value.trim().to_owned()));
        }

        let content_length: usize = headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
            .map(|(_, v)| v.parse().map_err(|_| HttpError::Malformed("bad content-length".into())))
            .transpose()?
            .unwrap_or(0);
        if content_length > MAX_BODY_BYTES {
            return Err(HttpError::Malformed("body too large".into()));
        }

        while self.buf.len() < content_length {
            if self.fill()? == 0 {
                return Err(HttpError::Malformed("EOF inside body".into()));
            }
        }
        let body: Vec<u8> = self.buf.drain(..content_length).collect();
        Ok(Some((start_line, headers, body)))
    }

    pub fn read_request(&mut self) -> Result<Option<Request>, HttpError> {
        let Some((start, headers, body)) = self.read_message()? else {
            return Ok(None);
        };
        let mut parts = start.split_whitespace();
        let method = parts
            .next()
            .ok_or_else(|| HttpError::Malformed("missing method".into()))?
            .to_owned();
        let path = parts
            .next()
            .ok_or_else(|| HttpError::Malformed("missing path".into()))?
            .to_owned();
        Ok(Some(Request {
            method,
            path,
            headers,
            body,
        }))
    }

    pub fn read_response(&mut self) -> Result<(u16, Vec<u8>), HttpError> {
        let Some((start, _headers, body)) = self.read_message()? else {
            return Err(HttpError::Malformed("connection closed before response".into()));
        };
        let status = start
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| HttpError::Malformed(format!("bad status line: {start}")))?;
        Ok((status, body))
    }

    pub fn write_response(&mut self, response: &Response) -> Result<(), HttpError> {
        let head = format!(
            "HTTP/1.1 {} {}\r\ncontent-type: {}\r\ncontent-length: {}\r\n\r\n",
            response.status,
            response.reason(),
            response.content_type,
            response.body.len()
        );
        self.stream.write_all(head.as_bytes())?;
        self.stream.write_all(&response.body)?;
        self.stream.flush()?;
        Ok(())
    }

    /// Writes a request and reads the response. `on_body_write` is called
    /// immediately before the body bytes hit the stream, which is the
    /// honest "wire transmission begins" timestamp hook.
    pub fn round_trip(
        &mut self,
        method: &str,
        path: &str,
        host: &str,
        content_type: &str,
        headers: &[(String, String)],
        body: &[u8],
        mut on_body_write: impl FnMut(),
    ) -> Result<(u16, Vec<u8>), HttpError> {
        let mut head = format!(
            "{method} {path} HTTP/1.1\r\nhost: {host}\r\ncontent-type: {content_type}\r\ncontent-length: {}\r\n",
            body.len()
        );
        for (name, value) in headers {
            head.push_str(name);
            head.push_str(": ");
            head.push_str(value);
            head.push_str("\r\n");
        }
        head.push_str("\r\n");
        self.stream.write_all(head.as_bytes())?;
        on_body_write();
        self.stream.write_all(body)?;
        self.stream.flush()?;
        self.read_response()
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|window| window == needle)
}

pub fn parse_http_uri(uri: &str) -> Result<(String, String), HttpError> {
    let rest = uri
        .strip_prefix("http://")
        .or_else(|| uri.strip_prefix("https://"))
        .ok_or_else(|| HttpError::BadUri(uri.to_owned()))?;
    let (authority, path) = match rest.find('/') {
        Some(idx) => (&rest[..idx], &rest[idx..]),
        None => (rest, "/"),
    };
    if authority.is_empty() {
        return Err(HttpError::BadUri(uri.to_owned()));
    }
    Ok((authority.to_owned(), path.to_owned()))
}

/// One-shot plaintext POST over a fresh connection. Returns status, body,
/// and the byte count written for the request body.
pub fn post(
    uri: &str,
    content_type: &str,
    headers: &[(String, String)],
    body: &[u8],
    mut at_body_write: impl FnMut(),
) -> Result<(u16, Vec<u8>, u64), HttpError> {
    let (authority, path) = parse_http_uri(uri)?;
    let stream = TcpStream::connect(&authority)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(READ_TIMEOUT))?;
    let counters = Arc::new(ByteCounters::default());
    let mut buf = StreamBuf::new(CountingStream::new(stream, counters.clone()));
    let mut body_written = 0u64;
    let (status, response_body) = buf.round_trip(
        "POST",
        &path,
        &authority,
        content_type,
        headers,
        body,
        || {
            body_written = counters.written.load(Ordering::Relaxed);
            at_body_write();
        },
    )?;
    let total_written = counters.written.load(Ordering::Relaxed);
    Ok((status, response_body, total_written - body_written))
}

pub fn get(uri: &str) -> Result<(u16, Vec<u8>), HttpError> {
    let (authority, path) = parse_http_uri(uri)?;
    let stream = TcpStream::connect(&authority)?;
    stream.set_read_timeout(Some(READ_TIMEOUT))?;
    let mut buf = StreamBuf::new(stream);
    buf.round_trip("GET", &path, &authority, "application/json", &[], b"", || {})
}

type Handler = Arc<dyn Fn(Request) -> Response + Send + Sync>;

/// Threaded accept loop over plaintext or TLS streams.
pub struct Server {
    local_addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn start(
        listener: TcpListener,
        tls: Option<Arc<rustls::ServerConfig>>,
        handler: Handler,
    ) -> io::Result<Server> {
        let local_addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let accept_shutdown = shutdown.clone();
        let accept_thread = std::thread::Builder::new()
            .name(format!("http-accept-{local_addr}"))
            .spawn(move || {
                for incoming in listener.incoming() {
                    if accept_shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = incoming else { continue };
                    let handler = handler.clone();
                    let tls = tls.clone();
                    let conn_shutdown = accept_shutdown.clone();
                    std::thread::spawn(move || {
                        let _ = serve_connection(stream, tls, handler, conn_shutdown);
                    });
                }
            })?;
        Ok(Server {
            local_addr,
            shutdown,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stop(&mut self) {
        if self.accept_thread.is_none() {
            return;
        }
        self.shutdown.store(true, Ordering::SeqCst);
        // Unblock the accept call.
        let _ = TcpStream::connect(self.local_addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_connection(
    stream: TcpStream,
    tls: Option<Arc<rustls::ServerConfig>>,
    handler: Handler,
    shutdown: Arc<AtomicBool>,
) -> Result<(), HttpError> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(READ_TIMEOUT))?;
    match tls {
        None => serve_requests(StreamBuf::new(stream), handler, shutdown),
        Some(config) => {
            let conn = rustls::ServerConnection::new(config)
                .map_err(|e| HttpError::Tls(e.to_string()))?;
            let tls_stream = rustls::StreamOwned::new(conn, stream);
            serve_requests(StreamBuf::new(tls_stream), handler, shutdown)
        }
    }
}

fn serve_requests<S: Read + Write>(
    mut buf: StreamBuf<S>,
    handler: Handler,
    shutdown: Arc<AtomicBool>,
) -> Result<(), HttpError> {
    while !shutdown.load(Ordering::SeqCst) {
        let Some(request) = buf.read_request()? else {
            break;
        };
        let response = handler(request);
        buf.write_response(&response)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uri_parsing() {
        let (authority, path) = parse_http_uri("http://127.0.0.1:8080/didcomm").unwrap();
        assert_eq!(authority, "127.0.0.1:8080");
        assert_eq!(path, "/didcomm");
        let (_, path) = parse_http_uri("http://127.0.0.1:8080").unwrap();
        assert_eq!(path, "/");
        assert!(parse_http_uri("ftp://x").is_err());
    }

    #[test]
    fn server_round_trip_and_keep_alive() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let mut server = Server::start(
            listener,
            None,
            Arc::new(|req: Request| {
                assert_eq!(req.method, "POST");
                let mut body = b"echo:".to_vec();
                body.extend_from_slice(&req.body);
                Response {
                    status: 200,
                    content_type: "application/octet-stream".into(),
                    body,
                }
            }),
        )
        .unwrap();

        let uri = format!("http://{addr}/x");
        for payload in [&b"one"[..], &b"two"[..]] {
            let (status, body, written) =
                post(&uri, "application/octet-stream", &[], payload, || {}).unwrap();
            assert_eq!(status, 200);
            assert_eq!(&body[..5], b"echo:");
            assert_eq!(&body[5..], payload);
            assert_eq!(written, payload.len() as u64);
        }
        server.stop();
    }

    #[test]
    fn request_headers_are_visible() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let _server = Server::start(
            listener,
            None,
            Arc::new(|req: Request| {
                let v = req.header("x-didnet-sender").unwrap_or("none").to_owned();
                Response {
                    status: 200,
                    content_type: "text/plain".into(),
                    body: v.into_bytes(),
                }
            }),
        )
        .unwrap();
        let (status, body, _) = post(
            &format!("http://{addr}/x"),
            "text/plain",
            &[("x-didnet-sender".into(), "did:sba:abc".into())],
            b"",
            || {},
        )
        .unwrap();
        assert_eq!(status, 200);
        assert_eq!(body, b"did:sba:abc");
    }
}
