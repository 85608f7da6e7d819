//! The remote upsampling client against an in-process mock service.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use brushwork::synth;
use brushwork::upsample::{Backend, JobState, UpsampleGateway, UpsampleRequest};
use brushwork::{Error, ImagePlane};

#[derive(Default)]
struct Mock {
    /// States reported by successive status polls; the last one repeats.
    script: Vec<&'static str>,
    polls: usize,
    result_fetches: usize,
    submitted: Option<String>,
    result_png: Vec<u8>,
}

struct Request {
    method: String,
    path: String,
    body: Vec<u8>,
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let (mut length, mut chunked) = (0usize, false);
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let lower = h.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            length = v.trim().parse().ok()?;
        }
        if lower.starts_with("transfer-encoding:") && lower.contains("chunked") {
            chunked = true;
        }
    }
    let mut body = Vec::new();
    if chunked {
        loop {
            let mut size = String::new();
            reader.read_line(&mut size).ok()?;
            let n = usize::from_str_radix(size.trim(), 16).ok()?;
            let mut chunk = vec![0; n + 2];
            reader.read_exact(&mut chunk).ok()?;
            if n == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..n]);
        }
    } else {
        body.resize(length, 0);
        reader.read_exact(&mut body).ok()?;
    }
    Some(Request { method, path, body })
}

fn respond(stream: &mut TcpStream, status: &str, content_type: &str, body: &[u8]) {
    let head = format!(
        "HTTP/1.1 {status}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    let _ = stream.write_all(head.as_bytes());
    let _ = stream.write_all(body);
}

fn spawn_mock(mock: Arc<Mutex<Mock>>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let Some(req) = read_request(&mut stream) else { continue };
            let mut m = mock.lock().unwrap();
            match (req.method.as_str(), req.path.as_str()) {
                ("POST", "/jobs") => {
                    m.submitted = Some(String::from_utf8_lossy(&req.body).into_owned());
                    respond(&mut stream, "201 Created", "application/json", br#"{"id":"r1","state":"queued"}"#);
                }
                ("GET", "/jobs/r1") => {
                    let state = m.script[m.polls.min(m.script.len() - 1)];
                    m.polls += 1;
                    let body = format!(r#"{{"id":"r1","state":"{state}"}}"#);
                    respond(&mut stream, "200 OK", "application/json", body.as_bytes());
                }
                ("GET", "/jobs/r1/result") => {
                    m.result_fetches += 1;
                    let png = m.result_png.clone();
                    respond(&mut stream, "200 OK", "image/png", &png);
                }
                _ => respond(&mut stream, "404 Not Found", "text/plain", b"no such route"),
            }
        }
    });
    format!("http://{addr}")
}

fn request() -> UpsampleRequest {
    UpsampleRequest {
        stylized: synth::scene(24, 32, 1),
        style: synth::brush_strokes(24, 24, 2),
        target_scale: 2.0,
    }
}

#[test]
fn remote_job_runs_to_done_and_fetches_once() {
    let result = synth::scene(48, 64, 9);
    let mock = Arc::new(Mutex::new(Mock {
        script: vec!["running", "done"],
        result_png: result.encode_png().unwrap(),
        ..Default::default()
    }));
    let endpoint = spawn_mock(mock.clone());
    let dir = tempfile::tempdir().unwrap();
    let gw = UpsampleGateway::with_endpoint(dir.path(), Some(format!("{endpoint}/")));

    let job = gw.submit(&request(), Backend::Remote).unwrap();
    assert_eq!(job.state, JobState::Queued);
    let body = mock.lock().unwrap().submitted.clone().unwrap();
    for field in ["name=\"stylized\"", "name=\"style\"", "name=\"scale\""] {
        assert!(body.contains(field), "missing multipart field {field}");
    }

    assert_eq!(gw.poll(&job.job_id).unwrap().state, JobState::Running);
    let done = gw.poll(&job.job_id).unwrap();
    assert_eq!(done.state, JobState::Done);
    for _ in 0..3 {
        assert_eq!(gw.poll(&job.job_id).unwrap(), done);
    }
    let m = mock.lock().unwrap();
    assert_eq!(m.result_fetches, 1);
    assert_eq!(m.polls, 2);
    drop(m);

    let path = done.result_path.clone().unwrap();
    assert!(path.starts_with(dir.path()));
    let back = gw.result(&job.job_id).unwrap();
    assert_eq!(back, ImagePlane::decode(&result.encode_png().unwrap()).unwrap());
}

#[test]
fn remote_state_never_moves_backwards() {
    let mock = Arc::new(Mutex::new(Mock {
        script: vec!["running", "queued", "failed"],
        ..Default::default()
    }));
    let endpoint = spawn_mock(mock);
    let dir = tempfile::tempdir().unwrap();
    let gw = UpsampleGateway::with_endpoint(dir.path(), Some(endpoint));
    let job = gw.submit(&request(), Backend::Remote).unwrap();
    assert_eq!(gw.poll(&job.job_id).unwrap().state, JobState::Running);
    assert_eq!(gw.poll(&job.job_id).unwrap().state, JobState::Running);
    assert_eq!(gw.poll(&job.job_id).unwrap().state, JobState::Failed);
    assert!(gw.result(&job.job_id).is_err());
}

#[test]
fn unreachable_service_is_a_transport_error() {
    // Bind then drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let gw = UpsampleGateway::with_endpoint(dir.path(), Some(format!("http://127.0.0.1:{port}")));
    match gw.submit(&request(), Backend::Remote) {
        Err(e @ Error::Transport { .. }) => assert!(e.to_string().contains("retry")),
        other => panic!("expected a transport error, got {other:?}"),
    }
}

#[test]
fn run_polls_until_terminal() {
    let result = synth::scene(48, 64, 3);
    let mock = Arc::new(Mutex::new(Mock {
        script: vec!["queued", "running", "done"],
        result_png: result.encode_png().unwrap(),
        ..Default::default()
    }));
    let endpoint = spawn_mock(mock);
    let dir = tempfile::tempdir().unwrap();
    let gw = UpsampleGateway::with_endpoint(dir.path(), Some(endpoint));
    let (job, img) = gw.run(&request(), Backend::Remote, Duration::from_millis(5)).unwrap();
    assert_eq!(job.state, JobState::Done);
    assert_eq!(img.extent(), (48, 64));
}
