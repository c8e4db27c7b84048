//! The HTTP detector client against an in-process mock service.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use dwellgrasp_core::orchestrator::{
    generate_dwell_trace, replay, DetectorConfig, SessionConfig, TraceGenOptions, TrialStatus,
};
use dwellgrasp_core::perception::{
    DetectRequest, DetectionError, DetectionProvider, ExternalConfig, ExternalProvider, View,
};
use dwellgrasp_core::simworld::{load_scene_file, project, Scene};
use serde_json::{json, Value};

mod support;

type Handler = dyn Fn(&Value) -> (u16, String) + Send + Sync;

struct Mock {
    url: String,
    requests: Arc<Mutex<Vec<Value>>>,
    max_in_flight: Arc<AtomicUsize>,
}

/// Serves every connection on its own thread so concurrent requests overlap.
fn mock(handler: impl Fn(&Value) -> (u16, String) + Send + Sync + 'static) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/detect", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let in_flight = Arc::new(AtomicUsize::new(0));
    let max_in_flight = Arc::new(AtomicUsize::new(0));
    let handler: Arc<Handler> = Arc::new(handler);
    {
        let requests = requests.clone();
        let max_in_flight = max_in_flight.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let (h, r, i, m) = (handler.clone(), requests.clone(), in_flight.clone(), max_in_flight.clone());
                std::thread::spawn(move || {
                    let now = i.fetch_add(1, Ordering::SeqCst) + 1;
                    m.fetch_max(now, Ordering::SeqCst);
                    let _ = serve_one(stream, &*h, &r);
                    i.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
    }
    Mock { url, requests, max_in_flight }
}

fn serve_one(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Value>>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let req: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    log.lock().unwrap().push(req.clone());
    let (status, reply) = handler(&req);
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    )?;
    stream.flush()
}

fn demo() -> Scene {
    load_scene_file(support::fixture("demo_scene.json")).unwrap()
}

fn provider(url: &str, timeout_ms: u64) -> ExternalProvider {
    ExternalProvider::new(ExternalConfig { url: url.into(), timeout_ms }).unwrap()
}

fn detect(p: &ExternalProvider, scene: &Scene, view: View) -> Result<dwellgrasp_core::perception::DetectionSet, DetectionError> {
    p.detect(&DetectRequest { view, scene, captured_at_ms: 42 })
}

/// Replies with the scene's exact boxes for the requested view.
fn truthful(scene: Scene) -> impl Fn(&Value) -> (u16, String) + Send + Sync {
    move |req| {
        let view = if req["view"] == "user" { View::UserView } else { View::RobotView };
        let boxes: Vec<Value> = project(&scene, view, 0)
            .boxes
            .iter()
            .map(|b| json!({"label": b.label, "confidence": 0.93, "u1": b.u1, "v1": b.v1, "u2": b.u2, "v2": b.v2}))
            .collect();
        (200, json!({ "boxes": boxes }).to_string())
    }
}

#[test]
fn parses_a_well_formed_reply() {
    let scene = demo();
    let m = mock(truthful(scene.clone()));
    let p = provider(&m.url, 2000);
    let set = detect(&p, &scene, View::RobotView).unwrap();
    assert_eq!(set.view, View::RobotView);
    assert_eq!(set.captured_at_ms, 42);
    assert_eq!(set.resolution, scene.robot_view.resolution);
    let ids: Vec<&str> = set.boxes.iter().map(|b| b.instance_id.as_str()).collect();
    assert_eq!(ids, ["robot-0", "robot-1", "robot-2", "robot-3"]);
    let truth = project(&scene, View::RobotView, 0);
    for (got, want) in set.boxes.iter().zip(&truth.boxes) {
        assert_eq!(got.label, want.label);
        assert_eq!((got.u1, got.v1, got.u2, got.v2), (want.u1, want.v1, want.u2, want.v2));
    }
    let req = m.requests.lock().unwrap()[0].clone();
    assert_eq!(req["view"], "robot");
    assert_eq!(req["width"], scene.robot_view.resolution.width_px);
    assert_eq!(req["height"], scene.robot_view.resolution.height_px);
    assert_eq!(req["scene_id"], "desk-demo");
    assert!(req["image_b64"].is_null());
}

#[test]
fn server_errors_are_retryable_and_client_errors_are_not() {
    let scene = demo();
    let m = mock(|_| (503, "busy".into()));
    let err = detect(&provider(&m.url, 2000), &scene, View::UserView).unwrap_err();
    assert!(err.is_retryable(), "{err}");

    let m = mock(|_| (404, "{}".into()));
    let err = detect(&provider(&m.url, 2000), &scene, View::UserView).unwrap_err();
    assert!(matches!(err, DetectionError::Protocol { .. }), "{err}");
    assert!(!err.is_retryable());
}

#[test]
fn malformed_replies_are_protocol_errors() {
    let scene = demo();
    let replies = [
        "not json".to_string(),
        json!({"detections": []}).to_string(),
        json!({"boxes": [{"label": "cup", "confidence": 0.9, "u1": 10, "v1": 10, "u2": 5, "v2": 20}]}).to_string(),
        json!({"boxes": [{"label": "cup", "confidence": 1.5, "u1": 1, "v1": 1, "u2": 5, "v2": 5}]}).to_string(),
        json!({"boxes": [{"label": "cup", "confidence": 0.9, "u1": 1, "v1": 1, "u2": 99999, "v2": 5}]}).to_string(),
    ];
    for reply in replies {
        let r = reply.clone();
        let m = mock(move |_| (200, r.clone()));
        let err = detect(&provider(&m.url, 2000), &scene, View::RobotView).unwrap_err();
        assert!(matches!(err, DetectionError::Protocol { view: View::RobotView, .. }), "{reply}: {err}");
    }
}

#[test]
fn slow_and_absent_services_are_retryable_unavailability() {
    let scene = demo();
    let m = mock(|_| {
        std::thread::sleep(Duration::from_millis(1500));
        (200, json!({"boxes": []}).to_string())
    });
    let start = Instant::now();
    let err = detect(&provider(&m.url, 200), &scene, View::UserView).unwrap_err();
    assert!(start.elapsed() < Duration::from_millis(1200));
    assert!(err.is_retryable(), "{err}");

    let closed = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/detect", closed.local_addr().unwrap());
    drop(closed);
    let err = detect(&provider(&url, 500), &scene, View::UserView).unwrap_err();
    assert!(err.is_retryable(), "{err}");
}

#[test]
fn rejects_bad_config() {
    for (url, timeout_ms) in [("ftp://x/detect", 100), ("http://x/detect", 0)] {
        let err = ExternalProvider::new(ExternalConfig { url: url.into(), timeout_ms }).unwrap_err();
        assert!(matches!(err, DetectionError::Config(_)));
    }
}

#[test]
fn user_and_robot_requests_are_in_flight_together() {
    let scene = demo();
    let inner = truthful(scene.clone());
    let m = mock(move |req| {
        std::thread::sleep(Duration::from_millis(300));
        inner(req)
    });
    let p = Arc::new(provider(&m.url, 5000));
    let start = Instant::now();
    std::thread::scope(|s| {
        for view in [View::UserView, View::RobotView] {
            let (p, scene) = (p.clone(), &scene);
            s.spawn(move || detect(&p, scene, view).unwrap());
        }
    });
    assert_eq!(m.max_in_flight.load(Ordering::SeqCst), 2);
    assert!(start.elapsed() < Duration::from_millis(550));
}

#[test]
fn session_selects_through_the_http_detector() {
    let scene = demo();
    let m = mock(truthful(scene.clone()));
    let config = SessionConfig {
        detector: DetectorConfig::External(ExternalConfig { url: m.url.clone(), timeout_ms: 2000 }),
        ..SessionConfig::default()
    };
    let opts = TraceGenOptions::for_session(&config.fixation, &config.robot.durations);
    let trace = generate_dwell_trace(&scene, &["mouse", "tape"], &opts).unwrap();
    let report = replay(&trace, scene, config).unwrap();
    let got: Vec<(TrialStatus, Option<String>)> =
        report.trials.iter().map(|t| (t.status, t.target_id.clone())).collect();
    // Instance ids from the service are positional: mouse is the fourth box, tape the third.
    assert_eq!(
        got,
        [
            (TrialStatus::Matched, Some("robot-3".into())),
            (TrialStatus::Matched, Some("robot-2".into())),
        ]
    );
    // The arm finds the objects by where the boxes are.
    let grasped: Vec<&str> = report
        .trials
        .iter()
        .map(|t| t.grasp.as_ref().unwrap().target_id.as_str())
        .collect();
    assert_eq!(grasped, ["mouse-1", "tape-1"]);
    assert!(report.trials.iter().all(|t| t.correct));
    assert_eq!(m.requests.lock().unwrap().len(), 4);
}
