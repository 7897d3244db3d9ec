//! Golden transcript for the worker protocol.
//!
//! `fixtures/golden_transcript.ndjson` holds one exchange per line:
//! `{"request": <raw line>, "response": <value>, "check": <kind>}`. Kinds:
//! `exact` responses must match in full for the fixture scene, `schema`
//! responses depend on the model and only their keys, id and value types
//! are binding, and `error` responses must carry the request id and an
//! `error` string. Set `GOLDEN_UPDATE=1` to regenerate the fixture from
//! the synthetic oracle.

use std::fs;
use std::io::{BufRead, Cursor, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use entity_refine::backend::external::{serve, ExternalProvider};
use entity_refine::backend::oracle::SyntheticOracle;
use entity_refine::backend::scene::SceneSpec;
use entity_refine::backend::{segment, PointPrompt, Segmenter};
use serde_json::{json, Value};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn scene() -> SceneSpec {
    serde_json::from_str(&fs::read_to_string(fixture("golden_scene.json")).unwrap()).unwrap()
}

/// Request lines and the check kind of each exchange.
fn script() -> Vec<(String, &'static str)> {
    let line = |v: Value| v.to_string();
    vec![
        (line(json!({"id": 1, "op": "segment", "points": [[4.5, 4.5]]})), "error"),
        (line(json!({"id": 2, "op": "init", "image_path": "golden_image.png"})), "exact"),
        (line(json!({"id": 3, "op": "segment", "points": [[5.5, 5.5], [5.5, 10.5], [14.5, 1.5]]})), "schema"),
        (line(json!({"id": 4, "op": "embed"})), "schema"),
        (line(json!({"id": 5, "op": "segment", "points": [[40.0, 2.0]]})), "error"),
        (line(json!({"id": 6, "op": "resize"})), "error"),
        ("{\"id\": 7, \"op\": ".to_string(), "error"),
        (line(json!({"id": 8, "op": "segment", "points": []})), "exact"),
    ]
}

fn run_worker(requests: &[String]) -> Vec<Value> {
    let input = requests.join("\n") + "\n";
    let mut out = Vec::new();
    let spec = scene();
    serve(Cursor::new(input), &mut out, |_| Ok(Box::new(SyntheticOracle::new(spec.clone())?) as Box<dyn Segmenter>))
        .unwrap();
    out.lines().map(|l| serde_json::from_str(&l.unwrap()).unwrap()).collect()
}

fn load() -> Vec<Value> {
    let path = fixture("golden_transcript.ndjson");
    if std::env::var_os("GOLDEN_UPDATE").is_some() {
        let script = script();
        let requests: Vec<String> = script.iter().map(|(r, _)| r.clone()).collect();
        let responses = run_worker(&requests);
        let mut f = fs::File::create(&path).unwrap();
        for ((req, check), resp) in script.iter().zip(responses) {
            writeln!(f, "{}", json!({"request": req, "response": resp, "check": check})).unwrap();
        }
        let spec = scene();
        let oracle = SyntheticOracle::new(spec).unwrap();
        oracle.image().save_png(&fixture("golden_image.png")).unwrap();
    }
    fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(n) if n.is_u64() || n.is_i64() => "int",
        Value::Number(_) => "float",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Same keys and value kinds at every depth; arrays compare their first
/// element only. Integers satisfy float slots.
fn same_schema(want: &Value, got: &Value) -> bool {
    match (want, got) {
        (Value::Object(a), Value::Object(b)) => {
            a.len() == b.len() && a.iter().all(|(k, v)| b.get(k).is_some_and(|w| same_schema(v, w)))
        }
        (Value::Array(a), Value::Array(b)) => match (a.first(), b.first()) {
            (Some(x), Some(y)) => same_schema(x, y),
            _ => true,
        },
        _ => kind(want) == kind(got) || (kind(want) == "float" && kind(got) == "int"),
    }
}

/// Checks one response against its golden record.
fn conforms(golden: &Value, got: &Value) -> Result<(), String> {
    let want = &golden["response"];
    let request: Value = serde_json::from_str(golden["request"].as_str().unwrap()).unwrap_or(Value::Null);
    let id = request.get("id").cloned().unwrap_or(Value::Null);
    match golden["check"].as_str().unwrap() {
        "exact" if want == got => Ok(()),
        "schema" if got["id"] == id && same_schema(want, got) => Ok(()),
        "error" if got["error"].is_string() && want["error"].is_string() && got["id"] == want["id"] => Ok(()),
        other => Err(format!("{other} check failed:\n want {want}\n  got {got}")),
    }
}

#[test]
fn transcript_is_well_formed() {
    let golden = load();
    assert_eq!(golden.len(), script().len());
    for (g, (req, check)) in golden.iter().zip(script()) {
        assert_eq!(g["request"].as_str().unwrap(), req);
        assert_eq!(g["check"].as_str().unwrap(), check);
    }
    // malformed JSON cannot echo an id
    assert_eq!(golden[6]["response"]["id"], Value::Null);
    assert_eq!(golden[0]["response"]["id"], json!(1));
    assert!(fixture("golden_image.png").exists());
}

#[test]
fn worker_replays_transcript() {
    let golden = load();
    let requests: Vec<String> = golden.iter().map(|g| g["request"].as_str().unwrap().to_string()).collect();
    let responses = run_worker(&requests);
    assert_eq!(responses.len(), golden.len());
    for (i, (g, got)) in golden.iter().zip(&responses).enumerate() {
        conforms(g, got).unwrap_or_else(|e| panic!("exchange {i}: {e}"));
        // the oracle is the reference worker, so it must match in full
        if g["check"] != "error" {
            assert_eq!(&g["response"], got, "exchange {i}");
        }
    }
}

#[test]
fn schema_check_rejects_missing_keys() {
    let golden = load();
    let mut bad = golden[3]["response"].clone();
    bad["features"].as_object_mut().unwrap().remove("data_b64");
    assert!(conforms(&golden[3], &bad).is_err());
    let mut wrong_id = golden[2]["response"].clone();
    wrong_id["id"] = json!(99);
    assert!(conforms(&golden[2], &wrong_id).is_err());
}

#[derive(Clone, Default)]
struct Capture(Arc<Mutex<Vec<u8>>>);

impl Write for Capture {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// The client renumbers from 1 and skips the error exchanges, so replay the
/// golden init, segment and embed responses under ids 1, 2, 3.
#[test]
fn client_speaks_transcript() {
    let golden = load();
    let picks = [1usize, 2, 3];
    let mut replies = String::new();
    for (n, &i) in picks.iter().enumerate() {
        let mut r = golden[i]["response"].clone();
        r["id"] = json!(n + 1);
        replies.push_str(&format!("{r}\n"));
    }
    let sent = Capture::default();
    let mut client = ExternalProvider::connect(
        Box::new(Cursor::new(replies)),
        Box::new(sent.clone()),
        std::path::Path::new("golden_image.png"),
    )
    .unwrap();
    assert_eq!(client.size(), (scene().height, scene().width));
    let prompts = [PointPrompt::new(5.5, 5.5, 10), PointPrompt::new(5.5, 10.5, 11), PointPrompt::new(14.5, 1.5, 12)];
    let triples = client.segment(&prompts).unwrap();
    let features = client.embed().unwrap().unwrap();

    let mut oracle = SyntheticOracle::new(scene()).unwrap();
    assert_eq!(triples, segment(&mut oracle, &prompts).unwrap());
    assert_eq!(Some(features), oracle.embed().unwrap());

    let sent = String::from_utf8(sent.0.lock().unwrap().clone()).unwrap();
    let sent: Vec<Value> = sent.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for (n, (&i, got)) in picks.iter().zip(&sent).enumerate() {
        let mut want: Value = serde_json::from_str(golden[i]["request"].as_str().unwrap()).unwrap();
        want["id"] = json!(n + 1);
        assert_eq!(got, &want);
    }
}

#[test]
fn client_rejects_out_of_order_reply() {
    let golden = load();
    let mut r = golden[1]["response"].clone();
    r["id"] = json!(2);
    let err = ExternalProvider::connect(
        Box::new(Cursor::new(format!("{r}\n"))),
        Box::new(Capture::default()),
        std::path::Path::new("golden_image.png"),
    );
    assert!(err.is_err());
}
