//! Newline-delimited JSON protocol over a child process's standard streams.
//!
//! ```text
//! {"id":1,"op":"init","image_path":"x.png"}  -> {"id":1,"ok":true,"height":H,"width":W}
//! {"id":2,"op":"segment","points":[[r,c]]}   -> {"id":2,"results":[<triple record>]}
//! {"id":3,"op":"embed"}                       -> {"id":3,"features":{"c":C,"h":h,"w":w,"data_b64":"..."}}
//! failure                                     -> {"id":n,"error":"..."}
//! ```
//!
//! One request is in flight at a time and every response must echo the
//! request id.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, FeatureGrid, MaskTriple, PointPrompt, Segmenter, TripleRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePayload {
    pub c: u32,
    pub h: u32,
    pub w: u32,
    pub data_b64: String,
}

impl FeaturePayload {
    pub fn encode(grid: &FeatureGrid) -> Self {
        Self { c: grid.channels, h: grid.height, w: grid.width, data_b64: B64.encode(grid.payload_bytes()) }
    }

    pub fn decode(&self) -> Result<FeatureGrid, BackendError> {
        let bytes = B64
            .decode(&self.data_b64)
            .map_err(|e| BackendError::Protocol(format!("bad feature payload: {e}")))?;
        FeatureGrid::from_payload(self.c, self.h, self.w, &bytes)
    }
}

/// Client side of the protocol.
pub struct ExternalProvider {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    next_id: u64,
    height: u32,
    width: u32,
}

impl ExternalProvider {
    /// Spawns `command` through `sh -c` and initialises it on `image_path`.
    pub fn spawn(command: &str, image_path: &Path) -> Result<Self, BackendError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| BackendError::Protocol("child stdin unavailable".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| BackendError::Protocol("child stdout unavailable".into()))?;
        let mut provider = Self::connect(Box::new(BufReader::new(stdout)), Box::new(stdin), image_path)?;
        provider.child = Some(child);
        Ok(provider)
    }

    /// Initialises over already-open streams.
    pub fn connect(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        image_path: &Path,
    ) -> Result<Self, BackendError> {
        let mut provider = Self { reader, writer, child: None, next_id: 1, height: 0, width: 0 };
        let resp = provider.request(json!({"op": "init", "image_path": image_path.to_string_lossy()}))?;
        let dim = |key: &str| {
            resp.get(key)
                .and_then(Value::as_u64)
                .and_then(|v| u32::try_from(v).ok())
                .ok_or_else(|| BackendError::Protocol(format!("init response lacks {key}")))
        };
        if resp.get("ok") != Some(&Value::Bool(true)) {
            return Err(BackendError::Protocol("init response lacks ok=true".into()));
        }
        provider.height = dim("height")?;
        provider.width = dim("width")?;
        Ok(provider)
    }

    fn request(&mut self, mut body: Value) -> Result<Value, BackendError> {
        let id = self.next_id;
        self.next_id += 1;
        body["id"] = json!(id);
        let mut line = serde_json::to_string(&body)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        let mut buf = String::new();
        if self.reader.read_line(&mut buf)? == 0 {
            return Err(BackendError::Protocol(format!("worker closed its output before answering request {id}")));
        }
        let resp: Value = serde_json::from_str(buf.trim_end())?;
        match resp.get("id").and_then(Value::as_u64) {
            Some(got) if got == id => {}
            other => {
                return Err(BackendError::Protocol(format!("expected response id {id}, got {other:?}")));
            }
        }
        if let Some(err) = resp.get("error") {
            return Err(BackendError::Remote {
                id,
                message: err.as_str().map(str::to_owned).unwrap_or_else(|| err.to_string()),
            });
        }
        Ok(resp)
    }
}

impl Segmenter for ExternalProvider {
    fn size(&self) -> (u32, u32) {
        (self.height, self.width)
    }

    fn segment(&mut self, prompts: &[PointPrompt]) -> Result<Vec<MaskTriple>, BackendError> {
        let points: Vec<[f64; 2]> = prompts.iter().map(|p| [p.row, p.col]).collect();
        let mut resp = self.request(json!({"op": "segment", "points": points}))?;
        let results: Vec<TripleRecord> = serde_json::from_value(resp["results"].take())?;
        if results.len() != prompts.len() {
            return Err(BackendError::Misaligned { expected: prompts.len(), got: results.len() });
        }
        // the worker numbers results by position; rebind to caller ids
        results
            .iter()
            .zip(prompts)
            .map(|(rec, p)| {
                let mut rec = rec.clone();
                rec.prompt_id = p.id;
                rec.to_triple()
            })
            .collect()
    }

    fn embed(&mut self) -> Result<Option<FeatureGrid>, BackendError> {
        let mut resp = self.request(json!({"op": "embed"}))?;
        let payload: FeaturePayload = serde_json::from_value(resp["features"].take())?;
        payload.decode().map(Some)
    }
}

impl Drop for ExternalProvider {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Request {
    Init { image_path: String },
    Segment { points: Vec<[f64; 2]> },
    Embed,
}

/// Worker side: answers requests from `reader` on `writer` until EOF.
///
/// `open` binds a provider to the image named by `init`. Malformed
/// requests get an error record and the loop continues.
pub fn serve<F>(reader: impl BufRead, mut writer: impl Write, mut open: F) -> Result<(), BackendError>
where
    F: FnMut(&str) -> Result<Box<dyn Segmenter>, BackendError>,
{
    let mut provider: Option<Box<dyn Segmenter>> = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                write_line(&mut writer, &json!({"id": Value::Null, "error": format!("bad json: {e}")}))?;
                continue;
            }
        };
        let id = value.get("id").cloned().unwrap_or(Value::Null);
        let response = match serde_json::from_value::<Request>(value) {
            Err(e) => json!({"id": id, "error": format!("bad request: {e}")}),
            Ok(req) => match handle(req, &mut provider, &mut open) {
                Ok(mut body) => {
                    body["id"] = id;
                    body
                }
                Err(e) => json!({"id": id, "error": e.to_string()}),
            },
        };
        write_line(&mut writer, &response)?;
    }
    Ok(())
}

fn handle<F>(req: Request, provider: &mut Option<Box<dyn Segmenter>>, open: &mut F) -> Result<Value, BackendError>
where
    F: FnMut(&str) -> Result<Box<dyn Segmenter>, BackendError>,
{
    match req {
        Request::Init { image_path } => {
            let p = open(&image_path)?;
            let (h, w) = p.size();
            *provider = Some(p);
            Ok(json!({"ok": true, "height": h, "width": w}))
        }
        Request::Segment { points } => {
            let p = provider.as_mut().ok_or_else(|| BackendError::Protocol("segment before init".into()))?;
            let prompts: Vec<PointPrompt> = points
                .iter()
                .enumerate()
                .map(|(i, pt)| PointPrompt::new(pt[0], pt[1], i as u32))
                .collect();
            let triples = super::segment(p.as_mut(), &prompts)?;
            let results: Vec<TripleRecord> =
                prompts.iter().zip(&triples).map(|(pr, t)| TripleRecord::from_triple(t, pr)).collect();
            Ok(json!({"results": results}))
        }
        Request::Embed => {
            let p = provider.as_mut().ok_or_else(|| BackendError::Protocol("embed before init".into()))?;
            let grid = p.embed()?.ok_or_else(|| BackendError::Protocol("provider has no features".into()))?;
            Ok(json!({"features": FeaturePayload::encode(&grid)}))
        }
    }
}

fn write_line(writer: &mut impl Write, value: &Value) -> Result<(), BackendError> {
    serde_json::to_writer(&mut *writer, value)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::oracle::SyntheticOracle;
    use crate::backend::scene::{NoiseProfile, SceneGenerator};
    use crate::backend::{grid_prompts, segment};
    use std::io::Cursor;
    use std::sync::mpsc;
    use std::thread;

    /// Blocking pipe endpoint backed by a channel of lines.
    struct ChannelWriter(mpsc::Sender<Vec<u8>>);

    impl Write for ChannelWriter {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.send(buf.to_vec()).map_err(|_| std::io::Error::from(std::io::ErrorKind::BrokenPipe))?;
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    struct ChannelReader {
        rx: mpsc::Receiver<Vec<u8>>,
        buf: Vec<u8>,
        pos: usize,
    }

    impl std::io::Read for ChannelReader {
        fn read(&mut self, out: &mut [u8]) -> std::io::Result<usize> {
            let avail = self.fill_buf()?;
            let n = avail.len().min(out.len());
            out[..n].copy_from_slice(&avail[..n]);
            self.consume(n);
            Ok(n)
        }
    }

    impl BufRead for ChannelReader {
        fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
            if self.pos >= self.buf.len() {
                match self.rx.recv() {
                    Ok(chunk) => {
                        self.buf = chunk;
                        self.pos = 0;
                    }
                    Err(_) => return Ok(&[]),
                }
            }
            Ok(&self.buf[self.pos..])
        }
        fn consume(&mut self, amt: usize) {
            self.pos += amt;
        }
    }

    fn pipe() -> (ChannelWriter, ChannelReader) {
        let (tx, rx) = mpsc::channel();
        (ChannelWriter(tx), ChannelReader { rx, buf: Vec::new(), pos: 0 })
    }

    fn scene() -> crate::backend::scene::SceneSpec {
        let g = SceneGenerator { height: 48, width: 48, ..SceneGenerator::default() };
        g.generate(2, NoiseProfile::noisy(2))
    }

    #[test]
    fn client_matches_direct_oracle() {
        let (to_worker, worker_in) = pipe();
        let (worker_out, from_worker) = pipe();
        let s = scene();
        let server_scene = s.clone();
        let handle = thread::spawn(move || {
            serve(worker_in, worker_out, |_| Ok(Box::new(SyntheticOracle::new(server_scene.clone())?)))
        });
        let mut client =
            ExternalProvider::connect(Box::new(from_worker), Box::new(to_worker), Path::new("scene.png")).unwrap();
        assert_eq!(client.size(), (48, 48));
        let mut direct = SyntheticOracle::new(s).unwrap();
        let prompts: Vec<_> = grid_prompts(48, 48, 5).into_iter().map(|mut p| {
            p.id += 100;
            p
        }).collect();
        assert_eq!(segment(&mut client, &prompts).unwrap(), segment(&mut direct, &prompts).unwrap());
        assert_eq!(client.embed().unwrap(), direct.embed().unwrap());
        drop(client);
        handle.join().unwrap().unwrap();
    }

    #[test]
    fn server_reports_errors_and_continues() {
        let requests = [
            r#"{"id":1,"op":"segment","points":[[1,1]]}"#,
            r#"not json"#,
            r#"{"id":2,"op":"fly"}"#,
            r#"{"id":3,"op":"init","image_path":"a.png"}"#,
            r#"{"id":4,"op":"segment","points":[[100,1]]}"#,
            r#"{"id":5,"op":"segment","points":[]}"#,
        ]
        .join("\n");
        let mut out = Vec::new();
        serve(Cursor::new(requests), &mut out, |_| Ok(Box::new(SyntheticOracle::new(scene())?))).unwrap();
        let lines: Vec<Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0]["id"], 1);
        assert!(lines[0]["error"].as_str().unwrap().contains("before init"));
        assert!(lines[1]["id"].is_null() && lines[1]["error"].is_string());
        assert_eq!(lines[2]["id"], 2);
        assert!(lines[2]["error"].is_string());
        assert_eq!(lines[3], json!({"id": 3, "ok": true, "height": 48, "width": 48}));
        assert!(lines[4]["error"].as_str().unwrap().contains("outside"));
        assert_eq!(lines[5], json!({"id": 5, "results": []}));
    }

    #[test]
    fn client_rejects_mismatched_ids_and_remote_errors() {
        let reply = "{\"id\":7,\"ok\":true,\"height\":4,\"width\":4}\n";
        let err = ExternalProvider::connect(Box::new(Cursor::new(reply)), Box::new(Vec::new()), Path::new("x"))
            .err()
            .unwrap();
        assert!(matches!(err, BackendError::Protocol(_)));

        let reply = "{\"id\":1,\"error\":\"no model\"}\n";
        let err = ExternalProvider::connect(Box::new(Cursor::new(reply)), Box::new(Vec::new()), Path::new("x"))
            .err()
            .unwrap();
        assert!(matches!(err, BackendError::Remote { id: 1, ref message } if message == "no model"));

        let err = ExternalProvider::connect(Box::new(Cursor::new("")), Box::new(Vec::new()), Path::new("x"))
            .err()
            .unwrap();
        assert!(matches!(err, BackendError::Protocol(_)));
    }

    #[test]
    fn spawned_worker_round_trip() {
        // a shell worker that answers init and then one embed request
        let script = r#"read a; echo '{"id":1,"ok":true,"height":2,"width":2}'; read b; echo '{"id":2,"features":{"c":1,"h":1,"w":1,"data_b64":"AACAPw=="}}'"#;
        let mut p = ExternalProvider::spawn(script, Path::new("img.png")).unwrap();
        assert_eq!(p.size(), (2, 2));
        let g = p.embed().unwrap().unwrap();
        assert_eq!(g.data, vec![1.0]);
    }
}
