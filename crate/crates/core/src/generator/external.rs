//! Directory-exchange protocol for out-of-process generators.
//!
//! A request is written to `<dir>/requests/<id>.json`. The backend answers
//! by writing PNGs and then `<dir>/responses/<id>/manifest.json` listing them
//! in sample order. Both documents are written to a temporary name first and
//! renamed, so a reader never sees a partial file.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{GeneratedSample, GenerationRequest, Generator};
use crate::data::{load_png, save_png, AnnotationSet, Canvas, ImageId, ImageRecord, Instance, Provenance};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

const PROTOCOL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct RequestDocument {
    pub format_version: u32,
    pub request_id: String,
    pub canvas: Canvas,
    pub request: GenerationRequest,
}

#[derive(Serialize, Deserialize)]
pub struct ResponseManifest {
    pub format_version: u32,
    pub request_id: String,
    /// PNG paths relative to the response directory.
    pub images: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ExternalGenerator {
    pub exchange_dir: PathBuf,
    pub canvas: Canvas,
    pub timeout: Duration,
    pub poll_interval: Duration,
}

impl ExternalGenerator {
    pub fn new(exchange_dir: impl Into<PathBuf>) -> Self {
        Self {
            exchange_dir: exchange_dir.into(),
            canvas: Canvas::default(),
            timeout: Duration::from_secs(600),
            poll_interval: Duration::from_millis(20),
        }
    }
}

fn request_id(req: &GenerationRequest) -> String {
    let text = serde_json::to_string(req).expect("request serializes");
    let mut h = 0u64;
    for chunk in text.as_bytes().chunks(8) {
        let mut b = [0u8; 8];
        b[..chunk.len()].copy_from_slice(chunk);
        h = derive_seed(h, u64::from_le_bytes(b));
    }
    format!("{h:016x}")
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl Generator for ExternalGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<Vec<GeneratedSample>> {
        req.validate()?;
        let id = request_id(req);
        let requests = self.exchange_dir.join("requests");
        mkdir(&requests)?;
        let doc = RequestDocument {
            format_version: PROTOCOL_VERSION,
            request_id: id.clone(),
            canvas: self.canvas,
            request: req.clone(),
        };
        let text = serde_json::to_string_pretty(&doc).expect("request serializes");
        write_atomic(&requests.join(format!("{id}.json")), &text)?;

        let response_dir = self.exchange_dir.join("responses").join(&id);
        let manifest_path = response_dir.join("manifest.json");
        let start = Instant::now();
        while !manifest_path.exists() {
            if start.elapsed() > self.timeout {
                return Err(Error::Generator(format!(
                    "no response for request {id} within {:?} (expected {})",
                    self.timeout,
                    manifest_path.display()
                )));
            }
            thread::sleep(self.poll_interval);
        }
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: ResponseManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            record: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;
        if manifest.request_id != id || manifest.images.len() != req.count {
            return Err(Error::Generator(format!(
                "response {} has {} images for request {id} of {}",
                manifest.request_id,
                manifest.images.len(),
                req.count
            )));
        }
        manifest
            .images
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let pixels = load_png(&response_dir.join(name), self.canvas)?;
                let annotation = AnnotationSet::new(
                    ImageId(i as u64),
                    req.grounding
                        .entities()
                        .iter()
                        .map(|&(c, b)| Instance::new(c, b))
                        .collect(),
                    Provenance::Generated,
                );
                Ok(GeneratedSample {
                    image: ImageRecord::new(pixels, annotation),
                    grounding_used: req.grounding.clone(),
                })
            })
            .collect()
    }
}

/// Answers every unanswered request in `exchange_dir` with `backend`.
/// Returns the number of requests served.
pub fn serve_pending(exchange_dir: &Path, backend: &dyn Generator) -> Result<usize> {
    let requests = exchange_dir.join("requests");
    if !requests.exists() {
        return Ok(0);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&requests)
        .map_err(|e| Error::io(&requests, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut served = 0;
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: RequestDocument = serde_json::from_str(&text).map_err(|e| Error::Parse {
            record: path.display().to_string(),
            message: e.to_string(),
        })?;
        let out = exchange_dir.join("responses").join(&doc.request_id);
        if out.join("manifest.json").exists() {
            continue;
        }
        mkdir(&out)?;
        let samples = backend.generate(&doc.request)?;
        let mut images = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let name = format!("{i:04}.png");
            save_png(&s.image.pixels, &out.join(&name))?;
            images.push(name);
        }
        let manifest = ResponseManifest {
            format_version: PROTOCOL_VERSION,
            request_id: doc.request_id,
            images,
        };
        write_atomic(
            &out.join("manifest.json"),
            &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        served += 1;
    }
    Ok(served)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, ClassId};
    use crate::generator::{FidelityProfile, ProceduralGenerator};
    use crate::prompt::{GroundingInput, PromptSpec};
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Arc;

    fn request() -> GenerationRequest {
        let g = GroundingInput::new(vec![(ClassId(3), BBox::new(0.25, 0.25, 0.75, 0.75).unwrap())]).unwrap();
        let p = PromptSpec {
            positive: "A photo of motorcycle".into(),
            negative: String::new(),
        };
        GenerationRequest {
            count: 2,
            ..GenerationRequest::new(p, g, 4)
        }
    }

    #[test]
    fn round_trip_through_a_backend_thread() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let done = Arc::new(AtomicBool::new(false));
        let backend = {
            let (root, done) = (root.clone(), done.clone());
            thread::spawn(move || {
                let gen = ProceduralGenerator::new(FidelityProfile::default(), 12).unwrap();
                while !done.load(Ordering::SeqCst) {
                    serve_pending(&root, &gen).unwrap();
                    thread::sleep(Duration::from_millis(5));
                }
            })
        };
        let ext = ExternalGenerator::new(&root);
        let got = ext.generate(&request()).unwrap();
        done.store(true, Ordering::SeqCst);
        backend.join().unwrap();

        let direct = ProceduralGenerator::new(FidelityProfile::default(), 12)
            .unwrap()
            .generate(&request())
            .unwrap();
        assert_eq!(got, direct);
    }

    #[test]
    fn missing_backend_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let mut ext = ExternalGenerator::new(dir.path());
        ext.timeout = Duration::from_millis(50);
        assert!(matches!(ext.generate(&request()), Err(Error::Generator(_))));
    }
}
