#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, Response, StatusCode};
use fqc_core::dataset::{ManifestEntry, Split};
use fqc_core::model::{build_reduced_arch, encode_checkpoint, CheckpointMeta};
use fqc_core::preprocess::RawImage;
use fqc_core::{Consensus, DatasetManifest, ModelParams};
use fqc_service::{router, AppConfig, AppState};
use http_body_util::BodyExt;
use tower::ServiceExt;

/// A bright disc on a black surround, like a fundus photograph.
pub fn disc_image(side: usize, rgb: [u8; 3]) -> RawImage {
    let mut img = RawImage::filled(side, side, [0, 0, 0]);
    let c = side as f64 / 2.0;
    let r = 0.45 * side as f64;
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
            if dx * dx + dy * dy <= r * r {
                let shade = ((x + 2 * y) % 17) as u8;
                img.set_pixel(x, y, [rgb[0].saturating_add(shade), rgb[1], rgb[2]]);
            }
        }
    }
    img
}

/// Data directory with `n` ungraded images `im-0..n` and a manifest.
pub fn data_dir(n: usize) -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    std::fs::create_dir_all(root.join("images")).unwrap();
    let entries = (0..n)
        .map(|i| {
            let rel = PathBuf::from(format!("images/im-{i}.ppm"));
            disc_image(96, [120 + i as u8, 60, 30]).write_ppm(root.join(&rel)).unwrap();
            ManifestEntry {
                image_id: format!("im-{i}"),
                path: rel,
                grades: Vec::new(),
                consensus: Consensus::Ungraded,
                split: Split::Excluded,
                ground_truth: None,
            }
        })
        .collect();
    DatasetManifest::new(entries).unwrap().save(root.join("manifest.json")).unwrap();
    (tmp, root)
}

/// Writes a reduced-arch checkpoint; `None` gives all-zero parameters.
pub fn write_checkpoint(path: &Path, seed: Option<u64>) -> Vec<u8> {
    let arch = build_reduced_arch(8).unwrap();
    let params = match seed {
        Some(s) => ModelParams::<f32>::init(&arch, s).unwrap(),
        None => ModelParams::<f32>::zeros(&arch).unwrap(),
    };
    let bytes = encode_checkpoint(&params, &arch, &CheckpointMeta::default()).unwrap();
    std::fs::write(path, &bytes).unwrap();
    bytes
}

pub fn state(root: &Path) -> Arc<AppState> {
    Arc::new(AppState::open(AppConfig::new(root)).unwrap())
}

pub async fn send(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Response<Body>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    (resp.status(), resp)
}

pub async fn body_bytes(resp: Response<Body>) -> Vec<u8> {
    resp.into_body().collect().await.unwrap().to_bytes().to_vec()
}

pub async fn body_json(resp: Response<Body>) -> serde_json::Value {
    serde_json::from_slice(&body_bytes(resp).await).unwrap()
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

pub fn post_json(uri: &str, v: &serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(v.to_string()))
        .unwrap()
}

pub fn post_image(content_type: &str, bytes: Vec<u8>) -> Request<Body> {
    Request::post("/api/score")
        .header("content-type", content_type)
        .body(Body::from(bytes))
        .unwrap()
}
