//! Scoring of uploaded image bytes.

use fqc_core::eval::band;
use fqc_core::preprocess::{prepare, RawImage};
use fqc_core::{Band, BandThresholds};
use image::ImageFormat;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::registry::LoadedModel;

/// How to decode a request body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediaKind {
    Png,
    Ppm,
    /// No usable content type: decode by magic bytes.
    Sniff,
}

impl MediaKind {
    pub fn from_content_type(content_type: Option<&str>) -> ServiceResult<Self> {
        let Some(ct) = content_type else {
            return Ok(MediaKind::Sniff);
        };
        let essence = ct.split(';').next().unwrap_or("").trim().to_ascii_lowercase();
        match essence.as_str() {
            "image/png" => Ok(MediaKind::Png),
            "image/x-portable-pixmap" | "image/x-portable-anymap" | "image/x-ppm" => Ok(MediaKind::Ppm),
            "" | "application/octet-stream" => Ok(MediaKind::Sniff),
            _ => Err(ServiceError::UnsupportedMedia(ct.to_string())),
        }
    }

    /// Guess from a file extension; anything unknown is sniffed.
    pub fn from_extension(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => MediaKind::Png,
            Some("ppm" | "pnm") => MediaKind::Ppm,
            _ => MediaKind::Sniff,
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            MediaKind::Png => "image/png",
            MediaKind::Ppm => "image/x-portable-pixmap",
            MediaKind::Sniff => "application/octet-stream",
        }
    }

    pub fn decode(self, bytes: &[u8]) -> fqc_core::Result<RawImage> {
        match self {
            MediaKind::Png => RawImage::decode_as(bytes, ImageFormat::Png),
            MediaKind::Ppm => RawImage::decode_as(bytes, ImageFormat::Pnm),
            MediaKind::Sniff => RawImage::decode(bytes),
        }
    }
}

/// Photographer-facing verdict for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub model_id: String,
    pub score: f64,
    pub band: Band,
    pub recapture_advised: bool,
    pub thresholds: BandThresholds,
}

/// Which bands trigger a recapture recommendation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecapturePolicy {
    /// Anything short of accept.
    #[default]
    UnlessAccept,
    RejectOnly,
}

impl RecapturePolicy {
    pub fn advise(self, b: Band) -> bool {
        match self {
            RecapturePolicy::UnlessAccept => b != Band::Accept,
            RecapturePolicy::RejectOnly => b == Band::Reject,
        }
    }
}

/// Decode, detect the field of view, crop, resize, score and band.
pub fn score_image(
    model: &LoadedModel,
    bytes: &[u8],
    kind: MediaKind,
    thresholds: &BandThresholds,
    policy: RecapturePolicy,
) -> ServiceResult<ScoreResponse> {
    let image = kind.decode(bytes)?;
    let side = model.model.arch().input.height;
    let x = prepare::<f32>(&image, side)?;
    let score = model.model.score(&x)? as f64;
    let v = band(score, thresholds)?;
    Ok(ScoreResponse {
        model_id: model.model_id.clone(),
        score: v.score,
        band: v.band,
        recapture_advised: policy.advise(v.band),
        thresholds: *thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_types() {
        assert_eq!(MediaKind::from_content_type(Some("image/png")).unwrap(), MediaKind::Png);
        assert_eq!(
            MediaKind::from_content_type(Some("image/x-portable-pixmap; charset=binary")).unwrap(),
            MediaKind::Ppm
        );
        assert_eq!(MediaKind::from_content_type(None).unwrap(), MediaKind::Sniff);
        assert!(MediaKind::from_content_type(Some("image/jpeg")).is_err());
    }

    #[test]
    fn recapture_policies() {
        assert!(!RecapturePolicy::UnlessAccept.advise(Band::Accept));
        assert!(RecapturePolicy::UnlessAccept.advise(Band::Ambiguous));
        assert!(!RecapturePolicy::RejectOnly.advise(Band::Ambiguous));
        assert!(RecapturePolicy::RejectOnly.advise(Band::Reject));
    }
}
