//! Procedural captioned-defect corpus.
//!
//! Samples are image/mask/caption triplets in the style of industrial
//! anomaly datasets: a canonical normal base image per category, defects
//! painted strictly inside a pixel-exact mask, and a template caption naming
//! the defect. A rule-based oracle classifier inverts the generator and is
//! exact on its output, which makes it usable as the evaluation classifier.

mod generate;
mod io;
mod oracle;
mod stats;

pub use generate::{DefectSpec, Generator};
pub use io::{read_corpus, write_corpus, ManifestRecord, MANIFEST_NAME};
pub use oracle::{oracle_classify, oracle_probs, OracleLabel, ORACLE_CLASSES};
pub use stats::{attribute_stats, KEYWORD_LEXICON};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Categories with a defined base image and object layout.
pub const KNOWN_CATEGORIES: &[&str] = &["plate", "strip"];

pub fn is_known_category(name: &str) -> bool {
    KNOWN_CATEGORIES.contains(&name)
}

/// Defect taxonomy: three structural types alter texture inside the mask,
/// two logical types alter the object composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyType {
    None,
    DarkBlob,
    BrightStripe,
    Scratch,
    MissingPart,
    WrongCount,
}

impl AnomalyType {
    pub const DEFECTS: &'static [AnomalyType] = &[
        AnomalyType::DarkBlob,
        AnomalyType::BrightStripe,
        AnomalyType::Scratch,
        AnomalyType::MissingPart,
        AnomalyType::WrongCount,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnomalyType::None => "none",
            AnomalyType::DarkBlob => "dark_blob",
            AnomalyType::BrightStripe => "bright_stripe",
            AnomalyType::Scratch => "scratch",
            AnomalyType::MissingPart => "missing_part",
            AnomalyType::WrongCount => "wrong_count",
        }
    }

    /// Keyword that must appear in the caption of an anomalous sample.
    pub fn keyword(&self) -> &'static str {
        match self {
            AnomalyType::None => "normal",
            AnomalyType::DarkBlob => "dark blob",
            AnomalyType::BrightStripe => "bright stripe",
            AnomalyType::Scratch => "scratch",
            AnomalyType::MissingPart => "missing part",
            AnomalyType::WrongCount => "wrong count",
        }
    }

    pub fn is_logical(&self) -> bool {
        matches!(self, AnomalyType::MissingPart | AnomalyType::WrongCount)
    }
}

impl std::fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AnomalyType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AnomalyType::None),
            "dark_blob" => Ok(AnomalyType::DarkBlob),
            "bright_stripe" => Ok(AnomalyType::BrightStripe),
            "scratch" => Ok(AnomalyType::Scratch),
            "missing_part" => Ok(AnomalyType::MissingPart),
            "wrong_count" => Ok(AnomalyType::WrongCount),
            other => Err(Error::data(format!("unknown anomaly type `{other}`"))),
        }
    }
}

/// One image/mask/caption record.
///
/// Image intensities live on the 16-bit grid (multiples of 1/65535) so the
/// PNG round trip is bit-exact; masks are exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedSample {
    pub id: String,
    pub image: Array2<f64>,
    pub mask: Array2<f64>,
    pub caption: String,
    pub category: String,
    pub anomaly_type: AnomalyType,
}

impl CaptionedSample {
    /// Schema checks shared by the generator and the reader.
    pub fn validate(&self) -> Result<()> {
        let schema = |field: &str, message: String| Error::Schema {
            id: self.id.clone(),
            field: field.into(),
            message,
        };
        if self.id.is_empty() {
            return Err(schema("id", "must not be empty".into()));
        }
        if self.image.dim() != self.mask.dim() {
            return Err(schema(
                "mask",
                format!(
                    "shape {:?} does not match image {:?}",
                    self.mask.dim(),
                    self.image.dim()
                ),
            ));
        }
        for v in self.mask.iter() {
            if *v != 0.0 && *v != 1.0 {
                return Err(schema("mask", format!("value {v} is not exactly 0 or 1")));
            }
        }
        let nonzero = self.mask.iter().filter(|v| **v != 0.0).count();
        if self.anomaly_type == AnomalyType::None {
            if nonzero != 0 {
                return Err(schema(
                    "mask",
                    format!("normal sample has {nonzero} nonzero mask pixels"),
                ));
            }
        } else if nonzero == 0 {
            return Err(schema("mask", "anomalous sample has an all-zero mask".into()));
        }
        if self.caption.trim().is_empty() {
            return Err(schema("caption", "must not be empty".into()));
        }
        if self.anomaly_type != AnomalyType::None
            && !self.caption.contains(self.anomaly_type.keyword())
        {
            return Err(schema(
                "caption",
                format!(
                    "`{}` does not contain the keyword `{}`",
                    self.caption,
                    self.anomaly_type.keyword()
                ),
            ));
        }
        for v in self.image.iter() {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                return Err(schema("image", format!("intensity {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn mask_pixel_count(&self) -> usize {
        self.mask.iter().filter(|v| **v != 0.0).count()
    }
}

/// Snap an intensity to the 16-bit grid used by the on-disk format.
pub fn quantize_intensity(v: f64) -> f64 {
    let clamped = v.clamp(0.0, 1.0);
    (clamped * 65535.0).round() / 65535.0
}

/// Snap a whole grid.
pub fn quantize_image(img: &Array2<f64>) -> Array2<f64> {
    img.mapv(quantize_intensity)
}
