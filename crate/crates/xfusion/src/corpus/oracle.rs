//! Rule-based oracle classifier.
//!
//! Inverts the generator's rendering rules from difference-region statistics:
//! object-count delta first (logical types), then the sign of the mean
//! intensity delta and the elongation of the changed region (structural
//! types). Exact on generator output; returns [`OracleLabel::Unknown`] for
//! feature combinations the generator never produces.

use ndarray::Array2;

use super::generate::OBJECT_THRESHOLD;
use super::AnomalyType;
use crate::error::{Error, Result};

/// Pixels whose absolute delta exceeds this count as changed.
pub const CHANGE_EPSILON: f64 = 1e-6;
/// Changed regions at least this elongated classify as stripe/scratch.
const ELONGATION_THRESHOLD: f64 = 2.5;
/// Bright components smaller than this many pixels are ignored by counting.
const MIN_COMPONENT_AREA: usize = 3;

/// Classification outcome: an anomaly type, clean, or ambiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleLabel {
    Type(AnomalyType),
    Unknown,
}

impl OracleLabel {
    pub fn matches(&self, t: AnomalyType) -> bool {
        *self == OracleLabel::Type(t)
    }
}

impl std::fmt::Display for OracleLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleLabel::Type(t) => t.fmt(f),
            OracleLabel::Unknown => f.write_str("unknown"),
        }
    }
}

/// Class order used by probability vectors and downstream classifiers.
pub const ORACLE_CLASSES: [AnomalyType; 6] = [
    AnomalyType::None,
    AnomalyType::DarkBlob,
    AnomalyType::BrightStripe,
    AnomalyType::Scratch,
    AnomalyType::MissingPart,
    AnomalyType::WrongCount,
];

struct DiffFeatures {
    changed: usize,
    mean_delta: f64,
    elongation: f64,
    count_delta: i64,
}

fn diff_features(sample: &Array2<f64>, base: &Array2<f64>) -> DiffFeatures {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sy = 0.0;
    let mut sx = 0.0;
    let mut coords = Vec::new();
    for ((i, j), (s, b)) in sample
        .indexed_iter()
        .map(|(idx, v)| (idx, (*v, base[idx])))
    {
        let d = s - b;
        if d.abs() > CHANGE_EPSILON {
            n += 1;
            sum += d;
            sy += i as f64;
            sx += j as f64;
            coords.push((i as f64, j as f64));
        }
    }
    let elongation = if n >= 2 {
        let (my, mx) = (sy / n as f64, sx / n as f64);
        let (mut cyy, mut cxx, mut cyx) = (0.0, 0.0, 0.0);
        for (y, x) in &coords {
            cyy += (y - my) * (y - my);
            cxx += (x - mx) * (x - mx);
            cyx += (y - my) * (x - mx);
        }
        let (cyy, cxx, cyx) = (cyy / n as f64, cxx / n as f64, cyx / n as f64);
        let tr = cyy + cxx;
        let det = cyy * cxx - cyx * cyx;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let l1 = tr / 2.0 + disc;
        let l2 = (tr / 2.0 - disc).max(0.0);
        ((l1 + 1e-9) / (l2 + 1e-9)).sqrt()
    } else {
        1.0
    };
    DiffFeatures {
        changed: n,
        mean_delta: if n > 0 { sum / n as f64 } else { 0.0 },
        elongation,
        count_delta: bright_component_count(sample) as i64 - bright_component_count(base) as i64,
    }
}

/// 8-connected components brighter than [`OBJECT_THRESHOLD`], ignoring
/// components below [`MIN_COMPONENT_AREA`] pixels.
pub fn bright_component_count(img: &Array2<f64>) -> usize {
    let (h, w) = img.dim();
    let mut seen = vec![false; h * w];
    let mut count = 0usize;
    let mut stack = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if seen[si * w + sj] || img[(si, sj)] <= OBJECT_THRESHOLD {
                continue;
            }
            let mut area = 0usize;
            stack.push((si, sj));
            seen[si * w + sj] = true;
            while let Some((i, j)) = stack.pop() {
                area += 1;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if !seen[ni * w + nj] && img[(ni, nj)] > OBJECT_THRESHOLD {
                            seen[ni * w + nj] = true;
                            stack.push((ni, nj));
                        }
                    }
                }
            }
            if area >= MIN_COMPONENT_AREA {
                count += 1;
            }
        }
    }
    count
}

/// Classify a sample against its paired normal base image.
pub fn oracle_classify(sample: &Array2<f64>, base: &Array2<f64>) -> Result<OracleLabel> {
    if sample.dim() != base.dim() {
        return Err(Error::shape(
            "oracle_classify",
            format!("{:?}", base.dim()),
            format!("{:?}", sample.dim()),
        ));
    }
    let f = diff_features(sample, base);
    Ok(classify_features(&f))
}

fn classify_features(f: &DiffFeatures) -> OracleLabel {
    if f.changed == 0 {
        return OracleLabel::Type(AnomalyType::None);
    }
    if f.count_delta > 0 {
        return OracleLabel::Type(AnomalyType::WrongCount);
    }
    if f.count_delta < 0 {
        return OracleLabel::Type(AnomalyType::MissingPart);
    }
    let elongated = f.elongation >= ELONGATION_THRESHOLD;
    if f.mean_delta > 0.0 {
        if elongated {
            OracleLabel::Type(AnomalyType::BrightStripe)
        } else {
            // Bright, compact, count unchanged: the generator never produces
            // this, so refuse to guess.
            OracleLabel::Unknown
        }
    } else if elongated {
        OracleLabel::Type(AnomalyType::Scratch)
    } else {
        OracleLabel::Type(AnomalyType::DarkBlob)
    }
}

/// Probability vector over [`ORACLE_CLASSES`]: graded rule scores, softmax
/// normalized, with the hard rule decision guaranteed to stay the argmax.
/// Ambiguous regions yield the uniform distribution.
pub fn oracle_probs(sample: &Array2<f64>, base: &Array2<f64>) -> Result<[f64; 6]> {
    if sample.dim() != base.dim() {
        return Err(Error::shape(
            "oracle_probs",
            format!("{:?}", base.dim()),
            format!("{:?}", sample.dim()),
        ));
    }
    let f = diff_features(sample, base);
    let label = classify_features(&f);
    let OracleLabel::Type(hard) = label else {
        return Ok([1.0 / 6.0; 6]);
    };

    let sign = (f.mean_delta * 25.0).tanh();
    let elong = ((f.elongation - ELONGATION_THRESHOLD) / 2.0).clamp(-2.0, 2.0);
    let cd = f.count_delta as f64;
    let mut logits = [0.0f64; 6];
    for (slot, class) in ORACLE_CLASSES.iter().enumerate() {
        logits[slot] = match class {
            AnomalyType::None => {
                if f.changed == 0 {
                    6.0
                } else {
                    -4.0
                }
            }
            AnomalyType::DarkBlob => -2.0 * sign - elong - 2.0 * cd.abs(),
            AnomalyType::BrightStripe => 2.0 * sign + elong - 2.0 * cd.abs(),
            AnomalyType::Scratch => -2.0 * sign + elong - 2.0 * cd.abs(),
            AnomalyType::MissingPart => -2.0 * cd.max(0.0) + 2.0 * (-cd).min(2.0) - 1.0,
            AnomalyType::WrongCount => 2.0 * cd.clamp(-2.0, 2.0) - 1.0,
        };
        if *class == hard {
            logits[slot] += 6.0;
        }
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; 6];
    let mut total = 0.0;
    for (p, l) in probs.iter_mut().zip(logits.iter()) {
        *p = (l - max).exp();
        total += *p;
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}
