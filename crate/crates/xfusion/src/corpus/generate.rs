//! Base images, defect geometry, and the deterministic sample generator.
//!
//! Shape classes deliberately overlap across defect types: dark blobs and
//! extra objects share the disc geometry, scratches and bright stripes share
//! the capsule geometry (same length/width ranges). The mask alone therefore
//! never reveals whether the interior is darkened or brightened — only the
//! caption does — which is what makes caption conditioning measurable
//! downstream.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{quantize_image, quantize_intensity, AnomalyType, CaptionedSample};
use crate::error::{Error, Result};

/// Fraction of `sqrt(h * w)` used as the object radius in base images.
pub const OBJECT_RADIUS_FRAC: f64 = 0.09;
/// Bright components above this intensity count as objects.
pub const OBJECT_THRESHOLD: f64 = 0.75;
const OBJECT_INTENSITY: f64 = 0.85;

/// Full description of one defect instance. Geometry is expressed in
/// fractions of the image size so a spec is resolution-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectSpec {
    pub category: String,
    pub anomaly_type: AnomalyType,
    /// (row, col) center as fractions of (h, w).
    pub center: (f64, f64),
    /// Disc radius or capsule half-length as a fraction of `sqrt(h * w)`.
    pub extent: f64,
    /// Capsule width as a fraction of `sqrt(h * w)`; ignored for discs.
    pub thickness: f64,
    /// Capsule orientation in radians; ignored for discs.
    pub orientation: f64,
    /// Defect strength knob in [0, 1] (depth of darkening / height of lift).
    pub intensity: f64,
    /// Caption template index (see [`Generator::caption_for`]).
    pub caption_template: usize,
}

impl DefectSpec {
    /// A normal (defect-free) spec for `category`.
    pub fn normal(category: &str) -> Self {
        DefectSpec {
            category: category.to_string(),
            anomaly_type: AnomalyType::None,
            center: (0.5, 0.5),
            extent: 0.1,
            thickness: 0.06,
            orientation: 0.0,
            intensity: 0.5,
            caption_template: 0,
        }
    }
}

/// Deterministic corpus generator for a fixed image size.
#[derive(Debug, Clone, Copy)]
pub struct Generator {
    pub height: usize,
    pub width: usize,
}

impl Generator {
    pub fn new(height: usize, width: usize) -> Self {
        Generator { height, width }
    }

    fn scale(&self) -> f64 {
        ((self.height * self.width) as f64).sqrt()
    }

    /// Object centers for a category, as (row, col) fractions.
    pub fn object_centers(&self, category: &str) -> Result<Vec<(f64, f64)>> {
        match category {
            "plate" => Ok(vec![(0.28, 0.28), (0.28, 0.72), (0.72, 0.28), (0.72, 0.72)]),
            "strip" => Ok(vec![(0.50, 0.20), (0.50, 0.50), (0.50, 0.80)]),
            other => Err(Error::data(format!("unknown category `{other}`"))),
        }
    }

    /// Canonical normal image for a category. Pure function of the category
    /// and image size; already quantized to the on-disk grid.
    pub fn base_image(&self, category: &str) -> Result<Array2<f64>> {
        let (h, w) = (self.height, self.width);
        let mut img = Array2::<f64>::zeros((h, w));
        match category {
            "plate" => {
                let (ch, cw) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                let sigma = 0.35 * h.min(w) as f64;
                for i in 0..h {
                    for j in 0..w {
                        let r2 = (i as f64 - ch).powi(2) + (j as f64 - cw).powi(2);
                        img[(i, j)] = 0.36 + 0.10 * (-r2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
            "strip" => {
                for i in 0..h {
                    for j in 0..w {
                        let phase = 2.0 * std::f64::consts::PI * 2.0 * j as f64 / w as f64;
                        img[(i, j)] = 0.34 + 0.06 * phase.sin();
                    }
                }
            }
            other => return Err(Error::data(format!("unknown category `{other}`"))),
        }
        let r_obj = OBJECT_RADIUS_FRAC * self.scale();
        for (cy, cx) in self.object_centers(category)? {
            paint_disc(
                &mut img,
                cy * h as f64,
                cx * w as f64,
                r_obj,
                OBJECT_INTENSITY,
            );
        }
        Ok(quantize_image(&img))
    }

    /// Mask for a spec's geometry (all zero for normal specs).
    pub fn defect_mask(&self, spec: &DefectSpec) -> Result<Array2<f64>> {
        self.validate_spec(spec)?;
        let (h, w) = (self.height, self.width);
        let mut mask = Array2::<f64>::zeros((h, w));
        let s = self.scale();
        let (cy, cx) = (spec.center.0 * h as f64, spec.center.1 * w as f64);
        match spec.anomaly_type {
            AnomalyType::None => {}
            AnomalyType::DarkBlob | AnomalyType::WrongCount => {
                disc_mask(&mut mask, cy, cx, spec.extent * s);
            }
            AnomalyType::MissingPart => {
                disc_mask(&mut mask, cy, cx, spec.extent * s);
            }
            AnomalyType::BrightStripe | AnomalyType::Scratch => {
                capsule_mask(
                    &mut mask,
                    cy,
                    cx,
                    spec.extent * s,
                    spec.thickness * s / 2.0,
                    spec.orientation,
                );
            }
        }
        Ok(mask)
    }

    /// Caption for a spec. Template 0: `<category> with <phrase>`;
    /// template 1 prefixes the article. Normal specs always caption as
    /// `a normal <category>`.
    pub fn caption_for(&self, spec: &DefectSpec) -> String {
        if spec.anomaly_type == AnomalyType::None {
            return format!("a normal {}", spec.category);
        }
        let phrase = match spec.anomaly_type {
            AnomalyType::DarkBlob => "dark blob",
            AnomalyType::BrightStripe => "bright stripe",
            AnomalyType::Scratch => "thin scratch",
            AnomalyType::MissingPart => "missing part",
            AnomalyType::WrongCount => "wrong count of objects",
            AnomalyType::None => unreachable!(),
        };
        match spec.caption_template {
            0 => format!("{} with {}", spec.category, phrase),
            _ => format!("a {} with {}", spec.category, phrase),
        }
    }

    fn validate_spec(&self, spec: &DefectSpec) -> Result<()> {
        let invalid = |field: &str, msg: String| {
            Error::Invalid(format!("invalid defect spec: field `{field}`: {msg}"))
        };
        self.object_centers(&spec.category)
            .map_err(|_| invalid("category", format!("unknown category `{}`", spec.category)))?;
        for (name, v) in [("center.0", spec.center.0), ("center.1", spec.center.1)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid(name, format!("{v} outside (0, 1]")));
            }
        }
        if !(spec.extent > 0.0 && spec.extent <= 1.0) {
            return Err(invalid("extent", format!("{} outside (0, 1]", spec.extent)));
        }
        if spec.anomaly_type == AnomalyType::BrightStripe || spec.anomaly_type == AnomalyType::Scratch
        {
            if !(spec.thickness > 0.0 && spec.thickness <= 0.5) {
                return Err(invalid(
                    "thickness",
                    format!("{} outside (0, 0.5]", spec.thickness),
                ));
            }
        }
        if !(0.0..=1.0).contains(&spec.intensity) {
            return Err(invalid(
                "intensity",
                format!("{} outside [0, 1]", spec.intensity),
            ));
        }
        if spec.caption_template > 1 {
            return Err(invalid(
                "caption_template",
                format!("{} is not a known template", spec.caption_template),
            ));
        }
        if spec.anomaly_type == AnomalyType::MissingPart {
            let centers = self.object_centers(&spec.category)?;
            let close = centers.iter().any(|(cy, cx)| {
                (cy - spec.center.0).abs() < 0.02 && (cx - spec.center.1).abs() < 0.02
            });
            if !close {
                return Err(invalid(
                    "center",
                    "missing_part must target an object center".into(),
                ));
            }
            let needed = OBJECT_RADIUS_FRAC * self.scale() + 0.75;
            if spec.extent * self.scale() < needed {
                return Err(invalid(
                    "extent",
                    format!(
                        "missing_part mask radius {:.2}px does not cover the object ({needed:.2}px needed)",
                        spec.extent * self.scale()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Generate one sample. Pure function of `(spec, seed)`: the seed drives
    /// only the in-mask intensity jitter.
    pub fn generate(&self, spec: &DefectSpec, seed: u64) -> Result<CaptionedSample> {
        let mask = self.defect_mask(spec)?;
        let base = self.base_image(&spec.category)?;
        let mut image = base.clone();
        let mut rng = crate::rng::stream(seed, crate::rng::ns::CORPUS, 0);

        let (h, w) = (self.height, self.width);
        match spec.anomaly_type {
            AnomalyType::None => {}
            AnomalyType::DarkBlob => {
                let depth = 0.45 + 0.20 * spec.intensity;
                paint_masked(&mut image, &mask, &mut rng, 0.02, |b, n| b * (1.0 - depth) + n);
            }
            AnomalyType::Scratch => {
                let depth = 0.40 + 0.30 * spec.intensity;
                paint_masked(&mut image, &mask, &mut rng, 0.015, |b, n| {
                    b * (1.0 - depth) + n
                });
            }
            AnomalyType::BrightStripe => {
                let lift = 0.16 + 0.12 * spec.intensity;
                paint_masked(&mut image, &mask, &mut rng, 0.015, |b, n| b + lift + n);
            }
            AnomalyType::WrongCount => {
                let level = OBJECT_INTENSITY + 0.06 * (spec.intensity - 0.5);
                paint_masked(&mut image, &mask, &mut rng, 0.02, |_, n| level + n);
            }
            AnomalyType::MissingPart => {
                // Repaint the background formula under the removed object.
                let mut background = match spec.category.as_str() {
                    "plate" => {
                        let (ch, cw) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
                        let sigma = 0.35 * h.min(w) as f64;
                        Array2::from_shape_fn((h, w), |(i, j)| {
                            let r2 = (i as f64 - ch).powi(2) + (j as f64 - cw).powi(2);
                            0.36 + 0.10 * (-r2 / (2.0 * sigma * sigma)).exp()
                        })
                    }
                    _ => Array2::from_shape_fn((h, w), |(_, j)| {
                        let phase = 2.0 * std::f64::consts::PI * 2.0 * j as f64 / w as f64;
                        0.34 + 0.06 * phase.sin()
                    }),
                };
                let jitter = Array2::from_shape_fn((h, w), |_| rng.gen_range(-0.01..0.01));
                background += &jitter;
                for ((i, j), m) in mask.indexed_iter() {
                    if *m != 0.0 {
                        image[(i, j)] = background[(i, j)];
                    }
                }
            }
        }

        // Quantize only inside the mask; outside stays bit-identical to base.
        for ((i, j), m) in mask.indexed_iter() {
            if *m != 0.0 {
                image[(i, j)] = quantize_intensity(image[(i, j)]);
            }
        }

        let sample = CaptionedSample {
            id: format!("{}-{}-{seed:016x}", spec.category, spec.anomaly_type),
            image,
            mask,
            caption: self.caption_for(spec),
            category: spec.category.clone(),
            anomaly_type: spec.anomaly_type,
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Draw a defect spec of the requested type whose geometry keeps clear of
    /// the category's objects, so structural defects never cut or merge them.
    pub fn sample_spec(
        &self,
        category: &str,
        anomaly_type: AnomalyType,
        rng: &mut ChaCha8Rng,
    ) -> Result<DefectSpec> {
        let centers = self.object_centers(category)?;
        let s = self.scale();
        let r_obj = OBJECT_RADIUS_FRAC * s;
        let mut spec = DefectSpec::normal(category);
        spec.anomaly_type = anomaly_type;
        spec.intensity = rng.gen_range(0.3..0.7);
        spec.caption_template = rng.gen_range(0..2u32) as usize;

        match anomaly_type {
            AnomalyType::None => {}
            AnomalyType::MissingPart => {
                let idx = rng.gen_range(0..centers.len());
                spec.center = centers[idx];
                // Object radius plus a one-pixel rim, in fraction units.
                spec.extent = OBJECT_RADIUS_FRAC + 1.0 / s;
            }
            AnomalyType::DarkBlob | AnomalyType::WrongCount => {
                spec.extent = rng.gen_range(0.08..0.13);
                let r = spec.extent * s;
                spec.center = place_clear(rng, |cy, cx| {
                    centers.iter().all(|(oy, ox)| {
                        let d = ((cy - oy) * self.height as f64).hypot((cx - ox) * self.width as f64);
                        d >= r_obj + r + 2.0
                    })
                })
                .unwrap_or((0.5, 0.5));
            }
            AnomalyType::BrightStripe | AnomalyType::Scratch => {
                spec.extent = rng.gen_range(0.15..0.25);
                spec.thickness = rng.gen_range(0.055..0.10);
                let half_len = spec.extent * s;
                let half_w = spec.thickness * s / 2.0;
                let mut placed = false;
                for _ in 0..200 {
                    let cy = rng.gen_range(0.30..0.70);
                    let cx = rng.gen_range(0.30..0.70);
                    let theta = rng.gen_range(0.0..std::f64::consts::PI);
                    let clear = centers.iter().all(|(oy, ox)| {
                        let d = segment_distance(
                            (oy * self.height as f64, ox * self.width as f64),
                            (cy * self.height as f64, cx * self.width as f64),
                            theta,
                            half_len,
                        );
                        d >= r_obj + half_w + 2.0
                    });
                    if clear {
                        spec.center = (cy, cx);
                        spec.orientation = theta;
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    // Horizontal capsule through a known free band.
                    spec.center = if category == "strip" { (0.25, 0.5) } else { (0.5, 0.5) };
                    spec.orientation = std::f64::consts::FRAC_PI_2;
                }
            }
        }
        Ok(spec)
    }
}

fn place_clear<F>(rng: &mut ChaCha8Rng, clear: F) -> Option<(f64, f64)>
where
    F: Fn(f64, f64) -> bool,
{
    for _ in 0..200 {
        let cy = rng.gen_range(0.18..0.82);
        let cx = rng.gen_range(0.18..0.82);
        if clear(cy, cx) {
            return Some((cy, cx));
        }
    }
    None
}

/// Distance from a point to the capsule's center segment.
fn segment_distance(point: (f64, f64), center: (f64, f64), theta: f64, half_len: f64) -> f64 {
    let (dy, dx) = (theta.sin(), theta.cos());
    let (py, px) = (point.0 - center.0, point.1 - center.1);
    let proj = (py * dy + px * dx).clamp(-half_len, half_len);
    let (qy, qx) = (center.0 + proj * dy, center.1 + proj * dx);
    (point.0 - qy).hypot(point.1 - qx)
}

fn disc_mask(mask: &mut Array2<f64>, cy: f64, cx: f64, radius: f64) {
    let (h, w) = mask.dim();
    for i in 0..h {
        for j in 0..w {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            if d2 < radius * radius {
                mask[(i, j)] = 1.0;
            }
        }
    }
}

fn capsule_mask(
    mask: &mut Array2<f64>,
    cy: f64,
    cx: f64,
    half_len: f64,
    half_width: f64,
    theta: f64,
) {
    let (h, w) = mask.dim();
    for i in 0..h {
        for j in 0..w {
            let d = segment_distance((i as f64, j as f64), (cy, cx), theta, half_len);
            if d < half_width.max(0.6) {
                mask[(i, j)] = 1.0;
            }
        }
    }
}

fn paint_disc(img: &mut Array2<f64>, cy: f64, cx: f64, radius: f64, value: f64) {
    let (h, w) = img.dim();
    for i in 0..h {
        for j in 0..w {
            let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
            if d2 < radius * radius {
                img[(i, j)] = value;
            }
        }
    }
}

/// Apply `f(base_value, noise)` at every mask pixel, with noise uniform in
/// `[-amp, amp]` drawn in row-major order.
fn paint_masked<F>(
    img: &mut Array2<f64>,
    mask: &Array2<f64>,
    rng: &mut ChaCha8Rng,
    amp: f64,
    f: F,
) where
    F: Fn(f64, f64) -> f64,
{
    let (h, w) = img.dim();
    for i in 0..h {
        for j in 0..w {
            if mask[(i, j)] != 0.0 {
                let n = rng.gen_range(-amp..amp);
                img[(i, j)] = f(img[(i, j)], n);
            }
        }
    }
}
