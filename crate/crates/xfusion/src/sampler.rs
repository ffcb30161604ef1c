//! Mask-blended ancestral sampling.
//!
//! Inside the mask the chain follows the learned reverse step; outside it the
//! grid is pinned to the forward-noised base image at the destination level
//! `t - 1`, so both branches sit at the same noise scale. At `t = 1` the
//! outside branch returns the base exactly, which is what makes generated
//! samples pixel-identical to their base outside the mask.
//!
//! Draw order per step is fixed: the reverse-step noise `z` first (skipped at
//! `t = 1`), then the background noise (also skipped at `t = 1`). The
//! initialization draws the inside-mask prior first, then the background
//! noise for level `T`.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{quantize_image, AnomalyType, CaptionedSample};
use crate::diffusion::{reverse_step, standard_normal_like};
use crate::error::{Error, Result};
use crate::fusion::XEmbedding;
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng;

fn check_binary_mask(mask: &Array2<f64>) -> Result<()> {
    for v in mask.iter() {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::Invalid(format!(
                "mask value {v} is not binary (expected exactly 0 or 1)"
            )));
        }
    }
    Ok(())
}

/// One blended reverse step (see module docs for the draw order).
pub fn blended_step(
    model: &Model,
    store: &ParamStore,
    x_t: &Array2<f64>,
    t: usize,
    e_t: &XEmbedding,
    x0: &Array2<f64>,
    mask: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if x_t.dim() != x0.dim() || x_t.dim() != mask.dim() {
        return Err(Error::shape(
            "blended_step",
            format!("{:?}", x_t.dim()),
            format!("x0 {:?}, mask {:?}", x0.dim(), mask.dim()),
        ));
    }
    check_binary_mask(mask)?;
    let eps_hat = model.denoise_predict(x_t, t, e_t, store)?;
    let inside = reverse_step(x_t, t, &eps_hat, &model.schedule, rng)?;
    let outside = noised_background(model, x0, t, rng);
    Ok(&(&inside * mask) + &(&outside * &(1.0 - mask)))
}

/// Background branch: the base image pushed to noise level `t - 1`
/// (`alpha_bar(0) = 1`, so `t = 1` returns the base exactly, with no draw).
fn noised_background(
    model: &Model,
    x0: &Array2<f64>,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    if t == 1 {
        return x0.clone();
    }
    let ab = model.schedule.alpha_bar(t - 1);
    let eps = standard_normal_like(x0.dim(), rng);
    x0 * ab.sqrt() + eps * (1.0 - ab).sqrt()
}

/// Run the full reverse chain and return the raw generated grid (clamped to
/// `[0, 1]` only by the caller). Pure function of `(inputs, seed)`.
pub fn sample_image(
    model: &Model,
    store: &ParamStore,
    base: &Array2<f64>,
    mask: &Array2<f64>,
    caption: &str,
    seed: u64,
) -> Result<Array2<f64>> {
    let (h, w) = (model.denoiser.height, model.denoiser.width);
    if base.dim() != (h, w) || mask.dim() != (h, w) {
        return Err(Error::shape(
            "sample",
            format!("({h}, {w})"),
            format!("base {:?}, mask {:?}", base.dim(), mask.dim()),
        ));
    }
    check_binary_mask(mask)?;
    if mask.iter().all(|v| *v == 0.0) {
        return Err(Error::Invalid("nothing to synthesize: all-zero mask".into()));
    }

    let e_x = model.embed(caption, mask, base, store)?;
    let t_max = model.schedule.t_max();
    let mut rng = rng::stream(seed, rng::ns::SAMPLE, 0);

    // x_T: standard-normal prior inside the mask, noised base outside.
    let prior = standard_normal_like((h, w), &mut rng);
    let ab_t = model.schedule.alpha_bar(t_max);
    let bg_eps = standard_normal_like((h, w), &mut rng);
    let background = base * ab_t.sqrt() + &bg_eps * (1.0 - ab_t).sqrt();
    let mut x = &(&prior * mask) + &(&background * &(1.0 - mask));

    for t in (1..=t_max).rev() {
        let e_t = model.dynamic_adjust(&e_x, t, store)?;
        x = blended_step(model, store, &x, t, &e_t, base, mask, &mut rng)?;
    }
    Ok(x)
}

/// What to synthesize: condition plus labels for the packaged record.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub id: String,
    pub caption: String,
    pub mask: Array2<f64>,
    pub category: String,
    pub anomaly_type: AnomalyType,
}

/// Generate one sample and package it as a corpus record (intensities are
/// clamped and quantized to the on-disk grid; pixels outside the mask stay
/// bit-identical to the base).
pub fn sample(
    model: &Model,
    store: &ParamStore,
    base: &Array2<f64>,
    request: &SampleRequest,
    seed: u64,
) -> Result<CaptionedSample> {
    let raw = sample_image(model, store, base, &request.mask, &request.caption, seed)?;
    let image = quantize_image(&raw);
    let sample = CaptionedSample {
        id: request.id.clone(),
        image,
        mask: request.mask.clone(),
        caption: request.caption.clone(),
        category: request.category.clone(),
        anomaly_type: request.anomaly_type,
    };
    sample.validate()?;
    Ok(sample)
}
