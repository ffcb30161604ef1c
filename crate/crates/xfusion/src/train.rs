//! Denoiser training: stochastic gradient steps on
//! `mean((eps - eps_hat(x_t, e_t, t))^2)` over the full image grid.
//!
//! Per sample: draw `t` uniform in `1..=T` and fresh noise, form `x_t` by the
//! closed-form forward jump, build the conditioning from the sample's
//! caption/mask/image, and differentiate through every trainable component.
//! Frozen blocks never receive updates.
//!
//! Batches parallelize over samples with one derived RNG stream per
//! `(step, slot)`, and per-slot gradients are reduced in slot order, so the
//! result is bit-identical regardless of worker count.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TexturalMode};
use crate::corpus::{AnomalyType, CaptionedSample};
use crate::diffusion::standard_normal_like;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::model::Model;
use crate::params::{Adam, Gradients};
use crate::rng;

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// `(step, mean batch loss)` per step, in order.
    pub loss_log: Vec<(usize, f64)>,
}

/// Train a fresh model on the anomalous subset of `corpus`.
pub fn train(corpus: &[CaptionedSample], config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (model, mut store) = Model::new(config)?;
    let (h, w) = (config.image.height, config.image.width);

    let anomalous: Vec<&CaptionedSample> = corpus
        .iter()
        .filter(|s| s.anomaly_type != AnomalyType::None)
        .collect();
    if anomalous.is_empty() {
        return Err(Error::data(
            "training corpus has no anomalous samples".to_string(),
        ));
    }
    for s in &anomalous {
        if s.image.dim() != (h, w) {
            return Err(Error::data(format!(
                "sample `{}` has shape {:?}, config expects ({h}, {w})",
                s.id,
                s.image.dim()
            )));
        }
    }

    if config.textural_mode == TexturalMode::InitOnly {
        // The learnable token block starts from the corpus-mean texture
        // statistics, then trains freely.
        let mut mean = Array2::<f64>::zeros((config.embedding.k, config.embedding.d));
        for s in &anomalous {
            let block = model.encoders.encode_textural(&s.image, &s.mask, &store)?;
            mean += &block.tokens;
        }
        mean /= anomalous.len() as f64;
        store.set("tex.token", mean.into_dyn());
    }

    let t_max = model.schedule.t_max();
    let batch = config.optimizer.batch_size;
    let mut adam = Adam::new(config.optimizer.learning_rate);
    let mut batch_rng = rng::stream(config.seeds.train, rng::ns::TRAIN_BATCH, 0);
    let mut loss_log = Vec::with_capacity(config.optimizer.steps);

    for step in 0..config.optimizer.steps {
        let indices: Vec<usize> = (0..batch)
            .map(|_| batch_rng.gen_range(0..anomalous.len()))
            .collect();

        let results: Vec<Result<(Gradients, f64)>> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let sample = anomalous[idx];
                let mut noise_rng = rng::stream(
                    config.seeds.train,
                    rng::ns::TRAIN_NOISE,
                    (step * batch + slot) as u64,
                );
                let t = noise_rng.gen_range(1..=t_max);
                let eps = standard_normal_like((h, w), &mut noise_rng);
                let x_t =
                    crate::diffusion::forward_sample(&sample.image, t, &eps, &model.schedule)?;

                let mut g = ModelGraph::new(&store);
                let loss = model.loss_graph(
                    &mut g,
                    &sample.caption,
                    &sample.mask,
                    &sample.image,
                    &x_t,
                    t,
                    &eps,
                )?;
                g.backward(loss);
                Ok((g.grads(), g.tape.scalar(loss)))
            })
            .collect();

        let mut grads = Gradients::new();
        let mut loss_sum = 0.0;
        for r in results {
            let (g, l) = r?;
            grads.merge(g);
            loss_sum += l;
        }
        grads.scale(1.0 / batch as f64);
        let mean_loss = loss_sum / batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                learning_rate: config.optimizer.learning_rate,
                loss: mean_loss,
            });
        }
        adam.update(&mut store, &grads);
        loss_log.push((step, mean_loss));
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            store,
            rng_seed: config.seeds.train,
            train_steps: config.optimizer.steps,
        },
        loss_log,
    })
}

/// Render the loss log as the on-disk CSV format (`step,loss` header line).
pub fn loss_log_csv(log: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in log {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}
