//! Generation-quality metrics and the downstream utility study.
//!
//! The metrics keep the form of the usual generative-model measures while
//! replacing pretrained feature networks with artifacts this crate owns:
//! sharpness/coverage as `exp(mean KL(p(y|x) || p(y)))` over the rule-based
//! oracle's class probabilities, diversity as mean pairwise distance in a
//! fixed seeded random-projection patch-feature space, and segmentation
//! quality as pixel AUROC / AP / F1-max of a small net trained only on
//! generated samples.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SegmenterKind};
use crate::corpus::{oracle_probs, AnomalyType, CaptionedSample, Generator, ORACLE_CLASSES};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::params::{gaussian_init, Adam, ParamStore};
use crate::rng;

/// Pixels with |generated - base| above this count as changed.
pub const CHANGE_EPSILON: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Sharpness / coverage proxy
// ---------------------------------------------------------------------------

/// `exp(mean_x KL(p(y|x) || p(y)))` over class-probability rows.
/// Bounded by `[1, #classes]`.
pub fn inception_score(probs: &[[f64; 6]]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::Invalid(format!(
            "inception_score: need at least 2 samples, got {}",
            probs.len()
        )));
    }
    let n = probs.len() as f64;
    let mut marginal = [0.0f64; 6];
    for p in probs {
        for (m, v) in marginal.iter_mut().zip(p.iter()) {
            *m += v / n;
        }
    }
    let mut mean_kl = 0.0;
    for p in probs {
        let mut kl = 0.0;
        for (pi, qi) in p.iter().zip(marginal.iter()) {
            if *pi > 0.0 {
                kl += pi * (pi / qi).ln();
            }
        }
        mean_kl += kl / n;
    }
    Ok(mean_kl.exp())
}

/// Oracle class probabilities for a batch of samples against their category
/// bases.
pub fn oracle_prob_rows(
    samples: &[CaptionedSample],
    generator: &Generator,
) -> Result<Vec<[f64; 6]>> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut bases: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for s in samples {
        if !bases.contains_key(&s.category) {
            bases.insert(s.category.clone(), generator.base_image(&s.category)?);
        }
        rows.push(oracle_probs(&s.image, &bases[&s.category])?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Diversity proxy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_cluster: BTreeMap<String, f64>,
    pub mean: f64,
    pub skipped_singletons: usize,
}

/// Project an image into the fixed patch-feature space: every 4x4 tile is
/// mapped through one seeded 16 -> 4 Gaussian matrix.
pub fn patch_projection(image: &Array2<f64>) -> Vec<f64> {
    let (h, w) = image.dim();
    let (th, tw) = (h / 4, w / 4);
    let mut proj_rng = rng::stream(0, rng::ns::DIVERSITY, 0);
    let proj: Vec<f64> = (0..(16 * 4))
        .map(|_| proj_rng.sample::<f64, _>(rand_distr::StandardNormal) / 4.0)
        .collect();
    let mut features = Vec::with_capacity(th * tw * 4);
    for ti in 0..th {
        for tj in 0..tw {
            let mut tile = [0.0f64; 16];
            for di in 0..4 {
                for dj in 0..4 {
                    tile[di * 4 + dj] = image[(ti * 4 + di, tj * 4 + dj)];
                }
            }
            for o in 0..4 {
                let mut acc = 0.0;
                for (i, t) in tile.iter().enumerate() {
                    acc += t * proj[i * 4 + o];
                }
                features.push(acc);
            }
        }
    }
    features
}

fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean over clusters of the mean pairwise feature distance. Clusters with
/// fewer than two members are skipped and counted.
pub fn diversity_proxy(
    clusters: &BTreeMap<String, Vec<&Array2<f64>>>,
) -> Result<DiversityReport> {
    let mut per_cluster = BTreeMap::new();
    let mut skipped = 0usize;
    for (key, members) in clusters {
        if members.len() < 2 {
            skipped += 1;
            continue;
        }
        let features: Vec<Vec<f64>> = members.iter().map(|m| patch_projection(m)).collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..features.len() {
            for j in (i + 1)..features.len() {
                total += feature_distance(&features[i], &features[j]);
                pairs += 1;
            }
        }
        per_cluster.insert(key.clone(), total / pairs as f64);
    }
    if per_cluster.is_empty() {
        return Err(Error::Invalid(
            "diversity_proxy: no cluster has at least 2 members".into(),
        ));
    }
    let mean = per_cluster.values().sum::<f64>() / per_cluster.len() as f64;
    Ok(DiversityReport {
        per_cluster,
        mean,
        skipped_singletons: skipped,
    })
}

/// Group samples by `(category, anomaly_type)` for the diversity metric.
pub fn condition_clusters(
    samples: &[CaptionedSample],
) -> BTreeMap<String, Vec<&Array2<f64>>> {
    let mut clusters: BTreeMap<String, Vec<&Array2<f64>>> = BTreeMap::new();
    for s in samples {
        clusters
            .entry(format!("{}/{}", s.category, s.anomaly_type))
            .or_default()
            .push(&s.image);
    }
    clusters
}

// ---------------------------------------------------------------------------
// Mask fidelity
// ---------------------------------------------------------------------------

/// Fraction of changed pixels that lie inside the mask; 1.0 (with a warning
/// flag) when nothing changed at all.
pub fn mask_fidelity(
    generated: &Array2<f64>,
    base: &Array2<f64>,
    mask: &Array2<f64>,
) -> Result<(f64, bool)> {
    if generated.dim() != base.dim() || generated.dim() != mask.dim() {
        return Err(Error::shape(
            "mask_fidelity",
            format!("{:?}", generated.dim()),
            format!("base {:?}, mask {:?}", base.dim(), mask.dim()),
        ));
    }
    let mut changed = 0usize;
    let mut inside = 0usize;
    for ((i, j), g) in generated.indexed_iter() {
        if (g - base[(i, j)]).abs() > CHANGE_EPSILON {
            changed += 1;
            if mask[(i, j)] != 0.0 {
                inside += 1;
            }
        }
    }
    if changed == 0 {
        return Ok((1.0, true));
    }
    Ok((inside as f64 / changed as f64, false))
}

// ---------------------------------------------------------------------------
// Threshold-free segmentation metrics
// ---------------------------------------------------------------------------

/// Tie-aware AUROC via the rank statistic: equal scores contribute 1/2 per
/// (positive, negative) pair, exactly like the brute-force pairwise count.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid("auroc: scores/labels length mismatch".into()));
    }
    let p = labels.iter().filter(|l| **l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Invalid(
            "auroc: need both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Average 1-based rank across the tie group [i, j].
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (p as f64) * (p as f64 + 1.0) / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Average precision over descending-score threshold groups.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let p_total = labels.iter().filter(|l| **l).count();
    if p_total == 0 {
        return Err(Error::Invalid("average_precision: no positives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..=j].iter().filter(|&&idx| labels[idx]).count();
        tp += group_pos;
        fp += (j - i + 1) - group_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += group_pos as f64 / p_total as f64 * precision;
        i = j + 1;
    }
    Ok(ap)
}

/// Best F1 over 256 evenly spaced thresholds spanning the score range.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let p_total = labels.iter().filter(|l| **l).count();
    if p_total == 0 {
        return Err(Error::Invalid("f1_max: no positives".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best = 0.0f64;
    for step in 0..256 {
        let thr = lo + (hi - lo) * step as f64 / 255.0;
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fne = 0usize;
        for (s, l) in scores.iter().zip(labels.iter()) {
            let pred = *s >= thr;
            match (pred, *l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        let f1 = if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fne as f64)
        };
        best = best.max(f1);
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Downstream nets
// ---------------------------------------------------------------------------

/// Image plus normalized coordinate channels `(3, h, w)`. The base layouts
/// are position-locked, so the nets need coordinates to judge composition.
fn with_coords(image: &Array2<f64>) -> ArrayD<f64> {
    let (h, w) = image.dim();
    let mut out = ndarray::Array3::<f64>::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            out[(0, i, j)] = image[(i, j)];
            out[(1, i, j)] = i as f64 / h as f64;
            out[(2, i, j)] = j as f64 / w as f64;
        }
    }
    out.into_dyn()
}

struct SegNet {
    h: usize,
    w: usize,
}

impl SegNet {
    fn register(h: usize, w: usize, store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut conv = |name: &str, c_out: usize, c_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            store.register(
                &format!("seg.{name}.w"),
                gaussian_init(rng, &[c_out, c_in, 3, 3], 9 * c_in, 1.0),
                false,
            );
            store.register(&format!("seg.{name}.b"), ArrayD::zeros(vec![c_out]), false);
        };
        conv("enc0", 8, 3, rng);
        conv("down", 16, 8, rng);
        conv("mid", 16, 16, rng);
        conv("up", 8, 16, rng);
        // Zero-initialized head: the untrained net scores every pixel 0.
        store.register("seg.out.w", ArrayD::zeros(vec![1, 8, 3, 3]), false);
        store.register("seg.out.b", ArrayD::zeros(vec![1]), false);
        SegNet { h, w }
    }

    fn build(&self, g: &mut ModelGraph<'_>, input: crate::autodiff::Var) -> crate::autodiff::Var {
        let w0 = g.param("seg.enc0.w");
        let b0 = g.param("seg.enc0.b");
        let h0 = g.tape.conv2d(input, w0, b0, 1);
        let h0 = g.tape.silu(h0);
        let wd = g.param("seg.down.w");
        let bd = g.param("seg.down.b");
        let h1 = g.tape.conv2d(h0, wd, bd, 2);
        let h1 = g.tape.silu(h1);
        let wm = g.param("seg.mid.w");
        let bm = g.param("seg.mid.b");
        let h1 = g.tape.conv2d(h1, wm, bm, 1);
        let h1 = g.tape.silu(h1);
        let up = g.tape.upsample_nearest2(h1);
        let wu = g.param("seg.up.w");
        let bu = g.param("seg.up.b");
        let u0 = g.tape.conv2d(up, wu, bu, 1);
        let u0 = g.tape.silu(u0);
        let u0 = g.tape.add(u0, h0);
        let wo = g.param("seg.out.w");
        let bo = g.param("seg.out.b");
        g.tape.conv2d(u0, wo, bo, 1)
    }

    fn score(&self, store: &ParamStore, image: &Array2<f64>) -> Array2<f64> {
        let mut g = ModelGraph::new(store);
        let input = g.tape.leaf(with_coords(image));
        let out = self.build(&mut g, input);
        g.tape
            .value3(out)
            .into_shape_with_order((self.h, self.w))
            .expect("seg output reshape")
    }
}

struct ClassifierNet {
    flat: usize,
    classes: usize,
}

impl ClassifierNet {
    fn register(
        h: usize,
        w: usize,
        classes: usize,
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        store.register(
            "clf.conv1.w",
            gaussian_init(rng, &[8, 3, 3, 3], 27, 1.0),
            false,
        );
        store.register("clf.conv1.b", ArrayD::zeros(vec![8]), false);
        store.register(
            "clf.conv2.w",
            gaussian_init(rng, &[16, 8, 3, 3], 72, 1.0),
            false,
        );
        store.register("clf.conv2.b", ArrayD::zeros(vec![16]), false);
        let flat = 16 * (h / 4) * (w / 4);
        store.register(
            "clf.head.w",
            gaussian_init(rng, &[flat, classes], flat, 1.0),
            false,
        );
        store.register("clf.head.b", ArrayD::zeros(vec![1, classes]), false);
        ClassifierNet { flat, classes }
    }

    fn logits(&self, g: &mut ModelGraph<'_>, input: crate::autodiff::Var) -> crate::autodiff::Var {
        let w1 = g.param("clf.conv1.w");
        let b1 = g.param("clf.conv1.b");
        let h1 = g.tape.conv2d(input, w1, b1, 2);
        let h1 = g.tape.silu(h1);
        let w2 = g.param("clf.conv2.w");
        let b2 = g.param("clf.conv2.b");
        let h2 = g.tape.conv2d(h1, w2, b2, 2);
        let h2 = g.tape.silu(h2);
        let flat = g.tape.flatten_row(h2);
        debug_assert_eq!(g.tape.value(flat).len(), self.flat);
        let wh = g.param("clf.head.w");
        let bh = g.param("clf.head.b");
        g.tape.linear(flat, wh, bh)
    }

    fn predict(&self, store: &ParamStore, image: &Array2<f64>) -> usize {
        let mut g = ModelGraph::new(store);
        let input = g.tape.leaf(with_coords(image));
        let logits = self.logits(&mut g, input);
        let row = g.tape.value2(logits);
        let mut best = 0;
        for c in 1..self.classes {
            if row[(0, c)] > row[(0, best)] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub pixel_auroc: f64,
    pub ap: f64,
    pub f1max: f64,
    pub classifier_accuracy: f64,
    /// Classes present in the held-out set but absent from training (excluded
    /// from accuracy).
    pub excluded_classes: Vec<String>,
}

fn class_slot(t: AnomalyType) -> usize {
    ORACLE_CLASSES.iter().position(|c| *c == t).expect("known class")
}

/// Train the small nets on `generated` and score them on `heldout`.
pub fn downstream_eval(
    generated: &[CaptionedSample],
    heldout: &[CaptionedSample],
    config: &RunConfig,
) -> Result<DownstreamReport> {
    if generated.is_empty() || heldout.is_empty() {
        return Err(Error::Invalid(
            "downstream_eval: generated and held-out corpora must be nonempty".into(),
        ));
    }
    let (h, w) = (config.image.height, config.image.width);
    for s in generated.iter().chain(heldout.iter()) {
        if s.image.dim() != (h, w) {
            return Err(Error::data(format!(
                "sample `{}` has shape {:?}, config expects ({h}, {w})",
                s.id,
                s.image.dim()
            )));
        }
    }
    let gen_ids: std::collections::BTreeSet<&str> =
        generated.iter().map(|s| s.id.as_str()).collect();
    if heldout.iter().any(|s| gen_ids.contains(s.id.as_str())) {
        return Err(Error::Invalid(
            "downstream_eval: generated and held-out corpora overlap".into(),
        ));
    }

    // --- Segmentation ---
    let mut seg_store = ParamStore::new();
    let mut init_rng = rng::stream(config.seeds.eval, rng::ns::DOWNSTREAM, 0);
    let seg = SegNet::register(h, w, &mut seg_store, &mut init_rng);

    if config.eval.segmenter == SegmenterKind::Trained {
        let mut adam = Adam::new(config.eval.seg_learning_rate);
        let mut batch_rng = rng::stream(config.seeds.eval, rng::ns::DOWNSTREAM, 1);
        for _step in 0..config.eval.seg_steps {
            let mut grads = crate::params::Gradients::new();
            let mut _loss_acc = 0.0;
            for _ in 0..config.eval.seg_batch {
                let idx = batch_rng.gen_range(0..generated.len());
                let sample = &generated[idx];
                let mut g = ModelGraph::new(&seg_store);
                let input = g.tape.leaf(with_coords(&sample.image));
                let out = seg.build(&mut g, input);
                let target = g.tape.leaf(
                    sample
                        .mask
                        .clone()
                        .into_shape_with_order((1, h, w))
                        .expect("mask reshape")
                        .into_dyn(),
                );
                let loss = g.tape.mean_squared_error(out, target);
                g.backward(loss);
                _loss_acc += g.tape.scalar(loss);
                grads.merge(g.grads());
            }
            grads.scale(1.0 / config.eval.seg_batch as f64);
            adam.update(&mut seg_store, &grads);
        }
    }

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in heldout {
        let grid = match config.eval.segmenter {
            SegmenterKind::Oracle => s.mask.clone(),
            _ => seg.score(&seg_store, &s.image),
        };
        for ((i, j), v) in grid.indexed_iter() {
            scores.push(*v);
            labels.push(s.mask[(i, j)] != 0.0);
        }
    }
    let pixel_auroc = auroc(&scores, &labels)?;
    let ap = average_precision(&scores, &labels)?;
    let f1max = f1_max(&scores, &labels)?;

    // --- Classification ---
    let mut clf_store = ParamStore::new();
    let mut clf_rng = rng::stream(config.seeds.eval, rng::ns::DOWNSTREAM, 2);
    let clf = ClassifierNet::register(h, w, ORACLE_CLASSES.len(), &mut clf_store, &mut clf_rng);
    let trained_classes: std::collections::BTreeSet<usize> =
        generated.iter().map(|s| class_slot(s.anomaly_type)).collect();

    if config.eval.segmenter == SegmenterKind::Trained {
        let mut adam = Adam::new(config.eval.seg_learning_rate);
        let mut batch_rng = rng::stream(config.seeds.eval, rng::ns::DOWNSTREAM, 3);
        for _step in 0..config.eval.clf_steps {
            let mut grads = crate::params::Gradients::new();
            for _ in 0..config.eval.seg_batch {
                let idx = batch_rng.gen_range(0..generated.len());
                let sample = &generated[idx];
                let mut g = ModelGraph::new(&clf_store);
                let input = g.tape.leaf(with_coords(&sample.image));
                let logits = clf.logits(&mut g, input);
                let probs = g.tape.softmax_rows(logits);
                let mut onehot = Array2::<f64>::zeros((1, ORACLE_CLASSES.len()));
                onehot[(0, class_slot(sample.anomaly_type))] = 1.0;
                let target = g.tape.leaf2(onehot);
                let picked = g.tape.mul(probs, target);
                let p = g.tape.sum(picked);
                let logp = g.tape.log(p);
                let loss = g.tape.scale(logp, -1.0);
                g.backward(loss);
                grads.merge(g.grads());
            }
            grads.scale(1.0 / config.eval.seg_batch as f64);
            adam.update(&mut clf_store, &grads);
        }
    }

    let mut correct = 0usize;
    let mut counted = 0usize;
    let mut excluded: std::collections::BTreeSet<String> = Default::default();
    for s in heldout {
        let slot = class_slot(s.anomaly_type);
        if !trained_classes.contains(&slot) {
            excluded.insert(s.anomaly_type.to_string());
            continue;
        }
        counted += 1;
        if clf.predict(&clf_store, &s.image) == slot {
            correct += 1;
        }
    }
    let classifier_accuracy = if counted == 0 {
        0.0
    } else {
        correct as f64 / counted as f64
    };

    Ok(DownstreamReport {
        pixel_auroc,
        ap,
        f1max,
        classifier_accuracy,
        excluded_classes: excluded.into_iter().collect(),
    })
}

// ---------------------------------------------------------------------------
// Full report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub is_proxy: f64,
    pub diversity: DiversityReport,
    pub mask_fidelity_mean: f64,
    pub mask_fidelity_min: f64,
    /// Samples whose generated image did not change a single pixel.
    pub unchanged_warnings: usize,
    pub downstream: DownstreamReport,
    pub generated_count: usize,
    pub heldout_count: usize,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| {
            if !(v >= lo && v <= hi) {
                return Err(Error::Invalid(format!(
                    "metric `{name}` = {v} outside [{lo}, {hi}]"
                )));
            }
            Ok(())
        };
        check("is_proxy", self.is_proxy, 1.0 - 1e-9, 6.0 + 1e-9)?;
        check("mask_fidelity_mean", self.mask_fidelity_mean, 0.0, 1.0)?;
        check("pixel_auroc", self.downstream.pixel_auroc, 0.0, 1.0)?;
        check("ap", self.downstream.ap, 0.0, 1.0)?;
        check("f1max", self.downstream.f1max, 0.0, 1.0)?;
        check(
            "classifier_accuracy",
            self.downstream.classifier_accuracy,
            0.0,
            1.0,
        )?;
        if self.generated_count == 0 || self.heldout_count == 0 {
            return Err(Error::Invalid("metric report with zero sample counts".into()));
        }
        Ok(())
    }

    /// Fixed-order human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<26} {:>12}\n", "metric", "value"));
        out.push_str(&format!("{:<26} {:>12.4}\n", "is_proxy", self.is_proxy));
        out.push_str(&format!("{:<26} {:>12.4}\n", "diversity_mean", self.diversity.mean));
        for (k, v) in &self.diversity.per_cluster {
            out.push_str(&format!("{:<26} {:>12.4}\n", format!("diversity[{k}]"), v));
        }
        out.push_str(&format!(
            "{:<26} {:>12.4}\n",
            "mask_fidelity_mean", self.mask_fidelity_mean
        ));
        out.push_str(&format!(
            "{:<26} {:>12.4}\n",
            "mask_fidelity_min", self.mask_fidelity_min
        ));
        out.push_str(&format!("{:<26} {:>12.4}\n", "pixel_auroc", self.downstream.pixel_auroc));
        out.push_str(&format!("{:<26} {:>12.4}\n", "ap", self.downstream.ap));
        out.push_str(&format!("{:<26} {:>12.4}\n", "f1max", self.downstream.f1max));
        out.push_str(&format!(
            "{:<26} {:>12.4}\n",
            "classifier_accuracy", self.downstream.classifier_accuracy
        ));
        out.push_str(&format!("{:<26} {:>12}\n", "generated_count", self.generated_count));
        out.push_str(&format!("{:<26} {:>12}\n", "heldout_count", self.heldout_count));
        out
    }
}

/// Compute the full report for a generated corpus against a held-out one.
pub fn evaluate(
    generated: &[CaptionedSample],
    heldout: &[CaptionedSample],
    config: &RunConfig,
) -> Result<MetricReport> {
    let generator = Generator::new(config.image.height, config.image.width);
    let probs = oracle_prob_rows(generated, &generator)?;
    let is_proxy = inception_score(&probs)?;

    let clusters = condition_clusters(generated);
    let diversity = diversity_proxy(&clusters)?;

    let mut fid_sum = 0.0;
    let mut fid_min = f64::INFINITY;
    let mut unchanged = 0usize;
    let mut bases: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for s in generated {
        if !bases.contains_key(&s.category) {
            bases.insert(s.category.clone(), generator.base_image(&s.category)?);
        }
        let (fid, warned) = mask_fidelity(&s.image, &bases[&s.category], &s.mask)?;
        fid_sum += fid;
        fid_min = fid_min.min(fid);
        if warned {
            unchanged += 1;
        }
    }

    let downstream = downstream_eval(generated, heldout, config)?;
    let report = MetricReport {
        is_proxy,
        diversity,
        mask_fidelity_mean: fid_sum / generated.len() as f64,
        mask_fidelity_min: fid_min,
        unchanged_warnings: unchanged,
        downstream,
        generated_count: generated.len(),
        heldout_count: heldout.len(),
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn onehot(class: usize) -> [f64; 6] {
        let mut p = [0.0; 6];
        p[class] = 1.0;
        p
    }

    #[test]
    fn identical_onehots_score_one() {
        let probs = vec![onehot(2); 10];
        let is = inception_score(&probs).unwrap();
        assert!((is - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_onehots_over_five_classes_score_five() {
        // Classes 1..=5 equally often: marginal uniform over 5, each KL =
        // ln(5), IS = 5.
        let mut probs = Vec::new();
        for class in 1..=5 {
            for _ in 0..4 {
                probs.push(onehot(class));
            }
        }
        let is = inception_score(&probs).unwrap();
        assert!((is - 5.0).abs() < 1e-9, "{is}");
    }

    #[test]
    fn inception_score_requires_two_samples() {
        assert!(inception_score(&[]).is_err());
        assert!(inception_score(&[onehot(0)]).is_err());
    }

    proptest! {
        #[test]
        fn inception_score_bounds(rows in proptest::collection::vec(
            proptest::collection::vec(0.01f64..1.0, 6),
            2..20,
        )) {
            let probs: Vec<[f64; 6]> = rows
                .into_iter()
                .map(|r| {
                    let total: f64 = r.iter().sum();
                    let mut p = [0.0; 6];
                    for (pi, v) in p.iter_mut().zip(r.iter()) {
                        *pi = v / total;
                    }
                    p
                })
                .collect();
            let is = inception_score(&probs).unwrap();
            prop_assert!(is >= 1.0 - 1e-9);
            prop_assert!(is <= 6.0 + 1e-9);
        }
    }

    #[test]
    fn diversity_zero_for_identical_images_and_larger_for_noise() {
        let same = Array2::<f64>::from_elem((16, 16), 0.5);
        let mut clusters: BTreeMap<String, Vec<&Array2<f64>>> = BTreeMap::new();
        let copies = vec![same.clone(), same.clone(), same.clone()];
        clusters.insert("same".into(), copies.iter().collect());

        let mut noisy = Vec::new();
        for i in 0..3u64 {
            let mut rng = rng::stream(i, 0xD0, 0);
            noisy.push(Array2::from_shape_simple_fn((16, 16), || {
                rng.gen_range(0.0..1.0)
            }));
        }
        clusters.insert("noise".into(), noisy.iter().collect());

        let report = diversity_proxy(&clusters).unwrap();
        assert_eq!(report.per_cluster["same"], 0.0);
        assert!(report.per_cluster["noise"] > report.per_cluster["same"]);
        assert_eq!(report.skipped_singletons, 0);
    }

    #[test]
    fn diversity_skips_singletons_with_count() {
        let a = Array2::<f64>::zeros((16, 16));
        let b = Array2::<f64>::ones((16, 16));
        let mut clusters: BTreeMap<String, Vec<&Array2<f64>>> = BTreeMap::new();
        clusters.insert("solo".into(), vec![&a]);
        clusters.insert("pair".into(), vec![&a, &b]);
        let report = diversity_proxy(&clusters).unwrap();
        assert_eq!(report.skipped_singletons, 1);
        assert!(!report.per_cluster.contains_key("solo"));
    }

    #[test]
    fn feature_distance_is_symmetric() {
        let mut rng = rng::stream(5, 0xD1, 0);
        let a = Array2::from_shape_simple_fn((16, 16), || rng.gen_range(0.0..1.0));
        let b = Array2::from_shape_simple_fn((16, 16), || rng.gen_range(0.0..1.0));
        let (fa, fb) = (patch_projection(&a), patch_projection(&b));
        assert_eq!(feature_distance(&fa, &fb), feature_distance(&fb, &fa));
    }

    #[test]
    fn mask_fidelity_cases() {
        let base = Array2::<f64>::from_elem((8, 8), 0.5);
        let mut mask = Array2::<f64>::zeros((8, 8));
        mask[(2, 2)] = 1.0;
        mask[(2, 3)] = 1.0;

        // Nothing changed: 1.0 with warning.
        let (fid, warned) = mask_fidelity(&base, &base, &mask).unwrap();
        assert_eq!(fid, 1.0);
        assert!(warned);

        // One inside-mask change: 1.0, no warning.
        let mut gen = base.clone();
        gen[(2, 2)] = 0.9;
        let (fid, warned) = mask_fidelity(&gen, &base, &mask).unwrap();
        assert_eq!(fid, 1.0);
        assert!(!warned);

        // One inside, one outside: 0.5.
        gen[(5, 5)] = 0.9;
        let (fid, _) = mask_fidelity(&gen, &base, &mask).unwrap();
        assert_eq!(fid, 0.5);
    }

    /// Brute-force pairwise AUROC (ties count 1/2), the independent oracle.
    fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (si, li)) in scores.iter().zip(labels).enumerate() {
            if !li {
                continue;
            }
            for (sj, lj) in scores.iter().zip(labels) {
                if *lj {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
            let _ = i;
        }
        wins / pairs
    }

    #[test]
    fn auroc_perfect_and_tied_cases() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert!((auroc(&scores, &labels).unwrap() - 1.0).abs() < 1e-15);

        let tied = [0.5, 0.5, 0.5, 0.5];
        assert!((auroc(&tied, &labels).unwrap() - 0.5).abs() < 1e-15);
    }

    proptest! {
        /// The rank-based routine equals the O(P*N) pairwise oracle.
        #[test]
        fn auroc_matches_bruteforce(
            scores in proptest::collection::vec(-3.0f64..3.0, 10..60),
            flips in proptest::collection::vec(proptest::bool::ANY, 10..60),
        ) {
            let n = scores.len().min(flips.len());
            // Quantize scores so ties actually occur.
            let scores: Vec<f64> = scores[..n].iter().map(|s| (s * 4.0).round() / 4.0).collect();
            let mut labels = flips[..n].to_vec();
            if labels.iter().all(|l| *l) {
                labels[0] = false;
            }
            if labels.iter().all(|l| !*l) {
                labels[0] = true;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let slow = pairwise_auroc(&scores, &labels);
            prop_assert!((fast - slow).abs() < 1e-9, "fast {} vs slow {}", fast, slow);
        }
    }

    #[test]
    fn random_scores_near_half_auroc() {
        let mut rng = rng::stream(77, 0xD2, 0);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let a = auroc(&scores, &labels).unwrap();
        assert!((a - 0.5).abs() < 0.02, "{a}");
    }

    #[test]
    fn average_precision_perfect_ranking_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert!((average_precision(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f1_max_finds_separating_threshold() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert!((f1_max(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
    }
}
