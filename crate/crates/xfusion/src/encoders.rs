//! Modality encoders: each turns one input modality into a fixed `k x d`
//! embedding block.
//!
//! - semantic: frozen seeded token-embedding table, mean-pooled over the
//!   caption, replicated to `k` rows, each row L2-normalized.
//! - location: trainable strided conv stack over the mask plus `k` affine
//!   heads (the only trainable encoder).
//! - textural: frozen projector over per-patch statistics of the masked
//!   image (mean, variance, gradient energy per 4x4 tile).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Var;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::params::{gaussian_init, ParamStore};
use crate::rng;

pub const UNK_TOKEN: &str = "<unk>";
const PATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Semantic,
    Location,
    Textural,
}

/// A `k x d` token matrix for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub tokens: Array2<f64>,
    pub modality: Modality,
}

impl EmbeddingBlock {
    pub fn shape(&self) -> (usize, usize) {
        self.tokens.dim()
    }
}

/// Encoder architecture: shapes, vocabulary, and the parameter names it
/// registered. Parameter values live in the shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoders {
    pub k: usize,
    pub d: usize,
    pub height: usize,
    pub width: usize,
    pub vocab: Vec<String>,
    conv_channels: (usize, usize),
}

/// Words used by the caption templates; the category names from the config
/// complete the closed vocabulary.
const TEMPLATE_WORDS: &[&str] = &[
    "a", "normal", "with", "dark", "blob", "bright", "stripe", "thin", "scratch", "missing",
    "part", "wrong", "count", "of", "objects",
];

pub fn build_vocab(categories: &[String]) -> Vec<String> {
    let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
    words.extend(categories.iter().cloned());
    words.sort();
    words.dedup();
    let mut vocab = vec![UNK_TOKEN.to_string()];
    vocab.extend(words);
    vocab
}

impl Encoders {
    /// Build the encoder architecture and register its parameter blocks.
    /// Frozen tables derive from fixed namespaces, so they depend only on the
    /// vocabulary and shapes, never on run seeds; trainable blocks initialize
    /// from `init_rng`.
    pub fn register(config: &RunConfig, store: &mut ParamStore, init_rng: &mut ChaCha8Rng) -> Self {
        let (k, d) = (config.embedding.k, config.embedding.d);
        let (h, w) = (config.image.height, config.image.width);
        let vocab = build_vocab(&config.corpus.categories);

        let mut sem_rng = rng::stream(0, rng::ns::FROZEN_SEMANTIC, 0);
        let table = gaussian_init(&mut sem_rng, &[vocab.len(), d], d, 1.0);
        store.register("sem.table", table, true);

        let (c1, c2) = (8, 16);
        store.register(
            "loc.conv1.w",
            gaussian_init(init_rng, &[c1, 1, 3, 3], 9, 1.0),
            false,
        );
        store.register("loc.conv1.b", ndarray::ArrayD::zeros(vec![c1]), false);
        store.register(
            "loc.conv2.w",
            gaussian_init(init_rng, &[c2, c1, 3, 3], 9 * c1, 1.0),
            false,
        );
        store.register("loc.conv2.b", ndarray::ArrayD::zeros(vec![c2]), false);
        let flat = c2 * (h / 4) * (w / 4);
        for head in 0..k {
            store.register(
                &format!("loc.head{head}.w"),
                gaussian_init(init_rng, &[flat, d], flat, 1.0),
                false,
            );
            store.register(
                &format!("loc.head{head}.b"),
                ndarray::ArrayD::zeros(vec![1, d]),
                false,
            );
        }

        let n_feat = 3 * (h / PATCH) * (w / PATCH);
        let mut tex_rng = rng::stream(0, rng::ns::FROZEN_TEXTURAL, 0);
        let proj = gaussian_init(&mut tex_rng, &[n_feat, d], n_feat, 1.0);
        store.register("tex.proj", proj, true);

        Encoders {
            k,
            d,
            height: h,
            width: w,
            vocab,
            conv_channels: (c1, c2),
        }
    }

    fn token_index(&self, token: &str) -> usize {
        self.vocab.iter().position(|v| v == token).unwrap_or(0)
    }

    /// Frozen text encoding: mean-pooled table rows, replicated, normalized.
    /// Unknown words map to the reserved `<unk>` row; an empty caption is an
    /// error.
    pub fn encode_semantic(&self, caption: &str, store: &ParamStore) -> Result<EmbeddingBlock> {
        let tokens: Vec<&str> = caption.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::Invalid("empty semantic input".into()));
        }
        let table = store
            .get("sem.table")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("sem.table is 2-d")
            .to_owned();
        let mut pooled = Array1::<f64>::zeros(self.d);
        for token in &tokens {
            let idx = self.token_index(&token.to_lowercase());
            pooled += &table.row(idx);
        }
        pooled /= tokens.len() as f64;
        let norm = pooled.dot(&pooled).sqrt();
        if norm < 1e-12 {
            return Err(Error::Invalid("semantic embedding has zero norm".into()));
        }
        let row = pooled.mapv(|v| v / norm);
        let mut out = Array2::<f64>::zeros((self.k, self.d));
        for mut r in out.rows_mut() {
            r.assign(&row);
        }
        Ok(EmbeddingBlock {
            tokens: out,
            modality: Modality::Semantic,
        })
    }

    fn check_mask(&self, mask: &Array2<f64>) -> Result<()> {
        if mask.dim() != (self.height, self.width) {
            return Err(Error::shape(
                "mask",
                format!("({}, {})", self.height, self.width),
                format!("{:?}", mask.dim()),
            ));
        }
        for v in mask.iter() {
            if *v != 0.0 && *v != 1.0 {
                return Err(Error::Invalid(format!(
                    "mask value {v} is not binary (expected exactly 0 or 1)"
                )));
            }
        }
        Ok(())
    }

    /// Differentiable location encoding graph: mask `(1, h, w)` leaf in,
    /// `(k, d)` block out. Training and inference share this builder.
    pub fn location_block(&self, g: &mut ModelGraph<'_>, mask: Var) -> Var {
        let w1 = g.param("loc.conv1.w");
        let b1 = g.param("loc.conv1.b");
        let w2 = g.param("loc.conv2.w");
        let b2 = g.param("loc.conv2.b");
        let h1 = g.tape.conv2d(mask, w1, b1, 2);
        let h1 = g.tape.silu(h1);
        let h2 = g.tape.conv2d(h1, w2, b2, 2);
        let h2 = g.tape.silu(h2);
        let flat = g.tape.flatten_row(h2);
        let mut rows = Vec::with_capacity(self.k);
        for head in 0..self.k {
            let w = g.param(&format!("loc.head{head}.w"));
            let b = g.param(&format!("loc.head{head}.b"));
            rows.push(g.tape.linear(flat, w, b));
        }
        g.tape.concat_rows(&rows)
    }

    /// Leaf for a mask grid in the `(1, h, w)` layout the conv stack expects.
    pub fn mask_leaf(&self, g: &mut ModelGraph<'_>, mask: &Array2<f64>) -> Var {
        g.tape.leaf(
            mask.clone()
                .into_shape_with_order((1, self.height, self.width))
                .expect("mask reshape")
                .into_dyn(),
        )
    }

    /// Trainable mask encoding (forward evaluation of [`location_block`]).
    pub fn encode_location(&self, mask: &Array2<f64>, store: &ParamStore) -> Result<EmbeddingBlock> {
        self.check_mask(mask)?;
        let mut g = ModelGraph::new(store);
        let leaf = self.mask_leaf(&mut g, mask);
        let block = self.location_block(&mut g, leaf);
        Ok(EmbeddingBlock {
            tokens: g.tape.value2(block),
            modality: Modality::Location,
        })
    }

    /// Per-patch statistics of `image * mask`: mean, population variance and
    /// mean squared forward-difference energy for every 4x4 tile, in
    /// row-major tile order.
    pub fn patch_statistics(&self, masked: &Array2<f64>) -> Array1<f64> {
        let (ph, pw) = (self.height / PATCH, self.width / PATCH);
        let mut feats = Array1::<f64>::zeros(3 * ph * pw);
        for pi in 0..ph {
            for pj in 0..pw {
                let mut sum = 0.0;
                let mut sum_sq = 0.0;
                let mut grad = 0.0;
                let mut grad_n = 0usize;
                for di in 0..PATCH {
                    for dj in 0..PATCH {
                        let (i, j) = (pi * PATCH + di, pj * PATCH + dj);
                        let v = masked[(i, j)];
                        sum += v;
                        sum_sq += v * v;
                        if di + 1 < PATCH {
                            let dy = masked[(i + 1, j)] - v;
                            grad += dy * dy;
                            grad_n += 1;
                        }
                        if dj + 1 < PATCH {
                            let dx = masked[(i, j + 1)] - v;
                            grad += dx * dx;
                            grad_n += 1;
                        }
                    }
                }
                let n = (PATCH * PATCH) as f64;
                let mean = sum / n;
                let var = (sum_sq / n - mean * mean).max(0.0);
                let idx = (pi * pw + pj) * 3;
                feats[idx] = mean;
                feats[idx + 1] = var;
                feats[idx + 2] = grad / grad_n.max(1) as f64;
            }
        }
        feats
    }

    /// Frozen texture encoding of the mask-selected image region. An all-zero
    /// mask yields the zero block by construction (zero statistics through a
    /// bias-free projection).
    pub fn encode_textural(
        &self,
        image: &Array2<f64>,
        mask: &Array2<f64>,
        store: &ParamStore,
    ) -> Result<EmbeddingBlock> {
        if image.dim() != mask.dim() {
            return Err(Error::shape(
                "encode_textural",
                format!("{:?}", image.dim()),
                format!("{:?}", mask.dim()),
            ));
        }
        self.check_mask(mask)?;
        let masked = image * mask;
        let feats = self.patch_statistics(&masked);
        let proj = store
            .get("tex.proj")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("tex.proj is 2-d")
            .to_owned();
        let row = feats.dot(&proj);
        let mut out = Array2::<f64>::zeros((self.k, self.d));
        for mut r in out.rows_mut() {
            r.assign(&row);
        }
        Ok(EmbeddingBlock {
            tokens: out,
            modality: Modality::Textural,
        })
    }

    pub fn conv_channels(&self) -> (usize, usize) {
        self.conv_channels
    }
}

/// Draw a random standard-normal block (handy for block comparisons in tests).
pub fn random_block(k: usize, d: usize, rng: &mut ChaCha8Rng, modality: Modality) -> EmbeddingBlock {
    EmbeddingBlock {
        tokens: Array2::from_shape_simple_fn((k, d), || rng.sample::<f64, _>(StandardNormal)),
        modality,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::relative_error;
    use crate::config::RunConfig;

    fn setup() -> (Encoders, ParamStore) {
        let config = RunConfig::default();
        let mut store = ParamStore::new();
        let mut rng = rng::stream(1, rng::ns::TRAIN_INIT, 0);
        let enc = Encoders::register(&config, &mut store, &mut rng);
        (enc, store)
    }

    #[test]
    fn semantic_normalization_matches_hand_case() {
        // A handcrafted table whose pooled vector is (3, 4, 0, ...):
        // both replicated rows must be (0.6, 0.8, 0, ...).
        let config = RunConfig::default();
        let mut store = ParamStore::new();
        let mut rng = rng::stream(1, rng::ns::TRAIN_INIT, 0);
        let mut enc = Encoders::register(&config, &mut store, &mut rng);
        enc.k = 2;
        let mut table = Array2::<f64>::zeros((enc.vocab.len(), enc.d));
        let idx = enc.token_index("plate");
        table[(idx, 0)] = 3.0;
        table[(idx, 1)] = 4.0;
        store.set("sem.table", table.into_dyn());

        let block = enc.encode_semantic("plate", &store).unwrap();
        assert_eq!(block.shape(), (2, enc.d));
        for row in block.tokens.rows() {
            assert!((row[0] - 0.6).abs() < 1e-12);
            assert!((row[1] - 0.8).abs() < 1e-12);
            assert!(row.iter().skip(2).all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn semantic_shape_and_row_norms() {
        let (enc, store) = setup();
        let block = enc.encode_semantic("plate with dark blob", &store).unwrap();
        assert_eq!(block.shape(), (4, 32));
        for row in block.tokens.rows() {
            let norm = row.dot(&row).sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn semantic_empty_caption_is_an_error() {
        let (enc, store) = setup();
        let err = enc.encode_semantic("   ", &store).unwrap_err().to_string();
        assert!(err.contains("empty semantic input"), "{err}");
    }

    #[test]
    fn distinct_captions_produce_distinct_blocks() {
        let (enc, store) = setup();
        let a = enc.encode_semantic("plate with dark blob", &store).unwrap();
        let b = enc.encode_semantic("plate with bright stripe", &store).unwrap();
        assert_ne!(a.tokens, b.tokens);
    }

    #[test]
    fn unknown_words_hit_the_unk_row() {
        let (enc, store) = setup();
        let a = enc.encode_semantic("zorp", &store).unwrap();
        let b = enc.encode_semantic(UNK_TOKEN, &store).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn location_zero_mask_zero_biases_gives_zero_block() {
        let (enc, store) = setup();
        // Initialization already zeroes conv and head biases.
        let mask = Array2::<f64>::zeros((32, 32));
        let block = enc.encode_location(&mask, &store).unwrap();
        assert_eq!(block.shape(), (4, 32));
        assert!(block.tokens.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn location_rejects_non_binary_and_misshaped_masks() {
        let (enc, store) = setup();
        let mut mask = Array2::<f64>::zeros((32, 32));
        mask[(0, 0)] = 0.3;
        assert!(enc.encode_location(&mask, &store).is_err());
        let mask = Array2::<f64>::zeros((16, 32));
        assert!(enc.encode_location(&mask, &store).is_err());
    }

    #[test]
    fn translated_masks_produce_distinct_blocks() {
        let (enc, store) = setup();
        let mut a = Array2::<f64>::zeros((32, 32));
        let mut b = Array2::<f64>::zeros((32, 32));
        for i in 4..9 {
            for j in 4..9 {
                a[(i, j)] = 1.0;
                b[(i + 12, j + 12)] = 1.0;
            }
        }
        let ba = enc.encode_location(&a, &store).unwrap();
        let bb = enc.encode_location(&b, &store).unwrap();
        assert_ne!(ba.tokens, bb.tokens);
    }

    #[test]
    fn textural_zero_mask_law() {
        let (enc, store) = setup();
        let image = Array2::from_elem((32, 32), 0.7);
        let mask = Array2::<f64>::zeros((32, 32));
        let block = enc.encode_textural(&image, &mask, &store).unwrap();
        assert!(block.tokens.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn textural_constant_image_has_zero_variance_features() {
        let (enc, store) = setup();
        let c = 0.37;
        let image = Array2::from_elem((32, 32), c);
        let mask = Array2::from_elem((32, 32), 1.0);
        let feats = enc.patch_statistics(&(&image * &mask));
        for tile in 0..(8 * 8) {
            assert!((feats[tile * 3] - c).abs() < 1e-12, "mean feature");
            assert_eq!(feats[tile * 3 + 1], 0.0, "variance feature");
            assert_eq!(feats[tile * 3 + 2], 0.0, "gradient feature");
        }
        // And the block equals the projector applied to those statistics.
        let block = enc.encode_textural(&image, &mask, &store).unwrap();
        let proj = store
            .get("tex.proj")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let expect = feats.dot(&proj);
        for row in block.tokens.rows() {
            for (a, b) in row.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disjoint_textures_produce_distinct_blocks() {
        let (enc, store) = setup();
        let g = crate::corpus::Generator::new(32, 32);
        let image = g.base_image("plate").unwrap();
        let mut m1 = Array2::<f64>::zeros((32, 32));
        let mut m2 = Array2::<f64>::zeros((32, 32));
        for i in 0..8 {
            for j in 0..8 {
                m1[(i, j)] = 1.0;
                m2[(i + 12, j + 12)] = 1.0;
            }
        }
        let b1 = enc.encode_textural(&image, &m1, &store).unwrap();
        let b2 = enc.encode_textural(&image, &m2, &store).unwrap();
        assert_ne!(b1.tokens, b2.tokens);
    }

    /// Analytic gradients of a scalar probe (sum of block entries) through
    /// the location encoder match central finite differences.
    #[test]
    fn location_encoder_gradient_check() {
        let (enc, store) = setup();
        let mut mask = Array2::<f64>::zeros((32, 32));
        for i in 10..20 {
            for j in 14..19 {
                mask[(i, j)] = 1.0;
            }
        }

        let probe = |store: &ParamStore| -> f64 {
            let mut g = ModelGraph::new(store);
            let leaf = enc.mask_leaf(&mut g, &mask);
            let block = enc.location_block(&mut g, leaf);
            let s = g.tape.sum(block);
            g.tape.scalar(s)
        };

        let mut g = ModelGraph::new(&store);
        let leaf = enc.mask_leaf(&mut g, &mask);
        let block = enc.location_block(&mut g, leaf);
        let total = g.tape.sum(block);
        g.backward(total);

        let mut rng = rng::stream(5, 0xE0, 0);
        let mut checked = 0;
        for name in ["loc.conv1.w", "loc.conv2.w", "loc.head0.w", "loc.head1.b"] {
            let analytic = g.grad_of(name);
            for _ in 0..6 {
                let idx = rng.gen_range(0..analytic.len());
                let base = store.get(name).clone();
                let mut plus = store.clone();
                let mut pb = base.clone();
                pb.as_slice_mut().unwrap()[idx] += 1e-3;
                plus.set(name, pb);
                let mut minus = store.clone();
                let mut mb = base.clone();
                mb.as_slice_mut().unwrap()[idx] -= 1e-3;
                minus.set(name, mb);
                let numeric = (probe(&plus) - probe(&minus)) / 2e-3;
                let a = analytic.as_slice().unwrap()[idx];
                assert!(
                    relative_error(a, numeric) < 1e-4,
                    "{name}[{idx}]: analytic {a} vs numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }

    #[test]
    fn frozen_tables_depend_only_on_shapes() {
        let (_, store_a) = setup();
        let config = RunConfig::default();
        let mut store_b = ParamStore::new();
        let mut other_rng = rng::stream(999, rng::ns::TRAIN_INIT, 7);
        Encoders::register(&config, &mut store_b, &mut other_rng);
        assert_eq!(store_a.block_hash("sem.table"), store_b.block_hash("sem.table"));
        assert_eq!(store_a.block_hash("tex.proj"), store_b.block_hash("tex.proj"));
        // Trainable blocks do differ across init seeds.
        assert_ne!(
            store_a.block_hash("loc.conv1.w"),
            store_b.block_hash("loc.conv1.w")
        );
    }
}
