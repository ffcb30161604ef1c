//! The conditioned denoising model.
//!
//! Two trainable components plus the wiring between them:
//!
//! - [`DynamicAdjuster`]: re-weights the fused token matrix per timestep. A
//!   sinusoidal timestep featurizer is mapped by an affine layer to a time
//!   token `e_tim`; every fused token is concatenated with `e_tim` and pushed
//!   through a two-layer perceptron.
//! - [`Denoiser`]: a small conv encoder–decoder over the image grid with one
//!   cross-attention block per resolution (image positions query the adjusted
//!   condition tokens) and per-block timestep bias.
//!
//! [`Model`] bundles encoders, aggregator, adjuster and denoiser behind the
//! shared parameter store and exposes the forward operations; training builds
//! the same graphs through [`Model::loss_graph`].

use ndarray::{Array2, ArrayD};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::{RunConfig, TexturalMode};
use crate::diffusion::NoiseSchedule;
use crate::encoders::{EmbeddingBlock, Encoders, Modality};
use crate::error::{Error, Result};
use crate::fusion::{concat_modalities, Aggregator, XEmbedding};
use crate::graph::ModelGraph;
use crate::params::{gaussian_init, ParamStore};

/// Sinusoidal timestep features: `[sin(t w_i) .. cos(t w_i) ..]` with
/// geometrically spaced frequencies, as a `(1, dim)` row.
pub fn sinusoidal_features(t: usize, dim: usize) -> Array2<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "feature dim must be even");
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
        out[(0, i)] = (t as f64 * freq).sin();
        out[(0, half + i)] = (t as f64 * freq).cos();
    }
    out
}

/// Timestep-conditioned token adjustment (`e_X -> e_t`).
#[derive(Debug, Clone, Copy)]
pub struct DynamicAdjuster {
    pub k: usize,
    pub d: usize,
}

impl DynamicAdjuster {
    pub fn register(k: usize, d: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        store.register("adj.time.w", gaussian_init(rng, &[d, d], d, 1.0), false);
        store.register("adj.time.b", ArrayD::zeros(vec![1, d]), false);
        store.register(
            "adj.mlp1.w",
            gaussian_init(rng, &[2 * d, 2 * d], 2 * d, 1.0),
            false,
        );
        store.register("adj.mlp1.b", ArrayD::zeros(vec![1, 2 * d]), false);
        store.register(
            "adj.mlp2.w",
            gaussian_init(rng, &[2 * d, d], 2 * d, 1.0),
            false,
        );
        store.register("adj.mlp2.b", ArrayD::zeros(vec![1, d]), false);
        DynamicAdjuster { k, d }
    }

    /// Graph: `(3k, d)` tokens and a timestep in, `(3k, d)` tokens out.
    pub fn build(&self, g: &mut ModelGraph<'_>, e_x: Var, t: usize) -> Var {
        let rows = g.tape.value(e_x).shape()[0];
        let sin = g.tape.leaf2(sinusoidal_features(t, self.d));
        let tw = g.param("adj.time.w");
        let tb = g.param("adj.time.b");
        let e_tim = g.tape.linear(sin, tw, tb);
        let rep = g.tape.repeat_rows(e_tim, rows);
        let cat = g.tape.concat_cols(e_x, rep);
        let w1 = g.param("adj.mlp1.w");
        let b1 = g.param("adj.mlp1.b");
        let w2 = g.param("adj.mlp2.w");
        let b2 = g.param("adj.mlp2.b");
        let hidden = g.tape.linear(cat, w1, b1);
        let hidden = g.tape.silu(hidden);
        g.tape.linear(hidden, w2, b2)
    }
}

/// Conv encoder–decoder noise predictor with cross-attention conditioning.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser {
    pub height: usize,
    pub width: usize,
    /// Condition token width; also the sinusoidal feature width and the
    /// cross-attention inner dimension.
    pub d: usize,
    channels: (usize, usize, usize),
}

/// Hidden width of the timestep embedding path.
const TIME_HIDDEN: usize = 32;

impl Denoiser {
    pub fn register(
        height: usize,
        width: usize,
        d: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let channels = (8, 16, 32);
        let (c0, c1, c2) = channels;
        let attn_dim = d;
        let time_dim = TIME_HIDDEN;

        store.register(
            "den.time1.w",
            gaussian_init(rng, &[d, time_dim], d, 1.0),
            false,
        );
        store.register("den.time1.b", ArrayD::zeros(vec![1, time_dim]), false);
        store.register(
            "den.time2.w",
            gaussian_init(rng, &[time_dim, time_dim], time_dim, 1.0),
            false,
        );
        store.register("den.time2.b", ArrayD::zeros(vec![1, time_dim]), false);

        let mut conv = |name: &str, c_out: usize, c_in: usize, rng: &mut ChaCha8Rng| {
            store.register(
                &format!("den.{name}.w"),
                gaussian_init(rng, &[c_out, c_in, 3, 3], 9 * c_in, 1.0),
                false,
            );
            store.register(&format!("den.{name}.b"), ArrayD::zeros(vec![c_out]), false);
        };
        conv("enc0a", c0, 1, rng);
        conv("enc0b", c0, c0, rng);
        conv("down1", c1, c0, rng);
        conv("enc1", c1, c1, rng);
        conv("down2", c2, c1, rng);
        conv("mid", c2, c2, rng);
        conv("up1", c1, c2, rng);
        conv("dec1", c1, c1, rng);
        conv("up0", c0, c1, rng);
        conv("dec0", c0, c0, rng);
        // Zero-initialized output head: the untrained model predicts zero
        // noise, so the initial loss sits at E||eps||^2.
        store.register("den.out.w", ArrayD::zeros(vec![1, c0, 3, 3]), false);
        store.register("den.out.b", ArrayD::zeros(vec![1]), false);

        for (level, c) in [(0usize, c0), (1, c1), (2, c2)] {
            store.register(
                &format!("den.tproj{level}.w"),
                gaussian_init(rng, &[time_dim, c], time_dim, 1.0),
                false,
            );
            store.register(&format!("den.tproj{level}.b"), ArrayD::zeros(vec![1, c]), false);
            store.register(
                &format!("den.xa{level}.wq"),
                gaussian_init(rng, &[c, attn_dim], c, 1.0),
                false,
            );
            store.register(
                &format!("den.xa{level}.wk"),
                gaussian_init(rng, &[d, attn_dim], d, 1.0),
                false,
            );
            store.register(
                &format!("den.xa{level}.wv"),
                gaussian_init(rng, &[d, attn_dim], d, 1.0),
                false,
            );
            // Zero-initialized attention output: conditioning fades in as
            // training moves it off zero.
            store.register(
                &format!("den.xa{level}.wo"),
                ArrayD::zeros(vec![attn_dim, c]),
                false,
            );
        }
        for (name, c) in [("tproj3", c1), ("tproj4", c0)] {
            store.register(
                &format!("den.{name}.w"),
                gaussian_init(rng, &[time_dim, c], time_dim, 1.0),
                false,
            );
            store.register(&format!("den.{name}.b"), ArrayD::zeros(vec![1, c]), false);
        }

        Denoiser {
            height,
            width,
            d,
            channels,
        }
    }

    fn cross_attention(
        &self,
        g: &mut ModelGraph<'_>,
        features: Var,
        e_t: Var,
        level: usize,
        h: usize,
        w: usize,
    ) -> Var {
        let wq = g.param(&format!("den.xa{level}.wq"));
        let wk = g.param(&format!("den.xa{level}.wk"));
        let wv = g.param(&format!("den.xa{level}.wv"));
        let wo = g.param(&format!("den.xa{level}.wo"));
        let tokens = g.tape.chw_to_tokens(features);
        let q = g.tape.matmul(tokens, wq);
        let k = g.tape.matmul(e_t, wk);
        let v = g.tape.matmul(e_t, wv);
        let scores = g.tape.matmul_transposed(q, k);
        let scaled = g.tape.scale(scores, 1.0 / (self.d as f64).sqrt());
        let attention = g.tape.softmax_rows(scaled);
        let mixed = g.tape.matmul(attention, v);
        let out = g.tape.matmul(mixed, wo);
        let merged = g.tape.add(tokens, out);
        g.tape.tokens_to_chw(merged, h, w)
    }

    fn conv_block(
        &self,
        g: &mut ModelGraph<'_>,
        x: Var,
        name: &str,
        stride: usize,
        time_bias: Option<(Var, usize)>,
    ) -> Var {
        let w = g.param(&format!("den.{name}.w"));
        let b = g.param(&format!("den.{name}.b"));
        let mut out = g.tape.conv2d(x, w, b, stride);
        if let Some((temb, level)) = time_bias {
            let pw = g.param(&format!("den.tproj{level}.w"));
            let pb = g.param(&format!("den.tproj{level}.b"));
            let bias = g.tape.linear(temb, pw, pb);
            out = g.tape.add_channel_bias(out, bias);
        }
        g.tape.silu(out)
    }

    /// Noise-prediction graph: `x_t` as a `(1, h, w)` leaf, adjusted tokens
    /// `e_t`, and the timestep; returns a `(1, h, w)` prediction.
    pub fn build(&self, g: &mut ModelGraph<'_>, x_t: Var, e_t: Var, t: usize) -> Var {
        let (h, w) = (self.height, self.width);
        let sin = g.tape.leaf2(sinusoidal_features(t, self.d));
        let t1w = g.param("den.time1.w");
        let t1b = g.param("den.time1.b");
        let t2w = g.param("den.time2.w");
        let t2b = g.param("den.time2.b");
        let t0 = g.tape.linear(sin, t1w, t1b);
        let t0 = g.tape.silu(t0);
        let temb = g.tape.linear(t0, t2w, t2b);

        let h0 = self.conv_block(g, x_t, "enc0a", 1, Some((temb, 0)));
        let h0 = self.conv_block(g, h0, "enc0b", 1, None);
        let h0 = self.cross_attention(g, h0, e_t, 0, h, w);

        let h1 = self.conv_block(g, h0, "down1", 2, None);
        let h1 = self.conv_block(g, h1, "enc1", 1, Some((temb, 1)));
        let h1 = self.cross_attention(g, h1, e_t, 1, h / 2, w / 2);

        let h2 = self.conv_block(g, h1, "down2", 2, None);
        let h2 = self.conv_block(g, h2, "mid", 1, Some((temb, 2)));
        let h2 = self.cross_attention(g, h2, e_t, 2, h / 4, w / 4);

        let u1 = g.tape.upsample_nearest2(h2);
        let u1 = self.conv_block(g, u1, "up1", 1, None);
        let u1 = g.tape.add(u1, h1);
        let u1 = self.conv_block(g, u1, "dec1", 1, Some((temb, 3)));

        let u0 = g.tape.upsample_nearest2(u1);
        let u0 = self.conv_block(g, u0, "up0", 1, None);
        let u0 = g.tape.add(u0, h0);
        let u0 = self.conv_block(g, u0, "dec0", 1, Some((temb, 4)));

        let w_out = g.param("den.out.w");
        let b_out = g.param("den.out.b");
        g.tape.conv2d(u0, w_out, b_out, 1)
    }

    pub fn channels(&self) -> (usize, usize, usize) {
        self.channels
    }
}

/// All components behind one parameter store.
pub struct Model {
    pub encoders: Encoders,
    pub aggregator: Aggregator,
    pub adjuster: DynamicAdjuster,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub textural_mode: TexturalMode,
}

impl Model {
    /// Build the architecture and register every parameter block. Trainable
    /// initialization derives from the config's train seed.
    pub fn new(config: &RunConfig) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(config.seeds.train, crate::rng::ns::TRAIN_INIT, 0);
        let encoders = Encoders::register(config, &mut store, &mut rng);
        let aggregator = Aggregator::register(config.embedding.d, &mut store, &mut rng);
        let adjuster = DynamicAdjuster::register(
            config.embedding.k,
            config.embedding.d,
            &mut store,
            &mut rng,
        );
        let denoiser = Denoiser::register(
            config.image.height,
            config.image.width,
            config.embedding.d,
            &mut store,
            &mut rng,
        );
        if config.textural_mode == TexturalMode::InitOnly {
            store.register(
                "tex.token",
                ArrayD::zeros(vec![config.embedding.k, config.embedding.d]),
                false,
            );
        }
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        Ok((
            Model {
                encoders,
                aggregator,
                adjuster,
                denoiser,
                schedule,
                textural_mode: config.textural_mode,
            },
            store,
        ))
    }

    fn check_t(&self, t: usize, what: &str) -> Result<()> {
        if t < 1 || t > self.schedule.t_max() {
            return Err(Error::Invalid(format!(
                "{what}: timestep {t} outside 1..={}",
                self.schedule.t_max()
            )));
        }
        Ok(())
    }

    /// The textural block used for conditioning: per-sample statistics of the
    /// masked image, or the learned token block in init-only mode.
    pub fn textural_block(
        &self,
        image: &Array2<f64>,
        mask: &Array2<f64>,
        store: &ParamStore,
    ) -> Result<EmbeddingBlock> {
        match self.textural_mode {
            TexturalMode::PerSample => self.encoders.encode_textural(image, mask, store),
            TexturalMode::InitOnly => Ok(EmbeddingBlock {
                tokens: store
                    .get("tex.token")
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("tex.token is 2-d")
                    .to_owned(),
                modality: Modality::Textural,
            }),
        }
    }

    /// Fused conditioning `e_X` from (caption, mask, image). An empty caption
    /// is the unconditioned path: it maps to the reserved unknown token.
    pub fn embed(
        &self,
        caption: &str,
        mask: &Array2<f64>,
        image: &Array2<f64>,
        store: &ParamStore,
    ) -> Result<XEmbedding> {
        let text = if caption.trim().is_empty() {
            crate::encoders::UNK_TOKEN
        } else {
            caption
        };
        let sem = self.encoders.encode_semantic(text, store)?;
        let loc = self.encoders.encode_location(mask, store)?;
        let tex = self.textural_block(image, mask, store)?;
        let e_mul = concat_modalities(&sem, &loc, &tex)?;
        self.aggregator.aggregate(&e_mul, store)
    }

    /// Forward-only timestep adjustment `e_X -> e_t`.
    pub fn dynamic_adjust(
        &self,
        e_x: &XEmbedding,
        t: usize,
        store: &ParamStore,
    ) -> Result<XEmbedding> {
        self.check_t(t, "dynamic_adjust")?;
        let expected = (3 * self.adjuster.k, self.adjuster.d);
        if e_x.shape() != expected {
            return Err(Error::shape(
                "dynamic_adjust",
                format!("{expected:?}"),
                format!("{:?}", e_x.shape()),
            ));
        }
        let mut g = ModelGraph::new(store);
        let x = g.tape.leaf2(e_x.tokens.clone());
        let out = self.adjuster.build(&mut g, x, t);
        Ok(XEmbedding {
            tokens: g.tape.value2(out),
        })
    }

    /// Forward-only noise prediction.
    pub fn denoise_predict(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        e_t: &XEmbedding,
        store: &ParamStore,
    ) -> Result<Array2<f64>> {
        self.check_t(t, "denoise_predict")?;
        let (h, w) = (self.denoiser.height, self.denoiser.width);
        if x_t.dim() != (h, w) {
            return Err(Error::shape(
                "denoise_predict",
                format!("({h}, {w})"),
                format!("{:?}", x_t.dim()),
            ));
        }
        let expected = (3 * self.adjuster.k, self.adjuster.d);
        if e_t.shape() != expected {
            return Err(Error::shape(
                "denoise_predict (condition)",
                format!("{expected:?}"),
                format!("{:?}", e_t.shape()),
            ));
        }
        let mut g = ModelGraph::new(store);
        let x = g.tape.leaf(
            x_t.clone()
                .into_shape_with_order((1, h, w))
                .expect("x_t reshape")
                .into_dyn(),
        );
        let cond = g.tape.leaf2(e_t.tokens.clone());
        let eps = self.denoiser.build(&mut g, x, cond, t);
        Ok(g.tape
            .value3(eps)
            .into_shape_with_order((h, w))
            .expect("eps reshape"))
    }

    /// Full training-loss graph for one sample:
    /// `mean((eps - eps_hat(x_t, e_t, t))^2)` with `e_X` built from the
    /// sample's caption/mask/image through every conditioning component.
    /// Returns the loss node; gradients flow into the location encoder,
    /// aggregator, adjuster and denoiser (frozen blocks enter as constants).
    pub fn loss_graph(
        &self,
        g: &mut ModelGraph<'_>,
        caption: &str,
        mask: &Array2<f64>,
        image: &Array2<f64>,
        x_t: &Array2<f64>,
        t: usize,
        eps: &Array2<f64>,
    ) -> Result<Var> {
        let store = g.store();
        let sem = self.encoders.encode_semantic(
            if caption.trim().is_empty() {
                crate::encoders::UNK_TOKEN
            } else {
                caption
            },
            store,
        )?;
        let tex_leaf = match self.textural_mode {
            TexturalMode::PerSample => {
                let tex = self.encoders.encode_textural(image, mask, store)?;
                g.tape.leaf2(tex.tokens)
            }
            TexturalMode::InitOnly => g.param("tex.token"),
        };
        let sem_leaf = g.tape.leaf2(sem.tokens);
        let mask_leaf = self.encoders.mask_leaf(g, mask);
        let loc = self.encoders.location_block(g, mask_leaf);
        let e_mul = g.tape.concat_rows(&[sem_leaf, loc, tex_leaf]);
        let (e_x, _) = self.aggregator.build(g, e_mul);
        let e_t = self.adjuster.build(g, e_x, t);

        let (h, w) = (self.denoiser.height, self.denoiser.width);
        let x_leaf = g.tape.leaf(
            x_t.clone()
                .into_shape_with_order((1, h, w))
                .expect("x_t reshape")
                .into_dyn(),
        );
        let eps_leaf = g.tape.leaf(
            eps.clone()
                .into_shape_with_order((1, h, w))
                .expect("eps reshape")
                .into_dyn(),
        );
        let eps_hat = self.denoiser.build(g, x_leaf, e_t, t);
        Ok(g.tape.mean_squared_error(eps_hat, eps_leaf))
    }
}
