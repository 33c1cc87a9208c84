//! Conditional U-Net denoiser with a zero-initialized control branch.
//!
//! Layout, for base widths `[c1, c2, c3]` and an `S x S` input:
//!
//! ```text
//! x_t ─ in ─ enc1(c1,S) ─ down ─ enc2(c2,S/2) ─ down ─ enc3(c3,S/4) ─ down ─ mid(c3,S/8)
//!              │ skip1          │ skip2              │ skip3                │
//! out ─ dec1 ─ up ─ dec2 ──────── up ─ dec3 ──────────── up ─────────────────┘
//! ```
//!
//! The control branch runs a copy of `in`/`enc*`/`mid` on `x_t` plus the
//! encoded condition image and adds its four site features (the three
//! encoder skips and the middle output) through 1x1 convolutions whose
//! weights and biases start at exactly zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{self, MetaTime, ProjectionConfig};
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamStore, Tensor};

const SKIP_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side; must be divisible by 8.
    pub image_size: usize,
    /// Channels of the generated image (1 for a building mask).
    pub image_channels: usize,
    /// Channels of the concatenated condition image.
    pub cond_channels: usize,
    /// Encoder stage widths.
    pub channels: [usize; 3],
    /// Width of the fused conditioning vector.
    pub cond_width: usize,
    /// Sinusoidal embedding dimension for coordinates and timestep.
    pub embed_dim: usize,
    /// Caption embedding dimension.
    pub text_dim: usize,
    /// Hidden width of the condition-image input head.
    pub hint_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_channels: 1,
            cond_channels: 6,
            channels: [32, 64, 128],
            cond_width: 128,
            embed_dim: 64,
            text_dim: 256,
            hint_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if !self.embed_dim.is_multiple_of(2) || self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be even".into()));
        }
        if self.channels.contains(&0)
            || self.cond_width == 0
            || self.image_channels == 0
            || self.cond_channels == 0
            || self.hint_channels == 0
            || self.text_dim == 0
        {
            return Err(Error::InvalidArgument("model widths must be positive".into()));
        }
        Ok(())
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            embed_dim: self.embed_dim,
            cond_width: self.cond_width,
        }
    }
}

/// Everything the denoiser is conditioned on besides `x_t` and `t`.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    /// Tile-center `(lon, lat)`; `None` zeroes the metadata terms.
    pub coords: Option<(f64, f64)>,
    /// Caption embedding of length `text_dim`.
    pub text: &'a [f64],
    /// Condition image `[cond_channels, S, S]` in `[0, 1]`; `None` skips the
    /// control branch entirely.
    pub image: Option<&'a Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalUnet {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// The four injection sites, in order.
pub const CONTROL_SITES: usize = 4;

fn conv_w(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) {
    store.insert(&format!("{name}.w"), condition::normal(&[cout, cin, k, k], rng));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn zero_conv(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize) {
    store.insert(&format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn res_block(store: &mut ParamStore, p: &str, cin: usize, cout: usize, cond: usize, rng: &mut ChaCha8Rng) {
    conv_w(store, &format!("{p}.conv1"), cout, cin, 3, rng);
    store.insert(&format!("{p}.emb.w"), condition::normal(&[cout, cond], rng));
    store.insert(&format!("{p}.emb.b"), Tensor::zeros(&[cout]));
    conv_w(store, &format!("{p}.conv2"), cout, cout, 3, rng);
    if cin != cout {
        conv_w(store, &format!("{p}.skip"), cout, cin, 1, rng);
    }
}

fn encoder(store: &mut ParamStore, p: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let [c1, c2, c3] = cfg.channels;
    let e = cfg.cond_width;
    conv_w(store, &format!("{p}.in"), c1, cfg.image_channels, 3, rng);
    res_block(store, &format!("{p}.enc1"), c1, c1, e, rng);
    conv_w(store, &format!("{p}.down1"), c2, c1, 3, rng);
    res_block(store, &format!("{p}.enc2"), c2, c2, e, rng);
    conv_w(store, &format!("{p}.down2"), c3, c2, 3, rng);
    res_block(store, &format!("{p}.enc3"), c3, c3, e, rng);
    conv_w(store, &format!("{p}.down3"), c3, c3, 3, rng);
    res_block(store, &format!("{p}.mid"), c3, c3, e, rng);
}

impl ConditionalUnet {
    /// Fresh parameters: LeCun-normal weights, zero biases, zero final
    /// output layer, zero control projections, control encoder copied from
    /// the denoiser encoder.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let [c1, c2, c3] = config.channels;
        let e = config.cond_width;

        condition::init_projections(&mut store, "cond", config.projection(), &mut rng);
        store.insert("cond.text.w", condition::normal(&[e, config.text_dim], &mut rng));
        store.insert("cond.text.b", Tensor::zeros(&[e]));

        encoder(&mut store, "den", &config, &mut rng);
        conv_w(&mut store, "den.up3", c3, c3, 3, &mut rng);
        res_block(&mut store, "den.dec3", 2 * c3, c2, e, &mut rng);
        conv_w(&mut store, "den.up2", c2, c2, 3, &mut rng);
        res_block(&mut store, "den.dec2", 2 * c2, c1, e, &mut rng);
        conv_w(&mut store, "den.up1", c1, c1, 3, &mut rng);
        res_block(&mut store, "den.dec1", 2 * c1, c1, e, &mut rng);
        zero_conv(&mut store, "den.out", config.image_channels, c1, 3);

        conv_w(&mut store, "ctrl.hint0", config.hint_channels, config.cond_channels, 3, &mut rng);
        conv_w(&mut store, "ctrl.hint1", c1, config.hint_channels, 3, &mut rng);
        let den: Vec<(String, Tensor)> = store
            .iter()
            .filter(|(n, _)| {
                ["den.in.", "den.enc", "den.down", "den.mid."]
                    .iter()
                    .any(|p| n.starts_with(p))
            })
            .map(|(n, t)| (n.replacen("den.", "ctrl.", 1), t.clone()))
            .collect();
        for (name, t) in den {
            store.insert(&name, t);
        }
        for (i, c) in [c1, c2, c3, c3].into_iter().enumerate() {
            zero_conv(&mut store, &format!("ctrl.zero{i}"), c, c, 1);
        }
        Ok(Self { config, params: store })
    }

    /// Rebuilds a model around loaded parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        for (name, t) in reference.params.iter() {
            match params.by_name(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Model(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Model(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Model("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    /// True for parameters belonging to the control branch.
    pub fn is_control_param(name: &str) -> bool {
        name.starts_with("ctrl.")
    }

    fn check_inputs(&self, x_t: &Tensor, cond: &Conditioning) -> Result<()> {
        let s = self.config.image_size;
        if x_t.shape() != [self.config.image_channels, s, s] {
            return Err(Error::Shape(format!(
                "x_t {:?}, expected [{}, {s}, {s}]",
                x_t.shape(),
                self.config.image_channels
            )));
        }
        if cond.text.len() != self.config.text_dim {
            return Err(Error::Shape(format!(
                "caption embedding of length {}, expected {}",
                cond.text.len(),
                self.config.text_dim
            )));
        }
        if let Some(img) = cond.image {
            if img.shape() != [self.config.cond_channels, s, s] {
                return Err(Error::Shape(format!(
                    "condition image {:?}, expected [{}, {s}, {s}]",
                    img.shape(),
                    self.config.cond_channels
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the predicted noise node.
    pub fn forward(&self, g: &mut Graph, x_t: &Tensor, t: usize, cond: &Conditioning) -> Result<NodeId> {
        self.check_inputs(x_t, cond)?;
        let c_mt = condition::fuse_metadata_timestep(
            g,
            "cond",
            self.config.projection(),
            MetaTime {
                coords: cond.coords,
                timestep: t as f64,
            },
        )?;
        let text = g.input(Tensor::vector(cond.text.to_vec()));
        let text = linear(g, "cond.text", text)?;
        let emb = g.add(c_mt, text)?;
        let emb = g.silu(emb);

        let x = g.input(x_t.clone());
        let h = conv(g, "den.in", x, 1)?;
        let (mut skips, mut mid) = run_encoder(g, "den", h, emb)?;

        if let Some(img) = cond.image {
            let ci = g.input(img.clone());
            let hint = conv(g, "ctrl.hint0", ci, 1)?;
            let hint = g.silu(hint);
            let hint = conv(g, "ctrl.hint1", hint, 1)?;
            let hc = conv(g, "ctrl.in", x, 1)?;
            let hc = g.add(hc, hint)?;
            let (cskips, cmid) = run_encoder(g, "ctrl", hc, emb)?;
            for (i, (s, cs)) in skips.iter_mut().zip(cskips).enumerate() {
                let z = conv(g, &format!("ctrl.zero{i}"), cs, 1)?;
                *s = g.add(*s, z)?;
            }
            let z = conv(g, "ctrl.zero3", cmid, 1)?;
            mid = g.add(mid, z)?;
        }

        let [s1, s2, s3] = skips;
        let h = g.upsample2x(mid)?;
        let h = conv(g, "den.up3", h, 1)?;
        let h = g.concat(h, s3)?;
        let h = res(g, "den.dec3", h, emb)?;
        let h = g.upsample2x(h)?;
        let h = conv(g, "den.up2", h, 1)?;
        let h = g.concat(h, s2)?;
        let h = res(g, "den.dec2", h, emb)?;
        let h = g.upsample2x(h)?;
        let h = conv(g, "den.up1", h, 1)?;
        let h = g.concat(h, s1)?;
        let h = res(g, "den.dec1", h, emb)?;
        let h = g.silu(h);
        conv(g, "den.out", h, 1)
    }

    /// Predicted noise for `x_t` at step `t`.
    pub fn predict_eps(&self, x_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, x_t, t, cond)?;
        Ok(g.value(out).clone())
    }
}

fn conv(g: &mut Graph, name: &str, x: NodeId, stride: usize) -> Result<NodeId> {
    let w = g.named(&format!("{name}.w"))?;
    let b = g.named(&format!("{name}.b"))?;
    g.conv2d(x, w, b, stride)
}

fn linear(g: &mut Graph, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.named(&format!("{name}.w"))?;
    let b = g.named(&format!("{name}.b"))?;
    g.linear(x, w, b)
}

fn res(g: &mut Graph, p: &str, x: NodeId, emb: NodeId) -> Result<NodeId> {
    let h = g.silu(x);
    let h = conv(g, &format!("{p}.conv1"), h, 1)?;
    let e = linear(g, &format!("{p}.emb"), emb)?;
    let h = g.add_channel(h, e)?;
    let h = g.silu(h);
    let h = conv(g, &format!("{p}.conv2"), h, 1)?;
    let skip = if g.params().id(&format!("{p}.skip.w")).is_some() {
        conv(g, &format!("{p}.skip"), x, 1)?
    } else {
        x
    };
    let sum = g.add(skip, h)?;
    Ok(g.scale(sum, SKIP_SCALE))
}

fn run_encoder(g: &mut Graph, p: &str, h: NodeId, emb: NodeId) -> Result<([NodeId; 3], NodeId)> {
    let s1 = res(g, &format!("{p}.enc1"), h, emb)?;
    let h = conv(g, &format!("{p}.down1"), s1, 2)?;
    let s2 = res(g, &format!("{p}.enc2"), h, emb)?;
    let h = conv(g, &format!("{p}.down2"), s2, 2)?;
    let s3 = res(g, &format!("{p}.enc3"), h, emb)?;
    let h = conv(g, &format!("{p}.down3"), s3, 2)?;
    let mid = res(g, &format!("{p}.mid"), h, emb)?;
    Ok(([s1, s2, s3], mid))
}
