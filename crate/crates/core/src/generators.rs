//! The two-network generator.
//!
//! The vector generator refines the layout coarse to fine and taps one
//! feature map per stage; each tap is pooled to `n` channels and gated into
//! a level of the semantic-vector pyramid. It also predicts an auxiliary
//! image. The render generator grows an image from noise through residual
//! blocks whose convolutions and normalizations are mixed by the pyramid.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::condops::{resize_vectors, semantic_gate, GateMode, SemanticVectors, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::nn::{Conv, Scc, Scn};
use crate::params::{Bound, ParamStore, Phase};
use crate::scalar::Scalar;
use crate::tensor::Shape;

/// Standard deviation of the image-producing output convolutions.
pub const OUTPUT_INIT_STD: f64 = 1e-3;

fn default_n() -> usize {
    3
}
#[cfg_attr(not(feature = "serde"), allow(dead_code))]
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_z_dim() -> usize {
    256
}
fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GeneratorConfig {
    /// Output height and width.
    pub resolution: usize,
    /// Number of layout classes.
    pub c_sem: usize,
    /// Width of each vector-generator stage, coarse to fine.
    pub svg_channels: Vec<usize>,
    /// Width of the hidden layer of the auxiliary image head.
    pub svg_head_channels: usize,
    /// Output width of each render block.
    pub srg_channels: Vec<usize>,
    /// 1-based pyramid level feeding each render block.
    pub vector_taps: Vec<usize>,
    #[cfg_attr(feature = "serde", serde(default = "default_n"))]
    pub n: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_tau"))]
    pub tau: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub gate_mode: GateMode,
    #[cfg_attr(feature = "serde", serde(default = "default_z_dim"))]
    pub z_dim: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_kernel"))]
    pub kernel_size: usize,
}

impl GeneratorConfig {
    /// Listing-sized network at 256x256.
    pub fn paper_full(c_sem: usize) -> Self {
        GeneratorConfig {
            resolution: 256,
            c_sem,
            svg_channels: vec![512, 256, 128, 64, 32, 32],
            svg_head_channels: 16,
            srg_channels: vec![512, 512, 512, 256, 128, 64, 32],
            vector_taps: vec![1, 2, 2, 3, 4, 5, 6],
            n: default_n(),
            tau: DEFAULT_TAU,
            gate_mode: GateMode::Softmax,
            z_dim: default_z_dim(),
            kernel_size: default_kernel(),
        }
    }

    /// Desk-scale network for 32x32 four-class scenes.
    pub fn families4() -> Self {
        GeneratorConfig {
            resolution: 32,
            c_sem: 4,
            svg_channels: vec![32, 24, 16],
            svg_head_channels: 16,
            srg_channels: vec![64, 32, 16],
            vector_taps: vec![1, 2, 3],
            n: default_n(),
            tau: DEFAULT_TAU,
            gate_mode: GateMode::Softmax,
            z_dim: 64,
            kernel_size: default_kernel(),
        }
    }

    pub fn levels(&self) -> usize {
        self.svg_channels.len()
    }

    /// Side length of pyramid level `t` (1-based).
    pub fn level_size(&self, t: usize) -> usize {
        self.resolution >> (self.levels() - t)
    }

    /// Side length of the grid the noise is projected onto.
    pub fn initial_grid(&self) -> usize {
        self.resolution >> self.srg_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: alloc::string::String| Err(Error::config(field, detail));
        let t = self.levels();
        if t == 0 {
            return bad("svg_channels", "at least one stage is required".into());
        }
        if self.c_sem == 0 {
            return bad("c_sem", "at least one class is required".into());
        }
        if self.n == 0 {
            return bad("n", "at least one candidate is required".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if self.kernel_size % 2 == 0 {
            return bad("kernel_size", format!("must be odd, got {}", self.kernel_size));
        }
        if self.z_dim == 0 {
            return bad("z_dim", "must be positive".into());
        }
        if self.svg_head_channels == 0 {
            return bad("svg_head_channels", "must be positive".into());
        }
        if t >= usize::BITS as usize || self.resolution == 0 || self.resolution % (1 << t) != 0 {
            return bad(
                "resolution",
                format!("{} is not divisible by 2^{t} for {t} vector stages", self.resolution),
            );
        }
        if let Some(&c) = self.svg_channels.iter().find(|&&c| c < self.n) {
            return bad("svg_channels", format!("stage width {c} is below the candidate count {}", self.n));
        }
        let blocks = self.srg_channels.len();
        if blocks == 0 {
            return bad("srg_channels", "at least one block is required".into());
        }
        if self.srg_channels.contains(&0) {
            return bad("srg_channels", "widths must be positive".into());
        }
        if blocks >= usize::BITS as usize || self.resolution % (1 << blocks) != 0 {
            return bad(
                "srg_channels",
                format!("resolution {} is not divisible by 2^{blocks} for {blocks} blocks", self.resolution),
            );
        }
        if self.vector_taps.len() != blocks {
            return bad(
                "vector_taps",
                format!("{} taps for {blocks} render blocks", self.vector_taps.len()),
            );
        }
        if let Some(&tap) = self.vector_taps.iter().find(|&&v| v == 0 || v > t) {
            return bad("vector_taps", format!("tap {tap} outside 1..={t}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SvgStage {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Clone, Debug, PartialEq)]
struct SvgHead {
    conv1: Conv,
    conv2: Conv,
}

/// Residual block: two (normalize, leaky relu, convolve) steps plus a skip
/// that is the identity or a 1x1 conditional convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ScResBlock {
    pub norm1: Scn,
    pub conv1: Scc,
    pub norm2: Scn,
    pub conv2: Scc,
    pub skip: Option<Scc>,
}

impl ScResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: rand::Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        n: usize,
    ) -> Self {
        ScResBlock {
            norm1: Scn::new(store, &format!("{name}.norm1"), c_in, n),
            conv1: Scc::new(store, rng, &format!("{name}.conv1"), c_in, c_out, k, n),
            norm2: Scn::new(store, &format!("{name}.norm2"), c_out, n),
            conv2: Scc::new(store, rng, &format!("{name}.conv2"), c_out, c_out, k, n),
            skip: (c_in != c_out).then(|| Scc::new(store, rng, &format!("{name}.skip"), c_in, c_out, 1, n)),
        }
    }

    /// `v` must already match the spatial size of `x`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        store: &mut ParamStore<T>,
        phase: Phase,
        x: Var,
        v: Var,
    ) -> Result<Var> {
        let c_in = g.shape(x).c;
        let h = self.norm1.forward(g, p, store, phase, x, v)?;
        let h = g.leaky_relu(h);
        let h = self.conv1.forward(g, p, h, v)?;
        let c_out = g.shape(h).c;
        let h = self.norm2.forward(g, p, store, phase, h, v)?;
        let h = g.leaky_relu(h);
        let h = self.conv2.forward(g, p, h, v)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, p, x, v)?,
            None if c_in == c_out => x,
            None => {
                return Err(Error::config(
                    "srg_channels",
                    format!("block maps {c_in} to {c_out} channels without a skip projection"),
                ))
            }
        };
        g.add(h, skip)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Srg {
    project: Conv,
    blocks: Vec<ScResBlock>,
    out: Conv,
}

/// Output of the vector generator.
#[derive(Clone, Debug)]
pub struct SvgOutput {
    /// Coarse to fine; level `t` has side `resolution / 2^(T - t)`.
    pub pyramid: Vec<SemanticVectors>,
    /// Auxiliary prediction in `[-1, 1]`.
    pub image: Var,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub image: Var,
    pub svg: SvgOutput,
}

/// Both generator networks and their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub store: ParamStore<T>,
    svg: Vec<SvgStage>,
    head: SvgHead,
    srg: Srg,
}

impl<T: Scalar> Generator<T> {
    /// Builds and initializes every parameter deterministically from `seed`.
    pub fn build(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = config.kernel_size;
        let mut svg = Vec::with_capacity(config.levels());
        let mut prev = 0;
        for (t, &c) in config.svg_channels.iter().enumerate() {
            let c_in = if t == 0 { config.c_sem } else { prev + config.c_sem };
            svg.push(SvgStage {
                conv1: Conv::new(&mut store, &mut rng, &format!("svg.stage{}.conv1", t + 1), c_in, c, k, 1, None, true),
                conv2: Conv::new(&mut store, &mut rng, &format!("svg.stage{}.conv2", t + 1), c, c, k, 1, None, true),
            });
            prev = c;
        }
        let hc = config.svg_head_channels;
        let head = SvgHead {
            conv1: Conv::new(&mut store, &mut rng, "svg.head.conv1", prev, hc, k, 1, None, true),
            conv2: Conv::new(&mut store, &mut rng, "svg.head.conv2", hc, 3, k, 1, Some(OUTPUT_INIT_STD), false),
        };
        let grid = config.initial_grid();
        let c0 = config.srg_channels[0];
        let project = Conv::new(&mut store, &mut rng, "srg.project", config.z_dim, c0 * grid * grid, 1, 1, None, true);
        let mut blocks = Vec::with_capacity(config.srg_channels.len());
        let mut c_in = c0;
        for (i, &c) in config.srg_channels.iter().enumerate() {
            blocks.push(ScResBlock::new(&mut store, &mut rng, &format!("srg.block{}", i + 1), c_in, c, k, config.n));
            c_in = c;
        }
        let out = Conv::new(&mut store, &mut rng, "srg.out", c_in, 3, k, 1, Some(OUTPUT_INIT_STD), false);
        Ok(Generator { config: config.clone(), store, svg, head, srg: Srg { project, blocks, out } })
    }

    /// Number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    /// Same network with parameters converted to `U`.
    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            store: self.store.cast(),
            svg: self.svg.clone(),
            head: self.head.clone(),
            srg: self.srg.clone(),
        }
    }

    /// Binds the parameters and runs both networks.
    pub fn forward(&mut self, g: &mut Graph<T>, layout: Var, z: Var, phase: Phase, trainable: bool) -> Result<GeneratorOutput> {
        let bound = self.store.bind(g, phase, trainable)?;
        self.forward_bound(g, &bound, layout, z, phase)
    }

    pub fn forward_bound(&mut self, g: &mut Graph<T>, p: &Bound, layout: Var, z: Var, phase: Phase) -> Result<GeneratorOutput> {
        let svg = self.svg_forward(g, p, layout)?;
        let image = self.srg_forward(g, p, z, &svg.pyramid, phase)?;
        Ok(GeneratorOutput { image, svg })
    }

    fn check_layout(&self, g: &Graph<T>, layout: Var) -> Result<()> {
        let s = g.shape(layout);
        let r = self.config.resolution;
        if s.c != self.config.c_sem || s.h != r || s.w != r {
            return Err(Error::shape(
                "svg_forward",
                format!("layout {s} does not match {} classes at {r}x{r}", self.config.c_sem),
            ));
        }
        Ok(())
    }

    /// Runs the vector generator on a one-hot layout `b x c_sem x R x R`.
    pub fn svg_forward(&self, g: &mut Graph<T>, p: &Bound, layout: Var) -> Result<SvgOutput> {
        self.check_layout(g, layout)?;
        let cfg = &self.config;
        let mut pyramid = Vec::with_capacity(cfg.levels());
        let mut feat: Option<Var> = None;
        for (t, stage) in self.svg.iter().enumerate() {
            let side = cfg.level_size(t + 1);
            let s_down = g.resize_nearest(layout, side, side)?;
            let h = match feat {
                None => stage.conv1.forward(g, p, s_down)?,
                Some(prev) => {
                    let up = g.resize_bilinear(prev, side, side)?;
                    let cat = g.concat(&[up, s_down], 1)?;
                    let act = g.leaky_relu(cat);
                    stage.conv1.forward(g, p, act)?
                }
            };
            let h = g.leaky_relu(h);
            let tap = stage.conv2.forward(g, p, h)?;
            let pooled = g.channel_pool(tap, cfg.n)?;
            pyramid.push(semantic_gate(g, pooled, cfg.gate_mode, cfg.tau)?);
            feat = Some(tap);
        }
        let last = feat.expect("at least one stage");
        let h = g.leaky_relu(last);
        let h = self.head.conv1.forward(g, p, h)?;
        let h = g.leaky_relu(h);
        let h = self.head.conv2.forward(g, p, h)?;
        let image = g.hardtanh(h);
        Ok(SvgOutput { pyramid, image })
    }

    /// Runs the render generator from noise `b x z_dim x 1 x 1`.
    pub fn srg_forward(
        &mut self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        pyramid: &[SemanticVectors],
        phase: Phase,
    ) -> Result<Var> {
        let cfg = &self.config;
        let zs = g.shape(z);
        if zs.c != cfg.z_dim || zs.h != 1 || zs.w != 1 {
            return Err(Error::param(
                "srg_forward",
                format!("noise {zs} does not match z_dim {}", cfg.z_dim),
            ));
        }
        if pyramid.len() != cfg.levels() {
            return Err(Error::param(
                "srg_forward",
                format!("pyramid has {} levels, expected {}", pyramid.len(), cfg.levels()),
            ));
        }
        let grid = cfg.initial_grid();
        let projected = self.srg.project.forward(g, p, z)?;
        let mut x = g.reshape(projected, Shape::new(zs.b, cfg.srg_channels[0], grid, grid))?;
        for (block, &tap) in self.srg.blocks.iter().zip(&cfg.vector_taps) {
            let side = g.shape(x).h;
            let v = resize_vectors(g, pyramid[tap - 1], side, side)?;
            x = block.forward(g, p, &mut self.store, phase, x, v.values)?;
            x = g.resize_bilinear(x, side * 2, side * 2)?;
        }
        let out = self.srg.out.forward(g, p, x)?;
        Ok(g.hardtanh(out))
    }
}
