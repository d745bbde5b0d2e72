//! The four-stage pyramid: overlapped patch embedding at the start of each
//! stage, pre-norm Transformer blocks with multi-scale clustered attention,
//! and a pooled linear classifier.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, MANIFEST_FILE};
pub use config::{ModelConfig, PatchEmbedConfig, StageConfig, LAMBDA_SCHEDULE};

use crate::attention::{mhms_clus_attention, AttentionSpec, AttentionWeights, Session};
use crate::error::{Error, Result};
use crate::numerics::kernels::Unfold;
use crate::numerics::{Init, ParamId, ParamStore, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormWeights {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormWeights {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<Self> {
        Ok(LayerNormWeights {
            gain: store.register(&format!("{prefix}.gain"), &[c], Init::Ones)?,
            bias: store.register(&format!("{prefix}.bias"), &[c], Init::Zeros)?,
        })
    }

    pub fn apply<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gain)?;
        let b = s.param(self.bias)?;
        s.graph.layer_norm(x, g, b, T::lit(LN_EPS))
    }
}

#[derive(Debug, Clone)]
pub struct LinearWeights {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearWeights {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, std: f64) -> Result<Self> {
        Ok(LinearWeights {
            weight: store.register(&format!("{prefix}.weight"), &[fan_in, fan_out], Init::Normal(std))?,
            bias: store.register(&format!("{prefix}.bias"), &[fan_out], Init::Zeros)?,
        })
    }

    pub fn apply<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        s.linear(x, self.weight, Some(self.bias))
    }
}

/// Strided overlapping-window projection followed by layer norm.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    pub proj: LinearWeights,
    pub norm: LayerNormWeights,
}

impl PatchEmbed {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: PatchEmbedConfig, std: f64) -> Result<Self> {
        let fan_in = cfg.kernel * cfg.kernel * cfg.in_channels;
        Ok(PatchEmbed {
            cfg,
            proj: LinearWeights::register(store, &format!("{prefix}.proj"), fan_in, cfg.out_channels, std)?,
            norm: LayerNormWeights::register(store, &format!("{prefix}.norm"), cfg.out_channels)?,
        })
    }

    /// `x` is an `h×w` grid of tokens, row-major. Returns the new tokens and
    /// the new grid shape.
    pub fn apply<T: Real>(&self, s: &mut Session<'_, T>, x: Var, grid: (usize, usize)) -> Result<(Var, (usize, usize))> {
        let geom = Unfold {
            h: grid.0,
            w: grid.1,
            c: self.cfg.in_channels,
            kernel: self.cfg.kernel,
            stride: self.cfg.stride,
            pad: self.cfg.padding,
        };
        let cols = s.graph.unfold(x, geom)?;
        let y = self.proj.apply(s, cols)?;
        let y = self.norm.apply(s, y)?;
        Ok((y, (geom.out_h(), geom.out_w())))
    }
}

/// `z' = Attn(LN(z)) + z; out = FFN(LN(z')) + z'`.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub name: String,
    pub spec: AttentionSpec,
    pub norm1: LayerNormWeights,
    pub attn: AttentionWeights,
    pub norm2: LayerNormWeights,
    pub fc1: LinearWeights,
    pub fc2: LinearWeights,
}

impl BlockWeights {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: AttentionSpec, ffn_ratio: usize, std: f64) -> Result<Self> {
        let c = spec.channels;
        Ok(BlockWeights {
            name: prefix.to_string(),
            norm1: LayerNormWeights::register(store, &format!("{prefix}.norm1"), c)?,
            attn: AttentionWeights::register(store, &format!("{prefix}.attn"), &spec, std)?,
            norm2: LayerNormWeights::register(store, &format!("{prefix}.norm2"), c)?,
            fc1: LinearWeights::register(store, &format!("{prefix}.fc1"), c, c * ffn_ratio, std)?,
            fc2: LinearWeights::register(store, &format!("{prefix}.fc2"), c * ffn_ratio, c, std)?,
            spec,
        })
    }
}

pub fn transformer_block<T: Real>(s: &mut Session<'_, T>, z: Var, block: &BlockWeights, grid: Option<(usize, usize)>) -> Result<Var> {
    if s.graph.value(z).rows() == 0 {
        return Err(Error::Degenerate("transformer block needs at least one token".into()));
    }
    let h = block.norm1.apply(s, z)?;
    let a = mhms_clus_attention(s, h, &block.attn, &block.spec, grid, &format!("{}.attn", block.name))?;
    let z1 = s.graph.add(a, z)?;
    let h = block.norm2.apply(s, z1)?;
    let h = block.fc1.apply(s, h)?;
    let h = s.graph.gelu(h)?;
    let h = block.fc2.apply(s, h)?;
    s.graph.add(h, z1)
}

#[derive(Debug, Clone)]
pub struct StageWeights {
    pub embed: PatchEmbed,
    pub blocks: Vec<BlockWeights>,
}

/// Parameter handles of a whole model, independent of parameter values.
#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub stages: Vec<StageWeights>,
    pub norm: LayerNormWeights,
    pub head: LinearWeights,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamStore<T>,
    /// Table deviations noticed when the model was built.
    pub warnings: Vec<String>,
}

fn register_layout<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<ModelLayout> {
    let std = config.init_std;
    let mut stages = Vec::with_capacity(config.stages.len());
    for (i, sc) in config.stages.iter().enumerate() {
        let prefix = format!("stage{}", i + 1);
        let embed = PatchEmbed::register(store, &format!("{prefix}.embed"), sc.patch_embed, std)?;
        let mut spec = AttentionSpec::new(sc.channels, sc.heads, sc.lambdas.clone())?;
        spec.k = config.k;
        spec.combine = config.combine;
        spec.aggregation = config.aggregation;
        spec.validate()?;
        let blocks = (0..sc.layers)
            .map(|b| BlockWeights::register(store, &format!("{prefix}.block{b}"), spec.clone(), config.ffn_ratio, std))
            .collect::<Result<Vec<_>>>()?;
        stages.push(StageWeights { embed, blocks });
    }
    let last = config.stages.last().map_or(0, |s| s.channels);
    Ok(ModelLayout {
        stages,
        norm: LayerNormWeights::register(store, "norm", last)?,
        head: LinearWeights::register(store, "head", last, config.num_classes, std)?,
    })
}

/// Instantiates every parameter; initialization is keyed by `seed` and the
/// parameter name.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut params = ParamStore::new(seed);
    let layout = register_layout(config, &mut params)?;
    Ok(Model {
        config: config.clone(),
        layout,
        params,
        warnings: config.table_deviations(),
    })
}

/// Total number of scalar parameters.
pub fn count_params<T: Real>(model: &Model<T>) -> usize {
    model.params.num_elements()
}

impl<T: Real> Model<T> {
    /// Logits `[1 × classes]` for one `H×W×C_in` image, recorded on the
    /// session's tape.
    pub fn forward_image(&self, s: &mut Session<'_, T>, image: &Tensor<T>) -> Result<Var> {
        let cfg = &self.config;
        let res = cfg.input_resolution;
        if image.shape() != [res, res, cfg.in_channels] {
            return Err(Error::Geometry(format!(
                "expected a {res}×{res}×{} image, got {:?}",
                cfg.in_channels,
                image.shape()
            )));
        }
        let tokens = image.clone().reshape(vec![res * res, cfg.in_channels])?;
        let mut x = s.graph.input(tokens)?;
        let mut grid = (res, res);
        for stage in &self.layout.stages {
            let (y, g) = stage.embed.apply(s, x, grid)?;
            x = y;
            grid = g;
            for block in &stage.blocks {
                x = transformer_block(s, x, block, Some(grid))?;
            }
        }
        let x = self.layout.norm.apply(s, x)?;
        let pooled = s.graph.mean_rows(x)?;
        self.layout.head.apply(s, pooled)
    }

    /// Logits `[B × classes]` for a `B×H×W×C_in` batch.
    pub fn forward_batch(&self, s: &mut Session<'_, T>, batch: &Tensor<T>) -> Result<Var> {
        let shape = batch.shape();
        if shape.len() != 4 {
            return Err(Error::Geometry(format!("expected a B×H×W×C batch, got {shape:?}")));
        }
        let per = shape[1] * shape[2] * shape[3];
        let mut rows = Vec::with_capacity(shape[0]);
        for b in 0..shape[0] {
            let img = Tensor::new(shape[1..].to_vec(), batch.data()[b * per..(b + 1) * per].to_vec())?;
            rows.push(self.forward_image(s, &img)?);
        }
        if rows.len() == 1 {
            return Ok(rows[0]);
        }
        s.graph.concat_rows(&rows)
    }

    /// Plain inference: logits for a batch using the model's own parameters.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::new(&self.params);
        let out = self.forward_batch(&mut s, batch)?;
        Ok(s.graph.value(out).clone())
    }
}

/// Logits for a batch.
pub fn forward<T: Real>(model: &Model<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    model.forward(batch)
}

/// Value-only [`PatchEmbed::apply`] for a standalone `H×W×C_in` image.
pub fn overlapped_patch_embed<T: Real>(store: &ParamStore<T>, embed: &PatchEmbed, image: &Tensor<T>) -> Result<(Tensor<T>, (usize, usize))> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != embed.cfg.in_channels {
        return Err(Error::Geometry(format!(
            "expected an H×W×{} image, got {shape:?}",
            embed.cfg.in_channels
        )));
    }
    let mut s = Session::new(store);
    let x = s.graph.input(image.clone().reshape(vec![shape[0] * shape[1], shape[2]])?)?;
    let (y, grid) = embed.apply(&mut s, x, (shape[0], shape[1]))?;
    Ok((s.graph.value(y).clone(), grid))
}
