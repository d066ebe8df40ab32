//! The full detector: encoder, decoder modules, aggregation and heads.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::decoder::{da_forward, ds_forward, init_da, init_ds, DsOutput};
use crate::encoder::{encode, init_encoder, linear, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::mla::{init_mla, mla_forward, MlaState};
use crate::params::{Initializer, ModelParams, ParamVars};
use crate::tensor::Tensor;

/// Which decoder modules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub ds: bool,
    pub da: bool,
    pub mla: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components { ds: true, da: true, mla: true }
    }
}

impl Components {
    pub fn is_full(&self) -> bool {
        *self == Components::default()
    }
}

impl FromStr for Components {
    type Err = Error;

    /// Parses an ablation list such as `ds,mla`; names listed are disabled.
    fn from_str(s: &str) -> Result<Self> {
        let mut c = Components::default();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "ds" => c.ds = false,
                "da" => c.da = false,
                "mla" => c.mla = false,
                other => {
                    return Err(Error::Config(format!(
                        "unknown module `{other}` (expected ds, da or mla)"
                    )))
                }
            }
        }
        Ok(c)
    }
}

impl fmt::Display for Components {
    /// The ablation list, empty for the full model.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let off: Vec<&str> = [("ds", self.ds), ("da", self.da), ("mla", self.mla)]
            .into_iter()
            .filter(|(_, on)| !on)
            .map(|(n, _)| n)
            .collect();
        f.write_str(&off.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Shared width of the decoded pyramid.
    pub decoder_dim: usize,
    /// Heads in each branch of a double-attention block.
    pub da_heads: usize,
    pub components: Components,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder_dim: 32,
            da_heads: 2,
            components: Components::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let half = self.decoder_dim / 2;
        if self.decoder_dim == 0 || !self.decoder_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "decoder_dim {} must be positive and even",
                self.decoder_dim
            )));
        }
        if self.da_heads == 0 || !half.is_multiple_of(self.da_heads) {
            return Err(Error::Config(format!(
                "decoder half-width {half} not divisible by {} heads",
                self.da_heads
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.encoder.num_stages()
    }
}

pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let enc = &cfg.encoder;
    let d = cfg.decoder_dim;
    let mut init = Initializer::new(seed);
    init_encoder(&mut init, "encoder", enc);
    if cfg.components.ds {
        init_ds(&mut init, "ds", enc.embed_dim);
    }
    init.linear("lateral.0", enc.embed_dim, d, true);
    for s in 1..cfg.levels() {
        init.linear(&format!("lateral.{s}"), enc.stage_dim(s), d, true);
        if cfg.components.da {
            init_da(&mut init, &format!("da.{s}"), d, cfg.da_heads, enc.stage_window(s), enc.mlp_hidden(d));
        }
    }
    init_mla(&mut init, "mla", d, cfg.levels(), cfg.components.mla);
    Ok(init.finish())
}

/// Zeroes every residual-branch output projection, the deep-supervision
/// convolutions, the prediction heads and the fusion, so that blocks reduce
/// to their identity paths and every score map is zero.
pub fn zero_output_projections(params: &mut ModelParams) {
    params.zero_where(|n| {
        n.contains(".proj.") && !n.starts_with("encoder.patch_embed")
            || n.contains(".fc2.")
            || n.starts_with("ds.")
            || n.starts_with("mla.head.")
            || n.starts_with("mla.fuse.")
    });
}

#[derive(Debug, Clone)]
pub struct ModelOutput<'t> {
    pub encoder: FeaturePyramid<'t>,
    pub ds: Option<DsOutput<'t>>,
    pub mla: MlaState<'t>,
}

impl<'t> ModelOutput<'t> {
    /// Final prediction logits `[N, 1, H, W]`.
    pub fn fused(&self) -> Var<'t> {
        self.mla.fused_map
    }

    /// Every supervised map: the deep-supervision map (when present), the
    /// per-level maps and the fused map.
    pub fn supervised_maps(&self) -> Vec<Var<'t>> {
        let mut maps: Vec<Var<'t>> = self.ds.iter().map(|d| d.predicted_map).collect();
        maps.extend(self.mla.level_maps.iter().copied());
        maps.push(self.mla.fused_map);
        maps
    }
}

pub fn forward<'t>(image: Var<'t>, vars: &ParamVars<'t>, cfg: &ModelConfig) -> Result<ModelOutput<'t>> {
    let enc = &cfg.encoder;
    let full = (enc.img_size, enc.img_size);
    let pyramid = encode(image, &vars.scope("encoder"), enc)?;

    let ds = if cfg.components.ds {
        Some(ds_forward(pyramid.patch, &vars.scope("ds"), full)?)
    } else {
        None
    };
    let finest = ds.map_or(pyramid.patch, |d| d.features);
    let mut z1 = vec![linear(finest, &vars.scope("lateral.0"))?];
    for s in 1..cfg.levels() {
        let mut z = linear(pyramid.stages[s], &vars.scope(format!("lateral.{s}")))?;
        if cfg.components.da {
            z = da_forward(z, &vars.scope(format!("da.{s}")), cfg.da_heads, enc.stage_window(s))?;
        }
        z1.push(z);
    }
    let z1 = z1
        .into_iter()
        .map(|z| z.permute([0, 3, 1, 2]))
        .collect::<Result<Vec<_>>>()?;
    let mla = mla_forward(z1, &vars.scope("mla"), full, cfg.components.mla)?;
    Ok(ModelOutput {
        encoder: pyramid,
        ds,
        mla,
    })
}

/// Class-balanced cross entropy averaged over the supervised maps and
/// normalized per pixel.
pub fn training_loss<'t>(out: &ModelOutput<'t>, mask: Var<'t>) -> Result<Var<'t>> {
    let maps = out.supervised_maps();
    let shape = mask.shape();
    let pixels = shape[2..].iter().product::<usize>() as f64;
    let mut total: Option<Var<'t>> = None;
    for m in &maps {
        let l = m.weighted_ce(mask)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    total
        .ok_or_else(|| Error::State("model produced no score maps".into()))?
        .scale(1.0 / (maps.len() as f64 * pixels))
}

/// Loss value and per-parameter gradients for one batch.
pub fn loss_and_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    images: &Tensor,
    masks: &Tensor,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let vars = params.register(&tape);
    let out = forward(tape.constant(images.clone()), &vars, cfg)?;
    let loss = training_loss(&out, tape.constant(masks.clone()))?;
    let value = loss.value().item()?;
    let grads = tape.backward(loss)?;
    Ok((value, vars.gradients(&grads)))
}

/// Per-level and fused logits, each `[N, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct ScoreMaps {
    pub levels: Vec<Tensor>,
    pub fused: Tensor,
}

/// Score maps for a batch of images, without computing gradients.
pub fn predict_maps(params: &ModelParams, cfg: &ModelConfig, images: &Tensor) -> Result<ScoreMaps> {
    let tape = Tape::new();
    let vars = params.register(&tape);
    let out = forward(tape.constant(images.clone()), &vars, cfg)?;
    Ok(ScoreMaps {
        levels: out.mla.level_maps.iter().map(|m| m.value()).collect(),
        fused: out.fused().value(),
    })
}

/// Fused logits for a batch of images.
pub fn predict_logits(params: &ModelParams, cfg: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    Ok(predict_maps(params, cfg, images)?.fused)
}
