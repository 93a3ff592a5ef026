//! Cloud-Attention-Net with Angle Coding.
//!
//! A radiance field is cut into non-overlapping patches, each patch is
//! linearly embedded and given a sinusoidal position code, the viewing
//! geometry is encoded by a small MLP and injected into the token sequence,
//! a stack of pre-norm self-attention blocks mixes spatial context, and a
//! linear head maps each token back to its patch of `log1p(τ)` values.

mod checkpoint;
pub(crate) mod params;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, HistoryRow, ModelSpec, Provenance,
    CHECKPOINT_MAGIC,
};
pub use params::ParamSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{CotField, RadianceField, ViewGeometry, TAU_MAX};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use crate::{Error, Result};
use params::{filled, xavier};

const LN_EPS: f64 = 1e-5;
const HEAD_INIT_SCALE: f64 = 0.1;
pub const ANGLE_FEATURES: usize = 6;

/// How the geometry code enters the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleMode {
    /// Added to every patch token.
    Additive,
    /// Appended as an extra token, dropped again before the head.
    Concat,
    /// No geometry information.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaacConfig {
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub angle_mlp: usize,
    pub angle_mode: AngleMode,
    pub predict_log: bool,
    /// Sinusoidal position codes on the patch tokens.
    pub positional: bool,
}

impl Default for CaacConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            d_model: 32,
            heads: 4,
            layers: 2,
            d_ff: 64,
            angle_mlp: 32,
            angle_mode: AngleMode::Additive,
            predict_log: true,
            positional: true,
        }
    }
}

impl CaacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.d_model < 2
            || self.heads == 0
            || self.d_ff == 0
            || self.angle_mlp == 0
        {
            return Err(Error::config("model sizes must be positive (d_model >= 2)"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn check_grid(&self, height: usize, width: usize) -> Result<()> {
        if !height.is_multiple_of(self.patch) || !width.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "patch {} does not divide scene {height}x{width}",
                self.patch
            )));
        }
        Ok(())
    }
}

/// Models the trainer can fit and the evaluator can run.
pub trait TrainableModel: Sync {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn spec(&self) -> ModelSpec;
    /// Records the per-scene training loss on `tape`, with `nodes` the
    /// registered parameters in [`ParamSet`] order.
    fn scene_loss(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        radiance: &RadianceField,
        target: &CotField,
    ) -> Result<NodeId>;
    /// Decoded optical thickness per pixel, row-major.
    fn predict(&self, radiance: &RadianceField) -> Result<Vec<f64>>;
}

/// Mean over pixels of `(y - log1p τ)^2`.
pub fn loss_mse_log(
    tape: &mut Tape,
    pred: NodeId,
    target_tau: &[f64],
) -> std::result::Result<NodeId, TensorError> {
    let target: Vec<f64> = target_tau.iter().map(|t| t.ln_1p()).collect();
    loss_mse(tape, pred, target)
}

pub(crate) fn loss_mse(
    tape: &mut Tape,
    pred: NodeId,
    target: Vec<f64>,
) -> std::result::Result<NodeId, TensorError> {
    let shape = tape.shape(pred).to_vec();
    if shape.iter().product::<usize>() != target.len() {
        return Err(TensorError::ShapeMismatch {
            op: "loss_mse_log",
            lhs: shape,
            rhs: vec![target.len()],
        });
    }
    let t = tape.constant(shape, target)?;
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Decodes a network output to optical thickness.
pub fn decode_tau(y: f64, predict_log: bool) -> f64 {
    let tau = if predict_log { y.exp_m1() } else { y };
    tau.clamp(0.0, TAU_MAX)
}

pub fn angle_features(geom: &ViewGeometry) -> [f64; ANGLE_FEATURES] {
    let (s, v, a) = (
        geom.sza_deg.to_radians(),
        geom.vza_deg.to_radians(),
        geom.raz_deg.to_radians(),
    );
    [s.cos(), s.sin(), v.cos(), v.sin(), a.cos(), a.sin()]
}

/// Sinusoidal code for token `pos`: `sin` on even and `cos` on odd channels.
pub fn positional_code(pos: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Rearranges an `H x W` grid into `[T, patch^2]`, patches in row-major
/// order and pixels row-major within each patch.
pub fn patchify(values: &[f64], height: usize, width: usize, patch: usize) -> Vec<f64> {
    let (ph, pw) = (height / patch, width / patch);
    let mut out = Vec::with_capacity(values.len());
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..patch {
                let row = (pr * patch + r) * width + pc * patch;
                out.extend_from_slice(&values[row..row + patch]);
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f64], height: usize, width: usize, patch: usize) -> Vec<f64> {
    let (ph, pw) = (height / patch, width / patch);
    let mut out = vec![0.0; height * width];
    let mut it = tokens.iter();
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..patch {
                for c in 0..patch {
                    out[(pr * patch + r) * width + pc * patch + c] =
                        *it.next().expect("token count matches grid");
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
struct LayerParams {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct AngleCoder {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    angle: Option<AngleCoder>,
    layers: Vec<LayerParams>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

/// Intermediate values exposed for inspection and tests.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    /// Attention weight matrices `[tokens, tokens]`, layer-major then head.
    pub attention: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaacModel {
    config: CaacConfig,
    params: ParamSet,
    layout: Layout,
}

impl CaacModel {
    /// Fresh model: Xavier-uniform projections, zero biases, unit layer-norm
    /// gains and a head scaled down by 0.1.
    pub fn new(config: CaacConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, p2, ff, am) = (
            config.d_model,
            config.patch * config.patch,
            config.d_ff,
            config.angle_mlp,
        );
        let mut ps = ParamSet::new();
        let patch_w = ps.push("patch.w", xavier(&mut rng, p2, d, 1.0));
        let patch_b = ps.push("patch.b", filled(d, 0.0));
        let angle = match config.angle_mode {
            AngleMode::Off => None,
            _ => Some(AngleCoder {
                w1: ps.push("angle.w1", xavier(&mut rng, ANGLE_FEATURES, am, 1.0)),
                b1: ps.push("angle.b1", filled(am, 0.0)),
                w2: ps.push("angle.w2", xavier(&mut rng, am, d, 1.0)),
                b2: ps.push("angle.b2", filled(d, 0.0)),
            }),
        };
        let layers = (0..config.layers)
            .map(|l| {
                let name = |s: &str| format!("layer{l}.{s}");
                LayerParams {
                    ln1_g: ps.push(name("ln1.g"), filled(d, 1.0)),
                    ln1_b: ps.push(name("ln1.b"), filled(d, 0.0)),
                    wq: ps.push(name("attn.wq"), xavier(&mut rng, d, d, 1.0)),
                    bq: ps.push(name("attn.bq"), filled(d, 0.0)),
                    wk: ps.push(name("attn.wk"), xavier(&mut rng, d, d, 1.0)),
                    bk: ps.push(name("attn.bk"), filled(d, 0.0)),
                    wv: ps.push(name("attn.wv"), xavier(&mut rng, d, d, 1.0)),
                    bv: ps.push(name("attn.bv"), filled(d, 0.0)),
                    wo: ps.push(name("attn.wo"), xavier(&mut rng, d, d, 1.0)),
                    bo: ps.push(name("attn.bo"), filled(d, 0.0)),
                    ln2_g: ps.push(name("ln2.g"), filled(d, 1.0)),
                    ln2_b: ps.push(name("ln2.b"), filled(d, 0.0)),
                    w1: ps.push(name("ff.w1"), xavier(&mut rng, d, ff, 1.0)),
                    b1: ps.push(name("ff.b1"), filled(ff, 0.0)),
                    w2: ps.push(name("ff.w2"), xavier(&mut rng, ff, d, 1.0)),
                    b2: ps.push(name("ff.b2"), filled(d, 0.0)),
                }
            })
            .collect();
        let lnf_g = ps.push("final_ln.g", filled(d, 1.0));
        let lnf_b = ps.push("final_ln.b", filled(d, 0.0));
        let head_w = ps.push("head.w", xavier(&mut rng, d, p2, HEAD_INIT_SCALE));
        let head_b = ps.push("head.b", filled(p2, 0.0));
        let layout = Layout {
            patch_w,
            patch_b,
            angle,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        };
        Ok(Self {
            config,
            params: ps,
            layout,
        })
    }

    /// Rebuilds a model from a config and stored parameter values.
    pub fn from_params(config: CaacConfig, stored: &ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.names() != stored.names() {
            return Err(Error::format(
                "CAACCKPT1",
                "parameter names do not match the model config",
            ));
        }
        for (dst, src) in model.params.tensors_mut().iter_mut().zip(stored.tensors()) {
            if dst.shape() != src.shape() {
                return Err(Error::format(
                    "CAACCKPT1",
                    format!(
                        "parameter shape {:?} does not match {:?}",
                        src.shape(),
                        dst.shape()
                    ),
                ));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(model)
    }

    pub fn config(&self) -> &CaacConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layout.layers.len()
    }

    /// Zeroes the attention and feed-forward output projections of a layer,
    /// turning the block into its residual identity.
    pub fn zero_output_projections(&mut self, layer: usize) {
        let l = self.layout.layers[layer].clone();
        for i in [l.wo, l.bo, l.w2, l.b2] {
            self.params
                .get_mut(i)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    fn angle_code_node(
        &self,
        tape: &mut Tape,
        p: &[NodeId],
        geom: &ViewGeometry,
    ) -> Result<Option<NodeId>> {
        let Some(coder) = &self.layout.angle else {
            return Ok(None);
        };
        let feats = tape.constant(vec![1, ANGLE_FEATURES], angle_features(geom).to_vec())?;
        let h = tape.matmul(feats, p[coder.w1])?;
        let h = tape.add(h, p[coder.b1])?;
        let h = tape.gelu(h)?;
        let out = tape.matmul(h, p[coder.w2])?;
        Ok(Some(tape.add(out, p[coder.b2])?))
    }

    /// Geometry embedding of width `d_model`; the zero vector when angle
    /// coding is off.
    pub fn angle_code(&self, geom: &ViewGeometry) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false)?;
        Ok(match self.angle_code_node(&mut tape, &p, geom)? {
            Some(id) => tape.value(id).to_vec(),
            None => vec![0.0; self.config.d_model],
        })
    }

    fn tokens_node(&self, tape: &mut Tape, p: &[NodeId], r: &RadianceField) -> Result<NodeId> {
        self.config.check_grid(r.height, r.width)?;
        let patch = self.config.patch;
        let t = (r.height / patch) * (r.width / patch);
        let x = tape.constant(
            vec![t, patch * patch],
            patchify(&r.values, r.height, r.width, patch),
        )?;
        let x = tape.matmul(x, p[self.layout.patch_w])?;
        let mut x = tape.add(x, p[self.layout.patch_b])?;
        if self.config.positional {
            let pe: Vec<f64> = (0..t)
                .flat_map(|i| positional_code(i, self.config.d_model))
                .collect();
            let pe = tape.constant(vec![t, self.config.d_model], pe)?;
            x = tape.add(x, pe)?;
        }
        Ok(x)
    }

    /// Patch tokens `[T, d_model]`: linear patch embedding plus position code.
    pub fn tokenize(&self, r: &RadianceField) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false)?;
        let x = self.tokens_node(&mut tape, &p, r)?;
        Ok(tape.to_tensor(x))
    }

    /// Pre-norm block: `x + MHA(LN(x))`, then `h + FF(LN(h))`.
    pub fn encoder_block(
        &self,
        tape: &mut Tape,
        p: &[NodeId],
        layer: usize,
        x: NodeId,
        trace: &mut ForwardTrace,
    ) -> Result<NodeId> {
        let l = &self.layout.layers[layer];
        let (d, heads) = (self.config.d_model, self.config.heads);
        let dh = d / heads;
        let h = tape.layer_norm(x, p[l.ln1_g], p[l.ln1_b], LN_EPS)?;
        let proj =
            |tape: &mut Tape, w: usize, b: usize| -> std::result::Result<NodeId, TensorError> {
                let y = tape.matmul(h, p[w])?;
                tape.add(y, p[b])
            };
        let q = proj(tape, l.wq, l.bq)?;
        let k = proj(tape, l.wk, l.bk)?;
        let v = proj(tape, l.wv, l.bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax(scores)?;
            trace.attention.push(weights);
            outs.push(tape.matmul(weights, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        let o = tape.matmul(cat, p[l.wo])?;
        let o = tape.add(o, p[l.bo])?;
        let x = tape.add(x, o)?;

        let h = tape.layer_norm(x, p[l.ln2_g], p[l.ln2_b], LN_EPS)?;
        let f = tape.matmul(h, p[l.w1])?;
        let f = tape.add(f, p[l.b1])?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, p[l.w2])?;
        let f = tape.add(f, p[l.b2])?;
        Ok(tape.add(x, f)?)
    }

    /// Records the network on `tape` and returns the raw head output
    /// `[T, patch^2]` (patch layout, `log1p τ` when `predict_log`).
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        p: &[NodeId],
        r: &RadianceField,
        trace: &mut ForwardTrace,
    ) -> Result<NodeId> {
        let mut x = self.tokens_node(tape, p, r)?;
        let t = tape.shape(x)[0];
        if let Some(code) = self.angle_code_node(tape, p, &r.geometry)? {
            x = match self.config.angle_mode {
                AngleMode::Additive => {
                    let ones = tape.constant(vec![t, 1], vec![1.0; t])?;
                    let spread = tape.matmul(ones, code)?;
                    tape.add(x, spread)?
                }
                AngleMode::Concat => tape.concat_rows(&[x, code])?,
                AngleMode::Off => x,
            };
        }
        for layer in 0..self.layout.layers.len() {
            x = self.encoder_block(tape, p, layer, x, trace)?;
        }
        let mut x = tape.layer_norm(x, p[self.layout.lnf_g], p[self.layout.lnf_b], LN_EPS)?;
        if tape.shape(x)[0] != t {
            x = tape.slice_rows(x, 0, t)?;
        }
        let y = tape.matmul(x, p[self.layout.head_w])?;
        Ok(tape.add(y, p[self.layout.head_b])?)
    }

    /// Raw network output un-flattened to the pixel grid.
    pub fn forward_raw(&self, r: &RadianceField) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false)?;
        let y = self.forward_nodes(&mut tape, &p, r, &mut ForwardTrace::default())?;
        Ok(unpatchify(
            tape.value(y),
            r.height,
            r.width,
            self.config.patch,
        ))
    }

    /// Attention weights of every layer and head for one input.
    pub fn attention_maps(&self, r: &RadianceField) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false)?;
        let mut trace = ForwardTrace::default();
        self.forward_nodes(&mut tape, &p, r, &mut trace)?;
        Ok(trace
            .attention
            .iter()
            .map(|&id| tape.to_tensor(id))
            .collect())
    }

    pub fn forward(&self, r: &RadianceField, pixel_size_km: f64) -> Result<CotField> {
        let raw = self.forward_raw(r)?;
        let values = raw
            .iter()
            .map(|&y| decode_tau(y, self.config.predict_log))
            .collect();
        CotField::new(r.height, r.width, pixel_size_km, values)
    }
}

impl TrainableModel for CaacModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::Caac(self.config)
    }

    fn scene_loss(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        radiance: &RadianceField,
        target: &CotField,
    ) -> Result<NodeId> {
        let y = self.forward_nodes(tape, nodes, radiance, &mut ForwardTrace::default())?;
        let patch = self.config.patch;
        let tau = patchify(&target.values, target.height, target.width, patch);
        let loss = if self.config.predict_log {
            loss_mse_log(tape, y, &tau)?
        } else {
            loss_mse(tape, y, tau)?
        };
        Ok(loss)
    }

    fn predict(&self, radiance: &RadianceField) -> Result<Vec<f64>> {
        Ok(self
            .forward_raw(radiance)?
            .iter()
            .map(|&y| decode_tau(y, self.config.predict_log))
            .collect())
    }
}
