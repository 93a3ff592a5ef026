use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::params::{filled, xavier};
use crate::model::{
    angle_features, decode_tau, loss_mse_log, ModelSpec, ParamSet, TrainableModel, ANGLE_FEATURES,
};
use crate::scene::{CotField, RadianceField};
use crate::tensor::{NodeId, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: [usize; 2],
    /// Append the six angle features to each pixel's reflectance.
    pub angle_features: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: [32, 32],
            angle_features: true,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::config("MLP hidden widths must be positive"));
        }
        Ok(())
    }

    fn inputs(&self) -> usize {
        if self.angle_features {
            1 + ANGLE_FEATURES
        } else {
            1
        }
    }
}

/// Two-hidden-layer perceptron mapping one pixel's reflectance (and
/// optionally the view geometry) to `log1p(τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMlp {
    config: MlpConfig,
    params: ParamSet,
}

impl PixelMlp {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h1, h2] = config.hidden;
        let mut ps = ParamSet::new();
        ps.push("l1.w", xavier(&mut rng, config.inputs(), h1, 1.0));
        ps.push("l1.b", filled(h1, 0.0));
        ps.push("l2.w", xavier(&mut rng, h1, h2, 1.0));
        ps.push("l2.b", filled(h2, 0.0));
        ps.push("out.w", xavier(&mut rng, h2, 1, 0.1));
        ps.push("out.b", filled(1, 0.0));
        Ok(Self { config, params: ps })
    }

    pub fn from_params(config: MlpConfig, stored: &ParamSet) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if m.params.names() != stored.names() || m.params.lens() != stored.lens() {
            return Err(Error::format(
                "CAACCKPT1",
                "parameters do not match the MLP config",
            ));
        }
        m.params
            .load_values(stored.tensors().iter().map(|t| t.data().to_vec()).collect())?;
        Ok(m)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    fn design_matrix(&self, r: &RadianceField) -> (Vec<usize>, Vec<f64>) {
        let f = self.config.inputs();
        let angles = angle_features(&r.geometry);
        let mut x = Vec::with_capacity(r.values.len() * f);
        for &v in &r.values {
            x.push(v);
            if self.config.angle_features {
                x.extend_from_slice(&angles);
            }
        }
        (vec![r.values.len(), f], x)
    }

    fn forward_nodes(&self, tape: &mut Tape, p: &[NodeId], r: &RadianceField) -> Result<NodeId> {
        let (shape, data) = self.design_matrix(r);
        let x = tape.constant(shape, data)?;
        let h = tape.matmul(x, p[0])?;
        let h = tape.add(h, p[1])?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, p[2])?;
        let h = tape.add(h, p[3])?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, p[4])?;
        Ok(tape.add(y, p[5])?)
    }
}

impl TrainableModel for PixelMlp {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::Mlp(self.config)
    }

    fn scene_loss(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        radiance: &RadianceField,
        target: &CotField,
    ) -> Result<NodeId> {
        let y = self.forward_nodes(tape, nodes, radiance)?;
        Ok(loss_mse_log(tape, y, &target.values)?)
    }

    fn predict(&self, radiance: &RadianceField) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, false)?;
        let y = self.forward_nodes(&mut tape, &p, radiance)?;
        Ok(tape.value(y).iter().map(|&v| decode_tau(v, true)).collect())
    }
}
