//! Weighted cross-entropy on the main and auxiliary outputs.

use nucseg_core::ClassScheme;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{NodeId, Tape};
use crate::network::Output;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: Vec<f64>,
    /// Weight of the auxiliary (global) loss.
    pub lambda_g: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::from_scheme(&ClassScheme::nuclei(), 1.0)
    }
}

impl LossConfig {
    pub fn from_scheme(scheme: &ClassScheme, lambda_g: f64) -> Self {
        Self {
            weights: scheme.weights.clone(),
            lambda_g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_g >= 0.0) || !self.lambda_g.is_finite() {
            return Err(NnError::Config(format!("lambda_g must be >= 0 (got {})", self.lambda_g)));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(NnError::Config("class weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub main: f64,
    /// Auxiliary loss, present for dual-branch outputs.
    pub aux: Option<f64>,
}

/// `L = L_p + λ_g·L_g`.
pub fn combine(main: f64, aux: Option<f64>, lambda_g: f64) -> f64 {
    main + aux.map_or(0.0, |a| lambda_g * a)
}

fn check_aux<V>(out: &Output<V>, global_labels: Option<&[u8]>) -> Result<()> {
    if out.aux.is_some() && global_labels.is_none() {
        return Err(NnError::Shape("auxiliary logits need global labels".into()));
    }
    Ok(())
}

/// Records the combined loss on `tape`; returns the scalar node and its parts.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    out: &Output<NodeId>,
    local_labels: &[u8],
    global_labels: Option<&[u8]>,
    cfg: &LossConfig,
) -> Result<(NodeId, LossParts)> {
    check_aux(out, global_labels)?;
    use crate::graph::Graph;
    let lp = tape.weighted_ce(out.main, local_labels, &cfg.weights)?;
    let main = tape.value(&lp).item().f64();
    match (out.aux, global_labels) {
        (Some(aux), Some(gl)) => {
            let lg = tape.weighted_ce(aux, gl, &cfg.weights)?;
            let aux_v = tape.value(&lg).item().f64();
            let scaled = tape.scale(&lg, cfg.lambda_g);
            let total = tape.add(&lp, &scaled)?;
            let parts = LossParts {
                total: tape.value(&total).item().f64(),
                main,
                aux: Some(aux_v),
            };
            Ok((total, parts))
        }
        _ => Ok((
            lp,
            LossParts {
                total: main,
                main,
                aux: None,
            },
        )),
    }
}

/// Value-only counterpart of [`combined_loss`].
pub fn combined_loss_value<T: Scalar>(
    out: &Output<Tensor<T>>,
    local_labels: &[u8],
    global_labels: Option<&[u8]>,
    cfg: &LossConfig,
) -> Result<LossParts> {
    check_aux(out, global_labels)?;
    let main = ops::weighted_ce(&out.main, local_labels, &cfg.weights)?.0;
    let aux = match (&out.aux, global_labels) {
        (Some(a), Some(gl)) => Some(ops::weighted_ce(a, gl, &cfg.weights)?.0),
        _ => None,
    };
    Ok(LossParts {
        total: combine(main, aux, cfg.lambda_g),
        main,
        aux,
    })
}
