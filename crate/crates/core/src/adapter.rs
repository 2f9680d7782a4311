//! Adapter arithmetic on the tape.
//!
//! All adapters are bias-free bottlenecks `s·σ(x·W_down)·W_up`. The
//! residual form adds that delta to `x`; blocks that carry the residual
//! themselves use the delta directly.

use std::collections::BTreeMap;

use uniadapter_tensor::{Real, Tape, Var};

use crate::config::{Activation, Modality};
use crate::error::{config_err, Result};

pub fn activate<T: Real>(tape: &mut Tape<T>, x: Var, act: Activation) -> Result<Var> {
    Ok(match act {
        Activation::Relu => tape.relu(x)?,
        Activation::Gelu => tape.gelu(x)?,
    })
}

/// `s·σ(x·down)·up`.
pub fn bottleneck_delta<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    down: Var,
    up: Var,
    s: f64,
    act: Activation,
) -> Result<Var> {
    let z = tape.matmul(x, down)?;
    let z = activate(tape, z, act)?;
    let y = tape.matmul(z, up)?;
    Ok(tape.scale(y, T::of(s))?)
}

/// Residual adapter `x + s·σ(x·down)·up`.
pub fn bottleneck_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    down: Var,
    up: Var,
    s: f64,
    act: Activation,
) -> Result<Var> {
    let delta = bottleneck_delta(tape, x, down, up, s, act)?;
    Ok(tape.add(x, delta)?)
}

/// `s·[σ(x·down)·up_text + σ(x·down)·up_cross]`: two up branches over one
/// shared down activation.
pub fn crossmodal_delta<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    down: Var,
    up_text: Var,
    up_cross: Var,
    s: f64,
    act: Activation,
) -> Result<Var> {
    let z = tape.matmul(x, down)?;
    let z = activate(tape, z, act)?;
    let yt = tape.matmul(z, up_text)?;
    let yc = tape.matmul(z, up_cross)?;
    let y = tape.add(yt, yc)?;
    Ok(tape.scale(y, T::of(s))?)
}

/// `x·W + b + (alpha/rank)·(x·A)·B`.
#[allow(clippy::too_many_arguments)]
pub fn lora_linear<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    a: Var,
    b: Var,
    alpha: f64,
) -> Result<Var> {
    let mut y = tape.matmul(x, w)?;
    if let Some(bias) = bias {
        y = tape.add_row(y, bias)?;
    }
    let rank = tape.shape(a)[1];
    let low = tape.matmul(x, a)?;
    let low = tape.matmul(low, b)?;
    let low = tape.scale(low, T::of(alpha / rank as f64))?;
    Ok(tape.add(y, low)?)
}

/// One layer's adapter projections: a down projection (possibly shared
/// across modalities) and one up projection per modality it serves.
#[derive(Clone, Debug)]
pub struct AdapterUnit {
    pub down: Var,
    pub ups: BTreeMap<Modality, Var>,
    pub scale: f64,
    pub activation: Activation,
}

impl AdapterUnit {
    fn up(&self, m: Modality) -> Result<Var> {
        match self.ups.get(&m) {
            Some(&v) => Ok(v),
            None => config_err(format!("modality {} is not enabled for this adapter", m.letter())),
        }
    }

    /// Unimodal delta with this modality's up projection.
    pub fn unimodal_delta<T: Real>(&self, tape: &mut Tape<T>, x: Var, m: Modality) -> Result<Var> {
        let up = self.up(m)?;
        bottleneck_delta(tape, x, self.down, up, self.scale, self.activation)
    }

    /// Residual unimodal form: shared down, modality-specific up.
    pub fn unimodal<T: Real>(&self, tape: &mut Tape<T>, x: Var, m: Modality) -> Result<Var> {
        let delta = self.unimodal_delta(tape, x, m)?;
        Ok(tape.add(x, delta)?)
    }

    /// Cross-modal delta reusing the textual up projection next to the
    /// cross-modal one.
    pub fn crossmodal_delta<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let Some(&up_t) = self.ups.get(&Modality::Text) else {
            return config_err("cross-modal adapter needs the textual up projection (T enabled)");
        };
        let up_c = self.up(Modality::Cross)?;
        crossmodal_delta(tape, x, self.down, up_t, up_c, self.scale, self.activation)
    }

    /// Residual cross-modal form.
    pub fn crossmodal<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let delta = self.crossmodal_delta(tape, x)?;
        Ok(tape.add(x, delta)?)
    }
}
