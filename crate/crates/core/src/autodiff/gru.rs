//! Convolutional gated recurrent unit.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Weight and bias of one convolution, generic over storage (plain tensors
/// for parameters at rest, [`Var`]s once bound to a tape).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> ConvWeights<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ConvWeights<Q> {
        ConvWeights { weight: f(&self.weight), bias: f(&self.bias) }
    }
}

/// Gate weights of a convolutional GRU with `hidden` state channels and
/// `input` feature channels:
/// `gates`: `2*hidden x (input + hidden) x k x k` producing update and reset,
/// `candidate`: `hidden x (input + hidden) x k x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights<P> {
    pub gates: ConvWeights<P>,
    pub candidate: ConvWeights<P>,
}

impl<P> GruWeights<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> GruWeights<Q> {
        GruWeights { gates: self.gates.map(f), candidate: self.candidate.map(f) }
    }
}

/// One GRU update:
///
/// ```text
/// z, r = sigmoid(conv([x, h]))
/// c    = tanh(conv([x, r * h]))
/// h'   = h + z * (c - h)  =  (1 - z) * h + z * c
/// ```
pub fn gru_step<'t, T: Element>(
    features: Var<'t, T>,
    state: Var<'t, T>,
    params: &GruWeights<Var<'t, T>>,
    dilation: usize,
) -> Result<Var<'t, T>> {
    let (fs, ss) = (features.shape(), state.shape());
    if fs.len() != 4 || ss.len() != 4 || fs[0] != ss[0] || fs[2..] != ss[2..] {
        return Err(Error::ShapeMismatch { op: "gru_step", lhs: fs, rhs: ss });
    }
    let hidden = ss[1];
    let gate_shape = params.gates.weight.shape();
    if gate_shape[0] != 2 * hidden {
        return Err(Error::ShapeMismatch { op: "gru_step gates", lhs: gate_shape, rhs: ss });
    }
    let xh = Var::concat(&[features, state])?;
    let zr = xh.conv2d(params.gates.weight, Some(params.gates.bias), 1, dilation)?.sigmoid()?;
    let z = zr.slice_channels(0, hidden)?;
    let r = zr.slice_channels(hidden, hidden)?;
    let xr = Var::concat(&[features, r.mul(state)?])?;
    let cand = xr.conv2d(params.candidate.weight, Some(params.candidate.bias), 1, dilation)?.tanh()?;
    state.add(z.mul(cand.sub(state)?)?)
}
