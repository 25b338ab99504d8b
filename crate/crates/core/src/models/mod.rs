//! The recurrent inference machine, its two ablations and the classical
//! gradient-ascent baseline.
//!
//! One update of the standard cell:
//!
//! ```text
//! f      = tanh(conv_in([grad, eta]))        3x3, stride 2
//! s'     = gru(f, s)
//! d_eta  = conv_out(tanh(conv_mid(s')))      conv_mid: 3x3 transpose conv, stride 2
//! eta'   = eta + d_eta
//! ```
//!
//! The dilated layout keeps full resolution and replaces the strides with
//! dilated convolutions. The GDN cell drops `eta` from the input, the FFN
//! cell replaces the GRU with a stateless `relu(conv(f))`.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gru_step, ConvWeights, GruWeights, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::likelihood::{self, GradSpace, Observation, DEFAULT_DELTA};
use crate::operators::LinearOperator;
use crate::tensor::{Element, Tensor};

const KERNEL: usize = 3;

/// Spatial arrangement of the hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Stride-2 encoder, half-resolution state, transpose-conv decoder.
    Strided,
    /// Full resolution throughout with dilated 3x3 convolutions.
    Dilated,
}

/// Recurrent core and input wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Rim,
    /// Consumes the likelihood gradient only.
    Gdn,
    /// Stateless: the GRU is replaced by `relu(conv(.))`.
    Ffn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RimConfig {
    /// Image channels.
    pub channels: usize,
    pub layout: Layout,
    pub cell: Cell,
    /// Encoder features, recurrent features, decoder features.
    pub widths: [usize; 3],
    /// Dilation of conv_in, the recurrent convs, conv_mid and conv_out.
    /// Defaults to `[1, 2, 4, 1]` for the dilated layout, all ones otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilations: Option<[usize; 4]>,
    #[serde(default)]
    pub grad_space: GradSpace,
    /// Clamp margin for the starting point `logit(clip(A^T y))`.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

impl RimConfig {
    /// Full-size strided model with widths (64, 256, 64).
    pub fn standard(channels: usize) -> Self {
        Self::with_widths(channels, [64, 256, 64])
    }

    /// Small strided model with widths (16, 64, 16) for quick runs.
    pub fn desk(channels: usize) -> Self {
        Self::with_widths(channels, [16, 64, 16])
    }

    pub fn with_widths(channels: usize, widths: [usize; 3]) -> Self {
        RimConfig {
            channels,
            layout: Layout::Strided,
            cell: Cell::Rim,
            widths,
            dilations: None,
            grad_space: GradSpace::Eta,
            delta: DEFAULT_DELTA,
        }
    }

    /// Dilated full-resolution model with widths (64, 96, 64).
    pub fn dilated(channels: usize) -> Self {
        RimConfig { layout: Layout::Dilated, ..Self::with_widths(channels, [64, 96, 64]) }
    }

    pub fn with_cell(mut self, cell: Cell) -> Self {
        self.cell = cell;
        self
    }

    pub fn dilation_schedule(&self) -> [usize; 4] {
        self.dilations.unwrap_or(match self.layout {
            Layout::Strided => [1; 4],
            Layout::Dilated => [1, 2, 4, 1],
        })
    }

    fn stride(&self) -> usize {
        match self.layout {
            Layout::Strided => 2,
            Layout::Dilated => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.widths.contains(&0) {
            return Err(invalid(format!("channels and widths must be positive: {} {:?}", self.channels, self.widths)));
        }
        if self.dilation_schedule().contains(&0) {
            return Err(invalid("dilations must be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(invalid(format!("clamp margin must lie in (0, 0.5), got {}", self.delta)));
        }
        Ok(())
    }

    /// Spatial size of the recurrent state for an `h x w` image.
    pub fn state_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.stride();
        (h.div_ceil(s), w.div_ceil(s))
    }

    /// Name, shape and fan-in (`None` for zero-initialised entries) of every
    /// parameter, in storage order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.channels;
        let [f1, f2, f3] = self.widths;
        let k2 = KERNEL * KERNEL;
        let cin = match self.cell {
            Cell::Gdn => c,
            Cell::Rim | Cell::Ffn => 2 * c,
        };
        let w = |name: &'static str, cout: usize, cin: usize, fan_in: usize| ParamSpec {
            name,
            shape: vec![cout, cin, KERNEL, KERNEL],
            fan_in: Some(fan_in),
        };
        let b = |name: &'static str, n: usize| ParamSpec { name, shape: vec![n], fan_in: None };
        let mut specs = vec![w("conv_in.weight", f1, cin, cin * k2), b("conv_in.bias", f1)];
        match self.cell {
            Cell::Rim | Cell::Gdn => specs.extend([
                w("gru.gates.weight", 2 * f2, f1 + f2, (f1 + f2) * k2),
                b("gru.gates.bias", 2 * f2),
                w("gru.candidate.weight", f2, f1 + f2, (f1 + f2) * k2),
                b("gru.candidate.bias", f2),
            ]),
            Cell::Ffn => specs.extend([w("hidden.weight", f2, f1, f1 * k2), b("hidden.bias", f2)]),
        }
        match self.layout {
            // transpose conv: each output pixel sees about f2 * 9 / 4 inputs
            Layout::Strided => specs.push(w("conv_mid.weight", f2, f3, (f2 * k2).div_ceil(4))),
            Layout::Dilated => specs.push(w("conv_mid.weight", f3, f2, f2 * k2)),
        }
        specs.extend([b("conv_mid.bias", f3), w("conv_out.weight", c, f3, f3 * k2), b("conv_out.bias", c)]);
        specs.push(ParamSpec { name: "phi_eps", shape: vec![1], fan_in: None });
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub fan_in: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Core<P> {
    Gru(GruWeights<P>),
    Relu(ConvWeights<P>),
}

/// Every parameter of a cell, generic over storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<P> {
    pub conv_in: ConvWeights<P>,
    pub core: Core<P>,
    pub conv_mid: ConvWeights<P>,
    pub conv_out: ConvWeights<P>,
    pub phi_eps: P,
}

impl<P> Weights<P> {
    /// Entries in [`RimConfig::param_specs`] order.
    pub fn entries(&self) -> Vec<&P> {
        let mut v = vec![&self.conv_in.weight, &self.conv_in.bias];
        match &self.core {
            Core::Gru(g) => v.extend([&g.gates.weight, &g.gates.bias, &g.candidate.weight, &g.candidate.bias]),
            Core::Relu(c) => v.extend([&c.weight, &c.bias]),
        }
        v.extend([&self.conv_mid.weight, &self.conv_mid.bias, &self.conv_out.weight, &self.conv_out.bias]);
        v.push(&self.phi_eps);
        v
    }

    pub fn entries_mut(&mut self) -> Vec<&mut P> {
        let mut v = vec![&mut self.conv_in.weight, &mut self.conv_in.bias];
        match &mut self.core {
            Core::Gru(g) => {
                v.extend([&mut g.gates.weight, &mut g.gates.bias, &mut g.candidate.weight, &mut g.candidate.bias])
            }
            Core::Relu(c) => v.extend([&mut c.weight, &mut c.bias]),
        }
        v.extend([
            &mut self.conv_mid.weight,
            &mut self.conv_mid.bias,
            &mut self.conv_out.weight,
            &mut self.conv_out.bias,
        ]);
        v.push(&mut self.phi_eps);
        v
    }

    /// Rebuilds from entries in storage order.
    pub fn from_entries(cell: Cell, items: Vec<P>) -> Result<Self> {
        let expected = if cell == Cell::Ffn { 9 } else { 11 };
        if items.len() != expected {
            return Err(invalid(format!("expected {expected} parameter entries, got {}", items.len())));
        }
        let mut it = items.into_iter();
        let mut next = || it.next().expect("length checked");
        let mut conv = || ConvWeights { weight: next(), bias: next() };
        let conv_in = conv();
        let core = if cell == Cell::Ffn {
            Core::Relu(conv())
        } else {
            let gates = conv();
            Core::Gru(GruWeights { gates, candidate: conv() })
        };
        let conv_mid = conv();
        let conv_out = conv();
        Ok(Weights { conv_in, core, conv_mid, conv_out, phi_eps: next() })
    }

    pub fn map<Q>(&self, cell: Cell, f: impl FnMut(&P) -> Q) -> Weights<Q> {
        let items = self.entries().into_iter().map(f).collect();
        Weights::from_entries(cell, items).expect("same layout")
    }
}

/// Parameters at rest.
#[derive(Clone, Debug, PartialEq)]
pub struct RimParams<T: Element> {
    pub config: RimConfig,
    pub weights: Weights<Tensor<T>>,
}

/// Deterministic initialisation: weights uniform in `+-1/sqrt(fan_in)`,
/// biases zero, `phi_eps = 0`.
pub fn rim_init<T: Element>(config: &RimConfig, seed: u64) -> Result<RimParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = config
        .param_specs()
        .into_iter()
        .map(|spec| match spec.fan_in {
            Some(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::rand_uniform(spec.shape, -bound, bound, &mut rng)
            }
            None => Tensor::zeros(spec.shape),
        })
        .collect();
    Ok(RimParams { config: config.clone(), weights: Weights::from_entries(config.cell, items)? })
}

impl<T: Element> RimParams<T> {
    /// Builds from named tensors, checking names and shapes against the
    /// configuration.
    pub fn from_named(config: &RimConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != named.len() {
            return Err(invalid(format!("expected {} parameters, got {}", specs.len(), named.len())));
        }
        let mut items = Vec::with_capacity(named.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name {
                return Err(invalid(format!("expected parameter {}, found {name}", spec.name)));
            }
            if spec.shape != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: t.shape().to_vec(),
                    rhs: spec.shape.clone(),
                });
            }
            items.push(t);
        }
        Ok(RimParams { config: config.clone(), weights: Weights::from_entries(config.cell, items)? })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        self.config.param_specs().into_iter().map(|s| s.name).zip(self.weights.entries()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.weights.entries().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> RimParams<U> {
        RimParams { config: self.config.clone(), weights: self.weights.map(self.config.cell, |t| t.cast()) }
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Rim<'t, T> {
        let weights =
            self.weights.map(
                self.config.cell,
                |t| {
                    if trainable {
                        tape.leaf(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                },
            );
        Rim { config: self.config.clone(), weights }
    }
}

/// A cell whose parameters live on a tape.
pub struct Rim<'t, T: Element> {
    pub config: RimConfig,
    pub weights: Weights<Var<'t, T>>,
}

/// Rollout recorded on a tape.
pub struct GraphTrajectory<'t, T: Element> {
    pub etas: Vec<Var<'t, T>>,
    pub xs: Vec<Var<'t, T>>,
    pub state: Option<Var<'t, T>>,
}

impl<'t, T: Element> Rim<'t, T> {
    fn tape(&self) -> &'t Tape<T> {
        self.weights.phi_eps.tape()
    }

    fn check_image(&self, v: Var<'t, T>, what: &'static str) -> Result<()> {
        let s = v.shape();
        if s.len() != 4 || s[1] != self.config.channels {
            return Err(Error::ShapeMismatch { op: what, lhs: s, rhs: vec![self.config.channels] });
        }
        Ok(())
    }

    /// Zero state for a batch of `n` images of `h x w`; `None` for the
    /// stateless cell.
    pub fn initial_state(&self, n: usize, h: usize, w: usize) -> Option<Var<'t, T>> {
        match self.config.cell {
            Cell::Ffn => None,
            Cell::Rim | Cell::Gdn => {
                let (sh, sw) = self.config.state_hw(h, w);
                Some(self.tape().constant(Tensor::zeros([n, self.config.widths[1], sh, sw])))
            }
        }
    }

    fn encode(&self, grad: Var<'t, T>, eta: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let input = match eta {
            Some(eta) => Var::concat(&[grad, eta])?,
            None => grad,
        };
        let d = self.config.dilation_schedule();
        let c = &self.weights.conv_in;
        input.conv2d(c.weight, Some(c.bias), self.config.stride(), d[0])?.tanh()
    }

    fn decode(&self, hidden: Var<'t, T>, hw: (usize, usize)) -> Result<Var<'t, T>> {
        let d = self.config.dilation_schedule();
        let mid = &self.weights.conv_mid;
        let up = match self.config.layout {
            Layout::Strided => hidden.conv2d_transpose(mid.weight, Some(mid.bias), 2, d[2], hw)?,
            Layout::Dilated => hidden.conv2d(mid.weight, Some(mid.bias), 1, d[2])?,
        };
        let out = &self.weights.conv_out;
        up.tanh()?.conv2d(out.weight, Some(out.bias), 1, d[3])
    }

    /// Increment and next state for any cell type. `state` must be `Some`
    /// exactly when the cell is recurrent.
    pub fn increment(
        &self,
        grad: Var<'t, T>,
        eta: Var<'t, T>,
        state: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
        self.check_image(grad, "cell gradient input")?;
        self.check_image(eta, "cell estimate input")?;
        let (gs, es) = (grad.shape(), eta.shape());
        if gs != es {
            return Err(Error::ShapeMismatch { op: "cell inputs", lhs: gs, rhs: es });
        }
        let hw = (es[2], es[3]);
        let d = self.config.dilation_schedule();
        let features = match self.config.cell {
            Cell::Gdn => self.encode(grad, None)?,
            Cell::Rim | Cell::Ffn => self.encode(grad, Some(eta))?,
        };
        let (hidden, next) = match (&self.weights.core, state) {
            (Core::Gru(g), Some(s)) => {
                let s2 = gru_step(features, s, g, d[1])?;
                (s2, Some(s2))
            }
            (Core::Relu(c), None) => (features.conv2d(c.weight, Some(c.bias), 1, d[1])?.relu()?, None),
            (Core::Gru(_), None) => return Err(invalid("recurrent cell needs a state")),
            (Core::Relu(_), Some(_)) => return Err(invalid("stateless cell takes no state")),
        };
        Ok((self.decode(hidden, hw)?, next))
    }

    /// `(eta + d_eta, s')` for the standard cell.
    pub fn rim_step(&self, grad: Var<'t, T>, eta: Var<'t, T>, state: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.expect_cell(Cell::Rim)?;
        let (delta, next) = self.increment(grad, eta, Some(state))?;
        Ok((eta.add(delta)?, next.expect("recurrent")))
    }

    /// `(d_eta, s')` for the gradient-only cell.
    pub fn gdn_step(&self, grad: Var<'t, T>, state: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.expect_cell(Cell::Gdn)?;
        // the estimate is ignored; pass the gradient for the shape check
        let (delta, next) = self.increment(grad, grad, Some(state))?;
        Ok((delta, next.expect("recurrent")))
    }

    /// `d_eta` for the stateless cell.
    pub fn ffn_step(&self, grad: Var<'t, T>, eta: Var<'t, T>) -> Result<Var<'t, T>> {
        self.expect_cell(Cell::Ffn)?;
        Ok(self.increment(grad, eta, None)?.0)
    }

    fn expect_cell(&self, cell: Cell) -> Result<()> {
        if self.config.cell == cell {
            Ok(())
        } else {
            Err(invalid(format!("{cell:?} step called on a {:?} cell", self.config.cell)))
        }
    }

    /// `steps` updates from `eta0`, recomputing the likelihood gradient
    /// before each one.
    pub fn rollout(
        &self,
        op: &Rc<LinearOperator>,
        y: Var<'t, T>,
        variance: Var<'t, T>,
        eta0: Var<'t, T>,
        steps: usize,
    ) -> Result<GraphTrajectory<'t, T>> {
        self.check_image(eta0, "initial estimate")?;
        let s = eta0.shape();
        let mut state = self.initial_state(s[0], s[2], s[3]);
        let mut etas = vec![eta0];
        let mut xs = vec![eta0.sigmoid()?];
        let mut eta = eta0;
        for _ in 0..steps {
            let grad = likelihood::grad_var(op, y, variance, self.weights.phi_eps, eta, self.config.grad_space)?;
            let (delta, next) = self.increment(grad, eta, state)?;
            eta = eta.add(delta)?;
            state = next;
            etas.push(eta);
            xs.push(eta.sigmoid()?);
        }
        Ok(GraphTrajectory { etas, xs, state })
    }
}

/// Values of a finished rollout: `steps + 1` estimates, starting point first.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Element> {
    pub etas: Vec<Tensor<T>>,
    pub xs: Vec<Tensor<T>>,
    pub state: Option<Tensor<T>>,
}

impl<T: Element> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn last(&self) -> &Tensor<T> {
        self.xs.last().expect("trajectory holds the starting point")
    }
}

/// Rollout without gradient tracking. Each step records on a fresh tape, so
/// memory does not grow with `steps`. `eta0` defaults to
/// `logit(clip(A^T y))`.
pub fn rim_rollout<T: Element>(
    params: &RimParams<T>,
    op: &Rc<LinearOperator>,
    obs: &Observation<T>,
    steps: usize,
    eta0: Option<Tensor<T>>,
) -> Result<Trajectory<T>> {
    if steps == 0 {
        return Err(invalid("rollout needs at least one step"));
    }
    let eta0 = match eta0 {
        Some(e) => e,
        None => likelihood::initial_eta(op, obs, params.config.delta)?,
    };
    let s = eta0.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape(s));
    }
    let variance = obs.variance();
    let mut state: Option<Tensor<T>> = None;
    let mut etas = vec![eta0.clone()];
    let mut xs = vec![likelihood::link_forward(&eta0)];
    let mut eta = eta0;
    for t in 0..steps {
        let tape = Tape::new();
        let rim = params.bind(&tape, false);
        let st = match (&state, t) {
            (_, 0) => rim.initial_state(s[0], s[2], s[3]),
            (Some(v), _) => Some(tape.constant(v.clone())),
            (None, _) => None,
        };
        let e = tape.constant(eta.clone());
        let grad = likelihood::grad_var(
            op,
            tape.constant(obs.y.clone()),
            tape.constant(variance.clone()),
            rim.weights.phi_eps,
            e,
            params.config.grad_space,
        )?;
        let (delta, next) = rim.increment(grad, e, st)?;
        eta = (*e.add(delta)?.value()).clone();
        state = next.map(|v| (*v.value()).clone());
        xs.push(likelihood::link_forward(&eta));
        etas.push(eta.clone());
    }
    Ok(Trajectory { etas, xs, state })
}

/// One step of gradient ascent on the log posterior:
/// `x + gamma * (grad_x + prior_grad(x))`.
pub fn classical_map_step<T: Element>(
    x: &Tensor<T>,
    grad_x: &Tensor<T>,
    prior_grad: impl Fn(&Tensor<T>) -> Tensor<T>,
    gamma: f64,
) -> Result<Tensor<T>> {
    let prior = prior_grad(x);
    let g = T::of(gamma);
    let total = grad_x.zip_map(&prior, "classical_map_step", |a, b| a + b)?;
    x.zip_map(&total, "classical_map_step", |v, d| v + g * d)
}

#[cfg(test)]
mod tests;
