//! Task specifications such as `denoise:sigma=0.1,quantize` or
//! `fourier:p=0.5,seed=3`.

use std::fmt;
use std::str::FromStr;

use rim_core::operators::OperatorSpec;

use crate::error::CliError;

/// A corruption: forward operator, noise level and quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub operator: OperatorSpec,
    pub sigma: f64,
    pub quantize: bool,
}

impl Task {
    /// Task label used in output files.
    pub fn label(&self) -> &'static str {
        match self.operator {
            OperatorSpec::Identity => "denoise",
            OperatorSpec::Mask { .. } => "inpaint",
            OperatorSpec::Bicubic { .. } => "sr",
            ref other => other.name(),
        }
    }
}

fn bad(spec: &str, why: impl fmt::Display) -> CliError {
    CliError::Usage(format!("invalid task `{spec}`: {why}"))
}

impl FromStr for Task {
    type Err = CliError;

    /// Grammar:
    ///
    /// ```text
    /// denoise:sigma=<r>[,quantize]
    /// inpaint:p=<r>,seed=<n>[,sigma=<r>]
    /// gaussian|bernoulli|fourier:p=<r>,seed=<n>[,sigma=<r>]
    /// sr:factor=<2|3|4>,sigma=<r>
    /// ```
    fn from_str(spec: &str) -> Result<Self, CliError> {
        let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
        let mut p = None;
        let mut seed = None;
        let mut sigma = None;
        let mut factor = None;
        let mut quantize = false;
        for item in rest.split(',').filter(|s| !s.is_empty()) {
            match item.split_once('=') {
                Some(("p", v)) => p = Some(v.parse::<f64>().map_err(|e| bad(spec, e))?),
                Some(("seed", v)) => seed = Some(v.parse::<u64>().map_err(|e| bad(spec, e))?),
                Some(("sigma", v)) => sigma = Some(v.parse::<f64>().map_err(|e| bad(spec, e))?),
                Some(("factor", v)) => factor = Some(v.parse::<usize>().map_err(|e| bad(spec, e))?),
                None if item == "quantize" => quantize = true,
                _ => return Err(bad(spec, format!("unknown key `{item}`"))),
            }
        }
        let need_p = |p: Option<f64>| p.ok_or_else(|| bad(spec, "missing p"));
        let need_seed = |s: Option<u64>| s.ok_or_else(|| bad(spec, "missing seed"));
        let operator = match kind {
            "denoise" => {
                if p.is_some() || seed.is_some() || factor.is_some() || sigma.is_none() {
                    return Err(bad(spec, "expected denoise:sigma=<r>[,quantize]"));
                }
                OperatorSpec::Identity
            }
            "inpaint" => OperatorSpec::Mask { p: need_p(p)?, seed: need_seed(seed)? },
            "gaussian" => OperatorSpec::Gaussian { p: need_p(p)?, seed: need_seed(seed)? },
            "bernoulli" => OperatorSpec::Bernoulli { p: need_p(p)?, seed: need_seed(seed)? },
            "fourier" => OperatorSpec::Fourier { p: need_p(p)?, seed: need_seed(seed)? },
            "sr" => {
                let f = factor.ok_or_else(|| bad(spec, "missing factor"))?;
                if !(2..=4).contains(&f) {
                    return Err(bad(spec, "factor must be 2, 3 or 4"));
                }
                if sigma.is_none() {
                    return Err(bad(spec, "missing sigma"));
                }
                OperatorSpec::Bicubic { factor: f }
            }
            other => return Err(bad(spec, format!("unknown task kind `{other}`"))),
        };
        if kind != "denoise" && quantize {
            return Err(bad(spec, "quantize applies to denoising only"));
        }
        if kind != "sr" && factor.is_some() {
            return Err(bad(spec, "factor applies to sr only"));
        }
        if kind == "sr" && (p.is_some() || seed.is_some()) {
            return Err(bad(spec, "sr takes factor and sigma only"));
        }
        let sigma = sigma.unwrap_or(0.0);
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(bad(spec, "sigma must be finite and non-negative"));
        }
        if let Some(p) = p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(bad(spec, "p must lie in (0, 1]"));
            }
        }
        Ok(Task { operator, sigma, quantize })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.operator {
            OperatorSpec::Identity => {
                write!(f, "denoise:sigma={}", self.sigma)?;
                if self.quantize {
                    write!(f, ",quantize")?;
                }
                Ok(())
            }
            OperatorSpec::Bicubic { factor } => write!(f, "sr:factor={factor},sigma={}", self.sigma),
            OperatorSpec::Mask { p, seed }
            | OperatorSpec::Gaussian { p, seed }
            | OperatorSpec::Bernoulli { p, seed }
            | OperatorSpec::Fourier { p, seed } => {
                write!(f, "{}:p={p},seed={seed}", self.label())?;
                if self.sigma > 0.0 {
                    write!(f, ",sigma={}", self.sigma)?;
                }
                Ok(())
            }
        }
    }
}
