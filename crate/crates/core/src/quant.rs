//! Uniform weight and activation quantizers with fixed output post-scaling.
//!
//! An input `x` is normalized to `clip(gamma * x / s, alpha, beta)`,
//! discretized to an integer code (round, or signum for 1-bit quantizers)
//! and mapped back to `code / gamma`. Only the scale `s` depends on the
//! data; the output grid is fixed, so `gamma * x_q` is always an integer.

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, NodeId, Scalar, Tape, Tensor};

/// `E|x| / sigma` for a zero-mean Gaussian, i.e. `sqrt(2 / pi)`.
const GAUSSIAN_MEAN_ABS: f64 = 0.797_884_560_802_865_4;

/// Clip coverage used by [`init_scale`], in fitted standard deviations.
const INIT_COVERAGE_SIGMAS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantRole {
    Weight,
    Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discretization {
    /// Round half away from zero.
    Round,
    /// `{-1, +1}` for weights (`sign(0) = +1`), `{0, 1}` for activations
    /// (threshold at 0.5).
    Signum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerSpec {
    pub bits: u32,
    pub role: QuantRole,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    scale: f64,
    pub scale_trainable: bool,
    pub discretization: Discretization,
}

impl QuantizerSpec {
    /// Builds a quantizer with the bit-specific constants for `role`.
    pub fn new(bits: u32, role: QuantRole, scale: f64) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::invalid(format!("unsupported bit-width {bits}")));
        }
        check_scale(scale)?;
        let (alpha, beta, gamma, discretization) = match (role, bits) {
            (QuantRole::Weight, 1) => (-1.0, 1.0, 1.0, Discretization::Signum),
            (QuantRole::Activation, 1) => (0.0, 1.0, 1.0, Discretization::Signum),
            (QuantRole::Weight, b) => {
                let half = f64::from(1u32 << (b - 1));
                (-half, half - 1.0, half, Discretization::Round)
            }
            (QuantRole::Activation, b) => {
                let full = f64::from(1u32 << b);
                (0.0, full - 1.0, full, Discretization::Round)
            }
        };
        Ok(Self {
            bits,
            role,
            alpha,
            beta,
            gamma,
            scale,
            scale_trainable: false,
            discretization,
        })
    }

    pub fn weight(bits: u32, scale: f64) -> Result<Self> {
        Self::new(bits, QuantRole::Weight, scale)
    }

    pub fn activation(bits: u32, scale: f64) -> Result<Self> {
        Self::new(bits, QuantRole::Activation, scale)
    }

    pub fn with_trainable_scale(mut self, trainable: bool) -> Self {
        self.scale_trainable = trainable;
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) -> Result<()> {
        check_scale(scale)?;
        self.scale = scale;
        Ok(())
    }

    /// Distance between adjacent output levels.
    pub fn level_spacing(&self) -> f64 {
        1.0 / self.gamma
    }

    /// Unclipped normalized value `gamma * x / s`.
    #[inline]
    pub fn scaled<T: Scalar>(&self, x: T, s: T) -> T {
        T::from_f64_lossy(self.gamma) * x / s
    }

    /// `clip(gamma * x / s, alpha, beta)`.
    #[inline]
    pub fn normalize<T: Scalar>(&self, x: T, s: T) -> T {
        let lo = T::from_f64_lossy(self.alpha);
        let hi = T::from_f64_lossy(self.beta);
        self.scaled(x, s).max(lo).min(hi)
    }

    /// Integer code of an already normalized value.
    #[inline]
    pub fn discretize<T: Scalar>(&self, wn: T) -> i32 {
        match (self.discretization, self.role) {
            (Discretization::Round, _) => wn.round().to_i32().unwrap_or(0),
            (Discretization::Signum, QuantRole::Weight) => {
                if wn >= T::zero() {
                    1
                } else {
                    -1
                }
            }
            (Discretization::Signum, QuantRole::Activation) => {
                i32::from(wn >= T::from_f64_lossy(0.5))
            }
        }
    }

    /// Code for a raw input value at scale `s`.
    #[inline]
    pub fn code<T: Scalar>(&self, x: T, s: T) -> i32 {
        self.discretize(self.normalize(x, s))
    }

    /// Whether `gamma * x / s` lies strictly inside the clip range, i.e.
    /// where the straight-through estimator passes gradient.
    #[inline]
    pub fn passes_gradient<T: Scalar>(&self, x: T, s: T) -> bool {
        let v = self.scaled(x, s);
        v > T::from_f64_lossy(self.alpha) && v < T::from_f64_lossy(self.beta)
    }

    /// Admissible code values.
    pub fn code_range(&self) -> (i32, i32) {
        match (self.discretization, self.role) {
            (Discretization::Signum, QuantRole::Weight) => (-1, 1),
            (Discretization::Signum, QuantRole::Activation) => (0, 1),
            (Discretization::Round, _) => (self.alpha as i32, self.beta as i32),
        }
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("quantizer scale must be positive, got {scale}")))
    }
}

fn check_finite<T: Scalar>(x: &[T]) -> Result<()> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("quantizer input"));
    }
    Ok(())
}

/// Quantizes `x`, returning `x_q = code / gamma` and the integer codes.
pub fn quantize_forward<T: Scalar>(x: &Tensor<T>, spec: &QuantizerSpec) -> Result<(Tensor<T>, Vec<i32>)> {
    let s = T::from_f64_lossy(spec.scale);
    let (values, codes) = quantize_slice(x.data(), spec, s)?;
    Ok((Tensor::new(x.shape().to_vec(), values)?, codes))
}

fn quantize_slice<T: Scalar>(x: &[T], spec: &QuantizerSpec, s: T) -> Result<(Vec<T>, Vec<i32>)> {
    check_finite(x)?;
    if s <= T::zero() {
        return Err(Error::invalid("quantizer scale must be positive"));
    }
    let inv_gamma = T::one() / T::from_f64_lossy(spec.gamma);
    let codes: Vec<i32> = x.iter().map(|&v| spec.code(v, s)).collect();
    let values = codes
        .iter()
        .map(|&c| T::from_i32(c).unwrap() * inv_gamma)
        .collect();
    Ok((values, codes))
}

/// Straight-through backward pass. Returns the input gradient and, when the
/// scale is trainable, the scale gradient.
pub fn quantize_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &QuantizerSpec,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Option<T>)> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape(
            "quantize_backward",
            format!("{:?} vs {:?}", x.shape(), upstream.shape()),
        ));
    }
    check_finite(x.data())?;
    let s = T::from_f64_lossy(spec.scale);
    let (gx, gs) = ste_grads(x.data(), upstream.data(), spec, s);
    let gx = Tensor::new(x.shape().to_vec(), gx)?;
    Ok((gx, spec.scale_trainable.then_some(gs)))
}

fn ste_grads<T: Scalar>(x: &[T], up: &[T], spec: &QuantizerSpec, s: T) -> (Vec<T>, T) {
    let inv_s = T::one() / s;
    let mut gs = T::zero();
    let gx = x
        .iter()
        .zip(up)
        .map(|(&v, &g)| {
            if spec.passes_gradient(v, s) {
                gs = gs - g * v / (s * s);
                g * inv_s
            } else {
                T::zero()
            }
        })
        .collect();
    (gx, gs)
}

/// Tape op: inputs `[x, s]`, straight-through gradient into both.
struct QuantizeOp {
    spec: QuantizerSpec,
}

impl<T: Scalar> CustomOp<T> for QuantizeOp {
    fn name(&self) -> &'static str {
        "quantize"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, upstream: &[T]) -> Vec<Option<Vec<T>>> {
        let s = inputs[1].data()[0];
        let (gx, gs) = ste_grads(inputs[0].data(), upstream, &self.spec, s);
        vec![Some(gx), Some(vec![gs])]
    }
}

/// Records a quantizer on the tape. `scale` must be a one-element node;
/// its current value overrides `spec`'s stored scale.
pub fn quantize_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    scale: NodeId,
    spec: &QuantizerSpec,
) -> Result<(NodeId, Vec<i32>)> {
    if tape.value(scale).numel() != 1 {
        return Err(Error::shape(
            "quantize",
            format!("scale must have one element, got {:?}", tape.shape(scale)),
        ));
    }
    let s = tape.value(scale).data()[0];
    let (values, codes) = quantize_slice(tape.value(x).data(), spec, s)?;
    let out = Tensor::new(tape.shape(x).to_vec(), values)?;
    let id = tape.custom(Box::new(QuantizeOp { spec: spec.clone() }), &[x, scale], out)?;
    Ok((id, codes))
}

/// Records the cached quantized weights of `qp` as a function of its latent
/// node and scale node. The cache must be current (see
/// [`QuantizedParam::refresh`]).
pub fn quantized_param_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    qp: &QuantizedParam<T>,
    latent: NodeId,
    scale: NodeId,
) -> Result<NodeId> {
    if tape.shape(latent) != qp.latent.shape() || tape.value(scale).numel() != 1 {
        return Err(Error::shape(
            "quantize",
            format!(
                "latent {:?} and scale {:?} for parameter {:?}",
                tape.shape(latent),
                tape.shape(scale),
                qp.latent.shape()
            ),
        ));
    }
    tape.custom(
        Box::new(QuantizeOp { spec: qp.spec.clone() }),
        &[latent, scale],
        qp.quantized().clone(),
    )
}

/// Number of positions whose codes differ.
pub fn count_codes_changed(prev_codes: &[i32], codes: &[i32]) -> Result<usize> {
    if prev_codes.len() != codes.len() {
        return Err(Error::shape(
            "count_codes_changed",
            format!("{} vs {} codes", prev_codes.len(), codes.len()),
        ));
    }
    Ok(prev_codes.iter().zip(codes).filter(|(a, b)| a != b).count())
}

/// Initial scale: the wider side of the clip interval covers three standard
/// deviations of a zero-mean Gaussian fitted through `mean(|w|)`.
pub fn init_scale<T: Scalar>(latent: &Tensor<T>, spec: &QuantizerSpec) -> Result<f64> {
    if latent.is_empty() {
        return Err(Error::invalid("init_scale: empty tensor"));
    }
    check_finite(latent.data())?;
    let mean_abs =
        latent.data().iter().map(|v| v.as_f64().abs()).sum::<f64>() / latent.numel() as f64;
    if mean_abs == 0.0 {
        return Ok(1.0);
    }
    let coverage = INIT_COVERAGE_SIGMAS * mean_abs / GAUSSIAN_MEAN_ABS;
    Ok(coverage * spec.gamma / spec.alpha.abs().max(spec.beta))
}

/// Latent weights together with their current and previous discrete codes.
#[derive(Clone, Debug)]
pub struct QuantizedParam<T> {
    pub latent: Tensor<T>,
    pub spec: QuantizerSpec,
    codes: Vec<i32>,
    prev_codes: Vec<i32>,
    quantized: Tensor<T>,
}

impl<T: Scalar> QuantizedParam<T> {
    /// Quantizes `latent` once; previous codes start equal to the current ones.
    pub fn new(latent: Tensor<T>, spec: QuantizerSpec) -> Result<Self> {
        if latent.is_empty() {
            return Err(Error::invalid("quantized parameter must be non-empty"));
        }
        let (quantized, codes) = quantize_forward(&latent, &spec)?;
        Ok(Self {
            latent,
            spec,
            prev_codes: codes.clone(),
            codes,
            quantized,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn prev_codes(&self) -> &[i32] {
        &self.prev_codes
    }

    pub fn quantized(&self) -> &Tensor<T> {
        &self.quantized
    }

    /// Re-quantizes the (possibly updated) latent weights, shifting the
    /// current codes into `prev_codes`. Returns the number of transitions.
    pub fn refresh(&mut self) -> Result<usize> {
        let (quantized, codes) = quantize_forward(&self.latent, &self.spec)?;
        self.prev_codes = std::mem::replace(&mut self.codes, codes);
        self.quantized = quantized;
        count_codes_changed(&self.prev_codes, &self.codes)
    }

    /// Resets the transition baseline to the current latent weights.
    pub fn rebase(&mut self) -> Result<()> {
        self.refresh()?;
        self.prev_codes.clone_from(&self.codes);
        Ok(())
    }

    /// Normalized latent weights `clip(gamma * w / s, alpha, beta)`.
    pub fn normalized(&self) -> Vec<T> {
        let s = T::from_f64_lossy(self.spec.scale());
        self.latent.data().iter().map(|&v| self.spec.normalize(v, s)).collect()
    }
}
