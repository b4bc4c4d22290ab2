//! Targeted range attack: projected gradient descent on the squared distance of
//! the prediction from the target-range center, with lattice rounding and early
//! stopping once the rounded perturbation already lands inside the range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageU8;
use crate::metrics::{lp_norms, Norms};
use crate::model::VictimNetwork;
use crate::tensor::Tensor;

/// Closed interval `[lower, upper]` with `lower < upper`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRange {
    lower: f64,
    upper: f64,
}

impl TargetRange {
    pub const MAKE_HEALTHY: TargetRange = TargetRange { lower: 18.7, upper: 24.9 };
    pub const MAKE_OBESE: TargetRange = TargetRange { lower: 30.0, upper: 40.0 };

    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::InvalidRange { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "make-healthy" => Some(Self::MAKE_HEALTHY),
            "make-obese" => Some(Self::MAKE_OBESE),
            _ => None,
        }
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }
}

impl std::str::FromStr for TargetRange {
    type Err = Error;

    /// Parses `L:U`.
    fn from_str(s: &str) -> Result<Self> {
        let (l, u) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("range must look like L:U, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad range bound {v:?}")))
        };
        TargetRange::new(parse(l)?, parse(u)?)
    }
}

/// `((U + L) / 2, (U - L) / 2)`.
pub fn center_radius(range: &TargetRange) -> (f64, f64) {
    (
        (range.upper + range.lower) / 2.0,
        (range.upper - range.lower) / 2.0,
    )
}

pub fn in_range(value: f64, range: &TargetRange) -> bool {
    range.lower <= value && value <= range.upper
}

/// Squared distance to `center` and its derivative with respect to the prediction.
pub fn objective(f_value: f64, center: f64) -> (f64, f64) {
    let d = f_value - center;
    (d * d, 2.0 * d)
}

/// Distance from `f_value` to the closer bound, zero inside the range.
pub fn nearest_bound_distance(f_value: f64, range: &TargetRange) -> f64 {
    if in_range(f_value, range) {
        0.0
    } else {
        (f_value - range.lower).abs().min((f_value - range.upper).abs())
    }
}

fn check_same_shape(image: &ImageU8, delta: &Tensor) -> Result<()> {
    if delta.shape() != image.shape() {
        return Err(Error::ShapeMismatch {
            expected: image.shape().to_vec(),
            actual: delta.shape().to_vec(),
        });
    }
    Ok(())
}

/// Clamp `delta` so that `image + delta` lies in the box `[0, 255]`.
pub fn project_delta(image: &ImageU8, delta: &Tensor) -> Result<Tensor> {
    check_same_shape(image, delta)?;
    let mut out = delta.clone();
    project_in_place(image, out.data_mut());
    Ok(out)
}

fn project_in_place(image: &ImageU8, delta: &mut [f64]) {
    for (d, &p) in delta.iter_mut().zip(image.pixels()) {
        let p = f64::from(p);
        *d = d.clamp(-p, 255.0 - p);
    }
}

/// Integer perturbation on the pixel lattice, same shape as the attacked image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Perturbation {
    shape: [usize; 3],
    values: Vec<i16>,
}

impl Perturbation {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            values: vec![0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn values(&self) -> &[i16] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    /// `image + self`, which is always a valid image for perturbations built by this module.
    pub fn apply(&self, image: &ImageU8) -> Result<ImageU8> {
        if image.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_vec(),
                actual: image.shape().to_vec(),
            });
        }
        let pixels = image
            .pixels()
            .iter()
            .zip(&self.values)
            .map(|(&p, &d)| {
                let v = i16::from(p) + d;
                u8::try_from(v).map_err(|_| {
                    Error::InvalidArgument(format!("perturbed pixel {v} leaves [0, 255]"))
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        ImageU8::new(self.shape[0], self.shape[1], self.shape[2], pixels)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.to_vec(),
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("perturbation shape is valid")
    }
}

/// Move `image + delta` to the nearest lattice point (ties away from zero),
/// clamped to `{0..255}`, and return the integer offset from `image`.
pub fn round_delta(image: &ImageU8, delta: &Tensor) -> Result<Perturbation> {
    check_same_shape(image, delta)?;
    Ok(round_slice(image, delta.data()))
}

fn round_slice(image: &ImageU8, delta: &[f64]) -> Perturbation {
    let values = image
        .pixels()
        .iter()
        .zip(delta)
        .map(|(&p, &d)| {
            let p = f64::from(p);
            let target = (p + d).round().clamp(0.0, 255.0);
            (target - p) as i16
        })
        .collect();
    Perturbation {
        shape: image.shape(),
        values,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSchedule {
    #[default]
    Constant,
    /// `eta / sqrt(k + 1)` at iteration `k` (0-based).
    InvSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub max_iterations: usize,
    pub step_size: f64,
    pub schedule: StepSchedule,
    pub rounded_check_period: usize,
    /// Carried for campaign bookkeeping; the attack itself is deterministic.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            step_size: 1.0,
            schedule: StepSchedule::Constant,
            rounded_check_period: 1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max iterations must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step size must be a positive finite number, got {}",
                self.step_size
            )));
        }
        if self.rounded_check_period == 0 {
            return Err(Error::InvalidArgument("rounded check period must be >= 1".into()));
        }
        Ok(())
    }

    fn step_at(&self, k: usize) -> f64 {
        match self.schedule {
            StepSchedule::Constant => self.step_size,
            StepSchedule::InvSqrt => self.step_size / ((k + 1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub delta: Perturbation,
    pub success: bool,
    pub iterations_used: usize,
    pub f_before: f64,
    pub f_after: f64,
    pub norms: Norms,
}

/// Observer for the continuous iterate; used by tests that inspect the trajectory.
pub trait AttackObserver {
    /// Called after iteration `k` (1-based) with the projected continuous `delta`
    /// and the relaxed prediction at the iterate the step was taken from.
    fn on_step(&mut self, k: usize, delta: &[f64], f_relaxed: f64);
}

impl AttackObserver for () {
    fn on_step(&mut self, _: usize, _: &[f64], _: f64) {}
}

pub fn attack(
    net: &VictimNetwork,
    image: &ImageU8,
    range: &TargetRange,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    attack_observed(net, image, range, cfg, &mut ())
}

pub fn attack_observed(
    net: &VictimNetwork,
    image: &ImageU8,
    range: &TargetRange,
    cfg: &AttackConfig,
    observer: &mut dyn AttackObserver,
) -> Result<AttackResult> {
    cfg.validate()?;
    if image.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: net.input_shape().to_vec(),
            actual: image.shape().to_vec(),
        });
    }
    let (center, _) = center_radius(range);
    let x = image.to_tensor();
    let f_before = net.predict(&x)?;
    if !f_before.is_finite() {
        return Err(Error::NonFinitePrediction { iteration: 0 });
    }

    let k_max = cfg.max_iterations;
    let mut delta = vec![0.0; image.len()];
    let mut point = x.clone();
    let mut k = 0;
    loop {
        if k % cfg.rounded_check_period == 0 || k == k_max {
            let rounded = round_slice(image, &delta);
            let f_rounded = if rounded.is_zero() {
                f_before
            } else {
                predict_rounded(net, image, &rounded)?
            };
            if !f_rounded.is_finite() {
                return Err(Error::NonFinitePrediction { iteration: k });
            }
            if in_range(f_rounded, range) {
                return Ok(finish(rounded, true, k, f_before, f_rounded));
            }
            if k == k_max {
                return Ok(finish(rounded, false, k, f_before, f_rounded));
            }
        }

        for ((p, &xi), &d) in point.data_mut().iter_mut().zip(x.data()).zip(&delta) {
            *p = xi + d;
        }
        let (f_relaxed, grad) = net.predict_with_gradient(&point)?;
        if !f_relaxed.is_finite() {
            return Err(Error::NonFinitePrediction { iteration: k });
        }
        let (_, dloss) = objective(f_relaxed, center);
        let scale = cfg.step_at(k) * dloss;
        for (d, g) in delta.iter_mut().zip(grad.data()) {
            *d -= scale * g;
        }
        project_in_place(image, &mut delta);
        k += 1;
        observer.on_step(k, &delta, f_relaxed);
    }
}

fn predict_rounded(net: &VictimNetwork, image: &ImageU8, rounded: &Perturbation) -> Result<f64> {
    net.forward(&rounded.apply(image)?)
}

fn finish(delta: Perturbation, success: bool, iterations: usize, f_before: f64, f_after: f64) -> AttackResult {
    let norms = lp_norms(delta.values());
    AttackResult {
        delta,
        success,
        iterations_used: iterations,
        f_before,
        f_after,
        norms,
    }
}
