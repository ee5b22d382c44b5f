//! Training objectives and the two-task update rule.
//!
//! `L1` is the projection-residual energy (ENoPR) of the projector, `L2` the
//! recognition loss. The projector parameters receive a convex combination
//! `alpha * g1 + (1 - alpha) * g2` of the two task gradients; the recognizer
//! parameters follow `L2` alone.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Squared `g1 - g2` norm below which every `alpha` gives the same direction.
pub const MGDA_DEGENERATE: f64 = 1e-24;

/// ENoPR of one `[T, H, W, C]` residual: `(1/HWC) * sum_j ||p_j||²` over the
/// length-T fibers.
pub fn enopr(residual: &Tensor) -> Result<f64> {
    let [_, h, w, c] = *residual.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "residual must be [T, H, W, C], got {:?}",
            residual.shape()
        )));
    };
    if !residual.is_finite() {
        return Err(Error::ObjectiveNotFinite);
    }
    let energy: f64 = residual.data().iter().map(|v| v * v).sum();
    Ok(energy / (h * w * c) as f64)
}

/// Dataset ENoPR: the mean of [`enopr`] over samples.
pub fn enopr_mean(residuals: &[Tensor]) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::InvalidConfig("ENoPR over an empty set".into()));
    }
    let mut total = 0.0;
    for r in residuals {
        total += enopr(r)?;
    }
    Ok(total / residuals.len() as f64)
}

/// One-hot target with `1 - smoothing` on `label` and `smoothing / (K - 1)` elsewhere.
pub fn smoothed_target(classes: usize, label: usize, smoothing: f64) -> Result<Vec<f64>> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidConfig(format!(
            "label smoothing {smoothing} not in [0, 1)"
        )));
    }
    let off = smoothing / (classes - 1) as f64;
    Ok((0..classes)
        .map(|k| if k == label { 1.0 - smoothing } else { off })
        .collect())
}

/// Softmax cross-entropy of `logits` against the smoothed one-hot target.
pub fn cross_entropy(logits: &[f64], label: usize, smoothing: f64) -> Result<f64> {
    let target = smoothed_target(logits.len(), label, smoothing)?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::ObjectiveNotFinite);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    Ok(target
        .iter()
        .zip(logits)
        .map(|(t, l)| if *t == 0.0 { 0.0 } else { -t * (l - log_z) })
        .sum())
}

/// Minimizer over `alpha ∈ [0, 1]` of `||alpha g1 + (1 - alpha) g2||²`.
pub fn mgda_alpha(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::ShapeMismatch(format!(
            "task gradients have lengths {} and {}",
            g1.len(),
            g2.len()
        )));
    }
    if g1.iter().chain(g2).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in g1.iter().zip(g2) {
        let d = b - a;
        num += d * b;
        den += d * d;
    }
    if den < MGDA_DEGENERATE {
        return Ok(0.5);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Gradients of one joint step.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradients {
    /// `∇_Θ1 L1`
    pub g1: Vec<f64>,
    /// `∇_Θ1 L2`
    pub g2: Vec<f64>,
    /// `∇_Θ2 L2`
    pub h2: Vec<f64>,
}

impl TaskGradients {
    pub fn validate(&self) -> Result<()> {
        if self.g1.len() != self.g2.len() {
            return Err(Error::ShapeMismatch(format!(
                "task gradients have lengths {} and {}",
                self.g1.len(),
                self.g2.len()
            )));
        }
        if self
            .g1
            .iter()
            .chain(&self.g2)
            .chain(&self.h2)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFiniteGradient);
        }
        Ok(())
    }

    /// `alpha * g1 + (1 - alpha) * g2`.
    pub fn combined(&self, alpha: f64) -> Vec<f64> {
        self.g1
            .iter()
            .zip(&self.g2)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect()
    }
}

/// How the projector gradient mixes the two objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JointMode {
    /// Projector trained on `L1` first, then frozen while the recognizer trains.
    Separate,
    Constant(f64),
    Mgda,
    Scheduled {
        gamma: f64,
        lambda: f64,
    },
}

impl JointMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            JointMode::Constant(a) if !(0.0..=1.0).contains(&a) => Err(Error::InvalidConfig(
                format!("constant alpha {a} not in [0, 1]"),
            )),
            JointMode::Scheduled { gamma, lambda } => SchedulerConfig {
                gamma,
                lambda,
                total: 1,
                iteration: 1,
            }
            .validate(),
            _ => Ok(()),
        }
    }

    /// The `alpha` for this step. `iteration` is 1-based out of `total`.
    /// [`JointMode::Separate`] has no single alpha and is rejected.
    pub fn resolve_alpha(
        &self,
        grads: &TaskGradients,
        iteration: usize,
        total: usize,
    ) -> Result<f64> {
        match *self {
            JointMode::Constant(a) => {
                self.validate()?;
                Ok(a)
            }
            JointMode::Mgda => mgda_alpha(&grads.g1, &grads.g2),
            JointMode::Scheduled { gamma, lambda } => scale_schedule(&SchedulerConfig {
                gamma,
                lambda,
                total,
                iteration,
            }),
            JointMode::Separate => Err(Error::InvalidConfig(
                "separate training has no joint alpha".into(),
            )),
        }
    }
}

impl fmt::Display for JointMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JointMode::Separate => write!(f, "separate"),
            JointMode::Constant(a) => write!(f, "constant:{a}"),
            JointMode::Mgda => write!(f, "mgda"),
            JointMode::Scheduled { gamma, lambda } => write!(f, "sched:{gamma},{lambda}"),
        }
    }
}

impl FromStr for JointMode {
    type Err = Error;

    /// `separate`, `constant:<alpha>`, `mgda` or `sched:<gamma>,<lambda>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown joint mode {s:?}"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let mode = match s.trim() {
            "separate" => JointMode::Separate,
            "mgda" => JointMode::Mgda,
            other => {
                if let Some(a) = other.strip_prefix("constant:") {
                    JointMode::Constant(num(a)?)
                } else if let Some(rest) = other.strip_prefix("sched:") {
                    let (g, l) = rest.split_once(',').ok_or_else(bad)?;
                    JointMode::Scheduled {
                        gamma: num(g)?,
                        lambda: num(l)?,
                    }
                } else {
                    return Err(bad());
                }
            }
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// Apply one joint update in place:
/// `Θ1 -= eta * (alpha g1 + (1 - alpha) g2)` and `Θ2 -= eta * h2`.
pub fn joint_step(
    theta1: &mut [f64],
    theta2: &mut [f64],
    grads: &TaskGradients,
    eta: f64,
    alpha: f64,
) -> Result<()> {
    grads.validate()?;
    if theta1.len() != grads.g1.len() || theta2.len() != grads.h2.len() {
        return Err(Error::ShapeMismatch(
            "parameter and gradient lengths differ".into(),
        ));
    }
    for (p, (a, b)) in theta1.iter_mut().zip(grads.g1.iter().zip(&grads.g2)) {
        *p -= eta * (alpha * a + (1.0 - alpha) * b);
    }
    for (p, g) in theta2.iter_mut().zip(&grads.h2) {
        *p -= eta * g;
    }
    Ok(())
}

/// Inputs of the annealed scale schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulerConfig {
    /// Fraction of iterations spent in the first branch.
    pub gamma: f64,
    /// Value reached at the end of the first branch.
    pub lambda: f64,
    /// Total iterations `M`.
    pub total: usize,
    /// Current iteration `m`, 1-based.
    pub iteration: usize,
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "schedule gamma {} not in (0, 1)",
                self.gamma
            )));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "schedule lambda {} not in (0, 1]",
                self.lambda
            )));
        }
        if self.iteration < 1 || self.total < 1 {
            return Err(Error::InvalidConfig(
                "schedule iterations are 1-based".into(),
            ));
        }
        Ok(())
    }
}

/// First branch: `½(1 + cos(π log_b m))` with `b = (γM)^{π / arccos(2λ - 1)}`.
/// Equals 1 at `m = 1` and `λ` at `m = γM`.
pub fn schedule_warm_branch(gamma: f64, lambda: f64, total: usize, m: f64) -> f64 {
    let split = gamma * total as f64;
    // log_b m = ln m · arccos(2λ - 1) / (π ln γM), finite also for λ = 1
    let angle = (2.0 * lambda - 1.0).clamp(-1.0, 1.0).acos();
    let log_b = if split > 1.0 {
        m.ln() * angle / (PI * split.ln())
    } else {
        0.0
    };
    0.5 * (1.0 + (PI * log_b).cos())
}

/// Second branch: `½λ(1 + cos(π log_{(1-γ)M} m))`, held at 0 from its first zero
/// `m = (1-γ)M` onwards.
pub fn schedule_decay_branch(gamma: f64, lambda: f64, total: usize, m: f64) -> f64 {
    let base = (1.0 - gamma) * total as f64;
    if base <= 1.0 || m >= base {
        return 0.0;
    }
    0.5 * lambda * (1.0 + (PI * m.ln() / base.ln()).cos())
}

/// Annealed weight on the projector objective, clamped to `[0, 1]`.
pub fn scale_schedule(cfg: &SchedulerConfig) -> Result<f64> {
    cfg.validate()?;
    let m = cfg.iteration as f64;
    let split = cfg.gamma * cfg.total as f64;
    let alpha = if m < split {
        schedule_warm_branch(cfg.gamma, cfg.lambda, cfg.total, m)
    } else {
        schedule_decay_branch(cfg.gamma, cfg.lambda, cfg.total, m)
    };
    Ok(alpha.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    #[test]
    fn enopr_examples() {
        assert_eq!(enopr(&Tensor::zeros(&[4, 2, 2, 3])).unwrap(), 0.0);
        assert_eq!(enopr(&Tensor::full(&[4, 1, 1, 1], 1.0)).unwrap(), 4.0);
        assert!(enopr(&Tensor::full(&[4, 1, 1, 1], f64::NAN)).is_err());
    }

    #[test]
    fn enopr_matches_nested_loops() {
        let mut rng = Rng::new(3);
        let (t, h, w, c) = (8, 8, 8, 3);
        let p = Tensor::from_fn(&[t, h, w, c], |_| rng.range(-1.0, 1.0));
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut fiber = 0.0;
                    for f in 0..t {
                        fiber += p.get(&[f, y, x, ch]).powi(2);
                    }
                    total += fiber;
                }
            }
        }
        let want = total / (h * w * c) as f64;
        assert!((enopr(&p).unwrap() - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn cross_entropy_examples() {
        let ln4 = 4f64.ln();
        assert!((cross_entropy(&[0.0; 4], 2, 0.0).unwrap() - ln4).abs() < 1e-15);
        assert!((cross_entropy(&[0.3; 4], 1, 0.1).unwrap() - ln4).abs() < 1e-15);
        assert!(cross_entropy(&[0.0, 80.0, 0.0], 1, 0.0).unwrap() < 1e-30);
        assert!(matches!(
            cross_entropy(&[0.0; 4], 4, 0.0),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(cross_entropy(&[0.0], 0, 0.0).is_err());
    }

    #[test]
    fn mgda_examples() {
        let g = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert_eq!(mgda_alpha(&neg, &g).unwrap(), 0.5);
        let double: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        assert_eq!(mgda_alpha(&double, &g).unwrap(), 0.0);
        assert_eq!(mgda_alpha(&g, &double).unwrap(), 1.0);
        assert_eq!(mgda_alpha(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(mgda_alpha(&g, &g).unwrap(), 0.5);
        assert!(matches!(
            mgda_alpha(&[f64::NAN], &[1.0]),
            Err(Error::NonFiniteGradient)
        ));
        assert!(mgda_alpha(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn joint_step_on_quadratics() {
        // L1 = θ1², L2 = (θ1 - 2)² + θ2² at θ1 = 1, θ2 = 2
        let mut t1 = [1.0];
        let mut t2 = [2.0];
        let grads = TaskGradients {
            g1: vec![2.0],
            g2: vec![-2.0],
            h2: vec![4.0],
        };
        let alpha = JointMode::Mgda.resolve_alpha(&grads, 1, 10).unwrap();
        assert_eq!(alpha, 0.5);
        joint_step(&mut t1, &mut t2, &grads, 0.1, alpha).unwrap();
        assert_eq!(t1, [1.0]);
        assert!((t2[0] - 1.6).abs() < 1e-15);

        let mut t1 = [1.0];
        let mut t2 = [2.0];
        joint_step(&mut t1, &mut t2, &grads, 0.1, 0.0).unwrap();
        assert!((t1[0] - 1.2).abs() < 1e-15);

        let mut t1 = [1.0];
        let mut t2 = [2.0];
        joint_step(&mut t1, &mut t2, &grads, 0.0, 0.5).unwrap();
        assert_eq!((t1, t2), ([1.0], [2.0]));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("mgda".parse::<JointMode>().unwrap(), JointMode::Mgda);
        assert_eq!(
            "separate".parse::<JointMode>().unwrap(),
            JointMode::Separate
        );
        assert_eq!(
            "constant:0.5".parse::<JointMode>().unwrap(),
            JointMode::Constant(0.5)
        );
        assert_eq!(
            "sched:0.2,0.3".parse::<JointMode>().unwrap(),
            JointMode::Scheduled {
                gamma: 0.2,
                lambda: 0.3
            }
        );
        assert!("constant:1.5".parse::<JointMode>().is_err());
        assert!("sched:1.2,0.3".parse::<JointMode>().is_err());
        assert!("sched:0.2,0".parse::<JointMode>().is_err());
        assert!("adam".parse::<JointMode>().is_err());
        for s in ["mgda", "separate", "constant:0.25", "sched:0.1,0.1"] {
            let m: JointMode = s.parse().unwrap();
            assert_eq!(m.to_string().parse::<JointMode>().unwrap(), m);
        }
    }

    #[test]
    fn schedule_endpoints() {
        let (gamma, lambda, total) = (0.2, 0.3, 1000);
        let at = |m| {
            scale_schedule(&SchedulerConfig {
                gamma,
                lambda,
                total,
                iteration: m,
            })
            .unwrap()
        };
        assert_eq!(at(1), 1.0);
        let warm_end = schedule_warm_branch(gamma, lambda, total, gamma * total as f64);
        assert!((warm_end - lambda).abs() < 1e-12);
        assert_eq!(at(800), 0.0);
        assert_eq!(at(1000), 0.0);
        assert!(at(200) <= lambda);
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        let cfg = SchedulerConfig {
            gamma: 0.0,
            lambda: 0.5,
            total: 10,
            iteration: 1,
        };
        assert!(scale_schedule(&cfg).is_err());
        let cfg = SchedulerConfig {
            gamma: 0.5,
            lambda: 0.5,
            total: 10,
            iteration: 0,
        };
        assert!(scale_schedule(&cfg).is_err());
    }
}
