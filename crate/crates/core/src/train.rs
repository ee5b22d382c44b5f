//! Training loops: projector alone on ENoPR, and projector plus recognizer
//! under one of the joint modes.

use crate::datagen::LabeledClip;
use crate::error::{Error, Result};
use crate::numeric::{Graph, NormMode, NormStats, Objective, ParamSet, Rng, Tensor, Var};
use crate::objectives::{mgda_alpha, scale_schedule, smoothed_target, JointMode, SchedulerConfig};
use crate::pwtp::{forward_graph, PwtpConfig, PwtpParams};
use crate::recognizer::{head_graph, predict, temporal_mean, HeadParams, HeadVars, InputMode};

/// Momentum of the normalization running averages.
pub const RUNNING_MOMENTUM: f64 = 0.9;
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub warmup_steps: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub label_smoothing: f64,
    /// Projector steps on ENoPR before the recognizer stage in separate mode.
    pub pretrain_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 2000,
            batch: 8,
            warmup_steps: 100,
            clip_norm: 20.0,
            label_smoothing: 0.1,
            pretrain_steps: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.steps == 0 || self.batch == 0 {
            return bad("steps and batch must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("gradient clip must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label smoothing must be in [0, 1)");
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`: linear warmup `lr (step+1) / warmup`,
    /// then `lr ½(1 + cos(π step / steps))`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            let p = step.min(self.steps) as f64 / self.steps as f64;
            self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `v = μ v + g + wd θ`, `θ -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((x, gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *x;
                *x -= lr * *vi;
            }
        }
    }
}

/// Scale all gradient tensors so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

fn grad_list(g: &Graph, grads: &crate::numeric::Gradients, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| grads.get_or_zeros(v, g.shape(v)).into_data())
        .collect()
}

fn check_finite(grads: &[Vec<f64>]) -> Result<()> {
    if grads.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient)
    }
}

/// Segments of several clips stacked to `[B·S, T, H, W, C]`.
pub fn stack_segments(clips: &[&LabeledClip]) -> Result<Tensor> {
    let parts: Vec<Tensor> = clips.iter().map(|c| c.clip.clone()).collect();
    let stacked = Tensor::stack(&parts)?;
    let mut shape = stacked.shape().to_vec();
    if shape.len() != 6 {
        return Err(Error::ShapeMismatch(format!(
            "clips must be [S, T, H, W, C], stacked to {shape:?}"
        )));
    }
    let bs = shape[0] * shape[1];
    shape.splice(0..2, [bs]);
    stacked.reshape(&shape)
}

/// Deterministic minibatches: a fresh shuffle of all indices each epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            rng: Rng::new(seed),
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n).max(1),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// One row of a training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub enopr: f64,
    /// Recognition loss; NaN in unsupervised training.
    pub loss2: f64,
    /// Weight on the ENoPR gradient; NaN where it does not apply.
    pub alpha: f64,
    pub lr: f64,
    /// Norms of the ENoPR and recognition gradients on the projector, before
    /// mixing; NaN where not computed.
    pub g1_norm: f64,
    pub g2_norm: f64,
}

pub fn unsup_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,enopr,lr\n");
    for r in rows {
        s += &format!("{},{},{}\n", r.step, r.enopr, r.lr);
    }
    s
}

pub fn joint_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,enopr,loss2,alpha\n");
    for r in rows {
        s += &format!("{},{},{},{}\n", r.step, r.enopr, r.loss2, r.alpha);
    }
    s
}

fn pwtp_grads(
    params: &PwtpParams,
    cfg: &PwtpConfig,
    clip: &Tensor,
) -> Result<(f64, Vec<Vec<f64>>, Vec<NormStats>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let x = g.constant(clip.clone());
    let nodes = forward_graph(&mut g, &vars, params, cfg, x, NormMode::Batch)?;
    let value = g.value(nodes.enopr).item();
    if !value.is_finite() {
        return Err(Error::ObjectiveNotFinite);
    }
    let grads = g.backward(nodes.enopr);
    Ok((
        value,
        grad_list(&g, &grads, &vars.trainable()),
        nodes.norm_stats,
    ))
}

/// Minimize ENoPR over the training clips. Returns the per-step log; each row
/// records the batch ENoPR before that step's update.
pub fn train_unsupervised(
    params: &mut PwtpParams,
    cfg: &PwtpConfig,
    tc: &TrainConfig,
    clips: &[LabeledClip],
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    tc.validate()?;
    cfg.validate()?;
    params.check_config(cfg)?;
    if clips.is_empty() {
        return Err(Error::InvalidConfig("no training clips".into()));
    }
    let mut sampler = BatchSampler::new(clips.len(), tc.batch, tc.seed);
    let mut opt = Sgd::new(tc.momentum, tc.weight_decay);
    let mut log = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch: Vec<&LabeledClip> = sampler.next_batch().iter().map(|&i| &clips[i]).collect();
        let x = stack_segments(&batch)?;
        let (enopr, mut grads, stats) = pwtp_grads(params, cfg, &x)?;
        check_finite(&grads)?;
        let g1_norm = norm(&grads);
        clip_global_norm(&mut grads.iter_mut().collect::<Vec<_>>(), tc.clip_norm);
        let lr = tc.lr_at(step);
        opt.step(params.trainable_mut(), &grads, lr);
        params.update_running_stats(&stats, RUNNING_MOMENTUM);
        let row = LogRow {
            step,
            enopr,
            loss2: f64::NAN,
            alpha: f64::NAN,
            lr,
            g1_norm,
            g2_norm: f64::NAN,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(log)
}

/// Mean per-segment ENoPR of `clips`. `Batch` mode normalizes each chunk with its own
/// statistics, matching the objective seen during training.
pub fn evaluate_enopr(
    params: &PwtpParams,
    cfg: &PwtpConfig,
    clips: &[LabeledClip],
    mode: NormMode,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::InvalidConfig("no clips to evaluate".into()));
    }
    let mut total = 0.0;
    let mut segments = 0;
    for chunk in clips.chunks(EVAL_CHUNK) {
        let refs: Vec<&LabeledClip> = chunk.iter().collect();
        let x = stack_segments(&refs)?;
        let g_count = x.shape()[0];
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let xv = g.constant(x);
        let nodes = forward_graph(&mut g, &vars, params, cfg, xv, mode)?;
        total += g.value(nodes.enopr).item() * g_count as f64;
        segments += g_count;
    }
    Ok(total / segments as f64)
}

/// Recognizer inputs `[B, S, H, W, C]` on `g` for a batch of clips.
fn head_inputs(
    g: &mut Graph,
    theta1: Option<(&PwtpParams, &crate::pwtp::PwtpVars)>,
    cfg: &PwtpConfig,
    clips: &[&LabeledClip],
    input: InputMode,
    mode: NormMode,
) -> Result<(Var, Option<crate::pwtp::PwtpNodes>)> {
    let b = clips.len();
    match input {
        InputMode::Da => {
            let (params, vars) = theta1.ok_or_else(|| {
                Error::InvalidConfig("dynamic-appearance input needs projector parameters".into())
            })?;
            let x = stack_segments(clips)?;
            let [bs, _, h, w, c] = *x.shape() else {
                unreachable!()
            };
            let xv = g.constant(x);
            let nodes = forward_graph(g, vars, params, cfg, xv, mode)?;
            let da = g.reshape(nodes.da, &[b, bs / b, h, w, c]);
            Ok((da, Some(nodes)))
        }
        InputMode::RgbBaseline => {
            let means: Vec<Tensor> = clips
                .iter()
                .map(|c| temporal_mean(&c.clip))
                .collect::<Result<_>>()?;
            Ok((g.constant(Tensor::stack(&means)?), None))
        }
    }
}

fn targets(clips: &[&LabeledClip], classes: usize, smoothing: f64) -> Result<Vec<f64>> {
    let mut t = Vec::with_capacity(clips.len() * classes);
    for c in clips {
        t.extend(smoothed_target(classes, c.label, smoothing)?);
    }
    Ok(t)
}

/// Everything a joint run produces.
#[derive(Clone, Debug)]
pub struct JointOutcome {
    pub theta1: PwtpParams,
    pub theta2: HeadParams,
    pub log: Vec<LogRow>,
}

/// Per-step quantities of one joint evaluation on a batch.
struct JointEval {
    enopr: f64,
    loss2: f64,
    /// `∇_Θ1 ENoPR`, `∇_Θ1 L2` per tensor; empty when the projector is not involved.
    g1: Vec<Vec<f64>>,
    g2: Vec<Vec<f64>>,
    h2: Vec<Vec<f64>>,
    stats: Vec<NormStats>,
}

fn joint_eval(
    theta1: &PwtpParams,
    theta2: &HeadParams,
    cfg: &PwtpConfig,
    clips: &[&LabeledClip],
    input: InputMode,
    train_theta1: bool,
    smoothing: f64,
) -> Result<JointEval> {
    let mut g = Graph::new();
    let mode = if train_theta1 {
        NormMode::Batch
    } else {
        NormMode::Running
    };
    let pv = theta1.bind(&mut g, train_theta1);
    let hv: HeadVars = theta2.bind(&mut g, true);
    let (x, nodes) = head_inputs(&mut g, Some((theta1, &pv)), cfg, clips, input, mode)?;
    let logits = head_graph(&mut g, &hv, x)?;
    let loss = g.cross_entropy(logits, targets(clips, theta2.classes(), smoothing)?);
    let loss2 = g.value(loss).item();
    let enopr = nodes.as_ref().map_or(f64::NAN, |n| g.value(n.enopr).item());
    if !loss2.is_finite() {
        return Err(Error::ObjectiveNotFinite);
    }
    let grads2 = g.backward(loss);
    let h2 = grad_list(&g, &grads2, &hv.trainable());
    let (g1, g2, stats) = match nodes {
        Some(n) if train_theta1 => {
            let t1 = pv.trainable();
            let g2 = grad_list(&g, &grads2, &t1);
            let grads1 = g.backward(n.enopr);
            (grad_list(&g, &grads1, &t1), g2, n.norm_stats)
        }
        _ => (Vec::new(), Vec::new(), Vec::new()),
    };
    check_finite(&h2)?;
    check_finite(&g1)?;
    check_finite(&g2)?;
    Ok(JointEval {
        enopr,
        loss2,
        g1,
        g2,
        h2,
        stats,
    })
}

fn norm(v: &[Vec<f64>]) -> f64 {
    v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

/// Train projector and recognizer together.
///
/// `input` selects what the recognizer sees. With [`InputMode::RgbBaseline`] the
/// projector is not used and `mode` is ignored. With [`JointMode::Separate`]
/// the projector is first trained on ENoPR for `pretrain_steps`, then frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_joint(
    theta1: PwtpParams,
    theta2: HeadParams,
    cfg: &PwtpConfig,
    tc: &TrainConfig,
    mode: JointMode,
    input: InputMode,
    clips: &[LabeledClip],
    mut on_step: impl FnMut(&LogRow),
) -> Result<JointOutcome> {
    tc.validate()?;
    cfg.validate()?;
    mode.validate()?;
    theta1.check_config(cfg)?;
    if clips.is_empty() {
        return Err(Error::InvalidConfig("no training clips".into()));
    }
    let mut theta1 = theta1;
    let mut theta2 = theta2;
    let mut log = Vec::new();
    let mut step_offset = 0;

    if input == InputMode::Da && mode == JointMode::Separate {
        let pre = TrainConfig {
            steps: tc.pretrain_steps.max(1),
            ..tc.clone()
        };
        let rows = train_unsupervised(&mut theta1, cfg, &pre, clips, |r| {
            let r = LogRow { alpha: 1.0, ..*r };
            on_step(&r);
        })?;
        step_offset = rows.len();
        log.extend(rows.into_iter().map(|r| LogRow { alpha: 1.0, ..r }));
    }
    let train_theta1 = input == InputMode::Da && mode != JointMode::Separate;

    let mut sampler = BatchSampler::new(clips.len(), tc.batch, tc.seed ^ 0x5eed);
    let mut opt1 = Sgd::new(tc.momentum, tc.weight_decay);
    let mut opt2 = Sgd::new(tc.momentum, tc.weight_decay);
    for step in 0..tc.steps {
        let batch: Vec<&LabeledClip> = sampler.next_batch().iter().map(|&i| &clips[i]).collect();
        let ev = joint_eval(
            &theta1,
            &theta2,
            cfg,
            &batch,
            input,
            train_theta1,
            tc.label_smoothing,
        )?;
        let lr = tc.lr_at(step);
        let (g1_norm, g2_norm) = if train_theta1 {
            (norm(&ev.g1), norm(&ev.g2))
        } else {
            (f64::NAN, f64::NAN)
        };
        let mut h2 = ev.h2;
        let alpha = if train_theta1 {
            let alpha = match mode {
                JointMode::Mgda => mgda_alpha(&flat(&ev.g1), &flat(&ev.g2))?,
                JointMode::Constant(a) => a,
                JointMode::Scheduled { gamma, lambda } => scale_schedule(&SchedulerConfig {
                    gamma,
                    lambda,
                    total: tc.steps,
                    iteration: step + 1,
                })?,
                JointMode::Separate => unreachable!(),
            };
            let mut d1: Vec<Vec<f64>> = ev
                .g1
                .iter()
                .zip(&ev.g2)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
                        .collect()
                })
                .collect();
            let mut all: Vec<&mut Vec<f64>> = d1.iter_mut().chain(h2.iter_mut()).collect();
            clip_global_norm(&mut all, tc.clip_norm);
            opt1.step(theta1.trainable_mut(), &d1, lr);
            theta1.update_running_stats(&ev.stats, RUNNING_MOMENTUM);
            alpha
        } else {
            clip_global_norm(&mut h2.iter_mut().collect::<Vec<_>>(), tc.clip_norm);
            if input == InputMode::Da {
                0.0
            } else {
                f64::NAN
            }
        };
        opt2.step(theta2.trainable_mut(), &h2, lr);
        let row = LogRow {
            step: step + step_offset,
            enopr: ev.enopr,
            loss2: ev.loss2,
            alpha,
            lr,
            g1_norm,
            g2_norm,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(JointOutcome {
        theta1,
        theta2,
        log,
    })
}

/// Logits `[K]` for every clip, projector in running-statistics mode.
pub fn predict_logits(
    theta1: Option<&PwtpParams>,
    theta2: &HeadParams,
    cfg: &PwtpConfig,
    clips: &[LabeledClip],
    input: InputMode,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EVAL_CHUNK) {
        let refs: Vec<&LabeledClip> = chunk.iter().collect();
        let mut g = Graph::new();
        let pv = theta1.map(|p| (p, p.bind(&mut g, false)));
        let hv = theta2.bind(&mut g, false);
        let (x, _) = head_inputs(
            &mut g,
            pv.as_ref().map(|(p, v)| (*p, v)),
            cfg,
            &refs,
            input,
            NormMode::Running,
        )?;
        let logits = head_graph(&mut g, &hv, x)?;
        out.extend(
            g.value(logits)
                .data()
                .chunks(theta2.classes())
                .map(<[f64]>::to_vec),
        );
    }
    Ok(out)
}

/// Top-1 accuracy over `clips`.
pub fn accuracy(
    theta1: Option<&PwtpParams>,
    theta2: &HeadParams,
    cfg: &PwtpConfig,
    clips: &[LabeledClip],
    input: InputMode,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::InvalidConfig("no clips to evaluate".into()));
    }
    let logits = predict_logits(theta1, theta2, cfg, clips, input)?;
    let correct = logits
        .iter()
        .zip(clips)
        .filter(|(l, c)| predict(l) == c.label)
        .count();
    Ok(correct as f64 / clips.len() as f64)
}

/// ENoPR of a clip stack `[G, T, H, W, C]` as a function of the projector's
/// trainable parameters (batch normalization statistics).
pub struct EnoprObjective {
    pub cfg: PwtpConfig,
    pub template: PwtpParams,
    pub clip: Tensor,
}

impl Objective for EnoprObjective {
    fn value(&mut self, p: &ParamSet) -> Result<f64> {
        Ok(self.value_and_grad(p)?.0)
    }

    fn value_and_grad(&mut self, p: &ParamSet) -> Result<(f64, ParamSet)> {
        let mut params = self.template.clone();
        params.set_trainable(p)?;
        let (v, grads, _) = pwtp_grads(&params, &self.cfg, &self.clip)?;
        let names: Vec<String> = p.names().map(str::to_string).collect();
        let set = names
            .into_iter()
            .zip(grads)
            .zip(params.trainable().iter().map(|(_, t)| t.shape().to_vec()))
            .map(|((n, g), shape)| (n, Tensor::new(&shape, g).unwrap()))
            .collect();
        Ok((v, set))
    }
}

/// Recognition loss of a batch of clips through projector and recognizer, as a
/// function of `theta1/...` and `theta2/...` trainable parameters.
pub struct JointLossObjective {
    pub cfg: PwtpConfig,
    pub template: PwtpParams,
    pub clips: Vec<LabeledClip>,
    pub classes: usize,
    pub smoothing: f64,
}

impl JointLossObjective {
    /// Trainable parameters in the naming this objective expects.
    pub fn params(theta1: &PwtpParams, theta2: &HeadParams) -> ParamSet {
        let mut set = theta1.trainable().with_prefix(crate::io::THETA1);
        set.extend(theta2.to_param_set().with_prefix(crate::io::THETA2))
            .unwrap();
        set
    }
}

impl Objective for JointLossObjective {
    fn value(&mut self, p: &ParamSet) -> Result<f64> {
        Ok(self.value_and_grad(p)?.0)
    }

    fn value_and_grad(&mut self, p: &ParamSet) -> Result<(f64, ParamSet)> {
        let mut theta1 = self.template.clone();
        theta1.set_trainable(&p.strip_prefix(crate::io::THETA1))?;
        let theta2 = HeadParams::from_param_set(&p.strip_prefix(crate::io::THETA2))?;
        if theta2.classes() != self.classes {
            return Err(Error::ShapeMismatch(
                "classifier width differs from class count".into(),
            ));
        }
        let refs: Vec<&LabeledClip> = self.clips.iter().collect();
        let ev = joint_eval(
            &theta1,
            &theta2,
            &self.cfg,
            &refs,
            InputMode::Da,
            true,
            self.smoothing,
        )?;
        let shapes = Self::params(&theta1, &theta2);
        let set = shapes
            .iter()
            .zip(ev.g2.into_iter().chain(ev.h2))
            .map(|((n, t), g)| (n.to_string(), Tensor::new(t.shape(), g).unwrap()))
            .collect();
        Ok((ev.loss2, set))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_shape() {
        let tc = TrainConfig {
            lr: 0.1,
            steps: 100,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        assert!((tc.lr_at(0) - 0.01).abs() < 1e-15);
        assert!((tc.lr_at(9) - 0.1).abs() < 1e-15);
        for s in 10..99 {
            assert!(tc.lr_at(s + 1) <= tc.lr_at(s));
        }
        assert!((tc.lr_at(50) - 0.05).abs() < 1e-15);
        assert!(tc.lr_at(100).abs() < 1e-15);
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut p = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let mut opt = Sgd::new(0.0, 0.0);
        opt.step(vec![&mut p], &[vec![0.5, -1.0]], 0.1);
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Tensor::new(&[1], vec![0.0]).unwrap();
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(vec![&mut p], &[vec![1.0]], 1.0);
        opt.step(vec![&mut p], &[vec![1.0]], 1.0);
        assert!((p.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut a = vec![3.0, 0.0];
        let mut b = vec![4.0];
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (b[0] - 0.8).abs() < 1e-15);
        let mut c = vec![0.1];
        clip_global_norm(&mut [&mut c], 1.0);
        assert_eq!(c, vec![0.1]);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 5, 3);
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut again = BatchSampler::new(10, 5, 3);
        assert_eq!(again.next_batch(), BatchSampler::new(10, 5, 3).next_batch());
    }

    #[test]
    fn csv_headers() {
        let row = LogRow {
            step: 0,
            enopr: 1.5,
            loss2: 0.5,
            alpha: 0.0,
            lr: 0.1,
            g1_norm: f64::NAN,
            g2_norm: f64::NAN,
        };
        assert_eq!(unsup_csv(&[row]), "step,enopr,lr\n0,1.5,0.1\n");
        assert_eq!(joint_csv(&[row]), "step,enopr,loss2,alpha\n0,1.5,0.5,0\n");
    }
}
